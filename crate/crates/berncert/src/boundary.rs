//! Residual system whose roots are points on the smoothed decision
//! boundary between the top-two classes.
//!
//! Given smoothed logits `beta` and the softmax `S`, the system anchored at
//! a point with rank map `rho` and margin `xi` is
//!
//! ```text
//! phi_0 = beta_rho(1) - beta_rho(2) - xi
//! phi_1 = S_rho(1) - 1/(1+e^-xi)
//! phi_2 = S_rho(2) - 1/(1+e^xi)
//! phi_j = S_rho(j)                 for j >= 3
//! ```
//!
//! With `xi = 0` the first three rows pin the top-two gap to zero and both
//! softmax scores to one half; a positive margin (derived from a finite
//! parameter C as `gap/C`) shifts the target boundary conservatively
//! towards the runner-up. The trailing rows ask the remaining ranked
//! softmax scores to vanish, which softmax can never do exactly, so the
//! system generally has a least-squares minimizer rather than a root and
//! callers read the final residual as a quality signal.
//!
//! `rho` and `xi` are frozen when the system is built. Re-ranking mid-solve
//! would make the residual discontinuous, so the system never re-ranks; a
//! solver wandering across the boundary simply sees `phi_0` change sign.

use nalgebra::{DMatrix, DVector};

use crate::bernstein::BernsteinSmoother;
use crate::error::{Error, Result};
use crate::solvers::ResidualSystem;

/// Softmax with max-subtraction; entries are positive and sum to 1.
pub fn softmax(beta: &[f64]) -> Result<Vec<f64>> {
    if beta.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "softmax input contains non-finite values".into(),
        ));
    }
    let max = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = beta.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Rank map: `rho[r]` is the class holding rank `r` (rank 0 is the argmax).
/// Ties break towards the smaller class index.
pub fn rank_map(beta: &[f64]) -> Result<Vec<usize>> {
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "rank map input contains non-finite values".into(),
        ));
    }
    let mut rho: Vec<usize> = (0..beta.len()).collect();
    // Sort by descending value; sort_by is stable, so equal values keep
    // their ascending index order.
    rho.sort_by(|&a, &b| beta[b].partial_cmp(&beta[a]).unwrap());
    Ok(rho)
}

/// Conservative margin `xi = (beta_rho(1) - beta_rho(2)) / C`; an infinite
/// C turns the margin off.
pub fn conservative_xi(beta: &[f64], rho: &[usize], c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!(
            "C must be positive or infinite, got {c}"
        )));
    }
    if rho.len() < 2 || rho.len() != beta.len() {
        return Err(Error::Shape("rank map needs at least two classes".into()));
    }
    if c.is_infinite() {
        return Ok(0.0);
    }
    let gap = beta[rho[0]] - beta[rho[1]];
    debug_assert!(gap >= 0.0, "rank map must put the larger logit first");
    Ok(gap / c)
}

/// The boundary residual map, anchored to one prediction.
#[derive(Debug, Clone)]
pub struct BoundarySystem<'a> {
    smoother: &'a BernsteinSmoother,
    rho: Vec<usize>,
    xi: f64,
    c_param: f64,
    /// Residual count: min(d, K-1) + 2, capped at d + 1. The cap drops
    /// trailing softmax rows when the feature dimension cannot support
    /// them; the min truncates ranks that do not exist for small K.
    m: usize,
    target_top: f64,
    target_second: f64,
}

impl<'a> BoundarySystem<'a> {
    /// Builds the system from logits already evaluated at the anchor.
    pub fn from_logits(smoother: &'a BernsteinSmoother, beta: &[f64], c: f64) -> Result<Self> {
        let k = smoother.num_classes();
        if k < 2 {
            return Err(Error::Constraint(
                "boundary system needs at least two classes".into(),
            ));
        }
        if beta.len() != k {
            return Err(Error::Shape(format!(
                "got {} logits for a {k}-class smoother",
                beta.len()
            )));
        }
        let rho = rank_map(beta)?;
        let xi = conservative_xi(beta, &rho, c)?;
        let d = smoother.dim();
        let m = (d.min(k - 1) + 2).min(d + 1);
        Ok(Self {
            smoother,
            rho,
            xi,
            c_param: c,
            m,
            target_top: 1.0 / (1.0 + (-xi).exp()),
            target_second: 1.0 / (1.0 + xi.exp()),
        })
    }

    /// Builds the system anchored at a feature-space point.
    pub fn at_anchor(smoother: &'a BernsteinSmoother, anchor: &[f64], c: f64) -> Result<Self> {
        let beta = smoother.eval_multi(anchor)?;
        Self::from_logits(smoother, &beta, c)
    }

    pub fn smoother(&self) -> &BernsteinSmoother {
        self.smoother
    }

    pub fn rho(&self) -> &[usize] {
        &self.rho
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn c_param(&self) -> f64 {
        self.c_param
    }

    pub fn residual_count(&self) -> usize {
        self.m
    }

    fn residual_from_beta(&self, beta: &[f64]) -> Result<DVector<f64>> {
        let s = softmax(beta)?;
        let mut phi = DVector::zeros(self.m);
        phi[0] = beta[self.rho[0]] - beta[self.rho[1]] - self.xi;
        if self.m > 1 {
            phi[1] = s[self.rho[0]] - self.target_top;
        }
        if self.m > 2 {
            phi[2] = s[self.rho[1]] - self.target_second;
        }
        for j in 3..self.m {
            phi[j] = s[self.rho[j - 1]];
        }
        Ok(phi)
    }

    fn jacobian_from_parts(&self, beta: &[f64], grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let s = softmax(beta)?;
        let d = self.smoother.dim();
        // Softmax pulls every class gradient in through the normalizer:
        // dS_i/dx = S_i (g_i - sum_l S_l g_l).
        let mut avg = vec![0.0; d];
        for (l, sl) in s.iter().enumerate() {
            for (j, a) in avg.iter_mut().enumerate() {
                *a += sl * grad[(l, j)];
            }
        }
        let soft_row = |i: usize, j: usize| s[i] * (grad[(i, j)] - avg[j]);
        let mut jac = DMatrix::zeros(self.m, d);
        for j in 0..d {
            jac[(0, j)] = grad[(self.rho[0], j)] - grad[(self.rho[1], j)];
            if self.m > 1 {
                jac[(1, j)] = soft_row(self.rho[0], j);
            }
            if self.m > 2 {
                jac[(2, j)] = soft_row(self.rho[1], j);
            }
            for r in 3..self.m {
                jac[(r, j)] = soft_row(self.rho[r - 1], j);
            }
        }
        Ok(jac)
    }

    /// Residual at a point inside the unit box.
    pub fn residual(&self, x: &[f64]) -> Result<DVector<f64>> {
        let beta = self.smoother.eval_multi(x)?;
        self.residual_from_beta(&beta)
    }

    /// Residual through the polynomial extension; valid at any finite
    /// point, used by solvers whose trial steps leave the box.
    pub fn residual_extended(&self, x: &[f64]) -> Result<DVector<f64>> {
        let beta = self.smoother.eval_extended(x)?;
        self.residual_from_beta(&beta)
    }

    /// Analytic Jacobian of the residual (m x d), inside the box.
    pub fn residual_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let beta = self.smoother.eval_multi(x)?;
        let grad = self.smoother.grad_multi(x)?;
        self.jacobian_from_parts(&beta, &grad)
    }

    /// Jacobian through the polynomial extension.
    pub fn residual_jacobian_extended(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let beta = self.smoother.eval_extended(x)?;
        let grad = self.smoother.grad_extended(x)?;
        self.jacobian_from_parts(&beta, &grad)
    }

    /// Least-squares objective F(x) = 1/2 ||Phi(x)||^2.
    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * self.residual(x)?.norm_squared())
    }
}

impl ResidualSystem for BoundarySystem<'_> {
    fn dim(&self) -> usize {
        self.smoother.dim()
    }

    fn residual_count(&self) -> usize {
        self.m
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.residual_extended(x.as_slice())
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.residual_jacobian_extended(x.as_slice())
    }
}
