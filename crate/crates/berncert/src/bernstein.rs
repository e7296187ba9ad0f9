//! Tensor-product Bernstein smoothing on the unit box.
//!
//! For a bounded `f: [0,1] -> R` the degree-n Bernstein polynomial is
//!
//! ```text
//! B_n(f; x) = sum_{k=0..n} f(k/n) * C(n,k) * x^k * (1-x)^(n-k)
//! ```
//!
//! and the d-dimensional operator applies the same weights per axis, so a
//! K-class head sampled on the regular grid `{0, 1/n, ..., 1}^d` turns into
//! K polynomials sharing one coefficient tensor. Evaluation costs
//! `O(K * (n+1)^d)`, which is why the toolkit targets small `d`.
//!
//! Properties downstream code leans on:
//!
//! * partition of unity: the weights are nonnegative and sum to 1, so every
//!   evaluation is a convex combination of the stored grid samples;
//! * endpoint interpolation: at a corner of the box exactly one weight is 1
//!   and the rest vanish, so corners reproduce stored samples bit for bit;
//! * uniform convergence: `B_n(f) -> f` for continuous `f` as `n` grows,
//!   which makes the smoothed classifier a faithful stand-in for the base
//!   classifier at large degree;
//! * exact gradients: the derivative of a degree-n basis function is
//!   `n * (b_{k-1,n-1} - b_{k,n-1})`, a scaled difference of two
//!   degree-(n-1) basis functions, so no finite differencing is needed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of grid rows a smoother may precompute.
pub const DEFAULT_GRID_CAP: usize = 10_000_000;

/// Binomial coefficient as f64.
///
/// Exact integer arithmetic up to n = 30 (u128 never overflows there), log
/// space above so large degrees cannot overflow.
fn binomial(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    let k = k.min(n - k);
    if n <= 30 {
        let mut c: u128 = 1;
        for i in 0..k {
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
        c as f64
    } else {
        let mut ln = 0.0f64;
        for i in 0..k {
            ln += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        ln.exp()
    }
}

/// All n+1 basis values at `x`, with the endpoint convention 0^0 = 1.
///
/// Endpoints are handled symbolically so corner evaluation is exact. The
/// values are valid for any real `x`; outside `[0,1]` they are simply the
/// polynomial extension (weights may then be negative).
fn basis_row(n: usize, x: f64) -> Vec<f64> {
    if x == 0.0 {
        let mut row = vec![0.0; n + 1];
        row[0] = 1.0;
        return row;
    }
    if x == 1.0 {
        let mut row = vec![0.0; n + 1];
        row[n] = 1.0;
        return row;
    }
    if n <= 30 {
        return (0..=n)
            .map(|k| binomial(n, k) * x.powi(k as i32) * (1.0 - x).powi((n - k) as i32))
            .collect();
    }
    // Magnitudes in log space, signs tracked separately so the polynomial
    // extension stays valid for x outside [0,1].
    let y = 1.0 - x;
    let lax = x.abs().ln();
    let lay = y.abs().ln();
    let mut lnc = 0.0f64;
    let mut row = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mag = (lnc + k as f64 * lax + (n - k) as f64 * lay).exp();
        let neg = (x < 0.0 && k % 2 == 1) != (y < 0.0 && (n - k) % 2 == 1);
        row.push(if neg { -mag } else { mag });
        if k < n {
            lnc += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
        }
    }
    row
}

/// Derivative of every basis function at `x`, via the degree-(n-1) identity.
fn deriv_row(n: usize, x: f64) -> Vec<f64> {
    if n == 0 {
        return vec![0.0];
    }
    let lower = basis_row(n - 1, x);
    let nf = n as f64;
    (0..=n)
        .map(|k| {
            let a = if k == 0 { 0.0 } else { lower[k - 1] };
            let b = if k == n { 0.0 } else { lower[k] };
            nf * (a - b)
        })
        .collect()
}

fn check_unit_interval(x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("coordinate {x} outside [0,1]")));
    }
    Ok(())
}

/// Single basis function `b_{k,n}(x) = C(n,k) x^k (1-x)^(n-k)`.
pub fn bernstein_basis(n: usize, k: usize, x: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain(format!(
            "basis index k={k} exceeds degree n={n}"
        )));
    }
    check_unit_interval(x)?;
    Ok(basis_row(n, x)[k])
}

/// Sum of weighted values that skips zero weights, so one-hot weight rows
/// (the box corners) reproduce the selected value exactly.
fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (w, v) in weights.iter().zip(values) {
        if *w != 0.0 {
            acc += w * v;
        }
    }
    acc
}

/// One-dimensional Bernstein evaluation; `samples[k]` holds `f(k/n)` with
/// `n = samples.len() - 1`.
pub fn eval_1d(samples: &[f64], x: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Shape(format!(
            "eval_1d needs at least two samples, got {}",
            samples.len()
        )));
    }
    check_unit_interval(x)?;
    let row = basis_row(samples.len() - 1, x);
    Ok(weighted_sum(&row, samples))
}

/// A K-class classifier head smoothed by the degree-n Bernstein operator.
///
/// The coefficient tensor stores `f(k/n)` for every grid multi-index `k`,
/// flattened row-major with dimension 0 slowest (row index `r` decodes to
/// digits of `r` in base `n+1`, most significant digit first) and the K
/// class values contiguous per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinSmoother {
    n: usize,
    d: usize,
    k: usize,
    coeffs: Vec<f64>,
}

impl BernsteinSmoother {
    /// Samples `f` on the full grid and stores the coefficient tensor.
    ///
    /// `f` receives a point of `[0,1]^d` and must return `num_classes`
    /// finite values. Sampling is parallelized over grid rows; each row is
    /// independent, so the stored tensor does not depend on thread count.
    pub fn precompute_grid<F>(f: F, n: usize, d: usize, num_classes: usize) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        Self::precompute_grid_with_cap(f, n, d, num_classes, DEFAULT_GRID_CAP)
    }

    /// As [`Self::precompute_grid`] with an explicit cap on `(n+1)^d`.
    pub fn precompute_grid_with_cap<F>(
        f: F,
        n: usize,
        d: usize,
        num_classes: usize,
        cap: usize,
    ) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        if n == 0 {
            return Err(Error::Domain(
                "smoothing degree n must be at least 1".into(),
            ));
        }
        if d == 0 {
            return Err(Error::Domain("dimension d must be at least 1".into()));
        }
        if num_classes == 0 {
            return Err(Error::Domain("need at least one output class".into()));
        }
        let rows = (n + 1)
            .checked_pow(
                u32::try_from(d).map_err(|_| Error::Resource("dimension too large".into()))?,
            )
            .filter(|r| *r <= cap)
            .ok_or_else(|| {
                Error::Resource(format!(
                    "grid of (n+1)^d = {}^{} rows exceeds the cap of {} entries",
                    n + 1,
                    d,
                    cap
                ))
            })?;
        let len = rows
            .checked_mul(num_classes)
            .ok_or_else(|| Error::Resource("coefficient tensor too large".into()))?;

        let mut coeffs = vec![0.0; len];
        {
            use rayon::prelude::*;
            coeffs
                .par_chunks_mut(num_classes)
                .enumerate()
                .try_for_each(|(r, out)| -> Result<()> {
                    let x = grid_point_raw(n, d, r);
                    let vals = f(&x);
                    if vals.len() != num_classes {
                        return Err(Error::Shape(format!(
                            "sampler returned {} values, expected {}",
                            vals.len(),
                            num_classes
                        )));
                    }
                    if vals.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Degenerate(format!(
                            "sampler returned a non-finite value at grid row {r}"
                        )));
                    }
                    out.copy_from_slice(&vals);
                    Ok(())
                })?;
        }
        Ok(Self {
            n,
            d,
            k: num_classes,
            coeffs,
        })
    }

    /// Builds a smoother from an existing coefficient tensor.
    pub fn from_coeffs(n: usize, d: usize, num_classes: usize, coeffs: Vec<f64>) -> Result<Self> {
        let s = Self {
            n,
            d,
            k: num_classes,
            coeffs,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::Invalid("n, d and k must all be at least 1".into()));
        }
        let rows = (self.n + 1)
            .checked_pow(u32::try_from(self.d).map_err(|_| Error::Invalid("d too large".into()))?)
            .ok_or_else(|| Error::Invalid("grid size overflows".into()))?;
        let expect = rows
            .checked_mul(self.k)
            .ok_or_else(|| Error::Invalid("coefficient tensor too large".into()))?;
        if self.coeffs.len() != expect {
            return Err(Error::Invalid(format!(
                "coefficient tensor has {} entries, expected (n+1)^d * k = {}",
                self.coeffs.len(),
                expect
            )));
        }
        if self.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(
                "coefficient tensor contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Smoothing degree n.
    pub fn degree(&self) -> usize {
        self.n
    }

    /// Feature-space dimension d.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of classes K.
    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Number of grid rows, `(n+1)^d`.
    pub fn num_rows(&self) -> usize {
        self.coeffs.len() / self.k
    }

    /// Flat coefficient tensor, row-major as documented on the type.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Grid point for a flat row index.
    pub fn grid_point(&self, row: usize) -> Vec<f64> {
        assert!(row < self.num_rows(), "grid row {row} out of range");
        grid_point_raw(self.n, self.d, row)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Shape(format!(
                "point has {} coordinates, smoother expects {}",
                x.len(),
                self.d
            )));
        }
        for &xi in x {
            check_unit_interval(xi)?;
        }
        Ok(())
    }

    /// Contracts the coefficient tensor with one weight row per dimension,
    /// fastest-varying dimension first. Zero weights are skipped so one-hot
    /// rows select stored coefficients exactly.
    fn contract(&self, basis: &[Vec<f64>]) -> Vec<f64> {
        debug_assert_eq!(basis.len(), self.d);
        let nb = self.n + 1;
        let mut data = self.coeffs.clone();
        let mut rows = self.num_rows();
        for b in basis.iter().rev() {
            rows /= nb;
            let mut out = vec![0.0; rows * self.k];
            for r in 0..rows {
                let dst = r * self.k;
                for (t, &w) in b.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let src = (r * nb + t) * self.k;
                    for c in 0..self.k {
                        out[dst + c] += w * data[src + c];
                    }
                }
            }
            data = out;
        }
        debug_assert_eq!(data.len(), self.k);
        data
    }

    fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let basis: Vec<Vec<f64>> = x.iter().map(|&xi| basis_row(self.n, xi)).collect();
        self.contract(&basis)
    }

    /// Smoothed logits at a point of the unit box.
    pub fn eval_multi(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.eval_unchecked(x))
    }

    /// Evaluates the underlying polynomial without the box check.
    ///
    /// The tensor-product polynomial is defined on all of R^d; solvers and
    /// attacks probe slightly outside the box and rely on this extension.
    pub fn eval_extended(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::Shape(format!(
                "point has {} coordinates, smoother expects {}",
                x.len(),
                self.d
            )));
        }
        Ok(self.eval_unchecked(x))
    }

    fn grad_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let basis: Vec<Vec<f64>> = x.iter().map(|&xi| basis_row(self.n, xi)).collect();
        let mut jac = DMatrix::zeros(self.k, self.d);
        for j in 0..self.d {
            let mut rows = basis.clone();
            rows[j] = deriv_row(self.n, x[j]);
            let col = self.contract(&rows);
            for c in 0..self.k {
                jac[(c, j)] = col[c];
            }
        }
        jac
    }

    /// Exact gradient of every smoothed logit: a K x d matrix with
    /// `jac[(i, j)] = d B_n(f_i) / d x_j`.
    pub fn grad_multi(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        Ok(self.grad_unchecked(x))
    }

    /// Gradient of the polynomial extension, without the box check.
    pub fn grad_extended(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.d {
            return Err(Error::Shape(format!(
                "point has {} coordinates, smoother expects {}",
                x.len(),
                self.d
            )));
        }
        Ok(self.grad_unchecked(x))
    }

    /// Serializes to the on-disk JSON schema `{n, d, k, coeffs}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and validates the JSON schema produced by [`Self::to_json`].
    pub fn from_json(json: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Decodes a flat row index into grid coordinates, dimension 0 slowest.
fn grid_point_raw(n: usize, d: usize, row: usize) -> Vec<f64> {
    let nb = n + 1;
    let mut digits = vec![0usize; d];
    let mut r = row;
    for j in (0..d).rev() {
        digits[j] = r % nb;
        r /= nb;
    }
    digits.iter().map(|&k| k as f64 / n as f64).collect()
}
