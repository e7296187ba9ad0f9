//! Nonlinear least-squares solvers over residual systems.
//!
//! Four methods share one report format: Newton-Raphson on the residual,
//! Gauss-Newton, Levenberg-Marquardt with the cubic gain-ratio damping
//! schedule, and a trust-region driver whose subproblem is solved by
//! dogleg (`l2` trust regions) or dogbox (`l-inf` trust regions with
//! active-bound freezing). LM is the production path for certification;
//! the others exist for comparison and as building blocks.
//!
//! Conventions used throughout:
//!
//! - the objective is `F(x) = 1/2 ||Phi(x)||^2`; reports carry this halved
//!   value, while `f_tol` bounds the raw sum of squares `||Phi||^2`,
//! - every linear solve is minimum-norm least squares, so rank-deficient
//!   Jacobians produce finite steps instead of blowups,
//! - an optional box constraint clamps accepted iterates to `[0,1]^n`,
//!   matching the smoother's domain.

pub mod linalg;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
pub use linalg::{lstsq_min_norm, solve_damped, RANK_REL_TOL};

/// Trust radii below this value terminate the trust-region loop.
const DELTA_COLLAPSE: f64 = 1e-16;

/// A differentiable residual map `Phi: R^n -> R^m`.
pub trait ResidualSystem {
    /// Number of unknowns n.
    fn dim(&self) -> usize;
    /// Number of residuals m.
    fn residual_count(&self) -> usize;
    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Residual system built from a pair of infallible closures.
pub struct FnSystem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    dim: usize,
    residuals: usize,
    res: R,
    jac: J,
}

impl<R, J> FnSystem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    pub fn new(dim: usize, residuals: usize, res: R, jac: J) -> Self {
        Self {
            dim,
            residuals,
            res,
            jac,
        }
    }
}

impl<R, J> ResidualSystem for FnSystem<R, J>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn residual_count(&self) -> usize {
        self.residuals
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.res)(x))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok((self.jac)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Newton,
    GaussNewton,
    Lm,
    TrustRegion,
}

/// Norm bounding the trust-region subproblem step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubproblemNorm {
    /// Dogleg on a spherical region.
    L2,
    /// Dogbox on a cubical region.
    LInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FTol,
    XTol,
    MaxIters,
    TrustRadiusCollapse,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::FTol => "f_tol",
            Termination::XTol => "x_tol",
            Termination::MaxIters => "max_iters",
            Termination::TrustRadiusCollapse => "trust_radius_collapse",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Terminates when `||Phi||^2` (not halved) drops below this.
    pub f_tol: f64,
    /// Terminates when `||h|| <= x_tol * (||x|| + x_tol)`.
    pub x_tol: f64,
    /// LM damping seed: `mu_0 = mu0_scale * max(diag(J^T J))`.
    pub mu0_scale: f64,
    /// Fixed Gauss-Newton step scale.
    pub gn_step_alpha: f64,
    pub tr_delta0: f64,
    pub tr_delta_max: f64,
    /// Trust-region acceptance threshold, in [0, 1/4).
    pub tr_eta: f64,
    pub subproblem_norm: SubproblemNorm,
    /// Collect one [`IterationRecord`] per iteration.
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Lm,
            max_iters: 200,
            f_tol: 1.49e-8,
            x_tol: 1.49e-8,
            mu0_scale: 1e-3,
            gn_step_alpha: 1.0,
            tr_delta0: 1.0,
            tr_delta_max: 100.0,
            tr_eta: 1e-4,
            subproblem_norm: SubproblemNorm::L2,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_tol > 0.0) || !(self.x_tol > 0.0) {
            return Err(Error::Invalid("solver tolerances must be positive".into()));
        }
        if !(self.mu0_scale > 0.0) {
            return Err(Error::Invalid("mu0_scale must be positive".into()));
        }
        if !(self.tr_eta >= 0.0 && self.tr_eta < 0.25) {
            return Err(Error::Invalid(format!(
                "tr_eta must lie in [0, 0.25), got {}",
                self.tr_eta
            )));
        }
        if !(self.tr_delta0 > 0.0 && self.tr_delta0 < self.tr_delta_max) {
            return Err(Error::Invalid(format!(
                "need 0 < tr_delta0 < tr_delta_max, got {} and {}",
                self.tr_delta0, self.tr_delta_max
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// One solver iteration, for optional JSON-lines traces. `damping` holds
/// mu for LM and the trust radius for trust-region runs; `f` is the
/// halved objective at the start of the iteration.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub f: f64,
    pub step_norm: f64,
    pub damping: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    /// Final `1/2 ||Phi||^2`.
    pub residual_norm_sq: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// True when a tolerance (f_tol or x_tol) fired.
    pub converged: bool,
    /// Empty unless the config asked for a trace.
    pub trace: Vec<IterationRecord>,
}

fn clamp_unit(x: &mut DVector<f64>) {
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn check_finite(x: &DVector<f64>, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!(
            "{what} contains non-finite values"
        )));
    }
    Ok(())
}

/// Newton-Raphson step solving `J h = -Phi` in the least-squares sense.
/// The flag reports rank deficiency; the step is then minimum-norm.
pub fn newton_step(j: &DMatrix<f64>, phi: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let (h, rank) = lstsq_min_norm(j, &(-phi))?;
    Ok((h, rank < j.ncols()))
}

/// Gauss-Newton step from the normal equations `J^T J h = -J^T Phi`.
/// Requires a tall full-rank Jacobian; rank deficiency is an error so the
/// caller can fall back to a damped step.
pub fn gauss_newton_step(j: &DMatrix<f64>, phi: &DVector<f64>) -> Result<DVector<f64>> {
    if j.nrows() < j.ncols() {
        return Err(Error::Shape(format!(
            "Gauss-Newton needs m >= n, got {}x{}",
            j.nrows(),
            j.ncols()
        )));
    }
    let (h, rank) = lstsq_min_norm(j, &(-phi))?;
    if rank < j.ncols() {
        return Err(Error::Singular(
            "Jacobian is rank-deficient; use a damped Levenberg-Marquardt step".into(),
        ));
    }
    Ok(h)
}

/// Damped step solving `(J^T J + mu I) h = -J^T Phi`; finite for any
/// `mu > 0` regardless of the Jacobian's rank.
pub fn lm_step(j: &DMatrix<f64>, phi: &DVector<f64>, mu: f64) -> Result<DVector<f64>> {
    solve_damped(j, phi, mu)
}

/// Central-difference Jacobian, the verification oracle for analytic ones.
pub fn finite_diff_jacobian<S: ResidualSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    let mut jac = DMatrix::zeros(sys.residual_count(), sys.dim());
    for col in 0..sys.dim() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[col] += step;
        xm[col] -= step;
        let rp = sys.residual(&xp)?;
        let rm = sys.residual(&xm)?;
        for row in 0..jac.nrows() {
            jac[(row, col)] = (rp[row] - rm[row]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Dogleg step for the spherical subproblem: the Gauss-Newton point when
/// it fits, otherwise the steepest-descent path bent towards it, cut at
/// radius `delta`. The returned step never increases the quadratic model.
pub fn dogleg_step(j: &DMatrix<f64>, phi: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!(
            "trust radius must be positive, got {delta}"
        )));
    }
    let g = j.transpose() * phi;
    let (pb, _) = lstsq_min_norm(j, &(-phi))?;
    if pb.norm() <= delta {
        return Ok(pb);
    }
    let jg = j * &g;
    let jg2 = jg.norm_squared();
    if jg2 == 0.0 {
        // g = 0 forces the minimum-norm pb to 0, which the branch above
        // returns; this is unreachable and kept as a safe fallback.
        let n = pb.norm();
        return Ok(pb * (delta / n));
    }
    let pu = &g * (-g.norm_squared() / jg2);
    let pu_norm = pu.norm();
    if pu_norm >= delta {
        return Ok(pu * (delta / pu_norm));
    }
    // ||pu + tau (pb - pu)||^2 = delta^2 has one root in (0, 1].
    let d = &pb - &pu;
    let a = d.norm_squared();
    let b = pu.dot(&d);
    let c = pu.norm_squared() - delta * delta;
    let tau = (-b + (b * b - a * c).sqrt()) / a;
    Ok(pu + d * tau)
}

/// Dogbox step for the cubical subproblem: dogleg marched inside the
/// `l-inf` box, followed by one pass that freezes coordinates pinned at
/// the box faces and re-solves the free ones. Keeps whichever candidate
/// the quadratic model scores lower.
pub fn dogbox_step(j: &DMatrix<f64>, phi: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!(
            "trust radius must be positive, got {delta}"
        )));
    }
    let g = j.transpose() * phi;
    let model = |s: &DVector<f64>| g.dot(s) + 0.5 * (j * s).norm_squared();
    let (pb, _) = lstsq_min_norm(j, &(-phi))?;
    if pb.amax() <= delta {
        return Ok(pb);
    }
    let jg2 = (j * &g).norm_squared();
    let marched = if jg2 == 0.0 {
        let n = pb.amax();
        pb * (delta / n)
    } else {
        let pu = &g * (-g.norm_squared() / jg2);
        if pu.amax() >= delta {
            let n = pu.amax();
            pu * (delta / n)
        } else {
            // Walk from the Cauchy point towards pb until a face stops us.
            let d = &pb - &pu;
            let mut tau = 1.0f64;
            for i in 0..d.len() {
                if d[i] != 0.0 {
                    let lo = (-delta - pu[i]) / d[i];
                    let hi = (delta - pu[i]) / d[i];
                    tau = tau.min(lo.max(hi));
                }
            }
            &pu + d * tau.max(0.0)
        }
    };
    let active: Vec<bool> = marched
        .iter()
        .map(|v| v.abs() >= delta * (1.0 - 1e-12))
        .collect();
    let n_free = active.iter().filter(|a| !**a).count();
    if n_free == 0 || n_free == active.len() {
        return Ok(marched);
    }
    let mut fixed = DVector::zeros(marched.len());
    for (i, &on) in active.iter().enumerate() {
        if on {
            fixed[i] = marched[i];
        }
    }
    let free_idx: Vec<usize> = (0..active.len()).filter(|&i| !active[i]).collect();
    let mut jf = DMatrix::zeros(j.nrows(), n_free);
    for (c, &i) in free_idx.iter().enumerate() {
        jf.set_column(c, &j.column(i));
    }
    let shifted = phi + j * &fixed;
    let (hf, _) = lstsq_min_norm(&jf, &(-&shifted))?;
    let scale = if hf.amax() > delta {
        delta / hf.amax()
    } else {
        1.0
    };
    let mut refined = fixed;
    for (c, &i) in free_idx.iter().enumerate() {
        refined[i] = hf[c] * scale;
    }
    if model(&refined) < model(&marched) {
        Ok(refined)
    } else {
        Ok(marched)
    }
}

/// Dispatches to the driver selected by `cfg.method`. With `unit_box` set,
/// accepted iterates are clamped into `[0,1]^n`.
pub fn solve<S: ResidualSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
    unit_box: bool,
) -> Result<SolveReport> {
    match cfg.method {
        Method::Newton | Method::GaussNewton => plain_drive(sys, x0, cfg, unit_box),
        Method::Lm => solve_lm(sys, x0, cfg, unit_box),
        Method::TrustRegion => trust_region_solve(sys, x0, cfg, unit_box),
    }
}

/// Shared Newton / Gauss-Newton driver: full steps, no globalization.
fn plain_drive<S: ResidualSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
    unit_box: bool,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_finite(x0, "initial point")?;
    let mut x = x0.clone();
    if unit_box {
        clamp_unit(&mut x);
    }
    let mut phi = sys.residual(&x)?;
    let mut f2 = phi.norm_squared();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        if f2 < cfg.f_tol {
            return Ok(report(x, f2, iterations, Termination::FTol, true, trace));
        }
        if iterations == cfg.max_iters {
            return Ok(report(
                x,
                f2,
                iterations,
                Termination::MaxIters,
                false,
                trace,
            ));
        }
        let j = sys.jacobian(&x)?;
        let h = match cfg.method {
            Method::Newton => newton_step(&j, &phi)?.0,
            _ => gauss_newton_step(&j, &phi)? * cfg.gn_step_alpha,
        };
        iterations += 1;
        let hn = h.norm();
        x += &h;
        if unit_box {
            clamp_unit(&mut x);
        }
        phi = sys.residual(&x)?;
        f2 = phi.norm_squared();
        if cfg.trace {
            trace.push(IterationRecord {
                k: iterations,
                f: 0.5 * f2,
                step_norm: hn,
                damping: 0.0,
                ratio: f64::NAN,
            });
        }
        if f2 < cfg.f_tol {
            return Ok(report(x, f2, iterations, Termination::FTol, true, trace));
        }
        if hn <= cfg.x_tol * (x.norm() + cfg.x_tol) {
            return Ok(report(x, f2, iterations, Termination::XTol, true, trace));
        }
    }
}

/// Levenberg-Marquardt with the cubic gain-ratio schedule: accept on
/// positive ratio with `mu <- mu * max(1/3, 1 - (2r - 1)^3)`, reject with
/// `mu <- 2 mu`. The damping seed is `mu0_scale * max(diag(J^T J))`.
pub fn solve_lm<S: ResidualSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
    unit_box: bool,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_finite(x0, "initial point")?;
    let mut x = x0.clone();
    if unit_box {
        clamp_unit(&mut x);
    }
    let mut phi = sys.residual(&x)?;
    let mut f2 = phi.norm_squared();
    let mut trace = Vec::new();
    if f2 < cfg.f_tol {
        return Ok(report(x, f2, 0, Termination::FTol, true, trace));
    }
    let mut j = sys.jacobian(&x)?;
    let mut mu = cfg.mu0_scale * jtj_diag_max(&j);
    if !(mu > 0.0) {
        mu = cfg.mu0_scale;
    }
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g = j.transpose() * &phi;
        let h = solve_damped(&j, &phi, mu)?;
        let hn = h.norm();
        if hn <= cfg.x_tol * (x.norm() + cfg.x_tol) {
            return Ok(report(x, f2, iterations, Termination::XTol, true, trace));
        }
        let mut trial = &x + &h;
        if unit_box {
            clamp_unit(&mut trial);
        }
        let trial_phi = sys.residual(&trial)?;
        let trial_f2 = trial_phi.norm_squared();
        // Gain ratio against the damped quadratic model; the denominator
        // is positive whenever h is nonzero.
        let actual = 0.5 * (f2 - trial_f2);
        let predicted = 0.5 * h.dot(&(&h * mu - &g));
        let ratio = if trial_f2.is_finite() && predicted > 0.0 {
            actual / predicted
        } else {
            f64::NEG_INFINITY
        };
        if cfg.trace {
            trace.push(IterationRecord {
                k: iterations,
                f: 0.5 * f2,
                step_norm: hn,
                damping: mu,
                ratio,
            });
        }
        if ratio > 0.0 {
            x = trial;
            phi = trial_phi;
            f2 = trial_f2;
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * ratio - 1.0).powi(3));
            if f2 < cfg.f_tol {
                return Ok(report(x, f2, iterations, Termination::FTol, true, trace));
            }
            j = sys.jacobian(&x)?;
        } else {
            // Rejections at a box face double mu forever; the cap keeps
            // the stacked solve finite until x_tol fires.
            mu = (mu * 2.0).min(1e200);
        }
    }
    Ok(report(
        x,
        f2,
        iterations,
        Termination::MaxIters,
        false,
        trace,
    ))
}

/// Trust-region driver: dogleg or dogbox step, gain ratio, radius update
/// (quarter on poor agreement, double on strong agreement at the rim),
/// acceptance above `tr_eta`.
pub fn trust_region_solve<S: ResidualSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
    unit_box: bool,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_finite(x0, "initial point")?;
    let mut x = x0.clone();
    if unit_box {
        clamp_unit(&mut x);
    }
    let mut phi = sys.residual(&x)?;
    let mut f2 = phi.norm_squared();
    let mut trace = Vec::new();
    if f2 < cfg.f_tol {
        return Ok(report(x, f2, 0, Termination::FTol, true, trace));
    }
    let mut j = sys.jacobian(&x)?;
    let mut delta = cfg.tr_delta0;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let g = j.transpose() * &phi;
        let s = match cfg.subproblem_norm {
            SubproblemNorm::L2 => dogleg_step(&j, &phi, delta)?,
            SubproblemNorm::LInf => dogbox_step(&j, &phi, delta)?,
        };
        let s_norm = match cfg.subproblem_norm {
            SubproblemNorm::L2 => s.norm(),
            SubproblemNorm::LInf => s.amax(),
        };
        // A tiny step interior to the region signals stationarity; a tiny
        // rim-clipped step only signals a caved-in radius, which the
        // collapse check below reports as a failure instead.
        if s_norm <= cfg.x_tol * (x.norm() + cfg.x_tol) && s_norm < delta * (1.0 - 1e-10) {
            return Ok(report(x, f2, iterations, Termination::XTol, true, trace));
        }
        let predicted = -g.dot(&s) - 0.5 * (&j * &s).norm_squared();
        let mut trial = &x + &s;
        if unit_box {
            clamp_unit(&mut trial);
        }
        let trial_phi = sys.residual(&trial)?;
        let trial_f2 = trial_phi.norm_squared();
        let actual = 0.5 * (f2 - trial_f2);
        let ratio = if trial_f2.is_finite() && predicted > 0.0 {
            actual / predicted
        } else {
            f64::NEG_INFINITY
        };
        if cfg.trace {
            trace.push(IterationRecord {
                k: iterations,
                f: 0.5 * f2,
                step_norm: s_norm,
                damping: delta,
                ratio,
            });
        }
        if ratio < 0.25 {
            delta *= 0.25;
        } else if ratio > 0.75 && s_norm >= delta * (1.0 - 1e-10) {
            delta = (2.0 * delta).min(cfg.tr_delta_max);
        }
        if ratio > cfg.tr_eta {
            x = trial;
            phi = trial_phi;
            f2 = trial_f2;
            if f2 < cfg.f_tol {
                return Ok(report(x, f2, iterations, Termination::FTol, true, trace));
            }
            j = sys.jacobian(&x)?;
        }
        if delta < DELTA_COLLAPSE {
            return Ok(report(
                x,
                f2,
                iterations,
                Termination::TrustRadiusCollapse,
                false,
                trace,
            ));
        }
    }
    Ok(report(
        x,
        f2,
        iterations,
        Termination::MaxIters,
        false,
        trace,
    ))
}

fn jtj_diag_max(j: &DMatrix<f64>) -> f64 {
    (0..j.ncols())
        .map(|c| j.column(c).norm_squared())
        .fold(0.0, f64::max)
}

fn report(
    x: DVector<f64>,
    f2: f64,
    iterations: usize,
    termination: Termination,
    converged: bool,
    trace: Vec<IterationRecord>,
) -> SolveReport {
    SolveReport {
        solution: x,
        residual_norm_sq: 0.5 * f2,
        iterations,
        termination,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rosenbrock() -> impl ResidualSystem {
        FnSystem::new(
            2,
            2,
            |x: &DVector<f64>| {
                DVector::from_column_slice(&[10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
            },
            |x: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]),
        )
    }

    fn linear_system(a: DMatrix<f64>, b: DVector<f64>) -> impl ResidualSystem {
        let m = a.nrows();
        let n = a.ncols();
        let a2 = a.clone();
        FnSystem::new(
            n,
            m,
            move |x: &DVector<f64>| &a * x - &b,
            move |_: &DVector<f64>| a2.clone(),
        )
    }

    #[test]
    fn newton_step_linear_reaches_root() {
        let sys = linear_system(
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[0.7, -0.4]),
        );
        let x = DVector::from_column_slice(&[0.0, 0.0]);
        let j = sys.jacobian(&x).unwrap();
        let phi = sys.residual(&x).unwrap();
        let (h, deficient) = newton_step(&j, &phi).unwrap();
        assert!(!deficient);
        assert_relative_eq!(h[0], 0.7, epsilon = 1e-12);
        assert_relative_eq!(h[1], -0.4, epsilon = 1e-12);
    }

    #[test]
    fn newton_step_scalar_square() {
        let j = DMatrix::from_row_slice(1, 1, &[2.0]);
        let phi = DVector::from_column_slice(&[1.0]);
        let (h, deficient) = newton_step(&j, &phi).unwrap();
        assert!(!deficient);
        assert_eq!(h[0], -0.5);
    }

    #[test]
    fn newton_step_zero_residual_is_zero() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let phi = DVector::zeros(2);
        let (h, _) = newton_step(&j, &phi).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn newton_step_flags_rank_deficiency() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let phi = DVector::from_column_slice(&[1.0, 1.0]);
        let (h, deficient) = newton_step(&j, &phi).unwrap();
        assert!(deficient);
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gauss_newton_reaches_linear_optimum_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a =
            DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(5, 3);
        let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let phi = &a * &x - &b;
        let h = gauss_newton_step(&a, &phi).unwrap();
        let grad_after = a.transpose() * (&a * (&x + &h) - &b);
        assert!(grad_after.norm() < 1e-9);
    }

    #[test]
    fn gauss_newton_step_is_descent_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 100 {
            let a = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0))
                + DMatrix::identity(6, 3) * 0.3;
            let phi = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let g = a.transpose() * &phi;
            if g.norm() < 1e-8 {
                continue;
            }
            let h = gauss_newton_step(&a, &phi).unwrap();
            assert!(h.dot(&g) < 0.0, "not a descent direction");
            checked += 1;
        }
    }

    #[test]
    fn gauss_newton_rejects_rank_deficiency() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let phi = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            gauss_newton_step(&j, &phi),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn lm_step_at_zero_mu_matches_gauss_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let j = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0))
                + DMatrix::identity(5, 3) * 0.5;
            let phi = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let gn = gauss_newton_step(&j, &phi).unwrap();
            let lm = lm_step(&j, &phi, 0.0).unwrap();
            assert!((gn - lm).norm() < 1e-10);
        }
    }

    #[test]
    fn lm_step_large_mu_follows_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let j =
            DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(4, 3);
        let phi = DVector::from_fn(4, |_, _| rng.random_range(0.5..1.0));
        let h = lm_step(&j, &phi, 1e6).unwrap();
        let want = -(j.transpose() * &phi);
        let cos = h.dot(&want) / (h.norm() * want.norm());
        assert!(cos.acos() < 1e-3, "angle {} rad", cos.acos());
    }

    #[test]
    fn lm_step_finite_on_singular_jacobian() {
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let phi = DVector::from_column_slice(&[3.0, -1.0]);
        let h = lm_step(&j, &phi, 1e-3).unwrap();
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lm_to_gn_gap_shrinks_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let j = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0))
            + DMatrix::identity(6, 3) * 0.5;
        let phi = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let gn = gauss_newton_step(&j, &phi).unwrap();
        let mut prev = f64::INFINITY;
        for mu in [1.0, 1e-2, 1e-4, 1e-6] {
            let gap = (lm_step(&j, &phi, mu).unwrap() - &gn).norm();
            assert!(gap < prev, "gap {gap} did not shrink below {prev}");
            prev = gap;
        }
    }

    #[test]
    fn finite_diff_recovers_linear_map() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let sys = linear_system(a.clone(), DVector::zeros(2));
        let x = DVector::from_column_slice(&[0.3, -0.7]);
        let fd = finite_diff_jacobian(&sys, &x, 1e-6).unwrap();
        for (u, v) in fd.iter().zip(a.iter()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_scalar_square() {
        let sys = FnSystem::new(
            1,
            1,
            |x: &DVector<f64>| DVector::from_column_slice(&[x[0] * x[0]]),
            |x: &DVector<f64>| DMatrix::from_row_slice(1, 1, &[2.0 * x[0]]),
        );
        let fd = finite_diff_jacobian(&sys, &DVector::from_column_slice(&[1.0]), 1e-6).unwrap();
        assert!((fd[(0, 0)] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rosenbrock_converges_under_lm_and_trust_region() {
        let sys = rosenbrock();
        let x0 = DVector::from_column_slice(&[-1.2, 1.0]);
        for method in [Method::Lm, Method::TrustRegion] {
            // The default residual tolerance alone only pins the solution
            // to ~1e-4; the tighter f_tol buys the 1e-4 coordinate check.
            let cfg = SolverConfig {
                method,
                f_tol: 1e-12,
                ..SolverConfig::default()
            };
            let rep = solve(&sys, &x0, &cfg, false).unwrap();
            assert!(rep.converged, "{method:?} did not converge");
            assert!(rep.iterations <= 200);
            assert!(
                2.0 * rep.residual_norm_sq < 1.49e-8,
                "{method:?} residual {}",
                2.0 * rep.residual_norm_sq
            );
            assert_relative_eq!(rep.solution[0], 1.0, epsilon = 1e-4);
            assert_relative_eq!(rep.solution[1], 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn rosenbrock_converges_under_newton_and_gn() {
        let sys = rosenbrock();
        let x0 = DVector::from_column_slice(&[-1.2, 1.0]);
        for method in [Method::Newton, Method::GaussNewton] {
            let cfg = SolverConfig {
                method,
                ..SolverConfig::default()
            };
            let rep = solve(&sys, &x0, &cfg, false).unwrap();
            assert!(rep.converged);
            assert!(2.0 * rep.residual_norm_sq < 1.49e-8);
        }
    }

    #[test]
    fn rosenbrock_converges_under_dogbox() {
        let sys = rosenbrock();
        let x0 = DVector::from_column_slice(&[-1.2, 1.0]);
        let cfg = SolverConfig {
            method: Method::TrustRegion,
            subproblem_norm: SubproblemNorm::LInf,
            ..SolverConfig::default()
        };
        let rep = solve(&sys, &x0, &cfg, false).unwrap();
        assert!(rep.converged);
        assert!(2.0 * rep.residual_norm_sq < 1.49e-8);
    }

    #[test]
    fn lm_linear_full_rank_converges_in_two_iterations() {
        let sys = linear_system(
            DMatrix::identity(3, 3),
            DVector::from_column_slice(&[1.0, -2.0, 0.5]),
        );
        let x0 = DVector::zeros(3);
        let rep = solve_lm(&sys, &x0, &SolverConfig::default(), false).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2, "took {} iterations", rep.iterations);
    }

    #[test]
    fn already_converged_start_reports_zero_iterations() {
        let sys = linear_system(
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[0.5, 0.5]),
        );
        let x0 = DVector::from_column_slice(&[0.5, 0.5]);
        for method in [Method::Lm, Method::TrustRegion, Method::Newton] {
            let cfg = SolverConfig {
                method,
                ..SolverConfig::default()
            };
            let rep = solve(&sys, &x0, &cfg, false).unwrap();
            assert!(rep.converged);
            assert_eq!(rep.iterations, 0);
            assert_eq!(rep.termination, Termination::FTol);
        }
    }

    #[test]
    fn trust_region_ratio_is_one_on_exact_linear_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a =
            DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(4, 2);
        let b = DVector::from_fn(4, |_, _| rng.random_range(2.0..3.0));
        let sys = linear_system(a, b);
        let cfg = SolverConfig {
            method: Method::TrustRegion,
            trace: true,
            tr_delta0: 0.25,
            ..SolverConfig::default()
        };
        let rep = solve(&sys, &DVector::zeros(2), &cfg, false).unwrap();
        let accepted: Vec<&IterationRecord> =
            rep.trace.iter().filter(|r| r.ratio > cfg.tr_eta).collect();
        assert!(!accepted.is_empty());
        for rec in accepted {
            assert!(
                (rec.ratio - 1.0).abs() < 1e-6,
                "exact model should give ratio 1, got {}",
                rec.ratio
            );
        }
    }

    #[test]
    fn dogleg_and_dogbox_respect_their_radii() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let m = rng.random_range(2..6);
            let n = rng.random_range(1..5);
            let mut j = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
            if rng.random_bool(0.3) && n >= 2 {
                // Duplicate a column to exercise the rank-deficient path.
                let c0 = j.column(0).into_owned();
                j.set_column(1, &c0);
            }
            let phi = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
            let delta = rng.random_range(0.01..10.0);
            let s2 = dogleg_step(&j, &phi, delta).unwrap();
            assert!(s2.norm() <= delta * (1.0 + 1e-12), "dogleg left the ball");
            let si = dogbox_step(&j, &phi, delta).unwrap();
            assert!(si.amax() <= delta * (1.0 + 1e-12), "dogbox left the box");
        }
    }

    #[test]
    fn dogleg_and_dogbox_never_predict_an_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let m = rng.random_range(2..6);
            let n = rng.random_range(1..5);
            let j = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
            let phi = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
            let delta = rng.random_range(0.01..5.0);
            let g = j.transpose() * &phi;
            for s in [
                dogleg_step(&j, &phi, delta).unwrap(),
                dogbox_step(&j, &phi, delta).unwrap(),
            ] {
                let predicted = -g.dot(&s) - 0.5 * (&j * &s).norm_squared();
                assert!(predicted >= -1e-12, "predicted reduction {predicted}");
            }
        }
    }

    #[test]
    fn lm_descends_monotonically_on_accepted_steps() {
        let sys = rosenbrock();
        let cfg = SolverConfig {
            trace: true,
            ..SolverConfig::default()
        };
        let rep = solve_lm(&sys, &DVector::from_column_slice(&[-1.2, 1.0]), &cfg, false).unwrap();
        let mut last_f = f64::INFINITY;
        for rec in &rep.trace {
            if rec.ratio > 0.0 {
                assert!(rec.f < last_f + 1e-15, "objective rose to {}", rec.f);
                last_f = rec.f;
            }
        }
    }

    #[test]
    fn trust_region_collapse_on_inconsistent_jacobian() {
        // The Jacobian lies about the sign of the slope, so every model
        // step increases the true objective and the radius caves in.
        let sys = FnSystem::new(
            1,
            1,
            |x: &DVector<f64>| DVector::from_column_slice(&[x[0] + 10.0]),
            |_: &DVector<f64>| DMatrix::from_row_slice(1, 1, &[-1.0]),
        );
        let cfg = SolverConfig {
            method: Method::TrustRegion,
            ..SolverConfig::default()
        };
        let rep = solve(&sys, &DVector::from_column_slice(&[5.0]), &cfg, false).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.termination, Termination::TrustRadiusCollapse);
    }

    #[test]
    fn lm_box_constrained_sticks_to_the_face() {
        // Unconstrained root at 2; the box pins the iterate at 1 and the
        // shrinking damped steps trip x_tol there.
        let sys = linear_system(
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&[2.0, 2.0]),
        );
        let rep = solve_lm(
            &sys,
            &DVector::from_column_slice(&[0.5, 0.5]),
            &SolverConfig::default(),
            true,
        )
        .unwrap();
        assert_eq!(rep.termination, Termination::XTol);
        assert_relative_eq!(rep.solution[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(rep.solution[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reports_are_deterministic() {
        let sys = rosenbrock();
        let x0 = DVector::from_column_slice(&[-1.2, 1.0]);
        let cfg = SolverConfig {
            trace: true,
            ..SolverConfig::default()
        };
        let a = solve_lm(&sys, &x0, &cfg, false).unwrap();
        let b = solve_lm(&sys, &x0, &cfg, false).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.residual_norm_sq.to_bits(), b.residual_norm_sq.to_bits());
        assert_eq!(a.solution[0].to_bits(), b.solution[0].to_bits());
        assert_eq!(a.solution[1].to_bits(), b.solution[1].to_bits());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let bad = [
            SolverConfig {
                tr_eta: 0.3,
                ..SolverConfig::default()
            },
            SolverConfig {
                tr_delta0: 200.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                f_tol: 0.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                max_iters: 0,
                ..SolverConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn x_tol_fires_on_rootless_systems() {
        // Phi = x^2 + 1 never vanishes; the minimum sits at x = 0 where
        // the gradient dies and steps shrink to nothing.
        let sys = FnSystem::new(
            1,
            1,
            |x: &DVector<f64>| DVector::from_column_slice(&[x[0] * x[0] + 1.0]),
            |x: &DVector<f64>| DMatrix::from_row_slice(1, 1, &[2.0 * x[0]]),
        );
        let rep = solve_lm(
            &sys,
            &DVector::from_column_slice(&[2.0]),
            &SolverConfig::default(),
            false,
        )
        .unwrap();
        assert_eq!(rep.termination, Termination::XTol);
        assert!(rep.solution[0].abs() < 1e-3);
        assert_relative_eq!(rep.residual_norm_sq, 0.5, epsilon = 1e-6);
    }
}
