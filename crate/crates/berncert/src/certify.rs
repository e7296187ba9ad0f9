//! Certified radii from nearest-boundary solves.
//!
//! The pipeline for one example: extract features `x0 = G(input)`, read
//! the smoothed logits there, freeze the boundary system at that anchor,
//! run a least-squares solver from `x0`, project the solution into the
//! unit box, and report `R = ||x0 - sol||_p`. Inside the ball of radius R
//! around `x0` (in feature space) the smoothed prediction cannot change,
//! provided the solver truly found the nearest boundary point; the
//! `converged` flag and final residual qualify that claim, and
//! [`proposition1_check`] probes it empirically.
//!
//! Radii are feature-space quantities. The spectrally normalized extractor
//! is non-expansive, so an input perturbation of norm r moves `x0` by at
//! most r; the radius still only certifies the feature-space ball.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bernstein::BernsteinSmoother;
use crate::boundary::BoundarySystem;
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::solvers::{self, Method, ResidualSystem, SolverConfig};

/// `||v||_p` for p in (1, inf]. Orders below and including 1 are rejected:
/// the certificate argument needs a norm whose unit ball is strictly
/// convex or the box limit.
pub fn p_norm(v: &[f64], p: f64) -> Result<f64> {
    if p == f64::INFINITY {
        return Ok(v.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Domain(format!(
            "norm order must be > 1 or inf, got {p}"
        )));
    }
    Ok(v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p))
}

/// One certified example.
#[derive(Debug, Clone)]
pub struct CertResult {
    pub index: usize,
    /// True class when the example came from a labeled dataset.
    pub label: Option<usize>,
    /// Argmax of the smoothed logits at the anchor.
    pub prediction: usize,
    /// Certified radius `||anchor - boundary_point||_p`, in feature space.
    pub radius: f64,
    pub p: f64,
    /// Feature-space anchor `x0 = G(input)`; kept so the radius can be
    /// recomputed from stored fields alone.
    pub anchor: Vec<f64>,
    /// Solver solution projected into `[0,1]^d`.
    pub boundary_point: Vec<f64>,
    /// Final objective `1/2 ||Phi||^2` at the boundary point.
    pub residual_norm_sq: f64,
    pub converged: bool,
    pub xi: f64,
    pub c_param: f64,
}

fn validate_p(p: f64) -> Result<()> {
    if p == f64::INFINITY || (p.is_finite() && p > 1.0) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "norm order must be > 1 or inf, got {p}"
        )))
    }
}

/// Builds the Bernstein smoother of the model's classifier head on the
/// feature grid.
pub fn build_head_smoother(model: &MlpModel, n: usize) -> Result<BernsteinSmoother> {
    BernsteinSmoother::precompute_grid(
        // Grid points are finite and match the head's input width, the
        // only failure modes head evaluation has.
        |x| {
            model
                .head_logits(x)
                .expect("head evaluation is total on grid points")
        },
        n,
        model.feature_dim(),
        model.num_classes(),
    )
}

/// Argmax of the smoothed logits at `G(input)`.
pub fn predict_smoothed(
    input: &[f64],
    model: &MlpModel,
    smoother: &BernsteinSmoother,
) -> Result<usize> {
    let x0 = model.features(input)?;
    Ok(crate::argmax(&smoother.eval_multi(&x0)?))
}

fn check_model_smoother(model: &MlpModel, smoother: &BernsteinSmoother) -> Result<()> {
    if model.feature_dim() != smoother.dim() {
        return Err(Error::Shape(format!(
            "model produces {} features but smoother expects {}",
            model.feature_dim(),
            smoother.dim()
        )));
    }
    if smoother.dim() > smoother.num_classes() {
        return Err(Error::Constraint(format!(
            "boundary system needs d <= K, got d = {} and K = {}",
            smoother.dim(),
            smoother.num_classes()
        )));
    }
    Ok(())
}

/// Certifies one example: solve for the nearest boundary point from the
/// feature anchor and measure the p-distance to it. Non-convergence is
/// reported in the result, not raised.
pub fn certify(
    input: &[f64],
    label: Option<usize>,
    model: &MlpModel,
    smoother: &BernsteinSmoother,
    p: f64,
    c: f64,
    cfg: &SolverConfig,
) -> Result<CertResult> {
    validate_p(p)?;
    check_model_smoother(model, smoother)?;
    let x0 = model.features(input)?;
    let beta = smoother.eval_multi(&x0)?;
    let prediction = crate::argmax(&beta);
    let sys = BoundarySystem::from_logits(smoother, &beta, c)?;
    let report = solvers::solve(&sys, &DVector::from_column_slice(&x0), cfg, true)?;
    let mut sol: Vec<f64> = report.solution.iter().copied().collect();
    for v in sol.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let residual_norm_sq = 0.5 * sys.residual(&sol)?.norm_squared();
    let diff: Vec<f64> = x0.iter().zip(&sol).map(|(a, b)| a - b).collect();
    let radius = p_norm(&diff, p)?;
    Ok(CertResult {
        index: 0,
        label,
        prediction,
        radius,
        p,
        anchor: x0,
        boundary_point: sol,
        residual_norm_sq,
        converged: report.converged,
        xi: sys.xi(),
        c_param: c,
    })
}

/// Certifies a whole dataset in parallel; results come back in dataset
/// order with their indices filled in.
pub fn certify_dataset(
    data: &crate::model::Dataset,
    model: &MlpModel,
    smoother: &BernsteinSmoother,
    p: f64,
    c: f64,
    cfg: &SolverConfig,
) -> Result<Vec<CertResult>> {
    check_model_smoother(model, smoother)?;
    let mut results: Vec<CertResult> = data
        .xs
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &label)| certify(x, Some(label), model, smoother, p, c, cfg))
        .collect::<Result<_>>()?;
    for (i, r) in results.iter_mut().enumerate() {
        r.index = i;
    }
    Ok(results)
}

/// The regularized 2-D variant: minimizes
/// `1/2 phi_0(x)^2 + ||x - anchor||_2^2` with the trust-region solver.
/// The pull towards the anchor keeps the minimizer on the nearest piece
/// of boundary, which is what the safe-zone plots need.
struct Regularized2d<'a, 'b> {
    sys: &'b BoundarySystem<'a>,
    anchor: [f64; 2],
}

impl ResidualSystem for Regularized2d<'_, '_> {
    fn dim(&self) -> usize {
        2
    }

    fn residual_count(&self) -> usize {
        3
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let phi = self.sys.residual_extended(x.as_slice())?;
        let s = 2.0f64.sqrt();
        Ok(DVector::from_column_slice(&[
            phi[0],
            s * (x[0] - self.anchor[0]),
            s * (x[1] - self.anchor[1]),
        ]))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let full = self.sys.residual_jacobian_extended(x.as_slice())?;
        let s = 2.0f64.sqrt();
        Ok(DMatrix::from_row_slice(
            3,
            2,
            &[full[(0, 0)], full[(0, 1)], s, 0.0, 0.0, s],
        ))
    }
}

/// Certifies a 2-D anchor against an already-built system using the
/// regularized objective. `residual_norm_sq` reports the regularized
/// objective at the minimizer, which includes the distance term.
pub fn certify_2d(
    anchor: &[f64],
    system: &BoundarySystem,
    cfg: &SolverConfig,
) -> Result<CertResult> {
    if system.smoother().dim() != 2 || anchor.len() != 2 {
        return Err(Error::Constraint(
            "the regularized variant is defined for d = 2 only".into(),
        ));
    }
    let reg = Regularized2d {
        sys: system,
        anchor: [anchor[0], anchor[1]],
    };
    let mut tr_cfg = cfg.clone();
    tr_cfg.method = Method::TrustRegion;
    let report = solvers::solve(&reg, &DVector::from_column_slice(anchor), &tr_cfg, true)?;
    let mut sol: Vec<f64> = report.solution.iter().copied().collect();
    for v in sol.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let residual_norm_sq =
        0.5 * ResidualSystem::residual(&reg, &DVector::from_column_slice(&sol))?.norm_squared();
    let beta = system.smoother().eval_multi(anchor)?;
    let diff: Vec<f64> = anchor.iter().zip(&sol).map(|(a, b)| a - b).collect();
    Ok(CertResult {
        index: 0,
        label: None,
        prediction: crate::argmax(&beta),
        radius: p_norm(&diff, 2.0)?,
        p: 2.0,
        anchor: anchor.to_vec(),
        boundary_point: sol,
        residual_norm_sq,
        converged: report.converged,
        xi: system.xi(),
        c_param: system.c_param(),
    })
}

/// Certified accuracy at each radius: the fraction of examples that are
/// both correctly predicted and certified at least that far. With
/// `exclude_nonconverged`, unconverged radii count as zero, which keeps
/// the curve honest without changing the natural accuracy at r = 0.
pub fn certified_curve(
    results: &[CertResult],
    radii: &[f64],
    exclude_nonconverged: bool,
) -> Result<Vec<(f64, f64)>> {
    if results.is_empty() {
        return Err(Error::Invalid(
            "cannot build a curve from zero results".into(),
        ));
    }
    if radii.is_empty() {
        return Err(Error::Invalid("need at least one radius".into()));
    }
    if radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Invalid("radii must be non-negative".into()));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Invalid("radii must be sorted ascending".into()));
    }
    let n = results.len() as f64;
    Ok(radii
        .iter()
        .map(|&r| {
            let hits = results
                .iter()
                .filter(|res| {
                    let certified_radius = if exclude_nonconverged && !res.converged {
                        0.0
                    } else {
                        res.radius
                    };
                    res.label == Some(res.prediction) && certified_radius >= r
                })
                .count();
            (r, hits as f64 / n)
        })
        .collect())
}

/// Outcome of sphere sampling around one certified anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SphereCheck {
    /// Samples whose argmax differed from the certified prediction.
    pub violations: usize,
    /// Samples actually evaluated (box rejection can fall short of the
    /// request when the sphere pokes far outside the box).
    pub evaluated: usize,
}

/// Samples perturbations of p-norm `shrink * radius` uniformly in
/// direction and counts prediction flips. A sound radius with
/// `shrink < 1` flips nothing; `shrink > 1` deliberately probes past the
/// boundary. Zero-radius results are skipped.
pub fn proposition1_check(
    result: &CertResult,
    smoother: &BernsteinSmoother,
    samples: usize,
    shrink: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SphereCheck> {
    if !(shrink > 0.0) || !shrink.is_finite() {
        return Err(Error::Domain(format!(
            "shrink must be positive, got {shrink}"
        )));
    }
    if result.anchor.len() != smoother.dim() {
        return Err(Error::Shape(format!(
            "anchor has {} coordinates but smoother expects {}",
            result.anchor.len(),
            smoother.dim()
        )));
    }
    if result.radius == 0.0 {
        return Ok(SphereCheck {
            violations: 0,
            evaluated: 0,
        });
    }
    let r = shrink * result.radius;
    let d = smoother.dim();
    let mut violations = 0;
    let mut evaluated = 0;
    let mut attempts = 0usize;
    let budget = samples.saturating_mul(50);
    while evaluated < samples && attempts < budget {
        attempts += 1;
        let dir: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pn = p_norm(&dir, result.p)?;
        if pn == 0.0 {
            continue;
        }
        let candidate: Vec<f64> = result
            .anchor
            .iter()
            .zip(&dir)
            .map(|(a, v)| a + v * r / pn)
            .collect();
        if candidate.iter().any(|v| !(0.0..=1.0).contains(v)) {
            continue;
        }
        evaluated += 1;
        if crate::argmax(&smoother.eval_multi(&candidate)?) != result.prediction {
            violations += 1;
        }
    }
    Ok(SphereCheck {
        violations,
        evaluated,
    })
}
