//! Gradient attacks used to sanity-check certified radii from above.
//!
//! A successful perturbation of norm eps proves the decision boundary is
//! no farther than eps, so the smallest successful budget upper-bounds the
//! true boundary distance. Certified radii must sit beneath it.
//!
//! Attacks run in one of two spaces:
//!
//! - input space: perturb the raw input of the full network; the domain is
//!   unconstrained, matching the toy datasets,
//! - feature space: perturb a point of `[0,1]^d` fed to the (smoothed)
//!   head; iterates are clamped to the box. This is the space certified
//!   radii live in, so it is the apples-to-apples comparison.
//!
//! All attacks maximize cross-entropy against the given label and are
//! fully deterministic: PGD starts at the clean point, not a random one.

use nalgebra::{DMatrix, DVector};

use crate::bernstein::BernsteinSmoother;
use crate::boundary::softmax;
use crate::error::{Error, Result};
use crate::model::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackSpace {
    Input,
    Feature,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Perturbation norm: 2 or infinity.
    pub norm: f64,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step length; `None` uses `epsilon * 2.5 / steps`, which reaches
    /// the ball boundary with slack.
    pub step_size: Option<f64>,
    pub space: AttackSpace,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.norm == 2.0 || self.norm == f64::INFINITY) {
            return Err(Error::Domain(format!(
                "attack norm must be 2 or inf, got {}",
                self.norm
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Domain(format!(
                "attack budget must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("PGD needs at least one step".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Invalid(format!(
                    "step size must be positive, got {s}"
                )));
            }
            if s * (self.steps as f64) < self.epsilon {
                return Err(Error::Invalid(
                    "step_size * steps < epsilon: the ball boundary is unreachable".into(),
                ));
            }
        }
        Ok(())
    }

    fn resolved_step(&self) -> f64 {
        self.step_size
            .unwrap_or(self.epsilon * 2.5 / self.steps as f64)
    }
}

/// A differentiable classifier under attack: logits, their Jacobian, and
/// the projection onto the valid domain.
pub trait AttackTarget {
    fn dim(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// K x dim Jacobian of the logits.
    fn logit_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>>;
    /// Projects a point onto the domain. Input space is unconstrained;
    /// feature space clamps into `[0,1]^d`.
    fn clamp(&self, x: &mut [f64]);
}

/// Full base network attacked through its raw input.
pub struct BaseInputTarget<'a> {
    model: &'a MlpModel,
}

impl<'a> BaseInputTarget<'a> {
    pub fn new(model: &'a MlpModel) -> Self {
        Self { model }
    }
}

impl AttackTarget for BaseInputTarget<'_> {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.logits(x)
    }

    fn logit_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.model.input_jacobian(x)
    }

    fn clamp(&self, _x: &mut [f64]) {}
}

/// Smoothed classifier attacked through the raw input: the extractor and
/// the Bernstein head compose end to end, so the chain rule applies.
pub struct SmoothedInputTarget<'a> {
    model: &'a MlpModel,
    smoother: &'a BernsteinSmoother,
}

impl<'a> SmoothedInputTarget<'a> {
    pub fn new(model: &'a MlpModel, smoother: &'a BernsteinSmoother) -> Result<Self> {
        if model.feature_dim() != smoother.dim() {
            return Err(Error::Shape(format!(
                "model produces {} features but smoother expects {}",
                model.feature_dim(),
                smoother.dim()
            )));
        }
        Ok(Self { model, smoother })
    }
}

impl AttackTarget for SmoothedInputTarget<'_> {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.smoother.eval_multi(&self.model.features(x)?)
    }

    fn logit_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let feat = self.model.features(x)?;
        Ok(self.smoother.grad_multi(&feat)? * self.model.feature_jacobian(x)?)
    }

    fn clamp(&self, _x: &mut [f64]) {}
}

/// Base head attacked directly in feature space.
pub struct BaseFeatureTarget<'a> {
    model: &'a MlpModel,
}

impl<'a> BaseFeatureTarget<'a> {
    pub fn new(model: &'a MlpModel) -> Self {
        Self { model }
    }
}

impl AttackTarget for BaseFeatureTarget<'_> {
    fn dim(&self) -> usize {
        self.model.feature_dim()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.head_logits(x)
    }

    fn logit_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.model.head_jacobian(x)
    }

    fn clamp(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Smoothed head attacked directly in feature space. This is the target
/// whose minimal perturbation bounds the certified radius.
pub struct SmoothedFeatureTarget<'a> {
    smoother: &'a BernsteinSmoother,
}

impl<'a> SmoothedFeatureTarget<'a> {
    pub fn new(smoother: &'a BernsteinSmoother) -> Self {
        Self { smoother }
    }
}

impl AttackTarget for SmoothedFeatureTarget<'_> {
    fn dim(&self) -> usize {
        self.smoother.dim()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.smoother.eval_multi(x)
    }

    fn logit_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.smoother.grad_multi(x)
    }

    fn clamp(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub point: Vec<f64>,
    /// The loss gradient vanished at some iterate; the attack returned
    /// early because there is no ascent direction.
    pub zero_gradient: bool,
}

/// Gradient of cross-entropy loss w.r.t. the attack point:
/// `J^T (softmax(logits) - e_label)`.
fn ce_gradient<T: AttackTarget + ?Sized>(
    target: &T,
    x: &[f64],
    label: usize,
) -> Result<DVector<f64>> {
    let logits = target.logits(x)?;
    if label >= logits.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut s = softmax(&logits)?;
    s[label] -= 1.0;
    let jac = target.logit_jacobian(x)?;
    Ok(jac.transpose() * DVector::from_column_slice(&s))
}

fn check_point<T: AttackTarget + ?Sized>(target: &T, x: &[f64]) -> Result<()> {
    if x.len() != target.dim() {
        return Err(Error::Shape(format!(
            "attack point has {} coordinates, target expects {}",
            x.len(),
            target.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "attack point contains non-finite values".into(),
        ));
    }
    Ok(())
}

/// One signed (l-inf) or normalized (l2) gradient step of size `epsilon`.
pub fn fgsm<T: AttackTarget + ?Sized>(
    target: &T,
    x: &[f64],
    label: usize,
    epsilon: f64,
    norm: f64,
) -> Result<AttackOutcome> {
    check_point(target, x)?;
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Domain(format!(
            "budget must be non-negative, got {epsilon}"
        )));
    }
    if !(norm == 2.0 || norm == f64::INFINITY) {
        return Err(Error::Domain(format!(
            "attack norm must be 2 or inf, got {norm}"
        )));
    }
    if epsilon == 0.0 {
        return Ok(AttackOutcome {
            point: x.to_vec(),
            zero_gradient: false,
        });
    }
    let g = ce_gradient(target, x, label)?;
    let gn = g.norm();
    if gn == 0.0 {
        return Ok(AttackOutcome {
            point: x.to_vec(),
            zero_gradient: true,
        });
    }
    let mut point = x.to_vec();
    if norm == f64::INFINITY {
        for (p, gi) in point.iter_mut().zip(g.iter()) {
            *p += epsilon * gi.signum();
        }
    } else {
        for (p, gi) in point.iter_mut().zip(g.iter()) {
            *p += epsilon * gi / gn;
        }
    }
    target.clamp(&mut point);
    Ok(AttackOutcome {
        point,
        zero_gradient: false,
    })
}

/// Projects `x` onto the `norm`-ball of radius `epsilon` around `center`.
fn project_ball(x: &mut [f64], center: &[f64], epsilon: f64, norm: f64) {
    if norm == f64::INFINITY {
        for (xi, ci) in x.iter_mut().zip(center) {
            *xi = xi.clamp(ci - epsilon, ci + epsilon);
        }
    } else {
        let dist: f64 = x
            .iter()
            .zip(center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist > epsilon {
            let scale = epsilon / dist;
            for (xi, ci) in x.iter_mut().zip(center) {
                *xi = ci + (*xi - ci) * scale;
            }
        }
    }
}

/// Projected gradient ascent on cross-entropy. Every iterate stays inside
/// the budget ball around the clean point and inside the target's domain;
/// the domain clamp moves coordinates towards the in-box center, so it
/// never re-violates the ball.
pub fn pgd<T: AttackTarget + ?Sized>(
    target: &T,
    x0: &[f64],
    label: usize,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    check_point(target, x0)?;
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(AttackOutcome {
            point: x0.to_vec(),
            zero_gradient: false,
        });
    }
    let step = cfg.resolved_step();
    let mut x = x0.to_vec();
    for _ in 0..cfg.steps {
        let g = ce_gradient(target, &x, label)?;
        let gn = g.norm();
        if gn == 0.0 {
            return Ok(AttackOutcome {
                point: x,
                zero_gradient: true,
            });
        }
        if cfg.norm == f64::INFINITY {
            for (xi, gi) in x.iter_mut().zip(g.iter()) {
                *xi += step * gi.signum();
            }
        } else {
            for (xi, gi) in x.iter_mut().zip(g.iter()) {
                *xi += step * gi / gn;
            }
        }
        project_ball(&mut x, x0, cfg.epsilon, cfg.norm);
        target.clamp(&mut x);
        debug_assert!(
            ball_distance(&x, x0, cfg.norm) <= cfg.epsilon + 1e-12,
            "PGD iterate escaped the budget ball"
        );
    }
    Ok(AttackOutcome {
        point: x,
        zero_gradient: false,
    })
}

fn ball_distance(x: &[f64], center: &[f64], norm: f64) -> f64 {
    if norm == f64::INFINITY {
        x.iter()
            .zip(center)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    } else {
        x.iter()
            .zip(center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Runs PGD at each budget in ascending order and returns the first one
/// that flips the prediction away from `label`; `None` when every budget
/// fails. A success at eps upper-bounds the boundary distance by eps.
pub fn empirical_min_perturbation<T: AttackTarget + ?Sized>(
    target: &T,
    x0: &[f64],
    label: usize,
    budgets: &[f64],
    cfg: &AttackConfig,
) -> Result<Option<f64>> {
    check_point(target, x0)?;
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Invalid("budgets must be ascending".into()));
    }
    if budgets.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::Invalid("budgets must be non-negative".into()));
    }
    if crate::argmax(&target.logits(x0)?) != label {
        return Ok(Some(0.0));
    }
    for &eps in budgets {
        let mut run_cfg = cfg.clone();
        run_cfg.epsilon = eps;
        let adv = pgd(target, x0, label, &run_cfg)?;
        if crate::argmax(&target.logits(&adv.point)?) != label {
            return Ok(Some(eps));
        }
    }
    Ok(None)
}
