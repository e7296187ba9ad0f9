//! Certified robustness for low-dimensional classifiers via Bernstein
//! polynomial smoothing.
//!
//! The pipeline splits a network into a 1-Lipschitz feature extractor `G`
//! (enforced by spectral normalization) and a classifier head `f` acting on
//! the unit box `[0,1]^d`. The head is replaced by its tensor-product
//! Bernstein polynomial, a smooth surrogate whose decision boundary can be
//! located numerically: for each input we solve a small nonlinear
//! least-squares system whose root is the nearest boundary point, and the
//! distance to that root is a certified radius in feature space. Because
//! `G` contracts distances, the same radius is valid upstream of the
//! extractor.
//!
//! Modules:
//! * [`bernstein`]: the smoothing operator and its exact gradients;
//! * [`model`]: small MLPs, spectral normalization, toy-dataset training;
//! * [`boundary`]: the decision-boundary residual system;
//! * [`solvers`]: Newton, Gauss-Newton, Levenberg-Marquardt and
//!   trust-region least-squares drivers;
//! * [`certify`]: per-input certification and certified-accuracy curves;
//! * [`attacks`]: FGSM/PGD empirical upper bounds on the same radii;
//! * [`oracle`]: brute-force boundary search used to validate the solvers;
//! * [`cli`]: the `berncert` command-line front end.

// Guards are written as `!(x > 0.0)` so NaN fails them; `x <= 0.0` lets
// NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bernstein;
pub mod boundary;
pub mod certify;
pub mod cli;
pub mod error;
pub mod model;
pub mod oracle;
pub mod solvers;

pub use error::{Error, Result};

/// Index of the largest component; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
