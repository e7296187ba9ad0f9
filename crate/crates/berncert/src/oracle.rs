//! Brute-force nearest-boundary search for validating certified radii.
//!
//! The oracle rasterizes the unit box, keeps every grid point whose class
//! differs from the class at the query point, and bisects along the
//! segment to each candidate to localize the crossing. It is exponential
//! in the dimension and deliberately capped at d <= 3; higher-dimensional
//! runs fall back to sphere sampling and attack upper bounds.

use rayon::prelude::*;

use crate::certify::p_norm;
use crate::error::{Error, Result};

/// Grid oracle parameters.
#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    /// Lattice points per axis.
    pub grid_resolution: usize,
    /// Bisection steps along each candidate segment.
    pub refine_bisections: usize,
    /// Norm order for distances.
    pub norm: f64,
}

impl OracleConfig {
    /// Defaults sized so the total grid stays near 2.6e5 points: 512 per
    /// axis up to d = 2, 64 per axis at d = 3.
    pub fn for_dim(d: usize) -> Result<Self> {
        let grid_resolution = match d {
            1 | 2 => 512,
            3 => 64,
            _ => {
                return Err(Error::Domain(format!(
                    "grid oracle supports d <= 3, got d = {d}"
                )))
            }
        };
        Ok(OracleConfig {
            grid_resolution,
            refine_bisections: 40,
            norm: 2.0,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.grid_resolution < 2 {
            return Err(Error::Domain(format!(
                "grid resolution must be at least 2, got {}",
                self.grid_resolution
            )));
        }
        if self.refine_bisections == 0 {
            return Err(Error::Domain("need at least one bisection step".into()));
        }
        Ok(())
    }
}

/// A located boundary crossing.
#[derive(Debug, Clone)]
pub struct BoundarySearch {
    /// p-distance from the query point to the witness.
    pub distance: f64,
    /// Point just past the crossing, classified differently from the
    /// query. Reporting the differing side keeps the distance an upper
    /// bound on the true crossing distance.
    pub witness: Vec<f64>,
}

/// Diagonal of one grid cell under the p-norm; the oracle's resolution
/// guarantee is stated in these units.
pub fn grid_diagonal(d: usize, resolution: usize, norm: f64) -> Result<f64> {
    if d == 0 || resolution < 2 {
        return Err(Error::Domain(
            "diagonal needs d >= 1 and resolution >= 2".into(),
        ));
    }
    let h = 1.0 / (resolution - 1) as f64;
    p_norm(&vec![h; d], norm)
}

fn lattice_point(mut flat: usize, d: usize, resolution: usize) -> Vec<f64> {
    let h = 1.0 / (resolution - 1) as f64;
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        x[i] = (flat % resolution) as f64 * h;
        flat /= resolution;
    }
    x
}

/// Bisects the segment from `x0` (class `base`) to `far` (any other
/// class), maintaining the invariant that the low end classifies as
/// `base` and the high end does not. Returns the high-end parameter.
fn bisect_segment<C>(
    classify: &C,
    x0: &[f64],
    far: &[f64],
    base: usize,
    bisections: usize,
) -> Result<f64>
where
    C: Fn(&[f64]) -> Result<usize> + Sync + ?Sized,
{
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut mid_point = vec![0.0; x0.len()];
    for _ in 0..bisections {
        let mid = 0.5 * (lo + hi);
        for (m, (a, b)) in mid_point.iter_mut().zip(x0.iter().zip(far)) {
            *m = a + mid * (b - a);
        }
        if classify(&mid_point)? == base {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Scans the grid for points classified differently from `x0`, then
/// bisects towards the nearest ones. The returned distance lies within
/// one grid diagonal above the true nearest boundary distance whenever
/// the grid sees the other class at all; a constant grid yields `None`.
///
/// Candidates are processed in order of increasing distance and the scan
/// stops once no remaining candidate can improve on the best crossing,
/// which keeps typical queries far below the worst-case bisection count.
pub fn nearest_boundary_grid<C>(
    classify: &C,
    x0: &[f64],
    cfg: &OracleConfig,
) -> Result<Option<BoundarySearch>>
where
    C: Fn(&[f64]) -> Result<usize> + Sync + ?Sized,
{
    cfg.validate()?;
    let d = x0.len();
    if d == 0 || d > 3 {
        return Err(Error::Domain(format!(
            "grid oracle supports 1 <= d <= 3, got d = {d}"
        )));
    }
    if x0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("query point must lie in [0,1]^d".into()));
    }
    let base = classify(x0)?;
    let res = cfg.grid_resolution;
    let total = res.pow(d as u32);

    let mut candidates: Vec<(f64, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let point = lattice_point(flat, d, res);
            if classify(&point)? == base {
                Ok(None)
            } else {
                let diff: Vec<f64> = x0.iter().zip(&point).map(|(a, b)| a - b).collect();
                Ok(Some((p_norm(&diff, cfg.norm)?, point)))
            }
        })
        .filter_map(Result::transpose)
        .collect::<Result<_>>()?;
    if candidates.is_empty() {
        return Ok(None);
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<BoundarySearch> = None;
    for (center_dist, point) in &candidates {
        if let Some(b) = &best {
            // Crossings on the segment to a candidate are no farther than
            // its center, so once centers pass the best distance the first
            // candidate's diagonal guarantee already holds.
            if *center_dist >= b.distance {
                break;
            }
        }
        let t_hi = bisect_segment(classify, x0, point, base, cfg.refine_bisections)?;
        let witness: Vec<f64> = x0
            .iter()
            .zip(point)
            .map(|(a, b)| a + t_hi * (b - a))
            .collect();
        let diff: Vec<f64> = x0.iter().zip(&witness).map(|(a, b)| a - b).collect();
        let distance = p_norm(&diff, cfg.norm)?;
        if best.as_ref().is_none_or(|b| distance < b.distance) {
            best = Some(BoundarySearch { distance, witness });
        }
    }
    Ok(best)
}

/// Bisects along a fixed direction: if the class at `x0 + max_t * dir`
/// differs from the class at `x0`, returns the crossing parameter just on
/// the differing side, accurate to `max_t * 2^-bisections`. The whole
/// segment must lie in the classifier's domain.
pub fn direction_bisect<C>(
    classify: &C,
    x0: &[f64],
    direction: &[f64],
    max_t: f64,
    bisections: usize,
) -> Result<Option<f64>>
where
    C: Fn(&[f64]) -> Result<usize> + Sync + ?Sized,
{
    if direction.len() != x0.len() {
        return Err(Error::Shape(format!(
            "direction has {} coordinates, point has {}",
            direction.len(),
            x0.len()
        )));
    }
    if !(max_t > 0.0) || !max_t.is_finite() {
        return Err(Error::Domain(format!(
            "max_t must be positive, got {max_t}"
        )));
    }
    if bisections == 0 {
        return Err(Error::Domain("need at least one bisection step".into()));
    }
    let base = classify(x0)?;
    let far: Vec<f64> = x0
        .iter()
        .zip(direction)
        .map(|(a, v)| a + max_t * v)
        .collect();
    if classify(&far)? == base {
        return Ok(None);
    }
    let t_hi = bisect_segment(classify, x0, &far, base, bisections)?;
    Ok(Some(t_hi * max_t))
}
