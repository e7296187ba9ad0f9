//! Small MLP classifiers with spectrally normalized feature extractors.
//!
//! A model is a stack of dense layers split at `head_index`: layers before
//! the split form the feature extractor `G`, layers from the split on form
//! the classifier head `f`. The last extractor layer ends in a sigmoid so
//! features land in `(0,1)^d`, the domain of the Bernstein operator.
//!
//! Every extractor weight matrix is divided by its largest singular value
//! (estimated with power iteration), making each layer 1-Lipschitz under
//! the spectral norm. ReLU and sigmoid are 1-Lipschitz too, and the stack
//! contains no skip connections (a skip doubles the bound per block), so
//!
//! ```text
//! || G(a) - G(b) ||_2 <= || a - b ||_2
//! ```
//!
//! which is what lets a certified radius in feature space transfer to the
//! input space. The head is deliberately left unnormalized: its scale only
//! sharpens the logits and does not affect the bound.
//!
//! Training is plain minibatch SGD with a fixed learning rate; the weights
//! are re-normalized after every optimizer step with a cheap persisted
//! power iteration and once more, with a larger budget, before the model
//! is returned.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Pointwise nonlinearity of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Id,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Id => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Id => 1.0,
        }
    }
}

/// One dense layer `a = act(W x + b)`; `weight[(i, j)]` feeds input j into
/// output i.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub act: Activation,
}

impl DenseLayer {
    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = &self.weight * x + &self.bias;
        z.map(|v| self.act.apply(v))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    layers: Vec<LayerRepr>,
    head_index: usize,
    d: usize,
    k: usize,
}

/// A dense classifier split into feature extractor and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    head_index: usize,
    feature_dim: usize,
    num_classes: usize,
}

impl From<MlpModel> for ModelRepr {
    fn from(m: MlpModel) -> Self {
        ModelRepr {
            layers: m
                .layers
                .iter()
                .map(|l| LayerRepr {
                    w: l.weight
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                    b: l.bias.iter().copied().collect(),
                    act: l.act,
                })
                .collect(),
            head_index: m.head_index,
            d: m.feature_dim,
            k: m.num_classes,
        }
    }
}

impl TryFrom<ModelRepr> for MlpModel {
    type Error = Error;

    fn try_from(repr: ModelRepr) -> Result<Self> {
        let mut layers = Vec::with_capacity(repr.layers.len());
        for (i, l) in repr.layers.iter().enumerate() {
            let rows = l.w.len();
            if rows == 0 {
                return Err(Error::Invalid(format!(
                    "layer {i} has an empty weight matrix"
                )));
            }
            let cols = l.w[0].len();
            if cols == 0 || l.w.iter().any(|r| r.len() != cols) {
                return Err(Error::Invalid(format!(
                    "layer {i} weight matrix is not rectangular"
                )));
            }
            if l.b.len() != rows {
                return Err(Error::Invalid(format!(
                    "layer {i} bias length {} does not match {} output units",
                    l.b.len(),
                    rows
                )));
            }
            let flat: Vec<f64> = l.w.iter().flatten().copied().collect();
            if flat.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "layer {i} contains non-finite values"
                )));
            }
            layers.push(DenseLayer {
                weight: DMatrix::from_row_slice(rows, cols, &flat),
                bias: DVector::from_column_slice(&l.b),
                act: l.act,
            });
        }
        let model = MlpModel::new(layers, repr.head_index)?;
        if model.feature_dim != repr.d {
            return Err(Error::Invalid(format!(
                "declared d = {} but the extractor produces {} features",
                repr.d, model.feature_dim
            )));
        }
        if model.num_classes != repr.k {
            return Err(Error::Invalid(format!(
                "declared k = {} but the head produces {} logits",
                repr.k, model.num_classes
            )));
        }
        Ok(model)
    }
}

impl MlpModel {
    /// Assembles a model and checks its structural invariants: consecutive
    /// layer shapes chain, the head is nonempty, and the extractor (when
    /// present) ends in a sigmoid so features lie in `(0,1)^d`.
    pub fn new(layers: Vec<DenseLayer>, head_index: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("model needs at least one layer".into()));
        }
        if head_index >= layers.len() {
            return Err(Error::Invalid(format!(
                "head_index {} leaves no head layers (model has {})",
                head_index,
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[1].weight.ncols() != w[0].weight.nrows() {
                return Err(Error::Shape(format!(
                    "layer expecting {} inputs follows one producing {} outputs",
                    w[1].weight.ncols(),
                    w[0].weight.nrows()
                )));
            }
        }
        if head_index >= 1 && layers[head_index - 1].act != Activation::Sigmoid {
            return Err(Error::Invalid(
                "the last extractor layer must use a sigmoid so features lie in (0,1)^d".into(),
            ));
        }
        let feature_dim = if head_index == 0 {
            layers[0].weight.ncols()
        } else {
            layers[head_index - 1].weight.nrows()
        };
        let num_classes = layers.last().unwrap().weight.nrows();
        Ok(Self {
            layers,
            head_index,
            feature_dim,
            num_classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn head_index(&self) -> usize {
        self.head_index
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    fn check_input(&self, input: &[f64], expect: usize, what: &str) -> Result<()> {
        if input.len() != expect {
            return Err(Error::Shape(format!(
                "{what} has {} coordinates, model expects {expect}",
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "{what} contains non-finite values"
            )));
        }
        Ok(())
    }

    /// Feature vector `G(input)`.
    ///
    /// With `head_index == 0` the extractor is the identity; the input must
    /// then already lie in the unit box.
    pub fn features(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input, self.input_dim(), "input")?;
        if self.head_index == 0 {
            if input.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(
                    "identity extractor requires inputs inside [0,1]^d".into(),
                ));
            }
            return Ok(input.to_vec());
        }
        let mut a = DVector::from_column_slice(input);
        for l in &self.layers[..self.head_index] {
            a = l.forward(&a);
        }
        Ok(a.iter().copied().collect())
    }

    /// Head logits `f(x)` for a feature-space point.
    pub fn head_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, self.feature_dim, "feature point")?;
        let mut a = DVector::from_column_slice(x);
        for l in &self.layers[self.head_index..] {
            a = l.forward(&a);
        }
        Ok(a.iter().copied().collect())
    }

    /// Logits of the full stack, `f(G(input))`.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input, self.input_dim(), "input")?;
        let mut a = DVector::from_column_slice(input);
        for l in &self.layers {
            a = l.forward(&a);
        }
        Ok(a.iter().copied().collect())
    }

    /// Argmax class of the full stack.
    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(crate::argmax(&self.logits(input)?))
    }

    /// Jacobian of the feature extractor, `d G / d input` (d x m).
    pub fn feature_jacobian(&self, input: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(input, self.input_dim(), "input")?;
        if self.head_index == 0 {
            return Ok(DMatrix::identity(self.feature_dim, self.feature_dim));
        }
        Ok(jacobian_over(&self.layers[..self.head_index], input).1)
    }

    /// Jacobian of the head, `d f / d x` (K x d).
    pub fn head_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x, self.feature_dim, "feature point")?;
        Ok(jacobian_over(&self.layers[self.head_index..], x).1)
    }

    /// Jacobian of the full stack, `d logits / d input` (K x m).
    pub fn input_jacobian(&self, input: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(input, self.input_dim(), "input")?;
        Ok(jacobian_over(&self.layers, input).1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Forward pass over a slice of layers that also accumulates the Jacobian
/// by the chain rule.
fn jacobian_over(layers: &[DenseLayer], input: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let mut a = DVector::from_column_slice(input);
    let mut jac = DMatrix::identity(input.len(), input.len());
    for l in layers {
        let z = &l.weight * &a + &l.bias;
        let wj = &l.weight * &jac;
        let mut next = wj;
        for (i, zi) in z.iter().enumerate() {
            let s = l.act.derivative(*zi);
            for j in 0..next.ncols() {
                next[(i, j)] *= s;
            }
        }
        // Rows of W*jac were scaled in place; dimensions may shrink, so
        // rebuild the (rows(z) x cols) view explicitly.
        jac = next.rows(0, z.len()).into_owned();
        a = z.map(|v| l.act.apply(v));
    }
    (a, jac)
}

/// Largest singular value estimated with power iteration on `W^T W`.
///
/// The start vector is deterministic (tilted ones), so repeated calls agree
/// bit for bit. The Rayleigh quotient climbs monotonically, meaning the
/// estimate approaches the true value from below as `iters` grows. The
/// estimate is positively homogeneous: `spectral_norm(c W) = c *
/// spectral_norm(W)` for `c > 0` at any iteration count, which is what
/// makes normalize-then-re-estimate land at exactly 1.
pub fn spectral_norm(w: &DMatrix<f64>, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Domain(
            "power iteration needs at least one round".into(),
        ));
    }
    if w.nrows() == 0 || w.ncols() == 0 {
        return Err(Error::Shape("matrix must be nonempty".into()));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "matrix contains non-finite entries".into(),
        ));
    }
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate(
            "zero matrix has no dominant singular direction".into(),
        ));
    }
    let mut v = start_direction(w.ncols());
    if (w * &v).norm() == 0.0 {
        // The tilted start landed exactly in the kernel; restart from the
        // heaviest column instead (a nonzero matrix always has one).
        let j = (0..w.ncols())
            .max_by(|&a, &b| w.column(a).norm().partial_cmp(&w.column(b).norm()).unwrap())
            .unwrap();
        v = DVector::zeros(w.ncols());
        v[j] = 1.0;
    }
    for _ in 0..iters {
        let u = w * &v;
        let un = u.norm();
        if un == 0.0 {
            break;
        }
        let vt = w.transpose() * (u / un);
        let vn = vt.norm();
        if vn == 0.0 {
            break;
        }
        v = vt / vn;
    }
    Ok((w * &v).norm())
}

fn start_direction(dim: usize) -> DVector<f64> {
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + 1e-3 * i as f64);
    let n = v.norm();
    v /= n;
    v
}

/// Returns a copy of the model whose extractor weights are divided by their
/// estimated spectral norms. Head layers are untouched.
pub fn normalize_weights(model: &MlpModel, iters: usize) -> Result<MlpModel> {
    let mut layers = model.layers.clone();
    for l in layers[..model.head_index].iter_mut() {
        let sigma = spectral_norm(&l.weight, iters)?;
        l.weight /= sigma;
    }
    MlpModel::new(layers, model.head_index)
}

/// A labeled classification dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(xs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        if xs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                xs.len(),
                labels.len()
            )));
        }
        let input_dim = xs[0].len();
        if input_dim == 0 || xs.iter().any(|r| r.len() != input_dim) {
            return Err(Error::Invalid(
                "feature rows must share a nonzero width".into(),
            ));
        }
        if xs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(
                "dataset contains non-finite features".into(),
            ));
        }
        let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
        Ok(Self {
            xs,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Reads the `x_1,..,x_m,label` schema; the header is mandatory.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_io(path))?;
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 2 || headers.iter().next_back() != Some("label") {
            return Err(Error::Invalid(format!(
                "expected header x_1,..,x_m,label in {}",
                path.display()
            )));
        }
        for (i, h) in headers.iter().take(cols - 1).enumerate() {
            let want = format!("x_{}", i + 1);
            if h != want {
                return Err(Error::Invalid(format!(
                    "expected column {want}, found {h} in {}",
                    path.display()
                )));
            }
        }
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != cols {
                return Err(Error::Invalid(format!(
                    "row {} has {} fields, expected {cols}",
                    xs.len() + 2,
                    rec.len()
                )));
            }
            let mut row = Vec::with_capacity(cols - 1);
            for v in rec.iter().take(cols - 1) {
                row.push(v.trim().parse::<f64>().map_err(|_| {
                    Error::Invalid(format!("bad feature value {v:?} in {}", path.display()))
                })?);
            }
            let label = rec
                .get(cols - 1)
                .unwrap()
                .trim()
                .parse::<usize>()
                .map_err(|_| {
                    Error::Invalid(format!(
                        "bad label {:?} in {}",
                        rec.get(cols - 1).unwrap(),
                        path.display()
                    ))
                })?;
            xs.push(row);
            labels.push(label);
        }
        Self::new(xs, labels)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 1..=self.input_dim {
            out.push_str(&format!("x_{i},"));
        }
        out.push_str("label\n");
        for (row, label) in self.xs.iter().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{label}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| {
        if matches!(e.kind(), csv::ErrorKind::Io(_)) {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!("kind checked above"),
            }
        } else {
            Error::Csv(e)
        }
    }
}

/// Interleaved two-moons samples with Gaussian noise.
pub fn two_moons(n_points: usize, noise: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let mut xs = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (mut x, mut y, label) = if i % 2 == 0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        x += noise * nx;
        y += noise * ny;
        xs.push(vec![x, y]);
        labels.push(label);
    }
    Dataset::new(xs, labels).expect("generated dataset is well-formed")
}

/// Two well-separated Gaussian blobs.
pub fn gaussian_blobs(n_points: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let centers = [(-2.0, -2.0), (2.0, 2.0)];
    let mut xs = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let label = i % 2;
        let (cx, cy) = centers[label];
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        xs.push(vec![cx + 0.5 * nx, cy + 0.5 * ny]);
        labels.push(label);
    }
    Dataset::new(xs, labels).expect("generated dataset is well-formed")
}

/// Scalar regression samples `(x, y)` on `[0,1]`.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl RegressionData {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Invalid(
                "regression data must be nonempty and paired".into(),
            ));
        }
        if xs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("regression inputs must lie in [0,1]".into()));
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("regression targets must be finite".into()));
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Reads the `x,y` schema; the header is mandatory.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_io(path))?;
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
            return Err(Error::Invalid(format!(
                "expected header x,y in {}",
                path.display()
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Invalid(format!("bad value {v:?} in {}", path.display())))
            };
            xs.push(parse(&rec[0])?);
            ys.push(parse(&rec[1])?);
        }
        Self::new(xs, ys)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y\n");
        for (x, y) in self.xs.iter().zip(&self.ys) {
            out.push_str(&format!("{x:?},{y:?}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Noisy samples of a wiggly scalar function on a regular grid.
pub fn noisy_sine(n_points: usize, noise: f64, rng: &mut ChaCha8Rng) -> RegressionData {
    let n = n_points.max(2);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        let z: f64 = rng.sample(StandardNormal);
        let y = 0.8 * (2.0 * std::f64::consts::PI * x).sin() + noise * z;
        xs.push(x);
        ys.push(y);
    }
    RegressionData::new(xs, ys).expect("generated data is well-formed")
}

/// Widths of the network built by [`train_toy`]: ReLU hidden layers, a
/// sigmoid feature layer of width `feature_dim`, and a linear head.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            feature_dim: 2,
        }
    }
}

/// PGD perturbation applied to each training batch.
#[derive(Debug, Clone)]
pub struct AdversarialConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub norm: f64,
}

/// Hyperparameters for the toy trainers.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Power-iteration rounds after every optimizer step.
    pub power_iters_train: usize,
    /// Power-iteration rounds for the final normalization pass.
    pub power_iters_freeze: usize,
    pub adversarial: Option<AdversarialConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            learning_rate: 0.05,
            batch_size: 32,
            power_iters_train: 3,
            power_iters_freeze: 500,
            adversarial: None,
        }
    }
}

fn init_layers(dims: &[usize], acts: &[Activation], rng: &mut ChaCha8Rng) -> Vec<DenseLayer> {
    debug_assert_eq!(dims.len(), acts.len() + 1);
    let mut layers = Vec::with_capacity(acts.len());
    for (i, &act) in acts.iter().enumerate() {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-scale..scale));
        layers.push(DenseLayer {
            weight,
            bias: DVector::zeros(fan_out),
            act,
        });
    }
    layers
}

enum LossKind {
    CrossEntropy,
    SquaredError,
}

/// One SGD step worth of gradients; returns the mean batch loss.
fn backprop(
    layers: &[DenseLayer],
    xb: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    loss: &LossKind,
    grads: &mut [(DMatrix<f64>, DVector<f64>)],
) -> f64 {
    let batch = xb.ncols() as f64;
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pres = Vec::with_capacity(layers.len());
    acts.push(xb.clone());
    for l in layers {
        let mut z = &l.weight * acts.last().unwrap();
        for mut col in z.column_iter_mut() {
            col += &l.bias;
        }
        let a = z.map(|v| l.act.apply(v));
        pres.push(z);
        acts.push(a);
    }
    let out = acts.last().unwrap();
    let (loss_value, mut delta) = match loss {
        LossKind::CrossEntropy => {
            // targets is 1 x B holding the class index per column.
            let mut d = DMatrix::zeros(out.nrows(), out.ncols());
            let mut total = 0.0;
            for c in 0..out.ncols() {
                let col = out.column(c);
                let max = col.max();
                let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let label = targets[(0, c)] as usize;
                total += -(exps[label] / sum).ln();
                for r in 0..out.nrows() {
                    let s = exps[r] / sum;
                    d[(r, c)] = (s - if r == label { 1.0 } else { 0.0 }) / batch;
                }
            }
            (total / batch, d)
        }
        LossKind::SquaredError => {
            let diff = out - targets;
            let total: f64 = diff.iter().map(|v| v * v).sum();
            (total / batch, diff * (2.0 / batch))
        }
    };
    for (li, l) in layers.iter().enumerate().rev() {
        // delta currently holds dL/d a_li; pull it through the activation.
        let z = &pres[li];
        for c in 0..delta.ncols() {
            for r in 0..delta.nrows() {
                delta[(r, c)] *= l.act.derivative(z[(r, c)]);
            }
        }
        grads[li].0 = &delta * acts[li].transpose();
        grads[li].1 = DVector::from_fn(delta.nrows(), |r, _| delta.row(r).sum());
        if li > 0 {
            delta = l.weight.transpose() * delta;
        }
    }
    loss_value
}

/// One persisted-direction power-iteration pass: refreshes the cached right
/// singular direction and returns the matching left direction with the
/// sigma estimate (floored away from zero).
fn sn_estimate(w: &DMatrix<f64>, v: &mut DVector<f64>, iters: usize) -> (DVector<f64>, f64) {
    for _ in 0..iters {
        let u = w * &*v;
        let un = u.norm();
        if un == 0.0 {
            break;
        }
        let vt = w.transpose() * (u / un);
        let vn = vt.norm();
        if vn == 0.0 {
            break;
        }
        *v = vt / vn;
    }
    let wv = w * &*v;
    let sigma = wv.norm().max(1e-12);
    (wv / sigma, sigma)
}

/// Trains a spectrally normalized classifier on a toy dataset.
///
/// The returned model has every extractor layer re-normalized with
/// `power_iters_freeze` rounds, so `spectral_norm(w, power_iters_freeze)`
/// evaluates to 1 on each of them.
pub fn train_toy(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MlpModel> {
    if data.num_classes < 2 {
        return Err(Error::Constraint(
            "training needs at least two classes".into(),
        ));
    }
    if arch.feature_dim == 0 {
        return Err(Error::Invalid(
            "feature dimension must be at least 1".into(),
        ));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Invalid("learning rate must be positive".into()));
    }
    let mut dims = vec![data.input_dim];
    dims.extend_from_slice(&arch.hidden);
    dims.push(arch.feature_dim);
    dims.push(data.num_classes);
    let mut acts = vec![Activation::Relu; arch.hidden.len()];
    acts.push(Activation::Sigmoid);
    acts.push(Activation::Id);
    let head_index = arch.hidden.len() + 1;

    let mut layers = init_layers(&dims, &acts, rng);
    let mut sn_dirs: Vec<DVector<f64>> = layers[..head_index]
        .iter()
        .map(|l| start_direction(l.weight.ncols()))
        .collect();

    let mut grads = grad_buffers(&layers);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = cfg.batch_size.max(1);

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            // Raw weights carry the optimizer state; the forward pass sees
            // W/sigma with sigma tracked by persisted power iteration.
            let mut view = layers.clone();
            let mut sn_us = Vec::with_capacity(head_index);
            let mut sn_sigmas = Vec::with_capacity(head_index);
            for (li, v) in sn_dirs.iter_mut().enumerate() {
                let (u, sigma) = sn_estimate(&layers[li].weight, v, cfg.power_iters_train.max(1));
                view[li].weight /= sigma;
                sn_us.push(u);
                sn_sigmas.push(sigma);
            }
            let mut xb = DMatrix::zeros(data.input_dim, chunk.len());
            let mut yb = DMatrix::zeros(1, chunk.len());
            let adv_model = match &cfg.adversarial {
                Some(_) => Some(MlpModel::new(view.clone(), head_index)?),
                None => None,
            };
            for (c, &i) in chunk.iter().enumerate() {
                let mut row = data.xs[i].clone();
                if let (Some(adv), Some(model)) = (&cfg.adversarial, &adv_model) {
                    let target = crate::attacks::BaseInputTarget::new(model);
                    let cfg = crate::attacks::AttackConfig {
                        norm: adv.norm,
                        epsilon: adv.epsilon,
                        steps: adv.steps,
                        step_size: None,
                        space: crate::attacks::AttackSpace::Input,
                    };
                    row = crate::attacks::pgd(&target, &row, data.labels[i], &cfg)?.point;
                }
                for (r, v) in row.iter().enumerate() {
                    xb[(r, c)] = *v;
                }
                yb[(0, c)] = data.labels[i] as f64;
            }
            backprop(&view, &xb, &yb, &LossKind::CrossEntropy, &mut grads);
            for li in 0..layers.len() {
                let (gw, gb) = &grads[li];
                if li < head_index {
                    // Pull the gradient back through W/sigma(W); sigma
                    // differentiates to u v^T at the current singular pair.
                    let inner: f64 = gw
                        .iter()
                        .zip(view[li].weight.iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    let correction = &sn_us[li] * sn_dirs[li].transpose() * inner;
                    layers[li].weight -= (gw - correction) * (cfg.learning_rate / sn_sigmas[li]);
                } else {
                    layers[li].weight -= gw * cfg.learning_rate;
                }
                layers[li].bias -= gb * cfg.learning_rate;
            }
        }
    }

    let model = MlpModel::new(layers, head_index)?;
    normalize_weights(&model, cfg.power_iters_freeze)
}

fn grad_buffers(layers: &[DenseLayer]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    layers
        .iter()
        .map(|l| {
            (
                DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                DVector::zeros(l.bias.len()),
            )
        })
        .collect()
}

fn sgd_step(layers: &mut [DenseLayer], grads: &[(DMatrix<f64>, DVector<f64>)], lr: f64) {
    for (l, (gw, gb)) in layers.iter_mut().zip(grads) {
        l.weight -= gw * lr;
        l.bias -= gb * lr;
    }
}

/// Fits an unconstrained scalar regressor (no spectral normalization, head
/// spanning the whole stack) to 1-D data.
pub fn train_regressor(
    data: &RegressionData,
    hidden: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MlpModel> {
    if data.is_empty() {
        return Err(Error::Invalid("regression data is empty".into()));
    }
    let mut dims = vec![1usize];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(Activation::Id);

    let mut layers = init_layers(&dims, &acts, rng);
    let mut grads = grad_buffers(&layers);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch_size = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let mut xb = DMatrix::zeros(1, chunk.len());
            let mut yb = DMatrix::zeros(1, chunk.len());
            for (c, &i) in chunk.iter().enumerate() {
                xb[(0, c)] = data.xs[i];
                yb[(0, c)] = data.ys[i];
            }
            backprop(&layers, &xb, &yb, &LossKind::SquaredError, &mut grads);
            sgd_step(&mut layers, &grads, cfg.learning_rate);
        }
    }
    MlpModel::new(layers, 0)
}

/// Fraction of points the full stack classifies correctly.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &label) in data.xs.iter().zip(&data.labels) {
        if model.predict(x)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
