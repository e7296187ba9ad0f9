//! Command-line pipeline: dataset synthesis, training, certification,
//! curves, attacks, and the 2-D and regression demos.
//!
//! Every command resolves one seed (flag, then `BERNCERT_SEED`, then 0)
//! and threads it through a single ChaCha generator, so fixed-seed runs
//! produce byte-identical CSVs. Wall-clock timings and other
//! run-dependent facts go into the JSON summaries only, never into CSVs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::{
    self, AttackConfig, AttackSpace, AttackTarget, BaseFeatureTarget, BaseInputTarget,
    SmoothedFeatureTarget, SmoothedInputTarget,
};
use crate::bernstein::BernsteinSmoother;
use crate::certify::{self, CertResult};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, Dataset, MlpModel, RegressionData, TrainConfig};
use crate::solvers::{Method, SolverConfig, SubproblemNorm};

const RESULTS_HEADER: &str = "index,label,prediction,radius,p,residual,converged,xi,c";

#[derive(Parser, Debug)]
#[command(
    name = "berncert",
    version,
    about = "Certified robustness for low-dimensional classifier heads via Bernstein smoothing"
)]
pub struct Cli {
    /// RNG seed; falls back to BERNCERT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-example parallelism (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a toy dataset CSV.
    Synth(SynthArgs),
    /// Train a spectrally normalized classifier on a dataset CSV.
    Train(TrainArgs),
    /// Certify every example of a dataset against a trained model.
    Certify(CertifyArgs),
    /// Turn a certification results CSV into a certified-accuracy curve.
    Curve(CurveArgs),
    /// Attack a model (base or smoothed) and report robust accuracy.
    Attack(AttackArgs),
    /// Emit class rasters and safe-zone radii for a 2-D model.
    Demo2d(Demo2dArgs),
    /// Fit a 1-D regressor and emit its Bernstein-smoothed curve.
    Regress(RegressArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    TwoMoons,
    Blobs,
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Newton,
    GaussNewton,
    Lm,
    TrustRegion,
    Dogbox,
}

impl SolverArg {
    fn apply(self, cfg: &mut SolverConfig) {
        cfg.method = match self {
            SolverArg::Newton => Method::Newton,
            SolverArg::GaussNewton => Method::GaussNewton,
            SolverArg::Lm => Method::Lm,
            SolverArg::TrustRegion | SolverArg::Dogbox => Method::TrustRegion,
        };
        if self == SolverArg::Dogbox {
            cfg.subproblem_norm = SubproblemNorm::LInf;
        }
    }

    fn name(self) -> &'static str {
        match self {
            SolverArg::Newton => "newton",
            SolverArg::GaussNewton => "gauss-newton",
            SolverArg::Lm => "lm",
            SolverArg::TrustRegion => "trust-region",
            SolverArg::Dogbox => "dogbox",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackMethodArg {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Input,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Base,
    Smoothed,
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    /// Dataset family.
    #[arg(value_enum)]
    pub kind: SynthKind,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub samples: usize,
    /// Noise level (ignored by blobs).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Training dataset CSV (x_1..x_m,label).
    pub dataset: PathBuf,
    /// Output model JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON path (default: model path with .metrics.json).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Hidden ReLU widths before the feature layer.
    #[arg(long, value_delimiter = ',', default_value = "16,16")]
    pub hidden: Vec<usize>,
    /// Width of the sigmoid feature layer (the smoothing dimension d).
    #[arg(long, default_value_t = 2)]
    pub feature_dim: usize,
    /// Enable PGD adversarial training at this budget.
    #[arg(long)]
    pub adv_eps: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub adv_steps: usize,
    #[arg(long, value_parser = parse_attack_norm, default_value = "inf")]
    pub adv_norm: f64,
}

#[derive(clap::Args, Debug)]
pub struct CertifyArgs {
    /// Trained model JSON.
    pub model: PathBuf,
    /// Dataset CSV to certify.
    pub dataset: PathBuf,
    /// Output results CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON path (default: results path with .summary.json).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Bernstein degree per axis.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Radius norm order (> 1, or "inf").
    #[arg(long, value_parser = parse_p_norm, default_value = "2")]
    pub p: f64,
    /// Boundary sharpness parameter ("inf" = exact boundary).
    #[arg(long = "C", value_parser = parse_c_param, default_value = "inf")]
    pub c: f64,
    #[arg(long, value_enum, default_value_t = SolverArg::Lm)]
    pub solver: SolverArg,
    /// Residual tolerance on ||Phi||^2.
    #[arg(long, default_value_t = 1.49e-8)]
    pub tol: f64,
    /// Step-size tolerance.
    #[arg(long, default_value_t = 1.49e-8)]
    pub x_tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
}

#[derive(clap::Args, Debug)]
pub struct CurveArgs {
    /// Certification results CSV.
    pub results: PathBuf,
    /// Output curve CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Ascending radii to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub radii: Vec<f64>,
    /// Count non-converged rows as radius 0.
    #[arg(long)]
    pub exclude_nonconverged: bool,
}

#[derive(clap::Args, Debug)]
pub struct AttackArgs {
    /// Trained model JSON.
    pub model: PathBuf,
    /// Dataset CSV to attack.
    pub dataset: PathBuf,
    /// Output attack CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON path (default: attack path with .summary.json).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AttackMethodArg::Pgd)]
    pub method: AttackMethodArg,
    /// Perturbation budget.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Attack norm: 2 or "inf".
    #[arg(long, value_parser = parse_attack_norm, default_value = "2")]
    pub norm: f64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// PGD step size (default eps * 2.5 / steps).
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Perturb raw inputs or feature-space anchors.
    #[arg(long, value_enum, default_value_t = SpaceArg::Input)]
    pub space: SpaceArg,
    /// Attack the base classifier or its smoothed version.
    #[arg(long, value_enum, default_value_t = TargetArg::Base)]
    pub target: TargetArg,
    /// Bernstein degree for the smoothed target.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
}

#[derive(clap::Args, Debug)]
pub struct Demo2dArgs {
    /// Trained model JSON with 2-D inputs.
    pub model: PathBuf,
    /// Directory receiving grids.csv, radii.csv, and summary.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Raster resolution per axis.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Bernstein degrees to raster, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    pub n: Vec<usize>,
    /// Number of random anchors to certify for safe zones.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, value_parser = parse_p_norm, default_value = "2")]
    pub p: f64,
    #[arg(long = "C", value_parser = parse_c_param, default_value = "inf")]
    pub c: f64,
    /// Degree used for the safe-zone radii.
    #[arg(long, default_value_t = 4)]
    pub cert_n: usize,
}

#[derive(clap::Args, Debug)]
pub struct RegressArgs {
    /// Regression dataset CSV (x,y).
    pub data: PathBuf,
    /// Output curve CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON path (default: curve path with .summary.json).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Bernstein degree.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Evaluation grid size.
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
    #[arg(long, default_value_t = 3000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
}

/// One record of what a command was asked to do; embedded in every JSON
/// summary so outputs are self-describing.
#[derive(Serialize, Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// "inf" or a decimal literal; JSON numbers cannot carry infinity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

fn parse_p_norm(s: &str) -> std::result::Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    let p: f64 = s.parse().map_err(|_| format!("not a norm order: {s}"))?;
    if p.is_finite() && p > 1.0 {
        Ok(p)
    } else {
        Err(format!("norm order must be > 1 or inf, got {s}"))
    }
}

fn parse_c_param(s: &str) -> std::result::Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    let c: f64 = s
        .parse()
        .map_err(|_| format!("not a sharpness value: {s}"))?;
    if c.is_finite() && c > 0.0 {
        Ok(c)
    } else {
        Err(format!("C must be positive or inf, got {s}"))
    }
}

fn parse_attack_norm(s: &str) -> std::result::Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    if s.parse::<f64>() == Ok(2.0) {
        return Ok(2.0);
    }
    Err(format!("attack norm must be 2 or inf, got {s}"))
}

/// "inf" or the shortest round-trip decimal; inverse of the parsers above.
pub fn format_norm(p: f64) -> String {
    if p == f64::INFINITY {
        "inf".to_string()
    } else {
        p.to_string()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn sibling_json(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    name.push('.');
    name.push_str(suffix);
    path.with_file_name(name)
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("BERNCERT_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| Error::Invalid(format!("BERNCERT_SEED is not a u64: {v}"))),
        Err(_) => Ok(0),
    }
}

/// Parses arguments from the process environment and runs one command.
/// Argument errors exit with code 2 via clap; everything else surfaces as
/// [`Error`] for the binary to map onto exit codes.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    run_cli(cli)
}

pub fn run_cli(cli: Cli) -> Result<()> {
    let seed = resolve_seed(cli.seed)?;
    if let Some(jobs) = cli.jobs {
        // A second configuration attempt in the same process is harmless;
        // the pool keeps its first size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(&args, seed),
        Command::Train(args) => cmd_train(&args, seed),
        Command::Certify(args) => cmd_certify(&args, seed),
        Command::Curve(args) => cmd_curve(&args, seed),
        Command::Attack(args) => cmd_attack(&args, seed),
        Command::Demo2d(args) => cmd_demo2d(&args, seed),
        Command::Regress(args) => cmd_regress(&args, seed),
    }
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match args.kind {
        SynthKind::TwoMoons => {
            model::two_moons(args.samples, args.noise, &mut rng).to_csv(&args.out)?
        }
        SynthKind::Blobs => model::gaussian_blobs(args.samples, &mut rng).to_csv(&args.out)?,
        SynthKind::Sine => {
            model::noisy_sine(args.samples, args.noise, &mut rng).to_csv(&args.out)?
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    manifest: RunManifest,
    train_acc: f64,
    nat_acc: f64,
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let data = Dataset::from_csv(&args.dataset)?;
    let arch = Architecture {
        hidden: args.hidden.clone(),
        feature_dim: args.feature_dim,
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch,
        adversarial: args.adv_eps.map(|epsilon| model::AdversarialConfig {
            epsilon,
            steps: args.adv_steps,
            norm: args.adv_norm,
        }),
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = model::train_toy(&data, &arch, &cfg, &mut rng)?;
    model.save_json(&args.out)?;
    let acc = model::accuracy(&model, &data)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| sibling_json(&args.out, "metrics.json"));
    write_json(
        &metrics_path,
        &TrainMetrics {
            manifest: RunManifest {
                command: "train".into(),
                seed,
                dataset_path: Some(args.dataset.display().to_string()),
                model_path: Some(args.out.display().to_string()),
                d: Some(args.feature_dim),
                ..Default::default()
            },
            train_acc: acc,
            nat_acc: acc,
        },
    )?;
    println!(
        "trained on {} examples, accuracy {:.4}, wrote {}",
        data.len(),
        acc,
        args.out.display()
    );
    Ok(())
}

fn results_csv(results: &[CertResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        let label = r.label.map_or_else(String::new, |l| l.to_string());
        out.push_str(&format!(
            "{},{},{},{:.8e},{},{:.8e},{},{:.8e},{}\n",
            r.index,
            label,
            r.prediction,
            r.radius,
            format_norm(r.p),
            r.residual_norm_sq,
            r.converged,
            r.xi,
            format_norm(r.c_param),
        ));
    }
    out
}

/// Reads a results CSV back into partial [`CertResult`]s. Anchor and
/// boundary-point coordinates are not stored in the CSV, so those fields
/// come back empty; curve building only needs the scalar columns.
pub fn read_results_csv(path: &Path) -> Result<Vec<CertResult>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != RESULTS_HEADER {
        return Err(Error::Invalid(format!(
            "unexpected results header: {header}"
        )));
    }
    let parse_f = |s: &str, what: &str| -> Result<f64> {
        if s.eq_ignore_ascii_case("inf") {
            return Ok(f64::INFINITY);
        }
        s.parse::<f64>()
            .map_err(|_| Error::Invalid(format!("bad {what}: {s}")))
    };
    let mut out = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        if rec.len() != 9 {
            return Err(Error::Invalid(format!(
                "results row has {} fields, expected 9",
                rec.len()
            )));
        }
        let parse_u = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad {what}: {s}")))
        };
        let label = if rec[1].is_empty() {
            None
        } else {
            Some(parse_u(&rec[1], "label")?)
        };
        out.push(CertResult {
            index: parse_u(&rec[0], "index")?,
            label,
            prediction: parse_u(&rec[2], "prediction")?,
            radius: parse_f(&rec[3], "radius")?,
            p: parse_f(&rec[4], "norm order")?,
            anchor: Vec::new(),
            boundary_point: Vec::new(),
            residual_norm_sq: parse_f(&rec[5], "residual")?,
            converged: rec[6]
                .parse::<bool>()
                .map_err(|_| Error::Invalid(format!("bad converged flag: {}", &rec[6])))?,
            xi: parse_f(&rec[7], "xi")?,
            c_param: parse_f(&rec[8], "c")?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct CertifySummary {
    manifest: RunManifest,
    examples: usize,
    natural_accuracy: f64,
    mean_radius: f64,
    convergence_rate: f64,
    wall_time_per_example_s: f64,
}

fn solver_config(solver: SolverArg, tol: f64, x_tol: f64, max_iters: usize) -> SolverConfig {
    let mut cfg = SolverConfig::default();
    solver.apply(&mut cfg);
    cfg.f_tol = tol;
    cfg.x_tol = x_tol;
    cfg.max_iters = max_iters;
    cfg
}

fn cmd_certify(args: &CertifyArgs, seed: u64) -> Result<()> {
    let model = MlpModel::load_json(&args.model)?;
    let data = Dataset::from_csv(&args.dataset)?;
    let smoother = certify::build_head_smoother(&model, args.n)?;
    let cfg = solver_config(args.solver, args.tol, args.x_tol, args.max_iters);
    let start = Instant::now();
    let results = certify::certify_dataset(&data, &model, &smoother, args.p, args.c, &cfg)?;
    let wall = start.elapsed().as_secs_f64();
    write_text(&args.out, &results_csv(&results))?;

    let n_res = results.len() as f64;
    let correct = results
        .iter()
        .filter(|r| r.label == Some(r.prediction))
        .count() as f64;
    let converged = results.iter().filter(|r| r.converged).count() as f64;
    let mean_radius = results.iter().map(|r| r.radius).sum::<f64>() / n_res;
    let summary_path = args
        .summary
        .clone()
        .unwrap_or_else(|| sibling_json(&args.out, "summary.json"));
    write_json(
        &summary_path,
        &CertifySummary {
            manifest: RunManifest {
                command: "certify".into(),
                seed,
                model_path: Some(args.model.display().to_string()),
                dataset_path: Some(args.dataset.display().to_string()),
                n: Some(args.n),
                d: Some(model.feature_dim()),
                c: Some(format_norm(args.c)),
                p: Some(format_norm(args.p)),
                solver: Some(args.solver.name().to_string()),
                tolerance: Some(args.tol),
                ..Default::default()
            },
            examples: results.len(),
            natural_accuracy: correct / n_res,
            mean_radius,
            convergence_rate: converged / n_res,
            wall_time_per_example_s: wall / n_res,
        },
    )?;
    println!(
        "certified {} examples: natural accuracy {:.4}, mean radius {:.4}, convergence {:.4}",
        results.len(),
        correct / n_res,
        mean_radius,
        converged / n_res
    );
    Ok(())
}

fn cmd_curve(args: &CurveArgs, _seed: u64) -> Result<()> {
    let results = read_results_csv(&args.results)?;
    let curve = certify::certified_curve(&results, &args.radii, args.exclude_nonconverged)?;
    let mut out = String::from("radius,certified_accuracy\n");
    for (r, acc) in &curve {
        out.push_str(&format!("{r},{acc}\n"));
    }
    write_text(&args.out, &out)?;
    println!("wrote {} radii to {}", curve.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    manifest: RunManifest,
    examples: usize,
    robust_accuracy: f64,
    flip_rate: f64,
}

struct AttackRow {
    index: usize,
    label: usize,
    pred_clean: usize,
    pred_adv: usize,
}

fn cmd_attack(args: &AttackArgs, seed: u64) -> Result<()> {
    let model = MlpModel::load_json(&args.model)?;
    let data = Dataset::from_csv(&args.dataset)?;
    let smoother = if args.target == TargetArg::Smoothed {
        Some(certify::build_head_smoother(&model, args.n)?)
    } else {
        None
    };
    let space = match args.space {
        SpaceArg::Input => AttackSpace::Input,
        SpaceArg::Feature => AttackSpace::Feature,
    };
    let target: Box<dyn AttackTarget + Sync> = match (args.target, &smoother) {
        (TargetArg::Base, _) if args.space == SpaceArg::Input => {
            Box::new(BaseInputTarget::new(&model))
        }
        (TargetArg::Base, _) => Box::new(BaseFeatureTarget::new(&model)),
        (TargetArg::Smoothed, Some(sm)) if args.space == SpaceArg::Input => {
            Box::new(SmoothedInputTarget::new(&model, sm)?)
        }
        (TargetArg::Smoothed, Some(sm)) => Box::new(SmoothedFeatureTarget::new(sm)),
        (TargetArg::Smoothed, None) => unreachable!("smoother built above"),
    };
    let cfg = AttackConfig {
        norm: args.norm,
        epsilon: args.eps,
        steps: args.steps,
        step_size: args.step_size,
        space,
    };
    cfg.validate()?;

    let rows: Vec<AttackRow> = data
        .xs
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(index, (x, &label))| {
            let point = match args.space {
                SpaceArg::Input => x.clone(),
                SpaceArg::Feature => model.features(x)?,
            };
            let pred_clean = crate::argmax(&target.logits(&point)?);
            let outcome = match args.method {
                AttackMethodArg::Fgsm => {
                    attacks::fgsm(target.as_ref(), &point, label, args.eps, args.norm)?
                }
                AttackMethodArg::Pgd => attacks::pgd(target.as_ref(), &point, label, &cfg)?,
            };
            let pred_adv = crate::argmax(&target.logits(&outcome.point)?);
            Ok(AttackRow {
                index,
                label,
                pred_clean,
                pred_adv,
            })
        })
        .collect::<Result<_>>()?;

    let mut out = String::from("index,label,pred_clean,pred_adv,epsilon,norm,success\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index,
            r.label,
            r.pred_clean,
            r.pred_adv,
            args.eps,
            format_norm(args.norm),
            r.pred_adv != r.pred_clean,
        ));
    }
    write_text(&args.out, &out)?;

    let n_rows = rows.len() as f64;
    let robust = rows.iter().filter(|r| r.pred_adv == r.label).count() as f64 / n_rows;
    let flipped = rows.iter().filter(|r| r.pred_adv != r.pred_clean).count() as f64 / n_rows;
    let summary_path = args
        .summary
        .clone()
        .unwrap_or_else(|| sibling_json(&args.out, "summary.json"));
    write_json(
        &summary_path,
        &AttackSummary {
            manifest: RunManifest {
                command: "attack".into(),
                seed,
                model_path: Some(args.model.display().to_string()),
                dataset_path: Some(args.dataset.display().to_string()),
                n: smoother.as_ref().map(|_| args.n),
                d: Some(model.feature_dim()),
                p: Some(format_norm(args.norm)),
                ..Default::default()
            },
            examples: rows.len(),
            robust_accuracy: robust,
            flip_rate: flipped,
        },
    )?;
    println!(
        "attacked {} examples at eps {}: robust accuracy {:.4}, flip rate {:.4}",
        rows.len(),
        args.eps,
        robust,
        flipped
    );
    Ok(())
}

#[derive(Serialize)]
struct DisagreementEntry {
    n: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct Demo2dSummary {
    manifest: RunManifest,
    grid: usize,
    disagreement: Vec<DisagreementEntry>,
}

fn cmd_demo2d(args: &Demo2dArgs, seed: u64) -> Result<()> {
    let model = MlpModel::load_json(&args.model)?;
    if model.input_dim() != 2 {
        return Err(Error::Constraint(format!(
            "the 2-D demo needs a 2-input model, got {} inputs",
            model.input_dim()
        )));
    }
    if args.grid < 2 {
        return Err(Error::Invalid(
            "raster needs at least 2 points per axis".into(),
        ));
    }
    if args.n.is_empty() {
        return Err(Error::Invalid("need at least one degree to raster".into()));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let smoothers = args
        .n
        .iter()
        .map(|&n| certify::build_head_smoother(&model, n))
        .collect::<Result<Vec<_>>>()?;

    // One raster pass: base argmax plus one smoothed argmax column per n.
    let g = args.grid;
    let h = 1.0 / (g - 1) as f64;
    let mut header = String::from("x1,x2");
    header.push_str(",base");
    for n in &args.n {
        header.push_str(&format!(",smoothed_n{n}"));
    }
    let mut grid_csv = header;
    grid_csv.push('\n');
    let mut disagree = vec![0usize; args.n.len()];
    for i in 0..g {
        for j in 0..g {
            let x = [i as f64 * h, j as f64 * h];
            let base = model.predict(&x)?;
            let feat = model.features(&x)?;
            grid_csv.push_str(&format!("{},{},{}", x[0], x[1], base));
            for (k, sm) in smoothers.iter().enumerate() {
                let cls = crate::argmax(&sm.eval_multi(&feat)?);
                if cls != base {
                    disagree[k] += 1;
                }
                grid_csv.push_str(&format!(",{cls}"));
            }
            grid_csv.push('\n');
        }
    }
    write_text(&args.out_dir.join("grids.csv"), &grid_csv)?;

    // Safe-zone radii at seeded random anchors.
    let cert_smoother = certify::build_head_smoother(&model, args.cert_n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::default();
    let mut radii_csv = String::from("x1,x2,prediction,radius\n");
    for _ in 0..args.samples {
        let x = [
            rand::Rng::random::<f64>(&mut rng),
            rand::Rng::random::<f64>(&mut rng),
        ];
        let res = certify::certify(&x, None, &model, &cert_smoother, args.p, args.c, &cfg)?;
        radii_csv.push_str(&format!(
            "{},{},{},{:.8e}\n",
            x[0], x[1], res.prediction, res.radius
        ));
    }
    write_text(&args.out_dir.join("radii.csv"), &radii_csv)?;

    let cells = (g * g) as f64;
    let disagreement: Vec<DisagreementEntry> = args
        .n
        .iter()
        .zip(&disagree)
        .map(|(&n, &count)| DisagreementEntry {
            n,
            fraction: count as f64 / cells,
        })
        .collect();
    write_json(
        &args.out_dir.join("summary.json"),
        &Demo2dSummary {
            manifest: RunManifest {
                command: "demo2d".into(),
                seed,
                model_path: Some(args.model.display().to_string()),
                output_dir: Some(args.out_dir.display().to_string()),
                d: Some(model.feature_dim()),
                c: Some(format_norm(args.c)),
                p: Some(format_norm(args.p)),
                n: Some(args.cert_n),
                ..Default::default()
            },
            grid: g,
            disagreement,
        },
    )?;
    println!(
        "rastered {}x{} cells for degrees {:?} into {}",
        g,
        g,
        args.n,
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RegressSummary {
    manifest: RunManifest,
    tv_base: f64,
    tv_smoothed: f64,
}

fn total_variation(ys: &[f64]) -> f64 {
    ys.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

fn cmd_regress(args: &RegressArgs, seed: u64) -> Result<()> {
    let data = RegressionData::from_csv(&args.data)?;
    if args.grid < 2 {
        return Err(Error::Invalid(
            "evaluation grid needs at least 2 points".into(),
        ));
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = model::train_regressor(&data, &args.hidden, &cfg, &mut rng)?;
    let smoother = BernsteinSmoother::precompute_grid(
        |x| {
            model
                .logits(x)
                .expect("regressor evaluation is total on grid points")
        },
        args.n,
        1,
        1,
    )?;

    let h = 1.0 / (args.grid - 1) as f64;
    let mut out = String::from("x,base,smoothed\n");
    let mut base_curve = Vec::with_capacity(args.grid);
    let mut smooth_curve = Vec::with_capacity(args.grid);
    for i in 0..args.grid {
        let x = [i as f64 * h];
        let base = model.logits(&x)?[0];
        let smoothed = smoother.eval_multi(&x)?[0];
        base_curve.push(base);
        smooth_curve.push(smoothed);
        out.push_str(&format!("{},{},{}\n", x[0], base, smoothed));
    }
    write_text(&args.out, &out)?;

    let summary_path = args
        .summary
        .clone()
        .unwrap_or_else(|| sibling_json(&args.out, "summary.json"));
    write_json(
        &summary_path,
        &RegressSummary {
            manifest: RunManifest {
                command: "regress".into(),
                seed,
                dataset_path: Some(args.data.display().to_string()),
                n: Some(args.n),
                d: Some(1),
                ..Default::default()
            },
            tv_base: total_variation(&base_curve),
            tv_smoothed: total_variation(&smooth_curve),
        },
    )?;
    println!(
        "fit regressor on {} points: TV base {:.4}, TV smoothed {:.4}",
        data.len(),
        total_variation(&base_curve),
        total_variation(&smooth_curve)
    );
    Ok(())
}
