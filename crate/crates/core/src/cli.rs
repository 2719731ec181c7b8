//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{synth_generate, DatasetIndex, LoadMode, SynthConfig};
use crate::engine::{ExecMode, OptimConfig, Tensor};
use crate::error::{Error, Result};
use crate::netzoo::{ArchKind, ArchSpec};
use crate::pipeline::{
    bench_latency, evaluate_model, load_refiners, prepare_samples, save_refiners, train_pose_model_with,
    train_refiners, PoseModel, Sample,
};
use crate::preprocess::{CropRect, CubeSpec, Intrinsics, NormalizedPatch, PreprocessConfig};
use crate::refine::{RefineTrainConfig, RefinerKind};

#[derive(Debug, Parser)]
#[command(name = "handpose", version, about = "Depth-based 3D hand pose regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Train a first-stage pose regressor.
    Train(TrainArgs),
    /// Train per-joint refiners for a trained model.
    RefineTrain(RefineTrainArgs),
    /// Evaluate a model on a dataset and write metric CSVs.
    Eval(EvalArgs),
    /// Measure single-frame prediction latency.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent pose-manifold dimensionality.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Probability of a hole at a depth discontinuity.
    #[arg(long, default_value_t = 0.0)]
    pub holes: f64,
    /// Annotation noise in mm.
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub parallel: bool,
}

/// Optimizer flags shared by the training commands.
#[derive(Debug, Args, Default)]
pub struct OptimArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub huber_delta: Option<f64>,
}

impl OptimArgs {
    fn apply(&self, cfg: &mut OptimConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.huber_delta {
            cfg.huber_delta = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// shallow, deep or multiscale.
    #[arg(long)]
    pub arch: Option<String>,
    /// Pose-prior dimensionality; 0 trains direct regression.
    #[arg(long)]
    pub prior_dim: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with defaults for any of the flags above.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Training configuration as read from `--config`; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<ArchKind>,
    pub prior_dim: Option<usize>,
    pub patch_size: Option<usize>,
    pub seed: Option<u64>,
    pub optim: Option<OptimConfig>,
}

#[derive(Debug, Args)]
pub struct RefineTrainArgs {
    /// First-stage checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Joint to train; all joints when omitted.
    #[arg(long)]
    pub joint: Option<usize>,
    /// orref or stdref.
    #[arg(long, default_value = "orref")]
    pub kind: String,
    /// Directory receiving `joint_<k>.dpck` files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplier on the first-stage error used as perturbation scale.
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving `joints.csv` and `curve.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of per-joint refiners to apply first.
    #[arg(long)]
    pub refine: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub iterations: usize,
    /// Largest curve threshold in mm (1 mm steps).
    #[arg(long, default_value_t = 80)]
    pub max_threshold: u32,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// Directory of per-joint refiners to include in the timing.
    #[arg(long)]
    pub with_refine: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub iterations: usize,
}

fn mode(parallel: bool) -> ExecMode {
    if parallel {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Runs a parsed command, returning the lines it reports on stdout.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::RefineTrain(a) => cmd_refine_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<Vec<String>> {
    let mut cfg = SynthConfig::with_size(a.n, a.seed, a.size);
    cfg.latent_dim = a.k;
    cfg.hole_prob = a.holes;
    cfg.label_noise_mm = a.label_noise;
    let index = synth_generate(&cfg, &a.out, mode(a.parallel))?;
    Ok(vec![format!("wrote {} frames to {}", index.len(), a.out.display())])
}

fn load_samples(dir: &Path, preprocess: &PreprocessConfig, exec: ExecMode) -> Result<(DatasetIndex, Vec<Sample>)> {
    if !dir.is_dir() {
        return Err(Error::invalid("data", format!("{} is not a dataset directory", dir.display())));
    }
    let index = DatasetIndex::load(dir)?;
    let (frames, _) = index.load_all(LoadMode::Strict)?;
    let samples = prepare_samples(&frames, preprocess, exec)?;
    Ok((index, samples))
}

fn cmd_train(a: TrainArgs) -> Result<Vec<String>> {
    let file: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    let arch: ArchKind = match &a.arch {
        Some(s) => s.parse()?,
        None => file.arch.unwrap_or(ArchKind::Deep),
    };
    let prior_dim = a.prior_dim.or(file.prior_dim).unwrap_or(0);
    let mut preprocess = PreprocessConfig::default();
    if let Some(s) = a.patch_size.or(file.patch_size) {
        preprocess.patch_size = s;
    }
    let mut optim = file.optim.unwrap_or_default();
    optim.seed = a.seed.or(file.seed).unwrap_or(optim.seed);
    a.optim.apply(&mut optim);

    let exec = mode(a.parallel);
    let (index, samples) = load_samples(&a.data, &preprocess, exec)?;
    let spec = ArchSpec::preset(arch, preprocess.patch_size, index.joints()).with_prior(prior_dim);
    let (model, trace) = train_pose_model_with(&spec, &preprocess, &samples, &optim, exec, |_, _| {})?;
    model.save(&a.out)?;
    let loss_path = a.loss_csv.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;
    Ok(vec![format!(
        "trained {} on {} frames, final loss {:.6}; checkpoint {}",
        spec.label(),
        samples.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    )])
}

fn check_joints(model: &PoseModel, index: &DatasetIndex) -> Result<()> {
    if model.spec.joints != index.joints() {
        return Err(Error::shape("eval", "joint count", model.spec.joints, index.joints()));
    }
    Ok(())
}

fn cmd_refine_train(a: RefineTrainArgs) -> Result<Vec<String>> {
    let model = PoseModel::load(&a.model)?;
    let kind: RefinerKind = a.kind.parse()?;
    let exec = mode(a.parallel);
    let (index, samples) = load_samples(&a.data, &model.preprocess, exec)?;
    check_joints(&model, &index)?;
    let joints: Vec<usize> = match a.joint {
        Some(j) => vec![j],
        None => (0..model.spec.joints).collect(),
    };
    let mut cfg = RefineTrainConfig::default();
    cfg.optim.seed = a.seed;
    cfg.noise_scale = a.noise_scale;
    a.optim.apply(&mut cfg.optim);
    let refiners = train_refiners(&model, kind, &joints, &samples, &cfg, exec)?;
    save_refiners(&refiners, &model.preprocess, &a.out)?;
    Ok(vec![format!("trained {} refiner(s) into {}", refiners.len(), a.out.display())])
}

fn cmd_eval(a: EvalArgs) -> Result<Vec<String>> {
    let model = PoseModel::load(&a.model)?;
    let (index, samples) = load_samples(&a.data, &model.preprocess, ExecMode::Sequential)?;
    check_joints(&model, &index)?;
    let refiners = match &a.refine {
        Some(dir) => load_refiners(dir)?,
        None => Vec::new(),
    };
    let thresholds: Vec<f64> = (0..=a.max_threshold).map(f64::from).collect();
    let report = evaluate_model(&model, &refiners, a.iterations, &samples, &thresholds)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let joints = a.out.join("joints.csv");
    let curve = a.out.join("curve.csv");
    fs::write(&joints, report.joints_csv(&index.index.joint_names)).map_err(|e| Error::io(&joints, e))?;
    fs::write(&curve, report.curve_csv()).map_err(|e| Error::io(&curve, e))?;
    Ok(vec![format!(
        "{}: {} frames, mean joint error {:.3} mm",
        model.spec.label(),
        report.frames,
        report.overall
    )])
}

/// A patch with a centered flat disc, so benchmarks need no dataset.
pub fn bench_patch(size: usize) -> NormalizedPatch {
    let c = (size as f64 - 1.0) / 2.0;
    let values = Tensor::from_fn(&[size, size], |i| {
        let (r, q) = ((i / size) as f64 - c, (i % size) as f64 - c);
        if r * r + q * q < (size as f64 / 3.0).powi(2) {
            0.0
        } else {
            1.0
        }
    });
    let intrinsics = Intrinsics {
        fx: 475.0,
        fy: 475.0,
        cx: 160.0,
        cy: 120.0,
    };
    let cube = CubeSpec {
        center: [0.0, 0.0, 500.0],
        side: PreprocessConfig::default().cube_side,
    };
    let half = 475.0 * cube.side / 2.0 / cube.center[2];
    NormalizedPatch {
        values,
        cube,
        crop: CropRect {
            u0: 160.0 - half,
            v0: 120.0 - half,
            u1: 160.0 + half,
            v1: 120.0 + half,
        },
        intrinsics,
    }
}

fn cmd_bench(a: BenchArgs) -> Result<Vec<String>> {
    let model = PoseModel::load(&a.model)?;
    let refiners = match &a.with_refine {
        Some(dir) => load_refiners(dir)?,
        None => Vec::new(),
    };
    let patch = bench_patch(model.spec.input_size);
    let r = bench_latency(&model, &refiners, a.iterations, &patch, a.warmup, a.runs)?;
    Ok(vec![format!(
        "arch={} runs={} median_ms={:.4} mean_ms={:.4}",
        r.arch, r.runs, r.median_ms, r.mean_ms
    )])
}
