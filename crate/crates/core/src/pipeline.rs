//! End-to-end glue: frames to training samples, pose-model training and
//! persistence, and evaluation with optional refinement.

use std::path::Path;

use crate::engine::{map_samples, train_epochs_with, Checkpoint, ExecMode, Graph, OptimConfig, Tensor, TrainSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::netzoo::{batch_inputs, build, build_uninitialized, predict_batch, ArchSpec};
use crate::pose::Pose;
use crate::preprocess::{denormalize_pose, detect_hand, extract_patch, normalize_pose, DepthFrame, NormalizedPatch, PreprocessConfig};
use crate::prior::{fit_pca, PriorModel};
use crate::refine::{per_joint_rmse, refine_batch, train_refiner, RefineSpec, RefineTrainConfig, Refiner, RefinerKind};

/// One preprocessed frame with its annotation in both frames of reference.
#[derive(Debug, Clone)]
pub struct Sample {
    pub patch: NormalizedPatch,
    pub pose_norm: Pose,
    pub pose_mm: Pose,
}

/// Detects the hand, crops and normalizes every frame.
pub fn prepare_samples(frames: &[(DepthFrame, Pose)], cfg: &PreprocessConfig, mode: ExecMode) -> Result<Vec<Sample>> {
    map_samples(mode, frames.len(), || (), |i, _| {
        let (frame, pose) = &frames[i];
        let tag = |e: Error| Error::Record {
            frame_id: frame.frame_id.clone(),
            msg: e.to_string(),
        };
        let cube = detect_hand(frame, cfg).map_err(tag)?;
        let patch = extract_patch(frame, &cube, cfg.patch_size).map_err(tag)?;
        let pose_norm = normalize_pose(pose, &cube).map_err(tag)?;
        Ok(Sample {
            patch,
            pose_norm,
            pose_mm: pose.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// A first-stage regressor with everything needed to run it.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub spec: ArchSpec,
    pub preprocess: PreprocessConfig,
    pub graph: Graph<f32>,
}

impl PoseModel {
    /// Normalized poses for a set of samples.
    pub fn predict_norm(&self, samples: &[Sample]) -> Result<Vec<Pose>> {
        let patches: Vec<&NormalizedPatch> = samples.iter().map(|s| &s.patch).collect();
        predict_batch(&self.graph, &self.spec, &patches)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_graph(
            &self.graph,
            serde_json::to_value(&self.spec)?,
            serde_json::to_value(self.preprocess)?,
            self.spec.prior_dim.unwrap_or(0),
            Vec::new(),
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_value(ckpt.manifest.architecture.clone())
            .map_err(|e| Error::Checkpoint(format!("not a pose-model checkpoint: {e}")))?;
        let preprocess: PreprocessConfig = serde_json::from_value(ckpt.manifest.preprocess.clone())
            .map_err(|e| Error::Checkpoint(format!("bad preprocessing record: {e}")))?;
        let mut graph = build_uninitialized::<f32>(&spec, 0)?;
        ckpt.load_into(&mut graph)?;
        Ok(PoseModel { spec, preprocess, graph })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Fits the prior on the normalized training poses when the spec asks for
/// one, builds the network and trains it. Returns the per-epoch loss.
pub fn train_pose_model(
    spec: &ArchSpec,
    preprocess: &PreprocessConfig,
    train: &[Sample],
    cfg: &OptimConfig,
    mode: ExecMode,
) -> Result<(PoseModel, Vec<f64>)> {
    train_pose_model_with(spec, preprocess, train, cfg, mode, |_, _| {})
}

pub fn train_pose_model_with(
    spec: &ArchSpec,
    preprocess: &PreprocessConfig,
    train: &[Sample],
    cfg: &OptimConfig,
    mode: ExecMode,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(PoseModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preprocess.patch_size != spec.input_size {
        return Err(Error::shape("train", "patch size", spec.input_size, preprocess.patch_size));
    }
    let poses: Vec<Pose> = train.iter().map(|s| s.pose_norm.clone()).collect();
    if let Some(p) = poses.iter().find(|p| p.num_joints() != spec.joints) {
        return Err(Error::shape("train", "joint count", spec.joints, p.num_joints()));
    }
    let prior: Option<PriorModel> = spec.prior_dim.map(|d| fit_pca(&poses, d)).transpose()?;
    let mut graph = build::<f32>(spec, cfg.seed, prior.as_ref())?;
    graph.set_mode(mode);
    let patches: Vec<&NormalizedPatch> = train.iter().map(|s| &s.patch).collect();
    let inputs = batch_inputs::<f32>(spec, &patches)?;
    let flat: Vec<f64> = poses.iter().flat_map(Pose::to_flat).collect();
    let targets = Tensor::<f32>::from_f64(&[poses.len(), spec.output_len()], &flat)?;
    let data = TrainSet::new(inputs, targets)?;
    let trace = train_epochs_with(&mut graph, &data, cfg, on_epoch)?;
    graph.set_mode(ExecMode::Sequential);
    Ok((
        PoseModel {
            spec: spec.clone(),
            preprocess: *preprocess,
            graph,
        },
        trace,
    ))
}

/// Trains one refiner per joint on perturbations scaled by the pose model's
/// per-joint training error.
pub fn train_refiners(
    model: &PoseModel,
    kind: RefinerKind,
    joints: &[usize],
    train: &[Sample],
    cfg: &RefineTrainConfig,
    mode: ExecMode,
) -> Result<Vec<Refiner>> {
    let pred = model.predict_norm(train)?;
    let truth: Vec<Pose> = train.iter().map(|s| s.pose_norm.clone()).collect();
    let rmse = per_joint_rmse(&pred, &truth)?;
    let patches: Vec<&NormalizedPatch> = train.iter().map(|s| &s.patch).collect();
    joints
        .iter()
        .map(|&j| {
            let err = *rmse
                .get(j)
                .ok_or_else(|| Error::invalid("refine-train", format!("joint {j} out of range")))?;
            let spec = RefineSpec::for_patch(model.spec.input_size, j);
            train_refiner(kind, &spec, &patches, &truth, Some(&pred), err, cfg, mode).map(|(r, _)| r)
        })
        .collect()
}

/// Millimeter predictions for a set of samples, optionally refined.
pub fn predict_mm(
    model: &PoseModel,
    refiners: &[Refiner],
    iterations: usize,
    samples: &[Sample],
) -> Result<Vec<Pose>> {
    let mut pred = model.predict_norm(samples)?;
    if !refiners.is_empty() {
        let patches: Vec<&NormalizedPatch> = samples.iter().map(|s| &s.patch).collect();
        pred = refine_batch(refiners, &patches, &pred, iterations)?;
    }
    pred.iter()
        .zip(samples)
        .map(|(p, s)| denormalize_pose(p, &s.patch.cube))
        .collect()
}

pub fn evaluate_model(
    model: &PoseModel,
    refiners: &[Refiner],
    iterations: usize,
    samples: &[Sample],
    thresholds: &[f64],
) -> Result<EvalReport> {
    let pred = predict_mm(model, refiners, iterations, samples)?;
    let truth: Vec<Pose> = samples.iter().map(|s| s.pose_mm.clone()).collect();
    evaluate(&pred, &truth, thresholds)
}

/// Per-joint refiner checkpoints in `dir`, named `joint_<k>.dpck`.
pub fn save_refiners(refiners: &[Refiner], preprocess: &PreprocessConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in refiners {
        r.to_checkpoint(serde_json::to_value(preprocess)?)?
            .save(dir.join(refiner_file(r.joint())))?;
    }
    Ok(())
}

pub fn refiner_file(joint: usize) -> String {
    format!("joint_{joint}.dpck")
}

/// Loads every `joint_<k>.dpck` in `dir`, ordered by joint.
pub fn load_refiners(dir: impl AsRef<Path>) -> Result<Vec<Refiner>> {
    let dir = dir.as_ref();
    let mut found: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let joint = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("joint_")?.strip_suffix(".dpck")?.parse().ok());
        if let Some(j) = joint {
            found.push((j, path));
        }
    }
    found.sort();
    let refiners = found
        .iter()
        .map(|(_, p)| Refiner::from_checkpoint(&Checkpoint::load(p)?))
        .collect::<Result<Vec<_>>>()?;
    for ((j, p), r) in found.iter().zip(&refiners) {
        if r.joint() != *j {
            return Err(Error::Checkpoint(format!("{} holds the refiner of joint {}", p.display(), r.joint())));
        }
    }
    Ok(refiners)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LatencyReport {
    pub arch: String,
    pub runs: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
}

/// Single-threaded, batch-of-one latency of a full prediction for `patch`,
/// optionally followed by iterative refinement, over `runs` timed calls
/// after `warmup` untimed ones.
pub fn bench_latency(
    model: &PoseModel,
    refiners: &[Refiner],
    iterations: usize,
    patch: &NormalizedPatch,
    warmup: usize,
    runs: usize,
) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::invalid("bench", "need at least one run"));
    }
    let mut graph = model.graph.clone();
    graph.set_mode(ExecMode::Sequential);
    let mut refiners = refiners.to_vec();
    refiners.iter_mut().for_each(|r| r.graph.set_mode(ExecMode::Sequential));
    let once = || -> Result<Pose> {
        let pose = crate::netzoo::predict(&graph, &model.spec, patch)?;
        if refiners.is_empty() {
            Ok(pose)
        } else {
            crate::refine::refine_iterative(&refiners, patch, &pose, iterations)
        }
    };
    for _ in 0..warmup {
        std::hint::black_box(once()?);
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = std::time::Instant::now();
        std::hint::black_box(once()?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / runs as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if runs % 2 == 1 {
        times[runs / 2]
    } else {
        (times[runs / 2 - 1] + times[runs / 2]) / 2.0
    };
    let mut arch = model.spec.label();
    if !refiners.is_empty() {
        arch.push_str("+refine");
    }
    Ok(LatencyReport {
        arch,
        runs,
        median_ms,
        mean_ms,
    })
}
