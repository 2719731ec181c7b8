//! Second-stage per-joint refinement.
//!
//! Each joint has its own small network that looks at concentric windows of
//! the normalized patch centered on the current estimate and regresses a 3D
//! offset in cube-normalized units. ORRef reads every window (pooling more
//! aggressively on the larger ones); StdRef reads only the largest one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{
    train_epochs, Checkpoint, ExecMode, Graph, GraphBuilder, NodeId, OptimConfig, Scalar, Tensor, TrainSet,
};
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};
use crate::preprocess::NormalizedPatch;

pub const OFFSET: &str = "offset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    OrRef,
    StdRef,
}

impl std::str::FromStr for RefinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "orref" => Ok(RefinerKind::OrRef),
            "stdref" => Ok(RefinerKind::StdRef),
            other => Err(Error::invalid("refiner", format!("unknown refiner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineSpec {
    /// Window extents in patch pixels, descending.
    pub patch_sizes: Vec<usize>,
    /// Max-pooling size per window; 1 on the smallest.
    pub pools: Vec<usize>,
    pub iterations: usize,
    pub joint: usize,
    pub filters: usize,
    pub hidden: Vec<usize>,
}

impl RefineSpec {
    /// Windows of half, a quarter and an eighth of the patch with pooling
    /// 4, 2 and 1.
    pub fn for_patch(input_size: usize, joint: usize) -> Self {
        RefineSpec {
            patch_sizes: vec![input_size / 2, input_size / 4, input_size / 8],
            pools: vec![4, 2, 1],
            iterations: 2,
            joint,
            filters: 8,
            hidden: vec![256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("refine spec", msg));
        if self.patch_sizes.is_empty() || self.patch_sizes.len() != self.pools.len() {
            return bad("patch sizes and pools must be non-empty lists of equal length");
        }
        if self.patch_sizes.windows(2).any(|w| w[0] <= w[1]) || self.patch_sizes.contains(&0) {
            return bad("patch sizes must be positive and strictly descending");
        }
        if self.pools.last() != Some(&1) || self.pools.contains(&0) {
            return bad("the smallest window must not be pooled");
        }
        if self.iterations == 0 || self.filters == 0 {
            return bad("iterations and filters must be positive");
        }
        Ok(())
    }

    /// Number of windows a refiner of `kind` reads.
    pub fn windows(&self, kind: RefinerKind) -> usize {
        match kind {
            RefinerKind::OrRef => self.patch_sizes.len(),
            RefinerKind::StdRef => 1,
        }
    }
}

/// Top-left pixel of an `s`-wide window centered on continuous coordinate `c`.
fn window_start(c: f64, s: usize) -> i64 {
    (c + 0.5).floor() as i64 - (s / 2) as i64
}

/// Concentric `s x s` windows of the patch around the estimate's projection,
/// one `[1, s, s]` tensor per size. Pixels beyond the patch read 1.
pub fn extract_joint_patches(patch: &NormalizedPatch, joint: [f64; 3], spec: &RefineSpec) -> Vec<Tensor<f32>> {
    let (col, row) = patch.locate(joint);
    spec.patch_sizes
        .iter()
        .map(|&s| window(patch, col, row, s))
        .collect()
}

fn window(patch: &NormalizedPatch, col: f64, row: f64, s: usize) -> Tensor<f32> {
    let n = patch.size() as i64;
    let (c0, r0) = (window_start(col, s), window_start(row, s));
    let src = patch.values.data();
    let mut out = vec![1.0f32; s * s];
    for i in 0..s as i64 {
        let r = r0 + i;
        if r < 0 || r >= n {
            continue;
        }
        for j in 0..s as i64 {
            let c = c0 + j;
            if c >= 0 && c < n {
                out[(i * s as i64 + j) as usize] = src[(r * n + c) as usize];
            }
        }
    }
    Tensor::new(&[1, s, s], out).expect("window shape")
}

/// `s x s` window whose center sits exactly on the continuous position
/// `(col, row)`, bilinearly interpolated. Pixels beyond the patch read 1.
fn centered_window(patch: &NormalizedPatch, col: f64, row: f64, s: usize) -> Tensor<f32> {
    let n = patch.size() as i64;
    let src = patch.values.data();
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= n || c >= n {
            1.0
        } else {
            src[(r * n + c) as usize] as f64
        }
    };
    let half = (s / 2) as f64;
    let (c_base, r_base) = (col - half, row - half);
    let (c0, r0) = (c_base.floor(), r_base.floor());
    let (fc, fr) = (c_base - c0, r_base - r0);
    let (c0, r0) = (c0 as i64, r0 as i64);
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s as i64 {
        let r = r0 + i;
        for j in 0..s as i64 {
            let c = c0 + j;
            let top = at(r, c) * (1.0 - fc) + at(r, c + 1) * fc;
            let bottom = at(r + 1, c) * (1.0 - fc) + at(r + 1, c + 1) * fc;
            out.push((top * (1.0 - fr) + bottom * fr) as f32);
        }
    }
    Tensor::new(&[1, s, s], out).expect("window shape")
}

/// Network inputs for one joint estimate: the windows the refiner reads,
/// centered on the sub-pixel projection of the estimate, with the estimate's
/// depth subtracted so offsets along z are observable.
pub fn refiner_inputs(
    patch: &NormalizedPatch,
    joint: [f64; 3],
    kind: RefinerKind,
    spec: &RefineSpec,
) -> Vec<Tensor<f32>> {
    let (col, row) = patch.locate(joint);
    let z = joint[2] as f32;
    spec.patch_sizes[..spec.windows(kind)]
        .iter()
        .map(|&s| centered_window(patch, col, row, s).map(|v| v - z))
        .collect()
}

/// Builds a refiner graph with a `[3]` output named [`OFFSET`].
pub fn build_refiner<T: Scalar>(kind: RefinerKind, spec: &RefineSpec, seed: u64) -> Result<Graph<T>> {
    spec.validate()?;
    let mut b = GraphBuilder::<T>::new(seed);
    let mut towers: Vec<NodeId> = Vec::new();
    for (w, (&s, &pool)) in spec.patch_sizes.iter().zip(&spec.pools).take(spec.windows(kind)).enumerate() {
        let mut x = b.input(&format!("w{w}.input"), &[1, s, s]);
        x = b.conv2d(&format!("w{w}.conv0"), x, spec.filters, 5, 5)?;
        if pool > 1 {
            x = b.maxpool(&format!("w{w}.pool0"), x, pool)?;
        }
        x = b.relu(&format!("w{w}.relu0"), x);
        x = b.conv2d(&format!("w{w}.conv1"), x, spec.filters, 3, 3)?;
        x = b.relu(&format!("w{w}.relu1"), x);
        towers.push(x);
    }
    let mut x = if towers.len() == 1 {
        towers[0]
    } else {
        b.concat("features", &towers)?
    };
    for (i, &width) in spec.hidden.iter().enumerate() {
        x = b.dense(&format!("fc{i}"), x, width)?;
        x = b.relu(&format!("fc{i}.relu"), x);
    }
    let out = b.dense(OFFSET, x, 3)?;
    Ok(b.build(out))
}

/// Predicted offset for one set of refiner inputs.
pub fn refine_once<T: Scalar>(graph: &Graph<T>, inputs: &[Tensor<f32>]) -> Result<[f64; 3]> {
    let batched: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.cast::<T>().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = batched.iter().collect();
    let out = graph.eval(&refs)?;
    if out.len() != 3 {
        return Err(Error::shape("refine_once", "output width", 3, out.len()));
    }
    let d = out.data();
    Ok([d[0].to_real(), d[1].to_real(), d[2].to_real()])
}

/// A trained refiner for one joint.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub kind: RefinerKind,
    pub spec: RefineSpec,
    pub graph: Graph<f32>,
}

#[derive(Serialize, Deserialize)]
struct RefinerManifest {
    refiner: RefinerKind,
    spec: RefineSpec,
}

impl Refiner {
    pub fn new(kind: RefinerKind, spec: RefineSpec, seed: u64) -> Result<Self> {
        let graph = build_refiner(kind, &spec, seed)?;
        Ok(Refiner { kind, spec, graph })
    }

    pub fn joint(&self) -> usize {
        self.spec.joint
    }

    /// Offsets for the joint estimates of several frames.
    pub fn offsets(&self, patches: &[&NormalizedPatch], estimates: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(patches.len());
        let items: Vec<(&NormalizedPatch, [f64; 3])> = patches.iter().copied().zip(estimates.iter().copied()).collect();
        for chunk in items.chunks(256) {
            let inputs = self.batch_inputs(chunk)?;
            let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
            let o = self.graph.eval(&refs)?;
            out.extend((0..chunk.len()).map(|i| {
                let r = o.row(i);
                [r[0] as f64, r[1] as f64, r[2] as f64]
            }));
        }
        Ok(out)
    }

    fn batch_inputs(&self, items: &[(&NormalizedPatch, [f64; 3])]) -> Result<Vec<Tensor<f32>>> {
        let per: Vec<Vec<Tensor<f32>>> = items
            .iter()
            .map(|(p, j)| refiner_inputs(p, *j, self.kind, &self.spec))
            .collect();
        (0..self.spec.windows(self.kind))
            .map(|w| Tensor::stack(&per.iter().map(|p| p[w].clone()).collect::<Vec<_>>()))
            .collect()
    }

    pub fn to_checkpoint(&self, preprocess: serde_json::Value) -> Result<Checkpoint> {
        let arch = serde_json::to_value(RefinerManifest {
            refiner: self.kind,
            spec: self.spec.clone(),
        })?;
        Ok(Checkpoint::from_graph(&self.graph, arch, preprocess, 0, Vec::new()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m: RefinerManifest = serde_json::from_value(ckpt.manifest.architecture.clone())
            .map_err(|e| Error::Checkpoint(format!("not a refiner checkpoint: {e}")))?;
        let mut r = Refiner::new(m.refiner, m.spec, 0)?;
        ckpt.load_into(&mut r.graph)?;
        Ok(r)
    }
}

fn check_refiners(refiners: &[Refiner], joints: usize) -> Result<()> {
    let mut seen = vec![false; joints];
    for r in refiners {
        let j = r.joint();
        if j >= joints || std::mem::replace(&mut seen[j], true) {
            return Err(Error::invalid("refine", format!("refiner for joint {j} is out of range or duplicated")));
        }
    }
    Ok(())
}

/// Applies the refiners `iterations` times, re-centering the windows on the
/// latest estimate each time. Joints without a refiner are left unchanged.
pub fn refine_iterative(
    refiners: &[Refiner],
    patch: &NormalizedPatch,
    initial: &Pose,
    iterations: usize,
) -> Result<Pose> {
    Ok(refine_batch(refiners, &[patch], std::slice::from_ref(initial), iterations)?.remove(0))
}

/// [`refine_iterative`] over many frames.
pub fn refine_batch(
    refiners: &[Refiner],
    patches: &[&NormalizedPatch],
    initial: &[Pose],
    iterations: usize,
) -> Result<Vec<Pose>> {
    if iterations == 0 {
        return Err(Error::invalid("refine", "iterations must be at least 1"));
    }
    if patches.len() != initial.len() {
        return Err(Error::shape("refine", "frame count", patches.len(), initial.len()));
    }
    let mut poses = initial.to_vec();
    let Some(first) = poses.first() else {
        return Ok(poses);
    };
    let joints = first.num_joints();
    for p in &poses {
        p.expect_frame(PoseFrame::Normalized)?;
        if p.num_joints() != joints {
            return Err(Error::shape("refine", "joint count", joints, p.num_joints()));
        }
    }
    check_refiners(refiners, joints)?;
    for _ in 0..iterations {
        for r in refiners {
            let j = r.joint();
            let est: Vec<[f64; 3]> = poses.iter().map(|p| p.joints[j]).collect();
            let offsets = r.offsets(patches, &est)?;
            for (p, o) in poses.iter_mut().zip(offsets) {
                for k in 0..3 {
                    p.joints[j][k] += o[k];
                }
            }
        }
    }
    Ok(poses)
}

/// Root-mean-square 3D error of each joint.
pub fn per_joint_rmse(pred: &[Pose], truth: &[Pose]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("per_joint_rmse", "frame count", truth.len(), pred.len()));
    }
    let j = truth[0].num_joints();
    let mut acc = vec![0.0; j];
    for (p, t) in pred.iter().zip(truth) {
        if p.num_joints() != j || t.num_joints() != j {
            return Err(Error::shape("per_joint_rmse", "joint count", j, p.num_joints()));
        }
        for (a, (x, y)) in acc.iter_mut().zip(p.joints.iter().zip(&t.joints)) {
            *a += (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>();
        }
    }
    Ok(acc.into_iter().map(|s| (s / pred.len() as f64).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineTrainConfig {
    pub optim: OptimConfig,
    /// Multiplier on the perturbation scale.
    pub noise_scale: f64,
    /// Perturbed copies drawn per training frame.
    pub copies: usize,
    /// Fraction of perturbed estimates that are passed through the refiner
    /// once (from the second epoch on) before serving as training inputs.
    pub self_refined: f64,
    /// Fraction of training inputs that start from the first stage's own
    /// estimate of the frame (jittered at half the perturbation scale)
    /// instead of the perturbed ground truth, when those estimates are given.
    pub first_stage: f64,
    /// Final epochs run at a tenth of the learning rate.
    pub anneal_epochs: usize,
}

impl Default for RefineTrainConfig {
    fn default() -> Self {
        RefineTrainConfig {
            optim: OptimConfig {
                epochs: 10,
                ..OptimConfig::default()
            },
            noise_scale: 1.0,
            copies: 1,
            self_refined: 0.5,
            first_stage: 0.5,
            anneal_epochs: 2,
        }
    }
}

/// Trains the refiner of `spec.joint` on estimates obtained by perturbing
/// the normalized ground truth with isotropic Gaussian noise whose scale is
/// drawn per sample, uniform in `[0, sqrt(3)]` times the base scale, so that
/// the overall 3D RMS is `rmse * cfg.noise_scale` while small errors stay
/// well represented. Fresh perturbations are drawn every epoch, and part of
/// them are first refined by the current network so that it also learns to
/// correct its own output. Targets are `truth - estimate`, regressed in
/// units of the per-axis noise and rescaled into the output layer afterwards.
/// The returned loss trace is in those standardized units.
#[allow(clippy::too_many_arguments)]
pub fn train_refiner(
    kind: RefinerKind,
    spec: &RefineSpec,
    patches: &[&NormalizedPatch],
    truth: &[Pose],
    first_stage: Option<&[Pose]>,
    rmse: f64,
    cfg: &RefineTrainConfig,
    mode: ExecMode,
) -> Result<(Refiner, Vec<f64>)> {
    if patches.len() != truth.len() {
        return Err(Error::shape("train_refiner", "frame count", patches.len(), truth.len()));
    }
    if let Some(fs) = first_stage {
        if fs.len() != truth.len() {
            return Err(Error::shape("train_refiner", "first-stage frame count", truth.len(), fs.len()));
        }
    }
    if !(rmse >= 0.0 && rmse.is_finite()) || cfg.copies == 0 || !(0.0..=1.0).contains(&cfg.self_refined)
        || !(0.0..=1.0).contains(&cfg.first_stage)
    {
        return Err(Error::invalid(
            "train_refiner",
            "noise scale must be finite, copies positive and fractions in [0, 1]",
        ));
    }
    let j = spec.joint;
    let seed = cfg.optim.seed.wrapping_add(j as u64);
    let mut refiner = Refiner::new(kind, spec.clone(), seed)?;
    refiner.graph.set_mode(mode);
    let sigma = rmse * cfg.noise_scale / 3f64.sqrt();
    let scale = if sigma > 0.0 { sigma } else { 1.0 };
    let gts = truth
        .iter()
        .map(|t| {
            t.expect_frame(PoseFrame::Normalized)?;
            t.joints
                .get(j)
                .copied()
                .ok_or_else(|| Error::invalid("train_refiner", format!("pose has no joint {j}")))
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    if gts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let starts = match first_stage {
        Some(fs) => fs
            .iter()
            .map(|p| {
                p.expect_frame(PoseFrame::Normalized)?;
                p.joints
                    .get(j)
                    .copied()
                    .ok_or_else(|| Error::invalid("train_refiner", format!("first-stage pose has no joint {j}")))
            })
            .collect::<Result<Vec<[f64; 3]>>>()?,
        None => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0f_f5e7);
    let mut trace = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        let mut items = Vec::with_capacity(gts.len() * cfg.copies);
        let mut truths = Vec::with_capacity(gts.len() * cfg.copies);
        for (f, (p, gt)) in patches.iter().zip(&gts).enumerate() {
            for _ in 0..cfg.copies {
                let mut s = sigma * rng.random_range(0.0..3f64.sqrt());
                let mut base = *gt;
                if !starts.is_empty() && rng.random_bool(cfg.first_stage) {
                    base = starts[f];
                    s *= 0.5;
                }
                let est: [f64; 3] = std::array::from_fn(|k| base[k] + s * rng.sample::<f64, _>(StandardNormal));
                items.push((*p, est));
                truths.push(*gt);
            }
        }
        if epoch > 0 && cfg.self_refined > 0.0 {
            let picked: Vec<usize> = (0..items.len()).filter(|_| rng.random_bool(cfg.self_refined)).collect();
            let subset: Vec<(&NormalizedPatch, [f64; 3])> = picked.iter().map(|&i| items[i]).collect();
            for (chunk, idx) in subset.chunks(256).zip(picked.chunks(256)) {
                let inputs = refiner.batch_inputs(chunk)?;
                let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
                let out = refiner.graph.eval(&refs)?;
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..3 {
                        items[i].1[k] += out.row(r)[k] as f64 * scale;
                    }
                }
            }
        }
        let targets: Vec<f64> = items
            .iter()
            .zip(&truths)
            .flat_map(|((_, est), gt)| (0..3).map(move |k| (gt[k] - est[k]) / scale))
            .collect();
        let inputs = refiner.batch_inputs(&items)?;
        let data = TrainSet::new(inputs, Tensor::<f32>::from_f64(&[items.len(), 3], &targets)?)?;
        let annealed = epoch + cfg.anneal_epochs >= cfg.optim.epochs;
        let once = OptimConfig {
            epochs: 1,
            learning_rate: if annealed { cfg.optim.learning_rate * 0.1 } else { cfg.optim.learning_rate },
            seed: cfg.optim.seed.wrapping_add(epoch as u64),
            ..cfg.optim.clone()
        };
        trace.extend(train_epochs(&mut refiner.graph, &data, &once)?);
    }
    for name in [format!("{OFFSET}.weight"), format!("{OFFSET}.bias")] {
        let p = refiner.graph.param_mut(&name).expect("refiner output layer");
        p.value.data_mut().iter_mut().for_each(|v| *v *= scale as f32);
    }
    refiner.graph.set_mode(ExecMode::Sequential);
    Ok((refiner, trace))
}
