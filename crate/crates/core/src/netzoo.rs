//! First-stage pose regressors: shallow, deep and multi-scale convolutional
//! networks, each optionally ending in the PCA bottleneck prior.

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, GraphBuilder, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};
use crate::preprocess::NormalizedPatch;
use crate::prior::{make_reconstruction_layer, PriorModel};

/// Node names used for the prior head.
pub const BOTTLENECK: &str = "bottleneck";
pub const RECONSTRUCTION: &str = "reconstruction";
pub const OUTPUT: &str = "output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Shallow,
    Deep,
    Multiscale,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(ArchKind::Shallow),
            "deep" => Ok(ArchKind::Deep),
            "multiscale" => Ok(ArchKind::Multiscale),
            other => Err(Error::invalid("arch", format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::Shallow => "shallow",
            ArchKind::Deep => "deep",
            ArchKind::Multiscale => "multiscale",
        })
    }
}

/// Convolution (valid, stride 1) followed by max pooling and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

const fn stage(filters: usize, kernel: usize, pool: usize) -> ConvStage {
    ConvStage { filters, kernel, pool }
}

/// A convolutional tower reading the input patch downscaled by `downscale`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tower {
    pub downscale: usize,
    pub stages: Vec<ConvStage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Patch extent `S`.
    pub input_size: usize,
    pub joints: usize,
    /// Bottleneck width; `None` regresses the `3J` coordinates directly.
    pub prior_dim: Option<usize>,
    pub towers: Vec<Tower>,
    /// Hidden fully connected widths (ReLU).
    pub hidden: Vec<usize>,
}

impl ArchSpec {
    /// `C(8@5x5) - P8 - FC(1024)`.
    pub fn shallow(input_size: usize, joints: usize) -> Self {
        ArchSpec {
            kind: ArchKind::Shallow,
            input_size,
            joints,
            prior_dim: None,
            towers: vec![Tower {
                downscale: 1,
                stages: vec![stage(8, 5, 8)],
            }],
            hidden: vec![1024],
        }
    }

    /// `C(8@5x5) - P4 - C(8@5x5) - P2 - C(8@3x3) - FC(1024) - FC(1024)`.
    pub fn deep(input_size: usize, joints: usize) -> Self {
        ArchSpec {
            kind: ArchKind::Deep,
            input_size,
            joints,
            prior_dim: None,
            towers: vec![Tower {
                downscale: 1,
                stages: vec![stage(8, 5, 4), stage(8, 5, 2), stage(8, 3, 1)],
            }],
            hidden: vec![1024, 1024],
        }
    }

    /// Three deep-style towers on the patch at full, half and quarter
    /// resolution, concatenated into `FC(1024) - FC(1024)`. The half
    /// resolution tower pools `2, 2` and the quarter resolution tower does not
    /// pool at all.
    pub fn multiscale(input_size: usize, joints: usize) -> Self {
        let tower = |downscale, first_pool, second_pool| Tower {
            downscale,
            stages: vec![stage(8, 5, first_pool), stage(8, 5, second_pool), stage(8, 3, 1)],
        };
        ArchSpec {
            kind: ArchKind::Multiscale,
            input_size,
            joints,
            prior_dim: None,
            towers: vec![tower(1, 4, 2), tower(2, 2, 2), tower(4, 1, 1)],
            hidden: vec![1024, 1024],
        }
    }

    pub fn preset(kind: ArchKind, input_size: usize, joints: usize) -> Self {
        match kind {
            ArchKind::Shallow => Self::shallow(input_size, joints),
            ArchKind::Deep => Self::deep(input_size, joints),
            ArchKind::Multiscale => Self::multiscale(input_size, joints),
        }
    }

    /// Sets the bottleneck width; 0 means direct regression.
    pub fn with_prior(mut self, dim: usize) -> Self {
        self.prior_dim = (dim > 0).then_some(dim);
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn output_len(&self) -> usize {
        3 * self.joints
    }

    /// Human-readable name, e.g. `deep-prior30`.
    pub fn label(&self) -> String {
        match self.prior_dim {
            Some(d) => format!("{}-prior{d}", self.kind),
            None => self.kind.to_string(),
        }
    }
}

/// Builds the graph for `spec`. When the spec has a prior, `prior` must be a
/// model of matching dimensionality; its components and mean initialize the
/// (trainable) reconstruction layer.
pub fn build<T: Scalar>(spec: &ArchSpec, seed: u64, prior: Option<&PriorModel>) -> Result<Graph<T>> {
    let mut graph = build_uninitialized::<T>(spec, seed)?;
    if let Some(d) = spec.prior_dim {
        let model = prior.ok_or_else(|| Error::invalid("build", "prior network needs a fitted prior model"))?;
        if model.dim != d || model.pose_len() != spec.output_len() {
            return Err(Error::invalid(
                "build",
                format!(
                    "prior model is {}-dim over {} coordinates, spec wants {d} over {}",
                    model.dim,
                    model.pose_len(),
                    spec.output_len()
                ),
            ));
        }
        let (w, bias) = make_reconstruction_layer::<T>(model);
        graph.param_mut(&format!("{RECONSTRUCTION}.weight")).expect("reconstruction layer").value = w;
        graph.param_mut(&format!("{RECONSTRUCTION}.bias")).expect("reconstruction layer").value = bias;
    }
    Ok(graph)
}

/// Builds the layers of `spec` with random weights everywhere, including a
/// randomly initialized reconstruction layer. Used before loading a checkpoint.
pub fn build_uninitialized<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Graph<T>> {
    if spec.joints == 0 || spec.towers.is_empty() {
        return Err(Error::invalid("build", "need at least one joint and one tower"));
    }
    let mut b = GraphBuilder::<T>::new(seed);
    let mut features: Vec<NodeId> = Vec::new();
    for (t, tower) in spec.towers.iter().enumerate() {
        if tower.downscale == 0 || !spec.input_size.is_multiple_of(tower.downscale) {
            return Err(Error::InvalidLayer {
                layer: format!("t{t}.input"),
                msg: format!("downscale {} does not divide input size {}", tower.downscale, spec.input_size),
            });
        }
        let side = spec.input_size / tower.downscale;
        let mut x = b.input(&format!("t{t}.input"), &[1, side, side]);
        for (s, st) in tower.stages.iter().enumerate() {
            x = b.conv2d(&format!("t{t}.conv{s}"), x, st.filters, st.kernel, st.kernel)?;
            if st.pool > 1 {
                x = b.maxpool(&format!("t{t}.pool{s}"), x, st.pool)?;
            }
            x = b.relu(&format!("t{t}.relu{s}"), x);
        }
        features.push(x);
    }
    let mut x = if features.len() == 1 {
        features[0]
    } else {
        b.concat("features", &features)?
    };
    for (i, &width) in spec.hidden.iter().enumerate() {
        x = b.dense(&format!("fc{i}"), x, width)?;
        x = b.relu(&format!("fc{i}.relu"), x);
    }
    let out = match spec.prior_dim {
        None => b.dense(OUTPUT, x, spec.output_len())?,
        Some(d) => {
            let bottleneck = b.dense(BOTTLENECK, x, d)?;
            b.dense(RECONSTRUCTION, bottleneck, spec.output_len())?
        }
    };
    Ok(b.build(out))
}

/// Downscaled copies of a patch, one per factor. Each `f x f` block becomes
/// the mean of its valid readings; blocks made only of the missing/background
/// sentinel (1) stay 1.
pub fn multiscale_inputs(patch: &NormalizedPatch, scales: &[usize]) -> Result<Vec<Tensor<f32>>> {
    scales.iter().map(|&f| downscale(&patch.values, f)).collect()
}

pub(crate) fn downscale(values: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let s = values.shape()[0];
    if factor == 0 || !s.is_multiple_of(factor) {
        return Err(Error::invalid("multiscale_inputs", format!("scale {factor} does not divide {s}")));
    }
    if factor == 1 {
        return values.clone().reshape(&[1, s, s]);
    }
    let o = s / factor;
    let src = values.data();
    let mut out = Vec::with_capacity(o * o);
    for oy in 0..o {
        for ox in 0..o {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for i in 0..factor {
                for j in 0..factor {
                    let v = src[(oy * factor + i) * s + ox * factor + j];
                    if v != 1.0 {
                        sum += v as f64;
                        n += 1;
                    }
                }
            }
            out.push(if n == 0 { 1.0 } else { (sum / n as f64) as f32 });
        }
    }
    Tensor::new(&[1, o, o], out)
}

/// Graph inputs for one patch, one tensor per tower.
pub fn model_inputs(spec: &ArchSpec, patch: &NormalizedPatch) -> Result<Vec<Tensor<f32>>> {
    if patch.size() != spec.input_size {
        return Err(Error::shape("predict", "patch size", spec.input_size, patch.size()));
    }
    let scales: Vec<usize> = spec.towers.iter().map(|t| t.downscale).collect();
    multiscale_inputs(patch, &scales)
}

/// Batched graph inputs (leading axis = patch index).
pub fn batch_inputs<T: Scalar>(spec: &ArchSpec, patches: &[&NormalizedPatch]) -> Result<Vec<Tensor<T>>> {
    let per: Vec<Vec<Tensor<f32>>> = patches.iter().map(|p| model_inputs(spec, p)).collect::<Result<_>>()?;
    (0..spec.towers.len())
        .map(|t| {
            let items: Vec<Tensor<T>> = per.iter().map(|p| p[t].cast()).collect();
            Tensor::stack(&items)
        })
        .collect()
}

/// Normalized pose predicted for a single patch.
pub fn predict<T: Scalar>(graph: &Graph<T>, spec: &ArchSpec, patch: &NormalizedPatch) -> Result<Pose> {
    Ok(predict_batch(graph, spec, &[patch])?.remove(0))
}

pub fn predict_batch<T: Scalar>(graph: &Graph<T>, spec: &ArchSpec, patches: &[&NormalizedPatch]) -> Result<Vec<Pose>> {
    let mut poses = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(256) {
        let inputs = batch_inputs::<T>(spec, chunk)?;
        let refs: Vec<&Tensor<T>> = inputs.iter().collect();
        let out = graph.eval(&refs)?;
        for i in 0..chunk.len() {
            let flat: Vec<f64> = out.row(i).iter().map(|v| v.to_real()).collect();
            poses.push(Pose::from_flat(&flat, PoseFrame::Normalized)?);
        }
    }
    Ok(poses)
}
