//! Synthetic depth frames of an articulated capsule hand.
//!
//! The hand is an ellipsoidal palm plus five three-segment capsule fingers
//! (16 joints: palm center, then three joints per finger from base to tip).
//! All 26 articulation parameters (root translation, global rotation, and
//! per finger an abduction and three flexions) are one fixed affine function
//! of `k` latent variables drawn uniformly from `[-1, 1]`, so the poses lie on
//! a `k`-dimensional manifold. Frames are ray cast against the primitives
//! with a z-buffer; a far background wall sits behind the hand.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, DatasetWriter};
use crate::engine::{ExecMode, Tensor};
use crate::engine::map_samples;
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};
use crate::preprocess::{DepthFrame, Intrinsics};

pub const SYNTH_JOINTS: usize = 16;

/// Seed of the latent-to-articulation map. Fixed so that datasets generated
/// with different seeds share one pose manifold.
const MANIFOLD_SEED: u64 = 0x4841_4e44;
const NUM_PARAMS: usize = 6 + 5 * 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Latent pose-manifold dimensionality `k`.
    pub latent_dim: usize,
    /// Probability of dropping a pixel next to a depth discontinuity.
    pub hole_prob: f64,
    /// Gaussian noise added to stored annotations (mm, per coordinate).
    pub label_noise_mm: f64,
    /// Depth of the background wall; `None` leaves the background missing.
    pub background_mm: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::with_size(1000, 0, 128)
    }
}

impl SynthConfig {
    /// Square frames of `size` pixels with a field of view that fits the hand
    /// cube comfortably at the default working distance.
    pub fn with_size(n_samples: usize, seed: u64, size: usize) -> Self {
        let s = size as f64;
        SynthConfig {
            n_samples,
            seed,
            width: size,
            height: size,
            intrinsics: Intrinsics {
                fx: 1.1 * s,
                fy: 1.1 * s,
                cx: (s - 1.0) / 2.0,
                cy: (s - 1.0) / 2.0,
            },
            latent_dim: 8,
            hole_prob: 0.0,
            label_noise_mm: 0.0,
            background_mm: Some(1000.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > NUM_PARAMS {
            return Err(Error::invalid(
                "synth",
                format!("latent dimension must be in 1..={NUM_PARAMS}"),
            ));
        }
        if !(0.0..=1.0).contains(&self.hole_prob) {
            return Err(Error::invalid("synth", "hole probability must be in [0, 1]"));
        }
        if self.width == 0 || self.height == 0 || self.label_noise_mm < 0.0 {
            return Err(Error::invalid("synth", "invalid image size or noise"));
        }
        Ok(())
    }
}

pub fn joint_names() -> Vec<String> {
    let mut names = vec!["palm".to_string()];
    for finger in ["thumb", "index", "middle", "ring", "pinky"] {
        for j in 1..=3 {
            names.push(format!("{finger}_{j}"));
        }
    }
    names
}

type V3 = [f64; 3];
type M3 = [[f64; 3]; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn mat_vec(m: &M3, v: V3) -> V3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}
fn mat_t_vec(m: &M3, v: V3) -> V3 {
    std::array::from_fn(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}
fn mat_mul(a: &M3, b: &M3) -> M3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}
fn rot_x(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}
fn rot_y(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}
fn rot_z(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

struct FingerGeometry {
    base: V3,
    /// Rest orientation of the finger chain in the hand frame.
    splay: f64,
    tilt: f64,
    lengths: [f64; 3],
    radii: [f64; 3],
}

const PALM_AXES: V3 = [40.0, 44.0, 13.0];

fn fingers() -> [FingerGeometry; 5] {
    [
        FingerGeometry {
            base: [30.0, -12.0, -4.0],
            splay: -0.85,
            tilt: 0.45,
            lengths: [36.0, 30.0, 25.0],
            radii: [11.0, 10.0, 9.0],
        },
        FingerGeometry {
            base: [24.0, 38.0, 0.0],
            splay: -0.08,
            tilt: 0.0,
            lengths: [40.0, 25.0, 20.0],
            radii: [9.0, 8.5, 7.5],
        },
        FingerGeometry {
            base: [8.0, 42.0, 0.0],
            splay: 0.0,
            tilt: 0.0,
            lengths: [45.0, 28.0, 22.0],
            radii: [9.5, 8.5, 7.5],
        },
        FingerGeometry {
            base: [-8.0, 40.0, 0.0],
            splay: 0.06,
            tilt: 0.0,
            lengths: [42.0, 26.0, 21.0],
            radii: [9.0, 8.0, 7.0],
        },
        FingerGeometry {
            base: [-23.0, 34.0, 0.0],
            splay: 0.15,
            tilt: 0.0,
            lengths: [33.0, 20.0, 18.0],
            radii: [8.0, 7.0, 6.5],
        },
    ]
}

/// `(center, half range)` of every articulation parameter: root translation
/// (mm), global roll/pitch/yaw (rad), then per finger abduction and three
/// flexions (rad).
fn param_ranges() -> [(f64, f64); NUM_PARAMS] {
    let mut r = [(0.0, 0.0); NUM_PARAMS];
    r[0] = (0.0, 25.0);
    r[1] = (0.0, 25.0);
    r[2] = (420.0, 60.0);
    r[3] = (0.0, 0.5);
    r[4] = (0.0, 0.35);
    r[5] = (0.0, 0.35);
    for f in 0..5 {
        let o = 6 + 4 * f;
        r[o] = (0.0, 0.15);
        r[o + 1] = (0.6, 0.6);
        r[o + 2] = (0.7, 0.7);
        r[o + 3] = (0.5, 0.5);
    }
    r
}

/// The fixed affine map from latent space to articulation parameters.
#[derive(Debug, Clone)]
pub struct PoseManifold {
    latent_dim: usize,
    /// `NUM_PARAMS x k`, rows with unit L1 norm.
    mixing: Vec<f64>,
}

impl PoseManifold {
    pub fn new(latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(MANIFOLD_SEED ^ latent_dim as u64);
        let mut mixing = vec![0.0; NUM_PARAMS * latent_dim];
        for row in mixing.chunks_mut(latent_dim) {
            row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
            let l1: f64 = row.iter().map(|v| v.abs()).sum();
            row.iter_mut().for_each(|v| *v /= l1);
        }
        PoseManifold { latent_dim, mixing }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self, latent: &[f64]) -> [f64; NUM_PARAMS] {
        let ranges = param_ranges();
        std::array::from_fn(|i| {
            let row = &self.mixing[i * self.latent_dim..(i + 1) * self.latent_dim];
            let mix: f64 = row.iter().zip(latent).map(|(a, z)| a * z).sum();
            ranges[i].0 + ranges[i].1 * mix
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Ellipsoid { center: V3, rot: M3, axes: V3 },
    Capsule { a: V3, b: V3, r: f64 },
}

impl Primitive {
    fn bounding_sphere(&self) -> (V3, f64) {
        match *self {
            Primitive::Ellipsoid { center, axes, .. } => (center, axes[0].max(axes[1]).max(axes[2])),
            Primitive::Capsule { a, b, r } => {
                let c = scale(add(a, b), 0.5);
                (c, dot(sub(b, a), sub(b, a)).sqrt() / 2.0 + r)
            }
        }
    }

    /// Nearest positive ray parameter along unit direction `d` from the origin.
    fn intersect(&self, d: V3) -> Option<f64> {
        match *self {
            Primitive::Ellipsoid { center, rot, axes } => {
                let o = mat_t_vec(&rot, scale(center, -1.0));
                let dl = mat_t_vec(&rot, d);
                let o = [o[0] / axes[0], o[1] / axes[1], o[2] / axes[2]];
                let dl = [dl[0] / axes[0], dl[1] / axes[1], dl[2] / axes[2]];
                let (a, b, c) = (dot(dl, dl), dot(o, dl), dot(o, o) - 1.0);
                let h = b * b - a * c;
                (h >= 0.0).then(|| (-b - h.sqrt()) / a).filter(|&t| t > 0.0)
            }
            Primitive::Capsule { a, b, r } => {
                let mut best = sphere_hit(d, a, r);
                if let Some(t) = sphere_hit(d, b, r) {
                    best = Some(best.map_or(t, |x: f64| x.min(t)));
                }
                let ba = sub(b, a);
                let oa = scale(a, -1.0);
                let baba = dot(ba, ba);
                let bard = dot(ba, d);
                let baoa = dot(ba, oa);
                let rdoa = dot(d, oa);
                let oaoa = dot(oa, oa);
                let qa = baba - bard * bard;
                if qa > 1e-9 {
                    let qb = baba * rdoa - baoa * bard;
                    let qc = baba * oaoa - baoa * baoa - r * r * baba;
                    let h = qb * qb - qa * qc;
                    if h >= 0.0 {
                        let t = (-qb - h.sqrt()) / qa;
                        let y = baoa + t * bard;
                        if t > 0.0 && y > 0.0 && y < baba {
                            best = Some(best.map_or(t, |x| x.min(t)));
                        }
                    }
                }
                best
            }
        }
    }
}

fn sphere_hit(d: V3, c: V3, r: f64) -> Option<f64> {
    let b = dot(d, c);
    let h = b * b - (dot(c, c) - r * r);
    (h >= 0.0).then(|| b - h.sqrt()).filter(|&t| t > 0.0)
}

/// One posed hand: joints, the primitives they are attached to, and
/// per-joint surface radius.
#[derive(Debug, Clone)]
pub struct HandModel {
    pub joints: Vec<V3>,
    primitives: Vec<Primitive>,
    /// Primitive indices touching each joint.
    joint_prims: Vec<Vec<usize>>,
    pub joint_radius: Vec<f64>,
}

impl HandModel {
    pub fn pose(params: &[f64; NUM_PARAMS]) -> Self {
        let base: M3 = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        let global = mat_mul(&base, &mat_mul(&rot_z(params[3]), &mat_mul(&rot_x(params[4]), &rot_y(params[5]))));
        let root = [params[0], params[1], params[2]];
        let to_cam = |p: V3| add(root, mat_vec(&global, p));

        let mut primitives = vec![Primitive::Ellipsoid {
            center: root,
            rot: global,
            axes: PALM_AXES,
        }];
        let mut joints = vec![root];
        let mut joint_prims = vec![vec![0]];
        let mut joint_radius = vec![PALM_AXES[2]];
        for (f, g) in fingers().iter().enumerate() {
            let o = 6 + 4 * f;
            let mut frame = mat_mul(&rot_z(g.splay + params[o]), &rot_y(g.tilt));
            let mut pos = g.base;
            for s in 0..3 {
                frame = mat_mul(&frame, &rot_x(-params[o + 1 + s].max(0.0)));
                let dir = mat_vec(&frame, [0.0, 1.0, 0.0]);
                let next = add(pos, scale(dir, g.lengths[s]));
                primitives.push(Primitive::Capsule {
                    a: to_cam(pos),
                    b: to_cam(next),
                    r: g.radii[s],
                });
                let id = primitives.len() - 1;
                joints.push(to_cam(next));
                let mut prims = vec![id];
                let mut radius = g.radii[s];
                if s < 2 {
                    prims.push(id + 1);
                    radius = radius.max(g.radii[s + 1]);
                }
                joint_prims.push(prims);
                joint_radius.push(radius);
                pos = next;
            }
        }
        HandModel {
            joints,
            primitives,
            joint_prims,
            joint_radius,
        }
    }
}

/// A rendered frame with its ground truth.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub depth: Tensor<f32>,
    /// Noise-free joint positions (mm).
    pub pose: Pose,
    /// Whether each joint's own surface is what the camera sees at its pixel.
    pub visible: Vec<bool>,
    /// Surface radius around each joint (mm).
    pub joint_radius: Vec<f64>,
    /// 3D centroid of all hand surface pixels before holes are punched.
    pub hand_centroid: V3,
    /// Pixels punched out as missing.
    pub holes: Vec<bool>,
}

/// Ray casts `hand` into a `width x height` depth image.
pub fn render(hand: &HandModel, cfg: &SynthConfig, rng: &mut impl Rng) -> RenderedFrame {
    let (w, h) = (cfg.width, cfg.height);
    let k = &cfg.intrinsics;
    let background = cfg.background_mm.unwrap_or(0.0) as f32;
    let mut depth = vec![background; w * h];
    let mut owner: Vec<Option<usize>> = vec![None; w * h];

    for (pi, prim) in hand.primitives.iter().enumerate() {
        let (c, r) = prim.bounding_sphere();
        if c[2] <= r {
            continue;
        }
        let zn = c[2] - r;
        let (cu, cv) = k.project(c);
        let (ru, rv) = (k.fx * r / zn * 1.5 + 1.0, k.fy * r / zn * 1.5 + 1.0);
        let u0 = (cu - ru).floor().max(0.0) as usize;
        let v0 = (cv - rv).floor().max(0.0) as usize;
        let u1 = ((cu + ru).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let v1 = ((cv + rv).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        for v in v0..=v1 {
            for u in u0..=u1 {
                let ray = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
                let norm = dot(ray, ray).sqrt();
                let d = scale(ray, 1.0 / norm);
                if let Some(t) = prim.intersect(d) {
                    let z = (t * d[2]) as f32;
                    let i = v * w + u;
                    if owner[i].is_none() || z < depth[i] {
                        depth[i] = z;
                        owner[i] = Some(pi);
                    }
                }
            }
        }
    }

    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (i, o) in owner.iter().enumerate() {
        if o.is_some() {
            let p = k.backproject((i % w) as f64, (i / w) as f64, depth[i] as f64);
            sum = add(sum, p);
            count += 1;
        }
    }
    let hand_centroid = scale(sum, 1.0 / count.max(1) as f64);

    let visible = hand
        .joints
        .iter()
        .zip(&hand.joint_prims)
        .map(|(&j, prims)| {
            let (u, v) = k.project(j);
            let (u, v) = (u.round(), v.round());
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                return false;
            }
            owner[v as usize * w + u as usize].is_some_and(|o| prims.contains(&o))
        })
        .collect();

    let mut holes = vec![false; w * h];
    if cfg.hole_prob > 0.0 {
        let jump = |a: usize, b: usize| (depth[a] - depth[b]).abs() > 10.0;
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let edge = (u > 0 && jump(i, i - 1))
                    || (u + 1 < w && jump(i, i + 1))
                    || (v > 0 && jump(i, i - w))
                    || (v + 1 < h && jump(i, i + w));
                if edge && rng.random_bool(cfg.hole_prob) {
                    holes[i] = true;
                }
            }
        }
        for (d, &hole) in depth.iter_mut().zip(&holes) {
            if hole {
                *d = 0.0;
            }
        }
    }

    RenderedFrame {
        depth: Tensor::new(&[h, w], depth).expect("render: image shape"),
        pose: Pose::new(hand.joints.clone(), PoseFrame::Millimeters),
        visible,
        joint_radius: hand.joint_radius.clone(),
        hand_centroid,
        holes,
    }
}

/// Renders sample `i` of a configuration. Each sample draws from its own
/// random stream, so frames can be produced in any order.
pub fn render_sample(cfg: &SynthConfig, manifold: &PoseManifold, i: usize) -> (RenderedFrame, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    let latent: Vec<f64> = (0..manifold.latent_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let hand = HandModel::pose(&manifold.params(&latent));
    let frame = render(&hand, cfg, &mut rng);
    let mut label = frame.pose.clone();
    if cfg.label_noise_mm > 0.0 {
        for j in &mut label.joints {
            for c in j.iter_mut() {
                *c += cfg.label_noise_mm * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    (frame, label)
}

/// Renders `cfg.n_samples` frames in memory as `(frame, annotation)` pairs.
pub fn synth_frames(cfg: &SynthConfig, mode: ExecMode) -> Result<Vec<(DepthFrame, Pose)>> {
    cfg.validate()?;
    let manifold = PoseManifold::new(cfg.latent_dim);
    map_samples(mode, cfg.n_samples, || (), |i, _| {
        let (frame, label) = render_sample(cfg, &manifold, i);
        let df = DepthFrame::new(frame.depth, cfg.intrinsics, format!("{i:06}"))?;
        Ok((df, label))
    })
    .into_iter()
    .collect()
}

/// Renders a dataset directory. Output is byte-identical for equal configs.
pub fn synth_generate(cfg: &SynthConfig, out: impl AsRef<Path>, mode: ExecMode) -> Result<DatasetIndex> {
    let frames = synth_frames(cfg, mode)?;
    let mut writer = DatasetWriter::create(out, cfg.intrinsics, joint_names())?;
    for (f, p) in &frames {
        writer.add(f, p)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capsule_hit_depths() {
        let cap = Primitive::Capsule {
            a: [-20.0, 0.0, 300.0],
            b: [20.0, 0.0, 300.0],
            r: 10.0,
        };
        let t = cap.intersect([0.0, 0.0, 1.0]).unwrap();
        assert!((t - 290.0).abs() < 1e-9);
        let d = {
            let v = [0.0, 30.0, 300.0];
            scale(v, 1.0 / dot(v, v).sqrt())
        };
        assert!(cap.intersect(d).is_none());
    }

    #[test]
    fn ellipsoid_hit_depth() {
        let e = Primitive::Ellipsoid {
            center: [0.0, 0.0, 400.0],
            rot: rot_z(0.3),
            axes: [40.0, 30.0, 12.0],
        };
        assert!((e.intersect([0.0, 0.0, 1.0]).unwrap() - 388.0).abs() < 1e-9);
    }

    #[test]
    fn sixteen_named_joints() {
        assert_eq!(joint_names().len(), SYNTH_JOINTS);
        let hand = HandModel::pose(&PoseManifold::new(8).params(&[0.0; 8]));
        assert_eq!(hand.joints.len(), SYNTH_JOINTS);
    }

    #[test]
    fn hand_is_rendered_in_front_of_the_wall() {
        let cfg = SynthConfig::with_size(1, 5, 96);
        let (frame, _) = render_sample(&cfg, &PoseManifold::new(8), 0);
        let near = frame.depth.data().iter().filter(|&&d| d < 900.0).count();
        assert!(near > 300, "only {near} hand pixels");
        assert!(frame.visible.iter().any(|&v| v));
    }

    #[test]
    fn holes_only_on_discontinuities() {
        let mut cfg = SynthConfig::with_size(1, 2, 96);
        cfg.hole_prob = 1.0;
        let (frame, _) = render_sample(&cfg, &PoseManifold::new(8), 0);
        let holes = frame.holes.iter().filter(|&&h| h).count();
        assert!(holes > 0);
        assert!(holes < frame.holes.len() / 4);
        for (d, h) in frame.depth.data().iter().zip(&frame.holes) {
            assert_eq!(*d == 0.0, *h);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SynthConfig::with_size(1, 0, 32);
        cfg.latent_dim = 0;
        assert!(synth_frames(&cfg, ExecMode::Sequential).is_err());
        cfg.latent_dim = 4;
        cfg.hole_prob = 1.5;
        assert!(synth_frames(&cfg, ExecMode::Sequential).is_err());
    }
}
