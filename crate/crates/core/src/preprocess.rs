//! Hand localization, cube cropping and depth normalization.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at integer
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth]
    }
}

/// A depth image in millimeters; 0 marks a missing reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    /// `[H, W]`.
    pub depth: Tensor<f32>,
    pub intrinsics: Intrinsics,
    pub frame_id: String,
}

impl DepthFrame {
    pub fn new(depth: Tensor<f32>, intrinsics: Intrinsics, frame_id: impl Into<String>) -> Result<Self> {
        if depth.rank() != 2 {
            return Err(Error::shape("depth_frame", "rank", 2, depth.rank()));
        }
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::invalid("depth_frame", "focal lengths must be positive"));
        }
        if depth.data().iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid("depth_frame", "depths must be finite and non-negative"));
        }
        Ok(DepthFrame {
            depth,
            intrinsics,
            frame_id: frame_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth.data()[v * self.width() + u]
    }
}

/// Axis-aligned metric cube around the hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeSpec {
    pub center: [f64; 3],
    pub side: f64,
}

/// Preprocessing constants; stored with every trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Cube side in millimeters.
    pub cube_side: f64,
    /// Depth band behind the closest reading that belongs to the hand (mm).
    pub z_band: f64,
    /// Output patch extent in pixels.
    pub patch_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            cube_side: 250.0,
            z_band: 150.0,
            patch_size: 128,
        }
    }
}

/// Pixel rectangle (continuous coordinates) that was resampled into a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

/// Network input: `S x S` depths normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPatch {
    /// `[S, S]`.
    pub values: Tensor<f32>,
    pub cube: CubeSpec,
    pub crop: CropRect,
    pub intrinsics: Intrinsics,
}

impl NormalizedPatch {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    /// Continuous patch coordinates `(col, row)` of a normalized 3D point,
    /// following the same perspective mapping used to crop the patch.
    pub fn locate(&self, p: [f64; 3]) -> (f64, f64) {
        let half = self.cube.side / 2.0;
        let c = self.cube.center;
        let mm = [c[0] + p[0] * half, c[1] + p[1] * half, (c[2] + p[2] * half).max(1.0)];
        let (u, v) = self.intrinsics.project(mm);
        let s = self.size() as f64;
        (
            (u - self.crop.u0) / (self.crop.u1 - self.crop.u0) * s - 0.5,
            (v - self.crop.v0) / (self.crop.v1 - self.crop.v0) * s - 0.5,
        )
    }
}

/// Locates the hand as the closest object: the 3D center of mass of all
/// readings within `z_band` of the nearest depth.
pub fn detect_hand(frame: &DepthFrame, cfg: &PreprocessConfig) -> Result<CubeSpec> {
    let d_min = frame
        .depth
        .data()
        .iter()
        .copied()
        .filter(|&d| d > 0.0)
        .fold(f32::INFINITY, f32::min);
    if !d_min.is_finite() {
        return Err(Error::NoHand);
    }
    let limit = d_min as f64 + cfg.z_band;
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    let w = frame.width();
    for (i, &d) in frame.depth.data().iter().enumerate() {
        let d = d as f64;
        if d > 0.0 && d <= limit {
            let p = frame.intrinsics.backproject((i % w) as f64, (i / w) as f64, d);
            for k in 0..3 {
                sum[k] += p[k];
            }
            count += 1;
        }
    }
    let n = count as f64;
    Ok(CubeSpec {
        center: [sum[0] / n, sum[1] / n, sum[2] / n],
        side: cfg.cube_side,
    })
}

/// Crops the cube's projection (its extents at the center depth), resamples
/// it to `size x size` by nearest neighbor and maps depth `d` to
/// `clamp(2 (d - center.z) / side, -1, 1)`. Missing readings and readings
/// outside the image map to exactly 1.
pub fn extract_patch(frame: &DepthFrame, cube: &CubeSpec, size: usize) -> Result<NormalizedPatch> {
    if size == 0 {
        return Err(Error::invalid("extract_patch", "patch size must be positive"));
    }
    if !(cube.side > 0.0 && cube.center[2] > 0.0) {
        return Err(Error::invalid("extract_patch", "cube must have positive side and depth"));
    }
    let k = &frame.intrinsics;
    let half = cube.side / 2.0;
    let [x, y, z] = cube.center;
    let crop = CropRect {
        u0: k.fx * (x - half) / z + k.cx,
        u1: k.fx * (x + half) / z + k.cx,
        v0: k.fy * (y - half) / z + k.cy,
        v1: k.fy * (y + half) / z + k.cy,
    };
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    if crop.u1 <= -0.5 || crop.u0 >= w - 0.5 || crop.v1 <= -0.5 || crop.v0 >= h - 0.5 {
        return Err(Error::CubeOutsideImage);
    }
    let s = size as f64;
    let (du, dv) = ((crop.u1 - crop.u0) / s, (crop.v1 - crop.v0) / s);
    let cols: Vec<Option<usize>> = (0..size)
        .map(|j| pixel_index(crop.u0 + (j as f64 + 0.5) * du, frame.width()))
        .collect();
    let mut values = Vec::with_capacity(size * size);
    for i in 0..size {
        let row = pixel_index(crop.v0 + (i as f64 + 0.5) * dv, frame.height());
        for col in &cols {
            let d = match (row, col) {
                (Some(r), Some(c)) => frame.at(*c, r),
                _ => 0.0,
            };
            values.push(normalize_depth(d, z, cube.side));
        }
    }
    Ok(NormalizedPatch {
        values: Tensor::new(&[size, size], values)?,
        cube: *cube,
        crop,
        intrinsics: *k,
    })
}

fn pixel_index(coord: f64, extent: usize) -> Option<usize> {
    let r = coord.round();
    (r >= 0.0 && r < extent as f64).then_some(r as usize)
}

fn normalize_depth(d: f32, center_z: f64, side: f64) -> f32 {
    if d <= 0.0 {
        return 1.0;
    }
    (2.0 * (d as f64 - center_z) / side).clamp(-1.0, 1.0) as f32
}

/// Millimeter pose to cube-normalized coordinates.
pub fn normalize_pose(pose: &Pose, cube: &CubeSpec) -> Result<Pose> {
    pose.expect_frame(PoseFrame::Millimeters)?;
    let half = cube.side / 2.0;
    let joints = pose
        .joints
        .iter()
        .map(|j| std::array::from_fn(|k| (j[k] - cube.center[k]) / half))
        .collect();
    Ok(Pose::new(joints, PoseFrame::Normalized))
}

/// Inverse of [`normalize_pose`].
pub fn denormalize_pose(pose: &Pose, cube: &CubeSpec) -> Result<Pose> {
    pose.expect_frame(PoseFrame::Normalized)?;
    let half = cube.side / 2.0;
    let joints = pose
        .joints
        .iter()
        .map(|j| std::array::from_fn(|k| j[k] * half + cube.center[k]))
        .collect();
    Ok(Pose::new(joints, PoseFrame::Millimeters))
}
