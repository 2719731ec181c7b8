use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate frame a [`Pose`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFrame {
    /// Camera space, millimeters.
    Millimeters,
    /// Relative to a hand cube: `(p - center) / (side / 2)`.
    Normalized,
}

/// `J` 3D joint locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<[f64; 3]>,
    pub frame: PoseFrame,
}

impl Pose {
    pub fn new(joints: Vec<[f64; 3]>, frame: PoseFrame) -> Self {
        Pose { joints, frame }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Flat `3J` vector `[x0, y0, z0, x1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64], frame: PoseFrame) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::invalid("pose", format!("{} values is not a multiple of 3", values.len())));
        }
        Ok(Pose {
            joints: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            frame,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub(crate) fn expect_frame(&self, frame: PoseFrame) -> Result<()> {
        if self.frame != frame {
            return Err(Error::FrameMismatch {
                expected: match frame {
                    PoseFrame::Millimeters => "millimeter",
                    PoseFrame::Normalized => "normalized",
                },
            });
        }
        Ok(())
    }
}
