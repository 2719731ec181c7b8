//! Evaluation metrics over millimeter poses.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointErrors {
    pub per_joint: Vec<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_joint: Vec<f64>,
    pub overall: f64,
    pub curve: Vec<(f64, f64)>,
    pub frames: usize,
}

/// Thresholds `0, 1, ..., 80` mm.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(f64::from).collect()
}

fn check(pred: &[Pose], truth: &[Pose]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::shape("metrics", "frame count", truth.len(), pred.len()));
    }
    let j = truth.first().map_or(0, Pose::num_joints);
    for (p, t) in pred.iter().zip(truth) {
        p.expect_frame(PoseFrame::Millimeters)?;
        t.expect_frame(PoseFrame::Millimeters)?;
        if p.num_joints() != j || t.num_joints() != j {
            return Err(Error::shape("metrics", "joint count", j, p.num_joints().max(t.num_joints())));
        }
    }
    Ok(j)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Worst joint error of each frame.
pub fn max_joint_errors(pred: &[Pose], truth: &[Pose]) -> Result<Vec<f64>> {
    check(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.joints.iter().zip(&t.joints).map(|(a, b)| dist(a, b)).fold(0.0, f64::max))
        .collect())
}

/// Mean Euclidean error per joint and their unweighted mean.
pub fn avg_joint_error(pred: &[Pose], truth: &[Pose]) -> Result<JointErrors> {
    let j = check(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_joint = vec![0.0; j];
    for (p, t) in pred.iter().zip(truth) {
        for (acc, (a, b)) in per_joint.iter_mut().zip(p.joints.iter().zip(&t.joints)) {
            *acc += dist(a, b);
        }
    }
    per_joint.iter_mut().for_each(|e| *e /= pred.len() as f64);
    let overall = per_joint.iter().sum::<f64>() / j as f64;
    Ok(JointErrors { per_joint, overall })
}

/// For each threshold `D`, the fraction of frames whose worst joint is within `D`.
pub fn fraction_within(pred: &[Pose], truth: &[Pose], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("fraction_within", "thresholds must be ascending"));
    }
    let mut worst = max_joint_errors(pred, truth)?;
    if worst.is_empty() {
        return Err(Error::EmptyDataset);
    }
    worst.sort_by(f64::total_cmp);
    let n = worst.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&d| (d, worst.partition_point(|&e| e <= d) as f64 / n))
        .collect())
}

pub fn evaluate(pred: &[Pose], truth: &[Pose], thresholds: &[f64]) -> Result<EvalReport> {
    let errors = avg_joint_error(pred, truth)?;
    Ok(EvalReport {
        per_joint: errors.per_joint,
        overall: errors.overall,
        curve: fraction_within(pred, truth, thresholds)?,
        frames: pred.len(),
    })
}

impl EvalReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold_mm,fraction\n");
        for (d, f) in &self.curve {
            writeln!(s, "{d},{f}").unwrap();
        }
        s
    }

    /// Per-joint table; the last row (`mean`) is the overall error.
    pub fn joints_csv(&self, names: &[String]) -> String {
        let mut s = String::from("joint,mean_error_mm\n");
        for (i, e) in self.per_joint.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            writeln!(s, "{name},{e}").unwrap();
        }
        writeln!(s, "mean,{}", self.overall).unwrap();
        s
    }
}
