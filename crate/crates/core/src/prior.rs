//! Linear pose prior: a PCA subspace of normalized poses, and its use as the
//! reconstruction layer that lifts bottleneck coefficients back to `3J`
//! joint coordinates.

use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::pose::{Pose, PoseFrame};

/// Mean pose plus `d` orthonormal principal directions in `3J` pose space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub mean: Vec<f64>,
    /// `3J x d`, row-major; columns are orthonormal.
    pub components: Vec<f64>,
    pub dim: usize,
    /// Sample variance along each component, descending.
    pub variances: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl PriorModel {
    pub fn pose_len(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, col: usize) -> Vec<f64> {
        (0..self.pose_len()).map(|r| self.components[r * self.dim + col]).collect()
    }

    /// Fraction of the total variance captured by the subspace.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.variances.iter().sum::<f64>() / self.total_variance
    }

    /// Rebuilds a model from stored mean and component matrix.
    pub fn from_parts(mean: Vec<f64>, components: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || components.len() != mean.len() * dim {
            return Err(Error::invalid("prior", "component matrix does not match mean and dimension"));
        }
        Ok(PriorModel {
            mean,
            components,
            dim,
            variances: vec![],
            total_variance: 0.0,
        })
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the row-major eigenvector matrix (eigenvectors in
/// columns), unsorted.
pub(crate) fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Fits a `dim`-dimensional PCA subspace to normalized poses. Components are
/// ordered by decreasing variance and sign-fixed so that each column's
/// largest-magnitude entry is positive.
pub fn fit_pca(poses: &[Pose], dim: usize) -> Result<PriorModel> {
    const OP: &str = "fit_pca";
    if dim == 0 {
        return Err(Error::invalid(OP, "dimension must be positive"));
    }
    if poses.len() < dim + 1 {
        return Err(Error::invalid(OP, format!("need at least {} poses, got {}", dim + 1, poses.len())));
    }
    let n = poses[0].num_joints() * 3;
    if dim > n {
        return Err(Error::invalid(OP, format!("dimension {dim} exceeds pose length {n}")));
    }
    let mut rows = Vec::with_capacity(poses.len());
    for p in poses {
        p.expect_frame(PoseFrame::Normalized)?;
        if p.num_joints() * 3 != n {
            return Err(Error::shape(OP, "joint count", n / 3, p.num_joints()));
        }
        rows.push(p.to_flat());
    }
    let count = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut cov = vec![0.0; n * n];
    for r in &rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..n {
            for j in i..n {
                cov[i * n + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[i * n + j] / (count - 1.0);
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
    }
    let total_variance = (0..n).map(|i| cov[i * n + i]).sum();
    let (values, vectors) = symmetric_eigen(&cov, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut components = vec![0.0; n * dim];
    let mut variances = Vec::with_capacity(dim);
    for (col, &src) in order.iter().take(dim).enumerate() {
        let mut vec: Vec<f64> = (0..n).map(|r| vectors[r * n + src]).collect();
        let pivot = vec.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            components[r * dim + col] = vec[r];
        }
        variances.push(values[src].max(0.0));
    }
    Ok(PriorModel {
        mean,
        components,
        dim,
        variances,
        total_variance,
    })
}

/// Subspace coefficients `components^T (pose - mean)`.
pub fn embed(model: &PriorModel, pose: &Pose) -> Result<Vec<f64>> {
    pose.expect_frame(PoseFrame::Normalized)?;
    let x = pose.to_flat();
    if x.len() != model.pose_len() {
        return Err(Error::shape("embed", "pose length", model.pose_len(), x.len()));
    }
    let mut c = vec![0.0; model.dim];
    for (r, (xi, mi)) in x.iter().zip(&model.mean).enumerate() {
        let diff = xi - mi;
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += model.components[r * model.dim + k] * diff;
        }
    }
    Ok(c)
}

/// Normalized pose `mean + components c`.
pub fn reconstruct(model: &PriorModel, coeffs: &[f64]) -> Result<Pose> {
    if coeffs.len() != model.dim {
        return Err(Error::shape("reconstruct", "coefficient count", model.dim, coeffs.len()));
    }
    let flat: Vec<f64> = (0..model.pose_len())
        .map(|r| {
            model.mean[r]
                + coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, c)| model.components[r * model.dim + k] * c)
                    .sum::<f64>()
        })
        .collect();
    Pose::from_flat(&flat, PoseFrame::Normalized)
}

/// Weight (`3J x d`, the components) and bias (the mean) of a fully
/// connected layer whose forward pass equals [`reconstruct`].
pub fn make_reconstruction_layer<T: Scalar>(model: &PriorModel) -> (Tensor<T>, Tensor<T>) {
    let n = model.pose_len();
    (
        Tensor::from_fn(&[n, model.dim], |i| T::from_real(model.components[i])),
        Tensor::from_fn(&[n], |i| T::from_real(model.mean[i])),
    )
}
