//! Principal component analysis by cyclic Jacobi eigendecomposition of
//! the sample covariance (n-1 convention). Deterministic: component
//! signs are canonicalized so the largest-magnitude coordinate is
//! positive, and eigenvalues are sorted nonincreasing.

use crate::ckpt::Checkpoint;
use crate::error::{IdpError, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// D-vector.
    pub mean: Vec<f64>,
    /// q x D, rows orthonormal.
    pub components: Matrix,
    /// q nonnegative reals, nonincreasing.
    pub eigenvalues: Vec<f64>,
}

/// Cyclic Jacobi rotations on a symmetric matrix; returns (eigenvalues,
/// eigenvectors as columns).
fn jacobi_eigen(mut a: Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| a.get(i, i).abs()).fold(1e-300, f64::max);
    for _sweep in 0..100 {
        if off(&a) <= (1e-30 * scale * scale).max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    (eigenvalues, v)
}

/// Fit PCA on row vectors: mean-center, eigendecompose the covariance
/// X_c^T X_c / (n-1), and keep the leading q components.
pub fn fit_pca(data: &Matrix, q: usize) -> Result<PcaModel> {
    let n = data.rows();
    let d = data.cols();
    if q == 0 || q > d {
        return Err(IdpError::InvalidArgument(format!(
            "q = {q} must satisfy 1 <= q <= D = {d}"
        )));
    }
    if n < q + 1 {
        return Err(IdpError::InvalidArgument(format!(
            "need at least q+1 = {} vectors, got {n}",
            q + 1
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        let row = data.row(i);
        for a in 0..d {
            let xa = row[a] - mean[a];
            if xa == 0.0 {
                continue;
            }
            let crow = cov.row_mut(a);
            for (b, c) in crow.iter_mut().enumerate() {
                *c += xa * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for c in cov.as_mut_slice() {
        *c /= denom;
    }

    let (eigenvalues, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut components = Matrix::zeros(q, d);
    let mut kept = Vec::with_capacity(q);
    for (row, &col) in order.iter().take(q).enumerate() {
        // eigenvector = column `col`; canonical sign: largest-|coord| positive
        let mut comp: Vec<f64> = (0..d).map(|r| vectors.get(r, col)).collect();
        let mut best = 0usize;
        for (i, x) in comp.iter().enumerate() {
            if x.abs() > comp[best].abs() {
                best = i;
            }
        }
        if comp[best] < 0.0 {
            comp.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(row).copy_from_slice(&comp);
        kept.push(eigenvalues[col].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues: kept,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// components . (v - mean).
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(IdpError::DimMismatch {
                what: "pca input".into(),
                expected: self.input_dim(),
                got: v.len(),
            });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.output_dim())
            .map(|r| crate::linalg::dot(self.components.row(r), &centered))
            .collect())
    }

    /// mean + components^T . y.
    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let mut out = self.mean.clone();
        for (r, &y) in projected.iter().enumerate() {
            let comp = self.components.row(r);
            for j in 0..d {
                out[j] += y * comp[j];
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_vector("pca.mean", &self.mean);
        ck.push_matrix("pca.components", &self.components);
        ck.push_vector("pca.eigenvalues", &self.eigenvalues);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mean = ck.require("pca.mean")?.data.clone();
        let comp_entry = ck.require("pca.components")?;
        let components = comp_entry.to_matrix(None)?;
        let eigenvalues = ck.require("pca.eigenvalues")?.data.clone();
        if components.cols() != mean.len() || components.rows() != eigenvalues.len() {
            return Err(IdpError::TensorShape {
                name: "pca.components".into(),
                expected: vec![eigenvalues.len(), mean.len()],
                got: vec![components.rows(), components.cols()],
            });
        }
        Ok(PcaModel {
            mean,
            components,
            eigenvalues,
        })
    }
}
