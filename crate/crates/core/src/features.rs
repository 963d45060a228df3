//! Flattened-ECG features reduced with principal component analysis, used by
//! the classical baselines.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ProcessedEcg;

pub const DEFAULT_COMPONENTS: usize = 256;

/// Eigenvalues below this fraction of the largest are treated as zero when
/// mapping Gram eigenvectors back to feature space.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `n_components x dim`, rows orthonormal.
    pub components: Vec<f64>,
    /// Sample-covariance eigenvalues of the kept components, descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl PcaModel {
    /// Fits on rows of equal length. Works on whichever of the covariance or
    /// the Gram matrix is smaller.
    pub fn fit<S: AsRef<[f64]>>(rows: &[S], n_components: usize) -> Result<Self> {
        let n = rows.len();
        if n_components == 0 {
            return Err(Error::InvalidArgument("need at least one component".into()));
        }
        if n < n_components || n < 2 {
            return Err(Error::InsufficientData(format!(
                "{n} samples for {n_components} components"
            )));
        }
        let dim = rows[0].as_ref().len();
        if n_components > dim {
            return Err(Error::InvalidArgument(format!("{n_components} components in dimension {dim}")));
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Shape {
                    expected: dim.to_string(),
                    got: r.len().to_string(),
                });
            }
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        // Centered data, one sample per column.
        let x = DMatrix::from_fn(dim, n, |i, j| rows[j].as_ref()[i] - mean[i]);
        let denom = (n - 1) as f64;
        let total_variance = x.iter().map(|v| v * v).sum::<f64>() / denom;

        let mut components: Vec<DVector<f64>> = Vec::with_capacity(n_components);
        let mut eigenvalues = Vec::with_capacity(n_components);
        if dim <= n {
            let cov = (&x * x.transpose()) / denom;
            let eig = SymmetricEigen::new(cov);
            for j in descending(&eig.eigenvalues).into_iter().take(n_components) {
                components.push(eig.eigenvectors.column(j).into_owned());
                eigenvalues.push(eig.eigenvalues[j].max(0.0));
            }
        } else {
            let gram = x.transpose() * &x;
            let eig = SymmetricEigen::new(gram);
            let top = eig.eigenvalues.max().max(0.0);
            for j in descending(&eig.eigenvalues).into_iter().take(n_components) {
                let lambda = eig.eigenvalues[j];
                if lambda <= RANK_TOL * top {
                    break;
                }
                let v = &x * eig.eigenvectors.column(j) / lambda.sqrt();
                components.push(v);
                eigenvalues.push(lambda / denom);
            }
        }
        // Rank-deficient data: complete the basis deterministically.
        let mut e = 0;
        while components.len() < n_components && e < dim {
            let mut v = DVector::zeros(dim);
            v[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for c in &components {
                    let d = c.dot(&v);
                    v.axpy(-d, c, 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-6 {
                components.push(v / norm);
                eigenvalues.push(0.0);
            }
        }

        let mut flat = Vec::with_capacity(n_components * dim);
        for mut c in components {
            let (imax, _) = c.iter().enumerate().fold((0, 0.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
            if c[imax] < 0.0 {
                c.neg_mut();
            }
            flat.extend(c.iter());
        }
        Ok(Self {
            dim,
            mean,
            components: flat,
            eigenvalues,
            total_variance,
        })
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, j: usize) -> &[f64] {
        &self.components[j * self.dim..(j + 1) * self.dim]
    }

    /// Fraction of total variance captured by the kept components.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim.to_string(),
                got: x.len().to_string(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.n_components())
            .map(|j| self.component(j).iter().zip(&centered).map(|(c, v)| c * v).sum())
            .collect())
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.n_components() {
            return Err(Error::Shape {
                expected: self.n_components().to_string(),
                got: z.len().to_string(),
            });
        }
        let mut out = self.mean.clone();
        for (j, &w) in z.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.component(j)) {
                *o += w * c;
            }
        }
        Ok(out)
    }

    pub fn transform_ecg(&self, ecg: &ProcessedEcg) -> Result<Vec<f64>> {
        self.transform(ecg.as_flat())
    }
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// PCA over flattened processed records.
pub fn pca_fit(train: &[ProcessedEcg], n_components: usize) -> Result<PcaModel> {
    let rows: Vec<&[f64]> = train.iter().map(ProcessedEcg::as_flat).collect();
    PcaModel::fit(&rows, n_components)
}
