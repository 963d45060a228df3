use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear model `y = w . x + intercept`. The intercept is not penalised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

/// Solves `(Xc' Xc + lambda I) w = Xc' yc` on column-centred data and
/// recovers the intercept from the means.
pub fn ridge_fit<S: AsRef<[f64]>>(features: &[S], targets: &[f64], lambda: f64) -> Result<Ridge> {
    let n = features.len();
    if n == 0 || n != targets.len() {
        return Err(Error::InsufficientData(format!("{n} feature rows for {} targets", targets.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let d = features[0].as_ref().len();
    if features.iter().any(|r| r.as_ref().len() != d) {
        return Err(Error::Shape {
            expected: d.to_string(),
            got: "rows of differing length".into(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i].as_ref()[j]);
    let x_mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - x_mean[j]);
    let yc = DVector::from_iterator(n, targets.iter().map(|y| y - y_mean));
    let mut a = xc.transpose() * &xc;
    for i in 0..d {
        a[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("ridge system with lambda = {lambda}")))?;
    // A numerically rank-deficient system can still factor; reject it.
    let diag = chol.l().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let w = chol.solve(&rhs);
    if lo <= 1e-7 * hi || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("ridge system with lambda = {lambda}")));
    }
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(Ridge {
        weights: w.iter().copied().collect(),
        intercept,
        lambda,
    })
}

pub fn ridge_predict(model: &Ridge, features: &[f64]) -> Result<f64> {
    if features.len() != model.weights.len() {
        return Err(Error::Shape {
            expected: model.weights.len().to_string(),
            got: features.len().to_string(),
        });
    }
    Ok(model.intercept + model.weights.iter().zip(features).map(|(a, b)| a * b).sum::<f64>())
}
