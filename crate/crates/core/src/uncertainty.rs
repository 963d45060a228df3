//! Predictive uncertainty: aleatoric variance from the Gaussian head,
//! epistemic variance from ensemble disagreement and from a last-layer
//! Laplace approximation of the mean head.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, HeadKind, TrainedNetwork};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: f64,
    /// Mean of the members' predicted variances.
    pub aleatoric: f64,
    /// Population variance of the members' means.
    pub epistemic_ensemble: f64,
    /// Mean of the members' Laplace variances, when every member has a posterior.
    pub epistemic_laplace: Option<f64>,
}

/// Mean, mean variance and population variance of the means.
pub fn combine_members(means: &[f64], variances: &[f64]) -> Result<(f64, f64, f64)> {
    if means.is_empty() || means.len() != variances.len() {
        return Err(Error::InsufficientData("ensemble needs at least one member".into()));
    }
    let m = means.len() as f64;
    let mean = means.iter().sum::<f64>() / m;
    let aleatoric = variances.iter().sum::<f64>() / m;
    let epistemic = means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
    Ok((mean, aleatoric, epistemic))
}

/// Gaussian last-layer posterior over the mean head `[w; b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub theta_map: Vec<f64>,
    /// Row-major `(H + tau I)^-1`.
    pub covariance: Vec<f64>,
    pub prior_precision: f64,
    pub log_marginal: f64,
}

impl LaplacePosterior {
    pub fn dim(&self) -> usize {
        self.theta_map.len()
    }
}

/// Ten log-spaced prior precisions from 1e-2 to 1e3.
pub fn prior_precision_grid() -> [f64; 10] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 5.0 * i as f64 / 9.0))
}

/// Appends the constant bias feature.
pub fn augment(phi: &[f64]) -> Vec<f64> {
    let mut v = phi.to_vec();
    v.push(1.0);
    v
}

/// `sum_i phi_i phi_i' / sigma2_i` for features that already carry the bias term.
pub fn last_layer_hessian<S: AsRef<[f64]>>(phi: &[S], sigma2: &[f64]) -> Result<DMatrix<f64>> {
    if phi.is_empty() || phi.len() != sigma2.len() {
        return Err(Error::InsufficientData(format!("{} feature rows for {} variances", phi.len(), sigma2.len())));
    }
    let d = phi[0].as_ref().len();
    let mut h = DMatrix::zeros(d, d);
    for (p, &s2) in phi.iter().zip(sigma2) {
        let p = p.as_ref();
        if p.len() != d {
            return Err(Error::Shape {
                expected: d.to_string(),
                got: p.len().to_string(),
            });
        }
        if !(s2 > 0.0) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {s2}")));
        }
        let v = DVector::from_column_slice(p);
        h.ger(1.0 / s2, &v, &v, 1.0);
    }
    Ok(h)
}

fn log_marginal(h: &DMatrix<f64>, theta: &[f64], nll: f64, tau: f64) -> Result<(f64, DMatrix<f64>)> {
    let d = theta.len();
    let mut a = h.clone();
    for i in 0..d {
        a[(i, i)] += tau;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("posterior precision with tau = {tau} is not positive definite")))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sq: f64 = theta.iter().map(|t| t * t).sum();
    let lml = -nll - 0.5 * tau * sq + 0.5 * d as f64 * tau.ln() - 0.5 * log_det;
    Ok((lml, chol.inverse()))
}

/// Posterior for a fixed prior precision.
pub fn laplace_posterior<S: AsRef<[f64]>>(phi: &[S], sigma2: &[f64], y: &[f64], theta_map: &[f64], tau: f64) -> Result<LaplacePosterior> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("prior precision must be positive, got {tau}")));
    }
    let h = last_layer_hessian(phi, sigma2)?;
    if h.nrows() != theta_map.len() || y.len() != phi.len() {
        return Err(Error::Shape {
            expected: format!("{} parameters", h.nrows()),
            got: theta_map.len().to_string(),
        });
    }
    let nll = gaussian_nll_sum(phi, sigma2, y, theta_map);
    let (log_marginal, cov) = log_marginal(&h, theta_map, nll, tau)?;
    Ok(LaplacePosterior {
        theta_map: theta_map.to_vec(),
        covariance: row_major(&cov),
        prior_precision: tau,
        log_marginal,
    })
}

/// Posterior with the prior precision that maximises the Laplace marginal
/// likelihood over [`prior_precision_grid`].
pub fn laplace_fit_features<S: AsRef<[f64]>>(phi: &[S], sigma2: &[f64], y: &[f64], theta_map: &[f64]) -> Result<LaplacePosterior> {
    let mut best: Option<LaplacePosterior> = None;
    for tau in prior_precision_grid() {
        let p = laplace_posterior(phi, sigma2, y, theta_map, tau)?;
        if best.as_ref().map_or(true, |b| p.log_marginal > b.log_marginal) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::InsufficientData("empty prior grid".into()))
}

fn gaussian_nll_sum<S: AsRef<[f64]>>(phi: &[S], sigma2: &[f64], y: &[f64], theta: &[f64]) -> f64 {
    phi.iter()
        .zip(sigma2)
        .zip(y)
        .map(|((p, &s2), &yi)| {
            let mu: f64 = p.as_ref().iter().zip(theta).map(|(a, b)| a * b).sum();
            0.5 * (2.0 * std::f64::consts::PI * s2).ln() + (yi - mu).powi(2) / (2.0 * s2)
        })
        .sum()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `phi' Sigma phi` for a feature vector that carries the bias term.
pub fn laplace_variance(post: &LaplacePosterior, phi: &[f64]) -> Result<f64> {
    let d = post.dim();
    if phi.len() != d {
        return Err(Error::Shape {
            expected: d.to_string(),
            got: phi.len().to_string(),
        });
    }
    let mut v = 0.0;
    for i in 0..d {
        let row = &post.covariance[i * d..(i + 1) * d];
        v += phi[i] * row.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(v.max(0.0))
}

fn mean_head(model: &TrainedNetwork) -> Result<Vec<f64>> {
    if model.head() != HeadKind::Gaussian {
        return Err(Error::InvalidArgument("Laplace needs a Gaussian-head model".into()));
    }
    let params = model.network.params();
    let get = |name: &str| {
        params
            .find(name)
            .map(|id| params.get(id).value.data().to_vec())
            .ok_or_else(|| Error::MissingKey(name.to_string()))
    };
    let mut theta = get("head.mean.weight")?;
    theta.extend(get("head.mean.bias")?);
    Ok(theta)
}

/// Fits the last-layer posterior of a Gaussian-head model on its training
/// data, on the z-scale of the targets, with the predicted variances frozen.
pub fn laplace_fit(model: &TrainedNetwork, train: &Dataset) -> Result<LaplacePosterior> {
    let theta = mean_head(model)?;
    let raw = model.raw_outputs(train)?;
    let phi: Vec<Vec<f64>> = raw.iter().map(|r| augment(&r.features)).collect();
    let sigma2: Vec<f64> = raw.iter().map(|r| r.head[1].exp()).collect();
    let y: Vec<f64> = train.targets.iter().map(|&t| model.codec.normalizer.apply(t)).collect();
    laplace_fit_features(&phi, &sigma2, &y, &theta)
}

/// Trained Gaussian-head members sharing one architecture and codec.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<TrainedNetwork>,
}

impl Ensemble {
    pub fn new(members: Vec<TrainedNetwork>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InsufficientData("empty ensemble".into()));
        };
        for m in &members {
            if m.head() != HeadKind::Gaussian {
                return Err(Error::InvalidArgument("ensemble members need the Gaussian head".into()));
            }
            if m.network.config() != first.network.config() || m.codec != first.codec {
                return Err(Error::InvalidArgument("ensemble members differ in architecture or codec".into()));
            }
        }
        Ok(Self { members })
    }

    /// Fits a Laplace posterior for every member.
    pub fn fit_laplace(&mut self, train: &Dataset) -> Result<()> {
        for m in &mut self.members {
            m.laplace = Some(laplace_fit(m, train)?);
        }
        Ok(())
    }

    /// Each member's means, variances and (when fitted) Laplace variances
    /// in concentration units.
    pub fn member_predictions(&self, data: &Dataset) -> Result<Vec<MemberPrediction>> {
        self.members
            .iter()
            .map(|member| {
                let norm = &member.codec.normalizer;
                let raw = member.raw_outputs(data)?;
                let laplace = match &member.laplace {
                    Some(p) => Some(
                        raw.iter()
                            .map(|r| Ok(laplace_variance(p, &augment(&r.features))? * norm.sd * norm.sd))
                            .collect::<Result<Vec<f64>>>()?,
                    ),
                    None => None,
                };
                Ok(MemberPrediction {
                    mean: raw.iter().map(|r| norm.invert(r.head[0])).collect(),
                    variance: raw.iter().map(|r| norm.invert_variance(r.head[1].exp())).collect(),
                    laplace,
                })
            })
            .collect()
    }

    /// Per-record predictive distribution in concentration units.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<PredictiveDistribution>> {
        combine_predictions(&self.member_predictions(data)?)
    }
}

/// Predictions of one ensemble member over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub laplace: Option<Vec<f64>>,
}

/// Combines member predictions record by record.
pub fn combine_predictions(members: &[MemberPrediction]) -> Result<Vec<PredictiveDistribution>> {
    let Some(first) = members.first() else {
        return Err(Error::InsufficientData("empty ensemble".into()));
    };
    let n = first.mean.len();
    let m = members.len() as f64;
    let with_laplace = members.iter().all(|p| p.laplace.is_some());
    (0..n)
        .map(|i| {
            let means: Vec<f64> = members.iter().map(|p| p.mean[i]).collect();
            let vars: Vec<f64> = members.iter().map(|p| p.variance[i]).collect();
            let (mean, aleatoric, epistemic_ensemble) = combine_members(&means, &vars)?;
            let epistemic_laplace = with_laplace.then(|| members.iter().map(|p| p.laplace.as_ref().map_or(0.0, |l| l[i])).sum::<f64>() / m);
            Ok(PredictiveDistribution {
                mean,
                aleatoric,
                epistemic_ensemble,
                epistemic_laplace,
            })
        })
        .collect()
}
