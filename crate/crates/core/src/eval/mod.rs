//! Regression, ranking and uncertainty metrics.

pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{PatientMeta, Sex};

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            expected: format!("{what} of length {a}"),
            got: format!("length {b}"),
        });
    }
    if a == 0 {
        return Err(Error::InsufficientData(format!("{what}: empty input")));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    /// MSE divided by the target variance.
    pub nmse: f64,
}

pub fn regression_metrics(preds: &[f64], targets: &[f64], sigma_y: f64) -> Result<RegressionMetrics> {
    check_lengths("predictions", preds.len(), targets.len())?;
    if !(sigma_y > 0.0) {
        return Err(Error::InvalidArgument(format!("target sd must be positive, got {sigma_y}")));
    }
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        se += (p - t).powi(2);
        ae += (p - t).abs();
    }
    let mse = se / n;
    Ok(RegressionMetrics {
        mse,
        mae: ae / n,
        nmse: mse / (sigma_y * sigma_y),
    })
}

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths("predictions", preds.len(), targets.len())?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData("AUROC needs both positive and negative labels".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve from the Mann-Whitney statistic; tied scores
/// count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths("scores", labels.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Quadratic pair-counting AUROC.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths("scores", labels.len(), scores.len())?;
    let (pos, neg) = class_counts(labels)?;
    let mut wins = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Cumulative scores `p(class <= i)`, `i = 1..k-1`, from class probabilities.
pub fn cumulative_from_class_probs(probs: &[f64]) -> Vec<f64> {
    let k = probs.len();
    probs[..k.saturating_sub(1)]
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// Cumulative scores `1 - P(class > i)` from rank probabilities.
pub fn cumulative_from_rank_probs(rank_probs: &[f64]) -> Vec<f64> {
    rank_probs.iter().map(|p| 1.0 - p).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAuroc {
    /// AUROC of event `class <= i` for `i = 1..k-1`; `None` where the
    /// labels at that threshold are single-class.
    pub per_threshold: Vec<Option<f64>>,
    /// Mean over the thresholds that could be scored.
    pub aumroc: f64,
}

impl MacroAuroc {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_threshold
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Per-threshold AUROCs of the cumulative events and their unweighted mean.
/// `cumulative[n]` holds the `k - 1` cumulative scores of example `n`.
pub fn cumulative_macro_auroc(cumulative: &[Vec<f64>], classes: &[usize], k: usize) -> Result<MacroAuroc> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2, got {k}")));
    }
    check_lengths("cumulative scores", classes.len(), cumulative.len())?;
    if let Some(row) = cumulative.iter().find(|r| r.len() != k - 1) {
        return Err(Error::Shape {
            expected: format!("{} cumulative scores", k - 1),
            got: format!("{}", row.len()),
        });
    }
    if let Some(c) = classes.iter().find(|&&c| c == 0 || c > k) {
        return Err(Error::InvalidArgument(format!("class {c} outside 1..={k}")));
    }
    let mut per_threshold = Vec::with_capacity(k - 1);
    for i in 1..k {
        let labels: Vec<bool> = classes.iter().map(|&c| c <= i).collect();
        let scores: Vec<f64> = cumulative.iter().map(|r| r[i - 1]).collect();
        per_threshold.push(auroc(&scores, &labels).ok());
    }
    let scored: Vec<f64> = per_threshold.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::InsufficientData("no threshold has both classes present".into()));
    }
    Ok(MacroAuroc {
        aumroc: mean(&scored),
        per_threshold,
    })
}

pub const SPARSIFICATION_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// MAE over the `round(f n)` least uncertain points for each retained
/// fraction `f`; equal uncertainties keep their original order.
pub fn sparsification(abs_errors: &[f64], uncertainty: &[f64], fractions: &[f64]) -> Result<Vec<f64>> {
    check_lengths("uncertainties", abs_errors.len(), uncertainty.len())?;
    let mut order: Vec<usize> = (0..abs_errors.len()).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]));
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!("retained fraction {f} outside (0, 1]")));
            }
            let m = ((f * abs_errors.len() as f64).round() as usize).max(1);
            Ok(order[..m].iter().map(|&i| abs_errors[i]).sum::<f64>() / m as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_sigma: f64,
    pub mean_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    /// Fraction of targets inside `mu +- 2 sigma`.
    pub coverage_2sigma: f64,
}

/// Equal-count bins by predicted sd. A bin edge never separates equal sd
/// values, so constant sd yields a single bin.
pub fn calibration_bins(mu: &[f64], sigma: &[f64], targets: &[f64], n_bins: usize) -> Result<Calibration> {
    check_lengths("predicted means", targets.len(), mu.len())?;
    check_lengths("predicted sds", targets.len(), sigma.len())?;
    let n = targets.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::InvalidArgument(format!("{n_bins} bins for {n} points")));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("predicted sd must be positive, got {s}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]));
    let mut bins = Vec::new();
    let mut start = 0;
    for b in 1..=n_bins {
        let mut end = (b * n / n_bins).max(start);
        while end < n && end > 0 && sigma[order[end]] == sigma[order[end - 1]] {
            end += 1;
        }
        if end > start {
            let idx = &order[start..end];
            let c = idx.len() as f64;
            bins.push(CalibrationBin {
                count: idx.len(),
                mean_sigma: idx.iter().map(|&i| sigma[i]).sum::<f64>() / c,
                mean_abs_error: idx.iter().map(|&i| (targets[i] - mu[i]).abs()).sum::<f64>() / c,
            });
            start = end;
        }
    }
    let inside = (0..n).filter(|&i| (targets[i] - mu[i]).abs() <= 2.0 * sigma[i]).count();
    Ok(Calibration {
        bins,
        coverage_2sigma: inside as f64 / n as f64,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("series", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::InsufficientData("correlation needs at least 2 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InsufficientData("correlation undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("series", x.len(), y.len())?;
    pearson(&midranks(x), &midranks(y))
}

/// Pearson correlation between per-point squared errors and variances.
pub fn error_variance_correlation(squared_errors: &[f64], variances: &[f64]) -> Result<f64> {
    pearson(squared_errors, variances)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub n: usize,
    /// `None` flags an empty stratum.
    pub mae: Option<f64>,
    pub target_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratified {
    pub by_age: Vec<Stratum>,
    pub by_sex: Vec<Stratum>,
}

impl Stratified {
    pub fn empty_strata(&self) -> Vec<&str> {
        self.by_age
            .iter()
            .chain(&self.by_sex)
            .filter(|s| s.n == 0)
            .map(|s| s.label.as_str())
            .collect()
    }
}

fn stratum(label: String, idx: &[usize], preds: &[f64], targets: &[f64]) -> Stratum {
    if idx.is_empty() {
        return Stratum {
            label,
            n: 0,
            mae: None,
            target_sd: None,
        };
    }
    let n = idx.len() as f64;
    let m = idx.iter().map(|&i| targets[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (targets[i] - m).powi(2)).sum::<f64>() / n;
    Stratum {
        label,
        n: idx.len(),
        mae: Some(idx.iter().map(|&i| (preds[i] - targets[i]).abs()).sum::<f64>() / n),
        target_sd: Some(var.sqrt()),
    }
}

/// MAE and target sd per age decile and per sex. Decile edges are the
/// empirical age quantiles of the evaluated examples.
pub fn stratified_mae(preds: &[f64], targets: &[f64], meta: &[PatientMeta]) -> Result<Stratified> {
    check_lengths("predictions", targets.len(), preds.len())?;
    check_lengths("metadata", targets.len(), meta.len())?;
    let mut ages: Vec<f64> = meta.iter().map(|m| m.age).collect();
    ages.sort_by(f64::total_cmp);
    let n = ages.len();
    let edges: Vec<f64> = (1..10).map(|d| ages[(d * n / 10).min(n - 1)]).collect();
    let mut groups = vec![Vec::new(); 10];
    for (i, m) in meta.iter().enumerate() {
        groups[edges.partition_point(|&e| e <= m.age)].push(i);
    }
    let by_age = groups
        .iter()
        .enumerate()
        .map(|(d, idx)| {
            let lo = if d == 0 { ages[0] } else { edges[d - 1] };
            let hi = if d == 9 { ages[n - 1] } else { edges[d] };
            stratum(format!("D{} [{lo:.1}, {hi:.1}]", d + 1), idx, preds, targets)
        })
        .collect();
    let by_sex = [(Sex::Male, "male"), (Sex::Female, "female")]
        .iter()
        .map(|&(s, name)| {
            let idx: Vec<usize> = (0..n).filter(|&i| meta[i].sex == s).collect();
            stratum(name.to_string(), &idx, preds, targets)
        })
        .collect();
    Ok(Stratified { by_age, by_sex })
}

/// Mean and population sd of a metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let m = mean(values);
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
        Self { mean: m, sd: var.sqrt() }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ({:.4})", self.mean, self.sd)
    }
}
