//! Evaluation report: one CSV per metric family plus `summary.txt`.
//!
//! | file | columns |
//! |------|---------|
//! | `regression.csv` | Electrolyte, Split, MSE (sd), MAE (sd), Target variance, normalized MSE (sd) |
//! | `auroc.csv` | Task, k, Threshold, AUROC (sd) |
//! | `sparsification.csv` | Uncertainty, 25, 50, 75, 100 (MAE at each retained percentage) |
//! | `correlation.csv` | Uncertainty, Pearson (sd), Spearman (sd) |
//! | `calibration.csv` | Uncertainty, Bin, n, mean sd, mean abs error |
//! | `stratified.csv` | Stratum kind, Stratum, n, MAE, Target sd |
//! | `ood.csv` | Condition, MAE, Aleatoric Gaussian, Epistemic ensemble, Epistemic Laplace |
//!
//! Cells with a spread are written `mean (sd)` over seeds. Every file starts
//! with a `# config <hash> version <version>` comment line.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Calibration, MeanSd, Stratified};
use crate::error::{Error, Result};
use crate::io::atomic_write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub electrolyte: String,
    pub split: String,
    pub mse: MeanSd,
    pub mae: MeanSd,
    pub target_variance: f64,
    pub nmse: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    /// `hypo`, `hyper`, `classification` or `ordinal`.
    pub task: String,
    pub k: usize,
    /// Cumulative threshold index, or `None` for the macro average.
    pub threshold: Option<usize>,
    pub auroc: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub uncertainty: String,
    pub sparsification: Vec<MeanSd>,
    pub pearson: MeanSd,
    pub spearman: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub condition: String,
    pub mae: MeanSd,
    pub aleatoric: MeanSd,
    pub epistemic_ensemble: MeanSd,
    pub epistemic_laplace: MeanSd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub version: String,
    pub n_seeds: usize,
    pub regression: Vec<RegressionRow>,
    pub auroc: Vec<AurocRow>,
    pub uncertainty: Vec<UncertaintyRow>,
    pub calibration: Vec<(String, Calibration)>,
    pub stratified: Option<Stratified>,
    pub ood: Vec<OodRow>,
}

fn csv_bytes(provenance: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("# {provenance}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| Error::format("csv report", e.to_string());
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.write_record(r).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::format("csv report", e.to_string()))?;
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    fn provenance(&self) -> String {
        format!("config {} version {}", self.config_hash, self.version)
    }

    /// Writes every non-empty metric family and the summary into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let prov = self.provenance();
        let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
        if !self.regression.is_empty() {
            let rows: Vec<Vec<String>> = self
                .regression
                .iter()
                .map(|r| {
                    vec![
                        r.electrolyte.clone(),
                        r.split.clone(),
                        r.mse.to_string(),
                        r.mae.to_string(),
                        format!("{:.4}", r.target_variance),
                        r.nmse.to_string(),
                    ]
                })
                .collect();
            let header = ["Electrolyte", "Split", "MSE (sd)", "MAE (sd)", "Target variance", "normalized MSE (sd)"];
            files.push(("regression.csv", csv_bytes(&prov, &header, &rows)?));
        }
        if !self.auroc.is_empty() {
            let rows: Vec<Vec<String>> = self
                .auroc
                .iter()
                .map(|r| {
                    let t = r.threshold.map_or_else(|| "macro".to_string(), |t| t.to_string());
                    vec![r.task.clone(), r.k.to_string(), t, r.auroc.to_string()]
                })
                .collect();
            files.push(("auroc.csv", csv_bytes(&prov, &["Task", "k", "Threshold", "AUROC (sd)"], &rows)?));
        }
        if !self.uncertainty.is_empty() {
            let rows: Vec<Vec<String>> = self
                .uncertainty
                .iter()
                .map(|r| {
                    let mut row = vec![r.uncertainty.clone()];
                    row.extend(r.sparsification.iter().map(MeanSd::to_string));
                    row
                })
                .collect();
            files.push(("sparsification.csv", csv_bytes(&prov, &["Uncertainty", "25", "50", "75", "100"], &rows)?));
            let rows: Vec<Vec<String>> = self
                .uncertainty
                .iter()
                .map(|r| vec![r.uncertainty.clone(), r.pearson.to_string(), r.spearman.to_string()])
                .collect();
            files.push(("correlation.csv", csv_bytes(&prov, &["Uncertainty", "Pearson (sd)", "Spearman (sd)"], &rows)?));
        }
        if !self.calibration.is_empty() {
            let mut rows = Vec::new();
            for (name, cal) in &self.calibration {
                for (i, b) in cal.bins.iter().enumerate() {
                    rows.push(vec![
                        name.clone(),
                        (i + 1).to_string(),
                        b.count.to_string(),
                        format!("{:.6}", b.mean_sigma),
                        format!("{:.6}", b.mean_abs_error),
                    ]);
                }
            }
            let header = ["Uncertainty", "Bin", "n", "mean sd", "mean abs error"];
            files.push(("calibration.csv", csv_bytes(&prov, &header, &rows)?));
        }
        if let Some(s) = &self.stratified {
            let mut rows = Vec::new();
            for (kind, strata) in [("age", &s.by_age), ("sex", &s.by_sex)] {
                for st in strata {
                    rows.push(vec![kind.to_string(), st.label.clone(), st.n.to_string(), opt(st.mae), opt(st.target_sd)]);
                }
            }
            let header = ["Stratum kind", "Stratum", "n", "MAE", "Target sd"];
            files.push(("stratified.csv", csv_bytes(&prov, &header, &rows)?));
        }
        if !self.ood.is_empty() {
            let rows: Vec<Vec<String>> = self
                .ood
                .iter()
                .map(|r| {
                    vec![
                        r.condition.clone(),
                        r.mae.to_string(),
                        r.aleatoric.to_string(),
                        r.epistemic_ensemble.to_string(),
                        r.epistemic_laplace.to_string(),
                    ]
                })
                .collect();
            let header = ["Condition", "MAE", "Aleatoric Gaussian", "Epistemic ensemble", "Epistemic Laplace"];
            files.push(("ood.csv", csv_bytes(&prov, &header, &rows)?));
        }
        for (name, bytes) in files {
            atomic_write(&dir.join(name), &bytes)?;
        }
        atomic_write(&dir.join("summary.txt"), self.summary().as_bytes())
    }

    /// Human-readable structured text with the same content.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[report]\nconfig_hash = {}\nversion = {}\nseeds = {}", self.config_hash, self.version, self.n_seeds);
        for r in &self.regression {
            let _ = writeln!(
                s,
                "\n[regression.{}.{}]\nMSE = {}\nMAE = {}\ntarget_variance = {:.4}\nnormalized_MSE = {}",
                r.electrolyte, r.split, r.mse, r.mae, r.target_variance, r.nmse
            );
        }
        if !self.auroc.is_empty() {
            let _ = writeln!(s, "\n[auroc]");
            for r in &self.auroc {
                let t = r.threshold.map_or_else(|| "macro".to_string(), |t| format!("t{t}"));
                let _ = writeln!(s, "{}.k{}.{} = {}", r.task, r.k, t, r.auroc);
            }
        }
        for r in &self.uncertainty {
            let _ = writeln!(s, "\n[uncertainty.{}]", r.uncertainty.replace(' ', "_"));
            for (f, v) in [25, 50, 75, 100].iter().zip(&r.sparsification) {
                let _ = writeln!(s, "MAE_at_{f} = {v}");
            }
            let _ = writeln!(s, "pearson = {}\nspearman = {}", r.pearson, r.spearman);
        }
        for (name, cal) in &self.calibration {
            let _ = writeln!(s, "\n[calibration.{}]\ncoverage_2sd = {:.4}\nbins = {}", name.replace(' ', "_"), cal.coverage_2sigma, cal.bins.len());
        }
        if let Some(st) = &self.stratified {
            let empty = st.empty_strata();
            let _ = writeln!(s, "\n[stratified]\nempty_strata = {empty:?}");
        }
        for r in &self.ood {
            let _ = writeln!(
                s,
                "\n[ood.{}]\nMAE = {}\naleatoric = {}\nepistemic_ensemble = {}\nepistemic_laplace = {}",
                r.condition.replace(' ', "_"),
                r.mae,
                r.aleatoric,
                r.epistemic_ensemble,
                r.epistemic_laplace
            );
        }
        s
    }
}
