//! Analysis reports for fitted split estimators.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::glm::{Dataset, FamilyKind};
use crate::split::{holm_adjust, MultiSplitConfig, MultiSplitResult, SingleSplitFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    /// Column index in the dataset (0 is the intercept).
    pub index: usize,
    pub estimate: f64,
    pub std_err: f64,
    pub p_value: f64,
    /// Holm-adjusted over the covariate rows; the intercept keeps its raw
    /// p-value.
    pub p_adjusted: f64,
    pub lower: f64,
    pub upper: f64,
    /// `exp` of estimate and bounds: odds ratios for binomial, rate ratios
    /// for poisson, absent for gaussian.
    pub exp_estimate: Option<f64>,
    pub exp_lower: Option<f64>,
    pub exp_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// `multi_split` or `single_split`.
    pub method: String,
    pub family: FamilyKind,
    pub seed: u64,
    pub q: f64,
    #[serde(rename = "B")]
    pub n_splits: usize,
    pub level: f64,
    pub n: usize,
    pub p: usize,
    pub n_failed_splits: usize,
    /// Mean size of the lasso active set over splits.
    pub mean_selected_size: f64,
    pub variance_clamped: Vec<String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub coefficients: Vec<CoefficientRow>,
    pub metadata: ReportMetadata,
}

fn rows(
    family: FamilyKind,
    entries: Vec<(String, usize, crate::estimate::WaldInterval)>,
) -> Result<Vec<CoefficientRow>> {
    // the intercept is reported but not part of the tested family
    let raw: Vec<f64> = entries.iter().filter(|e| e.1 != 0).map(|e| e.2.p_value).collect();
    let mut adj = holm_adjust(&raw)?.into_iter();
    let expo = family != FamilyKind::Gaussian;
    Ok(entries
        .into_iter()
        .map(|(name, index, w)| {
            let p_adjusted = if index == 0 { w.p_value } else { adj.next().expect("one per covariate") };
            (name, index, w, p_adjusted)
        })
        .map(|(name, index, w, p_adjusted)| CoefficientRow {
            name,
            index,
            estimate: w.estimate,
            std_err: w.std_err,
            p_value: w.p_value,
            p_adjusted,
            lower: w.lower,
            upper: w.upper,
            exp_estimate: expo.then(|| w.estimate.exp()),
            exp_lower: expo.then(|| w.lower.exp()),
            exp_upper: expo.then(|| w.upper.exp()),
        })
        .collect())
}

impl AnalysisReport {
    pub fn from_multi_split(
        data: &Dataset,
        family: FamilyKind,
        result: &MultiSplitResult,
        config: &MultiSplitConfig,
        wall_time_secs: f64,
    ) -> Result<Self> {
        let labels = result.labels(data);
        let idx: Vec<usize> = std::iter::once(0).chain(result.target_set.iter().copied()).collect();
        let intervals = result.intervals(config.level)?;
        let entries = labels
            .into_iter()
            .zip(idx)
            .zip(intervals)
            .map(|((l, i), w)| (l, i, w))
            .collect();
        let clamped = result
            .labels(data)
            .into_iter()
            .zip(&result.variance_clamped)
            .filter(|(_, &c)| c)
            .map(|(l, _)| l)
            .collect();
        let sizes = &result.selected_sizes;
        Ok(Self {
            coefficients: rows(family, entries)?,
            metadata: ReportMetadata {
                method: "multi_split".into(),
                family,
                seed: config.seed,
                q: config.q,
                n_splits: config.n_splits,
                level: config.level,
                n: data.n(),
                p: data.p(),
                n_failed_splits: result.n_failed,
                mean_selected_size: sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
                variance_clamped: clamped,
                wall_time_secs,
            },
        })
    }

    pub fn from_single_split(
        data: &Dataset,
        family: FamilyKind,
        fit: &SingleSplitFit,
        config: &MultiSplitConfig,
        wall_time_secs: f64,
    ) -> Result<Self> {
        let entries = fit
            .intervals
            .iter()
            .map(|&(j, w)| (data.column_names()[j].clone(), j, w))
            .collect();
        Ok(Self {
            coefficients: rows(family, entries)?,
            metadata: ReportMetadata {
                method: "single_split".into(),
                family,
                seed: config.seed,
                q: config.q,
                n_splits: 1,
                level: config.level,
                n: data.n(),
                p: data.p(),
                n_failed_splits: 0,
                mean_selected_size: fit.selection.active_set.len() as f64,
                variance_clamped: Vec::new(),
                wall_time_secs,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table rounded to two decimals; p-values below 0.01 in
    /// scientific notation.
    pub fn to_table(&self) -> String {
        let m = &self.metadata;
        let pct = (m.level * 100.0).round();
        let ratio = match m.family {
            FamilyKind::Binomial => Some("Odds Ratio"),
            FamilyKind::Poisson => Some("Rate Ratio"),
            FamilyKind::Gaussian => None,
        };
        let width = self
            .coefficients
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max(9);
        let mut out = String::new();
        write!(
            out,
            "{:<width$}  {:>8}  {:>6}  {:>9}  {:>9}  {:>18}",
            "Covariate", "Estimate", "SE", "P-value", "Holm P", format!("{pct}% CI")
        )
        .unwrap();
        if let Some(r) = ratio {
            write!(out, "  {r} ({pct}% CI)").unwrap();
        }
        out.push('\n');
        for c in &self.coefficients {
            write!(
                out,
                "{:<width$}  {:>8.2}  {:>6.2}  {:>9}  {:>9}  {:>18}",
                c.name,
                c.estimate,
                c.std_err,
                fmt_p(c.p_value),
                fmt_p(c.p_adjusted),
                format!("({:.2}, {:.2})", c.lower, c.upper)
            )
            .unwrap();
            if let (Some(e), Some(l), Some(u)) = (c.exp_estimate, c.exp_lower, c.exp_upper) {
                write!(out, "  {e:.2} ({l:.2}, {u:.2})").unwrap();
            }
            out.push('\n');
        }
        writeln!(
            out,
            "\nmethod={} family={} n={} p={} q={} B={} seed={} failed_splits={} mean_selected={:.1} time={:.1}s",
            m.method,
            m.family,
            m.n,
            m.p,
            m.q,
            m.n_splits,
            m.seed,
            m.n_failed_splits,
            m.mean_selected_size,
            m.wall_time_secs
        )
        .unwrap();
        if !m.variance_clamped.is_empty() {
            writeln!(out, "warning: variance floored for {}", m.variance_clamped.join(", ")).unwrap();
        }
        out
    }
}

fn fmt_p(p: f64) -> String {
    if p >= 0.01 {
        format!("{p:.2}")
    } else {
        format!("{p:.2e}")
    }
}
