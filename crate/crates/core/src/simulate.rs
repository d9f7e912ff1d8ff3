//! Replication studies comparing split-based estimators on simulated GLM data.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{mle_fit, WaldInterval};
use crate::glm::{Dataset, FamilyKind, GlmFamily};
use crate::rng::{self, tag, SimRng};
use crate::split::{split_variance, MultiSplitConfig, SplitWorker, MLE_MAX_ITER, MLE_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Correlation {
    /// `Sigma_jk = rho^|j-k|`.
    Ar1 { rho: f64 },
    /// `Sigma_jk = rho` off the diagonal.
    CompoundSymmetry { rho: f64 },
}

impl Correlation {
    fn rho(&self) -> f64 {
        match *self {
            Correlation::Ar1 { rho } | Correlation::CompoundSymmetry { rho } => rho,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    DebiasedSs,
    MleSs,
    DebiasedMs,
    MleMs,
    /// Maximum likelihood on the true support, estimation half only.
    OracleN2,
    /// Maximum likelihood on the true support, full sample.
    OracleN,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::DebiasedSs,
        Estimator::MleSs,
        Estimator::DebiasedMs,
        Estimator::MleMs,
        Estimator::OracleN2,
        Estimator::OracleN,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Estimator::DebiasedSs => "Debiased SS",
            Estimator::MleSs => "MLE SS",
            Estimator::DebiasedMs => "Debiased MS",
            Estimator::MleMs => "MLE MS",
            Estimator::OracleN2 => "Oracle (n2)",
            Estimator::OracleN => "Oracle (n)",
        }
    }

    fn is_multi_split(&self) -> bool {
        matches!(self, Estimator::DebiasedMs | Estimator::MleMs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Each target `j` is estimated in the selected model augmented by `j`.
    PerCoefficientAugmented,
    /// One fit on the selected model; unselected targets get estimate and
    /// standard error zero.
    PostSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub family: FamilyKind,
    pub corr: Correlation,
    pub truncation: f64,
    pub s0: usize,
    pub beta_values: Vec<f64>,
    /// Seed fixing the placement of the signals and noise targets.
    pub signal_seed: u64,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default = "default_noise_targets")]
    pub n_noise_targets: usize,
    pub n_reps: usize,
    #[serde(rename = "B", alias = "n_splits")]
    pub n_splits: usize,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    pub estimators: Vec<Estimator>,
    pub target_mode: TargetMode,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
}

fn default_noise_targets() -> usize {
    2
}
fn default_q() -> f64 {
    0.5
}
fn default_level() -> f64 {
    0.95
}
fn default_k_folds() -> usize {
    10
}

/// Names accepted by [`SimConfig::preset`].
pub const PRESETS: [&str; 7] = [
    "table1",
    "table1_desk",
    "table2",
    "table3",
    "tableE1",
    "tableE2",
    "tableE3",
];

impl SimConfig {
    /// Logistic AR(1) 0.5 design with n = 500, p = 700 and every estimator.
    pub fn table1() -> Self {
        Self {
            n: 500,
            p: 700,
            family: FamilyKind::Binomial,
            corr: Correlation::Ar1 { rho: 0.5 },
            truncation: 3.0,
            s0: 6,
            beta_values: vec![-1.5, -1.0, -0.5, 0.5, 1.0, 1.5],
            signal_seed: 20_230_601,
            intercept: 0.0,
            n_noise_targets: 2,
            n_reps: 500,
            n_splits: 1000,
            q: 0.5,
            level: 0.95,
            estimators: Estimator::ALL.to_vec(),
            target_mode: TargetMode::PerCoefficientAugmented,
            k_folds: 10,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let post = vec![Estimator::DebiasedSs, Estimator::MleSs, Estimator::OracleN2];
        let base = Self::table1();
        Ok(match name {
            "table1" => base,
            "table1_desk" => Self {
                n: 200,
                p: 300,
                n_splits: 200,
                n_reps: 100,
                ..base
            },
            "table2" => Self {
                corr: Correlation::CompoundSymmetry { rho: 0.5 },
                ..base
            },
            "table3" => Self {
                estimators: post,
                target_mode: TargetMode::PostSelection,
                ..base
            },
            "tableE1" => Self {
                n: 2000,
                p: 2800,
                estimators: post,
                target_mode: TargetMode::PostSelection,
                ..base
            },
            "tableE2" => Self {
                corr: Correlation::Ar1 { rho: 0.8 },
                ..base
            },
            "tableE3" => Self {
                corr: Correlation::CompoundSymmetry { rho: 0.8 },
                ..base
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Parse a TOML document; errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::invalid(format!("config key '{}': {}", e.path(), e.inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn family(&self) -> GlmFamily {
        GlmFamily::new(self.family)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        let rho = self.corr.rho();
        if !(0.0..1.0).contains(&rho) {
            return bad(format!("corr.rho = {rho} outside [0, 1)"));
        }
        if !(self.truncation > 0.0) {
            return bad(format!("truncation = {} must be positive", self.truncation));
        }
        if self.beta_values.len() != self.s0 {
            return bad(format!(
                "beta_values has {} entries but s0 = {}",
                self.beta_values.len(),
                self.s0
            ));
        }
        if self.beta_values.iter().any(|b| !b.is_finite()) || !self.intercept.is_finite() {
            return bad("beta_values and intercept must be finite".into());
        }
        if self.s0 + self.n_noise_targets > self.p {
            return bad(format!(
                "s0 + n_noise_targets = {} exceeds p = {}",
                self.s0 + self.n_noise_targets,
                self.p
            ));
        }
        if self.s0 + self.n_noise_targets == 0 {
            return bad("no target coefficients: s0 and n_noise_targets are both zero".into());
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("q = {} outside (0, 1)", self.q));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level = {} outside (0, 1)", self.level));
        }
        if self.n_reps == 0 || self.n_splits == 0 {
            return bad("n_reps and B must be positive".into());
        }
        if self.k_folds < 2 {
            return bad("k_folds must be at least 2".into());
        }
        if self.estimators.is_empty() {
            return bad("estimators is empty".into());
        }
        if self.target_mode == TargetMode::PostSelection
            && self.estimators.iter().any(Estimator::is_multi_split)
        {
            return bad("multiple-split estimators need target_mode = per_coefficient_augmented".into());
        }
        let n1 = (self.q * self.n as f64).floor() as usize;
        if n1 < 2 || n1 + 2 > self.n {
            return bad(format!("n = {} too small to split with q = {}", self.n, self.q));
        }
        Ok(())
    }

    fn split_config(&self, seed: u64) -> MultiSplitConfig {
        MultiSplitConfig {
            q: self.q,
            n_splits: self.n_splits,
            seed,
            level: self.level,
            k_folds: self.k_folds,
            ..MultiSplitConfig::default()
        }
    }
}

/// True coefficients and the target coefficients of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalLayout {
    /// Signal covariates (1-based), paired with `beta_values`.
    pub signals: Vec<usize>,
    pub noise_targets: Vec<usize>,
    /// Signals and noise targets ordered by true value, then index.
    pub targets: Vec<usize>,
    /// Intercept first, length `p + 1`.
    pub beta: Array1<f64>,
}

impl SignalLayout {
    pub fn new(config: &SimConfig) -> Self {
        let mut rng = rng::substream(config.signal_seed, &[tag::SIGNALS]);
        let picked: Vec<usize> = index::sample(&mut rng, config.p, config.s0 + config.n_noise_targets)
            .into_iter()
            .map(|i| i + 1)
            .collect();
        let signals = picked[..config.s0].to_vec();
        let noise_targets = picked[config.s0..].to_vec();
        let mut beta = Array1::zeros(config.p + 1);
        beta[0] = config.intercept;
        for (&j, &b) in signals.iter().zip(&config.beta_values) {
            beta[j] = b;
        }
        let mut targets = picked;
        targets.sort_by(|&a, &b| beta[a].total_cmp(&beta[b]).then(a.cmp(&b)));
        Self {
            signals,
            noise_targets,
            targets,
            beta,
        }
    }

    pub fn support(&self) -> Vec<usize> {
        let mut s = self.signals.clone();
        s.sort_unstable();
        s
    }
}

/// `n x p` covariates: rows drawn from `N(0, Sigma)` then clamped to
/// `[-truncation, truncation]`.
pub fn gen_covariates(
    n: usize,
    p: usize,
    corr: Correlation,
    truncation: f64,
    rng: &mut SimRng,
) -> Result<Array2<f64>> {
    let rho = corr.rho();
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("correlation {rho} outside [0, 1)")));
    }
    let mut x = Array2::zeros((n, p));
    for mut row in x.rows_mut() {
        match corr {
            Correlation::Ar1 { rho } => {
                let innov = (1.0 - rho * rho).sqrt();
                let mut prev: f64 = 0.0;
                for (j, v) in row.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    prev = if j == 0 { z } else { rho * prev + innov * z };
                    *v = prev;
                }
            }
            Correlation::CompoundSymmetry { rho } => {
                let u: f64 = rng.sample(StandardNormal);
                let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = a * u + b * z;
                }
            }
        }
    }
    x.mapv_inplace(|v| v.clamp(-truncation, truncation));
    Ok(x)
}

/// Responses from the canonical-link model with design `x` (intercept
/// column included) and coefficients `beta`.
pub fn gen_response(
    family: &GlmFamily,
    x: &Array2<f64>,
    beta: ArrayView1<f64>,
    rng: &mut SimRng,
) -> Result<Array1<f64>> {
    if x.ncols() != beta.len() {
        return Err(Error::DimensionMismatch {
            what: "coefficients",
            expected: x.ncols(),
            found: beta.len(),
        });
    }
    let eta = x.dot(&beta);
    eta.iter()
        .map(|&a| {
            Ok(match family.kind {
                FamilyKind::Gaussian => a + family.dispersion.sqrt() * rng.sample::<f64, _>(StandardNormal),
                FamilyKind::Binomial => f64::from(rng.random::<f64>() < family.mean(a)),
                FamilyKind::Poisson => {
                    let mu = family.mean(a);
                    if mu > 0.0 {
                        Poisson::new(mu)
                            .map_err(|e| Error::invalid(format!("poisson mean {mu}: {e}")))?
                            .sample(rng)
                    } else {
                        0.0
                    }
                }
            })
        })
        .collect()
}

/// Replication `rep_seed`'s dataset.
pub fn simulate_dataset(config: &SimConfig, layout: &SignalLayout, rep_seed: u64) -> Result<Dataset> {
    let cov = gen_covariates(
        config.n,
        config.p,
        config.corr,
        config.truncation,
        &mut rng::substream(rep_seed, &[tag::COVARIATES]),
    )?;
    let data = Dataset::from_covariates(Array1::zeros(config.n), &cov, None)?;
    let y = gen_response(
        &config.family(),
        data.x(),
        layout.beta.view(),
        &mut rng::substream(rep_seed, &[tag::RESPONSE]),
    )?;
    Dataset::new(y, data.x().clone(), data.column_names().to_vec())
}

pub fn replication_seed(master_seed: u64, rep: usize) -> u64 {
    rng::derive_seed(master_seed, &[tag::REPLICATION, rep as u64])
}

/// Estimate and standard error.
type Est = (f64, f64);

/// What one successful split contributes for every target.
struct SplitRecord {
    row: Vec<u8>,
    estimation_rows: Vec<usize>,
    debiased: Vec<Est>,
    mle: Vec<Est>,
    active_set: Vec<usize>,
}

fn split_record(
    config: &SimConfig,
    data: &Dataset,
    msc: &MultiSplitConfig,
    targets: &[usize],
    b: usize,
    attempt: usize,
) -> Result<SplitRecord> {
    let family = config.family();
    let mut w = SplitWorker::new(family, data, msc, b, attempt)?;
    let want_dl = config
        .estimators
        .iter()
        .any(|e| matches!(e, Estimator::DebiasedSs | Estimator::DebiasedMs));
    let want_mle = config
        .estimators
        .iter()
        .any(|e| matches!(e, Estimator::MleSs | Estimator::MleMs));
    let mut debiased = Vec::new();
    let mut mle = Vec::new();
    let dropped = |j: usize, model: &[usize]| Error::SplitEstimation {
        selected: model.to_vec(),
        reason: format!("target column {j} was dropped as collinear"),
    };
    match config.target_mode {
        TargetMode::PerCoefficientAugmented => {
            for &j in targets {
                let model = w.selected(&[j]);
                if want_dl {
                    let fit = w.debiased(&model)?;
                    match (fit.coef_for(j), fit.std_err_for(j)) {
                        (Some(c), Some(s)) => debiased.push((c, s)),
                        _ => return Err(dropped(j, &model)),
                    }
                }
                if want_mle {
                    let fit = w.mle(&model)?;
                    let pos = 1 + model.binary_search(&j).expect("target in model");
                    match (fit.coef(pos), fit.std_err(pos)) {
                        (Some(c), Some(s)) => mle.push((c, s)),
                        _ => return Err(dropped(j, &model)),
                    }
                }
            }
        }
        TargetMode::PostSelection => {
            let model = w.selected(&[]);
            if want_dl {
                let fit = w.debiased(&model)?;
                for &j in targets {
                    debiased.push(match (fit.coef_for(j), fit.std_err_for(j)) {
                        (Some(c), Some(s)) if j > 0 => (c, s),
                        _ => (0.0, 0.0),
                    });
                }
            }
            if want_mle {
                let fit = w.mle(&model)?;
                for &j in targets {
                    let est = model
                        .binary_search(&j)
                        .ok()
                        .and_then(|k| Some((fit.coef(k + 1)?, fit.std_err(k + 1)?)));
                    mle.push(est.unwrap_or((0.0, 0.0)));
                }
            }
        }
    }
    Ok(SplitRecord {
        row: std::mem::take(&mut w.row),
        estimation_rows: std::mem::take(&mut w.estimation_rows),
        debiased,
        mle,
        active_set: w.selection.active_set.clone(),
    })
}

/// Outcome of one replication.
#[derive(Debug, Clone)]
struct RepOutcome {
    /// `estimates[e][t]` for estimator `e` of the config and target `t`.
    estimates: Vec<Vec<Est>>,
    selected: Vec<bool>,
    selected_size: usize,
    failed_splits: usize,
    clamped: usize,
}

fn oracle(
    family: &GlmFamily,
    data: &Dataset,
    rows: Option<&[usize]>,
    support: &[usize],
    targets: &[usize],
    mode: TargetMode,
) -> Result<Vec<Est>> {
    let fit_on = |model: &[usize]| -> Result<Vec<Est>> {
        let sub = data.submodel(rows, model)?;
        let fit = mle_fit(family, &sub, None, MLE_MAX_ITER, MLE_TOL)?;
        Ok((1..=model.len())
            .map(|k| (fit.coef(k).unwrap_or(0.0), fit.std_err(k).unwrap_or(0.0)))
            .collect())
    };
    match mode {
        TargetMode::PerCoefficientAugmented => targets
            .iter()
            .map(|&j| {
                let mut model = support.to_vec();
                if let Err(k) = model.binary_search(&j) {
                    model.insert(k, j);
                }
                let pos = model.binary_search(&j).expect("inserted");
                Ok(fit_on(&model)?[pos])
            })
            .collect(),
        TargetMode::PostSelection => {
            let ests = fit_on(support)?;
            Ok(targets
                .iter()
                .map(|&j| support.binary_search(&j).map(|k| ests[k]).unwrap_or((0.0, 0.0)))
                .collect())
        }
    }
}

fn run_replication(config: &SimConfig, layout: &SignalLayout, rep_seed: u64) -> Result<RepOutcome> {
    let data = simulate_dataset(config, layout, rep_seed)?;
    let family = config.family();
    let msc = config.split_config(rep_seed);
    let targets = &layout.targets;
    let needs_ms = config.estimators.iter().any(Estimator::is_multi_split);
    let needs_split = config
        .estimators
        .iter()
        .any(|e| !matches!(e, Estimator::OracleN));
    let n_run = if needs_ms { config.n_splits } else { usize::from(needs_split) };
    let allowed = msc.allowed_failures();

    let records: Vec<Result<(SplitRecord, usize)>> = (0..n_run)
        .into_par_iter()
        .map(|b| {
            let mut failures = 0;
            loop {
                match split_record(config, &data, &msc, targets, b, failures) {
                    Ok(r) => return Ok((r, failures)),
                    Err(e) => {
                        failures += 1;
                        if failures > allowed {
                            return Err(e);
                        }
                    }
                }
            }
        })
        .collect();
    let mut splits = Vec::with_capacity(n_run);
    let mut failed_splits = 0;
    for r in records {
        let (rec, f) = r?;
        failed_splits += f;
        splits.push(rec);
    }
    if failed_splits > allowed {
        return Err(Error::TooManyFailedSplits {
            failed: failed_splits,
            requested: config.n_splits,
            allowed,
            last: "estimation failed on too many splits".into(),
        });
    }

    let ms = |pick: &dyn Fn(&SplitRecord) -> &Vec<Est>| -> Result<(Vec<Est>, usize)> {
        let b = splits.len();
        let mut ind = Array2::<u8>::zeros((b, config.n));
        for (r, s) in splits.iter().enumerate() {
            ind.row_mut(r).assign(&ArrayView1::from(&s.row));
        }
        let n2 = splits[0].estimation_rows.len();
        let per = Array2::from_shape_fn((b, targets.len()), |(r, t)| pick(&splits[r])[t].0);
        let mean = per.mean_axis(Axis(0)).expect("nonempty");
        let var = split_variance(per.view(), ind.view(), n2)?;
        let clamped = var.clamped.iter().filter(|&&c| c).count();
        Ok((
            mean.iter().zip(var.variance.iter()).map(|(&m, &v)| (m, v.sqrt())).collect(),
            clamped,
        ))
    };

    let support = layout.support();
    let mut clamped = 0;
    let mut estimates = Vec::with_capacity(config.estimators.len());
    for e in &config.estimators {
        estimates.push(match e {
            Estimator::DebiasedSs => splits[0].debiased.clone(),
            Estimator::MleSs => splits[0].mle.clone(),
            Estimator::DebiasedMs | Estimator::MleMs => {
                let (v, c) = if *e == Estimator::DebiasedMs {
                    ms(&|s| &s.debiased)?
                } else {
                    ms(&|s| &s.mle)?
                };
                clamped += c;
                v
            }
            Estimator::OracleN2 => oracle(
                &family,
                &data,
                Some(&splits[0].estimation_rows),
                &support,
                targets,
                config.target_mode,
            )?,
            Estimator::OracleN => oracle(&family, &data, None, &support, targets, config.target_mode)?,
        });
    }
    let (selected, selected_size) = match splits.first() {
        Some(s) => (
            targets.iter().map(|j| s.active_set.binary_search(j).is_ok()).collect(),
            s.active_set.len(),
        ),
        None => (vec![false; targets.len()], 0),
    };
    Ok(RepOutcome {
        estimates,
        selected,
        selected_size,
        failed_splits,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub index: usize,
    pub name: String,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: Estimator,
    /// One entry per target, in `MetricsTable::targets` order.
    pub bias: Vec<f64>,
    pub coverage: Vec<f64>,
    pub rejection_rate: Vec<f64>,
    pub mean_std_err: Vec<f64>,
    pub empirical_sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetadata {
    pub config: SimConfig,
    pub master_seed: u64,
    pub signals: Vec<usize>,
    pub n_reps_completed: usize,
    pub n_reps_failed: usize,
    /// Messages of failed replications, in replication order.
    pub failures: Vec<String>,
    /// Mean lasso active-set size in the single split.
    pub mean_selected_size: f64,
    pub n_failed_splits: usize,
    /// Multi-split variances floored at zero, summed over replications.
    pub n_clamped_variances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub targets: Vec<TargetInfo>,
    pub selection_rate: Vec<f64>,
    pub estimators: Vec<EstimatorMetrics>,
    pub metadata: StudyMetadata,
}

impl MetricsTable {
    pub fn get(&self, estimator: Estimator) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.estimator == estimator)
    }

    /// Rows: true value, selection rate, then each metric for each
    /// estimator. Columns: one per target.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\testimator");
        for t in &self.targets {
            write!(out, "\t{}", t.name).unwrap();
        }
        out.push('\n');
        let mut line = |metric: &str, est: &str, vals: &[f64]| {
            write!(out, "{metric}\t{est}").unwrap();
            for v in vals {
                write!(out, "\t{v:.4}").unwrap();
            }
            out.push('\n');
        };
        let truth: Vec<f64> = self.targets.iter().map(|t| t.beta).collect();
        line("True Value", "", &truth);
        line("Selection Rate", "", &self.selection_rate);
        type Getter = fn(&EstimatorMetrics) -> &Vec<f64>;
        let metrics: [(&str, Getter); 5] = [
            ("Bias", |m| &m.bias),
            ("Coverage", |m| &m.coverage),
            ("Rejection Rate", |m| &m.rejection_rate),
            ("Standard Error", |m| &m.mean_std_err),
            ("Empirical SD", |m| &m.empirical_sd),
        ];
        for (name, get) in metrics {
            for m in &self.estimators {
                line(name, m.estimator.label(), get(m));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

fn summarize(
    config: &SimConfig,
    layout: &SignalLayout,
    master_seed: u64,
    outcomes: Vec<Result<RepOutcome>>,
) -> Result<MetricsTable> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => ok.push(o),
            Err(e) => failures.push(format!("replication {rep}: {e}")),
        }
    }
    if ok.is_empty() {
        return Err(Error::invalid(format!(
            "all {} replications failed; first: {}",
            failures.len(),
            failures.first().map(String::as_str).unwrap_or("")
        )));
    }
    let r = ok.len() as f64;
    let nt = layout.targets.len();
    let truth: Vec<f64> = layout.targets.iter().map(|&j| layout.beta[j]).collect();
    let mut estimators = Vec::new();
    for (e, &est) in config.estimators.iter().enumerate() {
        let mut m = EstimatorMetrics {
            estimator: est,
            bias: vec![0.0; nt],
            coverage: vec![0.0; nt],
            rejection_rate: vec![0.0; nt],
            mean_std_err: vec![0.0; nt],
            empirical_sd: vec![0.0; nt],
        };
        for t in 0..nt {
            let vals: Vec<f64> = ok.iter().map(|o| o.estimates[e][t].0).collect();
            let mean = vals.iter().sum::<f64>() / r;
            let mut covered = 0usize;
            let mut rejected = 0usize;
            let mut se_sum = 0.0;
            for o in &ok {
                let (b, s) = o.estimates[e][t];
                let w = WaldInterval::new(b, s, config.level)?;
                covered += usize::from(w.covers(truth[t]));
                rejected += usize::from(w.rejects_zero());
                se_sum += s;
            }
            m.bias[t] = mean - truth[t];
            m.coverage[t] = covered as f64 / r;
            m.rejection_rate[t] = rejected as f64 / r;
            m.mean_std_err[t] = se_sum / r;
            m.empirical_sd[t] = if ok.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
            } else {
                0.0
            };
        }
        estimators.push(m);
    }
    let selection_rate = (0..nt)
        .map(|t| ok.iter().filter(|o| o.selected[t]).count() as f64 / r)
        .collect();
    let names: Vec<String> = std::iter::once("(Intercept)".to_string())
        .chain((1..=config.p).map(|j| format!("x{j}")))
        .collect();
    Ok(MetricsTable {
        targets: layout
            .targets
            .iter()
            .zip(&truth)
            .map(|(&j, &b)| TargetInfo {
                index: j,
                name: names[j].clone(),
                beta: b,
            })
            .collect(),
        selection_rate,
        estimators,
        metadata: StudyMetadata {
            config: config.clone(),
            master_seed,
            signals: layout.signals.clone(),
            n_reps_completed: ok.len(),
            n_reps_failed: failures.len(),
            failures,
            mean_selected_size: ok.iter().map(|o| o.selected_size as f64).sum::<f64>() / r,
            n_failed_splits: ok.iter().map(|o| o.failed_splits).sum(),
            n_clamped_variances: ok.iter().map(|o| o.clamped).sum(),
        },
    })
}

/// Run every replication of `config` and tabulate the metrics. Replication
/// `r` uses the substream `(master_seed, r)`, so raising `n_reps` extends a
/// study without changing earlier replications.
pub fn run_study(config: &SimConfig, master_seed: u64) -> Result<MetricsTable> {
    config.validate()?;
    let layout = SignalLayout::new(config);
    let outcomes: Vec<Result<RepOutcome>> = (0..config.n_reps)
        .into_par_iter()
        .map(|rep| run_replication(config, &layout, replication_seed(master_seed, rep)))
        .collect();
    summarize(config, &layout, master_seed, outcomes)
}
