//! Single and multiple sample splitting.
//!
//! Each split selects a submodel with a cross-validated lasso on the first
//! subsample and fits the refined debiased lasso on the second. With many
//! splits the per-split estimates of a fixed target set are averaged and the
//! variance of the average is estimated from the covariance between the
//! sampling indicators and the per-split estimates, minus a Monte-Carlo
//! correction.
//!
//! Every split draws its randomness from a substream of the master seed keyed
//! by split index and attempt, so results do not depend on the worker count.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{debiased_lasso, mle_fit, DebiasedFit, MleFit, WaldInterval};
use crate::glm::{Dataset, GlmFamily};
use crate::lasso::{cv_lasso, select_model, LassoConfig, LassoFit};
use crate::rng::{self, tag};

/// Floor applied to bias-corrected variances that come out nonpositive.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    /// Fraction of the sample used for selection.
    pub q: f64,
    pub n_splits: usize,
    pub seed: u64,
    /// `n1 = floor(q n)`.
    pub n_select: usize,
    /// `indicators[[b, i]] == 1` iff observation `i` is in the estimation
    /// subsample of split `b`.
    pub indicators: Array2<u8>,
}

impl SplitPlan {
    pub fn n_estimate(&self) -> usize {
        self.n - self.n_select
    }

    pub fn estimation_rows(&self, b: usize) -> Vec<usize> {
        rows_where(self.indicators.row(b).iter(), 1)
    }

    pub fn selection_rows(&self, b: usize) -> Vec<usize> {
        rows_where(self.indicators.row(b).iter(), 0)
    }
}

fn rows_where<'a>(it: impl Iterator<Item = &'a u8>, v: u8) -> Vec<usize> {
    it.enumerate().filter(|(_, &x)| x == v).map(|(i, _)| i).collect()
}

fn split_sizes(n: usize, q: f64) -> Result<usize> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("split fraction q = {q} outside (0, 1)")));
    }
    let n1 = (q * n as f64).floor() as usize;
    if n1 < 2 || n1 + 2 > n {
        return Err(Error::invalid(format!(
            "split of n = {n} with q = {q} gives {n1} selection observations; need 2 <= n1 <= n - 2"
        )));
    }
    Ok(n1)
}

/// Indicator row for split `b`, attempt `attempt`: a uniform subset of size
/// `n_estimate` marks the estimation subsample.
fn draw_row(n: usize, n_estimate: usize, seed: u64, b: usize, attempt: usize) -> Vec<u8> {
    let mut rng = rng::substream(seed, &[tag::PLAN, b as u64, attempt as u64]);
    let mut row = vec![0u8; n];
    for i in index::sample(&mut rng, n, n_estimate) {
        row[i] = 1;
    }
    row
}

pub fn make_plan(n: usize, q: f64, n_splits: usize, seed: u64) -> Result<SplitPlan> {
    let n_select = split_sizes(n, q)?;
    if n_splits == 0 {
        return Err(Error::invalid("at least one split is required"));
    }
    let rows: Vec<Vec<u8>> = (0..n_splits)
        .into_par_iter()
        .map(|b| draw_row(n, n - n_select, seed, b, 0))
        .collect();
    let flat: Vec<u8> = rows.into_iter().flatten().collect();
    Ok(SplitPlan {
        n,
        q,
        n_splits,
        seed,
        n_select,
        indicators: Array2::from_shape_vec((n_splits, n), flat).expect("plan shape"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSplitConfig {
    pub q: f64,
    pub n_splits: usize,
    pub seed: u64,
    pub level: f64,
    /// Folds for both the selection and the estimation-stage lasso.
    pub k_folds: usize,
    pub selection: LassoConfig,
    pub estimation: LassoConfig,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

impl Default for MultiSplitConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            n_splits: 1000,
            seed: 0,
            level: 0.95,
            k_folds: 10,
            selection: LassoConfig::for_splitting(),
            estimation: LassoConfig::for_splitting(),
            threads: None,
        }
    }
}

impl MultiSplitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid(format!("level {} outside (0, 1)", self.level)));
        }
        if self.k_folds < 2 {
            return Err(Error::invalid("k_folds must be at least 2"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be positive"));
        }
        Ok(())
    }

    /// Failed splits tolerated before aborting: a tenth of the splits.
    pub fn allowed_failures(&self) -> usize {
        self.n_splits / 10
    }
}

/// Run `f` on a dedicated pool of `threads` workers, or inline.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Selection stage of one split, reused for every submodel fitted on it.
pub(crate) struct SplitWorker<'a> {
    family: GlmFamily,
    data: &'a Dataset,
    pub(crate) row: Vec<u8>,
    pub(crate) estimation_rows: Vec<usize>,
    pub(crate) selection: LassoFit,
    estimation: &'a LassoConfig,
    k_folds: usize,
    estimation_seed: u64,
    debiased_cache: HashMap<Vec<usize>, Result<DebiasedFit>>,
    mle_cache: HashMap<Vec<usize>, Result<MleFit>>,
}

/// Iteration cap and tolerance for submodel maximum likelihood fits.
pub(crate) const MLE_MAX_ITER: usize = 25;
pub(crate) const MLE_TOL: f64 = 1e-8;

impl<'a> SplitWorker<'a> {
    pub(crate) fn new(
        family: GlmFamily,
        data: &'a Dataset,
        cfg: &'a MultiSplitConfig,
        b: usize,
        attempt: usize,
    ) -> Result<Self> {
        let n1 = split_sizes(data.n(), cfg.q)?;
        let row = draw_row(data.n(), data.n() - n1, cfg.seed, b, attempt);
        let selection_rows = rows_where(row.iter(), 0);
        let estimation_rows = rows_where(row.iter(), 1);
        let d1 = data.subset_rows(&selection_rows);
        let sel_seed = rng::derive_seed(cfg.seed, &[tag::SELECTION_CV, b as u64, attempt as u64]);
        let cv = cv_lasso(&family, &d1, &cfg.selection, cfg.k_folds.min(d1.n()), sel_seed)?;
        Ok(Self {
            family,
            data,
            row,
            estimation_rows,
            selection: cv.fit,
            estimation: &cfg.estimation,
            k_folds: cfg.k_folds,
            estimation_seed: rng::derive_seed(
                cfg.seed,
                &[tag::ESTIMATION_CV, b as u64, attempt as u64],
            ),
            debiased_cache: HashMap::new(),
            mle_cache: HashMap::new(),
        })
    }

    /// `forced` united with the selection-stage active set.
    pub(crate) fn selected(&self, forced: &[usize]) -> Vec<usize> {
        select_model(&self.selection, forced)
    }

    pub(crate) fn debiased(&mut self, model: &[usize]) -> Result<DebiasedFit> {
        if let Some(r) = self.debiased_cache.get(model) {
            return r.clone();
        }
        let r = debiased_lasso(
            &self.family,
            self.data,
            Some(&self.estimation_rows),
            model,
            self.estimation,
            self.k_folds,
            self.estimation_seed,
        )
        .map_err(|e| Error::SplitEstimation {
            selected: model.to_vec(),
            reason: e.to_string(),
        });
        self.debiased_cache.insert(model.to_vec(), r.clone());
        r
    }

    /// Maximum likelihood on the estimation subsample; the fit's positions
    /// follow `model` (intercept at 0).
    pub(crate) fn mle(&mut self, model: &[usize]) -> Result<MleFit> {
        if let Some(r) = self.mle_cache.get(model) {
            return r.clone();
        }
        let r = self
            .data
            .submodel(Some(&self.estimation_rows), model)
            .and_then(|sub| mle_fit(&self.family, &sub, None, MLE_MAX_ITER, MLE_TOL));
        self.mle_cache.insert(model.to_vec(), r.clone());
        r
    }
}

/// Intercept and target coordinates of a debiased fit, or an error naming
/// the first target without an estimate.
fn extract_targets(fit: &DebiasedFit, targets: &[usize]) -> Result<Vec<f64>> {
    std::iter::once(0)
        .chain(targets.iter().copied())
        .map(|j| {
            fit.coef_for(j).ok_or_else(|| Error::SplitEstimation {
                selected: fit.indices.clone(),
                reason: format!("target column {j} was dropped as collinear"),
            })
        })
        .collect()
}

fn validate_targets(data: &Dataset, targets: &[usize]) -> Result<Vec<usize>> {
    let mut s = targets.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&j) = s.iter().find(|&&j| j == 0 || j > data.p()) {
        return Err(Error::invalid(format!(
            "target index {j} outside 1..={} (the intercept is always included)",
            data.p()
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleSplitFit {
    /// Selected model: forced set united with the lasso active set.
    pub selected: Vec<usize>,
    pub selection: LassoFit,
    pub fit: DebiasedFit,
    /// Interval per retained covariate of the selected model, intercept first.
    pub intervals: Vec<(usize, WaldInterval)>,
    pub n_select: usize,
    pub n_estimate: usize,
}

/// Lasso selection on a `q` fraction of the sample, refined debiased lasso
/// on the rest. Uses the same substreams as split 0 of [`multi_split_fit`].
pub fn single_split_fit(
    family: &GlmFamily,
    data: &Dataset,
    forced: &[usize],
    config: &MultiSplitConfig,
) -> Result<SingleSplitFit> {
    config.validate()?;
    data.validate_for(family)?;
    let forced = validate_targets(data, forced)?;
    with_threads(config.threads, || {
        let mut worker = SplitWorker::new(*family, data, config, 0, 0)?;
        let selected = worker.selected(&forced);
        let fit = worker.debiased(&selected)?;
        let intervals = std::iter::once(0)
            .chain(selected.iter().copied())
            .filter_map(|j| fit.interval_for(j, config.level).ok().map(|w| (j, w)))
            .collect();
        Ok(SingleSplitFit {
            selected,
            selection: worker.selection.clone(),
            fit,
            intervals,
            n_select: data.n() - worker.estimation_rows.len(),
            n_estimate: worker.estimation_rows.len(),
        })
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSplitResult {
    pub target_set: Vec<usize>,
    /// Averaged estimates: intercept then targets.
    pub beta_hat: Array1<f64>,
    /// One row per split, same layout as `beta_hat`.
    pub per_split_beta: Array2<f64>,
    pub variance: Array1<f64>,
    pub covariance: Array2<f64>,
    /// Coordinates whose bias-corrected variance was floored.
    pub variance_clamped: Vec<bool>,
    pub n_failed: usize,
    /// Size of the lasso active set in each split.
    pub selected_sizes: Vec<usize>,
    /// Splits actually used, redraws included.
    pub plan: SplitPlan,
}

impl MultiSplitResult {
    pub fn std_errs(&self) -> Array1<f64> {
        self.variance.mapv(f64::sqrt)
    }

    /// Intervals for intercept then targets.
    pub fn intervals(&self, level: f64) -> Result<Vec<WaldInterval>> {
        self.beta_hat
            .iter()
            .zip(self.variance.iter())
            .map(|(&b, &v)| WaldInterval::new(b, v.sqrt(), level))
            .collect()
    }

    /// Column names in `beta_hat` order.
    pub fn labels(&self, data: &Dataset) -> Vec<String> {
        std::iter::once(0)
            .chain(self.target_set.iter().copied())
            .map(|j| data.column_names()[j].clone())
            .collect()
    }
}

/// Per-split outcome: indicator row, extracted coefficients, active-set size
/// and failed attempts before success.
type SplitOutcome = (Vec<u8>, Vec<f64>, usize, usize);

/// Average refined debiased lasso estimates of `targets` over
/// `config.n_splits` random splits.
///
/// A split whose estimation fails is redrawn from a fresh substream; more
/// than a tenth of `n_splits` failures aborts.
pub fn multi_split_fit(
    family: &GlmFamily,
    data: &Dataset,
    targets: &[usize],
    config: &MultiSplitConfig,
) -> Result<MultiSplitResult> {
    config.validate()?;
    data.validate_for(family)?;
    let targets = validate_targets(data, targets)?;
    let n1 = split_sizes(data.n(), config.q)?;
    if config.n_splits == 0 {
        return Err(Error::invalid("at least one split is required"));
    }
    let allowed = config.allowed_failures();

    let outcomes: Vec<Result<SplitOutcome>> = with_threads(config.threads, || {
        (0..config.n_splits)
            .into_par_iter()
            .map(|b| {
                let mut failures = 0;
                loop {
                    let attempt = failures;
                    let res = SplitWorker::new(*family, data, config, b, attempt).and_then(|mut w| {
                        let model = w.selected(&targets);
                        let fit = w.debiased(&model)?;
                        let coefs = extract_targets(&fit, &targets)?;
                        Ok((std::mem::take(&mut w.row), coefs, w.selection.active_set.len()))
                    });
                    match res {
                        Ok((row, coefs, size)) => return Ok((row, coefs, size, failures)),
                        Err(e) => {
                            failures += 1;
                            if failures > allowed {
                                return Err(Error::TooManyFailedSplits {
                                    failed: failures,
                                    requested: config.n_splits,
                                    allowed,
                                    last: e.to_string(),
                                });
                            }
                        }
                    }
                }
            })
            .collect()
    })?;

    let k = targets.len() + 1;
    let mut per_split_beta = Array2::zeros((config.n_splits, k));
    let mut indicators = Array2::zeros((config.n_splits, data.n()));
    let mut selected_sizes = Vec::with_capacity(config.n_splits);
    let mut n_failed = 0;
    let mut last_err = None;
    for (b, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok((row, coefs, size, failures)) => {
                indicators.row_mut(b).assign(&Array1::from(row));
                per_split_beta.row_mut(b).assign(&Array1::from(coefs));
                selected_sizes.push(size);
                n_failed += failures;
            }
            Err(Error::TooManyFailedSplits { failed, last, .. }) => {
                n_failed += failed;
                last_err = Some(last);
            }
            Err(e) => return Err(e),
        }
    }
    if n_failed > allowed || last_err.is_some() {
        return Err(Error::TooManyFailedSplits {
            failed: n_failed,
            requested: config.n_splits,
            allowed,
            last: last_err.unwrap_or_else(|| "see individual splits".into()),
        });
    }
    let plan = SplitPlan {
        n: data.n(),
        q: config.q,
        n_splits: config.n_splits,
        seed: config.seed,
        n_select: n1,
        indicators,
    };
    let beta_hat = per_split_beta.mean_axis(Axis(0)).expect("at least one split");
    let var = multi_split_variance(per_split_beta.view(), &plan)?;
    Ok(MultiSplitResult {
        target_set: targets,
        beta_hat,
        per_split_beta,
        variance: var.variance,
        covariance: var.covariance,
        variance_clamped: var.clamped,
        n_failed,
        selected_sizes,
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitVariance {
    pub variance: Array1<f64>,
    pub covariance: Array2<f64>,
    /// Diagonal before flooring.
    pub raw_variance: Array1<f64>,
    pub clamped: Vec<bool>,
}

/// Bias-corrected variance and covariance of the split average.
pub fn multi_split_variance(per_split_beta: ArrayView2<f64>, plan: &SplitPlan) -> Result<SplitVariance> {
    if per_split_beta.nrows() != plan.indicators.nrows() {
        return Err(Error::DimensionMismatch {
            what: "per-split estimates (rows)",
            expected: plan.indicators.nrows(),
            found: per_split_beta.nrows(),
        });
    }
    split_variance(per_split_beta, plan.indicators.view(), plan.n_estimate())
}

/// [`multi_split_variance`] on an explicit indicator matrix (`B x n`) and
/// estimation-subsample size `n_estimate`.
///
/// With `D_b` the deviation of split `b` from the average and
/// `C_i = B^-1 sum_b (v_bi - vbar_i) D_b`, the covariance is
/// `n (n-1) / (n-n2)^2 sum_i C_i C_i'  -  n n2 / (B^2 (n-n2)) sum_b D_b D_b'`.
pub fn split_variance(
    per_split_beta: ArrayView2<f64>,
    indicators: ArrayView2<u8>,
    n_estimate: usize,
) -> Result<SplitVariance> {
    let (b, k) = per_split_beta.dim();
    let n = indicators.ncols();
    if indicators.nrows() != b {
        return Err(Error::DimensionMismatch {
            what: "indicator rows",
            expected: b,
            found: indicators.nrows(),
        });
    }
    if b == 0 || n_estimate >= n {
        return Err(Error::invalid("need at least one split and n2 < n"));
    }
    let bf = b as f64;
    let nf = n as f64;
    let n2 = n_estimate as f64;
    let mean = per_split_beta.mean_axis(Axis(0)).expect("nonempty");
    let dev = &per_split_beta - &mean.view().insert_axis(Axis(0));
    let v = indicators.mapv(f64::from);
    let vbar = v.mean_axis(Axis(0)).expect("nonempty");
    let vc = &v - &vbar.view().insert_axis(Axis(0));
    // n x k matrix whose row i is C_i
    let c = vc.t().dot(&dev) / bf;
    let mut cov = c.t().dot(&c) * (nf * (nf - 1.0) / ((nf - n2) * (nf - n2)))
        - dev.t().dot(&dev) * (nf * n2 / (bf * bf * (nf - n2)));
    for i in 0..k {
        for j in (i + 1)..k {
            let m = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = m;
            cov[[j, i]] = m;
        }
    }
    let raw_variance = cov.diag().to_owned();
    let mut clamped = vec![false; k];
    let mut variance = Array1::zeros(k);
    for j in 0..k {
        let raw = cov[[j, j]];
        if raw < VARIANCE_FLOOR {
            clamped[j] = true;
            cov[[j, j]] = VARIANCE_FLOOR;
        }
        variance[j] = cov[[j, j]];
    }
    Ok(SplitVariance {
        variance,
        covariance: cov,
        raw_variance,
        clamped,
    })
}

/// Holm step-down adjustment, capped at one.
pub fn holm_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::invalid(format!("p-value {p} is not in [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0_f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p_values[i]).min(1.0));
        adjusted[i] = running;
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn plan_rows_have_estimation_size() {
        let plan = make_plan(6, 0.5, 1, 42).unwrap();
        assert_eq!(plan.indicators.row(0).iter().map(|&v| v as usize).sum::<usize>(), 3);
        assert_eq!(plan.estimation_rows(0).len(), 3);
        assert_eq!(plan.selection_rows(0).len(), 3);
        let again = make_plan(6, 0.5, 1, 42).unwrap();
        assert_eq!(plan, again);
        let odd = make_plan(11, 0.5, 3, 1).unwrap();
        assert_eq!(odd.n_select, 5);
        assert_eq!(odd.n_estimate(), 6);
    }

    #[test]
    fn infeasible_plans_are_rejected() {
        assert!(make_plan(3, 0.5, 1, 0).is_err());
        assert!(make_plan(10, 0.1, 1, 0).is_err());
        assert!(make_plan(10, 0.95, 1, 0).is_err());
        assert!(make_plan(10, 1.0, 1, 0).is_err());
        assert!(make_plan(10, 0.5, 0, 0).is_err());
    }

    #[test]
    fn identical_splits_give_zero_variance() {
        let plan = make_plan(8, 0.5, 4, 3).unwrap();
        let per = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 + 0.5);
        let v = multi_split_variance(per.view(), &plan).unwrap();
        assert!(v.covariance.iter().enumerate().all(|(i, &c)| {
            let (r, s) = (i / 3, i % 3);
            if r == s { c == VARIANCE_FLOOR } else { c == 0.0 }
        }));
        assert!(v.clamped.iter().all(|&c| c));
    }

    #[test]
    fn hand_enumerated_variance() {
        // n = 6, n2 = 3, B = 4; values checked against a direct evaluation
        let ind = array![
            [1u8, 1, 1, 0, 0, 0],
            [0, 0, 0, 1, 1, 1],
            [1, 0, 1, 0, 1, 0],
            [0, 1, 0, 1, 0, 1]
        ];
        let per = array![[1.0], [3.0], [2.0], [6.0]];
        let v = split_variance(per.view(), ind.view(), 3).unwrap();
        // beta_hat = 3, D = (-2, 0, -1, 3), vbar_i = 1/2
        // C_i = (1/4) sum_b (v_bi - 1/2) D_b
        let d = [-2.0, 0.0, -1.0, 3.0];
        let mut sum_c2 = 0.0;
        for i in 0..6 {
            let ci: f64 = (0..4).map(|b| (ind[[b, i]] as f64 - 0.5) * d[b]).sum::<f64>() / 4.0;
            sum_c2 += ci * ci;
        }
        let expected = 6.0 * 5.0 / 9.0 * sum_c2 - 6.0 * 3.0 / (16.0 * 3.0) * 14.0;
        assert_abs_diff_eq!(v.variance[0], expected.max(VARIANCE_FLOOR), epsilon = 1e-14);
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_adjust(&[0.03]).unwrap(), vec![0.03]);
        let adj = holm_adjust(&[0.01, 0.04, 0.03]).unwrap();
        for (a, e) in adj.iter().zip([0.03, 0.06, 0.06]) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-15);
        }
        assert_eq!(holm_adjust(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert!(holm_adjust(&[0.1, f64::NAN]).is_err());
        assert!(holm_adjust(&[1.5]).is_err());
        assert!(holm_adjust(&[]).unwrap().is_empty());
    }

    #[test]
    fn target_validation() {
        let d = Dataset::from_covariates(array![1.0, 2.0, 3.0], &array![[1.0], [2.0], [0.5]], None).unwrap();
        assert!(validate_targets(&d, &[0]).is_err());
        assert!(validate_targets(&d, &[2]).is_err());
        assert_eq!(validate_targets(&d, &[1, 1]).unwrap(), vec![1]);
    }
}
