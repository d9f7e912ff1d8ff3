//! Low-dimensional estimation on a selected submodel.
//!
//! [`mle_fit`] iterates Newton steps to the maximum likelihood estimate;
//! [`debiased_fit`] takes exactly one Newton step from a lasso initializer
//! using the directly inverted sample Hessian. Both drop near-collinear
//! columns found by a pivoted Cholesky of the Hessian and report them.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, Dataset, FamilyKind, GlmFamily};
use crate::lasso::{cv_lasso, LassoConfig};
use crate::linalg::{self, DROP_TOLERANCE};

/// Step-halvings allowed per Newton iteration before declaring divergence.
const MAX_HALVINGS: usize = 20;
/// Linear predictors beyond this magnitude indicate (quasi-)separation.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub estimate: f64,
    pub std_err: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// Two-sided p-value for a zero null value.
    pub p_value: f64,
}

impl WaldInterval {
    pub fn new(estimate: f64, std_err: f64, level: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::invalid(format!("level {level} outside (0, 1)")));
        }
        if !(std_err >= 0.0) || !estimate.is_finite() {
            return Err(Error::invalid("estimate must be finite and std_err nonnegative"));
        }
        let z = linalg::normal_quantile(0.5 + 0.5 * level);
        let half = z * std_err;
        let p_value = if std_err > 0.0 {
            (2.0 * linalg::normal_sf(estimate.abs() / std_err)).min(1.0)
        } else if estimate == 0.0 {
            1.0
        } else {
            0.0
        };
        Ok(Self {
            estimate,
            std_err,
            lower: estimate - half,
            upper: estimate + half,
            level,
            p_value,
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    /// Whether `H0: coefficient = 0` is rejected at `1 - level`.
    pub fn rejects_zero(&self) -> bool {
        self.p_value < 1.0 - self.level
    }
}

/// Maximum likelihood fit of a submodel. Coefficient vectors cover the
/// retained design positions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    /// Retained design positions (0 is the intercept), ascending.
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
    pub beta: Array1<f64>,
    /// Inverse of the sample Hessian at `beta`; covariance is this over `n_used`.
    pub hessian_inverse: Array2<f64>,
    pub n_used: usize,
    pub n_iter: usize,
    pub converged: bool,
    /// Every fitted linear predictor exceeded 30 in magnitude.
    pub separation: bool,
}

impl MleFit {
    pub fn coef(&self, position: usize) -> Option<f64> {
        self.slot(position).map(|r| self.beta[r])
    }

    pub fn std_err(&self, position: usize) -> Option<f64> {
        self.slot(position)
            .map(|r| (self.hessian_inverse[[r, r]] / self.n_used as f64).sqrt())
    }

    fn slot(&self, position: usize) -> Option<usize> {
        self.retained.binary_search(&position).ok()
    }
}

/// One-step debiased lasso on a submodel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedFit {
    /// Covariate index of each non-intercept design position, i.e. the
    /// selected set; position `k + 1` holds `indices[k]`.
    pub indices: Vec<usize>,
    /// Retained design positions, ascending.
    pub retained: Vec<usize>,
    /// Covariate indices of dropped columns (0 denotes the intercept).
    pub dropped: Vec<usize>,
    /// Estimates over `retained`.
    pub beta: Array1<f64>,
    /// Inverse sample Hessian at the initializer, over `retained`.
    pub theta: Array2<f64>,
    pub n_used: usize,
    /// Initializer over all design positions, dropped columns zeroed.
    pub init_beta: Array1<f64>,
}

impl DebiasedFit {
    fn slot(&self, position: usize) -> Option<usize> {
        self.retained.binary_search(&position).ok()
    }

    /// Design position of covariate `index` (0 for the intercept).
    pub fn position_of(&self, index: usize) -> Option<usize> {
        if index == 0 {
            Some(0)
        } else {
            self.indices.iter().position(|&j| j == index).map(|k| k + 1)
        }
    }

    /// Estimate for covariate `index`, `None` if it is not in the submodel or
    /// was dropped.
    pub fn coef_for(&self, index: usize) -> Option<f64> {
        self.position_of(index).and_then(|p| self.slot(p)).map(|r| self.beta[r])
    }

    pub fn std_err_for(&self, index: usize) -> Option<f64> {
        self.position_of(index)
            .and_then(|p| self.slot(p))
            .map(|r| (self.theta[[r, r]] / self.n_used as f64).sqrt())
    }

    /// Covariance of the retained estimates, `theta / n_used`.
    pub fn covariance(&self) -> Array2<f64> {
        &self.theta / self.n_used as f64
    }

    /// Wald interval for covariate `index`.
    pub fn interval_for(&self, index: usize, level: f64) -> Result<WaldInterval> {
        let pos = self
            .position_of(index)
            .ok_or_else(|| Error::invalid(format!("covariate {index} is not in the submodel")))?;
        let mut a = Array1::zeros(self.indices.len() + 1);
        a[pos] = 1.0;
        contrast_ci(self, a.view(), level)
    }

    /// Replace the default positional `indices` with covariate indices.
    pub fn with_indices(mut self, indices: &[usize]) -> Result<Self> {
        if indices.len() != self.indices.len() {
            return Err(Error::DimensionMismatch {
                what: "submodel indices",
                expected: self.indices.len(),
                found: indices.len(),
            });
        }
        self.dropped = self
            .dropped
            .iter()
            .map(|&pos| if pos == 0 { 0 } else { indices[pos - 1] })
            .collect();
        self.indices = indices.to_vec();
        Ok(self)
    }
}

fn restrict(data: &Dataset, positions: &[usize]) -> Array2<f64> {
    data.x().select(Axis(1), positions)
}

/// Score and Hessian of the restricted design at `beta_r`.
fn derivatives(
    family: &GlmFamily,
    x: &Array2<f64>,
    y: &Array1<f64>,
    beta_r: &Array1<f64>,
) -> (f64, Array1<f64>, Array2<f64>) {
    let n = y.len() as f64;
    let eta = x.dot(beta_r);
    let loss = glm::loss_from_eta(family, y.view(), eta.view());
    let resid: Array1<f64> = eta.iter().zip(y).map(|(&a, &yi)| family.mean(a) - yi).collect();
    let score = x.t().dot(&resid) / n;
    let w = eta.mapv(|a| family.variance(a));
    let hess = glm::weighted_gram(x, w.view());
    (loss, score, hess)
}

fn default_start(family: &GlmFamily, data: &Dataset) -> Array1<f64> {
    let mut b = Array1::zeros(data.x().ncols());
    let ybar = data.y().mean().unwrap_or(0.0);
    b[0] = match family.kind {
        FamilyKind::Gaussian => ybar,
        FamilyKind::Binomial => family.link(ybar.clamp(1e-6, 1.0 - 1e-6)),
        FamilyKind::Poisson => ybar.max(1e-6).ln(),
    };
    b
}

/// Split design positions into retained and dropped via pivoted Cholesky.
fn rank_screen(h: &Array2<f64>) -> (Vec<usize>, Vec<usize>) {
    let pc = linalg::pivoted_cholesky(h, DROP_TOLERANCE);
    (pc.retained(), pc.dropped())
}

/// Newton-Raphson maximum likelihood on the submodel design `data_sub`.
///
/// `init` defaults to the intercept-only MLE. Stops when the sup-norm of the
/// score is at most `tol * (1 + |beta|_inf)`; hitting `max_iter` returns the
/// current iterate with `converged = false`.
pub fn mle_fit(
    family: &GlmFamily,
    data_sub: &Dataset,
    init: Option<ArrayView1<f64>>,
    max_iter: usize,
    tol: f64,
) -> Result<MleFit> {
    let k = data_sub.x().ncols();
    if k >= data_sub.n() {
        return Err(Error::invalid(format!(
            "submodel with {k} columns needs more than {k} observations, got {}",
            data_sub.n()
        )));
    }
    let start = match init {
        Some(b) => {
            if b.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "initial coefficients",
                    expected: k,
                    found: b.len(),
                });
            }
            b.to_owned()
        }
        None => default_start(family, data_sub),
    };
    let h0 = glm::hessian(family, data_sub, start.view())?;
    let (retained, dropped) = rank_screen(&h0);
    let x = restrict(data_sub, &retained);
    let y = data_sub.y();
    let mut beta: Array1<f64> = retained.iter().map(|&p| start[p]).collect();

    let (mut loss, mut score, mut hess) = derivatives(family, &x, y, &beta);
    let mut converged = false;
    let mut n_iter = 0;
    loop {
        let scale = 1.0 + beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
        if score.iter().all(|g| g.abs() <= tol * scale) {
            converged = true;
            break;
        }
        if n_iter >= max_iter {
            break;
        }
        let l = linalg::cholesky(&hess).ok_or_else(|| singular(&hess, &retained))?;
        let mut step = linalg::cholesky_solve(&l, &score);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta - &step;
            let (c_loss, c_score, c_hess) = derivatives(family, &x, y, &cand);
            if c_loss.is_finite() && c_loss <= loss + 1e-12 * loss.abs().max(1.0) {
                accepted = Some((cand, c_loss, c_score, c_hess));
                break;
            }
            step *= 0.5;
        }
        n_iter += 1;
        match accepted {
            Some((b, l2, s2, h2)) => {
                let stalled = (&b - &beta).iter().all(|d| d.abs() <= 1e-15 * scale);
                beta = b;
                loss = l2;
                score = s2;
                hess = h2;
                if stalled {
                    // no representable progress left
                    converged = true;
                    break;
                }
            }
            None => {
                return Err(Error::NonConvergence {
                    what: "maximum likelihood (step-halving exhausted)",
                    iterations: n_iter,
                })
            }
        }
    }
    let l = linalg::cholesky(&hess).ok_or_else(|| singular(&hess, &retained))?;
    let hessian_inverse = linalg::cholesky_inverse(&l);
    let eta = x.dot(&beta);
    let separation =
        family.kind != FamilyKind::Gaussian && eta.iter().all(|a| a.abs() > SEPARATION_ETA);
    Ok(MleFit {
        retained,
        dropped,
        beta,
        hessian_inverse,
        n_used: data_sub.n(),
        n_iter,
        converged,
        separation,
    })
}

fn singular(h: &Array2<f64>, positions: &[usize]) -> Error {
    // report the columns that a stricter pivoted pass cannot keep
    let pc = linalg::pivoted_cholesky(h, 1e-8);
    let mut cols: Vec<usize> = pc.dropped().iter().map(|&r| positions[r]).collect();
    if cols.is_empty() {
        cols = positions.to_vec();
    }
    Error::SingularHessian { columns: cols }
}

/// One Newton step from `lasso_init` with `theta` the inverse sample Hessian
/// at the initializer.
///
/// `data_sub` is the submodel design (intercept first). Columns whose pivot
/// falls below the drop tolerance are removed and their initial coefficients
/// zeroed before the step.
pub fn debiased_fit(
    family: &GlmFamily,
    data_sub: &Dataset,
    lasso_init: ArrayView1<f64>,
) -> Result<DebiasedFit> {
    let k = data_sub.x().ncols();
    let h_full = glm::hessian(family, data_sub, lasso_init)?;
    let (retained, dropped) = rank_screen(&h_full);
    let mut init = lasso_init.to_owned();
    dropped.iter().for_each(|&p| init[p] = 0.0);
    let x = restrict(data_sub, &retained);
    let b_r: Array1<f64> = retained.iter().map(|&p| init[p]).collect();
    let (_, score, hess) = derivatives(family, &x, data_sub.y(), &b_r);
    let l = linalg::cholesky(&hess).ok_or_else(|| singular(&hess, &retained))?;
    let theta = linalg::cholesky_inverse(&l);
    let beta = &b_r - &theta.dot(&score);
    Ok(DebiasedFit {
        indices: (1..k).collect(),
        retained,
        dropped,
        beta,
        theta,
        n_used: data_sub.n(),
        init_beta: init,
    })
}

/// Refined debiased lasso on the submodel `cols` of `data` (optionally a row
/// subset): a cross-validated lasso on the same observations supplies the
/// initializer for [`debiased_fit`].
pub fn debiased_lasso(
    family: &GlmFamily,
    data: &Dataset,
    rows: Option<&[usize]>,
    cols: &[usize],
    lasso: &LassoConfig,
    k_folds: usize,
    seed: u64,
) -> Result<DebiasedFit> {
    let sub = data.submodel(rows, cols)?;
    let k_folds = k_folds.min(sub.n());
    let cv = cv_lasso(family, &sub, lasso, k_folds, seed)?;
    debiased_fit(family, &sub, cv.fit.beta.view())?.with_indices(cols)
}

/// Wald interval for the contrast `a' beta`, `a` indexed by design position
/// (intercept first) with unit Euclidean norm.
pub fn contrast_ci(fit: &DebiasedFit, a: ArrayView1<f64>, level: f64) -> Result<WaldInterval> {
    let k = fit.indices.len() + 1;
    if a.len() != k {
        return Err(Error::DimensionMismatch {
            what: "contrast vector",
            expected: k,
            found: a.len(),
        });
    }
    let norm = a.dot(&a).sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(format!("contrast must have unit norm, got {norm}")));
    }
    let mut a_r = Array1::zeros(fit.retained.len());
    for (pos, &v) in a.iter().enumerate() {
        match fit.slot(pos) {
            Some(r) => a_r[r] = v,
            None if v != 0.0 => {
                return Err(Error::invalid(format!(
                    "contrast puts weight on dropped position {pos}"
                )))
            }
            None => {}
        }
    }
    let estimate = a_r.dot(&fit.beta);
    let var = a_r.dot(&fit.theta.dot(&a_r)) / fit.n_used as f64;
    WaldInterval::new(estimate, var.max(0.0).sqrt(), level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn logistic_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = rng::substream(seed, &[]);
        let cov = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_fn(n, |i| {
            let a = 0.3 + 0.8 * cov[[i, 0]] - 0.5 * cov[[i, 1 % p]];
            (rng.random::<f64>() < GlmFamily::binomial().mean(a)) as u8 as f64
        });
        Dataset::from_covariates(y, &cov, None).unwrap()
    }

    #[test]
    fn gaussian_mle_is_least_squares() {
        let mut rng = rng::substream(4, &[]);
        let cov = Array2::from_shape_fn((30, 3), |_| StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_fn(30, |i| cov[[i, 0]] - 2.0 * cov[[i, 2]] + rng.sample::<f64, _>(StandardNormal) * 0.1);
        let d = Dataset::from_covariates(y, &cov, None).unwrap();
        let fit = mle_fit(&GlmFamily::gaussian(), &d, None, 50, 1e-10).unwrap();
        let xtx = d.x().t().dot(d.x());
        let xty = d.x().t().dot(d.y());
        let ols = linalg::cholesky_solve(&linalg::cholesky(&xtx).unwrap(), &xty);
        for j in 0..4 {
            assert_abs_diff_eq!(fit.beta[j], ols[j], epsilon = 1e-10);
        }
        assert!(fit.converged);
    }

    #[test]
    fn logistic_intercept_only_is_logit() {
        let y = Array1::from_iter((0..20).map(|i| if i < 5 { 1.0 } else { 0.0 }));
        let d = Dataset::new(y, Array2::ones((20, 1)), vec!["(Intercept)".into()]).unwrap();
        let fit = mle_fit(&GlmFamily::binomial(), &d, Some(array![0.0].view()), 50, 1e-12).unwrap();
        assert_abs_diff_eq!(fit.beta[0], (0.25f64 / 0.75).ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(fit.beta[0], -1.098612, epsilon = 1e-6);
    }

    #[test]
    fn mle_score_tolerance_is_met() {
        let d = logistic_data(150, 4, 7);
        let fit = mle_fit(&GlmFamily::binomial(), &d, None, 50, 1e-9).unwrap();
        let s = glm::score(&GlmFamily::binomial(), &d, fit.beta.view()).unwrap();
        let scale = 1.0 + fit.beta.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
        assert!(s.iter().all(|g| g.abs() <= 1e-9 * scale));
    }

    #[test]
    fn collinear_column_is_dropped_and_reported() {
        let mut rng = rng::substream(9, &[]);
        let mut cov = Array2::from_shape_fn((40, 3), |_| StandardNormal.sample(&mut rng));
        for i in 0..40 {
            cov[[i, 2]] = cov[[i, 0]] + cov[[i, 1]];
        }
        let y = Array1::from_shape_fn(40, |i| cov[[i, 0]] + rng.sample::<f64, _>(StandardNormal) * 0.5);
        let d = Dataset::from_covariates(y, &cov, None).unwrap();
        let fit = mle_fit(&GlmFamily::gaussian(), &d, None, 50, 1e-10).unwrap();
        assert_eq!(fit.dropped.len(), 1);
        assert_eq!(fit.retained.len(), 3);
        assert!(fit.coef(fit.dropped[0]).is_none());
        let db = debiased_fit(&GlmFamily::gaussian(), &d, Array1::zeros(4).view())
            .unwrap()
            .with_indices(&[5, 8, 11])
            .unwrap();
        assert_eq!(db.dropped.len(), 1);
        assert!(db.coef_for(db.dropped[0]).is_none());
        let mut a = Array1::zeros(4);
        a[db.position_of(db.dropped[0]).unwrap()] = 1.0;
        assert!(contrast_ci(&db, a.view(), 0.95).is_err());
    }

    #[test]
    fn debiased_gaussian_is_exact_in_one_step() {
        let mut rng = rng::substream(5, &[]);
        let cov = Array2::from_shape_fn((25, 4), |_| StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_fn(25, |i| 1.0 + cov[[i, 1]] + rng.sample::<f64, _>(StandardNormal));
        let d = Dataset::from_covariates(y, &cov, None).unwrap();
        let mle = mle_fit(&GlmFamily::gaussian(), &d, None, 50, 1e-12).unwrap();
        let init = Array1::from_shape_fn(5, |_| 3.0 * rng.random::<f64>() - 1.5);
        let db = debiased_fit(&GlmFamily::gaussian(), &d, init.view()).unwrap();
        for j in 0..5 {
            assert_abs_diff_eq!(db.beta[j], mle.beta[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn debiased_fixed_point_at_mle() {
        let d = logistic_data(120, 3, 2);
        let mle = mle_fit(&GlmFamily::binomial(), &d, None, 50, 1e-13).unwrap();
        let db = debiased_fit(&GlmFamily::binomial(), &d, mle.beta.view()).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(db.beta[j], mle.beta[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn theta_inverts_hessian() {
        let d = logistic_data(100, 5, 3);
        let init = array![0.1, 0.5, -0.3, 0.0, 0.0, 0.1];
        let db = debiased_fit(&GlmFamily::binomial(), &d, init.view()).unwrap();
        let h = glm::hessian(&GlmFamily::binomial(), &d, init.view()).unwrap();
        let eye = db.theta.dot(&h);
        for i in 0..6 {
            for j in 0..6 {
                assert_abs_diff_eq!(eye[[i, j]], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn column_permutation_is_equivariant() {
        let d = logistic_data(100, 3, 6);
        let init = array![0.2, 0.4, -0.2, 0.05];
        let a = debiased_fit(&GlmFamily::binomial(), &d, init.view()).unwrap();
        let perm = [0usize, 3, 1, 2];
        let dp = Dataset::new(
            d.y().clone(),
            d.x().select(Axis(1), &perm),
            perm.iter().map(|&j| d.column_names()[j].clone()).collect(),
        )
        .unwrap();
        let init_p: Array1<f64> = perm.iter().map(|&j| init[j]).collect();
        let b = debiased_fit(&GlmFamily::binomial(), &dp, init_p.view()).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert_abs_diff_eq!(b.beta[i], a.beta[pi], epsilon = 1e-12);
            for (j, &pj) in perm.iter().enumerate() {
                assert_abs_diff_eq!(b.theta[[i, j]], a.theta[[pi, pj]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn wald_interval_shape() {
        let w = WaldInterval::new(0.5, 0.2, 0.95).unwrap();
        assert_abs_diff_eq!((w.upper - w.estimate) / w.std_err, 1.959964, epsilon = 1e-6);
        assert_abs_diff_eq!(w.estimate - w.lower, w.upper - w.estimate, epsilon = 1e-15);
        assert_abs_diff_eq!(w.p_value, 2.0 * linalg::normal_sf(2.5), epsilon = 1e-15);
        assert!(WaldInterval::new(0.5, 0.2, 1.0).is_err());
        let zero = WaldInterval::new(0.0, 0.0, 0.95).unwrap();
        assert!(zero.covers(0.0) && !zero.covers(0.1) && !zero.rejects_zero());
    }

    #[test]
    fn basis_contrast_matches_coefficient_interval() {
        let d = logistic_data(80, 3, 12);
        let db = debiased_fit(&GlmFamily::binomial(), &d, array![0.0, 0.3, 0.0, 0.0].view())
            .unwrap()
            .with_indices(&[4, 9, 17])
            .unwrap();
        let w = db.interval_for(9, 0.9).unwrap();
        assert_abs_diff_eq!(w.estimate, db.beta[2], epsilon = 1e-12);
        assert_abs_diff_eq!(w.std_err, (db.theta[[2, 2]] / 80.0).sqrt(), epsilon = 1e-12);
        let bad = array![1.0, 1.0, 0.0, 0.0];
        assert!(contrast_ci(&db, bad.view(), 0.95).is_err());
    }
}
