//! Exponential-family primitives for canonical-link GLMs.
//!
//! The per-observation loss is `A(a) - y a` with `a = x'beta`; the sample
//! loss, score and Hessian are averages over observations.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors beyond this magnitude are clamped before exponentiation
/// in the Poisson mean and variance.
pub const POISSON_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Binomial,
    Poisson,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(FamilyKind::Gaussian),
            "binomial" | "logistic" => Ok(FamilyKind::Binomial),
            "poisson" => Ok(FamilyKind::Poisson),
            other => Err(Error::invalid(format!("unknown family '{other}'"))),
        }
    }
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Binomial => "binomial",
            FamilyKind::Poisson => "poisson",
        })
    }
}

/// A GLM family with canonical link and known dispersion.
///
/// The dispersion does not enter the loss (it is fixed at one there); it is
/// only used when simulating gaussian responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmFamily {
    pub kind: FamilyKind,
    pub dispersion: f64,
}

impl GlmFamily {
    pub fn new(kind: FamilyKind) -> Self {
        Self {
            kind,
            dispersion: 1.0,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(FamilyKind::Gaussian)
    }

    pub fn binomial() -> Self {
        Self::new(FamilyKind::Binomial)
    }

    pub fn poisson() -> Self {
        Self::new(FamilyKind::Poisson)
    }

    /// Cumulant function `A(a)`.
    #[inline]
    pub fn cumulant(&self, a: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * a * a,
            FamilyKind::Binomial => a.max(0.0) + (-a.abs()).exp().ln_1p(),
            FamilyKind::Poisson => a.exp(),
        }
    }

    /// Mean function `A'(a)`.
    #[inline]
    pub fn mean(&self, a: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => a,
            FamilyKind::Binomial => {
                if a >= 0.0 {
                    1.0 / (1.0 + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (1.0 + e)
                }
            }
            FamilyKind::Poisson => a.clamp(-POISSON_CLAMP, POISSON_CLAMP).exp(),
        }
    }

    /// Variance function `A''(a)`; strictly positive for finite `a`.
    #[inline]
    pub fn variance(&self, a: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Binomial => {
                let e = (-a.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            FamilyKind::Poisson => a.clamp(-POISSON_CLAMP, POISSON_CLAMP).exp(),
        }
    }

    /// Canonical link, the inverse of [`GlmFamily::mean`].
    pub fn link(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => mu,
            FamilyKind::Binomial => (mu / (1.0 - mu)).ln(),
            FamilyKind::Poisson => mu.ln(),
        }
    }

    /// Per-observation loss of the saturated model, `sup_a {y a - A(a)}` negated.
    pub fn saturated_loss(&self, y: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => -0.5 * y * y,
            FamilyKind::Binomial => 0.0,
            FamilyKind::Poisson => {
                if y > 0.0 {
                    y - y * y.ln()
                } else {
                    0.0
                }
            }
        }
    }

    /// Unit deviance `2 [rho(y, a) - rho_sat(y)]`.
    #[inline]
    pub fn unit_deviance(&self, y: f64, a: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => (y - a) * (y - a),
            _ => 2.0 * (self.cumulant(a) - y * a - self.saturated_loss(y)),
        }
    }

    pub fn validate_response(&self, y: ArrayView1<f64>) -> Result<()> {
        for (i, &v) in y.iter().enumerate() {
            let ok = match self.kind {
                FamilyKind::Gaussian => v.is_finite(),
                FamilyKind::Binomial => v == 0.0 || v == 1.0,
                FamilyKind::Poisson => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "response {v} at observation {i} is not valid for the {} family",
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

/// Response plus design matrix whose first column is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Array1<f64>,
    x: Array2<f64>,
    column_names: Vec<String>,
}

impl Dataset {
    /// Build from a full design (intercept column included).
    pub fn new(y: Array1<f64>, x: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::invalid("a dataset needs at least two observations"));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "design rows",
                expected: n,
                found: x.nrows(),
            });
        }
        if x.ncols() == 0 || x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::invalid("first design column must be the all-ones intercept"));
        }
        if column_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                what: "column names",
                expected: x.ncols(),
                found: column_names.len(),
            });
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Self {
            y,
            x,
            column_names,
        })
    }

    /// Build from covariates only; an intercept column named `(Intercept)` is
    /// prepended and covariates are named `x1..xp` unless names are given.
    pub fn from_covariates(
        y: Array1<f64>,
        covariates: &Array2<f64>,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, p) = covariates.dim();
        let mut x = Array2::ones((n, p + 1));
        x.slice_mut(ndarray::s![.., 1..]).assign(covariates);
        let mut column_names = vec!["(Intercept)".to_string()];
        match names {
            Some(names) => column_names.extend(names),
            None => column_names.extend((1..=p).map(|j| format!("x{j}"))),
        }
        Self::new(y, x, column_names)
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariates, excluding the intercept.
    pub fn p(&self) -> usize {
        self.x.ncols() - 1
    }

    pub fn validate_for(&self, family: &GlmFamily) -> Result<()> {
        family.validate_response(self.y.view())
    }

    /// Rows `rows`, all columns.
    pub fn subset_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: self.y.select(Axis(0), rows),
            x: self.x.select(Axis(0), rows),
            column_names: self.column_names.clone(),
        }
    }

    /// Intercept plus the covariate columns `cols` (indices in `1..=p`).
    pub fn select_columns(&self, cols: &[usize]) -> Result<Dataset> {
        self.submodel(None, cols)
    }

    /// Optional row subset and the intercept plus covariate columns `cols`.
    pub fn submodel(&self, rows: Option<&[usize]>, cols: &[usize]) -> Result<Dataset> {
        let mut idx = Vec::with_capacity(cols.len() + 1);
        idx.push(0);
        for &c in cols {
            if c == 0 || c > self.p() {
                return Err(Error::invalid(format!("column index {c} outside 1..={}", self.p())));
            }
            idx.push(c);
        }
        let x = self.x.select(Axis(1), &idx);
        let (y, x) = match rows {
            Some(r) => (self.y.select(Axis(0), r), x.select(Axis(0), r)),
            None => (self.y.clone(), x),
        };
        Ok(Dataset {
            y,
            x,
            column_names: idx.iter().map(|&j| self.column_names[j].clone()).collect(),
        })
    }
}

/// The vector of linear predictors `x_i'beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor(pub Array1<f64>);

impl LinearPredictor {
    pub fn new(data: &Dataset, beta: ArrayView1<f64>) -> Result<Self> {
        check_beta(data, beta)?;
        Ok(Self(data.x.dot(&beta)))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }
}

fn check_beta(data: &Dataset, beta: ArrayView1<f64>) -> Result<()> {
    if beta.len() != data.x.ncols() {
        return Err(Error::DimensionMismatch {
            what: "coefficient vector",
            expected: data.x.ncols(),
            found: beta.len(),
        });
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid("coefficients must be finite"));
    }
    Ok(())
}

/// Mean loss from precomputed linear predictors.
pub(crate) fn loss_from_eta(family: &GlmFamily, y: ArrayView1<f64>, eta: ArrayView1<f64>) -> f64 {
    let total: f64 = y
        .iter()
        .zip(eta.iter())
        .map(|(&yi, &a)| family.cumulant(a) - yi * a)
        .sum();
    total / y.len() as f64
}

/// `n^-1 sum_i [A(x_i'beta) - y_i x_i'beta]`.
pub fn loss(family: &GlmFamily, data: &Dataset, beta: ArrayView1<f64>) -> Result<f64> {
    let eta = LinearPredictor::new(data, beta)?;
    Ok(loss_from_eta(family, data.y.view(), eta.0.view()))
}

/// Gradient of [`loss`]: `n^-1 sum_i {A'(x_i'beta) - y_i} x_i`.
pub fn score(family: &GlmFamily, data: &Dataset, beta: ArrayView1<f64>) -> Result<Array1<f64>> {
    let eta = LinearPredictor::new(data, beta)?;
    Ok(score_from_eta(family, data, eta.0.view()))
}

pub(crate) fn score_from_eta(family: &GlmFamily, data: &Dataset, eta: ArrayView1<f64>) -> Array1<f64> {
    let resid: Array1<f64> = eta
        .iter()
        .zip(data.y.iter())
        .map(|(&a, &yi)| family.mean(a) - yi)
        .collect();
    data.x.t().dot(&resid) / data.n() as f64
}

/// Sample Hessian `n^-1 X' W X` with `W = diag(A''(x_i'beta))`.
pub fn hessian(family: &GlmFamily, data: &Dataset, beta: ArrayView1<f64>) -> Result<Array2<f64>> {
    let eta = LinearPredictor::new(data, beta)?;
    Ok(hessian_from_eta(family, data, eta.0.view()))
}

pub(crate) fn hessian_from_eta(family: &GlmFamily, data: &Dataset, eta: ArrayView1<f64>) -> Array2<f64> {
    let w: Array1<f64> = eta.mapv(|a| family.variance(a));
    weighted_gram(&data.x, w.view())
}

/// `n^-1 X' diag(w) X`, symmetrized.
pub(crate) fn weighted_gram(x: &Array2<f64>, w: ArrayView1<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let xw = x * &w.insert_axis(Axis(1));
    let mut h = xw.t().dot(x) / n;
    let k = h.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let m = 0.5 * (h[[i, j]] + h[[j, i]]);
            h[[i, j]] = m;
            h[[j, i]] = m;
        }
    }
    h
}
