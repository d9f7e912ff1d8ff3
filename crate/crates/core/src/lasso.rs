//! L1-penalized GLM fitting.
//!
//! Each fit runs an outer IRLS loop that builds a weighted least-squares
//! surrogate at the current coefficients, and an inner cyclic coordinate
//! descent with soft-thresholding on that surrogate. A backtracking step on
//! the true penalized objective keeps the outer iterates monotone. Columns
//! are centered (and optionally scaled) internally; the intercept is never
//! penalized.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{GlmFamily, Dataset, FamilyKind};
use crate::linalg;
use crate::rng;

/// Lower bound on IRLS weights, keeps the surrogate curvature away from zero
/// when fitted probabilities saturate.
const MIN_WEIGHT: f64 = 1e-5;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// Strictly descending positive values.
    Explicit(Vec<f64>),
    /// `n_lambda` log-spaced values from lambda_max down to
    /// `min_ratio * lambda_max`. `min_ratio = None` means 0.01 when n < p and
    /// 1e-4 otherwise.
    Auto {
        n_lambda: usize,
        min_ratio: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub lambdas: LambdaGrid,
    /// Unpenalized covariate indices. The intercept (index 0) is always
    /// unpenalized whether or not it is listed.
    pub penalty_free: Vec<usize>,
    /// Cap on coordinate-descent sweeps per lambda.
    pub max_iter: usize,
    /// Iterations stop once every coordinate's change, squared and weighted
    /// by its curvature, is below `tol` times the null deviance per
    /// observation.
    pub tol: f64,
    pub standardize: bool,
    /// Stop the path once the explained deviance saturates (above 0.999, or
    /// relative gain below 1e-5 after five values).
    pub early_stop: bool,
    /// Cross-validation picks the largest lambda within one standard error
    /// of the minimum instead of the minimum itself.
    pub one_se_rule: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            lambdas: LambdaGrid::Auto {
                n_lambda: 100,
                min_ratio: None,
            },
            penalty_free: vec![0],
            max_iter: 100_000,
            tol: 1e-14,
            standardize: true,
            early_stop: false,
            one_se_rule: false,
        }
    }
}

impl LassoConfig {
    /// Settings used for selection and estimation-stage lassos inside the
    /// splitting procedures.
    pub fn for_splitting() -> Self {
        Self {
            early_stop: true,
            tol: 1e-7,
            ..Self::default()
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if let Some(&j) = self.penalty_free.iter().find(|&&j| j > p) {
            return Err(Error::invalid(format!("penalty-free index {j} exceeds p = {p}")));
        }
        match &self.lambdas {
            LambdaGrid::Explicit(g) => {
                if g.is_empty() || g.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                    return Err(Error::invalid("lambda grid must be nonempty and positive"));
                }
                if g.windows(2).any(|w| !(w[1] < w[0])) {
                    return Err(Error::invalid("lambda grid must be strictly descending"));
                }
            }
            LambdaGrid::Auto {
                n_lambda,
                min_ratio,
            } => {
                if *n_lambda == 0 {
                    return Err(Error::invalid("n_lambda must be positive"));
                }
                if let Some(r) = min_ratio {
                    if !(*r > 0.0 && *r < 1.0) {
                        return Err(Error::invalid("lambda_min_ratio must lie in (0, 1)"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    /// Coefficients on the original covariate scale, intercept first.
    pub beta: Array1<f64>,
    pub lambda: f64,
    /// Penalized covariates with nonzero coefficients, ascending.
    pub active_set: Vec<usize>,
    /// `loss(beta) + lambda * sum_j w_j |beta_j|` over penalized `j`, where
    /// `w_j` is the column's standard deviation when standardizing and 1
    /// otherwise.
    pub objective: f64,
    /// Coordinate-descent sweeps spent on this lambda.
    pub n_iter: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    /// Held-out deviance per observation, one entry per lambda.
    pub mean_deviance: Vec<f64>,
    pub se_deviance: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
    /// Lambda used for `fit` (`lambda_min` unless the 1-SE rule is on).
    pub lambda_selected: f64,
    pub fold_assignment: Vec<usize>,
    /// Full-data fit at `lambda_selected`.
    pub fit: LassoFit,
}

/// Centered (and optionally scaled) covariates, column-major.
struct Design {
    n: usize,
    /// Original column index (1..=p) of each internal coordinate.
    cols: Vec<usize>,
    z: Vec<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
    penalized: Vec<bool>,
    p: usize,
}

impl Design {
    fn new(data: &Dataset, standardize: bool, penalty_free: &[usize]) -> Self {
        let n = data.n();
        let p = data.p();
        let x = data.x();
        let mut cols = Vec::with_capacity(p);
        let mut z = Vec::with_capacity(n * p);
        let mut center = Vec::with_capacity(p);
        let mut scale = Vec::with_capacity(p);
        let mut penalized = Vec::with_capacity(p);
        for j in 1..=p {
            let col = x.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            // constant columns carry no information beyond the intercept
            if !(sd > 1e-12 * (1.0 + mean.abs())) {
                continue;
            }
            let s = if standardize { sd } else { 1.0 };
            cols.push(j);
            z.extend(col.iter().map(|v| (v - mean) / s));
            center.push(mean);
            scale.push(s);
            penalized.push(!penalty_free.contains(&j));
        }
        Self {
            n,
            cols,
            z,
            center,
            scale,
            penalized,
            p,
        }
    }

    #[inline]
    fn col(&self, k: usize) -> &[f64] {
        &self.z[k * self.n..(k + 1) * self.n]
    }

    fn k(&self) -> usize {
        self.cols.len()
    }

    fn to_original(&self, b0: f64, b: &[f64]) -> Array1<f64> {
        let mut beta = Array1::zeros(self.p + 1);
        let mut intercept = b0;
        for (k, &bk) in b.iter().enumerate() {
            if bk != 0.0 {
                let orig = bk / self.scale[k];
                beta[self.cols[k]] = orig;
                intercept -= orig * self.center[k];
            }
        }
        beta[0] = intercept;
        beta
    }
}

#[derive(Clone)]
struct State {
    b0: f64,
    b: Vec<f64>,
    eta: Vec<f64>,
}

struct Solver<'a> {
    family: GlmFamily,
    y: &'a [f64],
    design: Design,
    max_iter: usize,
    /// Convergence threshold on `max_k curvature_k * change_k^2`: the
    /// configured tolerance times the null deviance per observation.
    thresh: f64,
    /// Objective after each accepted outer iteration, for diagnostics.
    trace: Option<Vec<f64>>,
}

#[inline]
fn soft_threshold(g: f64, t: f64) -> f64 {
    if g > t {
        g - t
    } else if g < -t {
        g + t
    } else {
        0.0
    }
}

impl<'a> Solver<'a> {
    fn objective(&self, st: &State, lambda: f64) -> f64 {
        let n = self.design.n as f64;
        let loss: f64 = st
            .eta
            .iter()
            .zip(self.y)
            .map(|(&a, &yi)| self.family.cumulant(a) - yi * a)
            .sum::<f64>()
            / n;
        let pen: f64 = st
            .b
            .iter()
            .zip(&self.design.penalized)
            .filter(|(b, pen)| **pen && **b != 0.0)
            .map(|(b, _)| b.abs())
            .sum();
        if pen == 0.0 {
            loss
        } else {
            loss + lambda * pen
        }
    }

    fn deviance(&self, st: &State) -> f64 {
        st.eta
            .iter()
            .zip(self.y)
            .map(|(&a, &yi)| self.family.unit_deviance(yi, a))
            .sum()
    }

    fn recompute_eta(&self, st: &mut State, working: &[usize]) {
        st.eta.iter_mut().for_each(|e| *e = st.b0);
        for &k in working {
            let bk = st.b[k];
            if bk != 0.0 {
                for (e, &zk) in st.eta.iter_mut().zip(self.design.col(k)) {
                    *e += bk * zk;
                }
            }
        }
    }

    /// Gradient of the mean loss w.r.t. each internal coordinate.
    fn gradient(&self, st: &State) -> Vec<f64> {
        let n = self.design.n as f64;
        let resid: Vec<f64> = st
            .eta
            .iter()
            .zip(self.y)
            .map(|(&a, &yi)| self.family.mean(a) - yi)
            .collect();
        (0..self.design.k())
            .map(|k| dot(self.design.col(k), &resid) / n)
            .collect()
    }

    /// Minimize the penalized objective at `lambda` over the coordinates in
    /// `working`, growing it until the KKT conditions hold everywhere.
    /// Returns (converged, sweeps).
    fn fit_lambda(&mut self, lambda: f64, st: &mut State, working: &mut Vec<usize>) -> (bool, usize) {
        let n = self.design.n;
        let nf = n as f64;
        let gaussian = self.family.kind == FamilyKind::Gaussian;
        let mut sweeps = 0usize;
        let mut w = vec![1.0; n];
        let mut r = vec![0.0; n];
        let mut xwx = vec![0.0; self.design.k()];
        loop {
            // IRLS outer loop on the current working set
            loop {
                for i in 0..n {
                    let mu = self.family.mean(st.eta[i]);
                    w[i] = if gaussian {
                        1.0
                    } else {
                        self.family.variance(st.eta[i]).max(MIN_WEIGHT)
                    };
                    r[i] = self.y[i] - mu;
                }
                let sw: f64 = w.iter().sum();
                // stop when no single coordinate step would move far enough
                let g0 = r.iter().sum::<f64>() / nf;
                let mut pending = g0 * g0 / (sw / nf);
                for &k in working.iter() {
                    let zk = self.design.col(k);
                    let mut curv = 0.0;
                    let mut g = 0.0;
                    for i in 0..n {
                        curv += w[i] * zk[i] * zk[i];
                        g -= zk[i] * r[i];
                    }
                    curv /= nf;
                    g /= nf;
                    xwx[k] = curv;
                    let t = if self.design.penalized[k] { lambda } else { 0.0 };
                    let resid = if st.b[k] != 0.0 {
                        g + t * st.b[k].signum()
                    } else {
                        (g.abs() - t).max(0.0)
                    };
                    if curv > 0.0 {
                        pending = pending.max(resid * resid / curv);
                    }
                }
                if pending < self.thresh {
                    break;
                }
                let old = st.clone();
                let old_obj = if gaussian { 0.0 } else { self.objective(st, lambda) };
                let m = working.len() + 1;
                if m <= GRAM_MAX && m < n {
                    let (ok, it) = self.solve_on_gram(lambda, st, working, &w, &r, &mut xwx);
                    sweeps += it;
                    if !ok {
                        return (false, sweeps);
                    }
                } else {
                    loop {
                        let d0 = r.iter().sum::<f64>() / sw;
                        let mut dlx = sw / nf * d0 * d0;
                        if d0 != 0.0 {
                            st.b0 += d0;
                            for i in 0..n {
                                r[i] -= w[i] * d0;
                                st.eta[i] += d0;
                            }
                        }
                        for &k in working.iter() {
                            let curv = xwx[k];
                            if curv <= 0.0 {
                                continue;
                            }
                            let zk = self.design.col(k);
                            let bk = st.b[k];
                            let g = dot(zk, &r) / nf + curv * bk;
                            let t = if self.design.penalized[k] { lambda } else { 0.0 };
                            let new = soft_threshold(g, t) / curv;
                            let d = new - bk;
                            if d != 0.0 {
                                st.b[k] = new;
                                for i in 0..n {
                                    r[i] -= w[i] * zk[i] * d;
                                    st.eta[i] += zk[i] * d;
                                }
                                dlx = dlx.max(curv * d * d);
                            }
                        }
                        sweeps += 1;
                        if dlx < self.thresh {
                            break;
                        }
                        if sweeps >= self.max_iter {
                            return (false, sweeps);
                        }
                    }
                }
                if gaussian {
                    // the surrogate is the objective itself
                    if self.trace.is_some() {
                        let obj = self.objective(st, lambda);
                        self.trace.iter_mut().for_each(|t| t.push(obj));
                    }
                    break;
                }
                // backtrack toward the previous iterate if the objective rose
                let mut new_obj = self.objective(st, lambda);
                if new_obj > old_obj + 1e-13 * old_obj.abs().max(1.0) {
                    let target = st.clone();
                    let mut t = 1.0;
                    for _ in 0..MAX_HALVINGS {
                        t *= 0.5;
                        st.b0 = old.b0 + t * (target.b0 - old.b0);
                        for &k in working.iter() {
                            st.b[k] = old.b[k] + t * (target.b[k] - old.b[k]);
                        }
                        self.recompute_eta(st, working);
                        new_obj = self.objective(st, lambda);
                        if new_obj <= old_obj {
                            break;
                        }
                    }
                    if new_obj > old_obj {
                        // no descent left along the Newton direction
                        *st = old;
                        if let Some(t) = self.trace.as_mut() {
                            t.push(old_obj);
                        }
                        break;
                    }
                }
                if let Some(t) = self.trace.as_mut() {
                    t.push(new_obj);
                }
                if sweeps >= self.max_iter {
                    return (false, sweeps);
                }
            }
            // KKT check outside the working set
            let grad = self.gradient(st);
            let mut in_set = vec![false; self.design.k()];
            working.iter().for_each(|&k| in_set[k] = true);
            let mut added = false;
            for k in 0..self.design.k() {
                if in_set[k] {
                    continue;
                }
                let bound = if self.design.penalized[k] { lambda } else { 0.0 };
                if grad[k].abs() > bound * (1.0 + 1e-9) {
                    working.push(k);
                    added = true;
                }
            }
            if !added {
                working.sort_unstable();
                return (true, sweeps);
            }
            working.sort_unstable();
        }
    }

    /// Solve the weighted least-squares lasso surrogate on the Gram matrix of
    /// the working set (intercept first), exactly by an active-set method
    /// when it succeeds and by covariance-update coordinate descent otherwise.
    /// Updates `st` and the curvature `xwx`; returns (converged, sweeps).
    fn solve_on_gram(
        &self,
        lambda: f64,
        st: &mut State,
        working: &[usize],
        w: &[f64],
        r: &[f64],
        xwx: &mut [f64],
    ) -> (bool, usize) {
        let n = self.design.n;
        let nf = n as f64;
        let m = working.len() + 1;
        // rows of `a` are sqrt(w) times the intercept and working columns
        let mut a = Array2::<f64>::zeros((m, n));
        let sqw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        a.row_mut(0).iter_mut().zip(&sqw).for_each(|(e, s)| *e = *s);
        let mut g = vec![0.0; m];
        g[0] = r.iter().sum::<f64>() / nf;
        for (row, &k) in working.iter().enumerate() {
            let zk = self.design.col(k);
            g[row + 1] = dot(zk, r) / nf;
            a.row_mut(row + 1)
                .iter_mut()
                .zip(zk.iter().zip(&sqw))
                .for_each(|(e, (z, s))| *e = z * s);
        }
        let h = a.dot(&a.t()) / nf;
        let h = h.into_raw_vec_and_offset().0;
        let mut x: Vec<f64> = std::iter::once(st.b0)
            .chain(working.iter().map(|&k| st.b[k]))
            .collect();
        // linear term of the surrogate in absolute coordinates
        let c: Vec<f64> = (0..m)
            .map(|a| g[a] + (0..m).map(|b| h[a * m + b] * x[b]).sum::<f64>())
            .collect();
        let pen: Vec<f64> = std::iter::once(0.0)
            .chain(
                working
                    .iter()
                    .map(|&k| if self.design.penalized[k] { lambda } else { 0.0 }),
            )
            .collect();
        let q = Quadratic { m, h, c, pen };
        for (a, &k) in working.iter().enumerate() {
            xwx[k] = q.h[(a + 1) * m + a + 1];
        }
        let start = x.clone();
        let (ok, sweeps) = match feature_sign(&q, &mut x) {
            Some(it) => (true, it),
            None => {
                x.copy_from_slice(&start);
                gram_descent(&q, &mut x, self.thresh, self.max_iter)
            }
        };
        st.b0 = x[0];
        for (a, &k) in working.iter().enumerate() {
            st.b[k] = x[a + 1];
        }
        self.recompute_eta(st, working);
        (ok, sweeps)
    }
}

/// Largest working set (intercept included) handled on its Gram matrix.
const GRAM_MAX: usize = 64;

/// `0.5 x'Hx - c'x + sum_k pen_k |x_k|` over `m` coordinates.
struct Quadratic {
    m: usize,
    h: Vec<f64>,
    c: Vec<f64>,
    pen: Vec<f64>,
}

impl Quadratic {
    fn value(&self, x: &[f64]) -> f64 {
        let m = self.m;
        let mut v = 0.0;
        for a in 0..m {
            if x[a] == 0.0 {
                continue;
            }
            let hx: f64 = (0..m).map(|b| self.h[a * m + b] * x[b]).sum();
            v += x[a] * (0.5 * hx - self.c[a]) + self.pen[a] * x[a].abs();
        }
        v
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let m = self.m;
        (0..m)
            .map(|a| (0..m).map(|b| self.h[a * m + b] * x[b]).sum::<f64>() - self.c[a])
            .collect()
    }
}

/// Feature-sign search: alternate sign-consistent Newton solves on the
/// active set with activation of the worst KKT violator. Returns the number
/// of solves, or `None` if a solve is singular or no progress is made.
fn feature_sign(q: &Quadratic, x: &mut [f64]) -> Option<usize> {
    let m = q.m;
    let cap = 10 * m + 50;
    let mut theta: Vec<f64> = (0..m)
        .map(|k| if q.pen[k] == 0.0 || x[k] == 0.0 { 0.0 } else { x[k].signum() })
        .collect();
    let mut active: Vec<bool> = (0..m).map(|k| q.pen[k] == 0.0 || x[k] != 0.0).collect();
    let mut solves = 0;
    loop {
        loop {
            solves += 1;
            if solves > cap {
                return None;
            }
            let a: Vec<usize> = (0..m).filter(|&k| active[k]).collect();
            let ha = Array2::from_shape_fn((a.len(), a.len()), |(i, j)| q.h[a[i] * m + a[j]]);
            let rhs: Array1<f64> = a.iter().map(|&k| q.c[k] - q.pen[k] * theta[k]).collect();
            let l = linalg::cholesky(&ha)?;
            let sol = linalg::cholesky_solve(&l, &rhs);
            let consistent = a
                .iter()
                .zip(sol.iter())
                .all(|(&k, &v)| q.pen[k] == 0.0 || v * theta[k] > 0.0);
            if consistent {
                for (i, &k) in a.iter().enumerate() {
                    x[k] = sol[i];
                }
                break;
            }
            // best point on the segment to the unconstrained solution among
            // its end and the sign changes along it
            let from: Vec<f64> = a.iter().map(|&k| x[k]).collect();
            let mut ts = vec![1.0];
            for (i, &k) in a.iter().enumerate() {
                if q.pen[k] != 0.0 && sol[i] * theta[k] <= 0.0 && from[i] != sol[i] {
                    let t = from[i] / (from[i] - sol[i]);
                    if t > 0.0 && t < 1.0 {
                        ts.push(t);
                    }
                }
            }
            let point = |t: f64| -> Vec<f64> {
                let mut p = x.to_vec();
                for (i, &k) in a.iter().enumerate() {
                    let v = from[i] + t * (sol[i] - from[i]);
                    // coordinates crossing zero at t, or past it, sit at zero
                    p[k] = if q.pen[k] != 0.0 && v * theta[k] <= 0.0 { 0.0 } else { v };
                }
                p
            };
            let current = q.value(x);
            let (best, best_val) = ts
                .iter()
                .map(|&t| {
                    let p = point(t);
                    let v = q.value(&p);
                    (p, v)
                })
                .fold((Vec::new(), f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if !(best_val < current) {
                return None;
            }
            x.copy_from_slice(&best);
            for k in 0..m {
                if q.pen[k] != 0.0 {
                    theta[k] = if x[k] == 0.0 { 0.0 } else { x[k].signum() };
                    active[k] = x[k] != 0.0;
                }
            }
        }
        let grad = q.gradient(x);
        let mut worst = None;
        let mut worst_v = 0.0;
        for k in 0..m {
            if q.pen[k] != 0.0 && x[k] == 0.0 {
                let v = grad[k].abs() - q.pen[k] * (1.0 + 1e-10);
                if v > worst_v {
                    worst_v = v;
                    worst = Some(k);
                }
            }
        }
        match worst {
            None => return Some(solves),
            Some(k) => {
                active[k] = true;
                theta[k] = -grad[k].signum();
            }
        }
    }
}

/// Coordinate descent on a Gram-form quadratic with the same stopping rule
/// as the observation-wise solver. Returns (converged, sweeps).
fn gram_descent(q: &Quadratic, x: &mut [f64], thresh: f64, max_iter: usize) -> (bool, usize) {
    let m = q.m;
    let mut grad = q.gradient(x);
    for sweep in 1..=max_iter {
        let mut dlx = 0.0_f64;
        for k in 0..m {
            let hkk = q.h[k * m + k];
            if hkk <= 0.0 {
                continue;
            }
            let new = soft_threshold(hkk * x[k] - grad[k], q.pen[k]) / hkk;
            let d = new - x[k];
            if d != 0.0 {
                x[k] = new;
                for a in 0..m {
                    grad[a] += q.h[a * m + k] * d;
                }
                dlx = dlx.max(hkk * d * d);
            }
        }
        if dlx < thresh {
            return (true, sweep);
        }
    }
    (false, max_iter)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn resolve_grid(config: &LassoConfig, lambda_max: f64, n: usize, p: usize) -> Vec<f64> {
    match &config.lambdas {
        LambdaGrid::Explicit(g) => g.clone(),
        LambdaGrid::Auto {
            n_lambda,
            min_ratio,
        } => {
            let ratio = min_ratio.unwrap_or(if n < p { 0.01 } else { 1e-4 });
            let top = lambda_max.max(f64::MIN_POSITIVE * 1e10);
            if *n_lambda == 1 {
                return vec![top];
            }
            let step = ratio.ln() / (*n_lambda as f64 - 1.0);
            (0..*n_lambda).map(|k| top * (step * k as f64).exp()).collect()
        }
    }
}

/// Largest lambda at which every penalized coefficient is zero.
pub fn lambda_max(family: &GlmFamily, data: &Dataset, config: &LassoConfig) -> Result<f64> {
    config.validate(data.p())?;
    let mut solver = make_solver(family, data, config);
    let (st, _) = null_state(&mut solver)?;
    Ok(max_penalized_gradient(&solver, &st))
}

fn make_solver<'a>(family: &GlmFamily, data: &'a Dataset, config: &LassoConfig) -> Solver<'a> {
    let design = Design::new(data, config.standardize, &config.penalty_free);
    let y = data.y().as_slice().expect("contiguous response");
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let eta0 = match family.kind {
        FamilyKind::Gaussian => ybar,
        FamilyKind::Binomial => family.link(ybar.clamp(1e-8, 1.0 - 1e-8)),
        FamilyKind::Poisson => ybar.max(1e-8).ln(),
    };
    let null_dev = y.iter().map(|&v| family.unit_deviance(v, eta0)).sum::<f64>() / y.len() as f64;
    Solver {
        family: *family,
        y,
        design,
        max_iter: config.max_iter,
        thresh: config.tol * if null_dev > 0.0 { null_dev } else { 1.0 },
        trace: None,
    }
}

fn null_state(solver: &mut Solver) -> Result<(State, Vec<usize>)> {
    let n = solver.design.n;
    let ybar = solver.y.iter().sum::<f64>() / n as f64;
    let b0 = match solver.family.kind {
        FamilyKind::Gaussian => ybar,
        FamilyKind::Binomial => solver.family.link(ybar.clamp(1e-8, 1.0 - 1e-8)),
        FamilyKind::Poisson => ybar.max(1e-8).ln(),
    };
    let mut st = State {
        b0,
        b: vec![0.0; solver.design.k()],
        eta: vec![b0; n],
    };
    let mut working: Vec<usize> = (0..solver.design.k())
        .filter(|&k| !solver.design.penalized[k])
        .collect();
    if !working.is_empty() {
        let (ok, sweeps) = solver.fit_lambda(f64::INFINITY, &mut st, &mut working);
        if !ok {
            return Err(Error::NonConvergence {
                what: "null model fit",
                iterations: sweeps,
            });
        }
    }
    Ok((st, working))
}

fn max_penalized_gradient(solver: &Solver, st: &State) -> f64 {
    solver
        .gradient(st)
        .iter()
        .zip(&solver.design.penalized)
        .filter(|(_, pen)| **pen)
        .map(|(g, _)| g.abs())
        .fold(0.0, f64::max)
}

fn make_fit(solver: &Solver, st: &State, lambda: f64, n_iter: usize, converged: bool) -> LassoFit {
    let beta = solver.design.to_original(st.b0, &st.b);
    let active_set = (0..solver.design.k())
        .filter(|&k| solver.design.penalized[k] && st.b[k] != 0.0)
        .map(|k| solver.design.cols[k])
        .collect();
    LassoFit {
        beta,
        lambda,
        active_set,
        objective: solver.objective(st, lambda),
        n_iter,
        converged,
    }
}

/// Warm-started fits along a descending lambda grid.
pub fn lasso_path(family: &GlmFamily, data: &Dataset, config: &LassoConfig) -> Result<Vec<LassoFit>> {
    config.validate(data.p())?;
    data.validate_for(family)?;
    let mut solver = make_solver(family, data, config);
    run_path(&mut solver, config, data.n(), data.p())
}

fn run_path(solver: &mut Solver, config: &LassoConfig, n: usize, p: usize) -> Result<Vec<LassoFit>> {
    let (mut st, free) = null_state(solver)?;
    let mut grad = solver.gradient(&st);
    let lmax = grad
        .iter()
        .zip(&solver.design.penalized)
        .filter(|(_, pen)| **pen)
        .map(|(g, _)| g.abs())
        .fold(0.0, f64::max);
    let grid = resolve_grid(config, lmax, n, p);
    let null_dev = solver.deviance(&st);
    let mut fits = Vec::with_capacity(grid.len());
    let mut ever_active = vec![false; solver.design.k()];
    free.iter().for_each(|&k| ever_active[k] = true);
    let mut prev_lambda = lmax.max(grid[0]);
    let mut prev_rsq = 0.0;
    for (idx, &lambda) in grid.iter().enumerate() {
        // sequential strong rule
        let cutoff = 2.0 * lambda - prev_lambda;
        let mut working: Vec<usize> = (0..solver.design.k())
            .filter(|&k| ever_active[k] || grad[k].abs() >= cutoff)
            .collect();
        let (converged, n_iter) = solver.fit_lambda(lambda, &mut st, &mut working);
        for (k, b) in st.b.iter().enumerate() {
            if *b != 0.0 {
                ever_active[k] = true;
            }
        }
        fits.push(make_fit(solver, &st, lambda, n_iter, converged));
        grad = solver.gradient(&st);
        prev_lambda = lambda;
        if config.early_stop && null_dev > 0.0 {
            let rsq = 1.0 - solver.deviance(&st) / null_dev;
            if rsq > 0.999 || (idx + 1 >= 5 && rsq - prev_rsq < 1e-5 * rsq) {
                break;
            }
            prev_rsq = rsq;
        }
    }
    Ok(fits)
}

/// Single-lambda fit with the objective recorded after every outer iteration.
#[cfg(test)]
pub(crate) fn traced_fit(
    family: &GlmFamily,
    data: &Dataset,
    config: &LassoConfig,
    lambda: f64,
) -> (LassoFit, Vec<f64>) {
    let mut solver = make_solver(family, data, config);
    let (mut st, _) = null_state(&mut solver).unwrap();
    solver.trace = Some(vec![solver.objective(&st, lambda)]);
    let mut working: Vec<usize> = (0..solver.design.k()).collect();
    let (ok, it) = solver.fit_lambda(lambda, &mut st, &mut working);
    let fit = make_fit(&solver, &st, lambda, it, ok);
    (fit, solver.trace.take().unwrap())
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::substream(seed, &[]));
    let mut folds = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// K-fold cross-validation over the lambda grid of the full-data path.
pub fn cv_lasso(
    family: &GlmFamily,
    data: &Dataset,
    config: &LassoConfig,
    k_folds: usize,
    seed: u64,
) -> Result<CvResult> {
    let n = data.n();
    if k_folds < 2 || k_folds > n {
        return Err(Error::invalid(format!("k_folds must lie in 2..={n}, got {k_folds}")));
    }
    let full_path = lasso_path(family, data, config)?;
    if full_path.iter().all(|f| !f.converged) {
        return Err(Error::NonConvergence {
            what: "lasso path (every lambda)",
            iterations: config.max_iter,
        });
    }
    let grid: Vec<f64> = full_path.iter().map(|f| f.lambda).collect();
    let folds = fold_assignment(n, k_folds, seed);
    let fold_config = LassoConfig {
        lambdas: LambdaGrid::Explicit(grid.clone()),
        ..config.clone()
    };

    let per_fold: Vec<Result<Vec<f64>>> = (0..k_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let train_data = data.subset_rows(&train);
            let test_data = data.subset_rows(&test);
            let path = lasso_path(family, &train_data, &fold_config)?;
            Ok(path
                .iter()
                .map(|fit| held_out_deviance(family, &test_data, &fit.beta))
                .collect())
        })
        .collect();
    let per_fold: Vec<Vec<f64>> = per_fold.into_iter().collect::<Result<_>>()?;

    let len = per_fold.iter().map(Vec::len).min().unwrap_or(0).min(grid.len());
    let sizes: Vec<f64> = (0..k_folds)
        .map(|f| folds.iter().filter(|&&g| g == f).count() as f64)
        .collect();
    let mut mean_deviance = Vec::with_capacity(len);
    let mut se_deviance = Vec::with_capacity(len);
    for l in 0..len {
        let total: f64 = per_fold.iter().map(|d| d[l]).sum();
        let mean = total / n as f64;
        let var = per_fold
            .iter()
            .zip(&sizes)
            .map(|(d, &s)| s * (d[l] / s - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        mean_deviance.push(mean);
        se_deviance.push((var / (k_folds as f64 - 1.0)).sqrt());
    }
    let idx_min = mean_deviance
        .iter()
        .enumerate()
        .fold(0, |best, (i, &d)| if d < mean_deviance[best] { i } else { best });
    let bound = mean_deviance[idx_min] + se_deviance[idx_min];
    let idx_1se = (0..=idx_min).find(|&i| mean_deviance[i] <= bound).unwrap_or(idx_min);
    let chosen = if config.one_se_rule { idx_1se } else { idx_min };
    Ok(CvResult {
        lambda_grid: grid[..len].to_vec(),
        mean_deviance,
        se_deviance,
        lambda_min: grid[idx_min],
        lambda_1se: grid[idx_1se],
        lambda_selected: grid[chosen],
        fold_assignment: folds,
        fit: full_path[chosen].clone(),
    })
}

/// Total deviance `2 n [loss(beta) - saturated loss]` on `data`.
pub fn held_out_deviance(family: &GlmFamily, data: &Dataset, beta: &Array1<f64>) -> f64 {
    let eta = data.x().dot(beta);
    eta.iter()
        .zip(data.y().iter())
        .map(|(&a, &y)| family.unit_deviance(y, a))
        .sum()
}

/// Selected model: forced indices united with the fit's active set.
pub fn select_model(fit: &LassoFit, forced: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = forced.iter().chain(&fit.active_set).copied().collect();
    s.sort_unstable();
    s.dedup();
    s
}
