//! Shared generators and independent reference implementations.
#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use splitdl::glm::{loss, score};
use splitdl::{Dataset, FamilyKind, GlmFamily, LassoFit};

pub const FAMILIES: [FamilyKind; 3] = [FamilyKind::Gaussian, FamilyKind::Binomial, FamilyKind::Poisson];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian covariates and a response from a model whose first three slopes
/// are nonzero, scaled by `strength`.
pub fn random_data(kind: FamilyKind, n: usize, p: usize, strength: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let cov = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut r));
    let slopes: Vec<f64> = (0..p).map(|j| [1.0, -0.7, 0.5].get(j).copied().unwrap_or(0.0)).collect();
    let fam = GlmFamily::new(kind);
    let y = Array1::from_shape_fn(n, |i| {
        let a: f64 = strength * (0..p).map(|j| cov[[i, j]] * slopes[j]).sum::<f64>();
        draw(&fam, a, &mut r)
    });
    Dataset::from_covariates(y, &cov, None).unwrap()
}

pub fn draw(fam: &GlmFamily, eta: f64, r: &mut ChaCha8Rng) -> f64 {
    match fam.kind {
        FamilyKind::Gaussian => eta + r.sample::<f64, _>(StandardNormal),
        FamilyKind::Binomial => (r.random::<f64>() < 1.0 / (1.0 + (-eta).exp())) as u8 as f64,
        FamilyKind::Poisson => Poisson::new(eta.exp()).unwrap().sample(r),
    }
}

pub fn random_beta(k: usize, scale: f64, seed: u64) -> Array1<f64> {
    let mut r = rng(seed);
    Array1::from_shape_fn(k, |_| scale * r.sample::<f64, _>(StandardNormal))
}

/// Central differences of the mean loss.
pub fn fd_score(fam: &GlmFamily, data: &Dataset, beta: ArrayView1<f64>, h: f64) -> Array1<f64> {
    Array1::from_shape_fn(beta.len(), |j| {
        let mut up = beta.to_owned();
        let mut dn = beta.to_owned();
        up[j] += h;
        dn[j] -= h;
        (loss(fam, data, up.view()).unwrap() - loss(fam, data, dn.view()).unwrap()) / (2.0 * h)
    })
}

/// Central differences of the analytic score.
pub fn fd_hessian(fam: &GlmFamily, data: &Dataset, beta: ArrayView1<f64>, h: f64) -> Array2<f64> {
    let k = beta.len();
    let mut out = Array2::zeros((k, k));
    for j in 0..k {
        let mut up = beta.to_owned();
        let mut dn = beta.to_owned();
        up[j] += h;
        dn[j] -= h;
        let d = (score(fam, data, up.view()).unwrap() - score(fam, data, dn.view()).unwrap()) / (2.0 * h);
        out.column_mut(j).assign(&d);
    }
    out
}

/// Population standard deviation of each covariate, intercept slot zero.
pub fn column_sd(data: &Dataset) -> Array1<f64> {
    let x = data.x();
    Array1::from_shape_fn(x.ncols(), |j| {
        if j == 0 {
            return 0.0;
        }
        let c = x.column(j);
        let m = c.mean().unwrap();
        (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64).sqrt()
    })
}

/// Largest violation of the subgradient conditions for
/// `loss + lambda * sum_j w_j |beta_j|` with `w_j` the column sd (or 1).
pub fn kkt_violation(fam: &GlmFamily, data: &Dataset, fit: &LassoFit, standardize: bool) -> f64 {
    let g = score(fam, data, fit.beta.view()).unwrap();
    let sd = column_sd(data);
    let mut worst = g[0].abs();
    for j in 1..g.len() {
        if sd[j] == 0.0 {
            continue;
        }
        let w = if standardize { sd[j] } else { 1.0 };
        let bound = fit.lambda * w;
        let b = fit.beta[j];
        let v = if b == 0.0 {
            (g[j].abs() - bound).max(0.0)
        } else {
            (g[j] + bound * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

fn soft(z: f64, t: f64) -> f64 {
    z.signum() * (z.abs() - t).max(0.0)
}

/// Accelerated proximal gradient for the weighted lasso with an unpenalized
/// intercept, run to a tight fixed point.
pub fn proximal_lasso(fam: &GlmFamily, data: &Dataset, lambda: f64, weights: &Array1<f64>) -> Array1<f64> {
    let k = data.x().ncols();
    let obj = |b: &Array1<f64>| {
        loss(fam, data, b.view()).unwrap() + lambda * b.iter().zip(weights).skip(1).map(|(v, w)| w * v.abs()).sum::<f64>()
    };
    let prox = |v: Array1<f64>, step: f64| -> Array1<f64> {
        Array1::from_shape_fn(k, |j| if j == 0 { v[0] } else { soft(v[j], step * lambda * weights[j]) })
    };
    let mut b = Array1::<f64>::zeros(k);
    let mut y = b.clone();
    let mut t = 1.0_f64;
    let mut step = 1.0_f64;
    for _ in 0..200_000 {
        let g = score(fam, data, y.view()).unwrap();
        let fy = loss(fam, data, y.view()).unwrap();
        let next = loop {
            let cand = prox(&y - &(&g * step), step);
            let d = &cand - &y;
            let quad = fy + g.dot(&d) + d.dot(&d) / (2.0 * step);
            if loss(fam, data, cand.view()).unwrap() <= quad + 1e-15 {
                break cand;
            }
            step *= 0.5;
        };
        // restart momentum when the objective rises
        let t_next = if obj(&next) > obj(&b) { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let diff = (&next - &b).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        y = &next + &((&next - &b) * ((t - 1.0) / t_next));
        b = next;
        t = t_next;
        if diff < 1e-14 {
            break;
        }
    }
    b
}

/// Solve `a x = rhs` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Array2<f64>, rhs: &Array1<f64>) -> Array1<f64> {
    let k = a.nrows();
    let mut m = a.clone();
    let mut v = rhs.clone();
    for c in 0..k {
        let piv = (c..k).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
        if piv != c {
            for j in 0..k {
                m.swap([c, j], [piv, j]);
            }
            v.swap(c, piv);
        }
        for r in (c + 1)..k {
            let f = m[[r, c]] / m[[c, c]];
            for j in c..k {
                m[[r, j]] -= f * m[[c, j]];
            }
            v[r] -= f * v[c];
        }
    }
    let mut x = Array1::zeros(k);
    for r in (0..k).rev() {
        let s: f64 = ((r + 1)..k).map(|j| m[[r, j]] * x[j]).sum();
        x[r] = (v[r] - s) / m[[r, r]];
    }
    x
}

/// Ordinary least squares through the normal equations.
pub fn ols(data: &Dataset) -> Array1<f64> {
    let x = data.x();
    gauss_solve(&x.t().dot(x), &x.t().dot(data.y()))
}

/// Maximum likelihood by gradient descent with Armijo backtracking.
pub fn gradient_descent_mle(fam: &GlmFamily, data: &Dataset) -> Array1<f64> {
    let k = data.x().ncols();
    let mut b = Array1::<f64>::zeros(k);
    let mut step = 1.0;
    for _ in 0..500_000 {
        let g = score(fam, data, b.view()).unwrap();
        if g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < 1e-12 {
            break;
        }
        let f0 = loss(fam, data, b.view()).unwrap();
        let gg = g.dot(&g);
        step *= 2.0;
        loop {
            let cand = &b - &(&g * step);
            if loss(fam, data, cand.view()).unwrap() <= f0 - 0.5 * step * gg {
                b = cand;
                break;
            }
            step *= 0.5;
        }
    }
    b
}

/// Holm adjustment by closed testing with Bonferroni local tests: the
/// adjusted p-value of `i` is the largest `|I| min_{j in I} p_j` over index
/// sets `I` containing `i`, capped at one. Exponential in the length.
pub fn holm_closed_testing(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    (0..m)
        .map(|i| {
            let mut worst = 0.0_f64;
            for mask in 0u32..(1 << m) {
                if mask & (1 << i) == 0 {
                    continue;
                }
                let size = mask.count_ones() as f64;
                let min = (0..m).filter(|&j| mask & (1 << j) != 0).map(|j| p[j]).fold(f64::INFINITY, f64::min);
                worst = worst.max((size * min).min(1.0));
            }
            worst
        })
        .collect()
}

/// Holm adjustment read straight off the step-down definition:
/// `max_{j : p_j <= p_i} min(1, (m - r_j + 1) p_j)` with `r_j` the
/// smallest rank of `p_j`.
pub fn holm_step_down(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let rank = |j: usize| 1 + p.iter().filter(|&&q| q < p[j]).count();
    (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| p[j] <= p[i])
                .map(|j| ((m - rank(j) + 1) as f64 * p[j]).min(1.0))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// The split variance written out term by term from its definition.
pub fn split_variance_by_definition(beta: &Array2<f64>, v: &Array2<u8>, n2: usize) -> Array2<f64> {
    let (b, k) = beta.dim();
    let n = v.ncols();
    let (nf, n2f, bf) = (n as f64, n2 as f64, b as f64);
    let mut bhat = vec![0.0; k];
    for j in 0..k {
        for s in 0..b {
            bhat[j] += beta[[s, j]] / bf;
        }
    }
    let mut vbar = vec![0.0; n];
    for i in 0..n {
        for s in 0..b {
            vbar[i] += v[[s, i]] as f64 / bf;
        }
    }
    let mut out = Array2::zeros((k, k));
    for j in 0..k {
        for l in 0..k {
            let mut first = 0.0;
            for i in 0..n {
                let mut cj = 0.0;
                let mut cl = 0.0;
                for s in 0..b {
                    let dv = v[[s, i]] as f64 - vbar[i];
                    cj += dv * (beta[[s, j]] - bhat[j]) / bf;
                    cl += dv * (beta[[s, l]] - bhat[l]) / bf;
                }
                first += cj * cl;
            }
            let mut second = 0.0;
            for s in 0..b {
                second += (beta[[s, j]] - bhat[j]) * (beta[[s, l]] - bhat[l]);
            }
            out[[j, l]] = nf * (nf - 1.0) / ((nf - n2f) * (nf - n2f)) * first - nf * n2f / (bf * bf * (nf - n2f)) * second;
        }
    }
    out
}

/// Random sampling indicators with exactly `n2` ones per row.
pub fn random_indicators(n: usize, n2: usize, b: usize, seed: u64) -> Array2<u8> {
    let mut r = rng(seed);
    let mut v = Array2::zeros((b, n));
    for s in 0..b {
        for i in rand::seq::index::sample(&mut r, n, n2) {
            v[[s, i]] = 1;
        }
    }
    v
}

pub fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}
