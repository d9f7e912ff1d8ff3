//! Dense symmetric factorizations and normal-distribution helpers.

use ndarray::{Array1, Array2};

/// Relative pivot threshold below which a column is treated as collinear.
pub const DROP_TOLERANCE: f64 = 1e-10;

/// Result of a diagonally pivoted Cholesky factorization.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    /// Column order chosen by pivoting; the first `rank` are retained.
    pub order: Vec<usize>,
    pub rank: usize,
}

impl PivotedCholesky {
    /// Retained column indices in ascending order.
    pub fn retained(&self) -> Vec<usize> {
        let mut r = self.order[..self.rank].to_vec();
        r.sort_unstable();
        r
    }

    /// Dropped column indices in ascending order.
    pub fn dropped(&self) -> Vec<usize> {
        let mut d = self.order[self.rank..].to_vec();
        d.sort_unstable();
        d
    }
}

/// Pivoted Cholesky of a symmetric PSD matrix. Stops once the largest
/// remaining pivot falls below `rel_tol` times the largest pivot seen.
pub fn pivoted_cholesky(a: &Array2<f64>, rel_tol: f64) -> PivotedCholesky {
    let k = a.nrows();
    let mut work = a.clone();
    let mut order: Vec<usize> = (0..k).collect();
    let max_diag = (0..k).map(|i| a[[i, i]]).fold(0.0_f64, f64::max);
    let threshold = rel_tol * max_diag;
    let mut rank = 0;
    for step in 0..k {
        // pick the largest remaining diagonal
        let (best, best_val) = (step..k)
            .map(|i| (i, work[[order[i], order[i]]]))
            .fold((step, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if !(best_val > threshold) || max_diag <= 0.0 {
            break;
        }
        order.swap(step, best);
        let piv = order[step];
        let d = best_val.sqrt();
        // Schur-complement update of the remaining block (lower factor stored in `work`)
        for &r in &order[step + 1..] {
            work[[r, piv]] /= d;
        }
        for ii in (step + 1)..k {
            let r = order[ii];
            let lr = work[[r, piv]];
            for &c in &order[step + 1..=ii] {
                let v = work[[r, c]] - lr * work[[c, piv]];
                work[[r, c]] = v;
                work[[c, r]] = v;
            }
        }
        rank += 1;
    }
    PivotedCholesky { order, rank }
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not
/// numerically positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let k = a.nrows();
    let mut l = Array2::<f64>::zeros((k, k));
    for j in 0..k {
        let mut d = a[[j, j]];
        for m in 0..j {
            d -= l[[j, m]] * l[[j, m]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..k {
            let mut v = a[[i, j]];
            for m in 0..j {
                v -= l[[i, m]] * l[[j, m]];
            }
            l[[i, j]] = v / d;
        }
    }
    Some(l)
}

/// Solve `L L' x = b` given the lower factor.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let k = l.nrows();
    let mut z = b.clone();
    for i in 0..k {
        let mut v = z[i];
        for m in 0..i {
            v -= l[[i, m]] * z[m];
        }
        z[i] = v / l[[i, i]];
    }
    for i in (0..k).rev() {
        let mut v = z[i];
        for m in (i + 1)..k {
            v -= l[[m, i]] * z[m];
        }
        z[i] = v / l[[i, i]];
    }
    z
}

/// Inverse of `L L'` given the lower factor, exactly symmetric.
pub fn cholesky_inverse(l: &Array2<f64>) -> Array2<f64> {
    let k = l.nrows();
    let mut inv = Array2::<f64>::zeros((k, k));
    for c in 0..k {
        let mut e = Array1::zeros(k);
        e[c] = 1.0;
        inv.column_mut(c).assign(&cholesky_solve(l, &e));
    }
    for i in 0..k {
        for j in (i + 1)..k {
            let m = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = m;
            inv[[j, i]] = m;
        }
    }
    inv
}

/// Upper tail of the standard normal, `1 - Phi(z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(z: f64) -> f64 {
    normal_sf(-z)
}

/// Standard normal quantile. Acklam's rational approximation refined by one
/// Halley step, giving close to full double precision on (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}
