//! Reference implementations shared by the integration tests. They use the
//! plain O(n²) pair loop and textbook formulas, independent of the library.
#![allow(dead_code)]

use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

pub struct Reference {
    pub coefficient: f64,
    pub p_value: f64,
}

/// Pearson via the pairwise-difference identity
/// `r = sum_{i<j} dx dy / sqrt(sum dx² · sum dy²)`, p-value via the
/// regularized incomplete beta function.
pub fn pearson_brute(x: &[f64], y: &[f64]) -> Reference {
    let n = x.len();
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t2 = r * r * df / (1.0 - r * r);
        beta_reg(df / 2.0, 0.5, df / (df + t2))
    };
    Reference { coefficient: r, p_value: p }
}

/// Tau-b from an explicit loop over all pairs, with the tie-corrected
/// normal approximation for the p-value.
pub fn kendall_brute(x: &[f64], y: &[f64]) -> Reference {
    let n = x.len();
    let (mut score, mut tx, mut ty) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
            let b = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            score += (a * b) as i64;
            tx += i64::from(x[i] == x[j]);
            ty += i64::from(y[i] == y[j]);
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let tau = score as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt();

    let groups = |v: &[f64]| -> Vec<f64> {
        let mut counts: Vec<(f64, f64)> = Vec::new();
        for &a in v {
            match counts.iter_mut().find(|(val, _)| *val == a) {
                Some(c) => c.1 += 1.0,
                None => counts.push((a, 1.0)),
            }
        }
        counts.into_iter().map(|(_, c)| c).collect()
    };
    let (gx, gy) = (groups(x), groups(y));
    let nf = n as f64;
    let s = |g: &[f64], f: &dyn Fn(f64) -> f64| g.iter().map(|&t| f(t)).sum::<f64>();
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt = s(&gx, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = s(&gy, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = s(&gx, &|t| t * (t - 1.0)) * s(&gy, &|t| t * (t - 1.0)) / (2.0 * nf * (nf - 1.0));
    let v2 = if n > 2 {
        s(&gx, &|t| t * (t - 1.0) * (t - 2.0)) * s(&gy, &|t| t * (t - 1.0) * (t - 2.0)) / (9.0 * nf * (nf - 1.0) * (nf - 2.0))
    } else {
        0.0
    };
    let var = (v0 - vt - vu) / 18.0 + v1 + v2;
    let p = if var <= 0.0 { 1.0 } else { erfc((score as f64 / var.sqrt()).abs() / std::f64::consts::SQRT_2).min(1.0) };
    Reference { coefficient: tau, p_value: p }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

pub mod grad;
