//! Natural cubic splines through vector-valued knots.

use crate::error::{Error, Result};

/// Piecewise cubic through `(position, value)` knots with zero second
/// derivative at both ends. Outside the knot span the boundary interval's
/// cubic is extended.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicSpline {
    positions: Vec<f64>,
    dim: usize,
    /// `[a, b, c, d]` per interval and dimension, indexed `interval * dim + j`,
    /// for `a + b s + c s² + d s³` with `s = t - positions[interval]`.
    coefs: Vec<[f64; 4]>,
}

impl CubicSpline {
    pub fn fit_natural(knots: &[(f64, Vec<f64>)]) -> Result<Self> {
        let positions: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let values: Vec<&[f64]> = knots.iter().map(|k| k.1.as_slice()).collect();
        Self::fit_rows(&positions, &values)
    }

    pub fn fit_rows(positions: &[f64], values: &[&[f64]]) -> Result<Self> {
        let n = positions.len();
        if n < 2 {
            return Err(Error::TooFewKnots(n));
        }
        if values.len() != n {
            return Err(Error::shape("fit_natural", format!("{} positions, {} values", n, values.len())));
        }
        if let Some(w) = positions.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::DuplicateKnot { position: w[1] });
        }
        let dim = values[0].len();
        if let Some(bad) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::shape("fit_natural", format!("knot of dim {} among dim {dim}", bad.len())));
        }
        let h: Vec<f64> = positions.windows(2).map(|w| w[1] - w[0]).collect();
        let second = natural_second_derivatives(&h, values, dim);
        let mut coefs = Vec::with_capacity((n - 1) * dim);
        for (i, &hi) in h.iter().enumerate() {
            for j in 0..dim {
                let (y0, y1) = (values[i][j], values[i + 1][j]);
                let (m0, m1) = (second[i * dim + j], second[(i + 1) * dim + j]);
                coefs.push([
                    y0,
                    (y1 - y0) / hi - hi * (2.0 * m0 + m1) / 6.0,
                    m0 / 2.0,
                    (m1 - m0) / (6.0 * hi),
                ]);
            }
        }
        Ok(CubicSpline {
            positions: positions.to_vec(),
            dim,
            coefs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    fn interval(&self, t: f64) -> usize {
        let last = self.positions.len() - 2;
        match self.positions.partition_point(|&p| p <= t) {
            0 => 0,
            k => (k - 1).min(last),
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.eval_derivative(t, 0)
    }

    /// Value (`order = 0`) or the first/second/third derivative at `t`.
    pub fn eval_derivative(&self, t: f64, order: usize) -> Vec<f64> {
        let i = self.interval(t);
        let s = t - self.positions[i];
        self.coefs[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&[a, b, c, d]| match order {
                0 => a + s * (b + s * (c + s * d)),
                1 => b + s * (2.0 * c + 3.0 * s * d),
                2 => 2.0 * c + 6.0 * s * d,
                3 => 6.0 * d,
                _ => 0.0,
            })
            .collect()
    }
}

/// Thomas solve of the natural-boundary system for every dimension at once.
/// Returns second derivatives indexed `knot * dim + j`.
fn natural_second_derivatives(h: &[f64], values: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = values.len();
    let mut m = vec![0.0; n * dim];
    if n < 3 {
        return m;
    }
    let interior = n - 2;
    // Row k (knot k + 1): h[k] M_k + 2(h[k] + h[k+1]) M_{k+1} + h[k+1] M_{k+2} = rhs.
    let mut c_prime = vec![0.0; interior];
    let mut d_prime = vec![0.0; interior * dim];
    for k in 0..interior {
        let lower = h[k];
        let diag = 2.0 * (h[k] + h[k + 1]);
        let upper = h[k + 1];
        let denom = if k == 0 { diag } else { diag - lower * c_prime[k - 1] };
        c_prime[k] = upper / denom;
        for j in 0..dim {
            let rhs = 6.0
                * ((values[k + 2][j] - values[k + 1][j]) / h[k + 1] - (values[k + 1][j] - values[k][j]) / h[k]);
            let prev = if k == 0 { 0.0 } else { d_prime[(k - 1) * dim + j] };
            d_prime[k * dim + j] = (rhs - lower * prev) / denom;
        }
    }
    for k in (0..interior).rev() {
        for j in 0..dim {
            let next = if k + 1 < interior { m[(k + 2) * dim + j] } else { 0.0 };
            m[(k + 1) * dim + j] = d_prime[k * dim + j] - c_prime[k] * next;
        }
    }
    m
}

/// Weights `w` with `spline(t) = Σ_k w[k] · value_k` for any knot values at
/// `positions`. The natural spline is linear in its knot values, so these are
/// the evaluations of the splines through the unit vectors.
pub fn basis_weights(positions: &[f64], t: f64) -> Result<Vec<f64>> {
    let n = positions.len();
    let identity: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let rows: Vec<&[f64]> = identity.iter().map(Vec::as_slice).collect();
    Ok(CubicSpline::fit_rows(positions, &rows)?.eval(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn knots(pairs: &[(f64, f64)]) -> Vec<(f64, Vec<f64>)> {
        pairs.iter().map(|&(p, v)| (p, vec![v])).collect()
    }

    #[test]
    fn two_knots_are_linear() {
        let s = CubicSpline::fit_natural(&knots(&[(0.0, 0.0), (1.0, 2.0)])).unwrap();
        assert_eq!(s.eval(0.5), vec![1.0]);
        assert_eq!(s.eval(-0.5), vec![-1.0]);
    }

    #[test]
    fn three_knot_hand_value() {
        let s = CubicSpline::fit_natural(&knots(&[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)])).unwrap();
        assert!((s.eval(0.25)[0] - 0.6875).abs() < 1e-12);
        assert!((s.eval_derivative(0.5, 2)[0] + 12.0).abs() < 1e-12);
    }

    #[test]
    fn knot_errors() {
        assert!(matches!(CubicSpline::fit_natural(&knots(&[(0.0, 1.0)])), Err(Error::TooFewKnots(1))));
        assert!(matches!(
            CubicSpline::fit_natural(&knots(&[(0.0, 1.0), (1.0, 0.0), (1.0, 2.0)])),
            Err(Error::DuplicateKnot { .. })
        ));
        assert!(CubicSpline::fit_natural(&knots(&[(1.0, 1.0), (0.0, 0.0)])).is_err());
    }

    #[test]
    fn interpolates_and_has_natural_ends() {
        let pts = [(0.0, 1.0), (1.0, -2.0), (2.5, 0.5), (3.0, 4.0), (4.2, -1.0)];
        let s = CubicSpline::fit_natural(&knots(&pts)).unwrap();
        for &(p, v) in &pts {
            assert!((s.eval(p)[0] - v).abs() <= 1e-10);
        }
        assert!(s.eval_derivative(0.0, 2)[0].abs() <= 1e-8);
        assert!(s.eval_derivative(4.2, 2)[0].abs() <= 1e-8);
    }

    #[test]
    fn smooth_across_interior_knots() {
        let pts = [(0.0, 0.3), (1.0, -1.0), (2.0, 2.0), (3.0, 0.0), (4.0, 1.0)];
        let s = CubicSpline::fit_natural(&knots(&pts)).unwrap();
        let f = |t: f64| s.eval(t)[0];
        let h = 1e-4;
        for &(p, _) in &pts[1..4] {
            // central differences just either side of the knot, one piece each
            let d1 = |c: f64| (f(c + h) - f(c - h)) / (2.0 * h);
            let d2 = |c: f64| (f(c + h) - 2.0 * f(c) + f(c - h)) / (h * h);
            let (left, right) = (p - 2.0 * h, p + 2.0 * h);
            // a continuous derivative only drifts by (next derivative) x 4h between the probes
            let second = s.eval_derivative(p, 2)[0].abs() + 1.0;
            assert!((d1(left) - d1(right)).abs() <= 4.0 * h * second + 1e-6);
            let third = s.eval_derivative(left, 3)[0].abs().max(s.eval_derivative(right, 3)[0].abs());
            let jump = (d2(left) - d2(right)).abs();
            assert!(jump <= 4.0 * h * third + 1e-5, "jump {jump} at {p}");
            assert!((f(p + 1e-9) - f(p - 1e-9)).abs() < 1e-6);
        }
    }

    #[test]
    fn basis_weights_reproduce_eval() {
        let positions = [0.0, 1.0, 2.0, 3.0, 4.0];
        let values = [[0.5, -1.0], [1.5, 0.0], [-0.5, 2.0], [0.0, 1.0], [2.0, -2.0]];
        let rows: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
        let s = CubicSpline::fit_rows(&positions, &rows).unwrap();
        for t in [-1.0, -0.3, 0.0, 1.7, 3.99, 5.0] {
            let w = basis_weights(&positions, t).unwrap();
            let direct = s.eval(t);
            for j in 0..2 {
                let combo: f64 = w.iter().zip(&values).map(|(wk, v)| wk * v[j]).sum();
                assert!((combo - direct[j]).abs() < 1e-12);
            }
        }
    }
}
