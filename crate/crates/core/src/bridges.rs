//! Brownian and Ornstein–Uhlenbeck bridges pinned at the origin at `t = 0`
//! and at `beta` at the horizon `T`.
//!
//! Both bridges act independently on every latent coordinate. Their drift is
//! affine in the state, `a(t) * x + b(t) * beta`, and their marginal at time
//! `t` is Gaussian with mean `m(t) * beta` and variance `v(t)`:
//!
//! | kind     | a(t)                  | b(t)              | m(t)                 | v(t)                                   |
//! |----------|-----------------------|-------------------|----------------------|----------------------------------------|
//! | Brownian | `-1/(T-t)`            | `1/(T-t)`         | `t/T`                | `t(T-t)/T`                             |
//! | OU       | `-q coth(q(T-t))`     | `q/sinh(q(T-t))`  | `sinh(qt)/sinh(qT)`  | `σ²/q · sinh(qt) sinh(q(T-t))/sinh(qT)` |
//!
//! The Brownian diffusion is the identity; the OU diffusion is `σ·I`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance to the horizon below which the drift is treated as singular.
pub const HORIZON_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeKind {
    Brownian,
    #[serde(alias = "ornstein-uhlenbeck")]
    Ou,
}

impl std::str::FromStr for BridgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brownian" => Ok(BridgeKind::Brownian),
            "ou" | "ornstein-uhlenbeck" => Ok(BridgeKind::Ou),
            other => Err(Error::InvalidBridge(format!("unknown bridge kind {other:?}"))),
        }
    }
}

/// A bridge from `(0, 0)` to `(horizon, beta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSpec {
    pub kind: BridgeKind,
    pub beta: Vec<f64>,
    pub horizon: f64,
    /// OU mean-reversion rate; ignored by the Brownian bridge.
    pub q: f64,
    /// OU diffusion scale; ignored by the Brownian bridge.
    pub sigma: f64,
}

impl BridgeSpec {
    pub fn brownian(beta: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::new(BridgeKind::Brownian, beta, horizon, 1.0, 1.0)
    }

    pub fn ou(beta: Vec<f64>, horizon: f64, q: f64, sigma: f64) -> Result<Self> {
        Self::new(BridgeKind::Ou, beta, horizon, q, sigma)
    }

    pub fn new(kind: BridgeKind, beta: Vec<f64>, horizon: f64, q: f64, sigma: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidBridge(format!("horizon must be positive, got {horizon}")));
        }
        if kind == BridgeKind::Ou && !(q > 0.0 && sigma > 0.0) {
            return Err(Error::InvalidBridge(format!("OU needs q > 0 and sigma > 0, got q={q}, sigma={sigma}")));
        }
        if beta.is_empty() {
            return Err(Error::InvalidBridge("empty endpoint".into()));
        }
        Ok(BridgeSpec {
            kind,
            beta,
            horizon,
            q,
            sigma,
        })
    }

    /// Same bridge with a different tail endpoint.
    pub fn with_beta(&self, beta: Vec<f64>) -> Self {
        BridgeSpec { beta, ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Scalar diffusion coefficient shared by every coordinate.
    pub fn diffusion(&self) -> f64 {
        match self.kind {
            BridgeKind::Brownian => 1.0,
            BridgeKind::Ou => self.sigma,
        }
    }

    /// `(a, b)` such that the drift at `t` is `a * x + b * beta`.
    pub fn drift_coefs(&self, t: f64) -> Result<(f64, f64)> {
        let tau = self.horizon - t;
        if tau < HORIZON_GUARD {
            return Err(Error::HorizonBoundary { t, horizon: self.horizon });
        }
        Ok(match self.kind {
            BridgeKind::Brownian => (-1.0 / tau, 1.0 / tau),
            BridgeKind::Ou => {
                let qt = self.q * tau;
                (-self.q / qt.tanh(), self.q / qt.sinh())
            }
        })
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (a, b) = self.drift_coefs(t)?;
        Ok(x.iter().zip(&self.beta).map(|(xi, bi)| a * xi + b * bi).collect())
    }

    /// Diagonal of the drift Jacobian in `x` (the same for every coordinate).
    pub fn drift_jacobian_diag(&self, t: f64) -> Result<f64> {
        Ok(self.drift_coefs(t)?.0)
    }

    /// `(m, v)`: the marginal at `t` is `N(m * beta, v * I)`.
    pub fn marginal(&self, t: f64) -> Result<(f64, f64)> {
        let big_t = self.horizon;
        if !(t > 0.0 && t < big_t) {
            return Err(Error::TimeDomain { t, horizon: big_t });
        }
        Ok(match self.kind {
            BridgeKind::Brownian => (t / big_t, t * (big_t - t) / big_t),
            BridgeKind::Ou => {
                let q = self.q;
                let denom = (q * big_t).sinh();
                let mean = (q * t).sinh() / denom;
                let var = self.sigma * self.sigma / q * (q * t).sinh() * (q * (big_t - t)).sinh() / denom;
                (mean, var)
            }
        })
    }

    /// Log-density of reaching `x` at time `t`, summed over coordinates.
    pub fn transition_logpdf(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let (m, v) = self.marginal(t)?;
        let sq: f64 = x.iter().zip(&self.beta).map(|(xi, bi)| (xi - m * bi).powi(2)).sum();
        Ok(-0.5 * self.dim() as f64 * (2.0 * PI * v).ln() - sq / (2.0 * v))
    }

    pub fn transition_logpdf_grad(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (m, v) = self.marginal(t)?;
        Ok(x.iter().zip(&self.beta).map(|(xi, bi)| -(xi - m * bi) / v).collect())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape("bridge", format!("state of dim {} for a bridge of dim {}", x.len(), self.dim())));
        }
        Ok(())
    }
}

/// One realized path; `values[k]` is the state at `times[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Euler–Maruyama on the uniform grid `0, dt, …, T - dt`, then the tail pinned
/// exactly to `beta` at `T`. Returns `n_steps + 1` points.
pub fn sample_path<R: Rng + ?Sized>(spec: &BridgeSpec, n_steps: usize, rng: &mut R) -> Result<PathSample> {
    if n_steps < 2 {
        return Err(Error::InvalidConfig(format!("sample_path needs n_steps >= 2, got {n_steps}")));
    }
    let r = spec.dim();
    let dt = spec.horizon / n_steps as f64;
    let noise = spec.diffusion() * dt.sqrt();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut values = Vec::with_capacity(n_steps + 1);
    let mut x = vec![0.0; r];
    for k in 0..n_steps {
        let t = k as f64 * dt;
        times.push(t);
        values.push(x.clone());
        if k + 1 < n_steps {
            let (a, b) = spec.drift_coefs(t)?;
            for (xi, bi) in x.iter_mut().zip(&spec.beta) {
                let xi_noise: f64 = rng.sample(StandardNormal);
                *xi += (a * *xi + b * bi) * dt + noise * xi_noise;
            }
        }
    }
    times.push(spec.horizon);
    values.push(spec.beta.clone());
    Ok(PathSample { times, values })
}

/// Sum of transition log-densities over discrete `(t_i, u_i)` observations.
pub fn discrete_log_goodness(spec: &BridgeSpec, path: &[(f64, Vec<f64>)]) -> Result<f64> {
    path.iter().map(|(t, u)| spec.transition_logpdf(*t, u)).sum()
}

/// Monte-Carlo estimate of `E_Z[∫ ½‖u‖² dt]` with
/// `u = (drift_fn(t, Z) - bridge_drift(t, Z)) / diffusion`, where `Z` follows
/// `drift_fn` with the bridge's diffusion. Integration stops one step before
/// the horizon, at `t_max = T - T/n_steps`.
pub fn kl_path_estimate<R, F>(
    spec: &BridgeSpec,
    mut drift_fn: F,
    n_steps: usize,
    n_paths: usize,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    if n_steps < 2 || n_paths == 0 {
        return Err(Error::InvalidConfig(format!(
            "kl_path_estimate needs n_steps >= 2 and n_paths >= 1, got {n_steps} and {n_paths}"
        )));
    }
    let r = spec.dim();
    let dt = spec.horizon / n_steps as f64;
    let diffusion = spec.diffusion();
    let noise = diffusion * dt.sqrt();
    let mut total = 0.0;
    for _ in 0..n_paths {
        let mut z = vec![0.0; r];
        let mut path_cost = 0.0;
        for k in 0..n_steps - 1 {
            let t = k as f64 * dt;
            let f = drift_fn(t, &z);
            if f.len() != r {
                return Err(Error::shape("kl_path_estimate", format!("drift of dim {} for dim {r}", f.len())));
            }
            let (a, b) = spec.drift_coefs(t)?;
            let mut sq = 0.0;
            for ((zi, fi), bi) in z.iter_mut().zip(&f).zip(&spec.beta) {
                let u = (fi - (a * *zi + b * bi)) / diffusion;
                sq += u * u;
                let xi: f64 = rng.sample(StandardNormal);
                *zi += fi * dt + noise * xi;
            }
            path_cost += 0.5 * sq * dt;
        }
        total += path_cost;
    }
    Ok(total / n_paths as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn brownian_drift_examples() {
        let spec = BridgeSpec::brownian(vec![2.0], 1.0).unwrap();
        assert_eq!(spec.drift(0.0, &[0.0]).unwrap(), vec![2.0]);
        for t in [0.0, 0.3, 0.9] {
            assert_eq!(spec.drift(t, &[2.0]).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn ou_drift_example() {
        let spec = BridgeSpec::ou(vec![1.0], 1.0, 1.0, 1.0).unwrap();
        let d = spec.drift(0.5, &[0.0]).unwrap()[0];
        assert!((d - 1.0 / 0.5f64.sinh()).abs() < 1e-15);
        assert!((d - 1.9190).abs() < 1e-4);
    }

    #[test]
    fn drift_at_horizon_is_an_error() {
        let spec = BridgeSpec::brownian(vec![1.0], 1.0).unwrap();
        assert!(matches!(spec.drift(1.0, &[0.0]), Err(Error::HorizonBoundary { .. })));
        assert!(matches!(spec.drift(1.0 - 1e-10, &[0.0]), Err(Error::HorizonBoundary { .. })));
        assert!(spec.drift(1.0 - 1e-6, &[0.0]).is_ok());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(BridgeSpec::brownian(vec![1.0], 0.0).is_err());
        assert!(BridgeSpec::ou(vec![1.0], 1.0, 0.0, 1.0).is_err());
        assert!(BridgeSpec::ou(vec![1.0], 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn logpdf_at_the_mean() {
        let spec = BridgeSpec::brownian(vec![2.0], 1.0).unwrap();
        let lp = spec.transition_logpdf(0.5, &[1.0]).unwrap();
        assert!((lp - (-0.5 * (2.0 * PI * 0.25).ln())).abs() < 1e-15);
        assert!((lp - (-0.2258)).abs() < 1e-4);

        let spec2 = BridgeSpec::brownian(vec![2.0, 2.0], 1.0).unwrap();
        assert_eq!(spec2.transition_logpdf(0.5, &[1.0, 1.0]).unwrap(), 2.0 * lp);
    }

    #[test]
    fn logpdf_mode_is_the_mean_curve() {
        let spec = BridgeSpec::brownian(vec![1.5, -0.5], 1.0).unwrap();
        let t = 0.3;
        let mode: Vec<f64> = spec.beta.iter().map(|b| t * b).collect();
        let best = spec.transition_logpdf(t, &mode).unwrap();
        for dx in [-0.1, -1e-3, 1e-3, 0.1] {
            let moved = vec![mode[0] + dx, mode[1]];
            assert!(spec.transition_logpdf(t, &moved).unwrap() < best);
        }
    }

    #[test]
    fn logpdf_domain_errors() {
        let spec = BridgeSpec::brownian(vec![1.0], 1.0).unwrap();
        assert!(matches!(spec.transition_logpdf(0.0, &[0.0]), Err(Error::TimeDomain { .. })));
        assert!(matches!(spec.transition_logpdf(1.0, &[0.0]), Err(Error::TimeDomain { .. })));
    }

    #[test]
    fn densities_integrate_to_one() {
        let specs = [
            BridgeSpec::brownian(vec![1.0], 1.0).unwrap(),
            BridgeSpec::ou(vec![1.0], 1.0, 1.0, 1.0).unwrap(),
            BridgeSpec::ou(vec![-2.0], 1.0, 2.5, 0.7).unwrap(),
        ];
        for spec in &specs {
            for t in [0.1, 0.5, 0.9] {
                let mass = simpson(|x| spec.transition_logpdf(t, &[x]).unwrap().exp(), -20.0, 20.0, 80_000);
                assert!((mass - 1.0).abs() < 1e-6, "{:?} t={t}: {mass}", spec.kind);
            }
        }
    }

    #[test]
    fn logpdf_gradient_matches_central_differences() {
        let h = 1e-5;
        for spec in [
            BridgeSpec::brownian(vec![0.7, -1.2], 1.0).unwrap(),
            BridgeSpec::ou(vec![0.7, -1.2], 1.0, 1.3, 0.8).unwrap(),
        ] {
            let x = [0.2, 0.4];
            let g = spec.transition_logpdf_grad(0.35, &x).unwrap();
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (spec.transition_logpdf(0.35, &xp).unwrap() - spec.transition_logpdf(0.35, &xm).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() / g[j].abs().max(1e-8) < 1e-4);
            }
            let a = spec.drift_jacobian_diag(0.35).unwrap();
            let fd = (spec.drift(0.35, &[x[0] + h, x[1]]).unwrap()[0] - spec.drift(0.35, &[x[0] - h, x[1]]).unwrap()[0]) / (2.0 * h);
            assert!((fd - a).abs() / a.abs() < 1e-4);
        }
    }

    #[test]
    fn sampled_paths_are_pinned_and_reproducible() {
        let spec = BridgeSpec::brownian(vec![1.0, -0.5], 1.0).unwrap();
        let p1 = sample_path(&spec, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p2 = sample_path(&spec, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.times.len(), 51);
        assert_eq!(p1.values[0], vec![0.0, 0.0]);
        assert_eq!(p1.values[50], spec.beta);
        assert_eq!(p1.times[50], 1.0);
        assert!(p1.times.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_path(&spec, 1, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn ou_marginal_mean_matches_monte_carlo() {
        // Discriminates sinh(q t)/sinh(q T) from sinh(q (T-t))/sinh(q T) away from t = T/2.
        let spec = BridgeSpec::ou(vec![1.0], 1.0, 2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n_steps, n_paths, k) = (400, 20_000, 100);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_paths {
            let p = sample_path(&spec, n_steps, &mut rng).unwrap();
            sum += p.values[k][0];
            sum_sq += p.values[k][0] * p.values[k][0];
        }
        let t = k as f64 / n_steps as f64;
        let mean = sum / n_paths as f64;
        let var = sum_sq / n_paths as f64 - mean * mean;
        let (m, v) = spec.marginal(t).unwrap();
        let typo_mean = (2.0 * (1.0 - t)).sinh() / 2f64.sinh();
        assert!((mean - m).abs() < 0.02, "mean {mean} vs {m}");
        assert!((mean - typo_mean).abs() > 0.3);
        assert!((var - v).abs() / v < 0.05, "var {var} vs {v}");
    }

    #[test]
    fn kl_is_zero_for_the_bridge_drift() {
        let spec = BridgeSpec::brownian(vec![1.0], 1.0).unwrap();
        let est = kl_path_estimate(&spec, |t, z| spec.drift(t, z).unwrap(), 1000, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(est.abs() < 1e-6);
    }

    #[test]
    fn kl_of_constant_offset() {
        let spec = BridgeSpec::brownian(vec![1.0], 1.0).unwrap();
        let run = |c: f64| {
            kl_path_estimate(
                &spec,
                |t, z| spec.drift(t, z).unwrap().into_iter().map(|v| v + c).collect(),
                1000,
                200,
                &mut ChaCha8Rng::seed_from_u64(5),
            )
            .unwrap()
        };
        let t_max = 1.0 - 1.0 / 1000.0;
        let one = run(1.0);
        assert!((one - 0.5 * t_max).abs() / (0.5 * t_max) < 0.05);
        let two = run(2.0);
        assert!((two / one - 4.0).abs() < 0.2);
    }

    #[test]
    fn empty_path_goodness_is_zero() {
        let spec = BridgeSpec::brownian(vec![1.0], 1.0).unwrap();
        assert_eq!(discrete_log_goodness(&spec, &[]).unwrap(), 0.0);
    }

    #[test]
    fn goodness_on_the_mean_curve() {
        let spec = BridgeSpec::brownian(vec![2.0, -1.0, 0.5], 1.0).unwrap();
        let ts = [0.2, 0.4, 0.6, 0.8];
        let path: Vec<(f64, Vec<f64>)> = ts.iter().map(|&t| (t, spec.beta.iter().map(|b| t * b).collect())).collect();
        let expected: f64 = ts.iter().map(|t| -1.5 * (2.0 * PI * t * (1.0 - t)).ln()).sum();
        assert!((discrete_log_goodness(&spec, &path).unwrap() - expected).abs() < 1e-12);

        let single = BridgeSpec::brownian(vec![2.0], 1.0).unwrap();
        let v = discrete_log_goodness(&single, &[(0.5, vec![1.0])]).unwrap();
        assert!((v - (-0.2258)).abs() < 1e-4);
    }
}
