//! The exponential functional F = ∫_0^T e^{as + σB^H_s} ds and its moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernel::{covariance, validate_hurst, KernelTable};
use crate::paths::{sample_volterra_path, FbmPath};
use crate::quad::GradedRule;
use crate::report::{BoundReport, BoundTally};
use crate::rng::{Purpose, StreamKey};
use crate::stats::{variance_with_se, MeanAccumulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// a
    pub drift: f64,
    /// σ; zero is accepted as the deterministic limit.
    pub sigma: f64,
    pub hurst: f64,
    pub horizon: f64,
}

impl ModelParams {
    pub fn new(drift: f64, sigma: f64, hurst: f64, horizon: f64) -> Result<Self> {
        validate_hurst(hurst)?;
        if !drift.is_finite() {
            return Err(Error::InvalidParam(format!("drift must be finite, got {drift}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma must be non-negative, got {sigma}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParam(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { drift, sigma, hurst, horizon })
    }

    /// σ²T^{2H}, the scale shared by every bound on X.
    pub fn variance_scale(&self) -> f64 {
        self.sigma * self.sigma * self.horizon.powf(2.0 * self.hurst)
    }

    pub(crate) fn check_table(&self, table: &KernelTable) -> Result<()> {
        if (table.hurst - self.hurst).abs() > 1e-15 || (table.horizon - self.horizon).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!(
                "kernel table (H={}, T={}) does not match model (H={}, T={})",
                table.hurst, table.horizon, self.hurst, self.horizon
            )));
        }
        Ok(())
    }
}

/// Trapezoid weights on a uniform grid with n cells.
pub fn trapezoid_weights(n: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; n + 1];
    w[0] = 0.5 * dt;
    w[n] = 0.5 * dt;
    w
}

/// e^{a t_i + σ B^H_{t_i}} at every grid node.
pub fn integrand(path: &FbmPath, params: &ModelParams) -> Vec<f64> {
    path.grid
        .iter()
        .zip(&path.fbm)
        .map(|(&t, &b)| (params.drift * t + params.sigma * b).exp())
        .collect()
}

/// F by the trapezoidal rule on the path's grid.
pub fn functional_f(path: &FbmPath, params: &ModelParams) -> f64 {
    let n = path.grid.len() - 1;
    let dt = path.grid[n] / n as f64;
    let e = integrand(path, params);
    trapezoid_weights(n, dt).iter().zip(&e).map(|(w, x)| w * x).sum()
}

/// T e^{−|a|T + σ min B^H} ≤ F ≤ T e^{|a|T + σ max B^H}.
pub fn pathwise_bracket(path: &FbmPath, params: &ModelParams) -> (f64, f64) {
    let (lo, hi) = path.min_max();
    let t = params.horizon;
    let a = params.drift.abs() * t;
    (t * (-a + params.sigma * lo).exp(), t * (a + params.sigma * hi).exp())
}

fn moment_rule() -> GradedRule {
    GradedRule::new(20, 30)
}

/// E[F] = ∫_0^T e^{as + σ²s^{2H}/2} ds.
pub fn analytic_mean_f(params: &ModelParams) -> f64 {
    let two_h = 2.0 * params.hurst;
    let s2 = params.sigma * params.sigma;
    moment_rule().integrate(0.0, params.horizon, 0.0, 0.0, |s| {
        (params.drift * s + 0.5 * s2 * s.powf(two_h)).exp()
    })
}

/// E[F²] = ∫∫ e^{a(s+t) + σ²(s^{2H} + t^{2H} + 2R_H(s,t))/2} ds dt.
pub fn analytic_second_moment_f(params: &ModelParams) -> f64 {
    let two_h = 2.0 * params.hurst;
    let s2 = params.sigma * params.sigma;
    let h = params.hurst;
    let outer = GradedRule::new(12, 24);
    let inner = GradedRule::new(12, 24);
    // symmetric integrand: twice the triangle s < t, whose edge s = t
    // carries the |t − s|^{2H} cusp
    2.0 * outer.integrate(0.0, params.horizon, 0.0, 0.0, |t| {
        inner.integrate(0.0, t, 0.0, 0.0, |s| {
            let var = t.powf(two_h) + s.powf(two_h) + 2.0 * covariance(h, t, s);
            (params.drift * (s + t) + 0.5 * s2 * var).exp()
        })
    })
}

/// Per-path values of F and its log, with X filled in once a centering
/// constant is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub path_id: u64,
    pub f: f64,
    pub ln_f: f64,
    pub x: f64,
}

/// The frozen per-experiment estimate of E[ln F].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub mean_ln_f: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Centering {
    pub fn center(&self, ln_f: f64) -> f64 {
        ln_f - self.mean_ln_f
    }
}

/// Monte Carlo estimate of E[ln F] on dedicated centering streams.
pub fn estimate_mean_ln_f(
    table: &KernelTable,
    params: &ModelParams,
    n_paths: usize,
    seed: u64,
    exec: Exec,
) -> Result<Centering> {
    params.check_table(table)?;
    if n_paths < 1000 {
        return Err(Error::InvalidParam(format!("centering needs at least 1000 paths, got {n_paths}")));
    }
    let logs = exec.map(n_paths, |p| {
        let path = sample_volterra_path(table, StreamKey::new(seed, Purpose::Centering, p as u64));
        functional_f(&path, params).ln()
    });
    let acc = MeanAccumulator::from_slice(&logs);
    Ok(Centering { mean_ln_f: acc.mean(), std_error: acc.std_error(), n_paths, seed })
}

pub const BOUND_MEAN_F: &str = "moment-mean-f";
pub const BOUND_VAR_F: &str = "moment-var-f";

/// Sample mean and variance of F against the analytic first moment and the
/// quadrature variance, each within 3 SE.
pub fn verify_moments(fs: &[f64], params: &ModelParams) -> Result<Vec<BoundReport>> {
    if fs.len() < 2 {
        return Err(Error::InvalidParam(format!("moment check needs at least 2 samples, got {}", fs.len())));
    }
    let m1 = analytic_mean_f(params);
    let var = analytic_second_moment_f(params) - m1 * m1;
    let acc = MeanAccumulator::from_slice(fs);
    let mut mean = BoundTally::new(BOUND_MEAN_F, "sample E[F] = analytic E[F] within 3 SE").with_scale(m1).keep_points();
    mean.upper(acc.mean(), (acc.mean() - m1).abs(), 0.0, acc.std_error());
    let (v, v_se) = variance_with_se(fs);
    let mut vt = BoundTally::new(BOUND_VAR_F, "sample Var(F) = quadrature Var(F) within 3 SE").with_scale(var).keep_points();
    vt.upper(v, (v - var).abs(), 0.0, v_se);
    Ok(vec![mean.finish(), vt.finish()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_kernel_table;

    fn params(a: f64, sigma: f64, h: f64, t: f64) -> ModelParams {
        ModelParams::new(a, sigma, h, t).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(ModelParams::new(0.0, -1.0, 0.7, 1.0).is_err());
        assert!(ModelParams::new(0.0, 1.0, 0.4, 1.0).is_err());
        assert!(ModelParams::new(f64::NAN, 1.0, 0.7, 1.0).is_err());
    }

    #[test]
    fn deterministic_limits() {
        let table = build_kernel_table(0.7, 1.0, 256).unwrap();
        let zero = FbmPath::zero(&table);
        let f = functional_f(&zero, &params(1.0, 0.0, 0.7, 1.0));
        assert!((f - (std::f64::consts::E - 1.0)).abs() < 1e-5);
        assert!((functional_f(&zero, &params(0.0, 0.0, 0.7, 1.0)) - 1.0).abs() < 1e-15);
        // a zero path gives the same F for any sigma
        assert_eq!(functional_f(&zero, &params(1.0, 2.0, 0.7, 1.0)), f);
    }

    #[test]
    fn mean_oracle_values() {
        let e1 = std::f64::consts::E - 1.0;
        assert!((analytic_mean_f(&params(1.0, 0.0, 0.7, 1.0)) - e1).abs() < 1e-13);
        // scipy quad at 1e-14 relative
        let m = analytic_mean_f(&params(0.0, 1.0, 0.7, 1.0));
        assert!(((m - 1.2456640637639047) / m).abs() < 1e-10, "{m}");
        let m99 = analytic_mean_f(&params(0.0, 1.0, 0.99, 1.0));
        assert!((1.0..=0.5f64.exp()).contains(&m99));
        assert!(((m99 - 1.1963064026616819) / m99).abs() < 1e-10);
    }

    #[test]
    fn second_moment_oracle_values() {
        assert!((analytic_second_moment_f(&params(0.0, 0.0, 0.7, 2.0)) - 4.0).abs() < 1e-12);
        let e1 = std::f64::consts::E - 1.0;
        assert!((analytic_second_moment_f(&params(1.0, 0.0, 0.7, 1.0)) - e1 * e1).abs() < 1e-12);
        // scipy dblquad over the triangle, doubled
        let m2 = analytic_second_moment_f(&params(0.0, 1.0, 0.7, 1.0));
        assert!(((m2 - 2.2504937874492605) / m2).abs() < 1e-8, "{m2}");
    }

    #[test]
    fn centering_is_deterministic_when_sigma_vanishes() {
        let table = build_kernel_table(0.7, 1.0, 64).unwrap();
        let p = params(0.5, 0.0, 0.7, 1.0);
        let c = estimate_mean_ln_f(&table, &p, 1000, 3, Exec::default()).unwrap();
        assert_eq!(c.std_error, 0.0);
        let exact = ((0.5f64).exp() - 1.0) / 0.5;
        assert!((c.mean_ln_f - exact.ln()).abs() < 1e-4);
        assert!(estimate_mean_ln_f(&table, &p, 999, 3, Exec::default()).is_err());
    }
}
