//! Flat JSON experiment configuration.
//!
//! Every key is explicit and every default is written back out with the
//! results, so a run is fully described by its effective config. Keys that
//! only affect scheduling (`output_dir`, `workers`) are left out of the hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hurst: f64,
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    /// Drift a, per unit time.
    pub drift_a_per_time: f64,
    pub sigma: f64,
    pub seed: u64,

    pub grid_n: usize,
    pub sample_paths: usize,
    pub centering_paths: usize,
    /// Leading paths written out node by node by `simulate`.
    pub path_dump_count: usize,
    pub law_paths: usize,

    pub nested_grid_n: usize,
    pub nested_paths: usize,
    pub inner_paths: usize,
    pub subgrid_stride: usize,
    pub dphi_paths: usize,
    pub fd_check_paths: usize,
    pub clark_ocone_paths: usize,
    pub clark_ocone_grids: Vec<usize>,

    pub tail_points_x: Vec<f64>,
    pub mgf_lambdas: Vec<f64>,
    pub kde_bootstrap: usize,
    pub kde_grid_points: usize,
    /// Fixed KDE bandwidth in X units; null selects the Silverman rule.
    pub kde_bandwidth_x: Option<f64>,
    pub w_bins_per_side: usize,

    pub kernel_hursts: Vec<f64>,
    pub kernel_times: Vec<f64>,
    /// (H, T) pairs for the squared time-integral identity.
    pub double_integral_cases: Vec<[f64; 2]>,
    pub tolerance_ch_rel: f64,
    pub tolerance_energy_continuous_rel: f64,
    pub tolerance_energy_discrete_rel: f64,
    pub tolerance_double_integral_rel: f64,
    pub tolerance_covariance_abs: f64,
    /// Multiplies the calibrated c_H everywhere; 1 except in fault drills.
    pub kernel_ch_scale: f64,

    pub budget_seconds: Option<f64>,
    pub output_dir: String,
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hurst: 0.7,
            horizon_t: 1.0,
            drift_a_per_time: 0.0,
            sigma: 1.0,
            seed: 20_240_611,
            grid_n: 256,
            sample_paths: 1_000_000,
            centering_paths: 100_000,
            path_dump_count: 16,
            law_paths: 100_000,
            nested_grid_n: 64,
            nested_paths: 10_000,
            inner_paths: 200,
            subgrid_stride: 4,
            dphi_paths: 2_000,
            fd_check_paths: 20,
            clark_ocone_paths: 10_000,
            clark_ocone_grids: vec![64, 256],
            tail_points_x: vec![-0.5, -1.0, -1.5, -2.0],
            mgf_lambdas: vec![0.5, 1.0, 2.0],
            kde_bootstrap: 100,
            kde_grid_points: 1024,
            kde_bandwidth_x: None,
            w_bins_per_side: 12,
            kernel_hursts: vec![0.55, 0.7, 0.9],
            kernel_times: vec![0.5, 1.0, 2.0],
            double_integral_cases: vec![[0.7, 1.0], [0.6, 2.0]],
            tolerance_ch_rel: 1e-8,
            tolerance_energy_continuous_rel: 1e-6,
            tolerance_energy_discrete_rel: 5e-3,
            tolerance_double_integral_rel: 1e-4,
            tolerance_covariance_abs: 1e-6,
            kernel_ch_scale: 1.0,
            budget_seconds: None,
            output_dir: "out".into(),
            workers: None,
        }
    }
}

const UNHASHED: [&str; 2] = ["output_dir", "workers"];

const SIMULATION_KEYS: [&str; 9] = [
    "hurst",
    "horizon_T",
    "drift_a_per_time",
    "sigma",
    "seed",
    "grid_n",
    "sample_paths",
    "centering_paths",
    "kernel_ch_scale",
];

const NESTED_KEYS: [&str; 10] = [
    "hurst",
    "horizon_T",
    "drift_a_per_time",
    "sigma",
    "seed",
    "nested_grid_n",
    "nested_paths",
    "inner_paths",
    "subgrid_stride",
    "kernel_ch_scale",
];

fn digest(v: &Value) -> String {
    // serde_json maps are ordered by key, so this is canonical
    let bytes = serde_json::to_vec(v).expect("config values are finite");
    hex::encode(Sha256::digest(&bytes))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn subset(&self, keys: &[&str], tag: &str) -> Value {
        let full = self.value();
        let mut map = serde_json::Map::new();
        for k in keys {
            map.insert((*k).to_string(), full[*k].clone());
        }
        map.insert("code_version".into(), CODE_VERSION.into());
        map.insert("cache".into(), tag.into());
        Value::Object(map)
    }

    /// The config without the scheduling keys; this is what outputs echo.
    pub fn hashed_value(&self) -> Value {
        let mut v = self.value();
        let map = v.as_object_mut().expect("config is an object");
        for k in UNHASHED {
            map.remove(k);
        }
        v
    }

    /// Hash of everything that can change an output byte.
    pub fn hash(&self) -> String {
        let mut v = self.hashed_value();
        v["code_version"] = CODE_VERSION.into();
        digest(&v)
    }

    /// Cache key for the (F, X) sample batch.
    pub fn simulation_hash(&self) -> String {
        digest(&self.subset(&SIMULATION_KEYS, "samples"))
    }

    /// Cache key for a nested batch; `dphi_paths` > 0 selects the D_sΦ run.
    pub fn nested_hash(&self, dphi_paths: usize) -> String {
        let mut v = self.subset(&NESTED_KEYS, "nested");
        v["dphi_paths"] = dphi_paths.into();
        digest(&v)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !(self.hurst > 0.5 && self.hurst < 1.0) {
            return bad(format!("hurst must lie in (0.5, 1), got {}", self.hurst));
        }
        if !(self.horizon_t.is_finite() && self.horizon_t > 0.0) {
            return bad(format!("horizon_T must be positive, got {}", self.horizon_t));
        }
        if !self.drift_a_per_time.is_finite() {
            return bad("drift_a_per_time must be finite".into());
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.kernel_ch_scale.is_finite() && self.kernel_ch_scale > 0.0) {
            return bad(format!("kernel_ch_scale must be positive, got {}", self.kernel_ch_scale));
        }
        for (name, n) in [("grid_n", self.grid_n), ("nested_grid_n", self.nested_grid_n)] {
            if n < 8 {
                return bad(format!("{name} must be at least 8, got {n}"));
            }
        }
        if self.subgrid_stride == 0 || self.subgrid_stride > self.nested_grid_n {
            return bad(format!("subgrid_stride must lie in 1..=nested_grid_n, got {}", self.subgrid_stride));
        }
        if self.inner_paths < expfbm::malliavin::MIN_INNER_PATHS {
            return bad(format!(
                "inner_paths must be at least {}, got {}",
                expfbm::malliavin::MIN_INNER_PATHS,
                self.inner_paths
            ));
        }
        if self.centering_paths < 1000 {
            return bad(format!("centering_paths must be at least 1000, got {}", self.centering_paths));
        }
        if self.kde_bootstrap < expfbm::density::MIN_BOOTSTRAP {
            return bad(format!("kde_bootstrap must be at least {}", expfbm::density::MIN_BOOTSTRAP));
        }
        if let Some(h) = self.kde_bandwidth_x {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("kde_bandwidth_x must be positive, got {h}"));
            }
        }
        if self.clark_ocone_grids.windows(2).any(|w| w[1] <= w[0]) {
            return bad("clark_ocone_grids must be strictly increasing".into());
        }
        if self.kernel_hursts.iter().any(|&h| !(h > 0.5 && h < 1.0)) {
            return bad("kernel_hursts must lie in (0.5, 1)".into());
        }
        if self.kernel_times.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
            return bad("kernel_times must be positive".into());
        }
        if let Some(b) = self.budget_seconds {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("budget_seconds must be positive, got {b}"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn model(&self) -> Result<expfbm::functional::ModelParams, CliError> {
        Ok(expfbm::functional::ModelParams::new(self.drift_a_per_time, self.sigma, self.hurst, self.horizon_t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"horizon_T\""));
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"hurst": 0.8}"#).unwrap();
        assert_eq!(c.hurst, 0.8);
        assert_eq!(c.grid_n, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"horizon": 1.0}"#).is_err());
    }

    #[test]
    fn hash_ignores_scheduling_keys() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.workers = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.simulation_hash(), b.simulation_hash());
    }

    #[test]
    fn simulation_hash_ignores_suite_keys() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.inner_paths = 400;
        b.tail_points_x.push(-3.0);
        assert_eq!(a.simulation_hash(), b.simulation_hash());
        assert_ne!(a.nested_hash(0), b.nested_hash(0));
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_errors() {
        let mut c = ExperimentConfig { hurst: 0.4, ..Default::default() };
        assert!(c.validate().is_err());
        c.hurst = 0.7;
        c.subgrid_stride = 0;
        assert!(c.validate().is_err());
        c.subgrid_stride = 4;
        c.inner_paths = 20;
        assert!(c.validate().is_err());
    }
}
