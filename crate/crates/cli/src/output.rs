//! Result documents and CSV provenance headers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use expfbm::paths::OutputHeader;
use expfbm::report::{BoundReport, DEFAULT_REL_TOL, SE_MULTIPLIER};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{CliError, ExperimentConfig, CODE_VERSION};

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub bound_id: String,
    pub statement: String,
    pub passed: bool,
    pub points_checked: usize,
    pub violations: usize,
    pub inconclusive: usize,
}

impl SummaryRow {
    pub fn of(r: &BoundReport) -> Self {
        Self {
            bound_id: r.bound_id.clone(),
            statement: r.description.clone(),
            passed: r.passed,
            points_checked: r.points_checked,
            violations: r.violations,
            inconclusive: r.inconclusive,
        }
    }
}

pub fn tolerances(cfg: &ExperimentConfig) -> Value {
    json!({
        "bound_rel": DEFAULT_REL_TOL,
        "bound_se_multiplier": SE_MULTIPLIER,
        "ch_rel": cfg.tolerance_ch_rel,
        "energy_continuous_rel": cfg.tolerance_energy_continuous_rel,
        "energy_discrete_rel": cfg.tolerance_energy_discrete_rel,
        "double_integral_rel": cfg.tolerance_double_integral_rel,
        "covariance_abs": cfg.tolerance_covariance_abs,
    })
}

/// The JSON document every command writes.
pub struct Document<'a> {
    pub command: &'static str,
    pub cfg: &'a ExperimentConfig,
    pub hash: &'a str,
    pub grid_n: usize,
    pub reports: Vec<BoundReport>,
    /// Failed checks that are not bound reports (kernel identities).
    pub extra_failures: Vec<String>,
    pub complete: bool,
    pub results: Value,
}

impl Document<'_> {
    pub fn passed(&self) -> bool {
        self.extra_failures.is_empty() && self.reports.iter().all(|r| r.passed)
    }

    pub fn to_value(&self) -> Value {
        let failures: Vec<String> = self
            .extra_failures
            .iter()
            .cloned()
            .chain(self.reports.iter().filter(|r| !r.passed).map(|r| r.bound_id.clone()))
            .collect();
        json!({
            "command": self.command,
            "code_version": CODE_VERSION,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "grid_n": self.grid_n,
            "reduction": "results collected in index order, reduced sequentially",
            "tolerances": tolerances(self.cfg),
            "config": self.cfg.hashed_value(),
            "passed": self.passed(),
            "complete": self.complete,
            "failures": failures,
            "summary": self.reports.iter().map(SummaryRow::of).collect::<Vec<_>>(),
            "reports": self.reports,
            "results": self.results,
        })
    }

    /// Writes `<out>/<command>.json` and returns its path.
    pub fn write(&self, out: &Path) -> Result<(PathBuf, String), CliError> {
        let text = serde_json::to_string_pretty(&self.to_value()).expect("document serializes") + "\n";
        let path = out.join(format!("{}.json", self.command));
        fs::write(&path, &text).map_err(CliError::io(&path))?;
        Ok((path, text))
    }
}

pub fn header(cfg: &ExperimentConfig, hash: &str, grid_n: usize, c_h: f64, extra: &[(&str, String)]) -> OutputHeader {
    let mut all = vec![
        ("tolerance_bound_rel".to_string(), format!("{DEFAULT_REL_TOL:e}")),
        ("tolerance_se_multiplier".to_string(), format!("{SE_MULTIPLIER}")),
        ("tolerance_energy_discrete_rel".to_string(), format!("{:e}", cfg.tolerance_energy_discrete_rel)),
    ];
    all.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    OutputHeader {
        code_version: CODE_VERSION.into(),
        config_hash: hash.into(),
        seed: cfg.seed,
        hurst: cfg.hurst,
        horizon: cfg.horizon_t,
        grid_n,
        c_h,
        extra: all,
    }
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_file<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let file = fs::File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(CliError::io(path))
}
