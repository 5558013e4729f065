//! On-disk cache under `<out>/cache`, keyed by config subhashes.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use expfbm::density::XBatch;
use expfbm::functional::{Centering, FunctionalSample};
use expfbm::kernel::{Kernel, KernelTable, TableOptions};
use expfbm::malliavin::NestedBatch;
use expfbm::Exec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, ExperimentConfig, CODE_VERSION};

pub struct Store {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    code_version: String,
    simulation_hash: String,
    seed: u64,
    grid_n: usize,
    n_paths: usize,
    centering: Centering,
    summary: expfbm::density::BatchSummary,
}

impl Store {
    pub fn new(out: &Path) -> Self {
        Self { root: out.join("cache") }
    }

    fn dir(&self, key: &str) -> Result<PathBuf, CliError> {
        let d = self.root.join(key);
        fs::create_dir_all(&d).map_err(CliError::io(&d))?;
        Ok(d)
    }

    /// Calibrated (and possibly scaled) kernel table, built once per key.
    pub fn table(&self, cfg: &ExperimentConfig, hurst: f64, horizon: f64, n: usize, exec: Exec) -> Result<KernelTable, CliError> {
        let c_h = Kernel::calibrated(hurst)?.c_h() * cfg.kernel_ch_scale;
        let key = format!(
            "{CODE_VERSION}|{:016x}|{:016x}|{n}|{:016x}|{:016x}",
            hurst.to_bits(),
            horizon.to_bits(),
            c_h.to_bits(),
            cfg.tolerance_energy_discrete_rel.to_bits()
        );
        let name = format!("{}.json", hex::encode(&Sha256::digest(key.as_bytes())[..12]));
        let path = self.dir("tables")?.join(name);
        if path.exists() {
            if let Ok(t) = KernelTable::load(&path) {
                if t.n == n && t.hurst == hurst && t.horizon == horizon && t.c_h == c_h {
                    return Ok(t);
                }
            }
        }
        let kernel = Kernel::new(hurst, c_h)?;
        let opts = TableOptions { energy_tolerance: cfg.tolerance_energy_discrete_rel, exec, ..Default::default() };
        let table = KernelTable::build(&kernel, horizon, n, opts)?;
        table.save(&path)?;
        Ok(table)
    }

    fn samples_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join(cfg.simulation_hash())
    }

    pub fn save_samples(&self, cfg: &ExperimentConfig, batch: &XBatch) -> Result<(), CliError> {
        let dir = self.dir(&cfg.simulation_hash())?;
        let bin = dir.join("samples.bin");
        let mut w = BufWriter::new(fs::File::create(&bin).map_err(CliError::io(&bin))?);
        for s in &batch.samples {
            w.write_all(&s.f.to_le_bytes()).map_err(CliError::io(&bin))?;
            w.write_all(&s.ln_f.to_le_bytes()).map_err(CliError::io(&bin))?;
        }
        w.flush().map_err(CliError::io(&bin))?;
        let meta = SampleMeta {
            code_version: CODE_VERSION.into(),
            simulation_hash: cfg.simulation_hash(),
            seed: batch.seed,
            grid_n: batch.grid_n,
            n_paths: batch.samples.len(),
            centering: batch.centering,
            summary: batch.summary,
        };
        // written last: its presence marks a complete entry
        let path = dir.join("samples.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta).expect("meta serializes")).map_err(CliError::io(&path))
    }

    pub fn load_samples(&self, cfg: &ExperimentConfig) -> Result<Option<XBatch>, CliError> {
        let dir = self.samples_dir(cfg);
        let meta_path = dir.join("samples.json");
        if !meta_path.exists() {
            return Ok(None);
        }
        let text = fs::read(&meta_path).map_err(CliError::io(&meta_path))?;
        let Ok(meta) = serde_json::from_slice::<SampleMeta>(&text) else {
            return Ok(None);
        };
        let bin = dir.join("samples.bin");
        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(&bin).map_err(CliError::io(&bin))?)
            .read_to_end(&mut bytes)
            .map_err(CliError::io(&bin))?;
        if bytes.len() != 16 * meta.n_paths {
            return Ok(None);
        }
        let word = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        let samples = bytes
            .chunks_exact(16)
            .enumerate()
            .map(|(p, c)| {
                let (f, ln_f) = (word(&c[..8]), word(&c[8..]));
                FunctionalSample { path_id: p as u64, f, ln_f, x: meta.centering.center(ln_f) }
            })
            .collect();
        Ok(Some(XBatch { seed: meta.seed, grid_n: meta.grid_n, centering: meta.centering, samples, summary: meta.summary }))
    }

    pub fn save_nested(&self, key: &str, batch: &NestedBatch) -> Result<(), CliError> {
        let path = self.dir(key)?.join("nested.json");
        fs::write(&path, serde_json::to_vec(batch).expect("batch serializes")).map_err(CliError::io(&path))
    }

    /// A cached nested batch; unreadable entries count as missing.
    pub fn load_nested(&self, key: &str) -> Option<NestedBatch> {
        let bytes = fs::read(self.root.join(key).join("nested.json")).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}
