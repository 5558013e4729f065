//! fBm path generation and the conditional Gaussian structure given the
//! driving Brownian motion.
//!
//! The default generator is the discrete Volterra map of [`KernelTable`],
//! which keeps the driving increments so conditional laws and Malliavin
//! quantities can be computed. The Cholesky sampler gives the exact joint
//! law on the grid and serves as the reference for the Volterra map.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{trapezoid_weights, ModelParams};
use crate::kernel::{covariance, KernelTable};
use crate::report::{BoundReport, BoundTally};
use crate::rng::{Purpose, StreamKey};
use crate::stats::{ks_critical_value, ks_two_sample, MeanAccumulator};

/// Largest grid accepted by the Cholesky sampler.
pub const MAX_CHOLESKY_GRID: usize = 4096;

/// Brownian increments over the grid cells plus the first cell's singular
/// mode, a standard normal independent of ΔB_1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingNoise {
    pub increments: Vec<f64>,
    pub singular_mode: f64,
}

#[derive(Debug, Clone)]
pub struct FbmPath {
    pub path_id: u64,
    pub seed: u64,
    pub grid: Arc<[f64]>,
    /// `None` for Cholesky-sampled paths.
    pub noise: Option<DrivingNoise>,
    /// B^H at every grid node, starting with B^H_0 = 0.
    pub fbm: Vec<f64>,
}

impl FbmPath {
    /// The identically zero path on the table's grid.
    pub fn zero(table: &KernelTable) -> Self {
        let noise = DrivingNoise { increments: vec![0.0; table.n], singular_mode: 0.0 };
        Self { path_id: 0, seed: 0, grid: table.grid.clone().into(), noise: Some(noise), fbm: vec![0.0; table.n + 1] }
    }

    pub fn increments(&self) -> Option<&[f64]> {
        self.noise.as_ref().map(|n| n.increments.as_slice())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.fbm.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| (lo.min(b), hi.max(b)))
    }

    /// Standard normal noise columns of the discrete Volterra map.
    pub fn columns(&self, table: &KernelTable) -> Result<Vec<f64>> {
        let noise = self.require_noise()?;
        noise_columns(table, noise)
    }

    pub(crate) fn require_noise(&self) -> Result<&DrivingNoise> {
        self.noise.as_ref().ok_or_else(|| {
            Error::Unsupported("path has no driving increments (Cholesky-sampled)".into())
        })
    }
}

fn noise_columns(table: &KernelTable, noise: &DrivingNoise) -> Result<Vec<f64>> {
    let n = table.n;
    if noise.increments.len() != n {
        return Err(Error::Dimension { expected: n, got: noise.increments.len() });
    }
    let inv_sqrt_dt = 1.0 / table.dt().sqrt();
    let mut xi = Vec::with_capacity(n + 1);
    xi.push(noise.increments[0] * inv_sqrt_dt);
    xi.push(noise.singular_mode);
    xi.extend(noise.increments[1..].iter().map(|d| d * inv_sqrt_dt));
    Ok(xi)
}

/// Centered Gaussian increments with variance Δt_j, deterministic in `key`.
pub fn sample_bm_increments(grid: &[f64], key: StreamKey) -> Vec<f64> {
    let mut rng = key.rng();
    increments_from(grid, &mut rng)
}

fn increments_from<R: Rng>(grid: &[f64], rng: &mut R) -> Vec<f64> {
    grid.windows(2)
        .map(|w| {
            let z: f64 = rng.sample(StandardNormal);
            z * (w[1] - w[0]).sqrt()
        })
        .collect()
}

/// Increments followed by the singular mode, drawn from one stream.
pub fn sample_driving_noise(table: &KernelTable, key: StreamKey) -> DrivingNoise {
    let mut rng = key.rng();
    let increments = increments_from(&table.grid, &mut rng);
    let singular_mode = rng.sample(StandardNormal);
    DrivingNoise { increments, singular_mode }
}

/// B^H_{t_i} = Σ_c A_ic ξ_c for all grid nodes.
pub fn fbm_from_columns(table: &KernelTable, xi: &[f64]) -> Vec<f64> {
    (0..=table.n).map(|i| table.loadings(i).iter().zip(xi).map(|(a, x)| a * x).sum()).collect()
}

/// Discrete Volterra map: B^H_{t_i} = Σ_{j≤i} w_ij ΔB_j/Δt_j plus the
/// first cell's singular-mode term.
pub fn fbm_from_bm(table: &KernelTable, noise: DrivingNoise) -> Result<FbmPath> {
    let xi = noise_columns(table, &noise)?;
    let fbm = fbm_from_columns(table, &xi);
    Ok(FbmPath { path_id: 0, seed: 0, grid: table.grid.clone().into(), noise: Some(noise), fbm })
}

/// One Volterra path on the stream `key`.
pub fn sample_volterra_path(table: &KernelTable, key: StreamKey) -> FbmPath {
    let noise = sample_driving_noise(table, key);
    let xi = noise_columns(table, &noise).expect("sampled noise matches the table");
    let fbm = fbm_from_columns(table, &xi);
    FbmPath { path_id: key.index, seed: key.seed, grid: table.grid.clone().into(), noise: Some(noise), fbm }
}

/// Outer path `index` of an experiment with `seed`.
pub fn outer_path(table: &KernelTable, seed: u64, index: u64) -> FbmPath {
    sample_volterra_path(table, StreamKey::new(seed, Purpose::OuterPath, index))
}

/// Exact sampler: Cholesky factor of R_H on the grid nodes t_1..t_n.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    grid: Arc<[f64]>,
    /// Lower factor, packed by row.
    factor: Vec<f64>,
    /// Diagonal jitter that was needed, if any.
    pub jitter: f64,
}

impl CholeskySampler {
    pub fn new(hurst: f64, grid: &[f64]) -> Result<Self> {
        crate::kernel::validate_hurst(hurst)?;
        let n = grid.len().saturating_sub(1);
        if n == 0 {
            return Err(Error::InvalidParam("grid needs at least two nodes".into()));
        }
        if n > MAX_CHOLESKY_GRID {
            return Err(Error::Resource(format!("Cholesky grid {n} exceeds {MAX_CHOLESKY_GRID}")));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| covariance(hurst, grid[i + 1], grid[j + 1]));
        let scale = cov.diagonal().max();
        let mut jitter = 0.0;
        for attempt in 0..4 {
            let mut m = cov.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                let mut factor = Vec::with_capacity(n * (n + 1) / 2);
                for i in 0..n {
                    factor.extend((0..=i).map(|j| l[(i, j)]));
                }
                return Ok(Self { grid: grid.to_vec().into(), factor, jitter });
            }
            jitter = scale * 1e-14 * 100f64.powi(attempt);
        }
        Err(Error::Factorization(format!("R_H not positive definite on {n} nodes after regularization")))
    }

    pub fn n(&self) -> usize {
        self.grid.len() - 1
    }

    /// Row i (node t_{i+1}) of the lower factor.
    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.factor[start..start + i + 1]
    }

    /// Diagonal of L Lᵀ, i.e. the factorized variances at t_1..t_n.
    pub fn factorized_variances(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.row(i).iter().map(|x| x * x).sum()).collect()
    }

    pub fn sample(&self, key: StreamKey) -> FbmPath {
        let mut rng = key.rng();
        let z: Vec<f64> = (0..self.n()).map(|_| rng.sample(StandardNormal)).collect();
        let mut fbm = Vec::with_capacity(self.n() + 1);
        fbm.push(0.0);
        fbm.extend((0..self.n()).map(|i| self.row(i).iter().zip(&z).map(|(l, x)| l * x).sum::<f64>()));
        FbmPath { path_id: key.index, seed: key.seed, grid: self.grid.clone(), noise: None, fbm }
    }
}

/// Exact fBm on `grid` via a Cholesky factorization.
pub fn sample_fbm_cholesky(hurst: f64, grid: &[f64], key: StreamKey) -> Result<FbmPath> {
    Ok(CholeskySampler::new(hurst, grid)?.sample(key))
}

/// Law of B^H_s given F_θ for grid s ≥ θ: N(N_{s,θ}, v(s,θ)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLaw {
    pub theta_index: usize,
    pub theta: f64,
    /// N_{t_i,θ} for i = theta_index..=n.
    pub means: Vec<f64>,
    /// v(t_i,θ) for i = theta_index..=n.
    pub variances: Vec<f64>,
}

pub fn conditional_law(path: &FbmPath, table: &KernelTable, theta_index: usize) -> Result<ConditionalLaw> {
    if theta_index > table.n {
        return Err(Error::Domain(format!("θ index {theta_index} outside grid 0..={}", table.n)));
    }
    let xi = path.columns(table)?;
    let known = table.known_columns(theta_index);
    let means = (theta_index..=table.n)
        .map(|i| table.loadings(i).iter().zip(&xi).take(known).map(|(a, x)| a * x).sum())
        .collect();
    let variances = (theta_index..=table.n).map(|i| table.conditional_variance(i, theta_index)).collect();
    Ok(ConditionalLaw { theta_index, theta: table.grid[theta_index], means, variances })
}

/// N_{t_i, t_k} for every k ≤ i, packed by row; beyond the row
/// (k > i) the conditional mean is the known value B^H_{t_i}.
#[derive(Debug, Clone)]
pub struct ConditionalField {
    n: usize,
    values: Vec<f64>,
}

impl ConditionalField {
    pub fn new(table: &KernelTable, xi: &[f64]) -> Self {
        let n = table.n;
        let mut values = Vec::with_capacity((n + 1) * (n + 2) / 2);
        for i in 0..=n {
            let row = table.loadings(i);
            let mut prefix = 0.0;
            let mut used = 0;
            for k in 0..=i {
                let known = table.known_columns(k);
                while used < known {
                    prefix += row[used] * xi[used];
                    used += 1;
                }
                values.push(prefix);
            }
        }
        Self { n, values }
    }

    /// N_{t_i, t_k} for k ≤ i.
    pub fn mean(&self, i: usize, k: usize) -> f64 {
        debug_assert!(k <= i && i <= self.n);
        self.values[i * (i + 1) / 2 + k]
    }

    /// min over 0 ≤ θ ≤ s ≤ T of N_{s,θ} on the grid.
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// M_r = E[F | F_r] for every grid node r, with F the trapezoidal functional.
///
/// M_r = Σ_{t_i ≤ r} τ_i e^{a t_i + σB^H_{t_i}} + Σ_{t_i > r} τ_i e^{a t_i + σN_{t_i,r} + σ²v(t_i,r)/2}
pub fn martingale_profile(path: &FbmPath, table: &KernelTable, params: &ModelParams) -> Result<Vec<f64>> {
    params.check_table(table)?;
    let xi = path.columns(table)?;
    let field = ConditionalField::new(table, &xi);
    Ok(martingale_from_field(path, table, params, &field))
}

pub(crate) fn martingale_from_field(
    path: &FbmPath,
    table: &KernelTable,
    params: &ModelParams,
    field: &ConditionalField,
) -> Vec<f64> {
    let n = table.n;
    let tau = trapezoid_weights(n, table.dt());
    let (a, s) = (params.drift, params.sigma);
    let past: Vec<f64> = (0..=n).map(|i| tau[i] * (a * table.grid[i] + s * path.fbm[i]).exp()).collect();
    let mut out = Vec::with_capacity(n + 1);
    let mut past_sum = 0.0;
    for k in 0..=n {
        past_sum += past[k];
        let future: f64 = (k + 1..=n)
            .map(|i| {
                let v = table.conditional_variance(i, k);
                tau[i] * (a * table.grid[i] + s * field.mean(i, k) + 0.5 * s * s * v).exp()
            })
            .sum();
        out.push(past_sum + future);
    }
    out
}

/// M_r at a single grid node r.
pub fn martingale_m(path: &FbmPath, table: &KernelTable, params: &ModelParams, r: usize) -> Result<f64> {
    if r > table.n {
        return Err(Error::Domain(format!("r index {r} outside grid 0..={}", table.n)));
    }
    Ok(martingale_profile(path, table, params)?[r])
}

/// Provenance written at the top of every path or sample file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputHeader {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub hurst: f64,
    pub horizon: f64,
    pub grid_n: usize,
    pub c_h: f64,
    #[serde(default)]
    pub extra: Vec<(String, String)>,
}

impl OutputHeader {
    pub fn write_comment<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# code_version: {}", self.code_version)?;
        writeln!(w, "# config_hash: {}", self.config_hash)?;
        writeln!(w, "# seed: {}", self.seed)?;
        writeln!(w, "# grid: uniform n={} T={}", self.grid_n, self.horizon)?;
        writeln!(w, "# hurst: {}", self.hurst)?;
        writeln!(w, "# c_h: {}", self.c_h)?;
        for (k, v) in &self.extra {
            writeln!(w, "# {k}: {v}")?;
        }
        Ok(())
    }
}

/// Audit dump: `path_id,t,dB,B_H`, one row per node; the singular mode of
/// each path goes in a `# singular_mode` comment line.
pub fn write_paths_csv<W: Write>(w: &mut W, header: &OutputHeader, paths: &[FbmPath]) -> std::io::Result<()> {
    header.write_comment(w)?;
    writeln!(w, "path_id,t,dB,B_H")?;
    for p in paths {
        if let Some(noise) = &p.noise {
            writeln!(w, "# singular_mode path_id={} value={:e}", p.path_id, noise.singular_mode)?;
        }
        for (i, (&t, &b)) in p.grid.iter().zip(&p.fbm).enumerate() {
            let db = match (&p.noise, i) {
                (Some(noise), i) if i > 0 => format!("{:e}", noise.increments[i - 1]),
                (Some(_), _) => "0".to_string(),
                (None, _) => String::new(),
            };
            writeln!(w, "{},{},{},{:e}", p.path_id, t, db, b)?;
        }
    }
    Ok(())
}

pub const BOUND_PATH_COVARIANCE: &str = "path-covariance";
pub const BOUND_PATH_KS: &str = "path-ks";

/// Ten node pairs spread over the grid, including the diagonal at T.
pub fn covariance_check_pairs(n: usize) -> Vec<(usize, usize)> {
    let fr = [(1.0, 1.0), (1.0, 0.5), (0.5, 0.5), (0.75, 0.25), (0.25, 0.1), (0.9, 0.8), (0.6, 0.3), (1.0, 0.1), (0.3, 0.3), (0.1, 0.05)];
    let idx = |f: f64| ((f * n as f64).round() as usize).clamp(1, n);
    fr.iter().map(|&(a, b)| (idx(a), idx(b))).collect()
}

/// Checks the Volterra paths against the fBm law: sample covariance at the
/// given node pairs within 3 SE of R_H, and a two-sample KS test of the
/// marginal at T against the Cholesky sampler at the 1% level.
pub fn validate_path_law(
    table: &KernelTable,
    seed: u64,
    n_paths: usize,
    pairs: &[(usize, usize)],
    exec: crate::Exec,
) -> Result<Vec<BoundReport>> {
    if n_paths < 2 {
        return Err(Error::InvalidParam(format!("path-law check needs at least 2 paths, got {n_paths}")));
    }
    if let Some(&(i, k)) = pairs.iter().find(|&&(i, k)| i > table.n || k > table.n) {
        return Err(Error::Domain(format!("node pair ({i},{k}) outside 0..={}", table.n)));
    }
    let n = table.n;
    let rows = exec.map(n_paths, |p| {
        let path = outer_path(table, seed, p as u64);
        pairs.iter().map(|&(i, k)| path.fbm[i] * path.fbm[k]).chain(std::iter::once(path.fbm[n])).collect::<Vec<f64>>()
    });
    let mut cov = BoundTally::new(BOUND_PATH_COVARIANCE, "sample E[B_t B_s] = R_H(t,s) within 3 SE").keep_points();
    for (c, &(i, k)) in pairs.iter().enumerate() {
        let prods: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let acc = MeanAccumulator::from_slice(&prods);
        let target = covariance(table.hurst, table.grid[i], table.grid[k]);
        cov.upper(table.grid[i] + table.grid[k] / 10.0, (acc.mean() - target).abs(), 0.0, acc.std_error());
    }
    cov.note("x encodes the pair as t + s/10");
    let sampler = CholeskySampler::new(table.hurst, &table.grid)?;
    let reference = exec.map(n_paths, |p| sampler.sample(StreamKey::new(seed, Purpose::Cholesky, p as u64)).fbm[n]);
    let terminal: Vec<f64> = rows.iter().map(|r| r[pairs.len()]).collect();
    let d = ks_two_sample(&terminal, &reference);
    let crit = ks_critical_value(n_paths, n_paths, 0.01);
    let mut ks = BoundTally::new(BOUND_PATH_KS, "KS(Volterra B_T, Cholesky B_T) below the 1% critical value")
        .with_rel_tolerance(0.0)
        .keep_points();
    ks.upper(table.horizon, d, crit, 0.0);
    Ok(vec![cov.finish(), ks.finish()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{analytic_mean_f, functional_f};
    use crate::kernel::build_kernel_table;
    use crate::stats::MeanAccumulator;

    fn table(n: usize) -> KernelTable {
        build_kernel_table(0.7, 1.0, n).unwrap()
    }

    #[test]
    fn increments_are_deterministic() {
        let grid: Vec<f64> = (0..=4).map(|i| i as f64 / 4.0).collect();
        let key = StreamKey::new(11, Purpose::OuterPath, 0);
        let a = sample_bm_increments(&grid, key);
        assert_eq!(a.len(), 4);
        assert_eq!(a, sample_bm_increments(&grid, key));
    }

    #[test]
    fn increment_statistics() {
        let grid = [0.0, 0.25];
        let draws: Vec<f64> =
            (0..100_000).map(|p| sample_bm_increments(&grid, StreamKey::new(5, Purpose::OuterPath, p))[0]).collect();
        let acc = MeanAccumulator::from_slice(&draws);
        let sd = 0.5;
        assert!(acc.mean().abs() < 4.0 * sd / (100_000f64).sqrt());
        let normalized_var = acc.variance() / 0.25;
        assert!((normalized_var - 1.0).abs() < 0.02, "{normalized_var}");
    }

    #[test]
    fn zero_noise_gives_zero_path() {
        let t = table(16);
        let noise = DrivingNoise { increments: vec![0.0; 16], singular_mode: 0.0 };
        let p = fbm_from_bm(&t, noise).unwrap();
        assert!(p.fbm.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = table(16);
        let noise = DrivingNoise { increments: vec![0.0; 15], singular_mode: 0.0 };
        assert!(matches!(fbm_from_bm(&t, noise), Err(Error::Dimension { expected: 16, got: 15 })));
    }

    #[test]
    fn volterra_path_reproducible_from_its_noise() {
        let t = table(32);
        let p = outer_path(&t, 9, 3);
        assert_eq!(p.fbm[0], 0.0);
        let again = fbm_from_bm(&t, p.noise.clone().unwrap()).unwrap();
        assert_eq!(p.fbm, again.fbm);
    }

    #[test]
    fn cholesky_sampler_reproduces_variances() {
        let t = table(64);
        let sampler = CholeskySampler::new(0.7, &t.grid).unwrap();
        for (i, v) in sampler.factorized_variances().iter().enumerate() {
            let target = t.grid[i + 1].powf(1.4);
            assert!((v - target).abs() < 1e-12 * target.max(1e-3), "{i}: {v} vs {target}");
        }
        let key = StreamKey::new(1, Purpose::Cholesky, 0);
        let a = sampler.sample(key);
        assert_eq!(a.fbm, sampler.sample(key).fbm);
        assert!(a.noise.is_none());
        assert!(matches!(conditional_law(&a, &t, 3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn conditional_law_endpoints() {
        let t = table(32);
        let p = outer_path(&t, 4, 0);
        let at0 = conditional_law(&p, &t, 0).unwrap();
        assert!(at0.means.iter().all(|&m| m == 0.0));
        for (i, v) in at0.variances.iter().enumerate() {
            assert!((v - t.discrete_energy(i)).abs() < 1e-15);
            let target = t.grid[i].powf(1.4);
            assert!((v - target).abs() < t.diagnostics.energy_tolerance, "{i}: {v} vs {target}");
        }
        let at_t = conditional_law(&p, &t, 32).unwrap();
        assert!((at_t.means[0] - p.fbm[32]).abs() < 1e-12);
        assert_eq!(at_t.variances, vec![0.0]);
        let mid = conditional_law(&p, &t, 16).unwrap();
        assert!((mid.means[0] - p.fbm[16]).abs() < 1e-12);
        assert!(mid.variances.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn martingale_endpoints() {
        let t = table(64);
        let params = ModelParams::new(0.0, 1.0, 0.7, 1.0).unwrap();
        let p = outer_path(&t, 2, 0);
        let m = martingale_profile(&p, &t, &params).unwrap();
        assert!((m[64] - functional_f(&p, &params)).abs() < 1e-12);
        // M_0 is the mean of the discrete model, which tracks E[F] to the
        // trapezoid and table discretization error
        let tau = trapezoid_weights(64, t.dt());
        let model_mean: f64 = (0..=64).map(|i| tau[i] * (0.5 * t.discrete_energy(i)).exp()).sum();
        assert!((m[0] - model_mean).abs() < 1e-12);
        assert!((m[0] - analytic_mean_f(&params)).abs() < 1e-3);
        assert_eq!(martingale_m(&p, &t, &params, 64).unwrap(), m[64]);
    }

    #[test]
    fn conditional_field_matches_conditional_law() {
        let t = table(16);
        let p = outer_path(&t, 8, 1);
        let xi = p.columns(&t).unwrap();
        let field = ConditionalField::new(&t, &xi);
        for k in [0, 3, 9, 16] {
            let law = conditional_law(&p, &t, k).unwrap();
            for (off, m) in law.means.iter().enumerate() {
                assert!((field.mean(k + off, k) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let t = table(8);
        let p = outer_path(&t, 1, 0);
        let header = OutputHeader {
            code_version: "test".into(),
            config_hash: "abc".into(),
            seed: 1,
            hurst: 0.7,
            horizon: 1.0,
            grid_n: 8,
            c_h: t.c_h,
            extra: vec![],
        };
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &header, &[p]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("# seed: 1"));
        assert!(text.contains("path_id,t,dB,B_H"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 9);
    }
}
