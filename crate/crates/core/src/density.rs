//! Density of X = ln F − m̂ and of F, and the tail bounds built on it.
//!
//! The density is estimated in the log domain by a linear-binned Gaussian
//! KDE and carried to F by ρ_F(x) = ρ_X(ln x − m̂)/x. Envelopes with an
//! unspecified constant are checked through the implied-constant profile
//! ĉ(x), which must stay bounded toward the tails.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::functional::{analytic_mean_f, analytic_second_moment_f, functional_f, Centering, FunctionalSample, ModelParams};
use crate::kernel::KernelTable;
use crate::malliavin::PathSummary;
use crate::paths::{outer_path, OutputHeader};
use crate::report::{BoundReport, BoundTally, PointStatus};
use crate::rng::{Purpose, StreamKey};
use crate::stats::{binomial_se, variance_with_se, MeanAccumulator};

pub const MIN_KDE_SAMPLES: usize = 10_000;
pub const MIN_BOOTSTRAP: usize = 100;
/// Tail regions with fewer samples beyond them are inconclusive.
pub const MIN_TAIL_SAMPLES: usize = 50;
/// Outer-third maximum of ĉ may exceed the inner-third maximum by this factor.
pub const EXPLOSION_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_paths: usize,
    pub mean_x: f64,
    pub mean_x_se: f64,
    pub var_x: f64,
    pub var_x_se: f64,
    pub mean_f: f64,
    pub mean_f_se: f64,
}

/// Samples of (F, X) on outer paths with a frozen centering constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XBatch {
    pub seed: u64,
    pub grid_n: usize,
    pub centering: Centering,
    pub samples: Vec<FunctionalSample>,
    pub summary: BatchSummary,
}

impl XBatch {
    pub fn xs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.x).collect()
    }
}

fn summarize(samples: &[FunctionalSample]) -> BatchSummary {
    let xs: Vec<f64> = samples.iter().map(|s| s.x).collect();
    let fs: Vec<f64> = samples.iter().map(|s| s.f).collect();
    let ax = MeanAccumulator::from_slice(&xs);
    let af = MeanAccumulator::from_slice(&fs);
    let (var_x, var_x_se) = if xs.len() > 1 { variance_with_se(&xs) } else { (0.0, 0.0) };
    BatchSummary {
        n_paths: samples.len(),
        mean_x: ax.mean(),
        mean_x_se: ax.std_error(),
        var_x,
        var_x_se,
        mean_f: af.mean(),
        mean_f_se: af.std_error(),
    }
}

/// F and X on outer paths 0..n_paths of `seed`.
pub fn sample_x_batch(
    table: &KernelTable,
    params: &ModelParams,
    centering: Centering,
    n_paths: usize,
    seed: u64,
    exec: Exec,
) -> Result<XBatch> {
    params.check_table(table)?;
    let samples = exec.map(n_paths, |p| {
        let path = outer_path(table, seed, p as u64);
        let f = functional_f(&path, params);
        let ln_f = f.ln();
        FunctionalSample { path_id: p as u64, f, ln_f, x: centering.center(ln_f) }
    });
    let summary = summarize(&samples);
    Ok(XBatch { seed, grid_n: table.n, centering, samples, summary })
}

/// X samples paired with Φ_X from a nested batch.
pub fn x_from_summaries(summaries: &[PathSummary], centering: &Centering) -> Vec<f64> {
    summaries.iter().map(|s| centering.center(s.ln_f)).collect()
}

/// CSV dump `path_id,F,lnF,X` under a provenance header.
pub fn write_samples_csv<W: Write>(w: &mut W, header: &OutputHeader, batch: &XBatch) -> std::io::Result<()> {
    header.write_comment(w)?;
    writeln!(w, "# centering_mean_ln_f: {:e}", batch.centering.mean_ln_f)?;
    writeln!(w, "# centering_se: {:e}", batch.centering.std_error)?;
    writeln!(w, "path_id,F,lnF,X")?;
    for s in &batch.samples {
        writeln!(w, "{},{:e},{:e},{:e}", s.path_id, s.f, s.ln_f, s.x)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// 0.9 · min(sd, IQR/1.34) · n^{−1/5}
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeOptions {
    pub bandwidth: Bandwidth,
    /// Minimum number of grid points; refined so that Δ ≤ h/8.
    pub grid_points: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for KdeOptions {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Silverman, grid_points: 1024, bootstrap: MIN_BOOTSTRAP, seed: 0, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    X,
    F,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub domain: Domain,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Bootstrap standard errors.
    pub se: Vec<f64>,
    /// In the X domain.
    pub bandwidth: f64,
    pub n_samples: usize,
    pub n_bootstrap: usize,
    /// m̂ used to pass between the X and F domains.
    pub centering: f64,
    /// Samples ≤ each grid point.
    pub count_below: Vec<usize>,
    #[serde(skip)]
    replicates: Vec<Vec<f64>>,
}

pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let sd = MeanAccumulator::from_slice(xs).variance().sqrt();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (xs.len() as f64).powf(-0.2)
}

struct BinnedGrid {
    lo: f64,
    delta: f64,
    m: usize,
    kernel: Vec<f64>,
}

impl BinnedGrid {
    fn new(lo: f64, hi: f64, h: f64, min_points: usize) -> Self {
        let m = min_points.max(((hi - lo) / (h / 8.0)).ceil() as usize + 1).min(1 << 16);
        let delta = (hi - lo) / (m - 1) as f64;
        let half = ((5.0 * h) / delta).ceil() as usize;
        let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
        let kernel = (0..=half).map(|l| norm * (-0.5 * (l as f64 * delta / h).powi(2)).exp()).collect();
        Self { lo, delta, m, kernel }
    }

    fn bin<I: Iterator<Item = f64>>(&self, xs: I) -> Vec<f64> {
        let mut c = vec![0.0; self.m];
        for x in xs {
            let pos = (x - self.lo) / self.delta;
            let j = (pos.floor() as usize).min(self.m - 2);
            let frac = pos - j as f64;
            c[j] += 1.0 - frac;
            c[j + 1] += frac;
        }
        c
    }

    fn smooth(&self, counts: &[f64], n: usize) -> Vec<f64> {
        let half = self.kernel.len() - 1;
        let inv_n = 1.0 / n as f64;
        (0..self.m)
            .map(|j| {
                let lo = j.saturating_sub(half);
                let hi = (j + half).min(self.m - 1);
                (lo..=hi).map(|l| counts[l] * self.kernel[j.abs_diff(l)]).sum::<f64>() * inv_n
            })
            .collect()
    }
}

/// Gaussian KDE of ρ_X on a grid spanning the sample range ± 3h, with
/// bootstrap standard errors.
pub fn kde_log_domain(xs: &[f64], centering: f64, opts: &KdeOptions) -> Result<DensityEstimate> {
    if xs.len() < MIN_KDE_SAMPLES {
        return Err(Error::InvalidParam(format!("KDE needs at least {MIN_KDE_SAMPLES} samples, got {}", xs.len())));
    }
    if opts.bootstrap < MIN_BOOTSTRAP {
        return Err(Error::InvalidParam(format!("bootstrap needs at least {MIN_BOOTSTRAP} resamples")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParam("non-finite sample".into()));
    }
    let (min, max) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = max - min;
    if spread <= 1e-12 * (1.0 + min.abs()) {
        return Err(Error::Degenerate(format!("samples form a point mass at {min}")));
    }
    let h = match opts.bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(xs),
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidParam(format!("bandwidth must be positive, got {h}"))),
    };
    let g = BinnedGrid::new(min - 3.0 * h, max + 3.0 * h, h, opts.grid_points);
    let n = xs.len();
    let density = g.smooth(&g.bin(xs.iter().copied()), n);
    let replicates: Vec<Vec<f64>> = opts.exec.map(opts.bootstrap, |b| {
        let mut rng = StreamKey::new(opts.seed, Purpose::Bootstrap, b as u64).rng();
        let counts = g.bin((0..n).map(|_| xs[rng.random_range(0..n)]));
        g.smooth(&counts, n)
    });
    let se = (0..g.m)
        .map(|j| {
            let vals: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
            MeanAccumulator::from_slice(&vals).variance().sqrt()
        })
        .collect();
    let grid: Vec<f64> = (0..g.m).map(|j| g.lo + j as f64 * g.delta).collect();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let count_below = grid.iter().map(|&z| sorted.partition_point(|&x| x <= z)).collect();
    Ok(DensityEstimate {
        domain: Domain::X,
        grid,
        density,
        se,
        bandwidth: h,
        n_samples: n,
        n_bootstrap: opts.bootstrap,
        centering,
        count_below,
        replicates,
    })
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

impl DensityEstimate {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// ρ_F(x) = ρ_X(ln x − m̂)/x on x = e^{z + m̂}.
    pub fn to_f_domain(&self) -> Result<DensityEstimate> {
        if self.domain != Domain::X {
            return Err(Error::InvalidParam("estimate is already in the F domain".into()));
        }
        let grid: Vec<f64> = self.grid.iter().map(|z| (z + self.centering).exp()).collect();
        let density = self.density.iter().zip(&grid).map(|(d, x)| d / x).collect();
        let se = self.se.iter().zip(&grid).map(|(s, x)| s / x).collect();
        let replicates = self
            .replicates
            .iter()
            .map(|r| r.iter().zip(&grid).map(|(d, x)| d / x).collect())
            .collect();
        Ok(DensityEstimate { domain: Domain::F, grid, density, se, replicates, ..self.clone() })
    }

    /// Samples strictly above grid point j.
    pub fn count_above(&self, j: usize) -> usize {
        self.n_samples - self.count_below[j]
    }

    /// −d/dz ln ρ at interior grid points (central differences) and its
    /// bootstrap SE; ends and points with zero density give NaN.
    pub fn neg_log_derivative(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.grid.len();
        let deriv = |d: &[f64], j: usize| -> f64 {
            if j == 0 || j + 1 >= m || d[j - 1] <= 0.0 || d[j + 1] <= 0.0 {
                return f64::NAN;
            }
            -(d[j + 1].ln() - d[j - 1].ln()) / (self.grid[j + 1] - self.grid[j - 1])
        };
        let value: Vec<f64> = (0..m).map(|j| deriv(&self.density, j)).collect();
        let se = (0..m)
            .map(|j| {
                let vals: Vec<f64> = self.replicates.iter().map(|r| deriv(r, j)).collect();
                if vals.iter().any(|v| !v.is_finite()) {
                    f64::NAN
                } else {
                    MeanAccumulator::from_slice(&vals).variance().sqrt()
                }
            })
            .collect();
        (value, se)
    }

    /// Plot-ready CSV: x, density, SE.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "x,density,se")?;
        for ((x, d), s) in self.grid.iter().zip(&self.density).zip(&self.se) {
            writeln!(w, "{x:e},{d:e},{s:e}")?;
        }
        Ok(())
    }
}

/// P(X ≤ x) ≤ e^{−x²/(2σ²T^{2H})} for x ≤ 0.
pub fn verify_gaussian_tail(xs: &[f64], params: &ModelParams, points: &[f64]) -> Result<BoundReport> {
    let s = params.variance_scale();
    if s <= 0.0 {
        return Err(Error::Degenerate("σ = 0: X is a point mass".into()));
    }
    let mut tally = BoundTally::new("jkvm1b", "P(X <= x) <= exp(-x²/(2σ²T^{2H})), x <= 0").keep_points();
    let n = xs.len();
    for &x in points {
        if x > 0.0 {
            return Err(Error::Domain(format!("tail points must be <= 0, got {x}")));
        }
        let p = xs.iter().filter(|&&v| v <= x).count() as f64 / n as f64;
        let bound = (-x * x / (2.0 * s)).exp();
        tally.upper(x, p, bound, binomial_se(p, n));
    }
    tally.note("X is centered with a Monte Carlo estimate of E[ln F]; its SE shifts x by the same amount");
    Ok(tally.finish())
}

/// E[e^{−λX}] ≤ e^{λ²σ²T^{2H}/2}.
pub fn verify_mgf(xs: &[f64], params: &ModelParams, lambdas: &[f64]) -> BoundReport {
    let s = params.variance_scale();
    let mut tally = BoundTally::new("mgf", "E[exp(-λX)] <= exp(λ²σ²T^{2H}/2)").keep_points();
    for &l in lambdas {
        let vals: Vec<f64> = xs.iter().map(|x| (-l * x).exp()).collect();
        let acc = MeanAccumulator::from_slice(&vals);
        tally.upper(l, acc.mean(), (0.5 * l * l * s).exp(), acc.std_error());
    }
    tally.finish()
}

/// One point of an implied-constant profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    /// Point in the F domain.
    pub x: f64,
    pub density: f64,
    pub se: f64,
    /// Envelope without its constant.
    pub shape: f64,
    pub implied_c: f64,
    pub implied_c_se: f64,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeProfile {
    pub bound_id: String,
    pub points: Vec<ProfilePoint>,
    pub implied_constant: f64,
}

impl EnvelopeProfile {
    /// Plot-ready CSV: x, density, SE, bound (ĉ_max · shape), implied_c.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "x,density,se,bound,implied_c,resolved")?;
        for p in &self.points {
            writeln!(
                w,
                "{:e},{:e},{:e},{:e},{:e},{}",
                p.x,
                p.density,
                p.se,
                self.implied_constant * p.shape,
                p.implied_c,
                p.resolved
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub reports: Vec<BoundReport>,
    pub profiles: Vec<EnvelopeProfile>,
}

/// Applies the non-explosion rule to a tail profile ordered from the
/// centre outward.
fn explosion_check(tally: &mut BoundTally, tail: &[ProfilePoint], distance: impl Fn(&ProfilePoint) -> f64) -> f64 {
    let resolved: Vec<&ProfilePoint> = tail.iter().filter(|p| p.resolved).collect();
    for p in tail.iter().filter(|p| !p.resolved) {
        tally.inconclusive(p.x, p.implied_c, f64::NAN);
    }
    if resolved.len() < 3 {
        tally.note("fewer than three resolved points; tail inconclusive");
        return resolved.iter().map(|p| p.implied_c).fold(0.0, f64::max);
    }
    let reach = resolved.iter().map(|p| distance(p)).fold(0.0, f64::max);
    let inner_max =
        resolved.iter().filter(|p| distance(p) <= reach / 3.0).map(|p| p.implied_c).fold(0.0, f64::max);
    let cap = EXPLOSION_FACTOR * inner_max;
    for p in resolved.iter().filter(|p| distance(p) >= 2.0 * reach / 3.0) {
        tally.upper(p.x, p.implied_c, cap, p.implied_c_se);
    }
    let c = resolved.iter().map(|p| p.implied_c).fold(0.0, f64::max);
    tally.set_implied_constant(c);
    tally.note(format!("inner-third max ĉ = {inner_max:.6e}; resolved reach {reach:.4}"));
    c
}

/// Implied-constant profiles for the left (k = 8) and right (k = 2)
/// log-normal envelopes and the Gaussian left-tail envelope of ρ_F, each
/// judged by the non-explosion rule; plus the right-tail log-derivative
/// check −d/dz ln ρ_X(z) ≥ z/(σ²T^{2H}).
pub fn verify_envelopes(est: &DensityEstimate, params: &ModelParams) -> Result<EnvelopeReport> {
    if est.domain != Domain::X {
        return Err(Error::InvalidParam("envelopes are verified from the X-domain estimate".into()));
    }
    let s = params.variance_scale();
    if s <= 0.0 {
        return Err(Error::Degenerate("σ = 0: F is a point mass".into()));
    }
    let m = est.centering;
    let n = est.grid.len();
    let point = |j: usize, shape_log: f64, resolved: bool| {
        let z = est.grid[j];
        let x = (z + m).exp();
        // ĉ = ρ_F(x)·x / e^{−z²/(ks)} = ρ_X(z) e^{z²/(ks)}
        let g = (-shape_log).exp();
        ProfilePoint {
            x,
            density: est.density[j] / x,
            se: est.se[j] / x,
            shape: shape_log.exp() / x,
            implied_c: est.density[j] * g,
            implied_c_se: est.se[j] * g,
            resolved,
        }
    };

    let mut reports = Vec::new();
    let mut profiles = Vec::new();

    // left: 0 < x ≤ e^{m}, i.e. z ≤ 0, ordered from the centre outward
    let mut left_tally = BoundTally::new("kl1", "ρ_F(x) <= (c/x)exp(-(ln x - m)²/(8σ²T^{2H})), x <= e^m").keep_points();
    let left: Vec<ProfilePoint> = (0..n)
        .rev()
        .filter(|&j| est.grid[j] <= 0.0)
        .map(|j| point(j, -est.grid[j].powi(2) / (8.0 * s), est.count_below[j] >= MIN_TAIL_SAMPLES))
        .collect();
    let c_left = explosion_check(&mut left_tally, &left, |p| -(p.x.ln() - m));
    reports.push(left_tally.finish());
    profiles.push(EnvelopeProfile { bound_id: "kl1".into(), points: left, implied_constant: c_left });

    let mut right_tally = BoundTally::new("kl2", "ρ_F(x) <= (c/x)exp(-(ln x - m)²/(2σ²T^{2H})), x > e^m").keep_points();
    let right: Vec<ProfilePoint> = (0..n)
        .filter(|&j| est.grid[j] > 0.0)
        .map(|j| point(j, -est.grid[j].powi(2) / (2.0 * s), est.count_above(j) >= MIN_TAIL_SAMPLES))
        .collect();
    let c_right = explosion_check(&mut right_tally, &right, |p| p.x.ln() - m);
    reports.push(right_tally.finish());
    profiles.push(EnvelopeProfile { bound_id: "kl2".into(), points: right, implied_constant: c_right });

    // Gaussian envelope for ρ_F on x ≤ E[F], with exact E[F] and Var(F)
    let mean_f = analytic_mean_f(params);
    let var_f = analytic_second_moment_f(params) - mean_f * mean_f;
    let f_est = est.to_f_domain()?;
    let mut remark_tally =
        BoundTally::new("remark-gaussian", "ρ_F(x) <= c exp(-(x - E[F])²/(8Var F)), x <= E[F]").keep_points();
    let remark: Vec<ProfilePoint> = (0..n)
        .rev()
        .filter(|&j| f_est.grid[j] <= mean_f)
        .map(|j| {
            let x = f_est.grid[j];
            let shape = (-(x - mean_f).powi(2) / (8.0 * var_f)).exp();
            ProfilePoint {
                x,
                density: f_est.density[j],
                se: f_est.se[j],
                shape,
                implied_c: f_est.density[j] / shape,
                implied_c_se: f_est.se[j] / shape,
                resolved: est.count_below[j] >= MIN_TAIL_SAMPLES,
            }
        })
        .collect();
    let c_remark = explosion_check(&mut remark_tally, &remark, |p| mean_f - p.x);
    reports.push(remark_tally.finish());
    profiles.push(EnvelopeProfile { bound_id: "remark-gaussian".into(), points: remark, implied_constant: c_remark });

    // right-tail Gaussian-factor domination through the log-derivative
    let (deriv, deriv_se) = est.neg_log_derivative();
    let mut ld = BoundTally::new("kl2-logderiv", "-d/dz ln ρ_X(z) >= z/(σ²T^{2H}), z > 0").keep_points();
    for j in 0..n {
        let z = est.grid[j];
        if z <= 0.0 {
            continue;
        }
        if est.count_above(j) < MIN_TAIL_SAMPLES || !deriv[j].is_finite() || !deriv_se[j].is_finite() {
            ld.inconclusive(z, deriv[j], z / s);
            continue;
        }
        ld.lower(z, deriv[j], z / s, deriv_se[j]);
    }
    reports.push(ld.finish());

    Ok(EnvelopeReport { reports, profiles })
}

/// One bin of the w_X regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WBin {
    pub z_lo: f64,
    pub z_hi: f64,
    pub z_mean: f64,
    pub count: usize,
    pub w: f64,
    pub w_se: f64,
    pub bound: f64,
    pub status: PointStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WProfile {
    pub bins: Vec<WBin>,
    pub gaps: usize,
    pub reports: Vec<BoundReport>,
}

/// Minimum samples for a w_X bin to count as resolved.
pub const MIN_BIN_SAMPLES: usize = 20;

/// w_X(z) = E[X/Φ_X | X = z] by local averaging in `bins_per_side` equal
/// bins on each side of 0, out to the 0.1% and 99.9% quantiles.
pub fn estimate_w_x(xs: &[f64], phis: &[f64], params: &ModelParams, bins_per_side: usize) -> Result<WProfile> {
    if xs.len() != phis.len() {
        return Err(Error::Dimension { expected: xs.len(), got: phis.len() });
    }
    if xs.len() < MIN_KDE_SAMPLES {
        return Err(Error::InvalidParam(format!("w_X needs at least {MIN_KDE_SAMPLES} joint samples")));
    }
    if bins_per_side == 0 {
        return Err(Error::InvalidParam("need at least one bin per side".into()));
    }
    let s = params.variance_scale();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p) as usize];
    let reach = q(0.001).abs().max(q(0.999).abs());
    let width = reach / bins_per_side as f64;
    let nb = 2 * bins_per_side;
    let mut accs = vec![(MeanAccumulator::new(), MeanAccumulator::new()); nb];
    for (&x, &phi) in xs.iter().zip(phis) {
        let b = ((x + reach) / width).floor();
        if b < 0.0 || b >= nb as f64 {
            continue;
        }
        let (az, aw) = &mut accs[b as usize];
        az.push(x);
        aw.push(x / phi);
    }

    let mut bound_tally = BoundTally::new("w-lower", "w_X(z) >= z/(σ²T^{2H}), z > 0").keep_points();
    let mut sign_tally = BoundTally::new("w-sign", "w_X(z) has the sign of z").keep_points();
    let mut recon = BoundTally::new("w-reconstruction", "exp(-∫_0^z w_X) <= exp(-z²/(2σ²T^{2H})), z > 0").keep_points();
    let mut bins = Vec::with_capacity(nb);
    let mut gaps = 0;
    let mut integral = 0.0;
    let mut integral_var = 0.0;
    let mut contiguous = true;
    for (b, (az, aw)) in accs.iter().enumerate() {
        let z_lo = -reach + b as f64 * width;
        let z_hi = z_lo + width;
        let count = az.count();
        let resolved = count >= MIN_BIN_SAMPLES;
        let (w, w_se, z_mean) = (aw.mean(), aw.std_error(), az.mean());
        let mut status = PointStatus::Inconclusive;
        if !resolved {
            gaps += 1;
            if z_lo >= 0.0 {
                contiguous = false;
                bound_tally.inconclusive(z_mean, w, z_mean / s);
            }
        } else {
            // sign
            if w.abs() > 3.0 * w_se {
                sign_tally.lower(z_mean, w * z_mean.signum(), 0.0, 0.0);
            } else {
                sign_tally.inconclusive(z_mean, w, 0.0);
            }
            if z_lo >= 0.0 {
                status = bound_tally.lower(z_mean, w, z_mean / s, w_se);
                if contiguous {
                    integral += w * width;
                    integral_var += (w_se * width).powi(2);
                    // −∫w ≤ −z²/(2s) in log form
                    recon.lower(z_hi, integral, z_hi * z_hi / (2.0 * s), integral_var.sqrt());
                }
            } else {
                status = PointStatus::Ok;
            }
        }
        bins.push(WBin { z_lo, z_hi, z_mean, count, w, w_se, bound: z_mean.max(0.0) / s, status });
    }
    Ok(WProfile { bins, gaps, reports: vec![bound_tally.finish(), sign_tally.finish(), recon.finish()] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use rand_distr::StandardNormal;

    fn normal_samples(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = StreamKey::new(seed, Purpose::Synthetic, 0).rng();
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn phi(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn kde_reproduces_standard_normal() {
        let xs = normal_samples(100_000, 42);
        let est = kde_log_domain(&xs, 0.0, &KdeOptions::default()).unwrap();
        assert!((est.integral() - 1.0).abs() < 0.01);
        let worst = est
            .grid
            .iter()
            .zip(&est.density)
            .filter(|(z, _)| z.abs() <= 2.0)
            .map(|(z, d)| (d - phi(*z)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "{worst}");
        assert!(est.density.iter().all(|&d| d >= 0.0));
        assert!(est.se.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn change_of_variables_is_exact() {
        let xs = normal_samples(20_000, 1);
        let est = kde_log_domain(&xs, 0.3, &KdeOptions::default()).unwrap();
        let f = est.to_f_domain().unwrap();
        for j in (0..est.grid.len()).step_by(37) {
            assert!((f.density[j] * f.grid[j] - est.density[j]).abs() <= 1e-15 * est.density[j].max(1e-300));
        }
        assert!((f.integral() - 1.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_and_small_inputs_are_refused() {
        assert!(matches!(kde_log_domain(&vec![1.0; 20_000], 0.0, &KdeOptions::default()), Err(Error::Degenerate(_))));
        assert!(kde_log_domain(&[0.0; 10], 0.0, &KdeOptions::default()).is_err());
        let params = ModelParams::new(0.0, 0.0, 0.7, 1.0).unwrap();
        assert!(verify_gaussian_tail(&[0.0; 10], &params, &[-1.0]).is_err());
    }

    #[test]
    fn gaussian_tail_at_zero_is_trivial() {
        let params = ModelParams::new(0.0, 1.0, 0.7, 1.0).unwrap();
        let xs = normal_samples(10_000, 2).into_iter().map(|x| 0.5 * x).collect::<Vec<_>>();
        let r = verify_gaussian_tail(&xs, &params, &[0.0, -1.0, -3.0]).unwrap();
        assert!(r.passed);
        assert_eq!(r.points[0].rhs, 1.0);
        assert!((r.points[1].rhs - (-0.5f64).exp()).abs() < 1e-15);
        assert!((r.points[2].rhs - 0.011108996538242306).abs() < 1e-15);
    }

    #[test]
    fn envelope_rule_flags_a_heavy_tail() {
        // a Laplace-like tail eventually beats any Gaussian envelope
        let mut rng = StreamKey::new(3, Purpose::Synthetic, 0).rng();
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * 1.5 * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let params = ModelParams::new(0.0, 0.5, 0.7, 1.0).unwrap();
        let est = kde_log_domain(&xs, 0.0, &KdeOptions::default()).unwrap();
        let env = verify_envelopes(&est, &params).unwrap();
        let right = env.reports.iter().find(|r| r.bound_id == "kl2").unwrap();
        assert!(!right.passed);
    }

    #[test]
    fn w_profile_on_a_synthetic_pair() {
        // Φ drawn inside (0, σ²T^{2H}] so the bound holds by construction
        let params = ModelParams::new(0.0, 1.0, 0.7, 1.0).unwrap();
        let xs = normal_samples(50_000, 4).into_iter().map(|x| 0.5 * x).collect::<Vec<_>>();
        let phis: Vec<f64> = xs.iter().map(|x| 0.25 + 0.1 * x.tanh()).collect();
        let w = estimate_w_x(&xs, &phis, &params, 10).unwrap();
        for r in &w.reports {
            assert!(r.passed, "{}", r.summary_line());
        }
        assert_eq!(w.bins.len(), 20);
    }
}
