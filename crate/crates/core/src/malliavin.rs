//! Malliavin derivatives of X = ln F − E[ln F] on simulated paths.
//!
//! Everything is computed in units of the kernel at the horizon. With
//! p_i = τ_i e^{a t_i + σB^H_{t_i}}/F and r_ik = K(t_i,t_k)/K(T,t_k):
//!
//! * `u_k = D_{t_k}X / (σK(T,t_k)) = Σ_{i>k} p_i r_ik`, in [0, 1];
//! * `D_rD_θX / (σ²K(T,θ)K(T,r)) = Σ_{i>max} p_i r_iθ r_ir − u_θ u_r`, in [0, 1].
//!
//! The normalization keeps θ = 0 finite, where K(T,θ) blows up.
//! Conditional expectations given F_θ are estimated by nested Monte Carlo
//! on a coarsened θ-grid, resampling the driving noise not yet revealed
//! at θ from its exact Gaussian law.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::functional::{trapezoid_weights, ModelParams};
use crate::kernel::KernelTable;
use crate::paths::{fbm_from_bm, outer_path, ConditionalField, DrivingNoise, FbmPath};
use crate::quad::GradedRule;
use crate::report::{BoundReport, BoundTally};
use crate::rng::{Purpose, StreamKey};
use crate::stats::{variance_with_se, MeanAccumulator};

pub const DEFAULT_STRIDE: usize = 4;
pub const MIN_INNER_PATHS: usize = 50;

/// Coarsened θ-grid with product-integration weights
/// W_j = ∫ K(T,θ)² ψ_j(θ) dθ for the hat functions ψ_j on the subgrid.
///
/// Any integrand g(θ) = K(T,θ)² h(θ) is then approximated by Σ_j W_j h(θ_j);
/// since Σ_j W_j = T^{2H}, h ∈ [0,1] keeps the result in [0, T^{2H}].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgrid {
    pub stride: usize,
    /// Grid indices, always including 0 and n.
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Subgrid {
    pub fn new(table: &KernelTable, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidParam("subgrid stride must be positive".into()));
        }
        let n = table.n;
        let mut nodes: Vec<usize> = (0..=n).step_by(stride).collect();
        if *nodes.last().unwrap() != n {
            nodes.push(n);
        }
        let kernel = table.kernel();
        let horizon = table.horizon;
        let alpha = table.alpha();
        let rule = GradedRule::new(12, 24);
        let mut weights = vec![0.0; nodes.len()];
        for j in 0..nodes.len() - 1 {
            let (a, b) = (table.grid[nodes[j]], table.grid[nodes[j + 1]]);
            let h = b - a;
            let beta_a = if nodes[j] == 0 { -2.0 * alpha } else { 0.0 };
            let beta_b = if nodes[j + 1] == n { 2.0 * alpha } else { 0.0 };
            let k2 = |x: f64| {
                let k = kernel.eval_unchecked(horizon, x);
                k * k
            };
            weights[j] += rule.integrate(a, b, beta_a, beta_b, |x| k2(x) * (b - x) / h);
            weights[j + 1] += rule.integrate(a, b, beta_a, beta_b, |x| k2(x) * (x - a) / h);
        }
        Ok(Self { stride, nodes, weights })
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Per-experiment constants shared by every path.
#[derive(Debug, Clone)]
pub struct MalliavinSetup<'a> {
    pub table: &'a KernelTable,
    pub params: ModelParams,
    pub subgrid: Subgrid,
    tau: Vec<f64>,
    drift: Vec<f64>,
    /// ∫_{t_k}^T K(s,t_k) ds / K(T,t_k), with the θ → 0 limit T/(2H).
    time_integral_ratio: Vec<f64>,
}

impl<'a> MalliavinSetup<'a> {
    pub fn new(table: &'a KernelTable, params: ModelParams, stride: usize) -> Result<Self> {
        params.check_table(table)?;
        let n = table.n;
        let subgrid = Subgrid::new(table, stride)?;
        let tau = trapezoid_weights(n, table.dt());
        let drift = table.grid.iter().map(|t| params.drift * t).collect();
        let kernel = table.kernel();
        let time_integral_ratio = (0..=n)
            .map(|k| {
                if k == 0 {
                    table.horizon / (2.0 * table.hurst)
                } else if k == n {
                    0.0
                } else {
                    kernel.time_integral(table.grid[k], table.horizon) / table.value(n, k)
                }
            })
            .collect();
        Ok(Self { table, params, subgrid, tau, drift, time_integral_ratio })
    }

    /// K(T, t_k); infinite at k = 0.
    pub fn kernel_at_horizon(&self, k: usize) -> f64 {
        if k == 0 {
            f64::INFINITY
        } else {
            self.table.value(self.table.n, k)
        }
    }

    fn exponent(&self, i: usize, b: f64) -> f64 {
        (self.drift[i] + self.params.sigma * b).exp()
    }
}

/// Pathwise quantities needed by every derivative computation.
#[derive(Debug, Clone)]
pub struct PathState {
    pub f: f64,
    pub ln_f: f64,
    /// τ_i e_i / F.
    pub p: Vec<f64>,
    /// Normalized D_{t_k}X.
    pub u: Vec<f64>,
    /// τ_i e_i.
    weighted: Vec<f64>,
    field: ConditionalField,
}

impl PathState {
    pub fn new(setup: &MalliavinSetup, path: &FbmPath) -> Result<Self> {
        let table = setup.table;
        let n = table.n;
        let xi = path.columns(table)?;
        let weighted: Vec<f64> = (0..=n).map(|i| setup.tau[i] * setup.exponent(i, path.fbm[i])).collect();
        let f: f64 = weighted.iter().sum();
        let p: Vec<f64> = weighted.iter().map(|w| w / f).collect();
        let u = normalized_dx(table, &p);
        let field = ConditionalField::new(table, &xi);
        Ok(Self { f, ln_f: f.ln(), p, u, weighted, field })
    }

    pub fn field(&self) -> &ConditionalField {
        &self.field
    }
}

/// u_k = Σ_{i>k} p_i r_ik for every grid node.
pub fn normalized_dx(table: &KernelTable, p: &[f64]) -> Vec<f64> {
    let n = table.n;
    let mut u = vec![0.0; n + 1];
    for i in 1..=n {
        for (k, uk) in u.iter_mut().enumerate().take(i) {
            *uk += p[i] * table.ratio(i, k);
        }
    }
    u
}

/// Normalized D_rD_θX for θ ≤ r, packed by r: entry r(r+1)/2 + θ.
pub fn normalized_d2x(table: &KernelTable, p: &[f64], u: &[f64]) -> Vec<f64> {
    let n = table.n;
    let mut out = Vec::with_capacity((n + 1) * (n + 2) / 2);
    let mut acc = vec![0.0; n + 1];
    for r in 0..=n {
        acc[..=r].iter_mut().for_each(|a| *a = 0.0);
        for i in r + 1..=n {
            let w = p[i] * table.ratio(i, r);
            for (th, a) in acc.iter_mut().enumerate().take(r + 1) {
                *a += w * table.ratio(i, th);
            }
        }
        out.extend((0..=r).map(|th| acc[th] - u[th] * u[r]));
    }
    out
}

fn d2_index(r: usize, theta: usize) -> usize {
    let (hi, lo) = if r >= theta { (r, theta) } else { (theta, r) };
    hi * (hi + 1) / 2 + lo
}

/// D_θX at every grid node; `None` at θ = 0 where K(T,θ) is infinite.
pub fn dx(setup: &MalliavinSetup, path: &FbmPath) -> Result<Vec<Option<f64>>> {
    let state = PathState::new(setup, path)?;
    Ok(absolute_dx(setup, &state.u))
}

fn absolute_dx(setup: &MalliavinSetup, u: &[f64]) -> Vec<Option<f64>> {
    u.iter()
        .enumerate()
        .map(|(k, uk)| (k > 0).then(|| setup.params.sigma * setup.kernel_at_horizon(k) * uk))
        .collect()
}

/// D_rD_θX for 1 ≤ θ ≤ r ≤ n, packed like [`normalized_d2x`] but
/// starting at θ = r = 1.
pub fn d2x(setup: &MalliavinSetup, path: &FbmPath) -> Result<Vec<f64>> {
    let state = PathState::new(setup, path)?;
    let table = setup.table;
    let d2 = normalized_d2x(table, &state.p, &state.u);
    let s2 = setup.params.sigma * setup.params.sigma;
    let mut out = Vec::new();
    for r in 1..=table.n {
        for th in 1..=r {
            out.push(s2 * setup.kernel_at_horizon(r) * setup.kernel_at_horizon(th) * d2[d2_index(r, th)]);
        }
    }
    Ok(out)
}

/// ln F as a function of the driving noise (the centering constant
/// cancels in every difference quotient).
pub fn ln_f_from_noise(table: &KernelTable, params: &ModelParams, noise: DrivingNoise) -> Result<f64> {
    params.check_table(table)?;
    let path = fbm_from_bm(table, noise)?;
    Ok(crate::functional::functional_f(&path, params).ln())
}

/// ∂X/∂ΔB_j for j = 1..=n (entry j−1), from the chain rule:
/// σ Σ_i p_i w_ij / Δt, i.e. the cell average of D_θX over cell j.
pub fn noise_gradient(setup: &MalliavinSetup, path: &FbmPath) -> Result<Vec<f64>> {
    let state = PathState::new(setup, path)?;
    let table = setup.table;
    let dt = table.dt();
    let sigma = setup.params.sigma;
    Ok((1..=table.n)
        .map(|j| sigma * (j..=table.n).map(|i| state.p[i] * table.row_weight(i, j)).sum::<f64>() / dt)
        .collect())
}

/// ∂²X/∂ΔB_j∂ΔB_l from the chain rule.
pub fn noise_hessian(setup: &MalliavinSetup, path: &FbmPath, j: usize, l: usize) -> Result<f64> {
    let table = setup.table;
    if j == 0 || l == 0 || j > table.n || l > table.n {
        return Err(Error::Domain(format!("increment indices must lie in 1..={}", table.n)));
    }
    let state = PathState::new(setup, path)?;
    let dt = table.dt();
    let s2 = setup.params.sigma * setup.params.sigma;
    let m = j.max(l);
    let both: f64 = (m..=table.n).map(|i| state.p[i] * table.row_weight(i, j) * table.row_weight(i, l)).sum();
    let gj: f64 = (j..=table.n).map(|i| state.p[i] * table.row_weight(i, j)).sum();
    let gl: f64 = (l..=table.n).map(|i| state.p[i] * table.row_weight(i, l)).sum();
    Ok(s2 * (both - gj * gl) / (dt * dt))
}

/// Step of the finite-difference oracle: 1e−5·√Δt.
pub fn fd_step(table: &KernelTable) -> f64 {
    1e-5 * table.dt().sqrt()
}

fn perturbed(noise: &DrivingNoise, moves: &[(usize, f64)]) -> DrivingNoise {
    let mut out = noise.clone();
    for &(j, d) in moves {
        out.increments[j - 1] += d;
    }
    out
}

/// Central difference of X in the increment ΔB_j.
pub fn fd_gradient(table: &KernelTable, params: &ModelParams, noise: &DrivingNoise, j: usize, eps: f64) -> Result<f64> {
    let plus = ln_f_from_noise(table, params, perturbed(noise, &[(j, eps)]))?;
    let minus = ln_f_from_noise(table, params, perturbed(noise, &[(j, -eps)]))?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Central mixed second difference of X in ΔB_j and ΔB_l.
pub fn fd_hessian(
    table: &KernelTable,
    params: &ModelParams,
    noise: &DrivingNoise,
    j: usize,
    l: usize,
    eps: f64,
) -> Result<f64> {
    let x = |dj: f64, dl: f64| ln_f_from_noise(table, params, perturbed(noise, &[(j, dj), (l, dl)]));
    if j == l {
        let (p, z, m) = (x(eps, 0.0)?, x(0.0, 0.0)?, x(-eps, 0.0)?);
        return Ok((p - 2.0 * z + m) / (eps * eps));
    }
    Ok((x(eps, eps)? - x(eps, -eps)? - x(-eps, eps)? + x(-eps, -eps)?) / (4.0 * eps * eps))
}

/// Inner-MC estimate of normalized conditional quantities at θ = t_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerEstimate {
    pub theta_index: usize,
    /// E[u_k | F_{t_k}]
    pub mean: f64,
    pub se: f64,
    /// E[normalized D_sD_θX | F_θ] for the requested s ≤ θ.
    #[serde(default)]
    pub d2_mean: Vec<f64>,
    #[serde(default)]
    pub d2_se: Vec<f64>,
}

/// Conditional expectation of the normalized D_{t_k}X (and optionally of
/// D_sD_{t_k}X for the grid nodes `s_nodes`, all ≤ k) by `inner_paths`
/// antithetic draws of the noise not yet revealed at t_k.
pub fn inner_estimate(
    setup: &MalliavinSetup,
    state: &PathState,
    k: usize,
    inner_paths: usize,
    key: StreamKey,
    s_nodes: &[usize],
) -> InnerEstimate {
    let table = setup.table;
    let n = table.n;
    let ns = s_nodes.len();
    if k == n {
        return InnerEstimate {
            theta_index: k,
            mean: 0.0,
            se: 0.0,
            d2_mean: vec![0.0; ns],
            d2_se: vec![0.0; ns],
        };
    }
    debug_assert!(s_nodes.iter().all(|&s| s <= k));
    let known = table.known_columns(k);
    let past_sum: f64 = state.weighted[..=k].iter().sum();
    // Σ_{s<i≤k} τ_i e_i r_is for each requested s
    let past_r: Vec<f64> =
        s_nodes.iter().map(|&s| (s + 1..=k).map(|i| state.weighted[i] * table.ratio(i, s)).sum()).collect();
    let base: Vec<f64> = (k + 1..=n).map(|i| state.field.mean(i, k)).collect();

    let pairs = inner_paths.div_ceil(2);
    let mut rng = key.rng();
    let mut z = vec![0.0; n + 1 - known];
    let mut spread = vec![0.0; n - k];
    let mut fut = vec![0.0; n - k];
    let mut acc_u = MeanAccumulator::new();
    let mut acc_d2 = vec![MeanAccumulator::new(); ns];
    let mut d2_pair = vec![0.0; ns];

    for _ in 0..pairs {
        for zc in z.iter_mut() {
            *zc = rng.sample(StandardNormal);
        }
        for (off, i) in (k + 1..=n).enumerate() {
            let row = &table.loadings(i)[known..];
            spread[off] = row.iter().zip(&z).map(|(a, x)| a * x).sum();
        }
        let mut u_pair = 0.0;
        d2_pair.iter_mut().for_each(|d| *d = 0.0);
        for sign in [1.0, -1.0] {
            let mut f = past_sum;
            for (off, i) in (k + 1..=n).enumerate() {
                fut[off] = setup.tau[i] * setup.exponent(i, base[off] + sign * spread[off]);
                f += fut[off];
            }
            let inv_f = 1.0 / f;
            let u_k: f64 = (k + 1..=n).zip(&fut).map(|(i, w)| w * table.ratio(i, k)).sum::<f64>() * inv_f;
            u_pair += 0.5 * u_k;
            for (j, &s) in s_nodes.iter().enumerate() {
                let mut cross = 0.0;
                let mut future_s = 0.0;
                for (i, w) in (k + 1..=n).zip(&fut) {
                    let rs = table.ratio(i, s);
                    cross += w * table.ratio(i, k) * rs;
                    future_s += w * rs;
                }
                let u_s = (past_r[j] + future_s) * inv_f;
                d2_pair[j] += 0.5 * (cross * inv_f - u_k * u_s);
            }
        }
        acc_u.push(u_pair);
        for (a, d) in acc_d2.iter_mut().zip(&d2_pair) {
            a.push(*d);
        }
    }
    InnerEstimate {
        theta_index: k,
        mean: acc_u.mean(),
        se: acc_u.std_error(),
        d2_mean: acc_d2.iter().map(|a| a.mean()).collect(),
        d2_se: acc_d2.iter().map(|a| a.std_error()).collect(),
    }
}

/// E[D_θX | F_θ] at θ = t_k with its inner standard error.
pub fn conditional_dx(
    setup: &MalliavinSetup,
    path: &FbmPath,
    k: usize,
    inner_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_inner(inner_paths)?;
    if k > setup.table.n {
        return Err(Error::Domain(format!("θ index {k} outside grid")));
    }
    let state = PathState::new(setup, path)?;
    let est = inner_estimate(setup, &state, k, inner_paths, inner_key(seed, path.path_id, k), &[]);
    if k == 0 {
        // normalized value; K(T,0) is infinite
        return Ok((est.mean, est.se));
    }
    let scale = setup.params.sigma * setup.kernel_at_horizon(k);
    Ok((scale * est.mean, scale * est.se))
}

fn check_inner(inner_paths: usize) -> Result<()> {
    if inner_paths < MIN_INNER_PATHS {
        return Err(Error::InvalidParam(format!("inner_paths must be at least {MIN_INNER_PATHS}, got {inner_paths}")));
    }
    Ok(())
}

fn inner_key(seed: u64, path_id: u64, k: usize) -> StreamKey {
    StreamKey::new(seed, Purpose::InnerConditional, path_id).with_sub(k as u64)
}

/// Φ_X with its inner-MC standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub phi: f64,
    pub se: f64,
}

/// Φ_X = σ² Σ_j W_j u(θ_j) E[u(θ_j) | F_θj].
pub fn phi_x(setup: &MalliavinSetup, path: &FbmPath, inner_paths: usize, seed: u64) -> Result<PhiEstimate> {
    check_inner(inner_paths)?;
    let state = PathState::new(setup, path)?;
    let cond = conditional_profile(setup, &state, path.path_id, inner_paths, seed, false);
    Ok(phi_from(setup, &state, &cond))
}

fn conditional_profile(
    setup: &MalliavinSetup,
    state: &PathState,
    path_id: u64,
    inner_paths: usize,
    seed: u64,
    with_d2: bool,
) -> Vec<InnerEstimate> {
    let nodes = &setup.subgrid.nodes;
    nodes
        .iter()
        .map(|&k| {
            let s_nodes: Vec<usize> =
                if with_d2 { nodes.iter().copied().filter(|&s| s <= k).collect() } else { Vec::new() };
            inner_estimate(setup, state, k, inner_paths, inner_key(seed, path_id, k), &s_nodes)
        })
        .collect()
}

fn phi_from(setup: &MalliavinSetup, state: &PathState, cond: &[InnerEstimate]) -> PhiEstimate {
    let s2 = setup.params.sigma * setup.params.sigma;
    let w = &setup.subgrid.weights;
    let mut phi = 0.0;
    let mut var = 0.0;
    for (j, c) in cond.iter().enumerate() {
        let uk = state.u[c.theta_index];
        phi += w[j] * uk * c.mean;
        var += (w[j] * uk * c.se).powi(2);
    }
    PhiEstimate { phi: s2 * phi, se: s2 * var.sqrt() }
}

/// Right-hand side of the pathwise lower bound
/// Φ_X ≥ (σ²/T) e^{−3|a|T + σ min B − σ max B + σ min N} (T^{2H+2}/(2H+2)) / max M.
pub fn phi_lower_bound(setup: &MalliavinSetup, path: &FbmPath, state: &PathState) -> f64 {
    let p = &setup.params;
    let t = p.horizon;
    let (lo, hi) = path.min_max();
    let m = crate::paths::martingale_from_field(path, setup.table, p, &state.field);
    let max_m = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_n = state.field.min();
    let h = p.hurst;
    let integral = t.powf(2.0 * h + 2.0) / (2.0 * h + 2.0);
    p.sigma * p.sigma / t * (-3.0 * p.drift.abs() * t + p.sigma * (lo - hi + min_n)).exp() * integral / max_m
}

/// Normalized lower bound on E[u_k | F_{t_k}]:
/// e^{−|a|T + σ min N} (∫_θ^T K(s,θ)ds / K(T,θ)) / max M.
fn conditional_lower_bound(setup: &MalliavinSetup, k: usize, min_n: f64, max_m: f64) -> f64 {
    let p = &setup.params;
    (-p.drift.abs() * p.horizon + p.sigma * min_n).exp() * setup.time_integral_ratio[k] / max_m
}

/// Per-path profile for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinProfile {
    pub path_id: u64,
    pub theta: Vec<f64>,
    pub dx_normalized: Vec<f64>,
    /// D_θX; `None` at θ = 0.
    pub dx: Vec<Option<f64>>,
    /// Bound σK(T,θ); `None` at θ = 0.
    pub dx_bound: Vec<Option<f64>>,
    /// Normalized D_rD_θX, packed lower triangle (r ≥ θ).
    pub d2x_normalized: Vec<f64>,
    pub cond_theta_index: Vec<usize>,
    /// Normalized E[D_θX | F_θ] on the subgrid.
    pub cond_dx_normalized: Vec<f64>,
    pub cond_dx_se: Vec<f64>,
    pub phi_x: f64,
    pub phi_se: f64,
    pub phi_lower_bound: f64,
}

/// Per-path scalars kept for batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub path_id: u64,
    pub f: f64,
    pub ln_f: f64,
    pub phi_x: f64,
    pub phi_se: f64,
    pub phi_lower_bound: f64,
    /// Normalized D_0X and its conditional (here unconditional) mean.
    pub u0: f64,
    pub cond_u0: f64,
    pub cond_u0_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedOptions {
    pub inner_paths: usize,
    pub with_dphi: bool,
    /// Number of leading paths whose full profile is returned.
    pub keep_profiles: usize,
    /// Stop scheduling new outer paths after this much wall time.
    #[serde(default)]
    pub budget: Option<Duration>,
    pub exec: Exec,
}

impl Default for NestedOptions {
    fn default() -> Self {
        Self { inner_paths: 200, with_dphi: false, keep_profiles: 0, budget: None, exec: Exec::default() }
    }
}

pub const BOUND_DX: &str = "kld2";
pub const BOUND_D2X: &str = "kld3";
pub const BOUND_COND_DX_UPPER: &str = "kld2-conditional";
pub const BOUND_COND_DX_LOWER: &str = "uuu2";
pub const BOUND_PHI_UPPER: &str = "phi-upper";
pub const BOUND_PHI_LOWER: &str = "ol0";
pub const BOUND_DPHI: &str = "dphi";
pub const BOUND_DPHI_INTEGRAL: &str = "dphi-integral";

struct PathTallies {
    tallies: Vec<BoundTally>,
}

// Derivative checks run in normalized units (divided by σK(T,θ) etc.), so
// their tolerance floors are the normalized upper bounds.
fn fresh_tallies(params: &ModelParams, with_dphi: bool) -> Vec<BoundTally> {
    let scale_x = params.variance_scale();
    let t2h = params.horizon.powf(2.0 * params.hurst);
    let mut v = vec![
        BoundTally::new(BOUND_DX, "0 <= D_θX <= σK(T,θ)").with_scale(1.0),
        BoundTally::new(BOUND_D2X, "0 <= D_rD_θX <= 2σ²K(T,θ)K(T,r)").with_rel_tolerance(1e-12).with_scale(2.0),
        BoundTally::new(BOUND_COND_DX_UPPER, "0 <= E[D_θX|F_θ] <= σK(T,θ)").with_scale(1.0),
        BoundTally::new(BOUND_COND_DX_LOWER, "E[D_θX|F_θ] >= σe^{-|a|T+σ min N}∫_θ^T K(s,θ)ds / max M"),
        BoundTally::new(BOUND_PHI_UPPER, "0 <= Φ_X <= σ²T^{2H}").with_scale(scale_x),
        BoundTally::new(BOUND_PHI_LOWER, "Φ_X >= (σ²/T)e^{-3|a|T+σ(min B-max B+min N)} T^{2H+2}/(2H+2) / max M"),
    ];
    if with_dphi {
        v.push(BoundTally::new(BOUND_DPHI, "0 <= D_sΦ_X <= 4σ³K(T,s)T^{2H}").with_scale(4.0 * t2h));
        v.push(
            BoundTally::new(BOUND_DPHI_INTEGRAL, "0 <= ∫D_sΦ_X E[D_sX|F_s]ds <= 4σ⁴T^{4H}").with_scale(4.0 * t2h * t2h),
        );
    }
    v
}

struct PathOutcome {
    summary: PathSummary,
    u: Vec<f64>,
    profile: Option<MalliavinProfile>,
    tallies: PathTallies,
}

fn process_path(setup: &MalliavinSetup, seed: u64, index: u64, opts: &NestedOptions, keep: bool) -> PathOutcome {
    let table = setup.table;
    let n = table.n;
    let p = &setup.params;
    let path = outer_path(table, seed, index);
    let state = PathState::new(setup, &path).expect("outer paths carry their noise");
    let mut tallies = fresh_tallies(p, opts.with_dphi);
    let scale_x = p.variance_scale();

    // pathwise bounds, normalized: u ∈ [0,1], d2 ∈ [0,2]
    for (k, &uk) in state.u.iter().enumerate() {
        let x = table.grid[k];
        tallies[0].lower(x, uk, 0.0, 0.0);
        tallies[0].upper(x, uk, 1.0, 0.0);
    }
    let d2 = normalized_d2x(table, &state.p, &state.u);
    for r in 0..=n {
        for th in 0..=r {
            let v = d2[d2_index(r, th)];
            tallies[1].lower(table.grid[th], v, 0.0, 0.0);
            tallies[1].upper(table.grid[th], v, 2.0, 0.0);
        }
    }
    let cond = conditional_profile(setup, &state, path.path_id, opts.inner_paths, seed, opts.with_dphi);
    let m = crate::paths::martingale_from_field(&path, table, p, &state.field);
    let max_m = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_n = state.field.min();
    for c in &cond {
        let x = table.grid[c.theta_index];
        tallies[2].lower(x, c.mean, 0.0, c.se);
        tallies[2].upper(x, c.mean, 1.0, c.se);
        let lb = conditional_lower_bound(setup, c.theta_index, min_n, max_m);
        tallies[3].lower(x, c.mean, lb, c.se);
    }
    let phi = phi_from(setup, &state, &cond);
    tallies[4].lower(index as f64, phi.phi, 0.0, phi.se);
    tallies[4].upper(index as f64, phi.phi, scale_x, phi.se);
    let lower = phi_lower_bound(setup, &path, &state);
    tallies[5].lower(index as f64, phi.phi, lower, phi.se);

    if opts.with_dphi {
        let (dphi, dphi_se) = dphi_profile(setup, &state, &cond, &d2);
        let t2h = p.horizon.powf(2.0 * p.hurst);
        let w = &setup.subgrid.weights;
        let mut integral = 0.0;
        let mut integral_var = 0.0;
        for (j, &s) in setup.subgrid.nodes.iter().enumerate() {
            let x = table.grid[s];
            tallies[6].lower(x, dphi[j], 0.0, dphi_se[j]);
            tallies[6].upper(x, dphi[j], 4.0 * t2h, dphi_se[j]);
            integral += w[j] * dphi[j] * cond[j].mean;
            integral_var += (w[j] * dphi[j] * cond[j].se).powi(2) + (w[j] * dphi_se[j] * cond[j].mean).powi(2);
        }
        let se = integral_var.sqrt();
        tallies[7].lower(index as f64, integral, 0.0, se);
        tallies[7].upper(index as f64, integral, 4.0 * t2h * t2h, se);
    }

    let c0 = &cond[0];
    let summary = PathSummary {
        path_id: path.path_id,
        f: state.f,
        ln_f: state.ln_f,
        phi_x: phi.phi,
        phi_se: phi.se,
        phi_lower_bound: lower,
        u0: state.u[0],
        cond_u0: c0.mean,
        cond_u0_se: c0.se,
    };
    let profile = keep.then(|| MalliavinProfile {
        path_id: path.path_id,
        theta: table.grid.clone(),
        dx_normalized: state.u.clone(),
        dx: absolute_dx(setup, &state.u),
        dx_bound: (0..=n).map(|k| (k > 0).then(|| p.sigma * setup.kernel_at_horizon(k))).collect(),
        d2x_normalized: d2.clone(),
        cond_theta_index: setup.subgrid.nodes.clone(),
        cond_dx_normalized: cond.iter().map(|c| c.mean).collect(),
        cond_dx_se: cond.iter().map(|c| c.se).collect(),
        phi_x: phi.phi,
        phi_se: phi.se,
        phi_lower_bound: lower,
    });
    PathOutcome { summary, u: state.u, profile, tallies: PathTallies { tallies } }
}

/// Normalized D_sΦ_X / (σ³K(T,s)) on the subgrid:
/// Σ_j W_j [d2(s,θ_j) E[u_θj|F] + 1_{s≤θ_j} u_θj E[d2(s,θ_j)|F_θj]].
fn dphi_profile(
    setup: &MalliavinSetup,
    state: &PathState,
    cond: &[InnerEstimate],
    d2: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let nodes = &setup.subgrid.nodes;
    let w = &setup.subgrid.weights;
    let mut val = vec![0.0; nodes.len()];
    let mut var = vec![0.0; nodes.len()];
    for (js, &s) in nodes.iter().enumerate() {
        for (j, c) in cond.iter().enumerate() {
            let th = nodes[j];
            let first = d2[d2_index(s, th)];
            val[js] += w[j] * first * c.mean;
            var[js] += (w[j] * first * c.se).powi(2);
            if s <= th {
                // s-nodes requested at θ_j are the subgrid nodes ≤ θ_j, in order
                let u = state.u[th];
                val[js] += w[j] * u * c.d2_mean[js];
                var[js] += (w[j] * u * c.d2_se[js]).powi(2);
            }
        }
    }
    (val, var.into_iter().map(f64::sqrt).collect())
}

/// Result of a nested Monte Carlo batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedBatch {
    pub seed: u64,
    pub grid_n: usize,
    pub inner_paths: usize,
    pub stride: usize,
    pub planned_paths: usize,
    pub summaries: Vec<PathSummary>,
    /// Batch mean of the normalized D_θX on the full grid.
    pub mean_dx_normalized: Vec<f64>,
    pub profiles: Vec<MalliavinProfile>,
    pub reports: Vec<BoundReport>,
    pub coverage: f64,
    pub subgrid_weight_sum: f64,
}

impl NestedBatch {
    pub fn report(&self, id: &str) -> Option<&BoundReport> {
        self.reports.iter().find(|r| r.bound_id == id)
    }

    pub fn complete(&self) -> bool {
        self.summaries.len() == self.planned_paths
    }
}

const CHUNK: usize = 64;

/// Outer paths 0..n_outer with nested conditional estimates and bound checks.
pub fn run_nested(setup: &MalliavinSetup, seed: u64, n_outer: usize, opts: &NestedOptions) -> Result<NestedBatch> {
    check_inner(opts.inner_paths)?;
    let start = Instant::now();
    let mut summaries = Vec::with_capacity(n_outer);
    let mut profiles = Vec::new();
    let mut tallies = fresh_tallies(&setup.params, opts.with_dphi);
    let mut u_sum = vec![0.0; setup.table.n + 1];
    let mut done = 0;
    while done < n_outer {
        if let Some(budget) = opts.budget {
            if start.elapsed() > budget {
                break;
            }
        }
        let len = CHUNK.min(n_outer - done);
        let outcomes = opts.exec.map(len, |off| {
            let idx = done + off;
            process_path(setup, seed, idx as u64, opts, idx < opts.keep_profiles)
        });
        for o in outcomes {
            summaries.push(o.summary);
            u_sum.iter_mut().zip(&o.u).for_each(|(a, b)| *a += b);
            profiles.extend(o.profile);
            for (t, other) in tallies.iter_mut().zip(o.tallies.tallies) {
                t.merge(other);
            }
        }
        done += len;
    }
    let coverage = if n_outer == 0 { 1.0 } else { done as f64 / n_outer as f64 };
    let reports = tallies
        .into_iter()
        .map(|mut t| {
            t.set_coverage(coverage);
            if coverage < 1.0 {
                t.note(format!("budget exhausted after {done} of {n_outer} outer paths"));
            }
            t.finish()
        })
        .collect();
    let mean_dx_normalized = u_sum.iter().map(|s| if done > 0 { s / done as f64 } else { 0.0 }).collect();
    Ok(NestedBatch {
        seed,
        mean_dx_normalized,
        grid_n: setup.table.n,
        inner_paths: opts.inner_paths,
        stride: setup.subgrid.stride,
        planned_paths: n_outer,
        summaries,
        profiles,
        reports,
        coverage,
        subgrid_weight_sum: setup.subgrid.weight_sum(),
    })
}

/// Var(X) = E[Φ_X] compared within three combined standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceIdentity {
    pub n_paths: usize,
    pub var_x: f64,
    pub var_x_se: f64,
    pub mean_phi: f64,
    pub mean_phi_se: f64,
    pub difference: f64,
    pub combined_se: f64,
    pub passed: bool,
}

pub const BOUND_VARIANCE_IDENTITY: &str = "variance-identity";
pub const BOUND_CLARK_OCONE_MEAN: &str = "clark-ocone-mean";
pub const BOUND_CLARK_OCONE_DECREASE: &str = "clark-ocone-decrease";

impl VarianceIdentity {
    pub fn report(&self) -> BoundReport {
        let mut t = BoundTally::new(BOUND_VARIANCE_IDENTITY, "sample Var(X) = sample mean of Φ_X within 3 combined SE")
            .with_scale(self.var_x)
            .keep_points();
        t.upper(self.var_x, self.difference.abs(), 0.0, self.combined_se);
        t.finish()
    }
}

/// Mean residual within 3 SE at every grid, and residual variance strictly
/// decreasing along `batches` (ordered by increasing grid size).
pub fn clark_ocone_reports(batches: &[ClarkOconeSummary]) -> Vec<BoundReport> {
    let mut mean = BoundTally::new(BOUND_CLARK_OCONE_MEAN, "mean Clark-Ocone residual = 0 within 3 SE").keep_points();
    for b in batches {
        mean.upper(b.grid_n as f64, b.mean.abs(), 0.0, b.se);
    }
    let mut dec = BoundTally::new(BOUND_CLARK_OCONE_DECREASE, "residual variance strictly decreases under grid refinement")
        .with_rel_tolerance(0.0)
        .keep_points();
    for w in batches.windows(2) {
        // strict: equal variances count as a violation
        dec.upper(w[1].grid_n as f64, w[1].variance, w[0].variance * (1.0 - f64::EPSILON), 0.0);
    }
    if batches.len() < 2 {
        dec.note("fewer than two grids: nothing to compare");
    }
    vec![mean.finish(), dec.finish()]
}

pub fn variance_identity(summaries: &[PathSummary]) -> VarianceIdentity {
    let ln_f: Vec<f64> = summaries.iter().map(|s| s.ln_f).collect();
    let phi: Vec<f64> = summaries.iter().map(|s| s.phi_x).collect();
    let (var_x, var_x_se) = variance_with_se(&ln_f);
    let acc = MeanAccumulator::from_slice(&phi);
    let combined_se = (var_x_se * var_x_se + acc.std_error() * acc.std_error()).sqrt();
    let difference = var_x - acc.mean();
    VarianceIdentity {
        n_paths: summaries.len(),
        var_x,
        var_x_se,
        mean_phi: acc.mean(),
        mean_phi_se: acc.std_error(),
        difference,
        combined_se,
        passed: difference.abs() <= 3.0 * combined_se,
    }
}

/// F − M_0 − Σ_c E[∂_cF | G_c] ξ_c with G_c the noise columns before c and
/// E[∂_cF | G_c] = σ Σ_i τ_i A_ic e^{a t_i + σN^c_i + σ²v^c_i/2} in closed form.
pub fn clark_ocone_residual(table: &KernelTable, params: &ModelParams, path: &FbmPath) -> Result<f64> {
    params.check_table(table)?;
    let xi = path.columns(table)?;
    let n = table.n;
    let tau = trapezoid_weights(n, table.dt());
    let (a, s) = (params.drift, params.sigma);
    let mut f = 0.0;
    let mut m0 = 0.0;
    let mut integral = vec![0.0; n + 1];
    for i in 0..=n {
        let row = table.loadings(i);
        let energy = table.discrete_energy(i);
        f += tau[i] * (a * table.grid[i] + s * path.fbm[i]).exp();
        m0 += tau[i] * (a * table.grid[i] + 0.5 * s * s * energy).exp();
        let mut mean = 0.0;
        let mut revealed = 0.0;
        for (c, &aic) in row.iter().enumerate() {
            let v = (energy - revealed).max(0.0);
            integral[c] += tau[i] * aic * (a * table.grid[i] + s * mean + 0.5 * s * s * v).exp();
            mean += aic * xi[c];
            revealed += aic * aic;
        }
    }
    let stoch: f64 = integral.iter().zip(&xi).map(|(g, x)| s * g * x).sum();
    Ok(f - m0 - stoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClarkOconeSummary {
    pub grid_n: usize,
    pub n_paths: usize,
    pub mean: f64,
    pub se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub mean_within_3se: bool,
}

pub fn clark_ocone_batch(
    table: &KernelTable,
    params: &ModelParams,
    seed: u64,
    n_paths: usize,
    exec: Exec,
) -> Result<ClarkOconeSummary> {
    params.check_table(table)?;
    let res = exec.map(n_paths, |p| {
        let path = outer_path(table, seed, p as u64);
        clark_ocone_residual(table, params, &path).expect("outer paths carry their noise")
    });
    let acc = MeanAccumulator::from_slice(&res);
    let (variance, variance_se) = variance_with_se(&res);
    let (mean, se) = (acc.mean(), acc.std_error());
    Ok(ClarkOconeSummary {
        grid_n: table.n,
        n_paths,
        mean,
        se,
        variance,
        variance_se,
        mean_within_3se: mean.abs() <= 3.0 * se,
    })
}

pub const BOUND_FD_GRADIENT: &str = "fd-chain-rule";
pub const BOUND_FD_HESSIAN: &str = "fd-chain-rule-d2";

/// Compares the chain-rule gradient and Hessian of X in the increments
/// against central differences on paths 0..n_paths of `seed`.
///
/// Gradient entries must agree to 1e−3 relative, Hessian entries (on a
/// fixed set of index pairs, with a larger step) to 1e−2. Entries below
/// 1e−8 of the largest gradient entry carry no relative information and are
/// counted as inconclusive.
pub fn finite_difference_check(setup: &MalliavinSetup, seed: u64, n_paths: usize) -> Result<Vec<BoundReport>> {
    let table = setup.table;
    let n = table.n;
    let params = &setup.params;
    let eps = fd_step(table);
    let eps2 = 1e-3 * table.dt().sqrt();
    let pairs: Vec<(usize, usize)> =
        [(1, 1), (1, n / 2), (n / 4, n / 4), (n / 4, 3 * n / 4), (n / 2, n - 1)].into_iter().filter(|&(j, l)| j >= 1 && l >= 1).collect();
    let mut grad_tally = BoundTally::new(BOUND_FD_GRADIENT, "|fd - chain rule| / |chain rule| <= 1e-3 for dX/dB_j")
        .with_rel_tolerance(0.0);
    let mut hess_tally = BoundTally::new(BOUND_FD_HESSIAN, "|fd - chain rule| / |chain rule| <= 1e-2 for d2X/dB_j dB_l")
        .with_rel_tolerance(0.0);
    for p in 0..n_paths {
        let path = outer_path(table, seed, p as u64);
        let noise = path.require_noise()?.clone();
        let grad = noise_gradient(setup, &path)?;
        let floor = 1e-8 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for j in 1..=n {
            let g = grad[j - 1];
            let fd = fd_gradient(table, params, &noise, j, eps)?;
            if g.abs() <= floor {
                grad_tally.inconclusive(j as f64, fd, g);
                continue;
            }
            grad_tally.upper(j as f64, ((fd - g) / g).abs(), 1e-3, 0.0);
        }
        for &(j, l) in &pairs {
            let h = noise_hessian(setup, &path, j, l)?;
            let fd = fd_hessian(table, params, &noise, j, l, eps2)?;
            if h.abs() <= floor * floor {
                hess_tally.inconclusive(j as f64, fd, h);
                continue;
            }
            hess_tally.upper(j as f64, ((fd - h) / h).abs(), 1e-2, 0.0);
        }
    }
    Ok(vec![grad_tally.finish(), hess_tally.finish()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_kernel_table;

    fn setup(table: &KernelTable, a: f64, sigma: f64) -> MalliavinSetup<'_> {
        let params = ModelParams::new(a, sigma, table.hurst, table.horizon).unwrap();
        MalliavinSetup::new(table, params, DEFAULT_STRIDE).unwrap()
    }

    #[test]
    fn subgrid_weights_sum_to_energy() {
        for (h, t) in [(0.7, 1.0), (0.6, 2.0), (0.9, 1.0)] {
            let table = build_kernel_table(h, t, 64).unwrap();
            let sg = Subgrid::new(&table, 4).unwrap();
            assert_eq!(sg.nodes.len(), 17);
            let target = f64::powf(t, 2.0 * h);
            assert!(((sg.weight_sum() - target) / target).abs() < 1e-9, "{h}: {}", sg.weight_sum());
            assert!(sg.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn flat_path_derivative() {
        let table = build_kernel_table(0.7, 1.0, 64).unwrap();
        let s = setup(&table, 0.0, 1.0);
        let zero = FbmPath::zero(&table);
        let d = dx(&s, &zero).unwrap();
        assert_eq!(d[0], None);
        assert_eq!(d[64], Some(0.0));
        // trapezoid version of σ∫_θ^T K(s,θ)ds / T
        let kernel = table.kernel();
        // the trapezoid sum loses accuracy as θ → T, where only a few
        // cells resolve the (s−θ)^α rise of the kernel
        for (k, tol) in [(8, 1e-2), (32, 1e-2), (56, 5e-2)] {
            let exact = kernel.time_integral(table.grid[k], 1.0);
            let got = d[k].unwrap();
            assert!(((got - exact) / exact).abs() < tol, "{k}: {got} vs {exact}");
        }
    }

    #[test]
    fn second_derivative_vanishes_without_noise() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let s = setup(&table, 0.3, 0.0);
        let path = outer_path(&table, 1, 0);
        assert!(d2x(&s, &path).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let table = build_kernel_table(0.7, 1.0, 64).unwrap();
        let s = setup(&table, 0.2, 1.0);
        let path = outer_path(&table, 17, 4);
        let noise = path.noise.clone().unwrap();
        let grad = noise_gradient(&s, &path).unwrap();
        let eps = fd_step(&table);
        for j in [1, 2, 7, 33, 64] {
            let fd = fd_gradient(&table, &s.params, &noise, j, eps).unwrap();
            let rel = ((fd - grad[j - 1]) / grad[j - 1]).abs();
            assert!(rel < 1e-3, "j={j}: {fd} vs {}", grad[j - 1]);
        }
        for (j, l) in [(3, 10), (20, 20), (1, 40)] {
            let h = noise_hessian(&s, &path, j, l).unwrap();
            let fd = fd_hessian(&table, &s.params, &noise, j, l, 1e-3 * table.dt().sqrt()).unwrap();
            assert!(((fd - h) / h).abs() < 1e-2, "({j},{l}): {fd} vs {h}");
        }
    }

    #[test]
    fn d2_is_nonnegative_and_bounded() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let s = setup(&table, -0.5, 1.5);
        for idx in 0..5 {
            let path = outer_path(&table, 3, idx);
            let st = PathState::new(&s, &path).unwrap();
            let d2 = normalized_d2x(&table, &st.p, &st.u);
            let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let max = d2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(min >= -2e-12 && max <= 2.0, "{min} {max}");
            assert!(st.u.iter().all(|&u| (0.0..=1.0).contains(&u)));
        }
    }

    #[test]
    fn conditional_estimate_endpoints() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let s = setup(&table, 0.0, 1.0);
        let path = outer_path(&table, 5, 0);
        assert_eq!(conditional_dx(&s, &path, 32, 50, 1).unwrap(), (0.0, 0.0));
        assert!(conditional_dx(&s, &path, 8, 10, 1).is_err());
        let st = PathState::new(&s, &path).unwrap();
        // at the last interior node the only unknown is one column
        let e = inner_estimate(&s, &st, 16, 200, inner_key(1, 0, 16), &[0, 4, 16]);
        assert!(e.mean > 0.0 && e.mean <= 1.0);
        assert_eq!(e.d2_mean.len(), 3);
        assert!(e.d2_mean.iter().all(|&v| v > -1e-3));
    }

    #[test]
    fn phi_scales_quadratically_for_small_sigma() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let s1 = setup(&table, 0.0, 0.02);
        let s2 = setup(&table, 0.0, 0.01);
        let path = outer_path(&table, 9, 2);
        let p1 = phi_x(&s1, &path, 50, 4).unwrap();
        let p2 = phi_x(&s2, &path, 50, 4).unwrap();
        assert!((p1.phi / p2.phi - 4.0).abs() < 0.02, "{}", p1.phi / p2.phi);
    }

    #[test]
    fn clark_ocone_vanishes_without_noise() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let params = ModelParams::new(0.4, 0.0, 0.7, 1.0).unwrap();
        let path = outer_path(&table, 1, 0);
        assert!(clark_ocone_residual(&table, &params, &path).unwrap().abs() < 1e-14);
    }

    #[test]
    fn small_nested_batch_has_no_violations() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let s = setup(&table, 0.1, 1.0);
        let opts = NestedOptions { inner_paths: 50, with_dphi: true, keep_profiles: 1, ..Default::default() };
        let batch = run_nested(&s, 7, 20, &opts).unwrap();
        assert_eq!(batch.summaries.len(), 20);
        assert_eq!(batch.profiles.len(), 1);
        for r in &batch.reports {
            assert!(r.passed, "{}", r.summary_line());
        }
        let again = run_nested(&s, 7, 20, &NestedOptions { exec: Exec::Sequential, ..opts }).unwrap();
        assert_eq!(again.summaries, batch.summaries);
    }

    #[test]
    fn budget_gives_partial_coverage() {
        let table = build_kernel_table(0.7, 1.0, 16).unwrap();
        let s = setup(&table, 0.0, 1.0);
        let opts = NestedOptions { inner_paths: 50, budget: Some(Duration::ZERO), ..Default::default() };
        let batch = run_nested(&s, 1, 200, &opts).unwrap();
        assert!(batch.coverage < 1.0);
        assert!(!batch.complete());
    }

    #[test]
    fn finite_difference_check_passes() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        let s = setup(&table, 0.1, 1.0);
        let reports = finite_difference_check(&s, 9, 3).unwrap();
        for r in &reports {
            assert!(r.passed && r.points_checked > 0, "{}", r.summary_line());
        }
    }
}
