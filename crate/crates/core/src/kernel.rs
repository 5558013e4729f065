//! Volterra kernel of fractional Brownian motion for H > 1/2.
//!
//! K(t,s) = c_H s^{1/2-H} ∫_s^t (u-s)^{H-3/2} u^{H-1/2} du, 0 < s ≤ t.
//!
//! The inner integral has an integrable singularity at u = s. It is removed
//! exactly by the change of variables w = (u-s)^{H-1/2}, after which the
//! integrand (s + w^{1/(H-1/2)})^{H-1/2} is smooth and Gauss–Legendre panels
//! converge quickly.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::quad::{GaussLegendre, GradedRule};

pub const TABLE_FORMAT_VERSION: u32 = 1;

/// Largest grid the table builder accepts.
pub const MAX_GRID: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstParams {
    hurst: f64,
    horizon: f64,
}

impl HurstParams {
    pub fn new(hurst: f64, horizon: f64) -> Result<Self> {
        validate_hurst(hurst)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParam(format!("horizon T must be positive, got {horizon}")));
        }
        Ok(Self { hurst, horizon })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

pub(crate) fn validate_hurst(hurst: f64) -> Result<()> {
    if hurst > 0.5 && hurst < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("Hurst index must lie in (1/2, 1), got {hurst}")))
    }
}

/// R_H(t,s) = ½(t^{2H} + s^{2H} − |t−s|^{2H}).
pub fn covariance(hurst: f64, t: f64, s: f64) -> f64 {
    let two_h = 2.0 * hurst;
    0.5 * (t.powf(two_h) + s.powf(two_h) - (t - s).abs().powf(two_h))
}

/// c_H = [H(2H−1) / B(2−2H, H−1/2)]^{1/2}.
pub fn ch_closed_form(hurst: f64) -> f64 {
    let a = 2.0 - 2.0 * hurst;
    let b = hurst - 0.5;
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    (hurst * (2.0 * hurst - 1.0) * (-ln_beta).exp()).sqrt()
}

/// Kernel evaluator for a fixed H and normalizing constant.
#[derive(Debug, Clone)]
pub struct Kernel {
    hurst: f64,
    alpha: f64,
    c_h: f64,
    inner: GaussLegendre,
}

const INNER_ORDER: usize = 20;
/// Panel growth factor for the inner integral beyond w = s^α.
const PANEL_RATIO: f64 = 4.0;

impl Kernel {
    pub fn new(hurst: f64, c_h: f64) -> Result<Self> {
        validate_hurst(hurst)?;
        if !(c_h > 0.0 && c_h.is_finite()) {
            return Err(Error::InvalidParam(format!("c_H must be positive, got {c_h}")));
        }
        Ok(Self { hurst, alpha: hurst - 0.5, c_h, inner: GaussLegendre::new(INNER_ORDER) })
    }

    /// Kernel with c_H calibrated to unit variance at t = 1.
    pub fn calibrated(hurst: f64) -> Result<Self> {
        let c_h = calibrate_ch(hurst, DEFAULT_CALIBRATION_POINTS)?;
        Self::new(hurst, c_h)
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn c_h(&self) -> f64 {
        self.c_h
    }

    /// H − 1/2.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("kernel needs s > 0, got s = {s}")));
        }
        if s > t {
            return Err(Error::Domain(format!("kernel needs s <= t, got s = {s}, t = {t}")));
        }
        Ok(self.eval_unchecked(t, s))
    }

    pub(crate) fn eval_unchecked(&self, t: f64, s: f64) -> f64 {
        if s >= t {
            return 0.0;
        }
        self.c_h * s.powf(-self.alpha) * self.substituted_integral(s, t, |_| 1.0) / self.alpha
    }

    /// ∫_s^t (u−s)^{α−1} u^α φ(u) du · α, evaluated as
    /// ∫_0^{(t−s)^α} (s + w^{1/α})^α φ(s + w^{1/α}) dw.
    fn substituted_integral<P: Fn(f64) -> f64>(&self, s: f64, t: f64, phi: P) -> f64 {
        let a = self.alpha;
        let inv_a = 1.0 / a;
        let upper = (t - s).powf(a);
        let f = |w: f64| {
            let x = w.powf(inv_a);
            (s + x).powf(a) * phi(s + x)
        };
        let knee = s.powf(a);
        if upper <= knee {
            return self.inner.integrate(0.0, upper, f);
        }
        let mut total = self.inner.integrate(0.0, knee, f);
        // beyond w_flat the s-term is below double precision
        let w_flat = (s * 1e17).powf(a);
        let mut lo = knee;
        while lo < upper && lo < w_flat {
            let hi = (lo * PANEL_RATIO).min(upper).min(w_flat);
            total += self.inner.integrate(lo, hi, f);
            lo = hi;
        }
        if lo < upper {
            total += self.inner.integrate(lo, upper, |w| w * phi(w.powf(inv_a)));
        }
        total
    }

    /// ∫_θ^T K(s,θ) ds = c_H θ^{−α} ∫_θ^T (T−u)(u−θ)^{α−1} u^α du.
    pub fn time_integral(&self, theta: f64, horizon: f64) -> f64 {
        if theta >= horizon {
            return 0.0;
        }
        self.c_h * theta.powf(-self.alpha) * self.substituted_integral(theta, horizon, |u| horizon - u)
            / self.alpha
    }

    /// ∫_0^t K(t,s)² ds, which equals t^{2H} for a correctly normalized kernel.
    pub fn energy(&self, t: f64, rule: &GradedRule) -> f64 {
        let a = self.alpha;
        rule.integrate(0.0, t, -2.0 * a, 2.0 * a, |s| {
            let k = self.eval_unchecked(t, s);
            k * k
        })
    }

    /// ∫_0^{s∧t} K(t,θ) K(s,θ) dθ, which reproduces R_H(t,s).
    pub fn cross_energy(&self, t: f64, s: f64, rule: &GradedRule) -> f64 {
        let m = t.min(s);
        let beta_end = if (t - s).abs() < f64::EPSILON * t.max(s) { 2.0 * self.alpha } else { self.alpha };
        rule.integrate(0.0, m, -2.0 * self.alpha, beta_end, |x| {
            self.eval_unchecked(t, x) * self.eval_unchecked(s, x)
        })
    }

    /// ∫_0^T (∫_θ^T K(s,θ) ds)² dθ; equals T^{2H+2}/(2H+2).
    pub fn squared_time_integral(&self, horizon: f64, rule: &GradedRule) -> f64 {
        let a = self.alpha;
        rule.integrate(0.0, horizon, -2.0 * a, 2.0 * a + 2.0, |th| {
            let g = self.time_integral(th, horizon);
            g * g
        })
    }

    /// ∫_a^b K(t,r) dr for 0 ≤ a < b ≤ t.
    fn cell_integral(&self, t: f64, a: f64, b: f64, interior: &GaussLegendre, rule: &GradedRule) -> f64 {
        let at_origin = a <= 0.0;
        let at_diag = b >= t;
        let alpha = self.alpha;
        let k = |r: f64| self.eval_unchecked(t, r);
        match (at_origin, at_diag) {
            (false, false) => interior.integrate(a, b, k),
            (true, false) => rule.integrate(0.0, b, -alpha, 0.0, k),
            (false, true) => rule.integrate(a, b, 0.0, alpha, k),
            (true, true) => rule.integrate(0.0, b, -alpha, alpha, k),
        }
    }

    /// ∫_0^h K(t,r) r^{−α} dr, the projection on the singular shape of the
    /// first cell.
    fn first_cell_singular_moment(&self, t: f64, h: f64, rule: &GradedRule) -> f64 {
        let alpha = self.alpha;
        let beta_end = if h >= t { alpha } else { 0.0 };
        rule.integrate(0.0, h, -2.0 * alpha, beta_end, |r| self.eval_unchecked(t, r) * r.powf(-alpha))
    }
}

pub const DEFAULT_CALIBRATION_POINTS: usize = 64;

/// Calibrates c_H so that ∫_0^1 K(1,s)² ds = 1.
///
/// The integral is computed with `quad_points` nodes per graded panel and
/// again with twice as many; disagreement beyond 1e−10 is reported as a
/// calibration failure.
pub fn calibrate_ch(hurst: f64, quad_points: usize) -> Result<f64> {
    validate_hurst(hurst)?;
    if quad_points < 64 {
        return Err(Error::InvalidParam(format!("calibration needs quad_points >= 64, got {quad_points}")));
    }
    let unit = Kernel::new(hurst, 1.0)?;
    let order = (quad_points / 4).max(16);
    let coarse = unit.energy(1.0, &GradedRule::new(order, 40));
    let fine = unit.energy(1.0, &GradedRule::new(2 * order, 48));
    let residual = ((coarse - fine) / fine).abs();
    if !fine.is_finite() || fine <= 0.0 || residual > 1e-10 {
        return Err(Error::Calibration { hurst, residual });
    }
    Ok(fine.sqrt().recip())
}

/// K(t,s) for a given H and c_H.
pub fn kernel_eval(hurst: f64, c_h: f64, t: f64, s: f64) -> Result<f64> {
    Kernel::new(hurst, c_h)?.eval(t, s)
}

/// Build-time accuracy record stored with every table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableDiagnostics {
    /// max_i |Σ_c A_ic² − t_i^{2H}| / T^{2H}
    pub max_energy_deviation: f64,
    /// max_i |Σ_c A_ic² − t_i^{2H}| / t_i^{2H}; dominated by the first rows,
    /// where the diagonal cusp and the origin singularity share one cell.
    pub max_rel_energy_deviation: f64,
    /// The tolerance the table is checked against.
    pub energy_tolerance: f64,
    pub interior_order: usize,
    pub graded_order: usize,
    pub graded_levels: usize,
}

/// Discretized kernel on a uniform grid.
///
/// The driving noise of the discrete Volterra map has `n + 1` standard
/// normal columns: column 0 is ΔB_1/√Δt, column 1 is the first cell's
/// singular mode (the Wiener integral of the normalized component of r^{−α}
/// orthogonal to constants on [0, Δt]), and column c ≥ 2 is ΔB_c/√Δt.
/// Row i of the loading matrix uses columns 0..=i.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelTable {
    pub format_version: u32,
    pub hurst: f64,
    pub horizon: f64,
    pub n: usize,
    pub c_h: f64,
    pub grid: Vec<f64>,
    /// K(t_i, t_j) for 1 ≤ j ≤ i, packed by row.
    values: Vec<f64>,
    /// w_ij = ∫_{t_{j−1}}^{t_j} K(t_i, r) dr for 1 ≤ j ≤ i, packed by row.
    row_weights: Vec<f64>,
    /// Loading of the singular first-cell mode, per row.
    singular_loadings: Vec<f64>,
    pub diagnostics: TableDiagnostics,
    #[serde(skip)]
    derived: Derived,
}

#[derive(Debug, Clone, Default)]
struct Derived {
    /// Loading rows, row i has i+1 entries (row 0 empty).
    loadings: Vec<f64>,
    /// K(t_i, t_k)/K(T, t_k) for k ≤ i, packed; column 0 is the θ→0 limit
    /// (t_i/T)^{2α} and column n is identically zero.
    ratios: Vec<f64>,
    /// Σ_c A_ic² per row.
    energies: Vec<f64>,
    /// Σ_{c ≥ known(k)} A_ic² for k ≤ i, packed like `ratios`.
    conditional_variances: Vec<f64>,
}

fn tri_offset(i: usize) -> usize {
    // rows 1..i-1 hold 1..i-1 entries
    i * (i - 1) / 2
}

fn loading_offset(i: usize) -> usize {
    if i == 0 {
        0
    } else {
        (i - 1) * (i + 2) / 2
    }
}

fn ratio_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

pub const DEFAULT_ENERGY_TOLERANCE: f64 = 5e-3;

#[derive(Debug, Clone, Copy)]
pub struct TableOptions {
    pub interior_order: usize,
    pub graded_order: usize,
    pub graded_levels: usize,
    pub energy_tolerance: f64,
    pub exec: Exec,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            interior_order: 8,
            graded_order: 12,
            graded_levels: 14,
            energy_tolerance: DEFAULT_ENERGY_TOLERANCE,
            exec: Exec::default(),
        }
    }
}

/// Builds the table with a calibrated c_H and default quadrature settings.
pub fn build_kernel_table(hurst: f64, horizon: f64, n: usize) -> Result<KernelTable> {
    let params = HurstParams::new(hurst, horizon)?;
    let kernel = Kernel::calibrated(params.hurst())?;
    KernelTable::build(&kernel, horizon, n, TableOptions::default())
}

impl KernelTable {
    pub fn build(kernel: &Kernel, horizon: f64, n: usize, opts: TableOptions) -> Result<Self> {
        let params = HurstParams::new(kernel.hurst(), horizon)?;
        if n < 8 {
            return Err(Error::InvalidParam(format!("grid size must be at least 8, got {n}")));
        }
        if n > MAX_GRID {
            return Err(Error::Resource(format!("grid size {n} exceeds the limit {MAX_GRID}")));
        }
        let horizon = params.horizon();
        let dt = horizon / n as f64;
        let grid: Vec<f64> = (0..=n).map(|i| if i == n { horizon } else { i as f64 * dt }).collect();
        let interior = GaussLegendre::new(opts.interior_order);
        let rule = GradedRule::new(opts.graded_order, opts.graded_levels);

        struct Row {
            values: Vec<f64>,
            weights: Vec<f64>,
            singular_moment: f64,
        }
        let rows: Vec<Row> = opts.exec.map(n + 1, |i| {
            if i == 0 {
                return Row { values: vec![], weights: vec![], singular_moment: 0.0 };
            }
            let t = grid[i];
            let values = (1..=i).map(|j| kernel.eval_unchecked(t, grid[j])).collect();
            let weights =
                (1..=i).map(|j| kernel.cell_integral(t, grid[j - 1], grid[j], &interior, &rule)).collect();
            let singular_moment = kernel.first_cell_singular_moment(t, grid[1], &rule);
            Row { values, weights, singular_moment }
        });

        let alpha = kernel.alpha();
        // r^{-α} minus its mean over the first cell, and its L² norm
        let shape_mean = dt.powf(-alpha) / (1.0 - alpha);
        let shape_norm =
            (dt.powf(1.0 - 2.0 * alpha) * (1.0 / (1.0 - 2.0 * alpha) - 1.0 / ((1.0 - alpha) * (1.0 - alpha)))).sqrt();

        let mut values = Vec::with_capacity(tri_offset(n + 1));
        let mut row_weights = Vec::with_capacity(tri_offset(n + 1));
        let mut singular_loadings = vec![0.0; n + 1];
        for (i, row) in rows.into_iter().enumerate() {
            values.extend(row.values);
            if i > 0 {
                singular_loadings[i] = (row.singular_moment - shape_mean * row.weights[0]) / shape_norm;
            }
            row_weights.extend(row.weights);
        }

        let mut table = Self {
            format_version: TABLE_FORMAT_VERSION,
            hurst: kernel.hurst(),
            horizon,
            n,
            c_h: kernel.c_h(),
            grid,
            values,
            row_weights,
            singular_loadings,
            diagnostics: TableDiagnostics {
                max_energy_deviation: 0.0,
                max_rel_energy_deviation: 0.0,
                energy_tolerance: opts.energy_tolerance,
                interior_order: opts.interior_order,
                graded_order: opts.graded_order,
                graded_levels: opts.graded_levels,
            },
            derived: Derived::default(),
        };
        table.finish();
        table.diagnostics.max_energy_deviation = table.max_energy_deviation();
        table.diagnostics.max_rel_energy_deviation = table.max_rel_energy_deviation();
        Ok(table)
    }

    fn finish(&mut self) {
        let n = self.n;
        let dt_sqrt = self.dt().sqrt();
        let mut loadings = Vec::with_capacity(loading_offset(n + 1));
        let mut energies = vec![0.0; n + 1];
        for i in 1..=n {
            let w = &self.row_weights[tri_offset(i)..tri_offset(i) + i];
            let start = loadings.len();
            loadings.push(w[0] / dt_sqrt);
            loadings.push(self.singular_loadings[i]);
            loadings.extend(w[1..].iter().map(|x| x / dt_sqrt));
            energies[i] = loadings[start..].iter().map(|a| a * a).sum();
        }
        let two_alpha = 2.0 * (self.hurst - 0.5);
        let horizon = self.horizon;
        let mut ratios = Vec::with_capacity(ratio_offset(n + 1));
        for i in 0..=n {
            for k in 0..=i {
                let r = if k == 0 {
                    (self.grid[i] / horizon).powf(two_alpha)
                } else if k == n {
                    0.0
                } else {
                    self.value(i, k) / self.value(n, k)
                };
                ratios.push(r);
            }
        }
        let mut conditional_variances = Vec::with_capacity(ratio_offset(n + 1));
        for i in 0..=n {
            let row = if i == 0 { &[][..] } else { &loadings[loading_offset(i)..loading_offset(i) + i + 1] };
            let mut known_energy = 0.0;
            let mut used = 0;
            for k in 0..=i {
                let known = if k == 0 { 0 } else { k + 1 };
                while used < known {
                    known_energy += row[used] * row[used];
                    used += 1;
                }
                conditional_variances.push((energies[i] - known_energy).max(0.0));
            }
        }
        self.derived = Derived { loadings, ratios, energies, conditional_variances };
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n as f64
    }

    pub fn alpha(&self) -> f64 {
        self.hurst - 0.5
    }

    /// Noise columns: n + 1.
    pub fn columns(&self) -> usize {
        self.n + 1
    }

    /// Number of noise columns revealed by time t_k.
    pub fn known_columns(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            k + 1
        }
    }

    /// Grid cell (1-based) a noise column belongs to.
    pub fn column_cell(&self, c: usize) -> usize {
        if c <= 1 {
            1
        } else {
            c
        }
    }

    /// K(t_i, t_j) for 1 ≤ j ≤ i.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        assert!(j >= 1 && j <= i, "kernel value index out of range");
        self.values[tri_offset(i) + j - 1]
    }

    /// ∫ over cell j of K(t_i, ·), for 1 ≤ j ≤ i.
    pub fn row_weight(&self, i: usize, j: usize) -> f64 {
        assert!(j >= 1 && j <= i, "row weight index out of range");
        self.row_weights[tri_offset(i) + j - 1]
    }

    pub fn singular_loading(&self, i: usize) -> f64 {
        self.singular_loadings[i]
    }

    /// Loadings of B^H_{t_i} on the noise columns 0..=i.
    pub fn loadings(&self, i: usize) -> &[f64] {
        if i == 0 {
            return &[];
        }
        &self.derived.loadings[loading_offset(i)..loading_offset(i) + i + 1]
    }

    /// K(t_i, t_k) / K(T, t_k) for k ≤ i.
    pub fn ratio(&self, i: usize, k: usize) -> f64 {
        debug_assert!(k <= i);
        self.derived.ratios[ratio_offset(i) + k]
    }

    /// Σ_c A_ic², the variance of the discrete B^H_{t_i}.
    pub fn discrete_energy(&self, i: usize) -> f64 {
        self.derived.energies[i]
    }

    /// v(t_i, t_k): variance of B^H_{t_i} given the noise revealed by t_k.
    /// Zero for k ≥ i.
    pub fn conditional_variance(&self, i: usize, k: usize) -> f64 {
        if k >= i {
            return 0.0;
        }
        self.derived.conditional_variances[ratio_offset(i) + k]
    }

    pub fn max_energy_deviation(&self) -> f64 {
        let two_h = 2.0 * self.hurst;
        let scale = self.horizon.powf(two_h);
        (1..=self.n)
            .map(|i| (self.discrete_energy(i) - self.grid[i].powf(two_h)).abs() / scale)
            .fold(0.0, f64::max)
    }

    pub fn energy_within_tolerance(&self) -> bool {
        self.diagnostics.max_energy_deviation < self.diagnostics.energy_tolerance
    }

    pub fn max_rel_energy_deviation(&self) -> f64 {
        let two_h = 2.0 * self.hurst;
        (1..=self.n)
            .map(|i| {
                let target = self.grid[i].powf(two_h);
                ((self.discrete_energy(i) - target) / target).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Σ_c A_ic A_kc, the discrete covariance of B^H_{t_i} and B^H_{t_k}.
    pub fn discrete_covariance(&self, i: usize, k: usize) -> f64 {
        let (a, b) = (self.loadings(i), self.loadings(k));
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Evaluator with this table's H and c_H.
    pub fn kernel(&self) -> Kernel {
        Kernel::new(self.hurst, self.c_h).expect("table parameters were validated on build")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut table: Self = serde_json::from_str(s)?;
        if table.format_version != TABLE_FORMAT_VERSION {
            return Err(Error::InvalidParam(format!(
                "kernel table format {} is not supported (expected {TABLE_FORMAT_VERSION})",
                table.format_version
            )));
        }
        let n = table.n;
        if table.grid.len() != n + 1 {
            return Err(Error::Dimension { expected: n + 1, got: table.grid.len() });
        }
        if table.values.len() != tri_offset(n + 1) || table.row_weights.len() != tri_offset(n + 1) {
            return Err(Error::Dimension { expected: tri_offset(n + 1), got: table.values.len() });
        }
        if table.singular_loadings.len() != n + 1 {
            return Err(Error::Dimension { expected: n + 1, got: table.singular_loadings.len() });
        }
        validate_hurst(table.hurst)?;
        table.finish();
        Ok(table)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Grid index of a time, if it is a node.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt()).round();
        if k < 0.0 || k > self.n as f64 {
            return None;
        }
        let k = k as usize;
        ((self.grid[k] - t).abs() <= 1e-12 * self.horizon.max(1.0)).then_some(k)
    }
}

/// ∫_θ^T K(s,θ) ds for θ on the table's grid.
pub fn kernel_time_integral(table: &KernelTable, theta: f64) -> Result<f64> {
    let k = table
        .node_index(theta)
        .ok_or_else(|| Error::Domain(format!("θ = {theta} is not a grid node; interpolation is not supported")))?;
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(table.kernel().time_integral(table.grid[k], table.horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule() -> GradedRule {
        GradedRule::new(16, 40)
    }

    #[test]
    fn rejects_hurst_outside_open_interval() {
        assert!(HurstParams::new(0.5, 1.0).is_err());
        assert!(HurstParams::new(1.0, 1.0).is_err());
        assert!(HurstParams::new(0.7, 0.0).is_err());
        assert!(HurstParams::new(0.7, 1.0).is_ok());
        assert!(calibrate_ch(0.7, 32).is_err());
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance(0.7, 1.0, 1.0), 1.0);
        for h in [0.55, 0.7, 0.9] {
            assert!((covariance(h, 1.0, 0.5) - 0.5).abs() < 1e-15);
            assert_eq!(covariance(h, 0.8, 0.0), 0.0);
            assert_eq!(covariance(h, 0.3, 0.8), covariance(h, 0.8, 0.3));
        }
        assert!((covariance(0.75, 2.0, 1.0) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn calibrated_ch_matches_closed_form() {
        // mpmath, 30 digits
        let reference = [(0.55, 0.052216623880502220), (0.7, 0.21836182617678252), (0.75, 0.26741115875799758), (0.9, 0.32448825925734101)];
        for (h, c) in reference {
            let cal = calibrate_ch(h, 64).unwrap();
            assert!(((cal - c) / c).abs() < 1e-8, "H={h}: {cal} vs {c}");
            assert!(((ch_closed_form(h) - c) / c).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_near_half() {
        let c = calibrate_ch(0.51, 64).unwrap();
        let k = Kernel::new(0.51, c).unwrap();
        assert!((k.energy(1.0, &rule()) - 1.0).abs() < 1e-6);
        assert!(((c - 0.010097831413063245) / c).abs() < 1e-6);
    }

    #[test]
    fn calibration_is_deterministic() {
        assert_eq!(calibrate_ch(0.7, 64).unwrap().to_bits(), calibrate_ch(0.7, 64).unwrap().to_bits());
    }

    #[test]
    fn kernel_point_values() {
        let c = ch_closed_form(0.7);
        // QUADPACK QAWS (algebraic endpoint weight) on the defining integral
        let v = kernel_eval(0.7, c, 1.0, 0.5).unwrap();
        assert!(((v - 0.9771404973936167) / v).abs() < 1e-8, "{v}");
        assert_eq!(kernel_eval(0.7, c, 0.4, 0.4).unwrap(), 0.0);
        let a = kernel_eval(0.7, c, 1.0, 0.3).unwrap();
        let b = kernel_eval(0.7, c, 1.5, 0.3).unwrap();
        assert!(a <= b);
        assert!(((a - 1.0736357155302254) / a).abs() < 1e-8);
        assert!(((b - 1.2269671408161178) / b).abs() < 1e-8);
    }

    #[test]
    fn kernel_domain_errors() {
        let c = ch_closed_form(0.7);
        assert!(matches!(kernel_eval(0.7, c, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(kernel_eval(0.7, c, 1.0, -0.1), Err(Error::Domain(_))));
        assert!(matches!(kernel_eval(0.7, c, 1.0, 1.1), Err(Error::Domain(_))));
    }

    #[test]
    fn energy_identity_continuous() {
        for h in [0.55, 0.7, 0.9] {
            let k = Kernel::new(h, ch_closed_form(h)).unwrap();
            for t in [0.5f64, 1.0, 2.0] {
                let target = t.powf(2.0 * h);
                let e = k.energy(t, &rule());
                assert!(((e - target) / target).abs() < 1e-8, "H={h} t={t}: {e} vs {target}");
            }
        }
    }

    #[test]
    fn time_integral_vanishes_at_horizon() {
        let table = build_kernel_table(0.7, 1.0, 16).unwrap();
        assert_eq!(kernel_time_integral(&table, 1.0).unwrap(), 0.0);
        assert!(kernel_time_integral(&table, 0.5).unwrap() > 0.0);
        assert!(matches!(kernel_time_integral(&table, 0.51), Err(Error::Domain(_))));
    }

    #[test]
    fn table_diagonal_is_zero_and_weights_nonnegative() {
        let table = build_kernel_table(0.7, 1.0, 32).unwrap();
        for i in 1..=32 {
            assert_eq!(table.value(i, i), 0.0);
            for j in 1..=i {
                assert!(table.row_weight(i, j) >= 0.0);
                assert!(table.value(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn discrete_energy_and_covariance_reproduction() {
        let table = build_kernel_table(0.7, 1.0, 256).unwrap();
        assert!(table.max_energy_deviation() < 5e-3);
        assert!(table.energy_within_tolerance());
        let cov = table.discrete_covariance(256, 128);
        assert!((cov - covariance(0.7, 1.0, 0.5)).abs() < 5e-3, "{cov}");
    }

    #[test]
    fn continuous_cross_energy_reproduces_covariance() {
        let k = Kernel::new(0.7, ch_closed_form(0.7)).unwrap();
        for (t, s) in [(1.0, 0.5), (0.8, 0.3), (2.0, 1.5)] {
            let v = k.cross_energy(t, s, &rule());
            assert!((v - covariance(0.7, t, s)).abs() < 1e-7, "({t},{s}): {v}");
        }
    }

    #[test]
    fn table_rejects_small_and_huge_grids() {
        assert!(matches!(build_kernel_table(0.7, 1.0, 4), Err(Error::InvalidParam(_))));
        assert!(matches!(build_kernel_table(0.7, 1.0, MAX_GRID + 1), Err(Error::Resource(_))));
    }

    #[test]
    fn table_json_roundtrip_restores_derived_data() {
        let table = build_kernel_table(0.6, 2.0, 16).unwrap();
        let back = KernelTable::from_json(&table.to_json().unwrap()).unwrap();
        for i in 0..=16 {
            assert_eq!(table.loadings(i), back.loadings(i));
            assert_eq!(table.discrete_energy(i), back.discrete_energy(i));
        }
        assert_eq!(back.diagnostics, table.diagnostics);
    }
}
