//! Gauss–Legendre rules and endpoint-graded composite quadrature.

use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// `order`-point rule on [-1, 1] (Newton iteration on P_n).
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite rule for integrands with algebraic behaviour `|x - end|^beta`
/// at one or both ends of the interval.
///
/// Each half of the interval is split into panels shrinking geometrically
/// (ratio 2) toward its endpoint; the innermost panel is mapped by
/// `x = end + h v^{1/(1+beta)}`, which turns the leading power into a
/// constant, so the result stays accurate even when `beta` is close to -1.
#[derive(Debug, Clone)]
pub struct GradedRule {
    gl: GaussLegendre,
    levels: usize,
}

impl GradedRule {
    pub fn new(order: usize, levels: usize) -> Self {
        Self { gl: GaussLegendre::new(order), levels }
    }

    pub fn order(&self) -> usize {
        self.gl.order()
    }

    /// Integrate over `[a, b]` with an algebraic endpoint at `a` only.
    pub fn integrate_left<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, beta: f64, mut f: F) -> f64 {
        debug_assert!(beta > -1.0);
        let len = b - a;
        if len <= 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut hi = len;
        for _ in 0..self.levels {
            let lo = 0.5 * hi;
            total += self.gl.integrate(lo, hi, |d| f(a + d));
            hi = lo;
        }
        let p = 1.0 / (1.0 + beta);
        let h = hi;
        total += self.gl.integrate(0.0, 1.0, |v| {
            let vp = v.powf(p);
            f(a + h * vp) * h * p * vp / v
        });
        total
    }

    /// Integrate over `[a, b]` with algebraic endpoints at both ends.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, beta_a: f64, beta_b: f64, mut f: F) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mid = 0.5 * (a + b);
        let left = self.integrate_left(a, mid, beta_a, &mut f);
        // mirror so the right endpoint becomes the graded one
        let right = self.integrate_left(0.0, b - mid, beta_b, |d| f(b - d));
        left + right
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        let gl = GaussLegendre::new(6);
        // degree 11 is the limit for 6 points
        let v = gl.integrate(0.0, 2.0, |x| x.powi(11));
        assert!((v - 2f64.powi(12) / 12.0).abs() < 1e-10);
        let w: f64 = gl.weights().iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn high_order_rule_is_stable() {
        let gl = GaussLegendre::new(64);
        let v = gl.integrate(0.0, PI, f64::sin);
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn graded_rule_handles_strong_endpoint_singularity() {
        let rule = GradedRule::new(16, 20);
        // x^{-0.9} on [0,1] integrates to 10
        let v = rule.integrate_left(0.0, 1.0, -0.9, |x| x.powf(-0.9));
        assert!((v - 10.0).abs() < 1e-10, "{v}");
        // both ends: x^{-1/2}(1-x)^{-1/2} = pi
        let v = rule.integrate(0.0, 1.0, -0.5, -0.5, |x| 1.0 / (x * (1.0 - x)).sqrt());
        assert!((v - PI).abs() < 1e-10, "{v}");
    }

    #[test]
    fn graded_rule_with_perturbed_leading_power() {
        // x^{-0.8}(1 + x^{0.4}) = x^{-0.8} + x^{-0.4}: 5 + 5/3
        let rule = GradedRule::new(16, 24);
        let v = rule.integrate_left(0.0, 1.0, -0.8, |x| x.powf(-0.8) * (1.0 + x.powf(0.4)));
        assert!((v - (5.0 + 5.0 / 3.0)).abs() < 1e-9, "{v}");
    }
}
