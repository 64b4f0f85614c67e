//! Brute-force evaluation of the NIG marginal likelihood
//!
//! ```text
//! p(y) = ∫∫ N(y | μ, σ²) · N(μ | γ, σ²/δ) · InvGamma(σ² | α, β) dμ dσ²
//! ```
//!
//! on a tensor-product Simpson grid: μ on a uniform grid centred at γ, σ² on
//! a log-spaced grid (integrated in t = ln σ²). Nothing here uses the
//! closed-form Student's t result, so it can be used to check it.

use crate::error::{Error, Result};
use crate::special::ln_gamma;

use super::NigParams;

/// Grid configuration for [`nig_marginal_pdf_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    /// μ covers γ ± `mu_half_width` · √(β / (δ(α − 1))).
    pub mu_half_width: f64,
    pub mu_nodes: usize,
    /// σ² covers [β / (α · 10^k), β · 10^k / α] with k = `var_decades`.
    pub var_decades: f64,
    pub var_nodes: usize,
    /// Maximum allowed change between the base grid and the refined grid.
    pub tolerance: f64,
    /// When false only the base grid is evaluated.
    pub refine: bool,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            mu_half_width: 12.0,
            mu_nodes: 2001,
            var_decades: 3.0,
            var_nodes: 2001,
            tolerance: 1e-6,
            refine: true,
        }
    }
}

/// Numerically integrates the NIG marginal density at `y`.
///
/// Evaluates the base grid and, if `grid.refine` is set, a grid with doubled
/// node counts; reports [`Error::QuadratureNotConverged`] when the two differ
/// by more than `grid.tolerance`. Returns the refined value on success.
pub fn nig_marginal_pdf_quadrature(p: &NigParams, y: f64, grid: &QuadratureSpec) -> Result<f64> {
    if grid.mu_nodes < 3 || grid.var_nodes < 3 {
        return Err(Error::InvalidParameter("quadrature needs at least 3 nodes per axis".into()));
    }
    if !(grid.mu_half_width > 0.0 && grid.var_decades > 0.0) {
        return Err(Error::InvalidParameter("quadrature ranges must be positive".into()));
    }
    let mu_nodes = grid.mu_nodes | 1;
    let var_nodes = grid.var_nodes | 1;

    let coarse = integrate(p, y, grid, mu_nodes, var_nodes);
    if !grid.refine {
        return Ok(coarse);
    }
    let refined = integrate(p, y, grid, 2 * mu_nodes - 1, 2 * var_nodes - 1);
    if (refined - coarse).abs() > grid.tolerance || !refined.is_finite() {
        return Err(Error::QuadratureNotConverged { coarse, refined });
    }
    Ok(refined)
}

fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n - 1 {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

fn integrate(p: &NigParams, y: f64, grid: &QuadratureSpec, mu_nodes: usize, var_nodes: usize) -> f64 {
    let (gamma, delta, alpha, beta) = (p.gamma(), p.delta(), p.alpha(), p.beta());

    let half = grid.mu_half_width * p.epistemic().sqrt();
    let mu_lo = gamma - half;
    let h_mu = 2.0 * half / (mu_nodes - 1) as f64;

    let spread = grid.var_decades * std::f64::consts::LN_10;
    let t_lo = (beta / alpha).ln() - spread;
    let h_t = 2.0 * spread / (var_nodes - 1) as f64;

    // (y − μ)² + δ(μ − γ)² = (1 + δ)(μ − c)² + q0
    let c = (y + delta * gamma) / (1.0 + delta);
    let q0 = delta * (y - gamma).powi(2) / (1.0 + delta);

    let ln_const = 0.5 * delta.ln() - (2.0 * std::f64::consts::PI).ln() + alpha * beta.ln() - ln_gamma(alpha);
    let ln_range = (2.0 * half).ln().max(0.0);

    let mut total = 0.0;
    for i in 0..var_nodes {
        let t = t_lo + i as f64 * h_t;
        let s = t.exp();
        // Likelihood × prior normalisers × InvGamma kernel × Jacobian ds = s dt.
        let ln_row = ln_const - (alpha + 1.0) * t - (beta + 0.5 * q0) / s;
        if ln_row + ln_range < -760.0 {
            continue;
        }
        let k = 0.5 * (1.0 + delta) / s;
        let inner = gaussian_row_sum(mu_lo, h_mu, mu_nodes, c, k);
        total += simpson_weight(i, var_nodes) * ln_row.exp() * inner;
    }
    total * h_t / 3.0 * h_mu / 3.0
}

/// Σ_j w_j · exp(−k (μ_j − c)²) over the uniform μ grid with Simpson weights.
///
/// Walks outward from the node nearest the peak with a multiplicative
/// recurrence (two multiplies per node), re-anchored with exact exponentials
/// every `REANCHOR` nodes. A side stops once the geometric bound on its
/// remaining terms, `4 e r / (1 − r)` with `r` the current (shrinking) ratio,
/// drops below `TAIL_EPS` of the running sum.
fn gaussian_row_sum(mu_lo: f64, h: f64, n: usize, c: f64, k: f64) -> f64 {
    let mu_hi = mu_lo + (n - 1) as f64 * h;
    if !(c > mu_lo && c < mu_hi) {
        return (0..n)
            .map(|j| {
                let d = mu_lo + j as f64 * h - c;
                simpson_weight(j, n) * (-k * d * d).exp()
            })
            .sum();
    }
    let peak = (((c - mu_lo) / h).round() as usize).min(n - 1);
    let walk = RowWalk { mu_lo, h, c, k, step: (-2.0 * k * h * h).exp() };
    let mut sums = [0.0; 2];
    let right_done = walk.side(peak, n - peak, 1.0, &mut sums);
    let left_done = walk.side(peak.wrapping_sub(1), peak, -1.0, &mut sums);

    // Both endpoints are even and were accumulated with weight 2 instead of 1.
    let mut total = 4.0 * sums[1] + 2.0 * sums[0];
    if right_done {
        total -= walk.term(n - 1);
    }
    // With peak == 0 the left side is empty and node 0 came from the right.
    if left_done {
        total -= walk.term(0);
    }
    total
}

struct RowWalk {
    mu_lo: f64,
    h: f64,
    c: f64,
    k: f64,
    step: f64,
}

impl RowWalk {
    fn term(&self, j: usize) -> f64 {
        let d = self.mu_lo + j as f64 * self.h - self.c;
        (-self.k * d * d).exp()
    }

    /// Adds `count` terms starting at node `first` and moving in direction
    /// `dir` into `sums[parity]`. Returns true if every term was visited.
    fn side(&self, first: usize, count: usize, dir: f64, sums: &mut [f64; 2]) -> bool {
        let (h, k) = (self.h, self.k);
        let mut taken = 0;
        while taken < count {
            let j = if dir > 0.0 { first + taken } else { first - taken };
            let d = self.mu_lo + j as f64 * h - self.c;
            let mut e = (-k * d * d).exp();
            let mut ratio = (-k * (2.0 * d * h * dir + h * h)).exp();
            let running = 4.0 * sums[1] + 2.0 * sums[0];
            if e == 0.0 || (ratio < 1.0 && 4.0 * e * ratio < TAIL_EPS * running * (1.0 - ratio)) {
                return false;
            }
            let block = REANCHOR.min(count - taken);
            let mut acc = [0.0; 2];
            for i in 0..block {
                acc[i & 1] += e;
                e *= ratio;
                ratio *= self.step;
            }
            let parity = j & 1;
            sums[parity] += acc[0];
            sums[parity ^ 1] += acc[1];
            taken += block;
        }
        true
    }
}

const REANCHOR: usize = 32;
const TAIL_EPS: f64 = 1e-17;

#[cfg(test)]
mod tests {
    use super::*;

    fn nig(g: f64, d: f64, a: f64, b: f64) -> NigParams {
        NigParams::new(g, d, a, b).unwrap()
    }

    #[test]
    fn recurrence_row_sum_matches_direct_evaluation() {
        let (lo, h, n) = (-3.0, 0.003, 2001);
        for &(c, k) in &[(0.1, 0.5), (-2.5, 40.0), (1.234, 5e4), (2.99, 3.0), (-2.9995, 2.0), (2.9995, 0.01)] {
            let direct: f64 = (0..n)
                .map(|j| {
                    let d = lo + j as f64 * h - c;
                    simpson_weight(j, n) * (-k * d * d).exp()
                })
                .sum();
            let fast = gaussian_row_sum(lo, h, n, c, k);
            assert!((fast - direct).abs() <= 1e-13 * direct, "c={c} k={k}: {fast} vs {direct}");
        }
    }

    #[test]
    fn standard_case_matches_three_eighths() {
        let v = nig_marginal_pdf_quadrature(&nig(0.0, 1.0, 2.0, 1.0), 0.0, &QuadratureSpec::default())
            .unwrap();
        assert!((v - 0.375).abs() < 1e-5, "{v}");
    }

    #[test]
    fn second_anchor_matches_closed_form() {
        let p = nig(2.0, 2.0, 3.0, 6.0);
        let v = nig_marginal_pdf_quadrature(&p, 3.0, &QuadratureSpec::default()).unwrap();
        let closed = p.to_student_t().pdf(3.0);
        assert!((v - closed).abs() < 1e-5, "{v} vs {closed}");
    }

    #[test]
    fn symmetric_about_gamma() {
        let p = nig(0.7, 0.4, 2.5, 1.7);
        let grid = QuadratureSpec::default();
        for c in [0.3, 1.1, 2.9] {
            let a = nig_marginal_pdf_quadrature(&p, 0.7 + c, &grid).unwrap();
            let b = nig_marginal_pdf_quadrature(&p, 0.7 - c, &grid).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn coarse_grid_reports_non_convergence() {
        let grid = QuadratureSpec { mu_nodes: 5, var_nodes: 5, ..QuadratureSpec::default() };
        let err = nig_marginal_pdf_quadrature(&nig(0.0, 1.0, 2.0, 1.0), 0.5, &grid).unwrap_err();
        assert!(matches!(err, Error::QuadratureNotConverged { .. }));
    }

    #[test]
    fn rejects_degenerate_grids() {
        let grid = QuadratureSpec { mu_nodes: 1, ..QuadratureSpec::default() };
        assert!(nig_marginal_pdf_quadrature(&nig(0.0, 1.0, 2.0, 1.0), 0.0, &grid).is_err());
    }
}
