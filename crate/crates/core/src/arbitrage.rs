//! Static-arbitrage diagnostics on a grid.
//!
//! Calendar spreads require total variance `w = σ²τ` to be non-decreasing in
//! maturity. Butterfly spreads require the density function
//!
//! ```text
//! f(m) = (1 − m w'/(2w))² − (w')²/4 · (1/w + 1/4) + w''/2
//! ```
//!
//! to be non-negative on every maturity slice (`'` is ∂/∂m). Derivatives use
//! spacing-aware three-point stencils: central in the interior, first-order
//! one-sided at the edges.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surfaces::{GridSpec, IVSurface};

/// Estimates below `-VIOLATION_TOL` count as violations.
pub const VIOLATION_TOL: f64 = 1e-10;

/// A single violating node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub m_index: usize,
    pub tau_index: usize,
    /// Size of the negative excursion (positive number).
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub calendar_violations: Vec<Violation>,
    pub butterfly_violations: Vec<Violation>,
    pub l_calendar: f64,
    pub l_butterfly: f64,
    pub is_free: bool,
}

/// Per-node `∂w/∂τ` and the nodes where it is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarCheck {
    pub dw_dtau: Vec<f64>,
    pub violations: Vec<Violation>,
}

/// Per-node butterfly function `f` and the nodes where it is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyCheck {
    pub f: Vec<f64>,
    pub violations: Vec<Violation>,
}

/// Three-point derivative weights at each node of a 1-D axis.
#[derive(Debug, Clone)]
struct Stencil {
    /// Indices of the three nodes used at each position.
    base: Vec<usize>,
    first: Vec<[f64; 3]>,
    second: Vec<[f64; 3]>,
}

impl Stencil {
    fn new(x: &[f64]) -> Self {
        let n = x.len();
        let mut base = Vec::with_capacity(n);
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for i in 0..n {
            // stencil centred on c, clamped so the edges reuse their neighbour's nodes
            let c = i.clamp(1, n - 2);
            let (h0, h1) = (x[c] - x[c - 1], x[c + 1] - x[c]);
            let d2 = [
                2.0 / (h0 * (h0 + h1)),
                -2.0 / (h0 * h1),
                2.0 / (h1 * (h0 + h1)),
            ];
            let d1 = if i == 0 {
                [-1.0 / h0, 1.0 / h0, 0.0]
            } else if i == n - 1 {
                [0.0, -1.0 / h1, 1.0 / h1]
            } else {
                [
                    -h1 / (h0 * (h0 + h1)),
                    (h1 - h0) / (h0 * h1),
                    h0 / (h1 * (h0 + h1)),
                ]
            };
            base.push(c - 1);
            first.push(d1);
            second.push(d2);
        }
        Self {
            base,
            first,
            second,
        }
    }

    fn apply(weights: &[f64; 3], base: usize, f: impl Fn(usize) -> f64) -> f64 {
        weights[0] * f(base) + weights[1] * f(base + 1) + weights[2] * f(base + 2)
    }
}

/// Penalties and their gradient with respect to the implied volatilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEval {
    pub l_calendar: f64,
    pub l_butterfly: f64,
    /// ∂(l_calendar + l_butterfly)/∂σ, flattened like the surface.
    pub grad: Vec<f64>,
}

/// Precomputed finite-difference operators for one grid.
#[derive(Debug, Clone)]
pub struct ArbitrageChecker {
    grid: Arc<GridSpec>,
    m_stencil: Stencil,
    tau_stencil: Stencil,
}

impl ArbitrageChecker {
    pub fn new(grid: Arc<GridSpec>) -> Self {
        let m_stencil = Stencil::new(grid.m_values());
        let tau_stencil = Stencil::new(grid.tau_values());
        Self {
            grid,
            m_stencil,
            tau_stencil,
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    fn total_variance(&self, sigma: &[f64]) -> Vec<f64> {
        let n_m = self.grid.n_m();
        sigma
            .iter()
            .enumerate()
            .map(|(k, s)| s * s * self.grid.tau_values()[k / n_m])
            .collect()
    }

    /// `∂w/∂τ` at every node.
    pub fn dw_dtau(&self, sigma: &[f64]) -> Vec<f64> {
        let w = self.total_variance(sigma);
        let n_m = self.grid.n_m();
        (0..self.grid.len())
            .map(|k| {
                let (i, j) = (k % n_m, k / n_m);
                let st = &self.tau_stencil;
                Stencil::apply(&st.first[j], st.base[j], |jj| w[jj * n_m + i])
            })
            .collect()
    }

    /// `(f, ∂f/∂w, ∂f/∂w', w', w'')` at every node; `w` must be positive.
    fn butterfly_terms(&self, w: &[f64]) -> Vec<[f64; 5]> {
        let n_m = self.grid.n_m();
        let st = &self.m_stencil;
        (0..self.grid.len())
            .map(|k| {
                let (i, j) = (k % n_m, k / n_m);
                let row = &w[j * n_m..(j + 1) * n_m];
                let d1 = Stencil::apply(&st.first[i], st.base[i], |ii| row[ii]);
                let d2 = Stencil::apply(&st.second[i], st.base[i], |ii| row[ii]);
                let m = self.grid.m_values()[i];
                let wk = w[k];
                let a = 1.0 - m * d1 / (2.0 * wk);
                let f = a * a - d1 * d1 / 4.0 * (1.0 / wk + 0.25) + 0.5 * d2;
                let df_dw = a * m * d1 / (wk * wk) + d1 * d1 / (4.0 * wk * wk);
                let df_dd1 = -a * m / wk - 0.5 * d1 * (1.0 / wk + 0.25);
                [f, df_dw, df_dd1, d1, d2]
            })
            .collect()
    }

    /// Butterfly function `f` at every node.
    pub fn butterfly_f(&self, sigma: &[f64]) -> Result<Vec<f64>> {
        let w = self.checked_variance(sigma)?;
        Ok(self.butterfly_terms(&w).into_iter().map(|t| t[0]).collect())
    }

    fn checked_variance(&self, sigma: &[f64]) -> Result<Vec<f64>> {
        if sigma.len() != self.grid.len() {
            return Err(Error::Shape {
                what: "surface values",
                expected: self.grid.len(),
                actual: sigma.len(),
            });
        }
        let w = self.total_variance(sigma);
        if let Some(k) = (0..w.len()).find(|&k| !(sigma[k] > 0.0 && w[k] > 0.0)) {
            let (i, j) = self.grid.unflatten_index(k);
            return Err(Error::InvalidInput(format!(
                "volatility {} (total variance {}) is not positive at (m {i}, tau {j})",
                sigma[k], w[k]
            )));
        }
        Ok(w)
    }

    fn violations(&self, values: &[f64]) -> Vec<Violation> {
        values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < -VIOLATION_TOL)
            .map(|(k, &v)| {
                let (m_index, tau_index) = self.grid.unflatten_index(k);
                Violation {
                    m_index,
                    tau_index,
                    magnitude: -v,
                }
            })
            .collect()
    }

    pub fn check_calendar(&self, sigma: &[f64]) -> CalendarCheck {
        let dw_dtau = self.dw_dtau(sigma);
        let violations = self.violations(&dw_dtau);
        CalendarCheck {
            dw_dtau,
            violations,
        }
    }

    pub fn check_butterfly(&self, sigma: &[f64]) -> Result<ButterflyCheck> {
        let f = self.butterfly_f(sigma)?;
        let violations = self.violations(&f);
        Ok(ButterflyCheck { f, violations })
    }

    /// Grand-mean penalties; only nodes past the violation tolerance contribute.
    pub fn penalties(&self, sigma: &[f64]) -> Result<(f64, f64)> {
        let e = self.penalties_with_grad(sigma)?;
        Ok((e.l_calendar, e.l_butterfly))
    }

    pub fn penalties_with_grad(&self, sigma: &[f64]) -> Result<PenaltyEval> {
        self.penalties_with_weighted_grad(sigma, 1.0, 1.0)
    }

    /// Like [`Self::penalties_with_grad`], with `grad` taken of
    /// `calendar_weight·l_calendar + butterfly_weight·l_butterfly`.
    pub fn penalties_with_weighted_grad(
        &self,
        sigma: &[f64],
        calendar_weight: f64,
        butterfly_weight: f64,
    ) -> Result<PenaltyEval> {
        let w = self.checked_variance(sigma)?;
        let n = self.grid.len();
        let n_m = self.grid.n_m();
        let scale = 1.0 / n as f64;
        let taus = self.grid.tau_values();
        // gradient with respect to w first, chained to σ at the end
        let mut grad_w = vec![0.0; n];

        let mut l_calendar = 0.0;
        for (k, d) in self.dw_dtau(sigma).into_iter().enumerate() {
            if d < -VIOLATION_TOL {
                l_calendar -= d * scale;
                let (i, j) = (k % n_m, k / n_m);
                let st = &self.tau_stencil;
                for (o, wt) in st.first[j].iter().enumerate() {
                    grad_w[(st.base[j] + o) * n_m + i] -= wt * scale * calendar_weight;
                }
            }
        }

        let mut l_butterfly = 0.0;
        let st = &self.m_stencil;
        for (k, t) in self.butterfly_terms(&w).into_iter().enumerate() {
            let [f, df_dw, df_dd1, _, _] = t;
            if f < -VIOLATION_TOL {
                l_butterfly -= f * scale;
                let (i, j) = (k % n_m, k / n_m);
                grad_w[k] -= df_dw * scale * butterfly_weight;
                for o in 0..3 {
                    let kk = j * n_m + st.base[i] + o;
                    grad_w[kk] -= (df_dd1 * st.first[i][o] + 0.5 * st.second[i][o]) * scale * butterfly_weight;
                }
            }
        }

        let grad = grad_w
            .iter()
            .enumerate()
            .map(|(k, g)| g * 2.0 * sigma[k] * taus[k / n_m])
            .collect();
        Ok(PenaltyEval {
            l_calendar,
            l_butterfly,
            grad,
        })
    }

    pub fn audit_values(&self, sigma: &[f64]) -> Result<ViolationReport> {
        let cal = self.check_calendar(sigma);
        let bf = self.check_butterfly(sigma)?;
        let (l_calendar, l_butterfly) = self.penalties(sigma)?;
        let is_free = cal.violations.is_empty() && bf.violations.is_empty();
        Ok(ViolationReport {
            calendar_violations: cal.violations,
            butterfly_violations: bf.violations,
            l_calendar,
            l_butterfly,
            is_free,
        })
    }

    pub fn audit(&self, surface: &IVSurface) -> Result<ViolationReport> {
        self.check_grid(surface)?;
        self.audit_values(surface.values())
    }

    fn check_grid(&self, surface: &IVSurface) -> Result<()> {
        if surface.grid().as_ref() != self.grid.as_ref() {
            return Err(Error::InvalidInput(
                "surface grid differs from checker grid".into(),
            ));
        }
        Ok(())
    }
}

pub fn check_calendar(surface: &IVSurface) -> CalendarCheck {
    ArbitrageChecker::new(Arc::clone(surface.grid())).check_calendar(surface.values())
}

pub fn check_butterfly(surface: &IVSurface) -> Result<ButterflyCheck> {
    ArbitrageChecker::new(Arc::clone(surface.grid())).check_butterfly(surface.values())
}

/// `(l_calendar, l_butterfly)`.
pub fn penalties(surface: &IVSurface) -> Result<(f64, f64)> {
    ArbitrageChecker::new(Arc::clone(surface.grid())).penalties(surface.values())
}

/// Both checks plus penalties.
pub fn audit(surface: &IVSurface) -> Result<ViolationReport> {
    ArbitrageChecker::new(Arc::clone(surface.grid())).audit(surface)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_grid() -> Arc<GridSpec> {
        Arc::new(GridSpec::default())
    }

    /// Same range as the default grid but with τ = 0.5 on a node.
    fn grid_with_half_year() -> Arc<GridSpec> {
        Arc::new(GridSpec::uniform(28, -0.27, 0.27, 26, 0.1, 0.6).unwrap())
    }

    fn declining() -> impl Fn(f64, f64) -> f64 {
        |_, t| 0.5 - 0.6 * t
    }

    fn analytic_dw(t: f64) -> f64 {
        (0.5 - 0.6 * t) * (0.5 - 1.8 * t)
    }

    #[test]
    fn flat_surfaces_are_free() {
        for c in [0.05, 0.2, 0.8] {
            let s = IVSurface::constant(default_grid(), c).unwrap();
            let bf = check_butterfly(&s).unwrap();
            assert!(bf.f.iter().all(|f| (f - 1.0).abs() < 1e-12));
            let cal = check_calendar(&s);
            assert!(cal.dw_dtau.iter().all(|d| (d - c * c).abs() < 1e-12));
            let r = audit(&s).unwrap();
            assert!(r.is_free);
            assert_eq!((r.l_calendar, r.l_butterfly), (0.0, 0.0));
        }
    }

    #[test]
    fn declining_vol_has_calendar_arbitrage() {
        let g = grid_with_half_year();
        let s = IVSurface::from_fn(Arc::clone(&g), declining()).unwrap();
        let cal = check_calendar(&s);
        let j = g
            .tau_values()
            .iter()
            .position(|t| (t - 0.5).abs() < 1e-12)
            .unwrap();
        assert!((cal.dw_dtau[g.flat_index(5, j)] + 0.08).abs() < 1e-3);
        for (j, &t) in g
            .tau_values()
            .iter()
            .enumerate()
            .skip(1)
            .take(g.n_tau() - 2)
        {
            let d = cal.dw_dtau[g.flat_index(0, j)];
            assert!((d - analytic_dw(t)).abs() < 1e-3, "tau {t}: {d}");
            let flagged = cal.violations.iter().any(|v| v.tau_index == j);
            if analytic_dw(t) < -0.01 {
                assert!(flagged, "tau {t} should be flagged");
            } else if analytic_dw(t) > 0.01 {
                assert!(!flagged, "tau {t} should be clean");
            }
        }
    }

    #[test]
    fn calendar_penalty_equals_hand_sum() {
        let g = grid_with_half_year();
        let s = IVSurface::from_fn(Arc::clone(&g), declining()).unwrap();
        let cal = check_calendar(&s);
        let hand: f64 = cal.dw_dtau.iter().map(|d| (-d).max(0.0)).sum::<f64>() / g.len() as f64;
        let (lc, lb) = penalties(&s).unwrap();
        assert!(lc > 0.0);
        assert!((lc - hand).abs() < 1e-12);
        assert_eq!(lb, 0.0);
    }

    #[test]
    fn single_node_violation_scales_by_node_count() {
        let g = default_grid();
        let checker = ArbitrageChecker::new(Arc::clone(&g));
        // Lower σ at the last maturity of one column just enough to make the
        // one-sided ∂w/∂τ negative there and nowhere else.
        let mut v = vec![0.2; g.len()];
        let last = g.n_tau() - 1;
        let k = g.flat_index(3, last);
        let (t0, t1) = (g.tau_values()[last - 1], g.tau_values()[last]);
        v[k] = (0.04 * t0 / t1 * 0.999).sqrt();
        let cal = checker.check_calendar(&v);
        assert_eq!(cal.violations.len(), 1);
        let gap = cal.violations[0].magnitude;
        let (lc, _) = checker.penalties(&v).unwrap();
        assert!((lc - gap / g.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn vertical_shift_can_create_calendar_arbitrage() {
        // ∂τ w_new = (σ+δ)² + 2(σ+δ)τ∂τσ: a surface falling in τ stays valid
        // until a downward shift makes the second term dominate.
        let g = default_grid();
        let base = |_: f64, t: f64| 0.5 - 0.25 * t;
        let s = IVSurface::from_fn(Arc::clone(&g), base).unwrap();
        assert!(audit(&s).unwrap().is_free);
        let delta = -0.3;
        let t = 0.6;
        let sd = base(0.0, t) + delta;
        assert!(sd * sd + 2.0 * sd * t * (-0.25) < 0.0);
        let shifted = IVSurface::from_fn(Arc::clone(&g), |m, t| base(m, t) + delta).unwrap();
        assert!(!check_calendar(&shifted).violations.is_empty());
    }

    #[test]
    fn quadratic_variance_matches_symbolic_f() {
        let g = default_grid();
        for a in [0.01, 0.05] {
            let s =
                IVSurface::from_fn(Arc::clone(&g), |m, t| ((0.04 + a * m * m) / t).sqrt()).unwrap();
            let bf = check_butterfly(&s).unwrap();
            for (k, (m, _)) in g.nodes().enumerate() {
                let (w, d1, d2) = (0.04 + a * m * m, 2.0 * a * m, 2.0 * a);
                let sym = (1.0 - m * d1 / (2.0 * w)).powi(2) - d1 * d1 / 4.0 * (1.0 / w + 0.25)
                    + 0.5 * d2;
                let (i, _) = g.unflatten_index(k);
                // one-sided edge stencils are first order: error ≈ |∂f/∂w'|·a·h
                let tol = if i == 0 || i == g.n_m() - 1 {
                    0.2 * a
                } else {
                    1e-6
                };
                assert!(
                    (bf.f[k] - sym).abs() < tol,
                    "a={a} m={m}: {} vs {sym}",
                    bf.f[k]
                );
            }
        }
    }

    #[test]
    fn butterfly_rejects_non_positive_variance() {
        let g = default_grid();
        let checker = ArbitrageChecker::new(Arc::clone(&g));
        let mut v = vec![0.2; g.len()];
        v[5] = 0.0;
        assert!(checker.check_butterfly(&v).is_err());
        v[5] = -0.2;
        assert!(checker.check_butterfly(&v).is_err());
        assert!(checker.penalties_with_grad(&v).is_err());
    }

    #[test]
    fn strong_smile_curvature_breaks_butterfly() {
        // w concave in m: w'' < 0 drives f negative near the money
        let g = default_grid();
        let s = IVSurface::from_fn(Arc::clone(&g), |m, _| 0.3 - 4.0 * m * m).unwrap();
        let r = audit(&s).unwrap();
        assert!(!r.butterfly_violations.is_empty());
        assert!(r.l_butterfly > 0.0 && !r.is_free);
    }

    fn finite_difference_check(values: &[f64], checker: &ArbitrageChecker) {
        let e = checker.penalties_with_grad(values).unwrap();
        let total = |v: &[f64]| {
            let (a, b) = checker.penalties(v).unwrap();
            a + b
        };
        let h = 1e-6;
        let mut v = values.to_vec();
        for k in (0..values.len()).step_by(7) {
            let orig = v[k];
            v[k] = orig + h;
            let up = total(&v);
            v[k] = orig - h;
            let dn = total(&v);
            v[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - e.grad[k]).abs() / fd.abs().max(e.grad[k].abs()).max(1e-3);
            assert!(err < 1e-5, "node {k}: fd {fd} vs analytic {}", e.grad[k]);
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let g = default_grid();
        let checker = ArbitrageChecker::new(Arc::clone(&g));
        let s = IVSurface::from_fn(Arc::clone(&g), |m, t| {
            0.55 - 0.35 * t - 4.0 * m * m + 0.004 * (25.0 * m).sin()
        })
        .unwrap();
        let e = checker.penalties_with_grad(s.values()).unwrap();
        assert!(e.l_calendar > 0.0 && e.l_butterfly > 0.0);
        finite_difference_check(s.values(), &checker);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn penalties_vanish_iff_free(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Arc::new(GridSpec::uniform(8, -0.3, 0.3, 6, 0.1, 0.6).unwrap());
            let checker = ArbitrageChecker::new(Arc::clone(&g));
            let v: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.15..0.35)).collect();
            let r = checker.audit_values(&v).unwrap();
            prop_assert!(r.l_calendar >= 0.0 && r.l_butterfly >= 0.0);
            prop_assert_eq!(r.is_free, r.l_calendar == 0.0 && r.l_butterfly == 0.0);
            prop_assert_eq!(r.calendar_violations.is_empty(), r.l_calendar == 0.0);
            prop_assert_eq!(r.butterfly_violations.is_empty(), r.l_butterfly == 0.0);
        }
    }
}
