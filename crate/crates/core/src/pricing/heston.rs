//! Heston call prices by Fourier-cosine expansion, and a Monte-Carlo oracle.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Heston model parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HestonParams {
    pub s0: f64,
    pub v0: f64,
    pub kappa: f64,
    pub v_bar: f64,
    pub gamma: f64,
    pub rho: f64,
    pub rate: f64,
}

impl HestonParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.s0, self.v0, self.kappa, self.v_bar, self.gamma];
        if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Heston s0, v0, kappa, v_bar, gamma must be positive: {self:?}"
            )));
        }
        if !(self.rho.abs() < 1.0) || !self.rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "Heston rho must lie in (-1, 1): {self:?}"
            )));
        }
        Ok(())
    }
}

/// Log of the characteristic function of `ln(S_τ/S₀)`.
///
/// Written in the "little trap" form with the `(b − d)/γ²` factor expanded
/// so the γ → 0 limit is free of cancellation.
pub fn heston_log_cf(p: &HestonParams, u: Complex64, tau: f64) -> Complex64 {
    let i = Complex64::i();
    let g2 = p.gamma * p.gamma;
    let b = p.kappa - p.rho * p.gamma * i * u;
    let d = (b * b + g2 * (i * u + u * u)).sqrt();
    let bpd = b + d;
    // q = (b − d)/γ²
    let q = -(i * u + u * u) / bpd;
    let g = q * g2 / bpd;
    let e = (-d * tau).exp();
    let one = Complex64::new(1.0, 0.0);
    let d_coef = q * (one - e) / (one - g * e);
    // (2/γ²)·ln(1 + X) with X = γ²·y
    let y = q * (one - e) / (bpd * (one - g));
    let x = y * g2;
    let log1p_over_x = if x.norm() < 1e-5 {
        one - x / 2.0 + x * x / 3.0
    } else {
        (one + x).ln() / x
    };
    let c_coef = p.kappa * p.v_bar * (q * tau - 2.0 * y * log1p_over_x);
    i * u * p.rate * tau + c_coef + d_coef * p.v0
}

/// First, second and fourth cumulants of `ln(S_τ/S₀)`.
///
/// Taken from the Taylor coefficients of the cumulant generating function
/// `t ↦ ln φ(−it)` by a trapezoidal Cauchy integral on a small circle.
pub fn heston_cumulants(p: &HestonParams, tau: f64) -> (f64, f64, f64) {
    const POINTS: usize = 64;
    const RADIUS: f64 = 0.25;
    let mut coeff = [Complex64::new(0.0, 0.0); 5];
    for k in 0..POINTS {
        let theta = 2.0 * PI * k as f64 / POINTS as f64;
        let t = Complex64::from_polar(RADIUS, theta);
        let kt = heston_log_cf(p, -Complex64::i() * t, tau);
        for (n, c) in coeff.iter_mut().enumerate() {
            *c += kt * Complex64::from_polar(1.0, -(n as f64) * theta);
        }
    }
    let taylor = |n: usize| coeff[n].re / POINTS as f64 / RADIUS.powi(n as i32);
    (taylor(1), 2.0 * taylor(2), 24.0 * taylor(4))
}

/// Fourier-cosine settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosConfig {
    pub n_terms: usize,
    /// Half-width of the truncation range in units of `sqrt(c₂ + sqrt|c₄|)`.
    pub truncation: f64,
}

impl Default for CosConfig {
    fn default() -> Self {
        Self {
            n_terms: 256,
            truncation: 12.0,
        }
    }
}

/// Truncation diagnostics for one maturity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosDiagnostics {
    pub terms: usize,
    /// Truncation range for `ln(S_τ/S₀)`.
    pub interval: (f64, f64),
    /// Largest characteristic-function modulus among the last eight terms.
    pub tail_estimate: f64,
}

/// Call prices for several strikes at one maturity.
pub fn heston_call_prices(
    p: &HestonParams,
    strikes: &[f64],
    tau: f64,
    cfg: &CosConfig,
) -> Result<(Vec<f64>, CosDiagnostics)> {
    p.validate()?;
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if let Some(k) = strikes.iter().find(|k| !(**k > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "strike must be positive, got {k}"
        )));
    }
    let (c1, c2, c4) = heston_cumulants(p, tau);
    let half = cfg.truncation * (c2.abs() + c4.abs().sqrt()).sqrt();
    let (lo, hi) = (c1 - half, c1 + half);
    let width = hi - lo;
    let n = cfg.n_terms;

    // Series weights shared by every strike: Re-part factors of φ(u_k)·e^{−iu_k·lo}.
    let cf: Vec<Complex64> = (0..n)
        .map(|k| {
            let u = k as f64 * PI / width;
            (heston_log_cf(p, Complex64::new(u, 0.0), tau) - Complex64::i() * u * lo).exp()
        })
        .collect();
    let tail_estimate = cf[n.saturating_sub(8)..]
        .iter()
        .fold(0.0f64, |m, c| m.max(c.norm()));
    let df = (-p.rate * tau).exp();

    let prices = strikes
        .iter()
        .map(|&strike| {
            // y = ln(S_τ/K) = x + X, with X truncated to [lo, hi].
            let x = (p.s0 / strike).ln();
            let (a, b) = (x + lo, x + hi);
            if b <= 0.0 {
                return 0.0;
            }
            let c = a.max(0.0);
            let sum: f64 = cf
                .iter()
                .enumerate()
                .map(|(k, phi)| {
                    let w = k as f64 * PI / width;
                    let chi = chi_k(w, a, c, b);
                    let psi = psi_k(w, a, c, b);
                    let term = phi.re * (chi - psi);
                    if k == 0 {
                        0.5 * term
                    } else {
                        term
                    }
                })
                .sum();
            (df * strike * 2.0 / width * sum).max(0.0)
        })
        .collect();
    Ok((
        prices,
        CosDiagnostics {
            terms: n,
            interval: (lo, hi),
            tail_estimate,
        },
    ))
}

/// ∫_c^d e^y cos(w(y − a)) dy.
fn chi_k(w: f64, a: f64, c: f64, d: f64) -> f64 {
    let (cd, sd) = ((w * (d - a)).cos(), (w * (d - a)).sin());
    let (cc, sc) = ((w * (c - a)).cos(), (w * (c - a)).sin());
    (cd * d.exp() - cc * c.exp() + w * (sd * d.exp() - sc * c.exp())) / (1.0 + w * w)
}

/// ∫_c^d cos(w(y − a)) dy.
fn psi_k(w: f64, a: f64, c: f64, d: f64) -> f64 {
    if w == 0.0 {
        d - c
    } else {
        ((w * (d - a)).sin() - (w * (c - a)).sin()) / w
    }
}

/// Single-strike convenience wrapper around [`heston_call_prices`].
pub fn heston_call_price(p: &HestonParams, strike: f64, tau: f64) -> Result<f64> {
    Ok(heston_call_prices(p, &[strike], tau, &CosConfig::default())?.0[0])
}

/// Monte-Carlo price with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub price: f64,
    pub std_error: f64,
}

const PATHS_PER_CHUNK: usize = 4096;

/// Full-truncation Euler Monte Carlo on a (strike × maturity) grid.
///
/// All options share the same paths. The step size is `max(taus)/n_steps`
/// and every maturity must fall on a step boundary. Each chunk of paths
/// draws from its own stream seeded by `(seed, chunk)`, so results do not
/// depend on thread scheduling. Output is indexed `[tau][strike]`.
pub fn heston_mc_prices(
    p: &HestonParams,
    strikes: &[f64],
    taus: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<McEstimate>>> {
    p.validate()?;
    if n_paths < 2 || n_steps == 0 || taus.is_empty() {
        return Err(Error::InvalidInput(
            "need n_paths >= 2, n_steps >= 1 and a maturity".into(),
        ));
    }
    let t_max = taus.iter().cloned().fold(0.0, f64::max);
    let dt = t_max / n_steps as f64;
    let stops = taus
        .iter()
        .map(|&t| {
            let k = (t / dt).round();
            if !(t > 0.0) || (k * dt - t).abs() > 1e-9 * t_max {
                Err(Error::InvalidInput(format!(
                    "maturity {t} is not a multiple of dt = {dt}"
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let n_opts = taus.len() * strikes.len();
    let n_chunks = n_paths.div_ceil(PATHS_PER_CHUNK);
    let sqrt_dt = dt.sqrt();
    let rho_c = (1.0 - p.rho * p.rho).sqrt();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let paths = PATHS_PER_CHUNK.min(n_paths - chunk * PATHS_PER_CHUNK);
            let mut sum = vec![0.0; n_opts];
            let mut sum_sq = vec![0.0; n_opts];
            for _ in 0..paths {
                let mut log_s = p.s0.ln();
                let mut v = p.v0;
                let mut step = 0;
                for (ti, &stop) in stops.iter().enumerate() {
                    while step < stop {
                        let z1: f64 = StandardNormal.sample(&mut rng);
                        let z2: f64 = StandardNormal.sample(&mut rng);
                        let vp = v.max(0.0);
                        let sv = vp.sqrt() * sqrt_dt;
                        log_s += (p.rate - 0.5 * vp) * dt + sv * z1;
                        v += p.kappa * (p.v_bar - vp) * dt
                            + p.gamma * sv * (p.rho * z1 + rho_c * z2);
                        step += 1;
                    }
                    let s = log_s.exp();
                    let df = (-p.rate * taus[ti]).exp();
                    for (ki, &k) in strikes.iter().enumerate() {
                        let pay = df * (s - k).max(0.0);
                        sum[ti * strikes.len() + ki] += pay;
                        sum_sq[ti * strikes.len() + ki] += pay * pay;
                    }
                }
            }
            (sum, sum_sq)
        })
        .collect();

    let mut sum = vec![0.0; n_opts];
    let mut sum_sq = vec![0.0; n_opts];
    for (s, q) in &partials {
        for k in 0..n_opts {
            sum[k] += s[k];
            sum_sq[k] += q[k];
        }
    }
    let n = n_paths as f64;
    Ok(taus
        .iter()
        .enumerate()
        .map(|(ti, _)| {
            (0..strikes.len())
                .map(|ki| {
                    let k = ti * strikes.len() + ki;
                    let mean = sum[k] / n;
                    let var = ((sum_sq[k] - n * mean * mean) / (n - 1.0)).max(0.0);
                    McEstimate {
                        price: mean,
                        std_error: (var / n).sqrt(),
                    }
                })
                .collect()
        })
        .collect())
}

/// Single-option Monte-Carlo oracle; `n_steps` spans `[0, tau]`.
pub fn heston_mc_price(
    p: &HestonParams,
    strike: f64,
    tau: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(heston_mc_prices(p, &[strike], &[tau], n_paths, n_steps, seed)?[0][0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::{bs_call_price, BsInputs};

    fn params(gamma: f64) -> HestonParams {
        HestonParams {
            s0: 1.0,
            v0: 0.2,
            kappa: 1.5,
            v_bar: 0.2,
            gamma,
            rho: -0.5,
            rate: 0.0,
        }
    }

    #[test]
    fn cumulants_of_lognormal_limit() {
        let p = HestonParams {
            v0: 0.04,
            v_bar: 0.04,
            gamma: 1e-8,
            ..params(0.5)
        };
        let (c1, c2, c4) = heston_cumulants(&p, 0.5);
        assert!((c1 + 0.5 * 0.04 * 0.5).abs() < 1e-12);
        // the residual O(ργ) term is ~1e-11 at γ = 1e-8
        assert!((c2 - 0.04 * 0.5).abs() < 1e-9);
        assert!(c4.abs() < 1e-12);
    }

    #[test]
    fn characteristic_function_is_normalized() {
        let p = params(0.7);
        let phi0 = heston_log_cf(&p, Complex64::new(0.0, 0.0), 0.4);
        assert!(phi0.norm() < 1e-15);
        // martingale: E[S_τ/S₀] = φ(−i) = 1 when r = 0
        let phi_mi = heston_log_cf(&p, Complex64::new(0.0, -1.0), 0.4);
        assert!(phi_mi.norm() < 1e-13);
    }

    #[test]
    fn degenerate_variance_matches_black_scholes() {
        for &(k, t) in &[
            (0.8, 0.1),
            (1.0, 0.3),
            (1.25, 0.6),
            (0.95, 1.0),
            (1.1, 0.05),
        ] {
            let p = HestonParams {
                v0: 0.04,
                v_bar: 0.04,
                gamma: 1e-8,
                ..params(0.5)
            };
            let h = heston_call_price(&p, k, t).unwrap();
            let bs = bs_call_price(&BsInputs::new(1.0, k, 0.0, t, 0.2).unwrap());
            assert!((h - bs).abs() < 1e-8, "K={k} tau={t}: {h} vs {bs}");
        }
    }

    #[test]
    fn deep_itm_limit() {
        let p = params(0.5);
        let c = heston_call_price(&p, 1e-4, 0.5).unwrap();
        assert!((c - (1.0 - 1e-4)).abs() < 1e-8, "{c}");
    }

    #[test]
    fn exposes_truncation_diagnostics() {
        let (_, diag) =
            heston_call_prices(&params(0.5), &[1.0], 0.5, &CosConfig::default()).unwrap();
        assert_eq!(diag.terms, 256);
        assert!(diag.interval.0 < 0.0 && diag.interval.1 > 0.0);
        assert!(diag.tail_estimate < 1e-12);
    }

    #[test]
    fn mc_is_deterministic() {
        let p = params(0.5);
        let a = heston_mc_price(&p, 1.0, 0.5, 5000, 50, 9).unwrap();
        let b = heston_mc_price(&p, 1.0, 0.5, 5000, 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_degenerate_matches_black_scholes() {
        let p = HestonParams {
            v0: 0.04,
            v_bar: 0.04,
            gamma: 1e-6,
            ..params(0.5)
        };
        let mc = heston_mc_price(&p, 1.0, 0.5, 40_000, 50, 3).unwrap();
        let bs = bs_call_price(&BsInputs::new(1.0, 1.0, 0.0, 0.5, 0.2).unwrap());
        assert!((mc.price - bs).abs() < 3.0 * mc.std_error, "{mc:?} vs {bs}");
    }

    #[test]
    fn mc_standard_error_scales_with_paths() {
        let p = params(0.5);
        let ratios: Vec<f64> = (0..4)
            .map(|s| {
                let a = heston_mc_price(&p, 1.0, 0.5, 20_000, 20, 100 + s).unwrap();
                let b = heston_mc_price(&p, 1.0, 0.5, 40_000, 20, 200 + s).unwrap();
                b.std_error / a.std_error
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let target = 1.0 / 2f64.sqrt();
        assert!((mean / target - 1.0).abs() < 0.2, "ratio {mean}");
    }

    #[test]
    fn rejects_off_step_maturity() {
        let p = params(0.5);
        assert!(heston_mc_prices(&p, &[1.0], &[0.1, 0.6], 100, 7, 1).is_err());
    }
}
