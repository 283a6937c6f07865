use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Lower end of the implied-volatility search bracket.
pub const IV_MIN: f64 = 1e-6;
/// Upper end of the implied-volatility search bracket.
pub const IV_MAX: f64 = 5.0;
const LOG_PRICE_TOL: f64 = 1e-15;
const MAX_ITERS: usize = 200;

/// Black-Scholes call inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsInputs {
    pub spot: f64,
    pub strike: f64,
    pub rate: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl BsInputs {
    pub fn new(spot: f64, strike: f64, rate: f64, tau: f64, sigma: f64) -> Result<Self> {
        if !(spot > 0.0 && strike > 0.0 && tau > 0.0 && sigma > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "need positive spot, strike, tau, sigma; got S={spot}, K={strike}, tau={tau}, sigma={sigma}, r={rate}"
            )));
        }
        Ok(Self {
            spot,
            strike,
            rate,
            tau,
            sigma,
        })
    }

    fn d1_d2(&self) -> (f64, f64) {
        let sd = self.sigma * self.tau.sqrt();
        let d1 = ((self.spot / self.strike).ln()
            + (self.rate + 0.5 * self.sigma * self.sigma) * self.tau)
            / sd;
        (d1, d1 - sd)
    }
}

/// Standard normal CDF; `erfc` keeps full relative precision in the lower tail.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Time value `C − max(S − Ke^{−rτ}, 0)`, evaluated without cancellation.
///
/// In the money this is `Ke^{−rτ}N(−d₂) − S N(−d₁)`, the same quantity by
/// parity, whose two terms are both small.
fn time_value(inputs: &BsInputs) -> f64 {
    let (d1, d2) = inputs.d1_d2();
    let fwd_strike = inputs.strike * (-inputs.rate * inputs.tau).exp();
    let tv = if inputs.spot >= fwd_strike {
        fwd_strike * norm_cdf(-d2) - inputs.spot * norm_cdf(-d1)
    } else {
        inputs.spot * norm_cdf(d1) - fwd_strike * norm_cdf(d2)
    };
    tv.max(0.0)
}

/// European call price `S N(d₁) − K e^{−rτ} N(d₂)`.
pub fn bs_call_price(inputs: &BsInputs) -> f64 {
    let intrinsic = (inputs.spot - inputs.strike * (-inputs.rate * inputs.tau).exp()).max(0.0);
    (intrinsic + time_value(inputs)).min(inputs.spot)
}

/// ∂C/∂σ.
pub fn bs_vega(inputs: &BsInputs) -> f64 {
    let (d1, _) = inputs.d1_d2();
    inputs.spot * norm_pdf(d1) * inputs.tau.sqrt()
}

/// Inverts [`bs_call_price`] for σ on `[IV_MIN, IV_MAX]`.
///
/// Newton steps on `ln C(σ) − ln P` using the analytic vega, which is close
/// to linear in σ even for far out-of-the-money prices, with bisection
/// whenever a step leaves the current bracket or stalls.
pub fn implied_vol(price: f64, spot: f64, strike: f64, rate: f64, tau: f64) -> Result<f64> {
    BsInputs::new(spot, strike, rate, tau, 1.0)?;
    let lower = (spot - strike * (-rate * tau).exp()).max(0.0);
    if !(price > lower && price < spot) {
        return Err(Error::Domain(format!(
            "call price {price} outside no-arbitrage band ({lower}, {spot})"
        )));
    }
    // Inverting on the time value keeps in-the-money inputs well conditioned.
    let log_tv = (price - lower).ln();
    // (ln TV(σ) − ln TV, d/dσ of the same)
    let objective = |sigma: f64| {
        let inp = BsInputs {
            spot,
            strike,
            rate,
            tau,
            sigma,
        };
        let tv = time_value(&inp);
        if tv <= 0.0 {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        (tv.ln() - log_tv, bs_vega(&inp) / tv)
    };

    let (mut lo, mut hi) = (IV_MIN, IV_MAX);
    if objective(lo).0 > 0.0 || objective(hi).0 < 0.0 {
        return Err(Error::Domain(format!(
            "price {price} not attained for sigma in [{IV_MIN}, {IV_MAX}]"
        )));
    }

    // Manaster-Koehler start, clipped into a sensible range.
    let m = (spot / strike).ln() + rate * tau;
    let mut sigma = (2.0 * m.abs() / tau).sqrt().clamp(0.05, 1.0);
    let mut last_g = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let (g, slope) = objective(sigma);
        if g.abs() <= LOG_PRICE_TOL {
            return Ok(sigma);
        }
        if g > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(0.5 * (lo + hi));
        }
        let newton = sigma - g / slope;
        if (newton - sigma).abs() <= f64::EPSILON * sigma {
            return Ok(sigma);
        }
        let stalled = g.abs() > 0.5 * last_g.abs();
        sigma = if slope.is_finite() && slope > 0.0 && newton > lo && newton < hi && !stalled {
            newton
        } else {
            0.5 * (lo + hi)
        };
        last_g = g;
    }
    Err(Error::Numerical(format!(
        "implied vol did not converge for price {price}; bracket [{lo}, {hi}]"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn price(s: f64, k: f64, r: f64, t: f64, v: f64) -> f64 {
        bs_call_price(&BsInputs::new(s, k, r, t, v).unwrap())
    }

    /// Simpson integration of (S_T − K)⁺ against the lognormal density.
    fn call_by_quadrature(s: f64, k: f64, t: f64, v: f64) -> f64 {
        let n = 200_000;
        let mu = s.ln() - 0.5 * v * v * t;
        let sd = v * t.sqrt();
        let (a, b) = (k.ln(), mu + 12.0 * sd);
        let h = (b - a) / n as f64;
        let f = |y: f64| {
            (y.exp() - k) * (-(y - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * PI).sqrt())
        };
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + h * i as f64);
        }
        acc * h / 3.0
    }

    #[test]
    fn atm_price_matches_quadrature() {
        let oracle = call_by_quadrature(1.0, 1.0, 0.25, 0.2);
        assert!((oracle - 0.0398776).abs() < 5e-8, "oracle {oracle}");
        let p = price(1.0, 1.0, 0.0, 0.25, 0.2);
        assert!((p - oracle).abs() < 1e-10, "{p} vs {oracle}");
    }

    #[test]
    fn volatility_limits() {
        assert!(price(1.0, 1.0, 0.0, 0.5, 1e-9) < 1e-9);
        let itm = price(1.0, 0.8, 0.03, 0.5, 1e-9);
        assert!((itm - (1.0 - 0.8 * (-0.015f64).exp())).abs() < 1e-12);
        assert!((price(1.0, 1.0, 0.0, 0.5, 1e4) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn round_trips() {
        let p = price(1.0, 1.0, 0.0, 0.25, 0.2);
        assert!((implied_vol(p, 1.0, 1.0, 0.0, 0.25).unwrap() - 0.2).abs() < 1e-10);
        let p = price(1.0, 1.2, 0.0, 0.5, 0.45);
        assert!((implied_vol(p, 1.0, 1.2, 0.0, 0.5).unwrap() - 0.45).abs() < 1e-10);
    }

    #[test]
    fn round_trip_reproduces_price() {
        for &(k, t, v) in &[
            (0.8, 0.1, 0.3),
            (1.3, 0.6, 0.25),
            (1.0, 1.0, 0.9),
            (1.3, 0.05, 0.1),
        ] {
            let p = price(1.0, k, 0.0, t, v);
            let iv = implied_vol(p, 1.0, k, 0.0, t).unwrap();
            assert!((price(1.0, k, 0.0, t, iv) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_prices_outside_band() {
        assert!(matches!(
            implied_vol(1.0, 1.0, 1.0, 0.0, 0.25),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            implied_vol(0.0, 1.0, 1.0, 0.0, 0.25),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            implied_vol(0.19, 1.0, 0.8, 0.0, 0.25),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn strictly_increasing_in_sigma() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = rng.random_range(-0.3f64..0.3).exp();
            let t = rng.random_range(0.1..1.0);
            let v = rng.random_range(0.2..1.0);
            let h = 1e-4;
            assert!(price(1.0, k, 0.0, t, v + h) > price(1.0, k, 0.0, t, v - h));
        }
    }
}
