//! Hagan's asymptotic SABR implied volatility.

use crate::error::{Error, Result};

/// Below this `|ln(f₀/K)|` the ATM expansion replaces the general formula.
pub const ATM_SWITCH: f64 = 1e-8;

/// SABR parameters; `gamma` is the vol-of-vol.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SabrParams {
    pub f0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub gamma: f64,
}

impl SabrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.alpha > 0.0 && self.gamma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "SABR f0, alpha, gamma must be positive: {self:?}"
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "SABR beta must lie in (0, 1]: {self:?}"
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidInput(format!(
                "SABR rho must lie in (-1, 1): {self:?}"
            )));
        }
        Ok(())
    }

    fn time_correction(&self, fk: f64) -> f64 {
        let omb = 1.0 - self.beta;
        omb * omb / 24.0 * self.alpha * self.alpha / fk.powf(omb)
            + 0.25 * self.rho * self.beta * self.gamma * self.alpha / fk.powf(0.5 * omb)
            + (2.0 - 3.0 * self.rho * self.rho) / 24.0 * self.gamma * self.gamma
    }
}

/// `g(x) = ln((sqrt(1 − 2ρx + x²) + x − ρ)/(1 − ρ))`, accurate for small `x`.
fn g_fn(x: f64, rho: f64) -> f64 {
    let e = x * x - 2.0 * rho * x;
    let sqrt_m1 = e / ((1.0 + e).sqrt() + 1.0);
    ((sqrt_m1 + x) / (1.0 - rho)).ln_1p()
}

/// General (non-ATM) expansion, valid for any `K ≠ f₀`.
pub fn sabr_implied_vol_general(p: &SabrParams, strike: f64, tau: f64) -> f64 {
    let omb = 1.0 - p.beta;
    let lfk = (p.f0 / strike).ln();
    let fk = p.f0 * strike;
    let l2 = lfk * lfk;
    let a_hat = p.alpha
        / (fk.powf(0.5 * omb) * (1.0 + omb * omb / 24.0 * l2 + omb.powi(4) / 1920.0 * l2 * l2));
    let c_hat = p.gamma / p.alpha * p.f0.powf(0.5 * omb) * lfk;
    let ratio = if c_hat == 0.0 {
        1.0
    } else {
        c_hat / g_fn(c_hat, p.rho)
    };
    a_hat * ratio * (1.0 + p.time_correction(fk) * tau)
}

/// ATM expansion (`K = f₀`).
pub fn sabr_implied_vol_atm(p: &SabrParams, tau: f64) -> f64 {
    let omb = 1.0 - p.beta;
    p.alpha / p.f0.powf(omb) * (1.0 + p.time_correction(p.f0 * p.f0) * tau)
}

/// Implied volatility at strike `K` and maturity `tau`, switching to the
/// ATM branch when `|ln(f₀/K)| < ATM_SWITCH`.
pub fn sabr_implied_vol(p: &SabrParams, strike: f64, tau: f64) -> Result<f64> {
    p.validate()?;
    if !(strike > 0.0 && tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "strike and tau must be positive, got K={strike}, tau={tau}"
        )));
    }
    let sigma = if (p.f0 / strike).ln().abs() < ATM_SWITCH {
        sabr_implied_vol_atm(p, tau)
    } else {
        sabr_implied_vol_general(p, strike, tau)
    };
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Numerical(format!(
            "SABR vol {sigma} at K={strike}, tau={tau} for {p:?}"
        )));
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(alpha: f64, beta: f64, rho: f64, gamma: f64) -> SabrParams {
        SabrParams {
            f0: 1.0,
            alpha,
            beta,
            rho,
            gamma,
        }
    }

    #[test]
    fn atm_hand_value() {
        let v = sabr_implied_vol(&p(0.3, 1.0, 0.0, 0.5), 1.0, 0.25).unwrap();
        assert!((v - 0.3015625).abs() < 1e-12, "{v}");
    }

    #[test]
    fn lognormal_limit_is_flat() {
        let q = p(0.25, 1.0, 0.3, 1e-10);
        for k in [0.76, 0.9, 1.0, 1.1, 1.3] {
            let v = sabr_implied_vol(&q, k, 0.5).unwrap();
            assert!((v - 0.25).abs() < 1e-9, "K={k}: {v}");
        }
    }

    #[test]
    fn continuous_across_atm_switch() {
        let q = p(0.3, 0.6, -0.4, 0.7);
        let atm = sabr_implied_vol(&q, 1.0, 0.4).unwrap();
        for k in [1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 1e-7, 1.0 - 1e-7] {
            let gen = sabr_implied_vol_general(&q, k, 0.4);
            assert!((gen - atm).abs() < 1e-7, "K={k}: {gen} vs {atm}");
        }
    }

    #[test]
    fn negative_rho_gives_negative_skew() {
        let q = p(0.3, 1.0, -0.5, 0.5);
        let left = sabr_implied_vol(&q, (-0.1f64).exp(), 0.1).unwrap();
        let right = sabr_implied_vol(&q, 0.1f64.exp(), 0.1).unwrap();
        assert!(left > right);
    }

    #[test]
    fn g_matches_direct_formula() {
        for &(x, rho) in &[(0.3f64, -0.5f64), (-0.8, 0.2), (1.5, 0.7)] {
            let direct = ((1.0 - 2.0 * rho * x + x * x).sqrt() + x - rho) / (1.0 - rho);
            assert!((g_fn(x, rho) - direct.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(sabr_implied_vol(&p(0.3, 0.0, 0.0, 0.5), 1.0, 0.2).is_err());
        assert!(sabr_implied_vol(&p(0.3, 1.0, 1.0, 0.5), 1.0, 0.2).is_err());
        assert!(sabr_implied_vol(&p(0.3, 1.0, 0.0, 0.5), 0.0, 0.2).is_err());
    }
}
