//! Option-pricing kernels used to manufacture training surfaces.

mod black_scholes;
mod heston;
mod sabr;

pub use black_scholes::{
    bs_call_price, bs_vega, implied_vol, norm_cdf, norm_pdf, BsInputs, IV_MAX, IV_MIN,
};
pub use heston::{
    heston_call_price, heston_call_prices, heston_cumulants, heston_log_cf, heston_mc_price,
    heston_mc_prices, CosConfig, CosDiagnostics, HestonParams, McEstimate,
};
pub use sabr::{
    sabr_implied_vol, sabr_implied_vol_atm, sabr_implied_vol_general, SabrParams, ATM_SWITCH,
};
