//! Labeled training corpus: random Heston and SABR parameters, priced on the
//! grid, inverted to implied volatilities and labeled with shape features.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arbitrage::ArbitrageChecker;
use crate::error::{Error, Result};
use crate::features::{AnchorRegression, Feature, FeatureVector};
use crate::pricing::{
    heston_call_prices, implied_vol, sabr_implied_vol, CosConfig, HestonParams, SabrParams,
};
use crate::surfaces::{write_surface_set, GridSpec, IVSurface};

pub const STATS_FILE: &str = "stats.json";
const MAX_RETRIES: usize = 10;

/// Closed interval sampled uniformly.
pub type Range = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HestonBox {
    pub rho: Range,
    pub v_bar: Range,
    pub kappa: Range,
    pub gamma: Range,
    pub s0: f64,
    pub rate: f64,
}

impl Default for HestonBox {
    fn default() -> Self {
        Self {
            rho: (-0.9, -0.1),
            v_bar: (0.1, 0.3),
            kappa: (1.0, 2.0),
            gamma: (0.1, 0.9),
            s0: 1.0,
            rate: 0.0,
        }
    }
}

impl HestonBox {
    /// Draws one parameter set; the initial variance starts at `v_bar`.
    pub fn sample(&self, rng: &mut impl Rng) -> HestonParams {
        let v_bar = uniform(rng, self.v_bar);
        HestonParams {
            s0: self.s0,
            v0: v_bar,
            kappa: uniform(rng, self.kappa),
            v_bar,
            gamma: uniform(rng, self.gamma),
            rho: uniform(rng, self.rho),
            rate: self.rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SabrBox {
    pub beta: Range,
    pub alpha: Range,
    pub rho: Range,
    pub gamma: Range,
    pub f0: f64,
}

impl Default for SabrBox {
    fn default() -> Self {
        Self {
            beta: (0.1, 1.0),
            alpha: (0.1, 0.5),
            rho: (-0.9, 0.9),
            gamma: (0.1, 0.9),
            f0: 1.0,
        }
    }
}

impl SabrBox {
    pub fn sample(&self, rng: &mut impl Rng) -> SabrParams {
        SabrParams {
            f0: self.f0,
            alpha: uniform(rng, self.alpha),
            beta: uniform(rng, self.beta),
            rho: uniform(rng, self.rho),
            gamma: uniform(rng, self.gamma),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_heston: usize,
    pub n_sabr: usize,
    pub heston_box: HestonBox,
    pub sabr_box: SabrBox,
    pub grid: GridSpec,
    pub seed: u64,
    /// Features attached as labels.
    pub features: Vec<Feature>,
}

impl Default for SamplerConfig {
    /// Full-size corpus: 30,000 surfaces from each model.
    fn default() -> Self {
        Self::with_counts(30_000, 30_000, 0)
    }
}

impl SamplerConfig {
    pub fn with_counts(n_heston: usize, n_sabr: usize, seed: u64) -> Self {
        Self {
            n_heston,
            n_sabr,
            heston_box: HestonBox::default(),
            sabr_box: SabrBox::default(),
            grid: GridSpec::default(),
            seed,
            features: Feature::ALL.to_vec(),
        }
    }

    /// 1,000 surfaces per model.
    pub fn desk(seed: u64) -> Self {
        Self::with_counts(1_000, 1_000, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.n_heston + self.n_sabr == 0 {
            return Err(Error::InvalidInput(
                "dataset needs at least one surface".into(),
            ));
        }
        if self.features.is_empty() {
            return Err(Error::InvalidInput(
                "dataset needs at least one label feature".into(),
            ));
        }
        Ok(())
    }
}

/// Turns call prices (flattened like the surface) into an implied-vol surface.
pub fn implied_surface_from_prices(
    grid: Arc<GridSpec>,
    spot: f64,
    rate: f64,
    prices: &[f64],
) -> Result<IVSurface> {
    if prices.len() != grid.len() {
        return Err(Error::Shape {
            what: "price grid",
            expected: grid.len(),
            actual: prices.len(),
        });
    }
    let values = grid
        .nodes()
        .zip(prices)
        .enumerate()
        .map(|(k, ((m, tau), &price))| {
            implied_vol(price, spot, spot * m.exp(), rate, tau).map_err(|e| {
                let (m_index, tau_index) = grid.unflatten_index(k);
                Error::Node {
                    m_index,
                    tau_index,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    IVSurface::new(grid, values)
}

/// Heston implied-vol surface: Fourier-cosine prices inverted node by node.
pub fn sample_heston_surface(p: &HestonParams, grid: &Arc<GridSpec>) -> Result<IVSurface> {
    let strikes: Vec<f64> = grid.m_values().iter().map(|m| p.s0 * m.exp()).collect();
    let cfg = CosConfig::default();
    let mut prices = Vec::with_capacity(grid.len());
    for &tau in grid.tau_values() {
        prices.extend(heston_call_prices(p, &strikes, tau, &cfg)?.0);
    }
    implied_surface_from_prices(Arc::clone(grid), p.s0, p.rate, &prices)
}

/// SABR surface from Hagan's formula with strikes `K = f₀·e^m`.
pub fn sample_sabr_surface(p: &SabrParams, grid: &Arc<GridSpec>) -> Result<IVSurface> {
    let values = grid
        .nodes()
        .map(|(m, tau)| sabr_implied_vol(p, p.f0 * m.exp(), tau))
        .collect::<Result<Vec<_>>>()?;
    IVSurface::new(Arc::clone(grid), values)
}

/// Which generator produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelParams {
    Heston(HestonParams),
    Sabr(SabrParams),
}

/// Summary statistics of one label feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: Feature,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub sd: f64,
}

impl FeatureStats {
    pub fn from_values(feature: Feature, xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            feature,
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            mean,
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            sd: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub n_heston: usize,
    pub n_sabr: usize,
    pub seed: u64,
    /// Resampled draws, all causes.
    pub retries: usize,
    /// Resamples caused by a failed arbitrage check.
    pub arbitrage_rejections: usize,
    pub features: Vec<FeatureStats>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: Arc<GridSpec>,
    pub surfaces: Vec<IVSurface>,
    pub labels: Vec<FeatureVector>,
    pub params: Vec<ModelParams>,
    pub stats: DatasetStats,
}

impl Dataset {
    /// Writes the `.ivsd` directory plus `stats.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_surface_set(dir, &self.grid, &self.surfaces, Some(&self.labels))?;
        let path = dir.join(STATS_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.stats)?)
            .map_err(|e| Error::io(&path, e))
    }
}

struct Sample {
    surface: IVSurface,
    label: FeatureVector,
    params: ModelParams,
    retries: usize,
    arbitrage_rejections: usize,
}

/// Builds the corpus. Sample `k` draws from its own stream of a generator
/// seeded with `cfg.seed`, so output is independent of thread count.
pub fn build_dataset(cfg: &SamplerConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = Arc::new(cfg.grid.clone());
    let regression = AnchorRegression::for_grid(Arc::clone(&grid))?;
    let checker = ArbitrageChecker::new(Arc::clone(&grid));
    let total = cfg.n_heston + cfg.n_sabr;

    let samples = (0..total)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64);
            let mut retries = 0;
            let mut arbitrage_rejections = 0;
            loop {
                let params = if index < cfg.n_heston {
                    ModelParams::Heston(cfg.heston_box.sample(&mut rng))
                } else {
                    ModelParams::Sabr(cfg.sabr_box.sample(&mut rng))
                };
                let attempt = match &params {
                    ModelParams::Heston(p) => sample_heston_surface(p, &grid),
                    ModelParams::Sabr(p) => sample_sabr_surface(p, &grid),
                }
                .and_then(|surface| {
                    let report = checker.audit(&surface)?;
                    Ok((surface, report.is_free))
                });
                let failure = match attempt {
                    Ok((surface, true)) => {
                        let label = regression.extract(&surface, &cfg.features)?;
                        return Ok(Sample {
                            surface,
                            label,
                            params,
                            retries,
                            arbitrage_rejections,
                        });
                    }
                    Ok((_, false)) => {
                        arbitrage_rejections += 1;
                        format!("arbitrage check failed for {params:?}")
                    }
                    Err(e) => format!("{e} for {params:?}"),
                };
                retries += 1;
                log::warn!("sample {index}: {failure}; resampling ({retries}/{MAX_RETRIES})");
                if retries >= MAX_RETRIES {
                    return Err(Error::Numerical(format!(
                        "sample {index} failed {MAX_RETRIES} times; last: {failure}"
                    )));
                }
            }
        })
        .collect::<Result<Vec<Sample>>>()?;

    let mut surfaces = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut params = Vec::with_capacity(total);
    let (mut retries, mut arbitrage_rejections) = (0, 0);
    for s in samples {
        surfaces.push(s.surface);
        labels.push(s.label);
        params.push(s.params);
        retries += s.retries;
        arbitrage_rejections += s.arbitrage_rejections;
    }
    let features = cfg
        .features
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let xs: Vec<f64> = labels.iter().map(|l| l.values()[k]).collect();
            FeatureStats::from_values(f, &xs)
        })
        .collect();
    let stats = DatasetStats {
        count: total,
        n_heston: cfg.n_heston,
        n_sabr: cfg.n_sabr,
        seed: cfg.seed,
        retries,
        arbitrage_rejections,
        features,
    };
    Ok(Dataset {
        grid,
        surfaces,
        labels,
        params,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitrage::audit;

    fn grid() -> Arc<GridSpec> {
        Arc::new(GridSpec::default())
    }

    #[test]
    fn degenerate_heston_is_flat() {
        let p = HestonParams {
            s0: 1.0,
            v0: 0.04,
            kappa: 1.5,
            v_bar: 0.04,
            gamma: 1e-6,
            rho: -0.5,
            rate: 0.0,
        };
        let s = sample_heston_surface(&p, &grid()).unwrap();
        let max_dev = s
            .values()
            .iter()
            .map(|v| (v - 0.2).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-4, "{max_dev}");
    }

    #[test]
    fn random_heston_surfaces_are_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let b = HestonBox::default();
        for _ in 0..100 {
            let p = b.sample(&mut rng);
            let s = sample_heston_surface(&p, &grid()).unwrap();
            assert!(s.values().iter().all(|v| (0.01..=1.5).contains(v)), "{p:?}");
        }
    }

    #[test]
    fn node_failure_names_indices() {
        let g = grid();
        let mut prices: Vec<f64> = g
            .nodes()
            .map(|(m, t)| {
                crate::pricing::bs_call_price(
                    &crate::pricing::BsInputs::new(1.0, m.exp(), 0.0, t, 0.2).unwrap(),
                )
            })
            .collect();
        let k = g.flat_index(4, 9);
        prices[k] = 1.0; // upper edge of the band
        match implied_surface_from_prices(g, 1.0, 0.0, &prices).unwrap_err() {
            Error::Node {
                m_index,
                tau_index,
                source,
            } => {
                assert_eq!((m_index, tau_index), (4, 9));
                assert!(matches!(*source, Error::Domain(_)));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sabr_lognormal_limit_is_constant() {
        let p = SabrParams {
            f0: 1.0,
            alpha: 0.25,
            beta: 1.0,
            rho: 0.0,
            gamma: 1e-9,
        };
        let s = sample_sabr_surface(&p, &grid()).unwrap();
        assert!(s.values().iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn sabr_negative_rho_skews_left() {
        let p = SabrParams {
            f0: 1.0,
            alpha: 0.3,
            beta: 1.0,
            rho: -0.5,
            gamma: 0.5,
        };
        let g = Arc::new(GridSpec::uniform(21, -0.1, 0.1, 5, 0.1, 0.6).unwrap());
        let s = sample_sabr_surface(&p, &g).unwrap();
        assert!(s.at(0, 0) > s.at(20, 0));
    }

    #[test]
    fn sabr_smile_continuous_through_the_money() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = SabrBox::default();
        for _ in 0..50 {
            let p = b.sample(&mut rng);
            let atm = sabr_implied_vol(&p, 1.0, 0.3).unwrap();
            for k in [1.0 + 1e-9, 1.0 - 1e-9, 1.0 + 1e-6, 1.0 - 1e-6] {
                let v = crate::pricing::sabr_implied_vol_general(&p, k, 0.3);
                assert!((v - atm).abs() < 1e-5, "{p:?} K={k}");
            }
        }
    }

    #[test]
    fn small_dataset_is_labeled_and_free() {
        let cfg = SamplerConfig::with_counts(20, 20, 5);
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.surfaces.len(), 40);
        assert_eq!(ds.labels.len(), 40);
        assert!(ds.surfaces.iter().all(|s| audit(s).unwrap().is_free));
        assert_eq!(ds.stats.arbitrage_rejections, 0);
        let level = &ds.stats.features[0];
        assert_eq!(level.feature, Feature::Level);
        assert!(level.mean > 0.1 && level.mean < 0.5, "{level:?}");
        assert!(matches!(ds.params[0], ModelParams::Heston(_)));
        assert!(matches!(ds.params[39], ModelParams::Sabr(_)));
    }

    #[test]
    fn minimal_dataset() {
        let cfg = SamplerConfig::with_counts(0, 1, 1);
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.surfaces.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = crate::surfaces::read_surface_set(dir.path()).unwrap();
        assert_eq!(back.surfaces.len(), 1);
        assert!(dir.path().join(STATS_FILE).exists());
    }

    #[test]
    fn rejects_empty_config() {
        assert!(build_dataset(&SamplerConfig::with_counts(0, 0, 1)).is_err());
    }
}
