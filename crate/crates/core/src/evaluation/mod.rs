//! Experiment protocols over a trained model: control-error statistics,
//! latent and feature traversals, correlations, and violation census with
//! repair.
//!
//! Every sampled experiment draws case `k` from stream `k` of a ChaCha8
//! generator seeded with the experiment seed, so reports do not depend on
//! the rayon thread count.

mod hull;
pub mod plots;

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arbitrage::ArbitrageChecker;
use crate::cvae::CvaeModel;
use crate::error::{Error, Result};
use crate::features::{AnchorRegression, Feature, FeatureVector};
use crate::repair::{repair_surface, RepairConfig, StopReason};

pub use hull::{hull_membership, LabelHull};

pub const HISTOGRAM_BINS: usize = 25;
pub const HISTOGRAM_MIN: f64 = -6.0;
pub const HISTOGRAM_MAX: f64 = 0.0;

/// Fixed-bin histogram of `log10|e|`. Values below the range (including
/// exact zeros) land in the first bin, values above it in the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn log10_abs(errors: &[f64]) -> Self {
        let mut h = Histogram {
            min: HISTOGRAM_MIN,
            max: HISTOGRAM_MAX,
            counts: vec![0; HISTOGRAM_BINS],
            below: 0,
            above: 0,
        };
        let width = (HISTOGRAM_MAX - HISTOGRAM_MIN) / HISTOGRAM_BINS as f64;
        for e in errors {
            let l = e.abs().log10();
            let bin = if l.is_nan() || l < HISTOGRAM_MIN {
                h.below += 1;
                0
            } else if l >= HISTOGRAM_MAX {
                h.above += 1;
                HISTOGRAM_BINS - 1
            } else {
                (((l - HISTOGRAM_MIN) / width) as usize).min(HISTOGRAM_BINS - 1)
            };
            h.counts[bin] += 1;
        }
        h
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let width = (self.max - self.min) / self.counts.len() as f64;
        (0..=self.counts.len()).map(|k| self.min + k as f64 * width).collect()
    }
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            what: "pearson",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("pearson needs at least two points".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("pearson correlation undefined for zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Linear-interpolated quantile of unsorted data; `None` when empty.
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

/// How conditioning vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum YRegime {
    /// Dirichlet(1) mixture of `d + 1` random dataset labels.
    InHull,
    /// Uniform over the label bounding box, each side widened by
    /// `widen × (max − min)`.
    ExtendedBox { widen: f64 },
}

impl YRegime {
    pub fn extended() -> Self {
        YRegime::ExtendedBox { widen: 0.2 }
    }
}

/// How latent vectors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZRegime {
    /// Standard normal truncated coordinatewise to `[−bound, bound]`.
    Central { bound: f64 },
    FullPrior,
    /// `scale · ε`, clipped coordinatewise to `[−bound, bound]`.
    Tail { scale: f64, bound: f64 },
}

impl ZRegime {
    pub fn central() -> Self {
        ZRegime::Central { bound: 3.0 }
    }

    pub fn tail() -> Self {
        ZRegime::Tail {
            scale: 2.0,
            bound: 6.0,
        }
    }

    pub fn sample(&self, d_z: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..d_z)
            .map(|_| match *self {
                ZRegime::Central { bound } => loop {
                    let e: f64 = rng.sample(StandardNormal);
                    if e.abs() <= bound {
                        break e;
                    }
                },
                ZRegime::FullPrior => rng.sample(StandardNormal),
                ZRegime::Tail { scale, bound } => {
                    (scale * rng.sample::<f64, _>(StandardNormal)).clamp(-bound, bound)
                }
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ZRegime::Central { bound } => bound > 0.0,
            ZRegime::FullPrior => true,
            ZRegime::Tail { scale, bound } => scale > 0.0 && bound > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("bad latent regime {self:?}")))
        }
    }
}

/// Draws conditioning vectors for one model's feature set.
#[derive(Debug, Clone)]
pub struct YSampler {
    features: Vec<Feature>,
    labels: Vec<Vec<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    regime: YRegime,
}

impl YSampler {
    pub fn new(regime: YRegime, labels: &[FeatureVector], features: &[Feature]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("no labels to sample conditions from".into()));
        }
        let labels: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| l.select(features).map(|s| s.values().to_vec()))
            .collect::<Result<_>>()?;
        let d = features.len();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for l in &labels {
            for c in 0..d {
                lower[c] = lower[c].min(l[c]);
                upper[c] = upper[c].max(l[c]);
            }
        }
        if let YRegime::ExtendedBox { widen } = regime {
            if !(widen >= 0.0) {
                return Err(Error::InvalidInput(format!("widen must be non-negative, got {widen}")));
            }
            for c in 0..d {
                let pad = widen * (upper[c] - lower[c]);
                lower[c] -= pad;
                upper[c] += pad;
            }
        }
        Ok(Self {
            features: features.to_vec(),
            labels,
            lower,
            upper,
            regime,
        })
    }

    pub fn regime(&self) -> YRegime {
        self.regime
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> FeatureVector {
        let d = self.features.len();
        let values = match self.regime {
            YRegime::InHull => {
                let mut acc = vec![0.0; d];
                let mut total = 0.0;
                for _ in 0..=d {
                    let w: f64 = rng.sample(Exp1);
                    let l = &self.labels[rng.random_range(0..self.labels.len())];
                    for (a, v) in acc.iter_mut().zip(l) {
                        *a += w * v;
                    }
                    total += w;
                }
                acc.iter().map(|a| a / total).collect()
            }
            YRegime::ExtendedBox { .. } => (0..d)
                .map(|c| {
                    if self.upper[c] > self.lower[c] {
                        rng.random_range(self.lower[c]..=self.upper[c])
                    } else {
                        self.lower[c]
                    }
                })
                .collect(),
        };
        FeatureVector::new(self.features.clone(), values).expect("sampler feature set")
    }
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Errors for one controlled feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureErrors {
    pub feature: Feature,
    /// `extracted − given`, one per case.
    pub errors: Vec<f64>,
    pub median_abs: Option<f64>,
    pub p90_abs: Option<f64>,
    pub max_abs: Option<f64>,
    pub histogram: Histogram,
}

impl FeatureErrors {
    fn new(feature: Feature, errors: Vec<f64>) -> Self {
        let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        Self {
            feature,
            median_abs: quantile(&abs, 0.5),
            p90_abs: quantile(&abs, 0.9),
            max_abs: abs.iter().copied().reduce(f64::max),
            histogram: Histogram::log10_abs(&errors),
            errors,
        }
    }
}

/// Which input a traversal sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Varied {
    Latent(usize),
    Feature(Feature),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalRow {
    pub value: f64,
    /// All four features of the decoded surface, in [`Feature::ALL`] order.
    pub extracted: Vec<f64>,
    pub arbitrage_free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalTable {
    pub varied: Varied,
    pub base_y: FeatureVector,
    pub base_z: Vec<f64>,
    pub features: Vec<Feature>,
    pub rows: Vec<TraversalRow>,
    /// Decoded volatilities per row.
    #[serde(skip)]
    pub surfaces: Vec<Vec<f64>>,
}

impl TraversalTable {
    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    pub fn column(&self, feature: Feature) -> Vec<f64> {
        let k = Feature::ALL.iter().position(|f| *f == feature).expect("known feature");
        self.rows.iter().map(|r| r.extracted[k]).collect()
    }

    /// `max − min` of each extracted feature across rows.
    pub fn spread(&self) -> Vec<(Feature, f64)> {
        Feature::ALL
            .iter()
            .map(|&f| {
                let c = self.column(f);
                let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (f, if c.is_empty() { 0.0 } else { hi - lo })
            })
            .collect()
    }
}

/// Decodes `base` with one coordinate replaced by each of `values`.
pub fn traversal(
    model: &CvaeModel,
    varied: Varied,
    values: &[f64],
    base_y: &FeatureVector,
    base_z: &[f64],
) -> Result<TraversalTable> {
    let y_index = match varied {
        Varied::Latent(i) if i >= model.d_z() => {
            return Err(Error::InvalidInput(format!(
                "latent coordinate {i} out of range for d_z = {}",
                model.d_z()
            )))
        }
        Varied::Latent(_) => None,
        Varied::Feature(f) => Some(base_y.features().iter().position(|g| *g == f).ok_or_else(|| {
            Error::InvalidInput(format!("feature {f} is not a model condition"))
        })?),
    };
    let regression = AnchorRegression::for_grid(Arc::clone(model.grid()))?;
    let checker = ArbitrageChecker::new(Arc::clone(model.grid()));
    let mut rows = Vec::with_capacity(values.len());
    let mut surfaces = Vec::with_capacity(values.len());
    for &v in values {
        let mut y = base_y.values().to_vec();
        let mut z = base_z.to_vec();
        match (varied, y_index) {
            (Varied::Latent(i), _) => z[i] = v,
            (_, Some(k)) => y[k] = v,
            _ => unreachable!(),
        }
        let y = FeatureVector::new(base_y.features().to_vec(), y)?;
        let sigma = model.decode_values(&y, &z)?;
        let extracted = regression.features_from_values(&sigma, &Feature::ALL)?;
        let arbitrage_free = checker.audit_values(&sigma).map(|r| r.is_free).unwrap_or(false);
        rows.push(TraversalRow {
            value: v,
            extracted,
            arbitrage_free,
        });
        surfaces.push(sigma);
    }
    Ok(TraversalTable {
        varied,
        base_y: base_y.clone(),
        base_z: base_z.to_vec(),
        features: Feature::ALL.to_vec(),
        rows,
        surfaces,
    })
}

/// Pearson coefficient of one latent coordinate against one extracted feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCorrelation {
    pub latent: usize,
    pub feature: Feature,
    /// `None` when the feature did not move.
    pub r: Option<f64>,
}

/// Sweeps every latent coordinate over `values` at fixed `y` (other
/// coordinates 0) and correlates it with each extracted feature.
pub fn latent_correlations(
    model: &CvaeModel,
    y: &FeatureVector,
    values: &[f64],
) -> Result<(Vec<TraversalTable>, Vec<LatentCorrelation>)> {
    let zero = vec![0.0; model.d_z()];
    let mut tables = Vec::new();
    let mut out = Vec::new();
    for i in 0..model.d_z() {
        let t = traversal(model, Varied::Latent(i), values, y, &zero)?;
        for f in Feature::ALL {
            out.push(LatentCorrelation {
                latent: i,
                feature: f,
                r: pearson(values, &t.column(f)).ok(),
            });
        }
        tables.push(t);
    }
    Ok((tables, out))
}

/// Outcome tallies of a census. `valid + violations = total` and
/// `repaired + unrepaired = violations`; decodes with non-positive
/// volatilities count as violations that cannot be repaired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusCounts {
    pub total: usize,
    pub valid: usize,
    pub violations: usize,
    pub calendar_violations: usize,
    pub butterfly_violations: usize,
    pub invalid: usize,
    pub repaired: usize,
    pub unrepaired: usize,
    /// Violations whose `L_cal + L_bf` strictly decreased.
    pub penalty_decreased: usize,
}

impl CensusCounts {
    pub fn violation_fraction(&self) -> f64 {
        ratio(self.violations, self.total)
    }

    pub fn repaired_fraction(&self) -> f64 {
        ratio(self.repaired, self.violations)
    }

    pub fn is_consistent(&self) -> bool {
        self.valid + self.violations == self.total
            && self.repaired + self.unrepaired == self.violations
            && self.invalid <= self.unrepaired
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// One violating case of a census.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusCase {
    pub index: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub penalty_before: f64,
    pub penalty_after: Option<f64>,
    pub repaired: bool,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub feature_drift: Vec<f64>,
    pub z_optimized: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub model_fingerprint: String,
    pub features: Vec<Feature>,
    pub n: usize,
    pub y_regime: Option<YRegime>,
    pub z_regime: Option<ZRegime>,
    pub errors: Vec<FeatureErrors>,
    /// Cases whose decoded surface had a non-positive volatility.
    pub non_positive_decodes: usize,
    pub traversals: Vec<TraversalTable>,
    pub correlations: Vec<LatentCorrelation>,
    pub census: Option<CensusCounts>,
    pub cases: Vec<CensusCase>,
    pub seconds: f64,
}

impl ExperimentReport {
    /// A report with no results yet, stamped with the model fingerprint.
    pub fn new(experiment: &str, model: &CvaeModel, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            seed,
            model_fingerprint: model.fingerprint(),
            features: model.features().to_vec(),
            n: 0,
            y_regime: None,
            z_regime: None,
            errors: Vec::new(),
            non_positive_decodes: 0,
            traversals: Vec::new(),
            correlations: Vec::new(),
            census: None,
            cases: Vec::new(),
            seconds: 0.0,
        }
    }

    pub fn feature_errors(&self, feature: Feature) -> Option<&FeatureErrors> {
        self.errors.iter().find(|e| e.feature == feature)
    }
}

/// Generates `n` surfaces and records `extracted − given` for every
/// controlled feature.
pub fn control_error_experiment(
    model: &CvaeModel,
    n: usize,
    y_sampler: &YSampler,
    z_regime: ZRegime,
    seed: u64,
) -> Result<ExperimentReport> {
    z_regime.validate()?;
    if y_sampler.features != model.features() {
        return Err(Error::FeatureMismatch {
            expected: model.features().iter().map(|f| f.to_string()).collect(),
            actual: y_sampler.features.iter().map(|f| f.to_string()).collect(),
        });
    }
    let start = Instant::now();
    let regression = AnchorRegression::for_grid(Arc::clone(model.grid()))?;
    let cases: Vec<(Vec<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = case_rng(seed, k);
            let y = y_sampler.sample(&mut rng);
            let z = z_regime.sample(model.d_z(), &mut rng);
            let sigma = model.decode_values(&y, &z)?;
            let got = regression.features_from_values(&sigma, model.features())?;
            let e = got.iter().zip(y.values()).map(|(g, v)| g - v).collect();
            Ok((e, sigma.iter().all(|s| *s > 0.0)))
        })
        .collect::<Result<_>>()?;

    let mut report = ExperimentReport::new("control", model, seed);
    report.n = n;
    report.y_regime = Some(y_sampler.regime());
    report.z_regime = Some(z_regime);
    report.non_positive_decodes = cases.iter().filter(|(_, ok)| !ok).count();
    report.errors = model
        .features()
        .iter()
        .enumerate()
        .map(|(c, &f)| FeatureErrors::new(f, cases.iter().map(|(e, _)| e[c]).collect()))
        .collect();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Generates `n` surfaces, audits each, and repairs the violators when
/// `repair` is given.
pub fn violation_census(
    model: &CvaeModel,
    n: usize,
    y_sampler: &YSampler,
    z_regime: ZRegime,
    seed: u64,
    repair: Option<&RepairConfig>,
) -> Result<ExperimentReport> {
    z_regime.validate()?;
    if let Some(cfg) = repair {
        cfg.validate()?;
    }
    let start = Instant::now();
    let checker = ArbitrageChecker::new(Arc::clone(model.grid()));
    let outcomes: Vec<Option<(CensusCase, bool, bool)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = case_rng(seed, k);
            let y = y_sampler.sample(&mut rng);
            let z = z_regime.sample(model.d_z(), &mut rng);
            let sigma = model.decode_values(&y, &z)?;
            let mut case = CensusCase {
                index: k,
                y: y.values().to_vec(),
                z: z.clone(),
                penalty_before: f64::INFINITY,
                penalty_after: None,
                repaired: false,
                iterations: 0,
                stop: None,
                feature_drift: Vec::new(),
                z_optimized: None,
            };
            let Ok(report) = checker.audit_values(&sigma) else {
                return Ok(Some((case, false, false)));
            };
            if report.is_free {
                return Ok(None);
            }
            let (cal, bf) = (!report.calendar_violations.is_empty(), !report.butterfly_violations.is_empty());
            case.penalty_before = report.l_calendar + report.l_butterfly;
            if let Some(cfg) = repair {
                let r = repair_surface(model, &y, &z, cfg)?;
                case.penalty_after = Some(r.after.l_calendar + r.after.l_butterfly);
                case.repaired = r.repaired;
                case.iterations = r.iterations;
                case.stop = Some(r.stop);
                case.feature_drift = r.feature_drift;
                case.z_optimized = Some(r.z_optimized);
            }
            Ok(Some((case, cal, bf)))
        })
        .collect::<Result<_>>()?;

    let cases: Vec<(CensusCase, bool, bool)> = outcomes.into_iter().flatten().collect();
    let violations = cases.len();
    let repaired = cases.iter().filter(|(c, _, _)| c.repaired).count();
    let counts = CensusCounts {
        total: n,
        valid: n - violations,
        violations,
        calendar_violations: cases.iter().filter(|(_, cal, _)| *cal).count(),
        butterfly_violations: cases.iter().filter(|(_, _, bf)| *bf).count(),
        invalid: cases.iter().filter(|(c, _, _)| c.penalty_before.is_infinite()).count(),
        repaired,
        unrepaired: violations - repaired,
        penalty_decreased: cases
            .iter()
            .filter(|(c, _, _)| c.penalty_after.is_some_and(|a| a < c.penalty_before))
            .count(),
    };
    debug_assert!(counts.is_consistent());

    let mut report = ExperimentReport::new("census", model, seed);
    report.n = n;
    report.y_regime = Some(y_sampler.regime());
    report.z_regime = Some(z_regime);
    report.non_positive_decodes = counts.invalid;
    report.census = Some(counts);
    report.cases = cases.into_iter().map(|(c, _, _)| c).collect();
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::Architecture;
    use crate::surfaces::{GridSpec, IVSurface};
    use proptest::prelude::*;

    fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    #[test]
    fn pearson_hand_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&a, &[1.0; 4]), Err(Error::Domain(_))));
        assert!(pearson(&[1.0], &[2.0]).is_err());
        assert!(pearson(&a, &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_matches_brute_force(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(r) = pearson(&a, &b) {
                prop_assert!((r - brute_pearson(&a, &b)).abs() < 1e-12);
            }
        }

        #[test]
        fn histogram_totals_equal_n(v in prop::collection::vec(prop_oneof![Just(0.0), -1e3f64..1e3, -1e-8f64..1e-8], 0..200)) {
            let h = Histogram::log10_abs(&v);
            prop_assert_eq!(h.total(), v.len());
            prop_assert!(h.below + h.above <= v.len());
        }
    }

    #[test]
    fn histogram_binning() {
        let h = Histogram::log10_abs(&[1e-7, 0.0, 1e-6, 1e-3, -1e-3, 0.9, 2.0]);
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.below, 2);
        // log10(1e-3) = -3 sits on the edge between bins 12 and 13
        assert_eq!(h.counts[12] + h.counts[13], 2);
        assert_eq!(h.counts[24], 2);
        assert_eq!(h.above, 1);
        assert_eq!(h.bin_edges().len(), 26);
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[0.0, 10.0], 0.9), Some(9.0));
    }

    fn toy() -> (CvaeModel, Vec<FeatureVector>) {
        let grid = Arc::new(GridSpec::default());
        let features = vec![Feature::Level, Feature::Slope];
        let mut surfaces = Vec::new();
        let mut labels = Vec::new();
        for k in 0..12 {
            let a = 0.15 + 0.02 * k as f64;
            let b = -0.1 + 0.03 * ((k * 7) % 5) as f64;
            let s = IVSurface::from_fn(Arc::clone(&grid), |m, _| a + b * m).unwrap();
            labels.push(FeatureVector::new(features.clone(), vec![a, b]).unwrap());
            surfaces.push(s);
        }
        let arch = Architecture {
            d_z: 2,
            encoder_hidden: vec![8, 6],
            decoder_hidden: vec![6, 8],
            output_basis: Some(3),
        };
        (CvaeModel::new(arch, 1.0, &surfaces, &labels, 3).unwrap(), labels)
    }

    #[test]
    fn samplers_respect_their_regions() {
        let (_, labels) = toy();
        let hull = LabelHull::new(&labels).unwrap();
        let inside = YSampler::new(YRegime::InHull, &labels, &[Feature::Level, Feature::Slope]).unwrap();
        let boxed = YSampler::new(YRegime::extended(), &labels, &[Feature::Level, Feature::Slope]).unwrap();
        let (lo, hi) = boxed.bounds();
        assert!((lo[0] - (0.15 - 0.2 * 0.22)).abs() < 1e-12 && (hi[0] - (0.37 + 0.2 * 0.22)).abs() < 1e-12);
        let mut rng = case_rng(1, 0);
        let mut outside = 0;
        for _ in 0..200 {
            assert!(hull.contains(inside.sample(&mut rng).values()).unwrap());
            let y = boxed.sample(&mut rng);
            assert!(y.values().iter().zip(lo).zip(hi).all(|((v, l), h)| l <= v && v <= h));
            outside += !hull.contains(y.values()).unwrap() as usize;
        }
        assert!(outside > 0);
        for regime in [ZRegime::central(), ZRegime::tail()] {
            let bound = match regime {
                ZRegime::Central { bound } | ZRegime::Tail { bound, .. } => bound,
                ZRegime::FullPrior => unreachable!(),
            };
            for _ in 0..500 {
                assert!(regime.sample(4, &mut rng).iter().all(|z| z.abs() <= bound));
            }
        }
    }

    #[test]
    fn empty_experiments_are_well_formed() {
        let (model, labels) = toy();
        let ys = YSampler::new(YRegime::InHull, &labels, model.features()).unwrap();
        let r = control_error_experiment(&model, 0, &ys, ZRegime::central(), 1).unwrap();
        assert_eq!(r.n, 0);
        for e in &r.errors {
            assert!(e.errors.is_empty() && e.median_abs.is_none() && e.histogram.total() == 0);
        }
        let c = violation_census(&model, 0, &ys, ZRegime::FullPrior, 1, None).unwrap();
        assert_eq!(c.census.unwrap().total, 0);
        let t = traversal(&model, Varied::Latent(0), &[], &model.mean_features().unwrap(), &[0.0, 0.0]).unwrap();
        assert!(t.rows.is_empty());
        assert!(t.spread().iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn experiments_are_deterministic_and_consistent() {
        let (model, labels) = toy();
        let ys = YSampler::new(YRegime::extended(), &labels, model.features()).unwrap();
        let a = control_error_experiment(&model, 40, &ys, ZRegime::FullPrior, 9).unwrap();
        let b = control_error_experiment(&model, 40, &ys, ZRegime::FullPrior, 9).unwrap();
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.errors[0].histogram.total(), 40);
        let cfg = RepairConfig {
            max_iters: 5,
            ..Default::default()
        };
        let c = violation_census(&model, 30, &ys, ZRegime::tail(), 2, Some(&cfg)).unwrap();
        let counts = c.census.clone().unwrap();
        assert!(counts.is_consistent(), "{counts:?}");
        assert_eq!(c.cases.len(), counts.violations);
        let d = violation_census(&model, 30, &ys, ZRegime::tail(), 2, Some(&cfg)).unwrap();
        assert_eq!(c.cases, d.cases);
    }

    #[test]
    fn traversal_moves_only_the_varied_coordinate() {
        let (model, _) = toy();
        let y = model.mean_features().unwrap();
        let t = traversal(&model, Varied::Feature(Feature::Level), &[0.2, 0.3], &y, &[0.5, -0.5]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.surfaces[1], model.decode_values(
            &FeatureVector::new(y.features().to_vec(), vec![0.3, y.values()[1]]).unwrap(),
            &[0.5, -0.5],
        ).unwrap());
        assert!(traversal(&model, Varied::Latent(2), &[0.0], &y, &[0.0, 0.0]).is_err());
        assert!(traversal(&model, Varied::Feature(Feature::Curvature), &[0.0], &y, &[0.0, 0.0]).is_err());
        let (tables, corr) = latent_correlations(&model, &y, &[-2.0, 0.0, 2.0]).unwrap();
        assert_eq!(tables.len(), 2);
        assert_eq!(corr.len(), 8);
    }
}
