//! Shape features at the anchor point (τ → 0⁺, m = 0).
//!
//! A surface is regressed on monomials `τ^i m^j` by least squares; the
//! partial derivative of order `(i, j)` at the anchor is then
//! `Σ_{i,j} = i!·j!·β̂^{(i,j)}`. The grid starts at a positive maturity, so
//! these are extrapolations to τ = 0.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::HouseholderQr;
use crate::surfaces::{GridSpec, IVSurface};

/// One controllable shape feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Σ₀,₀: ATM short-end volatility.
    Level,
    /// Σ₀,₁: ∂σ/∂m.
    Slope,
    /// Σ₀,₂: ∂²σ/∂m².
    Curvature,
    /// Σ₁,₀: ∂σ/∂τ.
    TermSlope,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature::Level,
        Feature::Slope,
        Feature::Curvature,
        Feature::TermSlope,
    ];

    /// `(i, j)`: derivative order in τ and in m.
    pub fn exponents(self) -> (u32, u32) {
        match self {
            Feature::Level => (0, 0),
            Feature::Slope => (0, 1),
            Feature::Curvature => (0, 2),
            Feature::TermSlope => (1, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Level => "level",
            Feature::Slope => "slope",
            Feature::Curvature => "curvature",
            Feature::TermSlope => "term_slope",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "level" => Ok(Feature::Level),
            "slope" | "skew" => Ok(Feature::Slope),
            "curvature" => Ok(Feature::Curvature),
            "term" | "term_slope" => Ok(Feature::TermSlope),
            other => Err(Error::InvalidInput(format!("unknown feature {other:?}"))),
        }
    }
}

/// Parses a comma-separated feature list such as `level,slope,term`.
pub fn parse_feature_list(s: &str) -> Result<Vec<Feature>> {
    let out = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Feature>>>()?;
    if out.is_empty() {
        return Err(Error::InvalidInput("empty feature list".into()));
    }
    let mut sorted = out.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != out.len() {
        return Err(Error::InvalidInput(format!("duplicate feature in {s:?}")));
    }
    Ok(out)
}

/// Values for an ordered subset of [`Feature`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    features: Vec<Feature>,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(features: Vec<Feature>, values: Vec<f64>) -> Result<Self> {
        if features.len() != values.len() {
            return Err(Error::Shape {
                what: "feature values",
                expected: features.len(),
                actual: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {}", features[k])));
        }
        if let Some(k) = features.iter().position(|&f| f == Feature::Level) {
            if values[k] <= 0.0 {
                return Err(Error::Domain(format!(
                    "level must be positive, got {}",
                    values[k]
                )));
            }
        }
        Ok(Self { features, values })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.features
            .iter()
            .position(|&f| f == feature)
            .map(|k| self.values[k])
    }

    /// Restricts (and reorders) to `which`.
    pub fn select(&self, which: &[Feature]) -> Result<FeatureVector> {
        let values = which
            .iter()
            .map(|&f| {
                self.get(f).ok_or_else(|| Error::FeatureMismatch {
                    expected: which.iter().map(|f| f.name().into()).collect(),
                    actual: self.features.iter().map(|f| f.name().into()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureVector {
            features: which.to_vec(),
            values,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name().to_string()).collect()
    }
}

/// Monomial exponents `(i, j)` for `τ^i m^j`, plus fitted coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub exponents: Vec<(u32, u32)>,
    pub coefficients: Option<Vec<f64>>,
}

impl Default for RegressionBasis {
    /// `{1, m, m², m³, τ, τm, τ²}`.
    fn default() -> Self {
        Self::new(vec![(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (2, 0)])
    }
}

impl RegressionBasis {
    pub fn new(exponents: Vec<(u32, u32)>) -> Self {
        Self {
            exponents,
            coefficients: None,
        }
    }

    /// Fitted β̂ for `τ^i m^j`, if that monomial is in the basis.
    pub fn coefficient(&self, i: u32, j: u32) -> Option<f64> {
        let k = self.exponents.iter().position(|&e| e == (i, j))?;
        self.coefficients.as_ref().map(|c| c[k])
    }

    fn validate(&self) -> Result<()> {
        for f in Feature::ALL {
            if !self.exponents.contains(&f.exponents()) {
                let (i, j) = f.exponents();
                return Err(Error::InvalidInput(format!(
                    "basis lacks tau^{i} m^{j} needed for {f}"
                )));
            }
        }
        let mut sorted = self.exponents.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.exponents.len() {
            return Err(Error::InvalidInput("duplicate monomial in basis".into()));
        }
        Ok(())
    }
}

fn monomial_name((i, j): (u32, u32)) -> String {
    format!("tau^{i} m^{j}")
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Least-squares fit factorized once for a fixed grid and basis.
///
/// Every dataset surface shares a grid, so the QR is reused across calls.
#[derive(Debug, Clone)]
pub struct AnchorRegression {
    grid: Arc<GridSpec>,
    basis: RegressionBasis,
    qr: HouseholderQr,
}

impl AnchorRegression {
    pub fn new(grid: Arc<GridSpec>, basis: RegressionBasis) -> Result<Self> {
        basis.validate()?;
        let rows = grid.len();
        let cols = basis.exponents.len();
        if rows < cols {
            return Err(Error::InvalidInput(format!(
                "grid has {rows} nodes but basis has {cols} monomials"
            )));
        }
        let mut design = Vec::with_capacity(rows * cols);
        for &(i, j) in &basis.exponents {
            design.extend(
                grid.nodes()
                    .map(|(m, t)| t.powi(i as i32) * m.powi(j as i32)),
            );
        }
        let qr = HouseholderQr::new(&design, rows, cols);
        let dependent = qr.dependent_columns(1e-10);
        if !dependent.is_empty() {
            return Err(Error::RankDeficient {
                columns: dependent
                    .into_iter()
                    .map(|k| monomial_name(basis.exponents[k]))
                    .collect(),
            });
        }
        Ok(Self { grid, basis, qr })
    }

    /// Default basis on `grid`.
    pub fn for_grid(grid: Arc<GridSpec>) -> Result<Self> {
        Self::new(grid, RegressionBasis::default())
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// Coefficients β̂ in basis order for flattened surface values.
    pub fn fit_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.grid.len() {
            return Err(Error::Shape {
                what: "surface values",
                expected: self.grid.len(),
                actual: values.len(),
            });
        }
        Ok(self.qr.solve(values))
    }

    pub fn fit(&self, surface: &IVSurface) -> Result<RegressionBasis> {
        self.check_grid(surface)?;
        let coefficients = self.fit_values(surface.values())?;
        Ok(RegressionBasis {
            exponents: self.basis.exponents.clone(),
            coefficients: Some(coefficients),
        })
    }

    /// Features from raw flattened values (no positivity requirement).
    pub fn features_from_values(&self, values: &[f64], which: &[Feature]) -> Result<Vec<f64>> {
        let beta = self.fit_values(values)?;
        Ok(which
            .iter()
            .map(|f| {
                let (i, j) = f.exponents();
                let k = self
                    .basis
                    .exponents
                    .iter()
                    .position(|&e| e == (i, j))
                    .expect("validated basis contains every feature");
                factorial(i) * factorial(j) * beta[k]
            })
            .collect())
    }

    pub fn extract(&self, surface: &IVSurface, which: &[Feature]) -> Result<FeatureVector> {
        self.check_grid(surface)?;
        let values = self.features_from_values(surface.values(), which)?;
        FeatureVector::new(which.to_vec(), values)
    }

    fn check_grid(&self, surface: &IVSurface) -> Result<()> {
        if surface.grid().as_ref() != self.grid.as_ref() {
            return Err(Error::InvalidInput(
                "surface grid differs from regression grid".into(),
            ));
        }
        Ok(())
    }
}

/// One-shot least-squares fit of `surface` on `basis`.
pub fn fit_anchor_regression(
    surface: &IVSurface,
    basis: &RegressionBasis,
) -> Result<RegressionBasis> {
    AnchorRegression::new(
        Arc::clone(surface.grid()),
        RegressionBasis::new(basis.exponents.clone()),
    )?
    .fit(surface)
}

/// Extracts `which` with the default basis.
pub fn extract_features(surface: &IVSurface, which: &[Feature]) -> Result<FeatureVector> {
    AnchorRegression::for_grid(Arc::clone(surface.grid()))?.extract(surface, which)
}

/// `extract(generated) − given`, coordinate by coordinate.
pub fn feature_error(given: &FeatureVector, generated: &IVSurface) -> Result<Vec<f64>> {
    let got = extract_features(generated, given.features())?;
    Ok(got
        .values()
        .iter()
        .zip(given.values())
        .map(|(g, y)| g - y)
        .collect())
}

/// [`feature_error`] with a prebuilt regression.
pub fn feature_error_with(
    regression: &AnchorRegression,
    given: &FeatureVector,
    generated: &IVSurface,
) -> Result<Vec<f64>> {
    let got = regression.extract(generated, given.features())?;
    Ok(got
        .values()
        .iter()
        .zip(given.values())
        .map(|(g, y)| g - y)
        .collect())
}
