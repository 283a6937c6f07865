use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-moneyness × maturity grid.
///
/// Both axes are strictly increasing and every maturity is positive. Grids
/// built with [`GridSpec::uniform`] are evenly spaced, but any valid
/// node set is accepted; derivative stencils elsewhere are spacing-aware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRaw", into = "GridRaw")]
pub struct GridSpec {
    m_values: Vec<f64>,
    tau_values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRaw {
    m_values: Vec<f64>,
    tau_values: Vec<f64>,
}

impl TryFrom<GridRaw> for GridSpec {
    type Error = Error;
    fn try_from(raw: GridRaw) -> Result<Self> {
        GridSpec::new(raw.m_values, raw.tau_values)
    }
}

impl From<GridSpec> for GridRaw {
    fn from(g: GridSpec) -> Self {
        GridRaw {
            m_values: g.m_values,
            tau_values: g.tau_values,
        }
    }
}

pub const DEFAULT_N: usize = 28;
pub const DEFAULT_M_RANGE: (f64, f64) = (-0.27, 0.27);
pub const DEFAULT_TAU_RANGE: (f64, f64) = (0.1, 0.6);
const MIN_POINTS: usize = 4;

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl GridSpec {
    /// Grid from explicit node lists.
    pub fn new(m_values: Vec<f64>, tau_values: Vec<f64>) -> Result<Self> {
        if m_values.len() < 3 || tau_values.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "grid needs at least 3 nodes per axis, got {} x {}",
                m_values.len(),
                tau_values.len()
            )));
        }
        if !strictly_increasing(&m_values) {
            return Err(Error::InvalidInput(
                "m values must be strictly increasing".into(),
            ));
        }
        if !strictly_increasing(&tau_values) {
            return Err(Error::InvalidInput(
                "tau values must be strictly increasing".into(),
            ));
        }
        if tau_values[0] <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "maturities must be positive, got {}",
                tau_values[0]
            )));
        }
        Ok(Self {
            m_values,
            tau_values,
        })
    }

    /// Uniform grid with both endpoints included.
    pub fn uniform(
        n_m: usize,
        m_min: f64,
        m_max: f64,
        n_tau: usize,
        tau_min: f64,
        tau_max: f64,
    ) -> Result<Self> {
        if n_m < MIN_POINTS || n_tau < MIN_POINTS {
            return Err(Error::InvalidInput(format!(
                "grid counts must be at least {MIN_POINTS}, got n_m={n_m}, n_tau={n_tau}"
            )));
        }
        if !(m_min < m_max) {
            return Err(Error::InvalidInput(format!(
                "need m_min < m_max, got {m_min} >= {m_max}"
            )));
        }
        if !(tau_min > 0.0) {
            return Err(Error::InvalidInput(format!(
                "tau_min must be positive, got {tau_min}"
            )));
        }
        if !(tau_min < tau_max) {
            return Err(Error::InvalidInput(format!(
                "need tau_min < tau_max, got {tau_min} >= {tau_max}"
            )));
        }
        Self::new(
            linspace(m_min, m_max, n_m),
            linspace(tau_min, tau_max, n_tau),
        )
    }

    pub fn m_values(&self) -> &[f64] {
        &self.m_values
    }

    pub fn tau_values(&self) -> &[f64] {
        &self.tau_values
    }

    pub fn n_m(&self) -> usize {
        self.m_values.len()
    }

    pub fn n_tau(&self) -> usize {
        self.tau_values.len()
    }

    /// Number of nodes, i.e. the flattened surface length.
    pub fn len(&self) -> usize {
        self.n_m() * self.n_tau()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, m_index: usize, tau_index: usize) -> usize {
        tau_index * self.n_m() + m_index
    }

    /// Inverse of [`flat_index`](Self::flat_index): returns `(m_index, tau_index)`.
    pub fn unflatten_index(&self, k: usize) -> (usize, usize) {
        (k % self.n_m(), k / self.n_m())
    }

    /// `(m, τ)` coordinates of every node in flattened order.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.tau_values
            .iter()
            .flat_map(move |&t| self.m_values.iter().map(move |&m| (m, t)))
    }
}

impl Default for GridSpec {
    /// 28 × 28 nodes over m ∈ [−0.27, 0.27], τ ∈ [0.1, 0.6].
    fn default() -> Self {
        Self::uniform(
            DEFAULT_N,
            DEFAULT_M_RANGE.0,
            DEFAULT_M_RANGE.1,
            DEFAULT_N,
            DEFAULT_TAU_RANGE.0,
            DEFAULT_TAU_RANGE.1,
        )
        .expect("default grid is valid")
    }
}

/// `n` evenly spaced points from `a` to `b`, endpoints exact.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|k| if k == n - 1 { b } else { a + step * k as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_model_input() {
        let g = GridSpec::default();
        assert_eq!(g.len(), 784);
        let dm = g.m_values()[1] - g.m_values()[0];
        let dt = g.tau_values()[1] - g.tau_values()[0];
        assert!((dm - 0.02).abs() < 1e-12);
        assert!((dt - 0.5 / 27.0).abs() < 1e-12);
        assert!((dt - 0.018519).abs() < 1e-6);
        assert_eq!(g.m_values()[0], -0.27);
        assert_eq!(g.m_values()[27], 0.27);
    }

    #[test]
    fn small_uniform_grid() {
        let g = GridSpec::uniform(4, 0.0, 1.0, 4, 1.0, 2.0).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in g.m_values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GridSpec::uniform(3, 0.0, 1.0, 4, 0.1, 1.0).is_err());
        assert!(GridSpec::uniform(4, 0.0, 1.0, 4, 0.0, 1.0).is_err());
        assert!(GridSpec::uniform(4, 0.0, 1.0, 4, -0.1, 1.0).is_err());
        assert!(GridSpec::uniform(4, 1.0, 0.0, 4, 0.1, 1.0).is_err());
        assert!(GridSpec::new(vec![0.0, 0.0, 1.0], vec![0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn flatten_is_a_bijection() {
        let g = GridSpec::uniform(5, -1.0, 1.0, 7, 0.1, 1.0).unwrap();
        let mut seen = vec![false; g.len()];
        for j in 0..g.n_tau() {
            for i in 0..g.n_m() {
                let k = g.flat_index(i, j);
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(g.unflatten_index(k), (i, j));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn serde_validates() {
        let bad = r#"{"m_values":[0.0,1.0,0.5],"tau_values":[0.1,0.2,0.3]}"#;
        assert!(serde_json::from_str::<GridSpec>(bad).is_err());
        let g = GridSpec::default();
        let back: GridSpec = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(g, back);
    }
}
