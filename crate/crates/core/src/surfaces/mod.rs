//! Grid and surface types shared across the crate.
//!
//! Every surface is stored as a flat vector in the normative layout:
//! maturity outer, log-moneyness inner, so index `j * n_m + i` holds
//! `σ(m_i, τ_j)`. Checkpoints, dataset files and the HTTP API all use it.

mod grid;
mod io;

pub use grid::GridSpec;
pub use io::{
    read_surface_set, write_surface_set, SurfaceSet, DATA_FILE, FORMAT_VERSION, MANIFEST_FILE,
};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Implied volatilities on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct IVSurface {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl IVSurface {
    /// Wraps flattened values; every entry must be finite and positive.
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                what: "surface values",
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let (i, j) = grid.unflatten_index(k);
            return Err(Error::NonFinite(format!(
                "surface value at (m {i}, tau {j})"
            )));
        }
        if let Some(k) = values.iter().position(|&v| v <= 0.0) {
            let (i, j) = grid.unflatten_index(k);
            return Err(Error::Domain(format!(
                "non-positive implied volatility {} at (m {i}, tau {j})",
                values[k]
            )));
        }
        Ok(Self { grid, values })
    }

    /// Builds a surface by evaluating `f(m, tau)` at every node.
    pub fn from_fn(grid: Arc<GridSpec>, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for &tau in grid.tau_values() {
            for &m in grid.m_values() {
                values.push(f(m, tau));
            }
        }
        Self::new(grid, values)
    }

    /// Constant surface, mostly useful in tests.
    pub fn constant(grid: Arc<GridSpec>, sigma: f64) -> Result<Self> {
        Self::from_fn(grid, |_, _| sigma)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// Flattened values in the normative layout.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, m_index: usize, tau_index: usize) -> f64 {
        self.values[self.grid.flat_index(m_index, tau_index)]
    }

    /// Rows of the surface, one per maturity.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.grid.n_m())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Pointwise total implied variance `w = σ²τ`.
    pub fn total_variance(&self) -> TotalVarianceSurface {
        let n_m = self.grid.n_m();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, s)| s * s * self.grid.tau_values()[k / n_m])
            .collect();
        TotalVarianceSurface {
            grid: Arc::clone(&self.grid),
            values,
        }
    }
}

/// Total implied variance `w(m, τ) = σ²(m, τ)·τ`, same layout as [`IVSurface`].
#[derive(Debug, Clone, PartialEq)]
pub struct TotalVarianceSurface {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl TotalVarianceSurface {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, m_index: usize, tau_index: usize) -> f64 {
        self.values[self.grid.flat_index(m_index, tau_index)]
    }

    /// Recovers implied volatilities via `σ = sqrt(w/τ)`.
    pub fn to_implied_vol(&self) -> Result<IVSurface> {
        let n_m = self.grid.n_m();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, w)| (w / self.grid.tau_values()[k / n_m]).sqrt())
            .collect();
        IVSurface::new(Arc::clone(&self.grid), values)
    }
}

/// Free-function form of [`IVSurface::total_variance`].
pub fn total_variance(surface: &IVSurface) -> TotalVarianceSurface {
    surface.total_variance()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_grid() -> Arc<GridSpec> {
        Arc::new(GridSpec::default())
    }

    #[test]
    fn constant_surface_total_variance() {
        let s = IVSurface::constant(default_grid(), 0.2).unwrap();
        let w = s.total_variance();
        for (j, tau) in s.grid().tau_values().iter().enumerate() {
            for i in 0..s.grid().n_m() {
                assert_eq!(w.at(i, j), 0.2 * 0.2 * tau);
            }
        }
    }

    #[test]
    fn single_node_total_variance() {
        let grid = Arc::new(GridSpec::new(vec![-0.1, 0.0, 0.1], vec![0.25, 0.5, 0.75]).unwrap());
        let s = IVSurface::from_fn(Arc::clone(&grid), |m, t| {
            if m == 0.0 && t == 0.5 {
                0.3
            } else {
                0.2
            }
        })
        .unwrap();
        assert!((s.total_variance().at(1, 1) - 0.045).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_and_nan() {
        let grid = default_grid();
        let mut v = vec![0.2; grid.len()];
        v[17] = 0.0;
        assert!(matches!(
            IVSurface::new(Arc::clone(&grid), v.clone()),
            Err(Error::Domain(_))
        ));
        v[17] = f64::NAN;
        assert!(matches!(
            IVSurface::new(Arc::clone(&grid), v),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            IVSurface::new(grid, vec![0.2; 3]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn layout_is_tau_outer_m_inner() {
        let grid = default_grid();
        let s = IVSurface::from_fn(Arc::clone(&grid), |m, t| 1.0 + m + 10.0 * t).unwrap();
        let v = s.values();
        assert_eq!(v[1], 1.0 + grid.m_values()[1] + 10.0 * grid.tau_values()[0]);
        assert_eq!(
            v[grid.n_m()],
            1.0 + grid.m_values()[0] + 10.0 * grid.tau_values()[1]
        );
    }

    proptest! {
        #[test]
        fn total_variance_round_trip(vals in proptest::collection::vec(0.01f64..2.0, 784)) {
            let s = IVSurface::new(default_grid(), vals).unwrap();
            let back = s.total_variance().to_implied_vol().unwrap();
            for (a, b) in s.values().iter().zip(back.values()) {
                prop_assert!(((a - b) / a).abs() <= 1e-15);
            }
        }
    }
}
