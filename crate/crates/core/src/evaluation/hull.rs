use minilp::{ComparisonOp, OptimizationDirection, Problem};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::linalg::HouseholderQr;

/// Convex hull of a labeled point set, tested by LP feasibility.
#[derive(Debug, Clone)]
pub struct LabelHull {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl LabelHull {
    /// Fails when the points do not span a full-dimensional set.
    pub fn new(labels: &[FeatureVector]) -> Result<Self> {
        let points: Vec<Vec<f64>> = labels.iter().map(|l| l.values().to_vec()).collect();
        Self::from_points(points)
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidInput("hull points must share a positive dimension".into()));
        }
        if points.len() <= dim {
            return Err(Error::Domain(format!(
                "degenerate hull: {} points cannot span {dim} dimensions",
                points.len()
            )));
        }
        let n = points.len();
        let mut centered = vec![0.0; n * dim];
        for c in 0..dim {
            let mean = points.iter().map(|p| p[c]).sum::<f64>() / n as f64;
            let scale = points.iter().map(|p| (p[c] - mean).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            for (r, p) in points.iter().enumerate() {
                centered[c * n + r] = (p[c] - mean) / scale;
            }
        }
        let dependent = HouseholderQr::new(&centered, n, dim).dependent_columns(1e-10);
        if !dependent.is_empty() {
            return Err(Error::Domain(format!(
                "degenerate hull: label coordinates {dependent:?} are affinely dependent"
            )));
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether `query` is a convex combination of the hull's points.
    pub fn contains(&self, query: &[f64]) -> Result<bool> {
        if query.len() != self.dim {
            return Err(Error::Shape {
                what: "hull query",
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = self.points.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
        for c in 0..self.dim {
            let row: Vec<_> = vars.iter().zip(&self.points).map(|(&v, p)| (v, p[c])).collect();
            lp.add_constraint(&row, ComparisonOp::Eq, query[c]);
        }
        let ones: Vec<_> = vars.iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(&ones, ComparisonOp::Eq, 1.0);
        match lp.solve() {
            Ok(_) => Ok(true),
            Err(minilp::Error::Infeasible) => Ok(false),
            Err(e) => Err(Error::Numerical(format!("hull LP: {e}"))),
        }
    }
}

/// Membership of `query` in the convex hull of `labels`.
pub fn hull_membership(labels: &[FeatureVector], query: &FeatureVector) -> Result<bool> {
    if let Some(first) = labels.first() {
        if first.features() != query.features() {
            return Err(Error::FeatureMismatch {
                expected: first.names(),
                actual: query.names(),
            });
        }
    }
    LabelHull::new(labels)?.contains(query.values())
}
