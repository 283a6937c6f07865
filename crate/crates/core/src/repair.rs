//! Latent-space repair of decoded surfaces: L-BFGS over `z` with `y` held
//! fixed, minimizing arbitrage penalties plus squared distance to the
//! original decoded surface.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::arbitrage::{ArbitrageChecker, ViolationReport};
use crate::cvae::CvaeModel;
use crate::error::{Error, Result};
use crate::features::{AnchorRegression, FeatureVector};
use crate::nn::{check_gradient, GradCheckConfig, GradCheckReport};
use crate::surfaces::IVSurface;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub calendar: f64,
    pub butterfly: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            calendar: 1.0,
            butterfly: 1.0,
            mse: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
    pub loss_change_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub weights: LossWeights,
    /// Wall-clock limit in seconds; the best iterate so far is returned when hit.
    pub time_budget: Option<f64>,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            memory: 10,
            grad_tol: 1e-6,
            loss_change_tol: 1e-10,
            c1: 1e-4,
            c2: 0.9,
            weights: LossWeights::default(),
            time_budget: None,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.grad_tol, self.loss_change_tol, self.c1, self.c2];
        if positive.iter().any(|v| !(*v > 0.0)) || self.c1 >= self.c2 || self.c2 >= 1.0 || self.memory == 0 {
            return Err(Error::InvalidInput(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AlreadyFree,
    GradientTolerance,
    LossChange,
    MaxIterations,
    LineSearchFailed,
    TimeBudget,
    NonFiniteStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// Objective after each accepted iteration, starting with the initial value.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

#[derive(Clone)]
struct Point {
    a: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Cubic minimizer of the interpolant through two points, safeguarded to
/// the inner 80% of the bracket; bisection when it is unusable.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.a.min(hi.a), lo.a.max(hi.a));
    let margin = 0.1 * (b - a);
    let mid = 0.5 * (lo.a + hi.a);
    if !hi.f.is_finite() || !hi.slope.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (lo.a - hi.a);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (hi.a - lo.a).signum() * disc.sqrt();
    let t = hi.a - (hi.a - lo.a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    if t.is_finite() && t >= a + margin && t <= b - margin {
        t
    } else {
        mid
    }
}

enum Search {
    Wolfe(Point),
    /// Sufficient decrease without the curvature condition.
    Armijo(Point),
    Failed,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> LineSearch<'_, F> {
    const MAX_EVALS: usize = 40;

    fn eval(&mut self, a: f64) -> Point {
        self.evaluations += 1;
        let (f, g) = (self.f)(&axpy(self.x, a, self.d));
        let slope = if f.is_finite() { dot(&g, self.d) } else { f64::NAN };
        Point { a, f, g, slope }
    }

    fn armijo(&self, p: &Point) -> bool {
        p.f.is_finite() && p.f <= self.f0 + self.c1 * p.a * self.slope0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    fn run(&mut self, a_init: f64) -> Search {
        let start = Point {
            a: 0.0,
            f: self.f0,
            g: Vec::new(),
            slope: self.slope0,
        };
        let mut prev = start;
        let mut a = a_init;
        for i in 0..Self::MAX_EVALS {
            let p = self.eval(a);
            if !self.armijo(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Search::Wolfe(p);
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            prev = p;
            a *= 2.0;
        }
        Search::Armijo(prev)
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Search {
        while self.evaluations < Self::MAX_EVALS {
            if (hi.a - lo.a).abs() <= 1e-14 * lo.a.abs().max(hi.a.abs()).max(1e-300) {
                break;
            }
            let p = self.eval(interpolate(&lo, &hi));
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Search::Wolfe(p);
                }
                if p.slope * (hi.a - lo.a) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        if lo.a > 0.0 && lo.f < self.f0 {
            Search::Armijo(lo)
        } else {
            Search::Failed
        }
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search. `f` returns the value
/// and gradient; a non-finite value marks a point outside the domain.
pub fn lbfgs_minimize(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x0: &[f64], cfg: &RepairConfig) -> LbfgsOutcome {
    let started = Instant::now();
    let budget = cfg.time_budget.map(Duration::from_secs_f64);
    let (mut fx, mut g) = f(x0);
    let mut out = LbfgsOutcome {
        x: x0.to_vec(),
        f: fx,
        grad_norm: norm(&g),
        iterations: 0,
        evaluations: 1,
        converged: false,
        stop: StopReason::MaxIterations,
        trace: vec![fx],
    };
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        out.stop = StopReason::NonFiniteStart;
        return out;
    }
    if cfg.max_iters == 0 {
        return out;
    }
    if out.grad_norm < cfg.grad_tol {
        out.converged = true;
        out.stop = StopReason::GradientTolerance;
        return out;
    }
    let mut x = x0.to_vec();
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();

    while out.iterations < cfg.max_iters {
        // Two-loop recursion for d = −H·g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let a_init = if history.is_empty() { (1.0 / norm(&d)).min(1.0) } else { 1.0 };

        let mut ls = LineSearch {
            f: &mut f,
            x: &x,
            d: &d,
            f0: fx,
            slope0: slope,
            c1: cfg.c1,
            c2: cfg.c2,
            evaluations: 0,
        };
        let result = ls.run(a_init);
        out.evaluations += ls.evaluations;
        let p = match result {
            Search::Wolfe(p) | Search::Armijo(p) => p,
            Search::Failed => {
                out.stop = StopReason::LineSearchFailed;
                return out;
            }
        };
        let s: Vec<f64> = d.iter().map(|di| p.a * di).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        let df = fx - p.f;
        x = axpy(&x, 1.0, &s);
        fx = p.f;
        g = p.g;
        out.iterations += 1;
        out.x.clone_from(&x);
        out.f = fx;
        out.grad_norm = norm(&g);
        out.trace.push(fx);
        if out.grad_norm < cfg.grad_tol {
            out.converged = true;
            out.stop = StopReason::GradientTolerance;
            return out;
        }
        if df.abs() < cfg.loss_change_tol {
            out.converged = true;
            out.stop = StopReason::LossChange;
            return out;
        }
        if budget.is_some_and(|b| started.elapsed() >= b) {
            out.stop = StopReason::TimeBudget;
            return out;
        }
    }
    out
}

/// Repair objective and its gradient with respect to `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairLoss {
    pub total: f64,
    pub l_calendar: f64,
    pub l_butterfly: f64,
    pub mse: f64,
    pub grad: Vec<f64>,
}

/// `w_c·L_cal + w_b·L_bf + w_m·MSE` of `decode(y, z)` against `x_original`.
pub fn repair_loss(
    model: &CvaeModel,
    checker: &ArbitrageChecker,
    y: &FeatureVector,
    z: &[f64],
    x_original: &[f64],
    weights: &LossWeights,
) -> Result<RepairLoss> {
    if x_original.len() != model.grid().len() {
        return Err(Error::Shape {
            what: "original surface",
            expected: model.grid().len(),
            actual: x_original.len(),
        });
    }
    let (values, trace) = model.decode_traced(y, z)?;
    let pen = checker.penalties_with_weighted_grad(&values, weights.calendar, weights.butterfly)?;
    let n = values.len() as f64;
    let mse = values.iter().zip(x_original).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let grad_values: Vec<f64> = pen
        .grad
        .iter()
        .zip(values.iter().zip(x_original))
        .map(|(g, (a, b))| g + weights.mse * 2.0 * (a - b) / n)
        .collect();
    let grad = model.latent_gradient(&trace, &grad_values)?;
    Ok(RepairLoss {
        total: weights.calendar * pen.l_calendar + weights.butterfly * pen.l_butterfly + weights.mse * mse,
        l_calendar: pen.l_calendar,
        l_butterfly: pen.l_butterfly,
        mse,
        grad,
    })
}

/// Finite-difference check of the repair-loss gradient in `z`.
pub fn repair_gradient_check(
    model: &CvaeModel,
    y: &FeatureVector,
    z: &[f64],
    x_original: &[f64],
    weights: &LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let checker = ArbitrageChecker::new(model.grid().clone());
    let analytic = repair_loss(model, &checker, y, z, x_original, weights)?.grad;
    Ok(check_gradient(
        |zz| repair_loss(model, &checker, y, zz, x_original, weights).map_or(f64::NAN, |l| l.total),
        z,
        &analytic,
        cfg,
        |i| format!("z[{i}]"),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairResult {
    /// The conditioning features, passed through untouched.
    pub y: FeatureVector,
    pub z_initial: Vec<f64>,
    pub z_optimized: Vec<f64>,
    pub surface: IVSurface,
    pub before: ViolationReport,
    pub after: ViolationReport,
    pub features_before: FeatureVector,
    pub features_after: FeatureVector,
    /// `features_after − features_before`, per model feature.
    pub feature_drift: Vec<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub iterations: usize,
    pub converged: bool,
    pub repaired: bool,
    pub stop: StopReason,
}

/// Runs the latent repair for one `(y, z)`. Surfaces that already pass both
/// checks are returned unchanged with zero iterations.
pub fn repair_surface(model: &CvaeModel, y: &FeatureVector, z_initial: &[f64], cfg: &RepairConfig) -> Result<RepairResult> {
    cfg.validate()?;
    let checker = ArbitrageChecker::new(model.grid().clone());
    let regression = AnchorRegression::for_grid(model.grid().clone())?;
    let original = model.decode(y, z_initial)?;
    let before = checker.audit(&original)?;
    let features_before = regression.extract(&original, model.features())?;
    let penalty_before = before.l_calendar * cfg.weights.calendar + before.l_butterfly * cfg.weights.butterfly;

    if before.is_free {
        return Ok(RepairResult {
            y: y.clone(),
            z_initial: z_initial.to_vec(),
            z_optimized: z_initial.to_vec(),
            surface: original,
            after: before.clone(),
            before,
            features_after: features_before.clone(),
            feature_drift: vec![0.0; features_before.len()],
            features_before,
            loss_before: penalty_before,
            loss_after: penalty_before,
            iterations: 0,
            converged: true,
            repaired: true,
            stop: StopReason::AlreadyFree,
        });
    }

    let x0 = original.values().to_vec();
    let outcome = lbfgs_minimize(
        |z| match repair_loss(model, &checker, y, z, &x0, &cfg.weights) {
            Ok(l) => (l.total, l.grad),
            Err(_) => (f64::INFINITY, vec![0.0; z.len()]),
        },
        z_initial,
        cfg,
    );
    let surface = model.decode(y, &outcome.x)?;
    let after = checker.audit(&surface)?;
    let features_after = regression.extract(&surface, model.features())?;
    let feature_drift = features_after
        .values()
        .iter()
        .zip(features_before.values())
        .map(|(a, b)| a - b)
        .collect();
    Ok(RepairResult {
        y: y.clone(),
        z_initial: z_initial.to_vec(),
        z_optimized: outcome.x,
        repaired: after.is_free,
        surface,
        before,
        after,
        features_before,
        features_after,
        feature_drift,
        loss_before: penalty_before,
        loss_after: outcome.f,
        iterations: outcome.iterations,
        converged: outcome.converged,
        stop: outcome.stop,
    })
}
