//! Dense networks with a linear shortcut, reverse-mode gradients, Adam and
//! finite-difference gradient checking.
//!
//! A [`ShortcutNet`] is a stack of dense body layers whose output is summed
//! with a bias-free linear projection of the network input, followed by zero
//! or more identity-activation heads that all read the block output. All
//! parameters live in one flat buffer so optimizers, checkpoints and gradient
//! checks can treat them uniformly.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Relu,
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Identity,
        }
    }
}

/// Architecture of a [`ShortcutNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: usize,
    pub body: Vec<LayerSpec>,
    /// Adds a projection from the input to the last body layer's output.
    pub shortcut: bool,
    /// Widths of the identity heads. With no heads the block output is the
    /// network output.
    pub heads: Vec<usize>,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.body.iter().any(|l| l.width == 0) || self.heads.contains(&0) {
            return Err(Error::InvalidInput(format!("zero-width layer in {self:?}")));
        }
        if self.shortcut && self.body.is_empty() {
            return Err(Error::InvalidInput(
                "a shortcut needs at least one body layer".into(),
            ));
        }
        Ok(())
    }

    /// Width of the block output that the heads read.
    pub fn block_width(&self) -> usize {
        self.body.last().map_or(self.input, |l| l.width)
    }

    pub fn output_widths(&self) -> Vec<usize> {
        if self.heads.is_empty() {
            vec![self.block_width()]
        } else {
            self.heads.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    Body(usize),
    Projection,
    Head(usize),
}

/// Location of one dense map inside the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
struct Slot {
    kind: SlotKind,
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: Option<usize>,
    activation: Activation,
}

impl Slot {
    fn end(&self) -> usize {
        self.bias
            .map_or(self.weight + self.fan_in * self.fan_out, |b| {
                b + self.fan_out
            })
    }

    fn w<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &p[self.weight..self.weight + self.fan_out * self.fan_in],
        )
        .expect("slot layout")
    }

    fn b<'a>(&self, p: &'a [f64]) -> Option<ArrayView1<'a, f64>> {
        self.bias.map(|b| ArrayView1::from(&p[b..b + self.fan_out]))
    }

    fn w_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape(
            (self.fan_out, self.fan_in),
            &mut p[self.weight..self.weight + self.fan_out * self.fan_in],
        )
        .expect("slot layout")
    }

    fn b_mut<'a>(&self, p: &'a mut [f64]) -> Option<ArrayViewMut1<'a, f64>> {
        self.bias
            .map(|b| ArrayViewMut1::from(&mut p[b..b + self.fan_out]))
    }

    /// `x · Wᵀ + b`, activation applied.
    fn apply(&self, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w(p).t());
        if let Some(b) = self.b(p) {
            y += &b;
        }
        if self.activation == Activation::Relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        y
    }

    /// Accumulates parameter gradients for upstream `g` (already masked).
    fn accumulate(&self, grads: &mut [f64], g: &ArrayView2<f64>, x: &ArrayView2<f64>) {
        general_mat_mul(1.0, &g.t(), x, 1.0, &mut self.w_mut(grads));
        if let Some(mut db) = self.b_mut(grads) {
            db += &g.sum_axis(Axis(0));
        }
    }
}

/// Activations recorded by [`ShortcutNet::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    input: Array2<f64>,
    body: Vec<Array2<f64>>,
    block: Array2<f64>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Parameter and input gradients from one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ShortcutNet {
    spec: NetSpec,
    slots: Vec<Slot>,
    params: Vec<f64>,
    version: u64,
}

impl ShortcutNet {
    /// Zero-initialized network.
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |kind, fan_in, fan_out, bias: bool, activation| {
            let slot = Slot {
                kind,
                fan_in,
                fan_out,
                weight: offset,
                bias: bias.then_some(offset + fan_in * fan_out),
                activation,
            };
            offset = slot.end();
            slots.push(slot);
        };
        let mut width = spec.input;
        for (k, l) in spec.body.iter().enumerate() {
            push(SlotKind::Body(k), width, l.width, true, l.activation);
            width = l.width;
        }
        if spec.shortcut {
            push(
                SlotKind::Projection,
                spec.input,
                width,
                false,
                Activation::Identity,
            );
        }
        for (k, &h) in spec.heads.iter().enumerate() {
            push(SlotKind::Head(k), width, h, true, Activation::Identity);
        }
        Ok(Self {
            spec,
            slots,
            params: vec![0.0; offset],
            version: fresh_version(),
        })
    }

    /// He-uniform weights for ReLU layers, Xavier-uniform for the rest, zero biases.
    pub fn init(spec: NetSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let slots = net.slots.clone();
        let p = net.params_mut();
        for s in &slots {
            let limit = match s.activation {
                Activation::Relu => (6.0 / s.fan_in as f64).sqrt(),
                Activation::Identity => (6.0 / (s.fan_in + s.fan_out) as f64).sqrt(),
            };
            for w in s.w_mut(p).iter_mut() {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    /// Network with the given parameter buffer.
    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape {
                what: "parameter buffer",
                expected: net.params.len(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Invalidates every outstanding tape.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.params
    }

    /// Weight matrix (out × in) of body layer `k`.
    pub fn body_weights(&self, k: usize) -> ArrayView2<'_, f64> {
        self.slot(SlotKind::Body(k)).w(&self.params)
    }

    pub fn projection(&self) -> Option<ArrayView2<'_, f64>> {
        self.slots
            .iter()
            .find(|s| s.kind == SlotKind::Projection)
            .map(|s| s.w(&self.params))
    }

    fn slot(&self, kind: SlotKind) -> &Slot {
        self.slots
            .iter()
            .find(|s| s.kind == kind)
            .expect("slot exists")
    }

    /// Human-readable name of flat parameter `index`.
    pub fn param_name(&self, index: usize) -> String {
        let Some(s) = self.slots.iter().find(|s| index < s.end()) else {
            return format!("param[{index}] (out of range)");
        };
        let owner = match s.kind {
            SlotKind::Body(k) => format!("body[{k}]"),
            SlotKind::Projection => "projection".to_string(),
            SlotKind::Head(k) => format!("head[{k}]"),
        };
        match s.bias {
            Some(b) if index >= b => format!("{owner}.bias[{}]", index - b),
            _ => {
                let r = index - s.weight;
                format!("{owner}.weight[{},{}]", r / s.fan_in, r % s.fan_in)
            }
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input {
            return Err(Error::Shape {
                what: "network input width",
                expected: self.spec.input,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass over a batch (one row per sample) with a tape for backward.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, Tape)> {
        self.check_input(&x)?;
        let n_body = self.spec.body.len();
        let mut body: Vec<Array2<f64>> = Vec::with_capacity(n_body);
        for k in 0..n_body {
            let y = {
                let input = body.last().map_or(x.view(), |a| a.view());
                self.slot(SlotKind::Body(k)).apply(&self.params, &input)
            };
            body.push(y);
        }
        let mut block = body.last().map_or_else(|| x.to_owned(), Array2::clone);
        if self.spec.shortcut {
            let p = self.slot(SlotKind::Projection).w(&self.params);
            general_mat_mul(1.0, &x, &p.t(), 1.0, &mut block);
        }
        let outputs = self.heads(&block);
        let tape = Tape {
            version: self.version,
            input: x.to_owned(),
            body,
            block,
        };
        Ok((outputs, tape))
    }

    /// Forward pass without recording.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward(x)?.0)
    }

    fn heads(&self, block: &Array2<f64>) -> Vec<Array2<f64>> {
        if self.spec.heads.is_empty() {
            return vec![block.clone()];
        }
        (0..self.spec.heads.len())
            .map(|k| {
                self.slot(SlotKind::Head(k))
                    .apply(&self.params, &block.view())
            })
            .collect()
    }

    /// Reverse pass: gradients of `Σ ⟨output_grads[k], outputs[k]⟩`.
    pub fn backward(&self, tape: &Tape, output_grads: &[ArrayView2<f64>]) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.reverse(tape, output_grads, Some(&mut params))?;
        Ok(Gradients { params, input })
    }

    /// Reverse pass for the input gradient only.
    pub fn input_gradient(
        &self,
        tape: &Tape,
        output_grads: &[ArrayView2<f64>],
    ) -> Result<Array2<f64>> {
        self.reverse(tape, output_grads, None)
    }

    fn reverse(
        &self,
        tape: &Tape,
        output_grads: &[ArrayView2<f64>],
        mut grads: Option<&mut Vec<f64>>,
    ) -> Result<Array2<f64>> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                network: self.version,
            });
        }
        let widths = self.spec.output_widths();
        if output_grads.len() != widths.len() {
            return Err(Error::Shape {
                what: "output gradient count",
                expected: widths.len(),
                actual: output_grads.len(),
            });
        }
        let n = tape.batch_size();
        for (g, &w) in output_grads.iter().zip(&widths) {
            if g.dim() != (n, w) {
                return Err(Error::Shape {
                    what: "output gradient size",
                    expected: n * w,
                    actual: g.len(),
                });
            }
        }
        let p = &self.params;

        let mut g_block = if self.spec.heads.is_empty() {
            output_grads[0].to_owned()
        } else {
            let mut acc = Array2::zeros((n, self.spec.block_width()));
            for (k, g) in output_grads.iter().enumerate() {
                let s = self.slot(SlotKind::Head(k));
                if let Some(gr) = grads.as_deref_mut() {
                    s.accumulate(gr, g, &tape.block.view());
                }
                general_mat_mul(1.0, g, &s.w(p), 1.0, &mut acc);
            }
            acc
        };

        let mut g_input = Array2::zeros((n, self.spec.input));
        if self.spec.shortcut {
            let s = self.slot(SlotKind::Projection);
            if let Some(gr) = grads.as_deref_mut() {
                s.accumulate(gr, &g_block.view(), &tape.input.view());
            }
            general_mat_mul(1.0, &g_block, &s.w(p), 0.0, &mut g_input);
        }

        for k in (0..self.spec.body.len()).rev() {
            let s = self.slot(SlotKind::Body(k));
            if s.activation == Activation::Relu {
                g_block.zip_mut_with(&tape.body[k], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let x = if k == 0 {
                tape.input.view()
            } else {
                tape.body[k - 1].view()
            };
            if let Some(gr) = grads.as_deref_mut() {
                s.accumulate(gr, &g_block.view(), &x);
            }
            g_block = g_block.dot(&s.w(p));
        }
        g_input += &g_block;
        Ok(g_input)
    }

    /// One Adam update. Invalidates outstanding tapes.
    pub fn adam_step(&mut self, adam: &mut Adam, grads: &[f64]) -> Result<()> {
        adam.step(&mut self.params, grads)?;
        self.version = fresh_version();
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 3e-4;

    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                what: "Adam parameter count",
                expected: self.m.len(),
                actual: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor, relative to `max(1, |f|)`.
    pub floor: f64,
    /// Checks a random subset of this many coordinates when set.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
    name: impl Fn(usize) -> String,
) -> GradCheckReport {
    let indices: Vec<usize> = match cfg.max_coords {
        Some(k) if k < x.len() => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed), x.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };
    let floor = cfg.floor * f(x).abs().max(1.0);
    let mut work = x.to_vec();
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_name: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for &i in &indices {
        let x0 = work[i];
        work[i] = x0 + cfg.step;
        let fp = f(&work);
        work[i] = x0 - cfg.step;
        let fm = f(&work);
        work[i] = x0;
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.worst_name = name(report.worst_index);
    report.passed = report.max_rel_err < cfg.tolerance;
    report
}

/// Checks every parameter gradient of `net` for a scalar loss of its outputs.
/// `loss` returns the value and its gradient with respect to each output.
pub fn gradient_check<L>(
    net: &ShortcutNet,
    x: ArrayView2<f64>,
    loss: L,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: Fn(&[Array2<f64>]) -> (f64, Vec<Array2<f64>>),
{
    let (out, tape) = net.forward(x)?;
    let (_, g) = loss(&out);
    let views: Vec<_> = g.iter().map(|a| a.view()).collect();
    let analytic = net.backward(&tape, &views)?.params;
    Ok(gradient_check_with(net, x, &loss, &analytic, cfg))
}

/// Like [`gradient_check`] but against a caller-supplied analytic gradient.
pub fn gradient_check_with<L>(
    net: &ShortcutNet,
    x: ArrayView2<f64>,
    loss: L,
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    L: Fn(&[Array2<f64>]) -> (f64, Vec<Array2<f64>>),
{
    let mut probe = net.clone();
    check_gradient(
        |p| {
            probe.params_mut().copy_from_slice(p);
            loss(&probe.infer(x).expect("shape checked")).0
        },
        net.params(),
        analytic,
        cfg,
        |i| net.param_name(i),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand_distr::{Distribution, StandardNormal};

    fn half_sq(out: &[Array2<f64>]) -> (f64, Vec<Array2<f64>>) {
        let v = out
            .iter()
            .map(|o| 0.5 * o.iter().map(|x| x * x).sum::<f64>())
            .sum();
        (v, out.to_vec())
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn identity_layer_passes_through() {
        let spec = NetSpec {
            input: 3,
            body: vec![LayerSpec::identity(3)],
            shortcut: false,
            heads: vec![],
        };
        let mut net = ShortcutNet::zeros(spec).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        let x = array![[0.5, -2.0, 7.0]];
        assert_eq!(net.infer(x.view()).unwrap()[0], x);
    }

    #[test]
    fn relu_clamps_negatives() {
        let spec = NetSpec {
            input: 2,
            body: vec![LayerSpec::relu(2)],
            shortcut: false,
            heads: vec![],
        };
        let mut net = ShortcutNet::zeros(spec).unwrap();
        net.params_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            net.infer(array![[-1.0, 2.0]].view()).unwrap()[0],
            array![[0.0, 2.0]]
        );
    }

    #[test]
    fn zero_body_with_identity_projection_is_identity() {
        let spec = NetSpec {
            input: 4,
            body: vec![LayerSpec::relu(6), LayerSpec::relu(4)],
            shortcut: true,
            heads: vec![],
        };
        let mut net = ShortcutNet::zeros(spec).unwrap();
        let start = net.n_params() - 16;
        for i in 0..4 {
            net.params_mut()[start + i * 4 + i] = 1.0;
        }
        assert_eq!(net.projection().unwrap(), Array2::<f64>::eye(4));
        let x = array![[1.0, -2.0, 3.0, -4.0], [0.1, 0.2, 0.3, 0.4]];
        assert_eq!(net.infer(x.view()).unwrap()[0], x);
    }

    #[test]
    fn zero_projection_equals_plain_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let body = vec![LayerSpec::relu(5), LayerSpec::relu(4)];
        let with = ShortcutNet::init(
            NetSpec {
                input: 3,
                body: body.clone(),
                shortcut: true,
                heads: vec![2],
            },
            &mut rng,
        )
        .unwrap();
        let mut zeroed = with.clone();
        // Layout: body0, body1, projection (4×3), head.
        let proj = 3 * 5 + 5 + 5 * 4 + 4;
        zeroed.params_mut()[proj..proj + 12].fill(0.0);
        let mut plain_params = zeroed.params()[..proj].to_vec();
        plain_params.extend_from_slice(&zeroed.params()[proj + 12..]);
        let plain = ShortcutNet::from_params(
            NetSpec {
                input: 3,
                body,
                shortcut: false,
                heads: vec![2],
            },
            plain_params,
        )
        .unwrap();
        let x = randn(&mut rng, 6, 3);
        assert_eq!(
            zeroed.infer(x.view()).unwrap(),
            plain.infer(x.view()).unwrap()
        );
    }

    #[test]
    fn scalar_chain_rule() {
        let spec = NetSpec {
            input: 1,
            body: vec![LayerSpec::relu(1)],
            shortcut: false,
            heads: vec![],
        };
        let net = ShortcutNet::from_params(spec, vec![2.0, 1.0]).unwrap();
        let (out, tape) = net.forward(array![[1.0]].view()).unwrap();
        assert_eq!(out[0], array![[3.0]]);
        let g = net.backward(&tape, &[array![[1.0]].view()]).unwrap();
        assert_eq!(g.params, vec![1.0, 1.0]);
        assert_eq!(g.input, array![[2.0]]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let spec = NetSpec {
            input: 1,
            body: vec![LayerSpec::relu(1)],
            shortcut: false,
            heads: vec![],
        };
        let net = ShortcutNet::from_params(spec, vec![2.0, -2.0]).unwrap();
        let (out, tape) = net.forward(array![[1.0]].view()).unwrap();
        assert_eq!(out[0][[0, 0]], 0.0);
        let g = net.backward(&tape, &[array![[1.0]].view()]).unwrap();
        assert_eq!(g.params, vec![0.0, 0.0]);
        assert_eq!(g.input[[0, 0]], 0.0);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ShortcutNet::init(
            NetSpec {
                input: 2,
                body: vec![LayerSpec::relu(3)],
                shortcut: true,
                heads: vec![1],
            },
            &mut rng,
        )
        .unwrap();
        let (_, tape) = net.forward(array![[1.0, 2.0]].view()).unwrap();
        net.params_mut()[0] += 1.0;
        let err = net.backward(&tape, &[array![[1.0]].view()]).unwrap_err();
        assert!(matches!(err, Error::StaleTape { .. }));
    }

    #[test]
    fn shape_errors() {
        let net = ShortcutNet::zeros(NetSpec {
            input: 2,
            body: vec![LayerSpec::relu(3)],
            shortcut: false,
            heads: vec![2, 1],
        })
        .unwrap();
        assert!(net.forward(array![[1.0, 2.0, 3.0]].view()).is_err());
        let (_, tape) = net.forward(array![[1.0, 2.0]].view()).unwrap();
        assert!(net.backward(&tape, &[array![[1.0, 1.0]].view()]).is_err());
        assert!(net
            .backward(&tape, &[array![[1.0]].view(), array![[1.0]].view()])
            .is_err());
        assert!(ShortcutNet::zeros(NetSpec {
            input: 2,
            body: vec![],
            shortcut: true,
            heads: vec![],
        })
        .is_err());
    }

    #[test]
    fn random_three_layer_nets_match_finite_differences() {
        for seed in 0..12 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = NetSpec {
                input: 4 + seed as usize % 3,
                body: vec![LayerSpec::relu(7), LayerSpec::relu(6), LayerSpec::relu(5)],
                shortcut: seed % 2 == 0,
                heads: if seed % 3 == 0 { vec![] } else { vec![3, 2] },
            };
            let mut net = ShortcutNet::init(spec.clone(), &mut rng).unwrap();
            // Zero biases behind a dead layer put pre-activations exactly on the kink.
            for p in net.params_mut() {
                *p += 0.05 * rng.random_range(-1.0..1.0);
            }
            let x = randn(&mut rng, 3, spec.input);
            let r = gradient_check(&net, x.view(), half_sq, &GradCheckConfig::default()).unwrap();
            assert!(r.passed, "seed {seed}: {r:?}");
            assert_eq!(r.checked, net.n_params());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = ShortcutNet::init(
            NetSpec {
                input: 5,
                body: vec![LayerSpec::relu(8), LayerSpec::relu(8)],
                shortcut: true,
                heads: vec![4],
            },
            &mut rng,
        )
        .unwrap();
        let x = randn(&mut rng, 1, 5);
        let (out, tape) = net.forward(x.view()).unwrap();
        let analytic = net.input_gradient(&tape, &[out[0].view()]).unwrap();
        assert_eq!(
            analytic,
            net.backward(&tape, &[out[0].view()]).unwrap().input
        );
        let r = check_gradient(
            |v| {
                let xv = Array2::from_shape_vec((1, 5), v.to_vec()).unwrap();
                half_sq(&net.infer(xv.view()).unwrap()).0
            },
            x.as_slice().unwrap(),
            analytic.as_slice().unwrap(),
            &GradCheckConfig::default(),
            |i| format!("x[{i}]"),
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ShortcutNet::init(
            NetSpec {
                input: 3,
                body: vec![LayerSpec::relu(4), LayerSpec::relu(4)],
                shortcut: true,
                heads: vec![2],
            },
            &mut rng,
        )
        .unwrap();
        let x = randn(&mut rng, 2, 3);
        let (out, tape) = net.forward(x.view()).unwrap();
        let mut g = net.backward(&tape, &[out[0].view()]).unwrap().params;
        let bad = 3 * 4 + 4 + 5; // body[1].weight[1,1]
        g[bad] = g[bad] * 1.01 + 1e-3;
        let r = gradient_check_with(&net, x.view(), half_sq, &g, &GradCheckConfig::default());
        assert!(!r.passed);
        assert_eq!(r.worst_index, bad);
        assert_eq!(r.worst_name, "body[1].weight[1,1]");
    }

    #[test]
    fn param_names_cover_layout() {
        let net = ShortcutNet::zeros(NetSpec {
            input: 2,
            body: vec![LayerSpec::relu(3)],
            shortcut: true,
            heads: vec![1],
        })
        .unwrap();
        assert_eq!(net.param_name(0), "body[0].weight[0,0]");
        assert_eq!(net.param_name(6), "body[0].bias[0]");
        assert_eq!(net.param_name(9), "projection.weight[0,0]");
        assert_eq!(net.param_name(15), "head[0].weight[0,0]");
        assert_eq!(net.param_name(18), "head[0].bias[0]");
        assert_eq!(net.n_params(), 19);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = NetSpec {
            input: 10,
            body: vec![LayerSpec::relu(32), LayerSpec::relu(16)],
            shortcut: true,
            heads: vec![3, 3],
        };
        let a = ShortcutNet::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ShortcutNet::init(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.params(), b.params());
        let x = randn(&mut rng, 8, 10);
        let (oa, ta) = a.forward(x.view()).unwrap();
        let (ob, tb) = b.forward(x.view()).unwrap();
        assert_eq!(oa, ob);
        let ga = a.backward(&ta, &[oa[0].view(), oa[1].view()]).unwrap();
        let gb = b.backward(&tb, &[ob[0].view(), ob[1].view()]).unwrap();
        assert_eq!(ga.params, gb.params);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = Adam::new(3, 3e-4);
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let lr = 3e-4;
        let g = 0.37;
        let mut p = vec![0.0];
        let mut adam = Adam::new(1, lr);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam.step(&mut p, &[g]).unwrap();
            last = before - p[0];
        }
        let fixed_point = lr * g / (g + adam.eps);
        assert!((last / fixed_point - 1.0).abs() < 0.05, "{last}");
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut p = vec![0.3, -0.2, 0.1, 0.05];
        let mut adam = Adam::new(4, 3e-4);
        let norm = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut prev = norm(&p);
        for k in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut p, &g).unwrap();
            let now = norm(&p);
            if k >= 10 {
                assert!(now < prev, "step {k}: {now} >= {prev}");
            }
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = vec![1.0, 1.0];
        let mut adam = Adam::new(2, 1e-3);
        assert!(matches!(
            adam.step(&mut p, &[0.1, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn adam_step_invalidates_tape() {
        let mut net = ShortcutNet::from_params(
            NetSpec {
                input: 1,
                body: vec![LayerSpec::relu(1)],
                shortcut: false,
                heads: vec![],
            },
            vec![2.0, 1.0],
        )
        .unwrap();
        let (_, tape) = net.forward(array![[1.0]].view()).unwrap();
        let mut adam = Adam::new(2, 1e-3);
        net.adam_step(&mut adam, &[1.0, 1.0]).unwrap();
        assert!(net.backward(&tape, &[array![[1.0]].view()]).is_err());
        let _ = Array1::<f64>::zeros(1);
    }
}
