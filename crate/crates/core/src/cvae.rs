//! Conditional VAE over implied-volatility surfaces.
//!
//! The encoder maps a standardized surface and its standardized features to
//! a diagonal Gaussian posterior over `z`; the decoder maps `(z, y)` back to
//! the standardized surface. Training minimizes the batch mean of
//! `½‖x − x̂‖² + β·KL` with one reparameterized draw per sample.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureVector};
use crate::nn::{
    check_gradient, Adam, GradCheckConfig, GradCheckReport, LayerSpec, NetSpec, ShortcutNet,
};
use crate::surfaces::{GridSpec, IVSurface};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;
const CHECKPOINT_MAGIC: &[u8; 8] = b"IVSCKPT1";
const CHECKPOINT_VERSION: u32 = 1;
const MIN_STD: f64 = 1e-8;
/// KL weight used by the desk-scale preset.
pub const DESK_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// When set, the decoder head emits this many coefficients on the leading
    /// principal components of the standardized training surfaces instead of
    /// one value per node.
    #[serde(default)]
    pub output_basis: Option<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_z: 5,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            output_basis: None,
        }
    }
}

impl Architecture {
    /// Default widths with a 12-component output basis.
    pub fn desk() -> Self {
        Self {
            output_basis: Some(12),
            ..Self::default()
        }
    }

    fn encoder_spec(&self, n_x: usize, d_y: usize) -> NetSpec {
        NetSpec {
            input: n_x + d_y,
            body: self
                .encoder_hidden
                .iter()
                .map(|&w| LayerSpec::relu(w))
                .collect(),
            shortcut: true,
            heads: vec![self.d_z, self.d_z],
        }
    }

    fn decoder_spec(&self, n_x: usize, d_y: usize) -> NetSpec {
        NetSpec {
            input: self.d_z + d_y,
            body: self
                .decoder_hidden
                .iter()
                .map(|&w| LayerSpec::relu(w))
                .collect(),
            shortcut: true,
            heads: vec![self.output_basis.unwrap_or(n_x)],
        }
    }
}

/// Leading `k` eigenvectors (columns, `n_x × k`) of the second-moment matrix of `x`.
fn principal_basis(x: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
    let (n, dim) = x.dim();
    if k == 0 || k > dim.min(n) {
        return Err(Error::InvalidInput(format!(
            "output basis rank {k} must be in 1..={}",
            dim.min(n)
        )));
    }
    let cov = x.t().dot(&x) / n as f64;
    let eig =
        nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(dim, dim, |r, c| cov[[r, c]]));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let kept: f64 = order[..k]
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .sum();
    log::info!("output basis keeps {:.3e} of the variance", kept / total);
    let mut basis = Array2::zeros((dim, k));
    for (c, &i) in order[..k].iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = v
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            basis[[r, c]] = sign * v[r];
        }
    }
    Ok(basis)
}

/// Per-pixel and per-feature standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn mean_std(n: usize, dim: usize, get: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for r in 0..n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += get(r, c);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for r in 0..n {
        for (c, v) in var.iter_mut().enumerate() {
            *v += (get(r, c) - mean[c]).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s < MIN_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn fit(surfaces: &[IVSurface], labels: &[FeatureVector]) -> Result<Self> {
        if surfaces.is_empty() || surfaces.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "need equally many surfaces and labels, got {} and {}",
                surfaces.len(),
                labels.len()
            )));
        }
        let n_x = surfaces[0].values().len();
        let d_y = labels[0].len();
        let (x_mean, x_std) = mean_std(surfaces.len(), n_x, |r, c| surfaces[r].values()[c]);
        let (y_mean, y_std) = mean_std(labels.len(), d_y, |r, c| labels[r].values()[c]);
        Ok(Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.x_mean)
            .zip(&self.x_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.x_mean)
            .zip(&self.x_std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.y_mean)
            .zip(&self.y_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Diagonal Gaussian posterior `q(z | x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `z = μ + exp(½·log σ²)·ε`, with `log σ²` clamped.
pub fn reparameterize(p: &Posterior, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != p.mu.len() || p.log_var.len() != p.mu.len() {
        return Err(Error::Shape {
            what: "latent dimension",
            expected: p.mu.len(),
            actual: eps.len(),
        });
    }
    Ok(p.mu
        .iter()
        .zip(&p.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * e)
        .collect())
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` against the standard normal prior.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| {
            let lv = lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
            m * m + lv.exp() - 1.0 - lv
        })
        .sum::<f64>()
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Loss components from standardized targets, reconstructions and posteriors.
pub fn elbo_terms(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    log_var: ArrayView2<f64>,
    beta: f64,
) -> Result<ElboParts> {
    let n = x.nrows();
    if x.dim() != x_hat.dim() || mu.dim() != log_var.dim() || mu.nrows() != n {
        return Err(Error::InvalidInput("inconsistent loss shapes".into()));
    }
    if n == 0 {
        return Ok(ElboParts {
            total: 0.0,
            reconstruction: 0.0,
            kl: 0.0,
        });
    }
    let rec = 0.5
        * x.iter()
            .zip(x_hat.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
        / n as f64;
    let kl = mu
        .outer_iter()
        .zip(log_var.outer_iter())
        .map(|(m, lv)| {
            kl_divergence(
                m.as_slice().unwrap_or(&m.to_vec()),
                lv.as_slice().unwrap_or(&lv.to_vec()),
            )
        })
        .sum::<f64>()
        / n as f64;
    let total = rec + beta * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite("ELBO loss".into()));
    }
    Ok(ElboParts {
        total,
        reconstruction: rec,
        kl,
    })
}

/// Gradients of the batch loss with respect to encoder and decoder parameters.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

/// One training or evaluation pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub parts: ElboParts,
    /// Standardized reconstructions.
    pub x_hat: Array2<f64>,
    pub gradient: Option<ElboGradient>,
}

/// Recorded decoder pass for differentiating with respect to `z`.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    tape: crate::nn::Tape,
    d_z: usize,
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    grid: Arc<GridSpec>,
    features: Vec<Feature>,
    arch: Architecture,
    pub beta: f64,
    norm: Normalizer,
    feature_ranges: Vec<(f64, f64)>,
    seed: u64,
    encoder: ShortcutNet,
    decoder: ShortcutNet,
    basis: Option<Array2<f64>>,
}

/// Header of a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    grid: GridSpec,
    features: Vec<Feature>,
    architecture: Architecture,
    beta: f64,
    seed: u64,
    normalizer: Normalizer,
    feature_ranges: Vec<(f64, f64)>,
    encoder: NetSpec,
    decoder: NetSpec,
    encoder_params: usize,
    decoder_params: usize,
}

impl CvaeModel {
    /// Fresh model with normalization fitted to `surfaces` and `labels`.
    pub fn new(
        arch: Architecture,
        beta: f64,
        surfaces: &[IVSurface],
        labels: &[FeatureVector],
        seed: u64,
    ) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "beta must be positive, got {beta}"
            )));
        }
        if arch.d_z == 0 {
            return Err(Error::InvalidInput(
                "latent dimension must be positive".into(),
            ));
        }
        let norm = Normalizer::fit(surfaces, labels)?;
        let grid = Arc::clone(surfaces[0].grid());
        let features = labels[0].features().to_vec();
        for (s, l) in surfaces.iter().zip(labels) {
            if s.grid() != &grid && **s.grid() != *grid {
                return Err(Error::InvalidInput(
                    "surfaces live on different grids".into(),
                ));
            }
            if l.features() != features.as_slice() {
                return Err(mismatch(&features, l.features()));
            }
        }
        let feature_ranges = (0..features.len())
            .map(|k| {
                labels
                    .iter()
                    .map(|l| l.values()[k])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_x = grid.len();
        let d_y = features.len();
        let basis = match arch.output_basis {
            Some(k) => {
                let mut x = Array2::zeros((surfaces.len(), n_x));
                for (r, s) in surfaces.iter().enumerate() {
                    x.row_mut(r)
                        .assign(&ndarray::Array1::from(norm.normalize_x(s.values())));
                }
                Some(principal_basis(x.view(), k)?)
            }
            None => None,
        };
        let encoder = ShortcutNet::init(arch.encoder_spec(n_x, d_y), &mut rng)?;
        let decoder = ShortcutNet::init(arch.decoder_spec(n_x, d_y), &mut rng)?;
        Ok(Self {
            grid,
            features,
            arch,
            beta,
            norm,
            feature_ranges,
            seed,
            encoder,
            decoder,
            basis,
        })
    }

    /// Maps decoder head outputs to standardized surfaces.
    fn expand(&self, head: Array2<f64>) -> Array2<f64> {
        match &self.basis {
            Some(b) => head.dot(&b.t()),
            None => head,
        }
    }

    /// Adjoint of [`Self::expand`].
    fn contract(&self, g: Array2<f64>) -> Array2<f64> {
        match &self.basis {
            Some(b) => g.dot(b),
            None => g,
        }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn d_z(&self) -> usize {
        self.arch.d_z
    }

    pub fn d_y(&self) -> usize {
        self.features.len()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    /// Per-feature `(min, max)` over the training labels.
    pub fn feature_ranges(&self) -> &[(f64, f64)] {
        &self.feature_ranges
    }

    /// Training-label mean as a feature vector.
    pub fn mean_features(&self) -> Result<FeatureVector> {
        FeatureVector::new(self.features.clone(), self.norm.y_mean.clone())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// SHA-256 over architecture, features and every parameter, as hex.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(&self.arch, &self.features, self.beta)).unwrap_or_default());
        let basis = self.basis.iter().flat_map(|b| b.iter());
        for p in self.encoder.params().iter().chain(self.decoder.params()).chain(basis) {
            h.update(p.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn encoder(&self) -> &ShortcutNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &ShortcutNet {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut ShortcutNet {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut ShortcutNet {
        &mut self.decoder
    }

    /// Standardized feature row, checked against the model's feature set.
    pub fn normalize_y(&self, y: &FeatureVector) -> Result<Vec<f64>> {
        if y.features() != self.features.as_slice() {
            return Err(mismatch(&self.features, y.features()));
        }
        Ok(self.norm.normalize_y(y.values()))
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.arch.d_z {
            return Err(Error::Shape {
                what: "latent dimension",
                expected: self.arch.d_z,
                actual: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        Ok(())
    }

    fn check_surface(&self, x: &IVSurface) -> Result<()> {
        if **x.grid() != *self.grid {
            return Err(Error::InvalidInput(
                "surface grid differs from the model grid".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, x: &IVSurface, y: &FeatureVector) -> Result<Posterior> {
        self.check_surface(x)?;
        let mut row = self.norm.normalize_x(x.values());
        row.extend(self.normalize_y(y)?);
        let input = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
        let out = self.encoder.infer(input.view())?;
        Ok(Posterior {
            mu: out[0].row(0).to_vec(),
            log_var: out[1].row(0).to_vec(),
        })
    }

    fn decoder_input(&self, y: &FeatureVector, z: &[f64]) -> Result<Array2<f64>> {
        self.check_z(z)?;
        let mut row = z.to_vec();
        row.extend(self.normalize_y(y)?);
        Ok(Array2::from_shape_vec((1, row.len()), row).expect("row shape"))
    }

    /// Decoder mean in volatility units, without the positivity check.
    pub fn decode_values(&self, y: &FeatureVector, z: &[f64]) -> Result<Vec<f64>> {
        let out = self.decoder.infer(self.decoder_input(y, z)?.view())?;
        let x = self.expand(out.into_iter().next().expect("one head"));
        Ok(self.norm.denormalize_x(x.as_slice().expect("contiguous")))
    }

    pub fn decode(&self, y: &FeatureVector, z: &[f64]) -> Result<IVSurface> {
        IVSurface::new(Arc::clone(&self.grid), self.decode_values(y, z)?)
    }

    /// Decodes many `(y, z)` pairs in one batched pass.
    pub fn decode_batch(&self, ys: &[FeatureVector], zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if ys.len() != zs.len() {
            return Err(Error::Shape {
                what: "decode batch",
                expected: ys.len(),
                actual: zs.len(),
            });
        }
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.arch.d_z + self.d_y();
        let mut input = Array2::zeros((ys.len(), width));
        for (r, (y, z)) in ys.iter().zip(zs).enumerate() {
            self.check_z(z)?;
            let mut row = input.row_mut(r);
            row.slice_mut(s![..self.arch.d_z])
                .assign(&ndarray::ArrayView1::from(z.as_slice()));
            for (k, v) in self.normalize_y(y)?.into_iter().enumerate() {
                row[self.arch.d_z + k] = v;
            }
        }
        let out = self.decoder.infer(input.view())?;
        let x = self.expand(out.into_iter().next().expect("one head"));
        Ok(x.outer_iter()
            .map(|r| self.norm.denormalize_x(&r.to_vec()))
            .collect())
    }

    /// Decodes and records what [`Self::latent_gradient`] needs.
    pub fn decode_traced(&self, y: &FeatureVector, z: &[f64]) -> Result<(Vec<f64>, DecodeTrace)> {
        let (out, tape) = self.decoder.forward(self.decoder_input(y, z)?.view())?;
        let x = self.expand(out.into_iter().next().expect("one head"));
        let values = self.norm.denormalize_x(x.as_slice().expect("contiguous"));
        Ok((
            values,
            DecodeTrace {
                tape,
                d_z: self.arch.d_z,
            },
        ))
    }

    /// Pulls a gradient with respect to the decoded volatilities back to `z`.
    pub fn latent_gradient(&self, trace: &DecodeTrace, grad_values: &[f64]) -> Result<Vec<f64>> {
        if grad_values.len() != self.grid.len() {
            return Err(Error::Shape {
                what: "surface gradient",
                expected: self.grid.len(),
                actual: grad_values.len(),
            });
        }
        let scaled: Vec<f64> = grad_values
            .iter()
            .zip(&self.norm.x_std)
            .map(|(g, s)| g * s)
            .collect();
        let g =
            self.contract(Array2::from_shape_vec((1, scaled.len()), scaled).expect("row shape"));
        let gi = self.decoder.input_gradient(&trace.tape, &[g.view()])?;
        Ok(gi.row(0).slice(s![..trace.d_z]).to_vec())
    }

    /// Samples `z ~ N(0, I)` when absent, then decodes.
    pub fn generate(
        &self,
        y: &FeatureVector,
        z: Option<&[f64]>,
        rng: &mut impl Rng,
    ) -> Result<IVSurface> {
        match z {
            Some(z) => self.decode(y, z),
            None => {
                let z: Vec<f64> = (0..self.arch.d_z)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                self.decode(y, &z)
            }
        }
    }

    /// Standardized design matrices `(x, y)` for a labeled set.
    pub fn standardize(
        &self,
        surfaces: &[IVSurface],
        labels: &[FeatureVector],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if surfaces.len() != labels.len() {
            return Err(Error::Shape {
                what: "labels",
                expected: surfaces.len(),
                actual: labels.len(),
            });
        }
        let n_x = self.grid.len();
        let mut x = Array2::zeros((surfaces.len(), n_x));
        let mut y = Array2::zeros((labels.len(), self.d_y()));
        for (r, (s, l)) in surfaces.iter().zip(labels).enumerate() {
            self.check_surface(s)?;
            x.row_mut(r)
                .assign(&ndarray::Array1::from(self.norm.normalize_x(s.values())));
            y.row_mut(r)
                .assign(&ndarray::Array1::from(self.normalize_y(l)?));
        }
        Ok((x, y))
    }

    /// Loss of a standardized batch with frozen noise `eps`, optionally with gradients.
    pub fn batch_pass(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        eps: ArrayView2<f64>,
        with_gradient: bool,
    ) -> Result<BatchPass> {
        let n = x.nrows();
        let d_z = self.arch.d_z;
        if y.nrows() != n || eps.dim() != (n, d_z) {
            return Err(Error::InvalidInput(
                "batch rows or noise shape disagree".into(),
            ));
        }
        let enc_in =
            concatenate(Axis(1), &[x, y]).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let (enc_out, enc_tape) = self.encoder.forward(enc_in.view())?;
        let (mu, log_var) = (&enc_out[0], &enc_out[1]);
        let sigma = log_var.mapv(|lv| (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp());
        let z = mu + &(&sigma * &eps);
        let dec_in =
            concatenate(Axis(1), &[z.view(), y]).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let (dec_out, dec_tape) = self.decoder.forward(dec_in.view())?;
        let x_hat = self.expand(dec_out.into_iter().next().expect("one head"));
        let parts = elbo_terms(x, x_hat.view(), mu.view(), log_var.view(), self.beta)?;
        if !with_gradient {
            return Ok(BatchPass {
                parts,
                x_hat,
                gradient: None,
            });
        }
        let inv_n = 1.0 / n as f64;
        let g_xhat = self.contract((&x_hat - &x) * inv_n);
        let dec_grad = self.decoder.backward(&dec_tape, &[g_xhat.view()])?;
        let g_z = dec_grad.input.slice(s![.., ..d_z]);
        let g_mu = &g_z + &(mu * (self.beta * inv_n));
        let mut g_lv = Array2::zeros((n, d_z));
        ndarray::Zip::from(&mut g_lv)
            .and(&g_z)
            .and(&eps)
            .and(&sigma)
            .and(log_var)
            .for_each(|g, &gz, &e, &sd, &lv| {
                *g = if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv) {
                    0.5 * gz * e * sd + 0.5 * self.beta * inv_n * (sd * sd - 1.0)
                } else {
                    0.0
                };
            });
        let enc_grad = self
            .encoder
            .backward(&enc_tape, &[g_mu.view(), g_lv.view()])?;
        Ok(BatchPass {
            parts,
            x_hat,
            gradient: Some(ElboGradient {
                encoder: enc_grad.params,
                decoder: dec_grad.params,
            }),
        })
    }

    /// Batch-mean ELBO for labeled surfaces with frozen noise (one row per surface).
    pub fn elbo_loss(
        &self,
        surfaces: &[IVSurface],
        labels: &[FeatureVector],
        eps: ArrayView2<f64>,
    ) -> Result<ElboParts> {
        let (x, y) = self.standardize(surfaces, labels)?;
        Ok(self.batch_pass(x.view(), y.view(), eps, false)?.parts)
    }

    /// Writes a single-file checkpoint: magic, header length, JSON header, parameter blob.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            grid: (*self.grid).clone(),
            features: self.features.clone(),
            architecture: self.arch.clone(),
            beta: self.beta,
            seed: self.seed,
            normalizer: self.norm.clone(),
            feature_ranges: self.feature_ranges.clone(),
            encoder: self.encoder.spec().clone(),
            decoder: self.decoder.spec().clone(),
            encoder_params: self.encoder.n_params(),
            decoder_params: self.decoder.n_params(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(
            16 + json.len() + 8 * (header.encoder_params + header.decoder_params),
        );
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let basis = self.basis.iter().flat_map(|b| b.iter());
        for p in self
            .encoder
            .params()
            .iter()
            .chain(self.decoder.params())
            .chain(basis)
        {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..json_end])
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let n_x = header.grid.len();
        let d_y = header.features.len();
        if header.encoder != header.architecture.encoder_spec(n_x, d_y)
            || header.decoder != header.architecture.decoder_spec(n_x, d_y)
        {
            return Err(bad(
                "network shapes disagree with the declared architecture".into(),
            ));
        }
        if header.normalizer.x_mean.len() != n_x
            || header.normalizer.x_std.len() != n_x
            || header.normalizer.y_mean.len() != d_y
            || header.normalizer.y_std.len() != d_y
            || header.feature_ranges.len() != d_y
        {
            return Err(bad(
                "normalization constants disagree with grid or features".into(),
            ));
        }
        let blob = &bytes[json_end..];
        let basis_len = header.architecture.output_basis.map_or(0, |k| k * n_x);
        let n_params = header.encoder_params + header.decoder_params + basis_len;
        if blob.len() != 8 * n_params {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * n_params,
                blob.len()
            )));
        }
        let params: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (enc, rest) = params.split_at(header.encoder_params);
        let (dec, basis) = rest.split_at(header.decoder_params);
        let basis = header.architecture.output_basis.map(|k| {
            Array2::from_shape_vec((n_x, k), basis.to_vec()).expect("basis length checked")
        });
        let encoder = ShortcutNet::from_params(header.encoder, enc.to_vec())
            .map_err(|e| bad(e.to_string()))?;
        let decoder = ShortcutNet::from_params(header.decoder, dec.to_vec())
            .map_err(|e| bad(e.to_string()))?;
        if !(header.beta > 0.0) {
            return Err(bad(format!("beta must be positive, got {}", header.beta)));
        }
        Ok(Self {
            grid: Arc::new(header.grid),
            features: header.features,
            arch: header.architecture,
            beta: header.beta,
            norm: header.normalizer,
            feature_ranges: header.feature_ranges,
            seed: header.seed,
            encoder,
            decoder,
            basis,
        })
    }
}

fn mismatch(expected: &[Feature], actual: &[Feature]) -> Error {
    Error::FeatureMismatch {
        expected: expected.iter().map(|f| f.name().into()).collect(),
        actual: actual.iter().map(|f| f.name().into()).collect(),
    }
}

/// Finite-difference check of the batch loss gradient over all encoder and
/// decoder parameters, with the noise `eps` frozen.
pub fn elbo_gradient_check(
    model: &CvaeModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let g = model
        .batch_pass(x, y, eps, true)?
        .gradient
        .expect("requested");
    let n_enc = model.encoder.n_params();
    let mut params = model.encoder.params().to_vec();
    params.extend_from_slice(model.decoder.params());
    let mut analytic = g.encoder;
    analytic.extend_from_slice(&g.decoder);
    let mut probe = model.clone();
    Ok(check_gradient(
        |p| {
            probe.encoder.params_mut().copy_from_slice(&p[..n_enc]);
            probe.decoder.params_mut().copy_from_slice(&p[n_enc..]);
            probe
                .batch_pass(x, y, eps, false)
                .map_or(f64::NAN, |b| b.parts.total)
        },
        &params,
        &analytic,
        cfg,
        |i| {
            if i < n_enc {
                format!("encoder.{}", model.encoder.param_name(i))
            } else {
                format!("decoder.{}", model.decoder.param_name(i - n_enc))
            }
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: Adam::DEFAULT_LR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// Mean squared reconstruction error per pixel, in volatility units.
    pub mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn final_mse(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mse)
    }

    /// Trailing moving average of the epoch loss.
    pub fn smoothed_loss(&self, span: usize) -> Vec<f64> {
        let span = span.max(1);
        (0..self.epochs.len())
            .map(|t| {
                let lo = (t + 1).saturating_sub(span);
                self.epochs[lo..=t].iter().map(|e| e.loss).sum::<f64>() / (t + 1 - lo) as f64
            })
            .collect()
    }

    /// Largest relative rise `s(t')/s(t) − 1` of the smoothed loss over pairs
    /// `start ≤ t < t' ≤ t + window`.
    pub fn max_windowed_rise(&self, span: usize, start: usize, window: usize) -> f64 {
        let s = self.smoothed_loss(span);
        let mut worst = f64::NEG_INFINITY;
        for t in start..s.len() {
            for u in t + 1..(t + window + 1).min(s.len()) {
                worst = worst.max(s[u] / s[t] - 1.0);
            }
        }
        worst
    }
}

/// Minibatch Adam over the labeled set. Deterministic given `cfg.seed`. On a
/// non-finite loss the model is restored to the last completed epoch and an
/// error is returned.
pub fn train(
    model: &mut CvaeModel,
    surfaces: &[IVSurface],
    labels: &[FeatureVector],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingLog> {
    if surfaces.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let (x, y) = model.standardize(surfaces, labels)?;
    let n = x.nrows();
    let d_z = model.d_z();
    let x_std = ndarray::Array1::from(model.norm.x_std.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_enc = Adam::new(model.encoder.n_params(), cfg.learning_rate);
    let mut adam_dec = Adam::new(model.decoder.n_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainingLog::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let good = (model.encoder.clone(), model.decoder.clone());
        order.shuffle(&mut rng);
        let (mut loss, mut rec, mut kl, mut sq) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let eps = Array2::from_shape_simple_fn((chunk.len(), d_z), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            let pass = model
                .batch_pass(xb.view(), yb.view(), eps.view(), true)
                .inspect_err(|_| {
                    model.encoder = good.0.clone();
                    model.decoder = good.1.clone();
                })?;
            let g = pass.gradient.expect("requested");
            let m = chunk.len() as f64;
            loss += pass.parts.total * m;
            rec += pass.parts.reconstruction * m;
            kl += pass.parts.kl * m;
            sq += ((&pass.x_hat - &xb) * &x_std).mapv(|v| v * v).sum();
            let step = model
                .encoder
                .adam_step(&mut adam_enc, &g.encoder)
                .and_then(|_| model.decoder.adam_step(&mut adam_dec, &g.decoder));
            if let Err(e) = step {
                model.encoder = good.0;
                model.decoder = good.1;
                return Err(Error::Numerical(format!(
                    "training diverged in epoch {epoch}: {e}"
                )));
            }
        }
        let entry = EpochLog {
            epoch,
            loss: loss / n as f64,
            reconstruction: rec / n as f64,
            kl: kl / n as f64,
            mse: sq / (n * model.grid.len()) as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6e} rec {:.6e} kl {:.4} mse {:.3e}",
            entry.loss,
            entry.reconstruction,
            entry.kl,
            entry.mse
        );
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}
