//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ivsgen::arbitrage::ArbitrageChecker;
use ivsgen::cvae::{train, Architecture, CvaeModel, TrainConfig, DESK_BETA};
use ivsgen::dataset::{build_dataset, SamplerConfig};
use ivsgen::evaluation::plots::{line_plot_svg, write_report_plots};
use ivsgen::evaluation::{
    control_error_experiment, latent_correlations, traversal, violation_census, ExperimentReport, Varied,
    YRegime, YSampler, ZRegime,
};
use ivsgen::features::{parse_feature_list, AnchorRegression};
use ivsgen::repair::{repair_surface, LossWeights, RepairConfig, StopReason};
use ivsgen::surfaces::{read_surface_set, write_surface_set, SurfaceSet};
use ivsgen::{Feature, FeatureVector, IVSurface};

use crate::files::{check_finite, read_json, write_json, LabelFile, LatentFile, LATENTS_FILE};
use crate::server::{self, AppState, ServerConfig, CHECKPOINT_ENV};
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "ivsgen", version, about = "Implied-volatility surface generation, audit and repair")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample Heston and SABR surfaces into a labeled dataset directory.
    GenData(GenDataArgs),
    /// Extract shape features from every surface of a set.
    ExtractFeatures(ExtractArgs),
    /// Train a conditional VAE on a dataset.
    Train(TrainArgs),
    /// Decode surfaces for given or sampled conditions.
    Generate(GenerateArgs),
    /// Check every surface of a set for calendar and butterfly arbitrage.
    Audit(AuditArgs),
    /// Repair generated surfaces by latent-space optimization.
    Repair(RepairArgs),
    /// Run a control, traversal or census experiment.
    Evaluate(EvaluateArgs),
    /// Serve the JSON inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone)]
pub struct FeatureList(pub Vec<Feature>);

fn parse_features(s: &str) -> Result<FeatureList, String> {
    parse_feature_list(s).map(FeatureList).map_err(|e| e.to_string())
}

/// `name=value` pairs separated by commas.
#[derive(Debug, Clone)]
pub struct Assignments(pub BTreeMap<String, f64>);

fn parse_assignments(s: &str) -> Result<Assignments, String> {
    let mut out = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("expected name=value, got {part:?}"))?;
        let v: f64 = v.trim().parse().map_err(|e| format!("{k}: {e}"))?;
        if !v.is_finite() {
            return Err(format!("{k} must be finite"));
        }
        out.insert(k.trim().to_string(), v);
    }
    Ok(Assignments(out))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_heston: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_sabr: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Label features stored with the surfaces.
    #[arg(long, value_parser = parse_features, default_value = "level,slope,curvature,term_slope")]
    pub features: FeatureList,
    /// Output directory (manifest, blob and stats).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Surface set directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_features, default_value = "level,slope,curvature,term_slope")]
    pub features: FeatureList,
    /// Output label file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Label file overriding the labels stored with the dataset.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Conditioning features.
    #[arg(long, value_parser = parse_features, default_value = "level")]
    pub features: FeatureList,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// KL weight.
    #[arg(long, default_value_t = DESK_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 5)]
    pub d_z: usize,
    /// Principal components in the decoder output head; 0 emits every node directly.
    #[arg(long, default_value_t = 12)]
    pub output_basis: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch training log (JSON).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Loss curve (SVG).
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ZChoice {
    /// Standard normal truncated to |z| <= 3.
    Central,
    /// Standard normal.
    Full,
    /// 2 x standard normal clipped to |z| <= 6.
    Tail,
}

impl From<ZChoice> for ZRegime {
    fn from(c: ZChoice) -> Self {
        match c {
            ZChoice::Central => ZRegime::central(),
            ZChoice::Full => ZRegime::FullPrior,
            ZChoice::Tail => ZRegime::tail(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum YChoice {
    /// Convex combinations of dataset labels.
    InHull,
    /// Label bounding box widened by 20% per side.
    Extended,
}

impl From<YChoice> for YRegime {
    fn from(c: YChoice) -> Self {
        match c {
            YChoice::InHull => YRegime::InHull,
            YChoice::Extended => YRegime::extended(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Model checkpoint.
    #[arg(long, env = CHECKPOINT_ENV)]
    pub ckpt: PathBuf,
    /// Fixed condition, e.g. `level=0.3`; otherwise conditions are sampled from --data.
    #[arg(long, value_parser = parse_assignments)]
    pub y: Option<Assignments>,
    /// Dataset whose labels define the condition sampler.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "in-hull")]
    pub y_regime: YChoice,
    #[arg(long, value_enum, default_value = "central")]
    pub z_regime: ZChoice,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output surface set; latent vectors are written alongside.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Audit report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the violating surfaces (with labels and latents) here.
    #[arg(long)]
    pub violating_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RepairArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub ckpt: PathBuf,
    /// Surface set to repair.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Label file; defaults to the labels stored with the set.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Latent file; defaults to the set's latents, else the encoder mean.
    #[arg(long)]
    pub z: Option<PathBuf>,
    /// Output surface set.
    #[arg(long)]
    pub out: PathBuf,
    /// Repair statistics (JSON).
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mse_weight: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Experiment {
    Control,
    Traversal,
    Census,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    /// Experiment settings: a JSON file or an inline JSON object.
    #[arg(long)]
    pub config: Option<String>,
    /// Dataset whose labels define the condition sampler.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for SVG plots.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    /// Request body limit in bytes.
    #[arg(long, default_value_t = 1 << 20)]
    pub max_body: usize,
    /// Disable POST /repair.
    #[arg(long)]
    pub no_repair: bool,
    /// Wall-clock budget per repair request, seconds.
    #[arg(long, default_value_t = 10.0)]
    pub repair_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSettings {
    pub n: usize,
    pub y_regime: YRegime,
    pub z_regime: ZRegime,
    pub seed: u64,
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self {
            n: 1000,
            y_regime: YRegime::InHull,
            z_regime: ZRegime::central(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraversalSettings {
    /// Swept input; ignored when `all_latents` is set.
    pub varied: Varied,
    pub values: Vec<f64>,
    /// Base condition; defaults to the training-label mean.
    pub y: Option<BTreeMap<String, f64>>,
    /// Base latent; defaults to zero.
    pub z: Option<Vec<f64>>,
    /// Sweep every latent coordinate and report correlations.
    pub all_latents: bool,
}

impl Default for TraversalSettings {
    fn default() -> Self {
        Self {
            varied: Varied::Latent(0),
            values: vec![-8.0, -4.0, 0.0, 4.0, 8.0],
            y: None,
            z: None,
            all_latents: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CensusSettings {
    pub n: usize,
    pub y_regime: YRegime,
    pub z_regime: ZRegime,
    pub seed: u64,
    pub repair: bool,
    pub repair_config: RepairConfig,
}

impl Default for CensusSettings {
    fn default() -> Self {
        Self {
            n: 2000,
            y_regime: YRegime::InHull,
            z_regime: ZRegime::central(),
            seed: 0,
            repair: true,
            repair_config: RepairConfig::default(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::ExtractFeatures(a) => extract(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Audit(a) => audit(a),
        Command::Repair(a) => repair(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn load_model(path: &Path) -> Result<CvaeModel> {
    let model = CvaeModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    log::info!(
        "loaded {} (features {:?}, d_z {}, fingerprint {})",
        path.display(),
        model.features().iter().map(|f| f.name()).collect::<Vec<_>>(),
        model.d_z(),
        &model.fingerprint()[..16]
    );
    Ok(model)
}

fn read_set(path: &Path) -> Result<SurfaceSet> {
    read_surface_set(path).with_context(|| format!("reading surface set {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SamplerConfig {
        features: a.features.0,
        ..SamplerConfig::with_counts(a.n_heston, a.n_sabr, a.seed)
    };
    let start = Instant::now();
    let ds = build_dataset(&cfg)?;
    ds.save(&a.out)?;
    log::info!(
        "wrote {} surfaces to {} in {:.1}s ({} retries, {} arbitrage rejections)",
        ds.surfaces.len(),
        a.out.display(),
        start.elapsed().as_secs_f64(),
        ds.stats.retries,
        ds.stats.arbitrage_rejections
    );
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let set = read_set(&a.input)?;
    let regression = AnchorRegression::for_grid(Arc::clone(&set.grid))?;
    let values = set
        .surfaces
        .par_iter()
        .map(|s| Ok(regression.extract(s, &a.features.0)?.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &a.out,
        &LabelFile {
            features: a.features.0,
            values,
        },
    )?;
    log::info!("extracted features of {} surfaces", set.surfaces.len());
    Ok(())
}

fn labels_for(set: &SurfaceSet, file: Option<&Path>, features: &[Feature]) -> Result<Vec<FeatureVector>> {
    let labels = match file {
        Some(p) => read_json::<LabelFile>(p)?.to_vectors()?,
        None => set
            .labels
            .clone()
            .ok_or_else(|| usage("the surface set has no stored labels; pass a label file"))?,
    };
    if labels.len() != set.surfaces.len() {
        return Err(anyhow!(
            "{} labels for {} surfaces",
            labels.len(),
            set.surfaces.len()
        ));
    }
    labels
        .iter()
        .map(|l| l.select(features).map_err(|e| usage(e.to_string())))
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let set = read_set(&a.data)?;
    let labels = labels_for(&set, a.labels.as_deref(), &a.features.0)?;
    let arch = Architecture {
        d_z: a.d_z,
        output_basis: (a.output_basis > 0).then_some(a.output_basis),
        ..Architecture::default()
    };
    let mut model = CvaeModel::new(arch, a.beta, &set.surfaces, &labels, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
    };
    let log = train(&mut model, &set.surfaces, &labels, &cfg, |e| {
        if e.epoch == 0 || (e.epoch + 1) % 25 == 0 {
            log::info!(
                "epoch {:>4}  loss {:.5}  rec {:.5}  kl {:.4}  mse {:.3e}",
                e.epoch + 1,
                e.loss,
                e.reconstruction,
                e.kl,
                e.mse
            );
        }
    })?;
    model.save(&a.out)?;
    log::info!(
        "saved {} (final mse {:.3e})",
        a.out.display(),
        log.final_mse().unwrap_or(f64::NAN)
    );
    if let Some(p) = &a.log {
        write_json(p, &log)?;
    }
    if let Some(p) = &a.plot {
        let series = vec![
            (
                "log10 loss".to_string(),
                log.epochs.iter().map(|e| (e.epoch as f64 + 1.0, e.loss.log10())).collect(),
            ),
            (
                "log10 mse".to_string(),
                log.epochs.iter().map(|e| (e.epoch as f64 + 1.0, e.mse.log10())).collect(),
            ),
        ];
        std::fs::write(p, line_plot_svg("training", "epoch", "log10", &series))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn condition(model: &CvaeModel, y: &BTreeMap<String, f64>) -> Result<FeatureVector> {
    let unknown: Vec<&String> = y
        .keys()
        .filter(|k| !model.features().iter().any(|f| f.name() == k.as_str()))
        .collect();
    if !unknown.is_empty() {
        return Err(usage(format!(
            "unknown features {unknown:?}; the model is conditioned on {:?}",
            model.features().iter().map(|f| f.name()).collect::<Vec<_>>()
        )));
    }
    let values = model
        .features()
        .iter()
        .map(|f| y.get(f.name()).copied().ok_or_else(|| usage(format!("missing feature {f}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureVector::new(model.features().to_vec(), values)?)
}

fn sampler(model: &CvaeModel, data: Option<&Path>, regime: YRegime) -> Result<YSampler> {
    let data = data.ok_or_else(|| usage("--data is required to sample conditions"))?;
    let set = read_set(data)?;
    let labels = set
        .labels
        .ok_or_else(|| anyhow!("{} has no stored labels", data.display()))?;
    Ok(YSampler::new(regime, &labels, model.features())?)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let fixed = a.y.as_ref().map(|y| condition(&model, &y.0)).transpose()?;
    let ys = match fixed {
        Some(_) => None,
        None => Some(sampler(&model, a.data.as_deref(), a.y_regime.into())?),
    };
    let z_regime: ZRegime = a.z_regime.into();
    let mut surfaces = Vec::new();
    let mut labels = Vec::new();
    let mut latents = Vec::new();
    let mut skipped = 0;
    for k in 0..a.n {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(k as u64);
        let y = match (&fixed, &ys) {
            (Some(y), _) => y.clone(),
            (None, Some(s)) => s.sample(&mut rng),
            _ => unreachable!(),
        };
        let z = z_regime.sample(model.d_z(), &mut rng);
        match model.decode(&y, &z) {
            Ok(s) => {
                surfaces.push(s);
                labels.push(y);
                latents.push(z);
            }
            Err(e) => {
                skipped += 1;
                log::debug!("sample {k} skipped: {e}");
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} decodes had non-positive volatilities and were skipped", a.n);
    }
    write_surface_set(&a.out, model.grid(), &surfaces, Some(&labels))?;
    write_json(&a.out.join(LATENTS_FILE), &LatentFile { z: latents })?;
    log::info!("wrote {} surfaces to {}", surfaces.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub index: usize,
    pub is_free: bool,
    pub l_calendar: f64,
    pub l_butterfly: f64,
    pub calendar_nodes: usize,
    pub butterfly_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total: usize,
    pub free: usize,
    pub violating: usize,
    pub calendar_violating: usize,
    pub butterfly_violating: usize,
    pub surfaces: Vec<AuditEntry>,
}

fn audit(a: AuditArgs) -> Result<()> {
    let set = read_set(&a.input)?;
    let checker = ArbitrageChecker::new(Arc::clone(&set.grid));
    let surfaces = set
        .surfaces
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let r = checker.audit(s)?;
            Ok(AuditEntry {
                index,
                is_free: r.is_free,
                l_calendar: r.l_calendar,
                l_butterfly: r.l_butterfly,
                calendar_nodes: r.calendar_violations.len(),
                butterfly_nodes: r.butterfly_violations.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AuditReport {
        total: surfaces.len(),
        free: surfaces.iter().filter(|e| e.is_free).count(),
        violating: surfaces.iter().filter(|e| !e.is_free).count(),
        calendar_violating: surfaces.iter().filter(|e| e.calendar_nodes > 0).count(),
        butterfly_violating: surfaces.iter().filter(|e| e.butterfly_nodes > 0).count(),
        surfaces,
    };
    write_json(&a.out, &report)?;
    log::info!("{} of {} surfaces violate at least one check", report.violating, report.total);

    if let Some(dir) = &a.violating_out {
        let keep: Vec<usize> = report.surfaces.iter().filter(|e| !e.is_free).map(|e| e.index).collect();
        let pick = |s: &[IVSurface]| keep.iter().map(|&k| s[k].clone()).collect::<Vec<_>>();
        let labels = set
            .labels
            .as_ref()
            .map(|l| keep.iter().map(|&k| l[k].clone()).collect::<Vec<_>>());
        write_surface_set(dir, &set.grid, &pick(&set.surfaces), labels.as_deref())?;
        let latents = a.input.join(LATENTS_FILE);
        if latents.exists() {
            let z: LatentFile = read_json(&latents)?;
            if z.z.len() == set.surfaces.len() {
                let z = keep.iter().map(|&k| z.z[k].clone()).collect();
                write_json(&dir.join(LATENTS_FILE), &LatentFile { z })?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairEntry {
    pub index: usize,
    pub repaired: bool,
    pub converged: bool,
    pub iterations: usize,
    pub stop: StopReason,
    pub penalty_before: f64,
    pub penalty_after: f64,
    pub feature_drift: Vec<f64>,
    pub z_initial: Vec<f64>,
    pub z_optimized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub total: usize,
    pub already_free: usize,
    pub violations: usize,
    pub repaired: usize,
    pub unrepaired: usize,
    pub penalty_decreased: usize,
    pub latent_source: String,
    pub cases: Vec<RepairEntry>,
}

fn repair(a: RepairArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let set = read_set(&a.input)?;
    if set.grid.as_ref() != model.grid().as_ref() {
        return Err(anyhow!("surface grid differs from the model grid"));
    }
    let labels = labels_for(&set, a.y.as_deref(), model.features())?;
    let stored = a.input.join(LATENTS_FILE);
    let (zs, source) = match a.z.as_deref().or(stored.exists().then_some(stored.as_path())) {
        Some(p) => (read_json::<LatentFile>(p)?.z, p.display().to_string()),
        None => {
            log::warn!("no latent file; starting from the encoder mean");
            let zs = set
                .surfaces
                .iter()
                .zip(&labels)
                .map(|(s, y)| Ok(model.encode(s, y)?.mu))
                .collect::<Result<Vec<_>>>()?;
            (zs, "encoder-mean".to_string())
        }
    };
    if zs.len() != set.surfaces.len() {
        return Err(anyhow!("{} latent vectors for {} surfaces", zs.len(), set.surfaces.len()));
    }
    let cfg = RepairConfig {
        max_iters: a.max_iters,
        weights: LossWeights {
            mse: a.mse_weight,
            ..LossWeights::default()
        },
        ..RepairConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let results = labels
        .par_iter()
        .zip(&zs)
        .map(|(y, z)| Ok(repair_surface(&model, y, z, &cfg)?))
        .collect::<Result<Vec<_>>>()?;

    let cases: Vec<RepairEntry> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.stop != StopReason::AlreadyFree)
        .map(|(index, r)| RepairEntry {
            index,
            repaired: r.repaired,
            converged: r.converged,
            iterations: r.iterations,
            stop: r.stop,
            penalty_before: r.before.l_calendar + r.before.l_butterfly,
            penalty_after: r.after.l_calendar + r.after.l_butterfly,
            feature_drift: r.feature_drift.clone(),
            z_initial: r.z_initial.clone(),
            z_optimized: r.z_optimized.clone(),
        })
        .collect();
    for c in &cases {
        check_finite(c.z_optimized.iter().copied().chain(c.feature_drift.iter().copied()), "repair result")?;
    }
    let repaired = cases.iter().filter(|c| c.repaired).count();
    let report = RepairReport {
        total: results.len(),
        already_free: results.len() - cases.len(),
        violations: cases.len(),
        repaired,
        unrepaired: cases.len() - repaired,
        penalty_decreased: cases.iter().filter(|c| c.penalty_after < c.penalty_before).count(),
        latent_source: source,
        cases,
    };
    let surfaces: Vec<IVSurface> = results.iter().map(|r| r.surface.clone()).collect();
    write_surface_set(&a.out, model.grid(), &surfaces, Some(&labels))?;
    write_json(
        &a.out.join(LATENTS_FILE),
        &LatentFile {
            z: results.iter().map(|r| r.z_optimized.clone()).collect(),
        },
    )?;
    write_json(&a.report, &report)?;
    log::info!(
        "repaired {} of {} violating surfaces ({} already free)",
        report.repaired,
        report.violations,
        report.already_free
    );
    Ok(())
}

fn settings<T: serde::de::DeserializeOwned + Default>(config: Option<&str>) -> Result<T> {
    let Some(c) = config else {
        return Ok(T::default());
    };
    let text = if c.trim_start().starts_with('{') {
        c.to_string()
    } else {
        std::fs::read_to_string(c).with_context(|| format!("reading config {c}"))?
    };
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid experiment config: {e}")))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let report = match a.experiment {
        Experiment::Control => {
            let s: ControlSettings = settings(a.config.as_deref())?;
            let ys = sampler(&model, a.data.as_deref(), s.y_regime)?;
            let r = control_error_experiment(&model, s.n, &ys, s.z_regime, s.seed)?;
            for e in &r.errors {
                log::info!(
                    "{}: median |e| {:.3e}, p90 {:.3e}, max {:.3e}",
                    e.feature,
                    e.median_abs.unwrap_or(0.0),
                    e.p90_abs.unwrap_or(0.0),
                    e.max_abs.unwrap_or(0.0)
                );
            }
            r
        }
        Experiment::Traversal => {
            let s: TraversalSettings = settings(a.config.as_deref())?;
            let y = match &s.y {
                Some(y) => condition(&model, y)?,
                None => model.mean_features()?,
            };
            let z = s.z.clone().unwrap_or_else(|| vec![0.0; model.d_z()]);
            if z.len() != model.d_z() {
                return Err(usage(format!("z must have {} entries", model.d_z())));
            }
            let start = Instant::now();
            let mut r = ExperimentReport::new("traversal", &model, 0);
            if s.all_latents {
                let (tables, corr) = latent_correlations(&model, &y, &s.values)?;
                r.traversals = tables;
                r.correlations = corr;
            } else {
                r.traversals = vec![traversal(&model, s.varied, &s.values, &y, &z).map_err(|e| usage(e.to_string()))?];
            }
            r.n = s.values.len();
            r.seconds = start.elapsed().as_secs_f64();
            for t in &r.traversals {
                log::info!("{:?}: spread {:?}", t.varied, t.spread());
            }
            r
        }
        Experiment::Census => {
            let s: CensusSettings = settings(a.config.as_deref())?;
            let ys = sampler(&model, a.data.as_deref(), s.y_regime)?;
            let r = violation_census(&model, s.n, &ys, s.z_regime, s.seed, s.repair.then_some(&s.repair_config))?;
            log::info!("census: {:?}", r.census);
            r
        }
    };
    write_json(&a.out, &report)?;
    if let Some(dir) = &a.plots {
        let files = write_report_plots(&report, model.grid(), dir)?;
        log::info!("wrote {} plots to {}", files.len(), dir.display());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    if a.max_batch == 0 || !(a.repair_seconds > 0.0) {
        return Err(usage("--max-batch and --repair-seconds must be positive"));
    }
    let cfg = ServerConfig {
        bind: a.bind,
        checkpoint: Some(a.ckpt.clone()),
        max_batch: a.max_batch,
        max_body_bytes: a.max_body,
        enable_repair: !a.no_repair,
        repair_seconds: a.repair_seconds,
    };
    let state = AppState::from_config(cfg).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    log::info!("model fingerprint {}", state.fingerprint().unwrap_or("-"));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(server::serve(state))?;
    Ok(())
}
