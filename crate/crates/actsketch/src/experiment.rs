//! Experiment configuration, the training runner, the monitoring demo,
//! sketch-bound benchmarks, and checkpointing.
//!
//! Runs are deterministic by construction: every random stream is ChaCha8
//! seeded from the run seed (the generator identifier is recorded in the
//! config and checkpoint), batches iterate in shuffled-but-seeded order,
//! map keys are ordered, and all emitted numbers use fixed formatting.
//! Two invocations with the same config and seed produce byte-identical
//! output files. Wall-clock columns are 0 unless `timings` is set, since
//! real timings would break that guarantee.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{make_control_projections, reconstruct, sketch_static, tail_energy, ControlDims};
use crate::data::{
    load_mnist, make_synthetic_lowrank, make_synthetic_regress, Dataset, DatasetTargets,
};
use crate::ema::{init_layer_sketch, make_nn_projections, LayerSketchState, NnProjectionSet, SketchConfig};
use crate::error::{Error, Result};
use crate::mlp::{
    accuracy, adam_step, backward_exact, backward_sketched, forward, init_params, loss_and_delta, predict,
    sgd_step, AdamState, GradMode, InitOptions, LayerParams, MlpConfig, OutputKind, SketchingCtx, Targets,
};
use crate::monitor::{emit_records, grad_norm_estimate, memory_report, stable_rank, MonitorRecord};
use crate::rank::{apply_rank_change, observe_epoch, RankControllerConfig, RankControllerState};

/// Only RNG this crate uses; recorded in configs and checkpoints.
pub const RNG_ALGO: &str = "chacha8";

/// Which training variant a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    Exact,
    SketchedFixed,
    SketchedAdaptive,
    MonitorOnly,
}

/// Dataset selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    SyntheticClassify,
    SyntheticRegress,
}

/// Sketch hyperparameters as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchSettings {
    pub r: usize,
    pub beta: f64,
    pub warmup_iters: usize,
}

impl Default for SketchSettings {
    fn default() -> Self {
        SketchSettings { r: 2, beta: 0.95, warmup_iters: 5 }
    }
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub d0: usize,
    pub classes: usize,
    pub latent_rank: usize,
    pub targets_dim: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings { d0: 64, classes: 10, latent_rank: 16, targets_dim: 4 }
    }
}

/// A full experiment description. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub dataset: DatasetKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_activation")]
    pub activation: crate::mlp::Activation,
    #[serde(default)]
    pub sketch: Option<SketchSettings>,
    #[serde(default)]
    pub rank_ctl: Option<RankControllerConfig>,
    #[serde(default)]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default = "default_train_n")]
    pub train_n: usize,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default)]
    pub synth: SynthSettings,
    /// Monitoring window used for the run's memory report.
    #[serde(default = "default_window")]
    pub monitor_window: usize,
    /// Real wall-clock timings in metrics (breaks byte-determinism).
    #[serde(default)]
    pub timings: bool,
    /// Random generator identifier; only "chacha8" is supported.
    #[serde(default = "default_rng_algo")]
    pub rng_algo: String,
}

fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_width() -> usize {
    128
}
fn default_hidden_layers() -> usize {
    3
}
fn default_activation() -> crate::mlp::Activation {
    crate::mlp::Activation::Tanh
}
fn default_train_n() -> usize {
    10_000
}
fn default_test_n() -> usize {
    2_000
}
fn default_window() -> usize {
    5
}
fn default_rng_algo() -> String {
    RNG_ALGO.into()
}

impl ExperimentConfig {
    /// Desk-scale defaults for one mode and dataset.
    pub fn desk(mode: ExperimentMode, dataset: DatasetKind, seed: u64) -> Self {
        let sketch = if mode == ExperimentMode::Exact { None } else { Some(SketchSettings::default()) };
        let rank_ctl = if mode == ExperimentMode::SketchedAdaptive {
            Some(RankControllerConfig::default())
        } else {
            None
        };
        ExperimentConfig {
            mode,
            dataset,
            seed,
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            hidden_width: default_width(),
            hidden_layers: default_hidden_layers(),
            activation: default_activation(),
            sketch,
            rank_ctl,
            mnist_dir: None,
            train_n: default_train_n(),
            test_n: default_test_n(),
            synth: SynthSettings::default(),
            monitor_window: default_window(),
            timings: false,
            rng_algo: default_rng_algo(),
        }
    }

    /// Switches to the larger configuration behind `--paper-scale`:
    /// 512-wide, 4-layer MLP, 50 epochs, full MNIST split.
    pub fn apply_paper_scale(&mut self) {
        self.hidden_width = 512;
        self.hidden_layers = 3;
        self.epochs = 50;
        self.train_n = 60_000;
        self.test_n = 10_000;
    }

    pub fn validate(&self) -> Result<()> {
        if self.rng_algo != RNG_ALGO {
            return Err(Error::Config(format!(
                "unsupported rng_algo {:?}; this build provides only {RNG_ALGO:?}",
                self.rng_algo
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("epochs, batch_size, hidden_width, hidden_layers must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        match self.mode {
            ExperimentMode::Exact => {
                if self.sketch.is_some() {
                    return Err(Error::Config("exact mode takes no sketch settings".into()));
                }
                if self.rank_ctl.is_some() {
                    return Err(Error::Config("rank_ctl requires sketched-adaptive mode".into()));
                }
            }
            ExperimentMode::SketchedAdaptive => {
                if self.sketch.is_none() {
                    return Err(Error::Config("sketched-adaptive mode requires sketch settings".into()));
                }
                if self.rank_ctl.is_none() {
                    return Err(Error::Config("sketched-adaptive mode requires rank_ctl".into()));
                }
                self.rank_ctl.as_ref().unwrap().validate()?;
            }
            ExperimentMode::SketchedFixed | ExperimentMode::MonitorOnly => {
                if self.sketch.is_none() {
                    return Err(Error::Config(format!("{:?} mode requires sketch settings", self.mode)));
                }
                if self.rank_ctl.is_some() {
                    return Err(Error::Config("rank_ctl requires sketched-adaptive mode".into()));
                }
            }
        }
        if let Some(s) = &self.sketch {
            SketchConfig::new(s.r, s.beta, s.warmup_iters, self.batch_size)?;
        }
        if self.dataset == DatasetKind::SyntheticRegress && self.mode == ExperimentMode::SketchedAdaptive {
            // fine; nothing classification-specific in the controller
        }
        Ok(())
    }

    /// Parses a JSON config document, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// SplitMix64-style stream separation so that modes which consume
/// different amounts of randomness (projections, initialization, shuffling)
/// still see identical per-purpose streams for the same run seed.
fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SEED_TAG_INIT: u64 = 1;
const SEED_TAG_SHUFFLE: u64 = 2;
const SEED_TAG_PROJ: u64 = 3;

/// Everything a finished run reports back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: ExperimentMode,
    pub dataset: String,
    pub epochs: usize,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_train_acc: Vec<f64>,
    pub test_acc: Option<f64>,
    pub test_mse: Option<f64>,
    pub final_rank: Option<usize>,
    pub rank_decisions: Vec<String>,
}

/// Versioned run checkpoint; JSON, stable across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub rng_algo: String,
    pub seed: u64,
    pub mode: ExperimentMode,
    pub mlp: MlpConfig,
    pub params: Vec<LayerParams>,
    pub adam: AdamState,
    pub sketch: Option<SketchConfig>,
    /// Seed that regenerates the current projection set.
    pub proj_seed: Option<u64>,
    pub sketch_states: Option<BTreeMap<usize, LayerSketchState>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Data(format!("checkpoint encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("checkpoint decode: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    Ok(ckpt)
}

fn resolve_mnist_dir(config: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = &config.mnist_dir {
        return dir.clone();
    }
    if let Ok(env_dir) = std::env::var("MNIST_DIR") {
        if !env_dir.is_empty() {
            return PathBuf::from(env_dir);
        }
    }
    PathBuf::from("data/mnist")
}

fn load_dataset(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match config.dataset {
        DatasetKind::Mnist => load_mnist(&resolve_mnist_dir(config), config.train_n, config.test_n),
        DatasetKind::SyntheticClassify => {
            let total = config.train_n + config.test_n;
            let ds = make_synthetic_lowrank(
                total,
                config.synth.d0,
                config.synth.classes,
                config.synth.latent_rank,
                config.seed,
            )?;
            let train_idx: Vec<usize> = (0..config.train_n).collect();
            let test_idx: Vec<usize> = (config.train_n..total).collect();
            Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
        }
        DatasetKind::SyntheticRegress => {
            let total = config.train_n + config.test_n;
            let ds = make_synthetic_regress(
                total,
                config.synth.d0,
                config.synth.targets_dim,
                config.synth.latent_rank,
                config.seed,
            )?;
            let train_idx: Vec<usize> = (0..config.train_n).collect();
            let test_idx: Vec<usize> = (config.train_n..total).collect();
            Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
        }
    }
}

fn batch_targets(ds: &Dataset) -> Targets<'_> {
    match &ds.targets {
        DatasetTargets::Labels { y, .. } => Targets::Labels(y),
        DatasetTargets::Values(v) => Targets::Values(v),
    }
}

struct EpochStats {
    loss: f64,
    acc: f64,
}

/// Optimizer used by a run.
enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    fn step(&mut self, params: &mut [LayerParams], grads: &crate::mlp::GradientSet) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(params, grads, state),
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
        }
    }
}

struct TrainingSession {
    mlp_config: MlpConfig,
    params: Vec<LayerParams>,
    optimizer: Optimizer,
    sketch_config: Option<SketchConfig>,
    proj: Option<NnProjectionSet>,
    states: BTreeMap<usize, LayerSketchState>,
    grad_mode: GradMode,
}

impl TrainingSession {
    fn run_epoch(
        &mut self,
        train: &Dataset,
        order: &[usize],
        batch_size: usize,
    ) -> Result<EpochStats> {
        let n_batches = order.len() / batch_size;
        if n_batches == 0 {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds training set size {}",
                order.len()
            )));
        }
        let mut loss_sum = 0.0;
        let mut hits = 0.0;
        let mut seen = 0usize;
        for b in 0..n_batches {
            let idx = &order[b * batch_size..(b + 1) * batch_size];
            let batch = train.subset(idx);
            let targets = batch_targets(&batch);
            let (logits, trace) = match (&self.sketch_config, &self.proj) {
                (Some(cfg), Some(proj)) if self.grad_mode != GradMode::Exact => forward(
                    &self.params,
                    &self.mlp_config,
                    &batch.x,
                    Some(SketchingCtx { config: cfg, proj, states: &mut self.states }),
                )?,
                _ => forward(&self.params, &self.mlp_config, &batch.x, None)?,
            };
            let (loss, _) = loss_and_delta(&logits, targets, self.mlp_config.output)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in batch {b}")));
            }
            loss_sum += loss;
            if let DatasetTargets::Labels { y, .. } = &batch.targets {
                hits += accuracy(&logits, y) * y.len() as f64;
                seen += y.len();
            }
            let grads = match self.grad_mode {
                GradMode::Sketched => backward_sketched(
                    &trace,
                    &self.params,
                    &self.mlp_config,
                    targets,
                    &self.states,
                    self.proj.as_ref().expect("sketched mode has projections"),
                )?,
                _ => backward_exact(&trace, &self.params, &self.mlp_config, targets)?,
            };
            self.optimizer.step(&mut self.params, &grads)?;
        }
        Ok(EpochStats {
            loss: loss_sum / n_batches as f64,
            acc: if seen > 0 { hits / seen as f64 } else { 0.0 },
        })
    }

    fn monitor_layers(&self) -> impl Iterator<Item = (&usize, &LayerSketchState)> {
        self.states.iter()
    }
}

fn write_train_log(path: &Path, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,train_loss,train_acc")?;
    for (epoch, loss, acc) in rows {
        writeln!(out, "{},{:.16e},{:.16e}", epoch, loss, acc)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs one experiment end to end and writes all artifacts into `out_dir`:
/// `metrics.csv`, `train_log.csv`, `memory_report.json`, `checkpoint.json`,
/// `summary.json`, and `decisions.csv` in adaptive mode.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();

    let (train, test) = load_dataset(config)?;
    let out_dim = train.output_dim();
    let mut layer_dims = vec![train.input_dim()];
    layer_dims.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
    layer_dims.push(out_dim);

    let grad_mode = match config.mode {
        ExperimentMode::Exact => GradMode::Exact,
        ExperimentMode::SketchedFixed | ExperimentMode::SketchedAdaptive => GradMode::Sketched,
        ExperimentMode::MonitorOnly => GradMode::MonitorOnly,
    };
    let output = match &train.targets {
        DatasetTargets::Labels { .. } => OutputKind::SoftmaxXent,
        DatasetTargets::Values(_) => OutputKind::Mse,
    };
    let l_total = layer_dims.len() - 1;
    let sketched_layers: BTreeSet<usize> = if grad_mode == GradMode::Exact {
        BTreeSet::new()
    } else {
        (1..l_total).filter(|&j| layer_dims[j] == layer_dims[j - 1]).collect()
    };
    if grad_mode != GradMode::Exact && sketched_layers.is_empty() {
        return Err(Error::Config(
            "no sketchable layers: sketching needs a hidden layer whose input width equals its width".into(),
        ));
    }
    let mlp_config = MlpConfig {
        layer_dims,
        activation: config.activation,
        output,
        sketched_layers: sketched_layers.clone(),
        grad_mode,
    };
    mlp_config.validate()?;

    let params = init_params(&mlp_config, derive_seed(config.seed, SEED_TAG_INIT), &InitOptions::default())?;
    let adam = AdamState::new(&params, config.lr);

    let (sketch_config, proj, states) = if let Some(s) = &config.sketch {
        let sk = SketchConfig::new(s.r, s.beta, s.warmup_iters, config.batch_size)?;
        let proj = make_nn_projections(derive_seed(config.seed, SEED_TAG_PROJ), &sk, l_total);
        let mut states = BTreeMap::new();
        for &j in &sketched_layers {
            states.insert(j, init_layer_sketch(&sk, mlp_config.layer_dims[j])?);
        }
        (Some(sk), Some(proj), states)
    } else {
        (None, None, BTreeMap::new())
    };

    let mut session = TrainingSession {
        mlp_config,
        params,
        optimizer: Optimizer::Adam(adam),
        sketch_config,
        proj,
        states,
        grad_mode,
    };

    let sketched_widths: BTreeMap<usize, usize> = sketched_layers
        .iter()
        .map(|&j| (j, session.mlp_config.layer_dims[j]))
        .collect();

    let mut rank_state = config.rank_ctl.as_ref().map(RankControllerState::new);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SEED_TAG_SHUFFLE));

    let mut records: Vec<MonitorRecord> = Vec::new();
    let mut train_rows: Vec<(usize, f64, f64)> = Vec::new();
    let mut decision_rows: Vec<String> = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut epoch_accs = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let stats = session.run_epoch(&train, &order, config.batch_size)?;
        epoch_losses.push(stats.loss);
        epoch_accs.push(stats.acc);
        train_rows.push((epoch, stats.loss, stats.acc));

        let wall_ms = if config.timings { started.elapsed().as_millis() as u64 } else { 0 };
        let current_r = session.sketch_config.map(|s| s.r).unwrap_or(0);
        for (&layer, state) in session.monitor_layers() {
            if let Ok(sr) = stable_rank(state) {
                records.push(MonitorRecord {
                    epoch,
                    layer,
                    z_norm: grad_norm_estimate(state),
                    stable_rank: sr,
                    train_loss: stats.loss,
                    train_acc: stats.acc,
                    current_r,
                    wall_ms,
                });
            }
        }

        if let (Some(rk_cfg), Some(rk_state)) = (config.rank_ctl.as_ref(), rank_state.as_mut()) {
            let r_before = rk_state.r;
            let decision = observe_epoch(rk_state, rk_cfg, stats.loss)?;
            decision_rows.push(format!(
                "{},{:.16e},{},{},{}",
                epoch,
                stats.loss,
                r_before,
                decision.tag(),
                rk_state.r
            ));
            if let Some(new_r) = decision.new_rank() {
                let template = session.sketch_config.expect("adaptive mode has sketch config");
                let (sk, proj, states) =
                    apply_rank_change(new_r, config.seed, epoch, &template, &sketched_widths, l_total)?;
                session.sketch_config = Some(sk);
                session.proj = Some(proj);
                session.states = states;
            }
        }
    }

    // Evaluation on the held-out split.
    let test_logits = predict(&session.params, &session.mlp_config, &test.x)?;
    let (test_acc, test_mse) = match &test.targets {
        DatasetTargets::Labels { y, .. } => (Some(accuracy(&test_logits, y)), None),
        DatasetTargets::Values(v) => {
            let (mse, _) = loss_and_delta(&test_logits, Targets::Values(v), OutputKind::Mse)?;
            (None, Some(mse))
        }
    };

    // Artifacts.
    let mut metrics = Vec::new();
    emit_records(&records, &mut metrics)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics)?;
    write_train_log(&out_dir.join("train_log.csv"), &train_rows)?;

    let report = memory_report(
        l_total,
        config.hidden_width,
        session.sketch_config.map(|s| s.r).unwrap_or(config.sketch.map(|s| s.r).unwrap_or(0)).max(1),
        config.batch_size,
        config.monitor_window,
    );
    std::fs::write(
        out_dir.join("memory_report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Data(format!("report encode: {e}")))?,
    )?;

    if config.mode == ExperimentMode::SketchedAdaptive {
        let mut out = String::from("epoch,metric,r_before,decision,r_after\n");
        for row in &decision_rows {
            out.push_str(row);
            out.push('\n');
        }
        std::fs::write(out_dir.join("decisions.csv"), out)?;
    }

    let adam_state = match &session.optimizer {
        Optimizer::Adam(a) => a.clone(),
        Optimizer::Sgd { .. } => unreachable!("runner always uses Adam"),
    };
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        rng_algo: RNG_ALGO.into(),
        seed: config.seed,
        mode: config.mode,
        mlp: session.mlp_config.clone(),
        params: session.params.clone(),
        adam: adam_state,
        sketch: session.sketch_config,
        proj_seed: session.proj.as_ref().map(|p| p.seed),
        sketch_states: if session.states.is_empty() { None } else { Some(session.states.clone()) },
    };
    save_checkpoint(&out_dir.join("checkpoint.json"), &ckpt)?;

    let summary = RunSummary {
        mode: config.mode,
        dataset: train.name.clone(),
        epochs: config.epochs,
        epoch_train_loss: epoch_losses,
        epoch_train_acc: epoch_accs,
        test_acc,
        test_mse,
        final_rank: session.sketch_config.map(|s| s.r),
        rank_decisions: decision_rows,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(format!("summary encode: {e}")))?,
    )?;
    Ok(summary)
}

/// The alternative recipe for inducing training pathology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblematicVariant {
    /// Kaiming init with bias −3.0, relu, SGD (the quantified recipe).
    NegativeBias,
    /// Xavier init with gain 0.5, tanh, SGD (alternative, no acceptance claims).
    XavierTanh,
}

/// Monitoring-demo options.
#[derive(Debug, Clone, Copy)]
pub struct MonitorDemoOptions {
    pub healthy: bool,
    pub variant: ProblematicVariant,
    pub seed: u64,
    pub paper_scale: bool,
    pub epochs: usize,
    pub timings: bool,
}

impl MonitorDemoOptions {
    pub fn new(healthy: bool, seed: u64) -> Self {
        MonitorDemoOptions {
            healthy,
            variant: ProblematicVariant::NegativeBias,
            seed,
            paper_scale: false,
            epochs: 10,
            timings: false,
        }
    }
}

/// Per-epoch aggregate view of a monitoring demo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoSummary {
    pub healthy: bool,
    pub epochs: usize,
    pub epoch_train_acc: Vec<f64>,
    pub epoch_train_loss: Vec<f64>,
    /// Mean stable rank over layers with defined (non-zero) Y sketches.
    pub epoch_mean_stable_rank: Vec<Option<f64>>,
    pub classes: usize,
}

/// Trains a deep MLP in monitor-only mode and emits per-epoch sketch
/// diagnostics.
///
/// Desk scale is an 8-layer, 256-wide network on a balanced synthetic
/// classification task; `paper_scale` switches to 16 layers of width 1024.
/// Healthy uses Adam with zero bias; the problematic configuration keeps
/// the same initializer family but biases every unit to −3.0 and descends
/// with plain SGD, which strangles gradient flow through the mostly-dead
/// relus. Sketches use rank 4 (`k = s = 9`) with β = 0.9.
pub fn run_monitoring_demo(opts: &MonitorDemoOptions, out_dir: &Path) -> Result<DemoSummary> {
    std::fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();
    let (n_layers, width) = if opts.paper_scale { (16, 1024) } else { (8, 256) };
    let (train_n, test_n) = (4096usize, 1024usize);
    let synth = SynthSettings::default();
    let classes = synth.classes;

    let total = train_n + test_n;
    let ds = make_synthetic_lowrank(total, synth.d0, classes, synth.latent_rank, opts.seed)?;
    let train = ds.subset(&(0..train_n).collect::<Vec<_>>());

    let mut layer_dims = vec![synth.d0];
    layer_dims.extend(std::iter::repeat(width).take(n_layers - 1));
    layer_dims.push(classes);
    let l_total = layer_dims.len() - 1;
    let sketched_layers: BTreeSet<usize> =
        (1..l_total).filter(|&j| layer_dims[j] == layer_dims[j - 1]).collect();

    let (activation, init_opts, use_adam) = if opts.healthy {
        (crate::mlp::Activation::Relu, InitOptions::default(), true)
    } else {
        match opts.variant {
            ProblematicVariant::NegativeBias => (
                crate::mlp::Activation::Relu,
                InitOptions { xavier_gain: 1.0, bias_value: -3.0 },
                false,
            ),
            ProblematicVariant::XavierTanh => (
                crate::mlp::Activation::Tanh,
                InitOptions { xavier_gain: 0.5, bias_value: 0.0 },
                false,
            ),
        }
    };

    let mlp_config = MlpConfig {
        layer_dims,
        activation,
        output: OutputKind::SoftmaxXent,
        sketched_layers: sketched_layers.clone(),
        grad_mode: GradMode::MonitorOnly,
    };
    mlp_config.validate()?;
    let params = init_params(&mlp_config, derive_seed(opts.seed, SEED_TAG_INIT), &init_opts)?;

    let lr = 1e-3;
    let batch_size = 128usize;
    let sk = SketchConfig::new(4, 0.9, 1, batch_size)?;
    let proj = make_nn_projections(derive_seed(opts.seed, SEED_TAG_PROJ), &sk, l_total);
    let mut states = BTreeMap::new();
    for &j in &sketched_layers {
        states.insert(j, init_layer_sketch(&sk, mlp_config.layer_dims[j])?);
    }
    let optimizer = if use_adam {
        Optimizer::Adam(AdamState::new(&params, lr))
    } else {
        Optimizer::Sgd { lr }
    };

    let mut session = TrainingSession {
        mlp_config,
        params,
        optimizer,
        sketch_config: Some(sk),
        proj: Some(proj),
        states,
        grad_mode: GradMode::MonitorOnly,
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, SEED_TAG_SHUFFLE));
    let mut records = Vec::new();
    let mut train_rows = Vec::new();
    let mut summary = DemoSummary {
        healthy: opts.healthy,
        epochs: opts.epochs,
        epoch_train_acc: Vec::new(),
        epoch_train_loss: Vec::new(),
        epoch_mean_stable_rank: Vec::new(),
        classes,
    };

    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let stats = session.run_epoch(&train, &order, batch_size)?;
        let wall_ms = if opts.timings { started.elapsed().as_millis() as u64 } else { 0 };

        let mut sr_sum = 0.0;
        let mut sr_count = 0usize;
        for (&layer, state) in session.monitor_layers() {
            if let Ok(sr) = stable_rank(state) {
                sr_sum += sr;
                sr_count += 1;
                records.push(MonitorRecord {
                    epoch,
                    layer,
                    z_norm: grad_norm_estimate(state),
                    stable_rank: sr,
                    train_loss: stats.loss,
                    train_acc: stats.acc,
                    current_r: 4,
                    wall_ms,
                });
            }
        }
        summary.epoch_train_acc.push(stats.acc);
        summary.epoch_train_loss.push(stats.loss);
        summary
            .epoch_mean_stable_rank
            .push(if sr_count > 0 { Some(sr_sum / sr_count as f64) } else { None });
        train_rows.push((epoch, stats.loss, stats.acc));
    }

    let mut metrics = Vec::new();
    emit_records(&records, &mut metrics)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics)?;
    write_train_log(&out_dir.join("train_log.csv"), &train_rows)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(format!("summary encode: {e}")))?,
    )?;
    Ok(summary)
}

/// Synthetic singular-value profiles for the sketch-bound benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumKind {
    /// `σ_i = 2^{−i}`.
    Geometric,
    /// `σ_i = i^{−2}`.
    Polynomial,
    /// 15 unit singular values, then zero.
    FlatThenZero,
}

impl SpectrumKind {
    pub const ALL: [SpectrumKind; 3] = [SpectrumKind::Geometric, SpectrumKind::Polynomial, SpectrumKind::FlatThenZero];

    pub fn name(&self) -> &'static str {
        match self {
            SpectrumKind::Geometric => "geometric",
            SpectrumKind::Polynomial => "polynomial",
            SpectrumKind::FlatThenZero => "flat-then-zero",
        }
    }

    fn values(&self, m: usize) -> Vec<f64> {
        match self {
            SpectrumKind::Geometric => (1..=m).map(|i| 0.5_f64.powi(i as i32)).collect(),
            SpectrumKind::Polynomial => (1..=m).map(|i| 1.0 / (i * i) as f64).collect(),
            SpectrumKind::FlatThenZero => (1..=m).map(|i| if i <= 15 { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Builds a dense matrix with the given singular-value profile by rotating
/// a diagonal core with seeded orthogonal factors.
pub fn spectrum_matrix(kind: SpectrumKind, n_s: usize, n_t: usize, seed: u64) -> DMatrix<f64> {
    let m = n_s.min(n_t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q1 = crate::control::gaussian_matrix(&mut rng, n_s, m).qr().q();
    let q2 = crate::control::gaussian_matrix(&mut rng, n_t, m).qr().q();
    let sv = kind.values(m);
    let mut core = DMatrix::zeros(m, m);
    for (i, s) in sv.iter().enumerate() {
        core[(i, i)] = *s;
    }
    q1 * core * q2.transpose()
}

/// One row of the sketch-bound benchmark.
#[derive(Debug, Clone, Serialize)]
pub struct BoundTrial {
    pub spectrum: &'static str,
    pub r: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub n_seeds: usize,
    pub tail: f64,
    pub bound: f64,
    pub mean_err: f64,
    pub ratio: f64,
}

/// Mean reconstruction error over `n_seeds` independent projection draws
/// against the `√6 τ_{r+1}` bound.
pub fn bound_trial(kind: SpectrumKind, r: usize, n_s: usize, n_t: usize, n_seeds: usize) -> Result<BoundTrial> {
    let u = spectrum_matrix(kind, n_s, n_t, 0x5eed_0000 + r as u64);
    let dims = ControlDims::new(r, n_s, n_t)?;
    let tail = tail_energy(&u, r)?;
    let mut total = 0.0;
    for seed in 0..n_seeds {
        let proj = make_control_projections(7_000 + seed as u64, &dims);
        let sk = sketch_static(&u, &proj, &dims)?;
        let (u_tilde, _) = reconstruct(&sk, &proj)?;
        total += (&u - u_tilde).norm();
    }
    let mean_err = total / n_seeds as f64;
    let bound = 6.0_f64.sqrt() * tail;
    Ok(BoundTrial {
        spectrum: kind.name(),
        r,
        n_s,
        n_t,
        n_seeds,
        tail,
        bound,
        mean_err,
        ratio: if bound > 0.0 { mean_err / bound } else { 0.0 },
    })
}

/// Runs the full bound benchmark and writes `bound_experiment.csv`.
pub fn run_sketch_bench(out_dir: &Path, n_seeds: usize, ranks: &[usize]) -> Result<Vec<BoundTrial>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("spectrum,r,n_s,n_t,n_seeds,tail,bound,mean_err,ratio\n");
    for kind in SpectrumKind::ALL {
        for &r in ranks {
            let t = bound_trial(kind, r, 200, 150, n_seeds)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                t.spectrum, t.r, t.n_s, t.n_t, t.n_seeds, t.tail, t.bound, t.mean_err, t.ratio
            ));
            rows.push(t);
        }
    }
    std::fs::write(out_dir.join("bound_experiment.csv"), csv)?;
    Ok(rows)
}
