//! Self-contained feedforward MLP with exact and sketched backpropagation.
//!
//! Layers compute `A^{[ℓ]} = σ(A^{[ℓ−1]} Wᵀ + 1 bᵀ)` with a linear output
//! layer. Error signals `δ` are always propagated exactly; sketching only
//! ever replaces the activation factor in the weight-gradient product
//! `∇W^{[ℓ]} = δᵀ A^{[ℓ−1]}`. A hidden layer `j` listed in
//! `sketched_layers` has its output activations EMA-sketched during the
//! forward pass and, once warm, dropped from the forward trace — the
//! consumer of `A^{[j]}`, layer `j+1`'s weight gradient, then uses the
//! reconstruction instead.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ema::{ema_update, LayerSketchState, NnProjectionSet, SketchConfig};
use crate::error::{Error, Result};
use crate::reconstruct::reconstruct_fused;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Output head / loss pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    /// Linear logits + softmax cross-entropy (mean over the batch).
    SoftmaxXent,
    /// Linear outputs + mean squared error (sum over outputs, mean over batch).
    Mse,
}

/// How the backward pass obtains weight gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Standard backpropagation from stored activations.
    Exact,
    /// Sketched weight gradients for layers fed by sketched activations.
    Sketched,
    /// Exact gradients, sketches maintained for diagnostics only.
    MonitorOnly,
}

/// Network architecture and gradient-mode configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `[d_0, d_1, …, d_L]`; `L = layer_dims.len() - 1 >= 2`.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub output: OutputKind,
    /// Hidden layers (1-based) whose output activations are sketched.
    /// Each must satisfy `d_{j-1} == d_j`; the output layer is never
    /// sketched. Empty in exact mode.
    pub sketched_layers: BTreeSet<usize>,
    pub grad_mode: GradMode,
}

impl MlpConfig {
    /// Number of weight layers `L`.
    pub fn n_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers() < 2 {
            return Err(Error::Config("need at least two layers (L >= 2)".into()));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all layer dimensions must be >= 1".into()));
        }
        if self.grad_mode == GradMode::Exact && !self.sketched_layers.is_empty() {
            return Err(Error::Config("sketched_layers must be empty in exact mode".into()));
        }
        let l = self.n_layers();
        for &j in &self.sketched_layers {
            if j == 0 || j >= l {
                return Err(Error::Config(format!(
                    "sketched layer {j} out of range 1..={} (output layer is never sketched)",
                    l - 1
                )));
            }
            if self.layer_dims[j] != self.layer_dims[j - 1] {
                return Err(Error::Config(format!(
                    "layer {j} cannot be sketched: input width {} != layer width {}",
                    self.layer_dims[j - 1],
                    self.layer_dims[j]
                )));
            }
        }
        Ok(())
    }
}

/// One layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `d_ℓ × d_{ℓ−1}` weight matrix.
    pub w: DMatrix<f64>,
    /// Length-`d_ℓ` bias.
    pub b: DVector<f64>,
}

/// Weight initialization knobs.
///
/// The scheme follows the activation: Kaiming-uniform for relu,
/// Xavier-uniform for tanh. `xavier_gain` scales the Xavier bound;
/// `bias_value` fills every bias (0.0 for ordinary training, −3.0 in the
/// problematic monitoring configuration).
#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub xavier_gain: f64,
    pub bias_value: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { xavier_gain: 1.0, bias_value: 0.0 }
    }
}

/// Seeded parameter initialization.
pub fn init_params(config: &MlpConfig, seed: u64, opts: &InitOptions) -> Result<Vec<LayerParams>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(config.n_layers());
    for l in 1..=config.n_layers() {
        let fan_in = config.layer_dims[l - 1];
        let fan_out = config.layer_dims[l];
        let bound = match config.activation {
            Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            Activation::Tanh => opts.xavier_gain * (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen::<f64>() * 2.0 * bound - bound);
        let b = DVector::from_element(fan_out, opts.bias_value);
        params.push(LayerParams { w, b });
    }
    Ok(params)
}

/// Forward-pass record.
///
/// `activations[0]` is the input batch and `activations[ℓ]` the output of
/// layer `ℓ`; in sketched mode a warm sketched layer's slot is `None` —
/// that absence is the per-iteration memory saving. Pre-activations are
/// always retained; they carry the `σ'` factors for exact δ propagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Option<DMatrix<f64>>>,
    /// `pre_activations[ℓ-1]` is the pre-activation of layer `ℓ`.
    pub pre_activations: Vec<DMatrix<f64>>,
}

/// Mutable sketching context threaded through the forward pass.
pub struct SketchingCtx<'a> {
    pub config: &'a SketchConfig,
    pub proj: &'a NnProjectionSet,
    pub states: &'a mut BTreeMap<usize, LayerSketchState>,
}

/// Gradients for every layer, plus the per-layer error signals.
#[derive(Debug, Clone)]
pub struct GradientSet {
    /// `d_w[ℓ-1]` matches `params[ℓ-1].w`.
    pub d_w: Vec<DMatrix<f64>>,
    pub d_b: Vec<DVector<f64>>,
    /// `deltas[ℓ-1]` is `δ^{[ℓ]}`, the `N_b × d_ℓ` pre-activation gradient.
    pub deltas: Vec<DMatrix<f64>>,
}

/// Classification labels or regression targets for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a DMatrix<f64>),
}

fn apply_activation(z: &DMatrix<f64>, act: Activation) -> DMatrix<f64> {
    match act {
        Activation::Tanh => z.map(|v| v.tanh()),
        Activation::Relu => z.map(|v| v.max(0.0)),
    }
}

/// `σ'` evaluated from the stored pre-activation.
fn activation_derivative(z: &DMatrix<f64>, act: Activation) -> DMatrix<f64> {
    match act {
        Activation::Tanh => z.map(|v| {
            let t = v.tanh();
            1.0 - t * t
        }),
        Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Forward pass over one batch.
///
/// In sketched and monitor-only modes every sketched layer's EMA state is
/// updated mid-pass. In sketched mode a layer that has finished warmup
/// (`n_updates >= warmup_iters` before this update) no longer stores its
/// output in the trace. Sketch maintenance never perturbs the computed
/// activations: logits are bit-identical across gradient modes.
pub fn forward(
    params: &[LayerParams],
    config: &MlpConfig,
    x_batch: &DMatrix<f64>,
    mut sketching: Option<SketchingCtx<'_>>,
) -> Result<(DMatrix<f64>, ForwardTrace)> {
    config.validate()?;
    let l_total = config.n_layers();
    if params.len() != l_total {
        return Err(Error::shape("forward params", format!("{l_total}"), format!("{}", params.len())));
    }
    if x_batch.ncols() != config.layer_dims[0] {
        return Err(Error::shape(
            "forward input width",
            format!("{}", config.layer_dims[0]),
            format!("{}", x_batch.ncols()),
        ));
    }
    match (config.grad_mode, sketching.is_some()) {
        (GradMode::Exact, true) => {
            return Err(Error::Config("exact mode does not take a sketching context".into()))
        }
        (GradMode::Sketched | GradMode::MonitorOnly, false) if !config.sketched_layers.is_empty() => {
            return Err(Error::Config("sketched/monitor-only mode requires a sketching context".into()))
        }
        _ => {}
    }

    let mut activations: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(l_total + 1);
    let mut pre_activations = Vec::with_capacity(l_total);
    activations.push(Some(x_batch.clone()));
    let mut current = x_batch.clone();

    for l in 1..=l_total {
        let p = &params[l - 1];
        if p.w.ncols() != current.ncols() {
            return Err(Error::shape(
                format!("layer {l} weights"),
                format!("cols {}", current.ncols()),
                format!("cols {}", p.w.ncols()),
            ));
        }
        let mut z = &current * p.w.transpose();
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                z[(i, j)] += p.b[j];
            }
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("pre-activations of layer {l}")));
        }
        let a = if l < l_total { apply_activation(&z, config.activation) } else { z.clone() };
        pre_activations.push(z);

        let mut retain = true;
        if config.sketched_layers.contains(&l) {
            if let Some(ctx) = sketching.as_mut() {
                let state = ctx.states.get_mut(&l).ok_or_else(|| {
                    Error::Config(format!("no sketch state for sketched layer {l}"))
                })?;
                let warm = state.n_updates >= ctx.config.warmup_iters;
                ema_update(state, ctx.proj, l, &current, &a, ctx.config.beta)?;
                if config.grad_mode == GradMode::Sketched && warm {
                    retain = false;
                }
            }
        }
        activations.push(if retain { Some(a.clone()) } else { None });
        current = a;
    }

    Ok((current, ForwardTrace { activations, pre_activations }))
}

/// Plain inference: the affine/activation chain with no trace and no
/// sketch updates.
pub fn predict(params: &[LayerParams], config: &MlpConfig, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l_total = config.n_layers();
    let mut current = x.clone();
    for (l, p) in params.iter().enumerate() {
        let mut z = &current * p.w.transpose();
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                z[(i, j)] += p.b[j];
            }
        }
        current = if l + 1 < l_total { apply_activation(&z, config.activation) } else { z };
    }
    Ok(current)
}

/// Loss value and output-layer error signal.
///
/// Softmax cross-entropy: `loss = −mean log p_y`, `δ = (softmax − onehot)/N_b`.
/// MSE: `loss = ‖ŷ − y‖_F² / N_b`, `δ = 2(ŷ − y)/N_b`.
pub fn loss_and_delta(logits: &DMatrix<f64>, targets: Targets<'_>, kind: OutputKind) -> Result<(f64, DMatrix<f64>)> {
    let nb = logits.nrows();
    match (kind, targets) {
        (OutputKind::SoftmaxXent, Targets::Labels(labels)) => {
            if labels.len() != nb {
                return Err(Error::shape("labels", format!("{nb}"), format!("{}", labels.len())));
            }
            let classes = logits.ncols();
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
            }
            let mut delta = DMatrix::zeros(nb, classes);
            let mut loss = 0.0;
            for i in 0..nb {
                let row = logits.row(i);
                let m = row.max();
                let mut denom = 0.0;
                for j in 0..classes {
                    denom += (row[j] - m).exp();
                }
                let log_denom = denom.ln() + m;
                loss -= logits[(i, labels[i])] - log_denom;
                for j in 0..classes {
                    let p = (row[j] - log_denom).exp();
                    delta[(i, j)] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / nb as f64;
                }
            }
            Ok((loss / nb as f64, delta))
        }
        (OutputKind::Mse, Targets::Values(y)) => {
            if y.shape() != logits.shape() {
                return Err(Error::shape(
                    "mse targets",
                    format!("{}x{}", logits.nrows(), logits.ncols()),
                    format!("{}x{}", y.nrows(), y.ncols()),
                ));
            }
            let diff = logits - y;
            let loss = diff.norm_squared() / nb as f64;
            Ok((loss, diff * (2.0 / nb as f64)))
        }
        (OutputKind::SoftmaxXent, Targets::Values(_)) => {
            Err(Error::Config("softmax-xent requires label targets".into()))
        }
        (OutputKind::Mse, Targets::Labels(_)) => Err(Error::Config("mse requires value targets".into())),
    }
}

enum ReconSource<'a> {
    None,
    Sketches(&'a BTreeMap<usize, LayerSketchState>, &'a NnProjectionSet),
}

fn backward_core(
    trace: &ForwardTrace,
    params: &[LayerParams],
    config: &MlpConfig,
    targets: Targets<'_>,
    recon: ReconSource<'_>,
) -> Result<GradientSet> {
    let l_total = config.n_layers();
    let logits = trace.activations[l_total]
        .as_ref()
        .ok_or_else(|| Error::Config("output activations missing from trace".into()))?;
    let (_, mut delta) = loss_and_delta(logits, targets, config.output)?;

    let mut d_w: Vec<DMatrix<f64>> = Vec::with_capacity(l_total);
    let mut d_b: Vec<DVector<f64>> = Vec::with_capacity(l_total);
    let mut deltas: Vec<DMatrix<f64>> = Vec::with_capacity(l_total);
    // filled in reverse, flipped at the end
    for l in (1..=l_total).rev() {
        let grad_w = match &trace.activations[l - 1] {
            Some(a_in) => delta.transpose() * a_in,
            None => match &recon {
                ReconSource::Sketches(states, proj) => {
                    let state = states.get(&(l - 1)).ok_or_else(|| {
                        Error::Config(format!("activation {} missing and no sketch state", l - 1))
                    })?;
                    if state.n_updates == 0 {
                        return Err(Error::ZeroSketch(format!(
                            "cold sketches for layer {} without warmup fallback",
                            l - 1
                        )));
                    }
                    let rec = reconstruct_fused(state, proj)?;
                    delta.transpose() * rec.a_tilde
                }
                ReconSource::None => {
                    return Err(Error::Config(format!(
                        "activation {} missing from trace in exact backward",
                        l - 1
                    )))
                }
            },
        };
        let grad_b = DVector::from_fn(delta.ncols(), |j, _| delta.column(j).sum());
        deltas.push(delta.clone());
        d_w.push(grad_w);
        d_b.push(grad_b);
        if l > 1 {
            let mut g = &delta * &params[l - 1].w;
            let dphi = activation_derivative(&trace.pre_activations[l - 2], config.activation);
            g.component_mul_assign(&dphi);
            delta = g;
        }
    }
    d_w.reverse();
    d_b.reverse();
    deltas.reverse();
    Ok(GradientSet { d_w, d_b, deltas })
}

/// Standard chain-rule backpropagation from stored activations.
pub fn backward_exact(
    trace: &ForwardTrace,
    params: &[LayerParams],
    config: &MlpConfig,
    targets: Targets<'_>,
) -> Result<GradientSet> {
    backward_core(trace, params, config, targets, ReconSource::None)
}

/// Backpropagation with sketched weight gradients.
///
/// δ is computed and propagated exactly through every layer; where the
/// forward pass dropped a sketched activation, the weight-gradient product
/// uses the fused reconstruction instead. During warmup the stored
/// activations are still present and the result matches [`backward_exact`].
pub fn backward_sketched(
    trace: &ForwardTrace,
    params: &[LayerParams],
    config: &MlpConfig,
    targets: Targets<'_>,
    sketches: &BTreeMap<usize, LayerSketchState>,
    proj: &NnProjectionSet,
) -> Result<GradientSet> {
    backward_core(trace, params, config, targets, ReconSource::Sketches(sketches, proj))
}

/// Adam optimizer state (bias-corrected, per-parameter moments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m_w: Vec<DMatrix<f64>>,
    pub v_w: Vec<DMatrix<f64>>,
    pub m_b: Vec<DVector<f64>>,
    pub v_b: Vec<DVector<f64>>,
    pub t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[LayerParams], lr: f64) -> Self {
        AdamState {
            m_w: params.iter().map(|p| DMatrix::zeros(p.w.nrows(), p.w.ncols())).collect(),
            v_w: params.iter().map(|p| DMatrix::zeros(p.w.nrows(), p.w.ncols())).collect(),
            m_b: params.iter().map(|p| DVector::zeros(p.b.len())).collect(),
            v_b: params.iter().map(|p| DVector::zeros(p.b.len())).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; `params` and `adam` advance together.
pub fn adam_step(params: &mut [LayerParams], grads: &GradientSet, adam: &mut AdamState) -> Result<()> {
    if grads.d_w.len() != params.len() {
        return Err(Error::shape("adam gradients", format!("{}", params.len()), format!("{}", grads.d_w.len())));
    }
    for g in grads.d_w.iter() {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("weight gradients".into()));
        }
    }
    for g in grads.d_b.iter() {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bias gradients".into()));
        }
    }
    adam.t += 1;
    let t = adam.t as i32;
    let (b1, b2) = (adam.beta1, adam.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for l in 0..params.len() {
        let gw = &grads.d_w[l];
        adam.m_w[l] = &adam.m_w[l] * b1 + gw * (1.0 - b1);
        adam.v_w[l] = &adam.v_w[l] * b2 + gw.component_mul(gw) * (1.0 - b2);
        let gb = &grads.d_b[l];
        adam.m_b[l] = &adam.m_b[l] * b1 + gb * (1.0 - b1);
        adam.v_b[l] = &adam.v_b[l] * b2 + gb.component_mul(gb) * (1.0 - b2);
        let p = &mut params[l];
        for i in 0..p.w.nrows() {
            for j in 0..p.w.ncols() {
                let mh = adam.m_w[l][(i, j)] / bc1;
                let vh = adam.v_w[l][(i, j)] / bc2;
                p.w[(i, j)] -= adam.lr * mh / (vh.sqrt() + adam.eps);
            }
        }
        for i in 0..p.b.len() {
            let mh = adam.m_b[l][i] / bc1;
            let vh = adam.v_b[l][i] / bc2;
            p.b[i] -= adam.lr * mh / (vh.sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// Plain SGD update, used by the problematic monitoring configuration.
pub fn sgd_step(params: &mut [LayerParams], grads: &GradientSet, lr: f64) -> Result<()> {
    if grads.d_w.len() != params.len() {
        return Err(Error::shape("sgd gradients", format!("{}", params.len()), format!("{}", grads.d_w.len())));
    }
    for (l, p) in params.iter_mut().enumerate() {
        if !grads.d_w[l].iter().all(|v| v.is_finite()) || !grads.d_b[l].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        p.w -= &grads.d_w[l] * lr;
        p.b -= &grads.d_b[l] * lr;
    }
    Ok(())
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut hits = 0usize;
    for i in 0..logits.nrows() {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..logits.ncols() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / logits.nrows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn config(dims: &[usize], act: Activation, out: OutputKind) -> MlpConfig {
        MlpConfig {
            layer_dims: dims.to_vec(),
            activation: act,
            output: out,
            sketched_layers: BTreeSet::new(),
            grad_mode: GradMode::Exact,
        }
    }

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::control::gaussian_matrix(&mut rng, rows, cols)
    }

    #[test]
    fn zero_input_zero_bias_tanh_gives_zero() {
        let cfg = config(&[4, 5, 3], Activation::Tanh, OutputKind::Mse);
        let params = init_params(&cfg, 1, &InitOptions::default()).unwrap();
        let x = DMatrix::zeros(6, 4);
        let (logits, trace) = forward(&params, &cfg, &x, None).unwrap();
        assert_eq!(logits.abs().max(), 0.0);
        for a in trace.activations.iter() {
            assert_eq!(a.as_ref().unwrap().abs().max(), 0.0);
        }
    }

    #[test]
    fn identity_layers_pass_positive_inputs_through() {
        let cfg = config(&[3, 3, 3], Activation::Relu, OutputKind::Mse);
        let params = vec![
            LayerParams { w: DMatrix::identity(3, 3), b: DVector::zeros(3) },
            LayerParams { w: DMatrix::identity(3, 3), b: DVector::zeros(3) },
        ];
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.5, 0.25, 4.0]);
        let (logits, _) = forward(&params, &cfg, &x, None).unwrap();
        assert!((logits - x).abs().max() <= 1e-15);
    }

    /// Central finite differences over every parameter.
    fn finite_diff_check(cfg: &MlpConfig, seed: u64, nb: usize, tol: f64) {
        let params = init_params(cfg, seed, &InitOptions::default()).unwrap();
        let x = random_matrix(seed + 1, nb, cfg.layer_dims[0]);
        let out_dim = *cfg.layer_dims.last().unwrap();
        let labels: Vec<usize> = (0..nb).map(|i| i % out_dim).collect();
        let values = random_matrix(seed + 2, nb, out_dim);
        let targets = match cfg.output {
            OutputKind::SoftmaxXent => Targets::Labels(&labels),
            OutputKind::Mse => Targets::Values(&values),
        };
        let (_, trace) = forward(&params, cfg, &x, None).unwrap();
        let grads = backward_exact(&trace, &params, cfg, targets).unwrap();

        let loss_of = |p: &[LayerParams]| -> f64 {
            let logits = predict(p, cfg, &x).unwrap();
            loss_and_delta(&logits, targets, cfg.output).unwrap().0
        };

        for l in 0..params.len() {
            for i in 0..params[l].w.nrows() {
                for j in 0..params[l].w.ncols() {
                    let scale = params[l].w[(i, j)].abs().max(1.0);
                    let h = 1e-6 * scale;
                    let mut pp = params.clone();
                    pp[l].w[(i, j)] += h;
                    let up = loss_of(&pp);
                    pp[l].w[(i, j)] -= 2.0 * h;
                    let dn = loss_of(&pp);
                    let fd = (up - dn) / (2.0 * h);
                    let an = grads.d_w[l][(i, j)];
                    if an.abs() > 1e-8 {
                        let rel = (fd - an).abs() / an.abs().max(fd.abs());
                        assert!(rel <= tol, "layer {l} w({i},{j}): fd={fd} an={an} rel={rel}");
                    }
                }
            }
            for i in 0..params[l].b.len() {
                let h = 1e-6;
                let mut pp = params.clone();
                pp[l].b[i] += h;
                let up = loss_of(&pp);
                pp[l].b[i] -= 2.0 * h;
                let dn = loss_of(&pp);
                let fd = (up - dn) / (2.0 * h);
                let an = grads.d_b[l][i];
                if an.abs() > 1e-8 {
                    let rel = (fd - an).abs() / an.abs().max(fd.abs());
                    assert!(rel <= tol, "layer {l} b({i}): fd={fd} an={an} rel={rel}");
                }
            }
        }
    }

    #[test]
    fn finite_difference_2_3_2() {
        let cfg = config(&[2, 3, 2], Activation::Tanh, OutputKind::SoftmaxXent);
        finite_diff_check(&cfg, 11, 4, 1e-5);
    }

    #[test]
    fn finite_difference_deeper_mse() {
        let cfg = config(&[10, 16, 16, 10], Activation::Tanh, OutputKind::Mse);
        finite_diff_check(&cfg, 13, 4, 1e-5);
    }

    #[test]
    fn finite_difference_relu_away_from_kinks() {
        // Bias pushes every pre-activation well above zero so the relu
        // derivative is constant in the FD neighborhood.
        let cfg = config(&[3, 4, 2], Activation::Relu, OutputKind::Mse);
        let mut params = init_params(&cfg, 17, &InitOptions::default()).unwrap();
        for p in params.iter_mut() {
            p.b.fill(2.0);
        }
        let x = random_matrix(18, 4, 3).map(|v| v.abs() * 0.1);
        let values = random_matrix(19, 4, 2);
        let (_, trace) = forward(&params, &cfg, &x, None).unwrap();
        let grads = backward_exact(&trace, &params, &cfg, Targets::Values(&values)).unwrap();
        let loss_of = |p: &[LayerParams]| -> f64 {
            let logits = predict(p, &cfg, &x).unwrap();
            loss_and_delta(&logits, Targets::Values(&values), OutputKind::Mse).unwrap().0
        };
        for l in 0..params.len() {
            for i in 0..params[l].w.nrows() {
                for j in 0..params[l].w.ncols() {
                    let h = 1e-6;
                    let mut pp = params.clone();
                    pp[l].w[(i, j)] += h;
                    let up = loss_of(&pp);
                    pp[l].w[(i, j)] -= 2.0 * h;
                    let dn = loss_of(&pp);
                    let fd = (up - dn) / (2.0 * h);
                    let an = grads.d_w[l][(i, j)];
                    if an.abs() > 1e-8 {
                        let rel = (fd - an).abs() / an.abs().max(fd.abs());
                        assert!(rel <= 1e-5, "layer {l} ({i},{j}): rel={rel}");
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_fit_mse_gives_zero_gradients() {
        let cfg = config(&[3, 4, 2], Activation::Tanh, OutputKind::Mse);
        let params = init_params(&cfg, 5, &InitOptions::default()).unwrap();
        let x = random_matrix(6, 5, 3);
        let (logits, trace) = forward(&params, &cfg, &x, None).unwrap();
        let grads = backward_exact(&trace, &params, &cfg, Targets::Values(&logits)).unwrap();
        for g in grads.d_w.iter() {
            assert_eq!(g.abs().max(), 0.0);
        }
    }

    #[test]
    fn mse_head_gradient_matches_least_squares_closed_form() {
        // The output layer of an MSE net is a linear regression on the last
        // hidden activations: dW_L = 2/N_b (yhat - y)^T A^{L-1}.
        let cfg = config(&[4, 6, 3], Activation::Tanh, OutputKind::Mse);
        let params = init_params(&cfg, 21, &InitOptions::default()).unwrap();
        let x = random_matrix(22, 8, 4);
        let y = random_matrix(23, 8, 3);
        let (logits, trace) = forward(&params, &cfg, &x, None).unwrap();
        let grads = backward_exact(&trace, &params, &cfg, Targets::Values(&y)).unwrap();
        let hidden = trace.activations[1].as_ref().unwrap();
        let closed = (logits - &y).transpose() * hidden * (2.0 / 8.0);
        assert!((&grads.d_w[1] - closed).abs().max() <= 1e-10);
    }

    #[test]
    fn softmax_loss_values() {
        // uniform logits -> ln C
        let logits = DMatrix::from_element(5, 7, 0.3);
        let labels = vec![0usize, 1, 2, 3, 4];
        let (loss, _) = loss_and_delta(&logits, Targets::Labels(&labels), OutputKind::SoftmaxXent).unwrap();
        assert_abs_diff_eq!(loss, (7.0f64).ln(), epsilon = 1e-12);

        // near-perfect one-hot prediction -> loss ~ 0, delta ~ 0
        let mut strong = DMatrix::from_element(3, 4, -30.0);
        for i in 0..3 {
            strong[(i, i)] = 30.0;
        }
        let labels = vec![0usize, 1, 2];
        let (loss, delta) = loss_and_delta(&strong, Targets::Labels(&labels), OutputKind::SoftmaxXent).unwrap();
        assert!(loss < 1e-10);
        assert!(delta.abs().max() < 1e-10);
    }

    #[test]
    fn softmax_delta_matches_finite_differences() {
        let logits = random_matrix(31, 4, 3);
        let labels = vec![2usize, 0, 1, 2];
        let (_, delta) = loss_and_delta(&logits, Targets::Labels(&labels), OutputKind::SoftmaxXent).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let h = 1e-6;
                let mut up = logits.clone();
                up[(i, j)] += h;
                let mut dn = logits.clone();
                dn[(i, j)] -= h;
                let lu = loss_and_delta(&up, Targets::Labels(&labels), OutputKind::SoftmaxXent).unwrap().0;
                let ld = loss_and_delta(&dn, Targets::Labels(&labels), OutputKind::SoftmaxXent).unwrap().0;
                let fd = (lu - ld) / (2.0 * h);
                let rel = (fd - delta[(i, j)]).abs() / delta[(i, j)].abs().max(1e-12);
                assert!(rel <= 1e-6 || (fd - delta[(i, j)]).abs() <= 1e-10, "({i},{j}) rel={rel}");
            }
        }
    }

    #[test]
    fn invalid_labels_rejected() {
        let logits = DMatrix::zeros(2, 3);
        let labels = vec![0usize, 3];
        assert!(loss_and_delta(&logits, Targets::Labels(&labels), OutputKind::SoftmaxXent).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = config(&[3, 4, 2], Activation::Tanh, OutputKind::Mse);
        let mut params = init_params(&cfg, 41, &InitOptions::default()).unwrap();
        let before = params.clone();
        let mut adam = AdamState::new(&params, 1e-3);
        let grads = GradientSet {
            d_w: params.iter().map(|p| DMatrix::zeros(p.w.nrows(), p.w.ncols())).collect(),
            d_b: params.iter().map(|p| DVector::zeros(p.b.len())).collect(),
            deltas: Vec::new(),
        };
        adam_step(&mut params, &grads, &mut adam).unwrap();
        assert_eq!(adam.t, 1);
        for (a, b) in params.iter().zip(before.iter()) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        // Scalar oracle: with constant g, bias-corrected Adam steps approach
        // lr * sign(g).
        let cfg = config(&[1, 1, 1], Activation::Tanh, OutputKind::Mse);
        let mut params = init_params(&cfg, 43, &InitOptions::default()).unwrap();
        let mut adam = AdamState::new(&params, 1e-3);
        let g = 0.37;
        let grads = GradientSet {
            d_w: vec![DMatrix::from_element(1, 1, g), DMatrix::from_element(1, 1, g)],
            d_b: vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.0)],
            deltas: Vec::new(),
        };
        let mut prev = params[0].w[(0, 0)];
        let mut last_step = 0.0;
        for _ in 0..10_000 {
            adam_step(&mut params, &grads, &mut adam).unwrap();
            last_step = prev - params[0].w[(0, 0)];
            prev = params[0].w[(0, 0)];
        }
        assert!((last_step - adam.lr).abs() / adam.lr < 0.01, "step {last_step}");
    }

    #[test]
    fn adam_deterministic() {
        let cfg = config(&[3, 4, 2], Activation::Tanh, OutputKind::Mse);
        let run = || {
            let mut params = init_params(&cfg, 47, &InitOptions::default()).unwrap();
            let mut adam = AdamState::new(&params, 1e-3);
            let x = random_matrix(48, 6, 3);
            let y = random_matrix(49, 6, 2);
            for _ in 0..25 {
                let (_, trace) = forward(&params, &cfg, &x, None).unwrap();
                let grads = backward_exact(&trace, &params, &cfg, Targets::Values(&y)).unwrap();
                adam_step(&mut params, &grads, &mut adam).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.w, y.w);
            assert_eq!(x.b, y.b);
        }
    }

    #[test]
    fn nonfinite_gradients_rejected() {
        let cfg = config(&[2, 2, 2], Activation::Tanh, OutputKind::Mse);
        let mut params = init_params(&cfg, 51, &InitOptions::default()).unwrap();
        let mut adam = AdamState::new(&params, 1e-3);
        let grads = GradientSet {
            d_w: vec![DMatrix::from_element(2, 2, f64::NAN), DMatrix::zeros(2, 2)],
            d_b: vec![DVector::zeros(2), DVector::zeros(2)],
            deltas: Vec::new(),
        };
        assert!(matches!(adam_step(&mut params, &grads, &mut adam), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(&[3, 3], Activation::Tanh, OutputKind::Mse);
        assert!(cfg.validate().is_err()); // L = 1

        cfg = config(&[4, 8, 8, 2], Activation::Relu, OutputKind::SoftmaxXent);
        cfg.grad_mode = GradMode::Sketched;
        cfg.sketched_layers.insert(2);
        assert!(cfg.validate().is_ok());
        cfg.sketched_layers.insert(1); // d0=4 != d1=8
        assert!(cfg.validate().is_err());
        cfg.sketched_layers.remove(&1);
        cfg.sketched_layers.insert(3); // output layer
        assert!(cfg.validate().is_err());

        cfg.sketched_layers.clear();
        cfg.sketched_layers.insert(2);
        cfg.grad_mode = GradMode::Exact;
        assert!(cfg.validate().is_err()); // non-empty in exact mode
    }
}
