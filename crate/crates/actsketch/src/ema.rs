//! EMA sketches of per-layer batch activations.
//!
//! For a layer of width `d` and batch size `N_b`, three sketches are kept
//! and refreshed once per forward pass with momentum `β`:
//!
//! ```text
//! X_s ← β X_s + (1−β) A_prevᵀ Υ             (d × k, input patterns)
//! Y_s ← β Y_s + (1−β) A_currᵀ Ω             (d × k, output patterns)
//! Z_s ← β Z_s + (1−β) (A_currᵀ Φ) ⊙ Ψᵀ     (d × s, interactions)
//! ```
//!
//! with `k = s = 2r + 1`. `Υ, Ω, Φ` are shared across layers and sized for
//! the batch dimension; `Ψ` is a per-layer weight vector that scales column
//! `j` of `A_currᵀ Φ` by `Ψ_j`. Unrolling the recursion shows each sketch
//! is exactly the corresponding projection of the exponentially-weighted
//! activation matrix
//!
//! ```text
//! A_EMA(n) = (1−β) Σ_{j=1..n} β^{n−j} A(j)ᵀ
//! ```
//!
//! which is never formed in the training path; [`ema_weighted_activations`]
//! computes it by brute force for validation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::gaussian_matrix;
use crate::error::{Error, Result};

/// A batch activation matrix: `N_b` rows (samples) by `d` columns (units).
pub type BatchActivations = DMatrix<f64>;

/// Sketch sizing and EMA hyperparameters for network activation sketching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    /// Target rank.
    pub r: usize,
    /// Range sketch width, always `2r + 1`.
    pub k: usize,
    /// Interaction sketch width, always equal to `k` here.
    pub s: usize,
    /// EMA momentum in `[0, 1)`.
    pub beta: f64,
    /// Iterations after (re)initialization during which the backward pass
    /// keeps using exact activations. Minimum 1.
    pub warmup_iters: usize,
    /// Batch size the projections are sized for.
    pub batch_size: usize,
}

impl SketchConfig {
    pub fn new(r: usize, beta: f64, warmup_iters: usize, batch_size: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("sketch rank r must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must be in [0, 1), got {beta}")));
        }
        if warmup_iters == 0 {
            return Err(Error::Config("warmup_iters must be >= 1".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let k = 2 * r + 1;
        Ok(SketchConfig { r, k, s: k, beta, warmup_iters, batch_size })
    }
}

/// Shared batch projections plus per-layer interaction weights.
///
/// `Υ, Ω` are `N_b × k`, `Φ` is `N_b × s`, and `Ψ` is one length-`s` vector
/// per layer. Generation is deterministic in `(seed, config, layer count)`:
/// ChaCha8 seeded with `seed`, matrices filled row-major in the order
/// Υ, Ω, Φ, then Ψ for each layer in index order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NnProjectionSet {
    pub upsilon: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    /// One interaction weight vector per layer, indexed by layer number
    /// starting at 1 (`psi_per_layer[ℓ-1]` belongs to layer `ℓ`).
    pub psi_per_layer: Vec<DVector<f64>>,
    pub seed: u64,
}

impl NnProjectionSet {
    /// The `Ψ` vector for 1-based layer index `layer`.
    pub fn psi(&self, layer: usize) -> Result<&DVector<f64>> {
        if layer == 0 || layer > self.psi_per_layer.len() {
            return Err(Error::IndexOutOfRange {
                what: "psi layer".into(),
                index: layer,
                len: self.psi_per_layer.len() + 1,
            });
        }
        Ok(&self.psi_per_layer[layer - 1])
    }
}

/// Generates the projection set for `n_layers` layers.
pub fn make_nn_projections(seed: u64, config: &SketchConfig, n_layers: usize) -> NnProjectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = config.batch_size;
    let upsilon = gaussian_matrix(&mut rng, nb, config.k);
    let omega = gaussian_matrix(&mut rng, nb, config.k);
    let phi = gaussian_matrix(&mut rng, nb, config.s);
    let psi_per_layer = (0..n_layers)
        .map(|_| {
            let m = gaussian_matrix(&mut rng, config.s, 1);
            DVector::from_column_slice(m.as_slice())
        })
        .collect();
    NnProjectionSet { upsilon, omega, phi, psi_per_layer, seed }
}

/// Per-layer EMA sketch state.
///
/// All three matrices are zero iff `n_updates == 0`; shapes are fixed for
/// the lifetime of a rank setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSketchState {
    /// Input-pattern sketch, `d × k`.
    pub x_s: DMatrix<f64>,
    /// Output-pattern sketch, `d × k`.
    pub y_s: DMatrix<f64>,
    /// Interaction sketch, `d × s`.
    pub z_s: DMatrix<f64>,
    /// Layer width.
    pub d: usize,
    /// Number of EMA updates applied since (re)initialization.
    pub n_updates: usize,
}

/// Zero-initialized sketch state for a layer of width `d`.
pub fn init_layer_sketch(config: &SketchConfig, d: usize) -> Result<LayerSketchState> {
    if d == 0 {
        return Err(Error::Config("layer width must be >= 1".into()));
    }
    Ok(LayerSketchState {
        x_s: DMatrix::zeros(d, config.k),
        y_s: DMatrix::zeros(d, config.k),
        z_s: DMatrix::zeros(d, config.s),
        d,
        n_updates: 0,
    })
}

/// One EMA update of a layer's sketches from the current batch.
///
/// `a_prev` is the layer's input batch `A^{[ℓ−1]}` (feeds `X_s`) and
/// `a_curr` its output batch `A^{[ℓ]}` (feeds `Y_s` and `Z_s`); both must
/// be `N_b × d` with `d` equal to the state's layer width.
pub fn ema_update(
    state: &mut LayerSketchState,
    proj: &NnProjectionSet,
    layer_idx: usize,
    a_prev: &BatchActivations,
    a_curr: &BatchActivations,
    beta: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must be in [0, 1), got {beta}")));
    }
    let nb = proj.upsilon.nrows();
    if a_prev.nrows() != nb || a_curr.nrows() != nb {
        return Err(Error::shape(
            "ema_update batch rows",
            format!("{nb}"),
            format!("{}x{}", a_prev.nrows(), a_curr.nrows()),
        ));
    }
    if a_prev.ncols() != state.d || a_curr.ncols() != state.d {
        return Err(Error::shape(
            "ema_update layer width",
            format!("{}", state.d),
            format!("prev {} / curr {}", a_prev.ncols(), a_curr.ncols()),
        ));
    }
    let psi = proj.psi(layer_idx)?;
    let one_m = 1.0 - beta;

    let x_new = a_prev.transpose() * &proj.upsilon;
    let y_new = a_curr.transpose() * &proj.omega;
    let mut z_new = a_curr.transpose() * &proj.phi;
    for j in 0..z_new.ncols() {
        let w = psi[j];
        for i in 0..z_new.nrows() {
            z_new[(i, j)] *= w;
        }
    }

    state.x_s = &state.x_s * beta + x_new * one_m;
    state.y_s = &state.y_s * beta + y_new * one_m;
    state.z_s = &state.z_s * beta + z_new * one_m;
    state.n_updates += 1;
    Ok(())
}

/// Brute-force exponentially-weighted activation matrix
/// `(1−β) Σ_j β^{n−j} A(j)ᵀ`, for validation only — the training path never
/// forms this `d × N_b` matrix.
pub fn ema_weighted_activations(history: &[BatchActivations], beta: f64) -> Result<DMatrix<f64>> {
    let last = history
        .last()
        .ok_or_else(|| Error::Config("ema_weighted_activations: empty history".into()))?;
    let n = history.len();
    let mut acc = DMatrix::zeros(last.ncols(), last.nrows());
    for (j, a) in history.iter().enumerate() {
        let weight = (1.0 - beta) * beta.powi((n - 1 - j) as i32);
        acc += a.transpose() * weight;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_batch(seed: u64, nb: usize, d: usize) -> BatchActivations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian_matrix(&mut rng, nb, d)
    }

    #[test]
    fn init_shapes_and_zero() {
        let cfg = SketchConfig::new(2, 0.9, 5, 8).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.s, 5);
        let st = init_layer_sketch(&cfg, 16).unwrap();
        assert_eq!(st.x_s.shape(), (16, 5));
        assert_eq!(st.y_s.shape(), (16, 5));
        assert_eq!(st.z_s.shape(), (16, 5));
        assert_eq!(st.n_updates, 0);
        assert_eq!(st.x_s.abs().max(), 0.0);
        let st2 = init_layer_sketch(&cfg, 16).unwrap();
        assert_eq!(st, st2);
    }

    #[test]
    fn beta_zero_equals_current_batch_projection() {
        let cfg = SketchConfig::new(2, 0.0, 1, 8).unwrap();
        let proj = make_nn_projections(3, &cfg, 2);
        let mut st = init_layer_sketch(&cfg, 10).unwrap();
        let a_prev = random_batch(1, 8, 10);
        let a_curr = random_batch(2, 8, 10);
        // two updates: with beta = 0 only the last batch survives
        ema_update(&mut st, &proj, 1, &a_prev, &a_prev, 0.0).unwrap();
        ema_update(&mut st, &proj, 1, &a_prev, &a_curr, 0.0).unwrap();
        let expect_x = a_prev.transpose() * &proj.upsilon;
        let expect_y = a_curr.transpose() * &proj.omega;
        assert!((&st.x_s - expect_x).abs().max() <= 1e-12);
        assert!((&st.y_s - expect_y).abs().max() <= 1e-12);
        assert_eq!(st.n_updates, 2);
    }

    #[test]
    fn constant_batch_geometric_series() {
        // Independent closed form: after n updates with constant A,
        // X_s = (1 - beta^n) A^T Upsilon.
        let beta = 0.9;
        let cfg = SketchConfig::new(3, beta, 5, 6).unwrap();
        let proj = make_nn_projections(9, &cfg, 1);
        let mut st = init_layer_sketch(&cfg, 12).unwrap();
        let a = random_batch(7, 6, 12);
        let n = 17;
        for _ in 0..n {
            ema_update(&mut st, &proj, 1, &a, &a, beta).unwrap();
        }
        let scale = 1.0 - beta.powi(n);
        let expect = a.transpose() * &proj.upsilon * scale;
        assert!((&st.x_s - expect).abs().max() <= 1e-10);
    }

    #[test]
    fn psi_all_ones_is_plain_projection() {
        let cfg = SketchConfig::new(2, 0.5, 1, 8).unwrap();
        let mut proj = make_nn_projections(11, &cfg, 1);
        proj.psi_per_layer[0] = DVector::from_element(cfg.s, 1.0);
        let mut st = init_layer_sketch(&cfg, 10).unwrap();
        let a = random_batch(4, 8, 10);
        ema_update(&mut st, &proj, 1, &a, &a, 0.5).unwrap();
        let expect = a.transpose() * &proj.phi * 0.5;
        assert!((&st.z_s - expect).abs().max() <= 1e-12);
    }

    #[test]
    fn lemma_identity_over_random_history() {
        // Recursive sketches equal the brute-force weighted-sum oracle
        // projected through the same matrices, all three kinds.
        for seed in 0..5u64 {
            let beta = 0.9;
            let cfg = SketchConfig::new(2, beta, 5, 8).unwrap();
            let proj = make_nn_projections(100 + seed, &cfg, 3);
            let mut st = init_layer_sketch(&cfg, 12).unwrap();
            let mut hist_prev = Vec::new();
            let mut hist_curr = Vec::new();
            for step in 0..50 {
                let a_prev = random_batch(seed * 1000 + step, 8, 12);
                let a_curr = random_batch(seed * 1000 + 500 + step, 8, 12);
                ema_update(&mut st, &proj, 2, &a_prev, &a_curr, beta).unwrap();
                hist_prev.push(a_prev);
                hist_curr.push(a_curr);
            }
            let ema_prev = ema_weighted_activations(&hist_prev, beta).unwrap();
            let ema_curr = ema_weighted_activations(&hist_curr, beta).unwrap();
            let x_expect = &ema_prev * &proj.upsilon;
            let y_expect = &ema_curr * &proj.omega;
            let mut z_expect = &ema_curr * &proj.phi;
            let psi = proj.psi(2).unwrap();
            for j in 0..z_expect.ncols() {
                for i in 0..z_expect.nrows() {
                    z_expect[(i, j)] *= psi[j];
                }
            }
            assert!((&st.x_s - x_expect).abs().max() <= 1e-10);
            assert!((&st.y_s - y_expect).abs().max() <= 1e-10);
            assert!((&st.z_s - z_expect).abs().max() <= 1e-10);
        }
    }

    #[test]
    fn oracle_single_and_beta_zero() {
        let a = random_batch(3, 6, 9);
        let one = ema_weighted_activations(std::slice::from_ref(&a), 0.9).unwrap();
        assert!((&one - a.transpose() * 0.1).abs().max() <= 1e-14);

        let b = random_batch(4, 6, 9);
        let hist = vec![a.clone(), b.clone()];
        let last = ema_weighted_activations(&hist, 0.0).unwrap();
        assert!((&last - b.transpose()).abs().max() <= 1e-14);
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let cfg = SketchConfig::new(2, 0.9, 1, 8).unwrap();
        let proj = make_nn_projections(5, &cfg, 1);
        let mut st = init_layer_sketch(&cfg, 10).unwrap();
        let a = random_batch(1, 8, 10);
        let wrong_rows = random_batch(2, 7, 10);
        let wrong_cols = random_batch(2, 8, 11);
        assert!(ema_update(&mut st, &proj, 1, &wrong_rows, &a, 0.9).is_err());
        assert!(ema_update(&mut st, &proj, 1, &a, &wrong_cols, 0.9).is_err());
        assert!(ema_update(&mut st, &proj, 1, &a, &a, 1.0).is_err());
        assert_eq!(st.n_updates, 0);
    }

    #[test]
    fn ema_contraction_bound() {
        // Convexity of the recursion: ||X_s||_F <= max_j ||A(j)^T||_F * ||Upsilon||_F.
        let beta = 0.8;
        let cfg = SketchConfig::new(2, beta, 1, 8).unwrap();
        let proj = make_nn_projections(21, &cfg, 1);
        let ups_norm = proj.upsilon.norm();
        let mut st = init_layer_sketch(&cfg, 10).unwrap();
        let mut max_a = 0.0f64;
        for step in 0..40 {
            let a = random_batch(50 + step, 8, 10);
            max_a = max_a.max(a.norm());
            ema_update(&mut st, &proj, 1, &a, &a, beta).unwrap();
            assert!(st.x_s.norm() <= max_a * ups_norm + 1e-9);
        }
    }
}
