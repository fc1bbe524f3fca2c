//! Patience-based adaptive rank control.
//!
//! Once per epoch the controller observes a scalar metric (lower is
//! better; epoch mean training loss). An epoch "improves" when the metric
//! beats the best seen so far by a relative margin. After `p_decrease`
//! consecutive improving epochs the rank steps down (training is going
//! well, spend less memory); after `p_increase` consecutive non-improving
//! epochs it steps up for higher-fidelity gradients — unless the stepped-up
//! rank would reach `tau_reset`, in which case it snaps back to the initial
//! rank instead of escalating without bound. Every non-keep decision asks
//! the caller to reinitialize projections and sketches at the new rank.

use serde::{Deserialize, Serialize};

use crate::ema::{init_layer_sketch, make_nn_projections, LayerSketchState, NnProjectionSet, SketchConfig};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Controller hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankControllerConfig {
    /// Initial (and reset-target) rank.
    pub r0: usize,
    pub r_min: usize,
    pub r_max: usize,
    /// Consecutive improving epochs before a decrease.
    pub p_decrease: usize,
    /// Consecutive stagnant epochs before an increase.
    pub p_increase: usize,
    pub dr_down: usize,
    pub dr_up: usize,
    /// Reset threshold: an increase that would reach this rank resets to `r0`.
    pub tau_reset: usize,
    /// Relative improvement threshold.
    pub improve_rel_tol: f64,
}

impl Default for RankControllerConfig {
    fn default() -> Self {
        RankControllerConfig {
            r0: 2,
            r_min: 1,
            r_max: 16,
            p_decrease: 3,
            p_increase: 2,
            dr_down: 1,
            dr_up: 2,
            tau_reset: 16,
            improve_rel_tol: 1e-4,
        }
    }
}

impl RankControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_min == 0 {
            return Err(Error::Config("r_min must be >= 1".into()));
        }
        if !(self.r_min <= self.r0 && self.r0 <= self.r_max) {
            return Err(Error::Config(format!(
                "need r_min <= r0 <= r_max, got {} <= {} <= {}",
                self.r_min, self.r0, self.r_max
            )));
        }
        if self.p_decrease == 0 || self.p_increase == 0 {
            return Err(Error::Config("patience parameters must be >= 1".into()));
        }
        if self.dr_down == 0 || self.dr_up == 0 {
            return Err(Error::Config("rank steps must be >= 1".into()));
        }
        if self.tau_reset <= self.r0 {
            return Err(Error::Config("tau_reset must exceed r0".into()));
        }
        if self.improve_rel_tol < 0.0 {
            return Err(Error::Config("improve_rel_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mutable controller state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankControllerState {
    pub r: usize,
    /// Best (lowest) metric observed so far; +inf before the first epoch.
    pub best_metric: f64,
    pub epochs_improving: usize,
    pub epochs_stagnant: usize,
}

impl RankControllerState {
    pub fn new(config: &RankControllerConfig) -> Self {
        RankControllerState {
            r: config.r0,
            best_metric: f64::INFINITY,
            epochs_improving: 0,
            epochs_stagnant: 0,
        }
    }
}

/// Outcome of one epoch observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankDecision {
    Keep,
    Decrease { new_r: usize },
    Increase { new_r: usize },
    Reset { new_r: usize },
}

impl RankDecision {
    /// Rank after the decision, if it changed the configuration.
    pub fn new_rank(&self) -> Option<usize> {
        match *self {
            RankDecision::Keep => None,
            RankDecision::Decrease { new_r } | RankDecision::Increase { new_r } | RankDecision::Reset { new_r } => {
                Some(new_r)
            }
        }
    }

    /// Stable lowercase tag for logs.
    pub fn tag(&self) -> &'static str {
        match self {
            RankDecision::Keep => "keep",
            RankDecision::Decrease { .. } => "decrease",
            RankDecision::Increase { .. } => "increase",
            RankDecision::Reset { .. } => "reset",
        }
    }
}

/// Feeds one epoch metric through the state machine.
///
/// Improvement means `metric < best_metric · (1 − improve_rel_tol)`;
/// `best_metric` updates on improvement. Decrease is evaluated before
/// increase; counters reset after any non-keep decision. The returned rank
/// is always clamped to `[r_min, r_max]`.
pub fn observe_epoch(
    state: &mut RankControllerState,
    config: &RankControllerConfig,
    epoch_metric: f64,
) -> Result<RankDecision> {
    if !epoch_metric.is_finite() {
        return Err(Error::NonFinite("epoch metric".into()));
    }
    let improved = epoch_metric < state.best_metric * (1.0 - config.improve_rel_tol);
    if improved {
        state.best_metric = epoch_metric;
        state.epochs_improving += 1;
        state.epochs_stagnant = 0;
    } else {
        state.epochs_stagnant += 1;
        state.epochs_improving = 0;
    }

    let decision = if state.epochs_improving >= config.p_decrease {
        let new_r = state.r.saturating_sub(config.dr_down).max(config.r_min);
        state.r = new_r;
        RankDecision::Decrease { new_r }
    } else if state.epochs_stagnant >= config.p_increase {
        if state.r + config.dr_up >= config.tau_reset {
            state.r = config.r0;
            RankDecision::Reset { new_r: config.r0 }
        } else {
            let new_r = (state.r + config.dr_up).min(config.r_max);
            state.r = new_r;
            RankDecision::Increase { new_r }
        }
    } else {
        RankDecision::Keep
    };

    if decision != RankDecision::Keep {
        state.epochs_improving = 0;
        state.epochs_stagnant = 0;
    }
    debug_assert!((config.r_min..=config.r_max).contains(&state.r));
    Ok(decision)
}

/// SplitMix64 finalizer; mixes the rank-change context into a fresh seed.
fn mix_seed(base_seed: u64, epoch: usize, new_r: usize) -> u64 {
    let mut z = base_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(1 + epoch as u64))
        .wrapping_add(0x517c_c1b7_2722_0a95_u64.wrapping_mul(1 + new_r as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rebuilds sketching state for a new rank: fresh projections from a seed
/// derived deterministically from `(base_seed, epoch, new_r)`, zeroed EMA
/// sketches for every sketched layer, and a restarted warmup.
pub fn apply_rank_change(
    new_r: usize,
    base_seed: u64,
    epoch: usize,
    template: &SketchConfig,
    sketched_widths: &BTreeMap<usize, usize>,
    n_layers: usize,
) -> Result<(SketchConfig, NnProjectionSet, BTreeMap<usize, LayerSketchState>)> {
    let config = SketchConfig::new(new_r, template.beta, template.warmup_iters, template.batch_size)?;
    let seed = mix_seed(base_seed, epoch, new_r);
    let proj = make_nn_projections(seed, &config, n_layers);
    let mut states = BTreeMap::new();
    for (&layer, &d) in sketched_widths {
        states.insert(layer, init_layer_sketch(&config, d)?);
    }
    Ok((config, proj, states))
}
