//! Sketch-derived training diagnostics and storage accounting.
//!
//! Two cheap per-layer metrics come straight off the EMA sketches without
//! touching full activation or gradient matrices: the Frobenius norm of
//! the interaction sketch (a gradient-magnitude proxy) and the stable rank
//! `‖Y_s‖_F² / ‖Y_s‖₂²` of the output-pattern sketch (a smooth rank proxy
//! in `[1, k]` measuring how much of the sketch subspace the activations
//! actually span). Collapsed stable rank flags pathological training that
//! loss curves alone can miss.
//!
//! Storage accounting is closed-form and element-exact. Byte counts use
//! 4 bytes per element, matching the storage figures the sketches are
//! usually compared against; the 8-byte figure for this crate's own f64
//! state is reported alongside.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::ema::LayerSketchState;
use crate::error::{Error, Result};

/// One monitoring observation for `(epoch, layer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorRecord {
    pub epoch: usize,
    pub layer: usize,
    /// `‖Z_s‖_F` gradient-magnitude proxy.
    pub z_norm: f64,
    /// `‖Y_s‖_F² / ‖Y_s‖₂²`, in `[1, k]`.
    pub stable_rank: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub current_r: usize,
    /// Wall-clock milliseconds since run start; 0 unless timing was
    /// explicitly enabled (real timings break byte-determinism of runs).
    pub wall_ms: u64,
}

/// Gradient-norm proxy: Frobenius norm of the interaction sketch.
pub fn grad_norm_estimate(state: &LayerSketchState) -> f64 {
    state.z_s.norm()
}

/// Stable rank of the output-pattern sketch.
///
/// Undefined (an error, not silently 0) when `Y_s` is identically zero.
pub fn stable_rank(state: &LayerSketchState) -> Result<f64> {
    let f2 = state.y_s.norm_squared();
    if f2 == 0.0 {
        return Err(Error::ZeroSketch("stable rank of an all-zero Y_s is undefined".into()));
    }
    let smax = state
        .y_s
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    Ok(f2 / (smax * smax))
}

/// Element-exact storage accounting for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub layers: usize,
    pub hidden_width: usize,
    pub rank: usize,
    pub batch_size: usize,
    pub monitoring_window: usize,
    /// Persistent EMA sketch storage, `L·d·(k+k+s)` elements at 4 bytes.
    pub sketch_bytes: u64,
    /// Same storage at this crate's actual 8-byte f64 elements.
    pub sketch_bytes_f64: u64,
    /// Traditional monitoring: one `d×d` gradient matrix per layer per
    /// checkpoint over the window `T`.
    pub traditional_monitor_bytes: u64,
    /// One temporal checkpoint of the traditional scheme.
    pub per_checkpoint_bytes: u64,
    /// Activations stored by one standard training iteration.
    pub per_iter_activation_bytes: u64,
    /// Sketch state touched by one sketched training iteration.
    pub per_iter_sketch_bytes: u64,
    /// `100·(1 − sketch/traditional)`.
    pub reduction_pct: f64,
}

/// Closed-form memory report; `k = s = 2r + 1` throughout.
pub fn memory_report(layers: usize, hidden_width: usize, rank: usize, batch_size: usize, window: usize) -> MemoryReport {
    let l = layers as u64;
    let d = hidden_width as u64;
    let k = 2 * rank as u64 + 1;
    let s = k;
    let nb = batch_size as u64;
    let t = window as u64;
    let sketch_elems = l * d * (k + k + s);
    let sketch_bytes = sketch_elems * 4;
    let traditional = l * d * d * 4 * t;
    let per_checkpoint = l * d * d * 4;
    let per_iter_activation = l * nb * d * 4;
    let per_iter_sketch = l * d * (2 * k + s) * 4;
    let reduction_pct = 100.0 * (1.0 - sketch_bytes as f64 / traditional as f64);
    MemoryReport {
        layers,
        hidden_width,
        rank,
        batch_size,
        monitoring_window: window,
        sketch_bytes,
        sketch_bytes_f64: sketch_elems * 8,
        traditional_monitor_bytes: traditional,
        per_checkpoint_bytes: per_checkpoint,
        per_iter_activation_bytes: per_iter_activation,
        per_iter_sketch_bytes: per_iter_sketch,
        reduction_pct,
    }
}

pub const CSV_HEADER: &str = "epoch,layer,z_norm,stable_rank,train_loss,train_acc,current_r,wall_ms";

/// Writes records as CSV with a fixed header and deterministic number
/// formatting (`{:.16e}`, which round-trips f64 exactly).
pub fn emit_records<W: Write>(records: &[MonitorRecord], out: &mut W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            r.epoch, r.layer, r.z_norm, r.stable_rank, r.train_loss, r.train_acc, r.current_r, r.wall_ms
        )?;
    }
    Ok(())
}

/// Parses CSV produced by [`emit_records`].
pub fn parse_records<R: BufRead>(input: R) -> Result<Vec<MonitorRecord>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty metrics CSV".into()))??;
    if header != CSV_HEADER {
        return Err(Error::Data(format!("unexpected metrics header: {header}")));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Data(format!("bad metrics row: {line}")));
        }
        let field = |i: usize| -> Result<f64> {
            parts[i]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad float in metrics row ({e}): {line}")))
        };
        let int = |i: usize| -> Result<u64> {
            parts[i]
                .parse::<u64>()
                .map_err(|e| Error::Data(format!("bad integer in metrics row ({e}): {line}")))
        };
        records.push(MonitorRecord {
            epoch: int(0)? as usize,
            layer: int(1)? as usize,
            z_norm: field(2)?,
            stable_rank: field(3)?,
            train_loss: field(4)?,
            train_acc: field(5)?,
            current_r: int(6)? as usize,
            wall_ms: int(7)?,
        });
    }
    Ok(records)
}
