//! Comparison of displacement-field resamplers: reconstruction error on a
//! smooth field and the loss reached by a short fixed-seed training run.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelConfig, ModelParams, PyramidPair};
use crate::sampling::{resample_error, standard_smooth_field, KernelKind};
use crate::synth::{gen_dataset, SynthConfig};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Side of the square test field for the resampling error.
    pub field_size: usize,
    pub synth: SynthConfig,
    pub levels: usize,
    pub width_divisor: usize,
    pub train: TrainConfig,
    /// Iterations averaged into the reported final loss.
    pub tail: usize,
    pub model_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            field_size: 64,
            synth: SynthConfig {
                size: 32,
                amplitude: 3.0,
                control_grid: 8,
                seed: 11,
                count: 16,
            },
            levels: 3,
            width_divisor: 4,
            train: TrainConfig {
                iters: 200,
                ..TrainConfig::default()
            },
            tail: 20,
            model_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: KernelKind,
    pub rmse: f64,
    pub final_loss: f64,
}

/// Resampling error of every kernel on `field`.
pub fn resample_errors(field: &Tensor) -> Result<Vec<(KernelKind, f64)>> {
    KernelKind::ALL
        .iter()
        .map(|&k| Ok((k, resample_error(field, k)?)))
        .collect()
}

/// Mean training loss over the last `tail` iterations with `kernel` as the
/// displacement-field resampler. Data, initialization and batch order are the
/// same for every kernel.
pub fn training_final_loss(cfg: &BenchConfig, data: &[PyramidPair], kernel: KernelKind) -> Result<f64> {
    let mut model_cfg = ModelConfig::default()
        .with_width_divisor(cfg.width_divisor)
        .with_levels(cfg.levels);
    model_cfg.dvf_kernel = kernel;
    let mut params = ModelParams::init(model_cfg, cfg.model_seed)?;
    let history = train(&mut params, data, &cfg.train, |_, _| Ok(()))?;
    let tail = cfg.tail.clamp(1, history.len().max(1));
    let last = &history[history.len().saturating_sub(tail)..];
    Ok(last.iter().map(|b| b.total).sum::<f64>() / last.len().max(1) as f64)
}

pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let field = standard_smooth_field(cfg.field_size);
    let errors = resample_errors(&field)?;
    let data: Vec<PyramidPair> = gen_dataset(&cfg.synth)?
        .iter()
        .map(|p| PyramidPair::new(&p.source, &p.target, cfg.levels))
        .collect::<Result<_>>()?;
    errors
        .into_iter()
        .map(|(kernel, rmse)| {
            Ok(BenchRow {
                kernel,
                rmse,
                final_loss: training_final_loss(cfg, &data, kernel)?,
            })
        })
        .collect()
}

pub fn write_csv(w: &mut impl Write, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "kernel,rmse,final_loss")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e}", r.kernel.name(), r.rmse, r.final_loss)?;
    }
    Ok(())
}
