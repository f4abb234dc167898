//! Unsupervised training loop.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::loss::{total_loss, total_loss_grad, LossBreakdown, LossConfig};
use crate::model::{cws_backward, cws_forward_batch, ModelParams, PyramidPair};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            batch: 4,
            seed: 1,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.adam.validate()?;
        self.loss.validate()
    }
}

/// One optimization step on `batch`; returns the batch-mean loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    batch: &[PyramidPair],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    params.set_mode(BnMode::Train);
    let (outs, cache) = cws_forward_batch(batch, params)?;
    let mut parts = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for (o, p) in outs.iter().zip(batch) {
        let (b, mut g) = total_loss_grad(o, &p.target, &cfg.loss)?;
        g.scale(scale);
        parts.push(b);
        grads.push(g);
    }
    let loss = LossBreakdown::mean(&parts);
    if let Some(term) = loss.non_finite_term() {
        return Err(Error::NonFinite { term, iteration });
    }
    let model_grads = cws_backward(&cache, batch, &outs, params, &grads)?;
    params.zero_grad();
    model_grads.apply_to(params);
    params.update_running_stats(&cache);
    adam_step(params.tensors_mut(), state, &cfg.adam)?;
    Ok(loss)
}

/// Runs `cfg.iters` steps on batches drawn from `data` without replacement
/// within a batch. `on_step` sees every iteration's loss as it is produced.
pub fn train(
    params: &mut ModelParams,
    data: &[PyramidPair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let batch = cfg.batch.min(data.len());
    let mut history = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let picked: Vec<PyramidPair> = sample(&mut rng, data.len(), batch)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let loss = train_step(params, &mut state, &picked, cfg, it)?;
        on_step(it, &loss)?;
        history.push(loss);
    }
    params.set_mode(BnMode::Infer);
    Ok(history)
}

/// Mean loss of the model over `data` with batch norm in inference mode.
pub fn evaluate_loss(params: &ModelParams, data: &[PyramidPair], loss: &LossConfig) -> Result<LossBreakdown> {
    let mut p = params.clone();
    p.set_mode(BnMode::Infer);
    let parts = data
        .iter()
        .map(|d| {
            let (mut o, _) = cws_forward_batch(std::slice::from_ref(d), &p)?;
            total_loss(&o.pop().expect("one output"), &d.target, loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&parts))
}

/// Header of the loss history CSV for a model with `levels` pyramid levels.
pub fn loss_csv_header(levels: usize) -> String {
    let mut h = String::from("iteration,data,reg");
    for l in (1..levels).rev() {
        h.push_str(&format!(",level{l}"));
    }
    h.push_str(",total");
    h
}

pub fn write_loss_row(w: &mut impl Write, iteration: usize, b: &LossBreakdown) -> std::io::Result<()> {
    write!(w, "{iteration},{:e},{:e}", b.data, b.reg)?;
    for t in &b.level_terms {
        write!(w, ",{t:e}")?;
    }
    writeln!(w, ",{:e}", b.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{gen_pair, SynthConfig};

    fn data(n: usize) -> Vec<PyramidPair> {
        let cfg = SynthConfig {
            size: 16,
            amplitude: 1.5,
            control_grid: 8,
            seed: 3,
            count: n,
        };
        (0..n)
            .map(|i| {
                let p = gen_pair(&cfg, i).unwrap();
                PyramidPair::new(&p.source, &p.target, 2).unwrap()
            })
            .collect()
    }

    fn model() -> ModelParams {
        ModelParams::init(ModelConfig::default().with_width_divisor(8).with_levels(2), 5).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let d = data(4);
        let cfg = TrainConfig {
            iters: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (model(), model());
        let ha = train(&mut a, &d, &cfg, |_, _| Ok(())).unwrap();
        let hb = train(&mut b, &d, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_ne!(a, model());
    }

    #[test]
    fn training_reduces_loss() {
        let d = data(4);
        let cfg = TrainConfig {
            iters: 40,
            batch: 4,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut p = model();
        let before = evaluate_loss(&p, &d, &cfg.loss).unwrap().total;
        train(&mut p, &d, &cfg, |_, _| Ok(())).unwrap();
        let after = evaluate_loss(&p, &d, &cfg.loss).unwrap().total;
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn non_finite_input_fails_fast() {
        let mut d = data(2);
        d[0].source[0].values_mut()[3] = f64::NAN;
        let cfg = TrainConfig {
            iters: 5,
            batch: 2,
            ..TrainConfig::default()
        };
        let err = train(&mut model(), &d, &cfg, |_, _| Ok(())).unwrap_err();
        match err {
            Error::NonFinite { iteration, term } => {
                assert_eq!(iteration, 0);
                assert!(["data", "reg", "total"].contains(&term.as_str()) || term.starts_with("level"), "{term}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(loss_csv_header(3), "iteration,data,reg,level2,level1,total");
        let mut buf = Vec::new();
        write_loss_row(&mut buf, 4, &LossBreakdown::new(1.0, 0.5, vec![0.25])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "4,1e0,5e-1,2.5e-1,1.75e0\n");
    }
}
