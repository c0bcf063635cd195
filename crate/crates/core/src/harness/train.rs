//! Toy training loop with checkpointed statistics.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::RngStream;
use crate::model::{cross_entropy, model_backward, model_forward, BlockConfig, ModelParams};
use crate::optim::apply_step;
use crate::stats::{gram_drift, layer_stats, ActivationStats, GramDriftTrace};

use super::config::TrainConfig;
use super::data::{synth_data, MarkovChain, SynthBatch, STATS_STREAM, TRAIN_STREAM};

/// Sequences in the fixed batch used for checkpoint statistics.
pub const STATS_SEQUENCES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub train_loss: f64,
    /// Block outputs `X_1 .. X_L` on the statistics batch.
    pub stats: Vec<ActivationStats>,
    pub drift: GramDriftTrace,
}

impl Checkpoint {
    /// Mean over layers of `|excess kurtosis|`.
    pub fn mean_abs_kurtosis(&self) -> f64 {
        if self.stats.is_empty() {
            return f64::NAN;
        }
        self.stats.iter().map(|s| s.excess_kurtosis.abs()).sum::<f64>() / self.stats.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training-batch loss before each update, plus the loss after the last.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    /// Spectral steps skipped for an all-zero gradient.
    pub skipped_updates: usize,
    pub optimal_loss: f64,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }

    pub fn last_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }
}

fn checkpoint(
    step: usize,
    train_loss: f64,
    params: &ModelParams,
    cfg: &TrainConfig,
    stats_batch: &SynthBatch,
) -> Result<Checkpoint> {
    let stats = if cfg.stats_taps {
        let (_, tape) = model_forward(&stats_batch.tokens, params, &cfg.block)?;
        tape.block_outputs().iter().enumerate().map(|(l, x)| layer_stats(x, l + 1)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let drift = params
        .layers
        .iter()
        .enumerate()
        .map(|(l, p)| Ok((format!("l{l}.wo"), gram_drift(&p.wo)?)))
        .collect::<Result<_>>()?;
    Ok(Checkpoint { step, train_loss, stats, drift: GramDriftTrace { step, drift } })
}

/// Trains from the configured seeds; returns the log and the final
/// parameters (the last finite ones when the run diverged).
pub fn train_model(cfg: &TrainConfig) -> Result<(TrainLog, ModelParams)> {
    cfg.validate()?;
    let chain = MarkovChain::new(cfg.data_seed, cfg.vocab)?;
    let mut params = ModelParams::init(&RngStream::new(cfg.model_seed, 0), &cfg.block, cfg.vocab, &cfg.init)?;
    let stats_batch = synth_data(&chain, cfg.data_seed, STATS_STREAM, 1, STATS_SEQUENCES, cfg.block.t).remove(0);
    let mut data = RngStream::new(cfg.data_seed, TRAIN_STREAM);
    let mut log = TrainLog {
        losses: Vec::with_capacity(cfg.steps + 1),
        checkpoints: Vec::new(),
        diverged: false,
        diverged_at: None,
        skipped_updates: 0,
        optimal_loss: chain.optimal_cross_entropy(),
    };
    for step in 0..=cfg.steps {
        let batch = chain.sample(&mut data, cfg.batch, cfg.block.t);
        let forward = match model_forward(&batch.tokens, &params, &cfg.block) {
            Ok(f) => Some(f),
            Err(LabError::Numerical(_)) => None,
            Err(e) => return Err(e),
        };
        let step_out = match forward {
            Some((logits, tape)) => {
                let (loss, dlogits) = cross_entropy(&logits, &batch.targets)?;
                let blown = log.losses.first().is_some_and(|l0| loss > 10.0 * l0);
                (loss.is_finite() && !blown).then_some((loss, dlogits, tape))
            }
            None => None,
        };
        let Some((loss, dlogits, tape)) = step_out else {
            log.diverged = true;
            log.diverged_at = Some(step);
            break;
        };
        log.losses.push(loss);
        if step == 0 || step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            log.checkpoints.push(checkpoint(step, loss, &params, cfg, &stats_batch)?);
        }
        if step == cfg.steps {
            break;
        }
        let grads = model_backward(&tape, &params, &cfg.block, &dlogits)?;
        let mut next = params.clone();
        log.skipped_updates += apply_step(&mut next, &grads, &cfg.optim)?;
        if !next.is_finite() {
            log.diverged = true;
            log.diverged_at = Some(step + 1);
            break;
        }
        params = next;
    }
    Ok((log, params))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainLog> {
    Ok(train_model(cfg)?.0)
}

/// Mean cross-entropy over `batches`.
pub fn evaluate(params: &ModelParams, block: &BlockConfig, batches: &[SynthBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(LabError::EmptyData("no evaluation batches".into()));
    }
    let mut total = 0.0;
    for b in batches {
        let (logits, _) = model_forward(&b.tokens, params, block)?;
        total += cross_entropy(&logits, &b.targets)?.0;
    }
    Ok(total / batches.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{InitKind, InitSpec};
    use crate::model::NormKind;
    use crate::optim::{OptimKind, OptimSpec};

    fn small(kind: OptimKind, residual: bool) -> TrainConfig {
        let mut c = TrainConfig::toy();
        c.block = BlockConfig { d: 16, h: 2, d_f: 32, t: 8, residual, norm_kind: NormKind::LayerNorm, causal: true, beta: 1.1, n_layers: 2, scale_by_head_dim: true };
        c.vocab = 8;
        c.batch = 4;
        c.steps = 3;
        c.checkpoint_every = 2;
        c.optim = OptimSpec::new(kind, 1e-2, 0.01);
        c
    }

    #[test]
    fn bookkeeping() {
        let mut c = small(OptimKind::SignGd, true);
        c.steps = 1;
        let log = train(&c).unwrap();
        assert_eq!(log.losses.len(), 2);
        assert_eq!(log.checkpoints.iter().map(|k| k.step).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(log.checkpoints[0].stats.len(), 2);
        assert!(!log.diverged);

        let log = train(&small(OptimKind::SpectralGd, false)).unwrap();
        assert_eq!(log.checkpoints.iter().map(|k| k.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        assert_eq!(log.checkpoints[1].drift.drift.len(), 2);
        assert_eq!(train(&small(OptimKind::SpectralGd, false)).unwrap(), log);
    }

    #[test]
    fn orthogonal_start_has_no_drift() {
        let mut c = small(OptimKind::SpectralGd, false);
        c.init = InitSpec::recipe();
        c.block.h = 1;
        c.init.alpha_vo = 1.0;
        let log = train(&c).unwrap();
        assert!(log.checkpoints[0].drift.drift.iter().all(|(_, e)| *e <= 1e-8));
    }

    #[test]
    fn huge_step_is_flagged_as_divergence() {
        let mut c = small(OptimKind::Sgd, true);
        c.init = InitSpec::gaussian(InitKind::GaussianXavier);
        c.optim.eta = 1e6;
        c.steps = 20;
        let log = train(&c).unwrap();
        assert!(log.diverged);
        assert!(log.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn invalid_config_fails_before_compute() {
        let mut c = small(OptimKind::Sgd, true);
        c.steps = 0;
        assert!(matches!(train(&c), Err(LabError::Config(_))));
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut c = small(OptimKind::SignGd, true);
        c.steps = 150;
        c.optim.eta = 3e-3;
        c.checkpoint_every = 0;
        let log = train(&c).unwrap();
        let head: f64 = log.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = log.losses[log.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head - 0.1, "{head} -> {tail}");
    }
}
