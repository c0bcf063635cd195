//! Post-training quantization sweeps and the temperature ablation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lab::report::{Check, ExperimentReport, ReportRow};
use crate::model::{cross_entropy, BlockConfig, ModelParams, TokenBatch};
use crate::par::Exec;
use crate::quant::{quantize_model, QuantSpec, TapDistortion, TapMeter};

use super::config::TrainConfig;
use super::data::{synth_data, MarkovChain, SynthBatch, CALIB_STREAM, EVAL_STREAM};
use super::train::{evaluate, train_model};

pub const DEFAULT_BITS_W: [u32; 4] = [4, 6, 8, 16];
pub const DEFAULT_BITS_A: [u32; 4] = [4, 6, 8, 16];
pub const CALIBRATION_BATCHES: usize = 8;
/// Evaluation noise allowed in the monotonicity checks.
pub const SWEEP_NOISE_MARGIN: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub bits_w: u32,
    pub bits_a: u32,
    pub label: String,
    pub eval_loss: f64,
    pub delta_loss: f64,
    pub mean_sqnr_db: f64,
    pub mean_nmse: f64,
    pub taps: Vec<TapDistortion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Free-form identity of the swept model.
    pub model: String,
    pub clean_loss: f64,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn point(&self, bits_w: u32, bits_a: u32) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.bits_w == bits_w && p.bits_a == bits_a)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "bits_w", "bits_a", "eval_loss", "delta_loss", "mean_sqnr_db", "mean_nmse"])?;
        for p in &self.points {
            w.write_record([
                self.model.clone(),
                p.bits_w.to_string(),
                p.bits_a.to_string(),
                p.eval_loss.to_string(),
                p.delta_loss.to_string(),
                p.mean_sqnr_db.to_string(),
                p.mean_nmse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Near-lossless W16A16 and monotonicity in the activation width.
    pub fn checks(&self, seed: u64) -> ExperimentReport {
        let mut r = ExperimentReport::new("sweep", seed);
        r.param("model", &self.model).param("clean_loss", self.clean_loss);
        if let Some(p) = self.point(16, 16) {
            r.row(ReportRow::new("delta loss[W16A16]", "near-lossless", 0.02, p.delta_loss, 0.0, Check::AtMost));
            for q in &self.points {
                if (q.bits_w, q.bits_a) != (16, 16) {
                    r.row(ReportRow::new(
                        format!("delta loss[W16A16] vs {}", q.label),
                        "16-bit no worse than lower widths",
                        q.delta_loss + SWEEP_NOISE_MARGIN,
                        p.delta_loss,
                        0.0,
                        Check::AtMost,
                    ));
                }
            }
        }
        for p in &self.points {
            for q in &self.points {
                if p.bits_w == q.bits_w && q.bits_a > p.bits_a {
                    r.row(ReportRow::new(
                        format!("delta loss[{}] vs {}", q.label, p.label),
                        "non-increasing in activation bits",
                        p.delta_loss + SWEEP_NOISE_MARGIN,
                        q.delta_loss,
                        0.0,
                        Check::AtMost,
                    ));
                }
            }
        }
        for p in &self.points {
            r.raw_row(vec![p.label.clone(), p.delta_loss.to_string(), p.mean_sqnr_db.to_string(), p.mean_nmse.to_string()]);
        }
        r.raw(&["point", "delta_loss", "mean_sqnr_db", "mean_nmse"]);
        r
    }
}

fn quantized_loss(
    params: &ModelParams,
    block: &BlockConfig,
    bits_w: u32,
    bits_a: u32,
    calib: &[TokenBatch],
    eval: &[SynthBatch],
) -> Result<(f64, TapMeter)> {
    let q = quantize_model(params, block, QuantSpec::weights(bits_w), QuantSpec::activations(bits_a), calib)?;
    let mut meter = TapMeter::default();
    let mut total = 0.0;
    for b in eval {
        let logits = q.forward(&b.tokens, &mut meter)?;
        total += cross_entropy(&logits, &b.targets)?.0;
    }
    Ok((total / eval.len() as f64, meter))
}

/// Evaluates every `WnAm` pair against the clean model.
pub fn quant_sweep(
    exec: Exec,
    model: &str,
    params: &ModelParams,
    block: &BlockConfig,
    bits_w: &[u32],
    bits_a: &[u32],
    calib_data: &[TokenBatch],
    eval_data: &[SynthBatch],
) -> Result<SweepReport> {
    if eval_data.is_empty() {
        return Err(LabError::EmptyData("no evaluation batches".into()));
    }
    let clean_loss = evaluate(params, block, eval_data)?;
    let pairs: Vec<(u32, u32)> = bits_w.iter().flat_map(|w| bits_a.iter().map(move |a| (*w, *a))).collect();
    let points = exec
        .map(pairs.len(), |i| {
            let (bw, ba) = pairs[i];
            let (loss, meter) = quantized_loss(params, block, bw, ba, calib_data, eval_data)?;
            Ok(SweepPoint {
                bits_w: bw,
                bits_a: ba,
                label: format!("W{bw}A{ba}"),
                eval_loss: loss,
                delta_loss: loss - clean_loss,
                mean_sqnr_db: meter.mean_sqnr_db(),
                mean_nmse: meter.mean_nmse(),
                taps: meter.report(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { model: model.to_string(), clean_loss, points })
}

/// Calibration and evaluation batches for a trained configuration.
pub fn sweep_data(cfg: &TrainConfig, eval_batches: usize) -> Result<(Vec<TokenBatch>, Vec<SynthBatch>)> {
    let chain = MarkovChain::new(cfg.data_seed, cfg.vocab)?;
    let calib = synth_data(&chain, cfg.data_seed, CALIB_STREAM, CALIBRATION_BATCHES, cfg.batch, cfg.block.t)
        .into_iter()
        .map(|b| b.tokens)
        .collect();
    let eval = synth_data(&chain, cfg.data_seed, EVAL_STREAM, eval_batches, cfg.batch, cfg.block.t);
    Ok((calib, eval))
}

/// Trains identical residual-free models that differ only in the depth
/// temperature base and reports final losses. The ordering check is soft.
pub fn temperature_ablation(exec: Exec, base: &TrainConfig, betas: &[f64], eval_batches: usize) -> Result<ExperimentReport> {
    if base.block.residual {
        return Err(LabError::Config("temperature ablation expects a residual-free config".into()));
    }
    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) {
        return Err(LabError::Config(format!("beta_list must hold positive values, got {betas:?}")));
    }
    let (_, eval) = sweep_data(base, eval_batches)?;
    let runs = exec
        .map(betas.len(), |i| {
            let mut c = base.clone();
            c.block.beta = betas[i];
            c.stats_taps = false;
            c.checkpoint_every = 0;
            let (log, params) = train_model(&c)?;
            let eval_loss = if log.diverged { f64::NAN } else { evaluate(&params, &c.block, &eval)? };
            Ok((log, eval_loss))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut r = ExperimentReport::new("temperature-ablation", base.model_seed);
    r.param("beta_list", betas).param("L", base.block.n_layers).param("steps", base.steps);
    r.raw(&["beta", "step", "train_loss"]);
    for (beta, (log, eval_loss)) in betas.iter().zip(&runs) {
        for (s, l) in log.losses.iter().enumerate() {
            r.raw_row(vec![beta.to_string(), s.to_string(), l.to_string()]);
        }
        r.note(format!("beta {beta}: final train loss {:.4}, eval loss {eval_loss:.4}, diverged {}", log.final_loss(), log.diverged));
    }
    let eval_of = |b: f64| betas.iter().position(|x| *x == b).map(|i| runs[i].1);
    if let (Some(plain), Some(scaled)) = (eval_of(1.0), eval_of(1.1)) {
        r.row(ReportRow::new("eval loss[beta=1.1]", "no worse than beta=1 + 0.05", plain + 0.05, scaled, 0.0, Check::Soft));
    }
    Ok(r)
}
