//! Flat JSON configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::init::{InitKind, InitSpec};
use crate::linalg::POLAR_TOL;
use crate::model::{BlockConfig, NormKind};
use crate::optim::{OptimKind, OptimSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub block: BlockConfig,
    pub init: InitSpec,
    pub optim: OptimSpec,
    pub steps: usize,
    pub batch: usize,
    pub vocab: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    /// Checkpoint period; step 0 and the last step are always recorded and
    /// 0 records only those two.
    pub checkpoint_every: usize,
    /// Record per-layer activation statistics at checkpoints.
    pub stats_taps: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: `L = 8, d = 64, h = 4, d_f = 256, T = 32,
    /// V = 32, batch 16, 2000 steps`, residual-free with the orthogonal
    /// recipe and spectral GD.
    pub fn toy() -> Self {
        Self {
            block: BlockConfig {
                d: 64,
                h: 4,
                d_f: 256,
                t: 32,
                residual: false,
                norm_kind: NormKind::LayerNorm,
                causal: true,
                beta: 1.1,
                n_layers: 8,
                scale_by_head_dim: true,
            },
            init: InitSpec::recipe(),
            optim: OptimSpec::new(OptimKind::SpectralGd, 1e-3, 0.01),
            steps: 2000,
            batch: 16,
            vocab: 32,
            data_seed: 0,
            model_seed: 0,
            checkpoint_every: 250,
            stats_taps: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.init.validate()?;
        self.optim.validate()?;
        if self.steps == 0 {
            return Err(LabError::Config("steps must be at least 1".into()));
        }
        if self.vocab < 2 {
            return Err(LabError::Config(format!("vocab must be at least 2, got {}", self.vocab)));
        }
        if self.batch == 0 {
            return Err(LabError::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets both seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data_seed = seed;
        self.model_seed = seed;
        self
    }
}

/// On-disk form: one flat object; unknown keys are rejected. The keys not
/// used by a subcommand are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub d: usize,
    pub h: usize,
    pub d_f: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub residual: bool,
    pub norm_kind: NormKind,
    pub causal: bool,
    pub beta: f64,
    pub n_layers: usize,
    #[serde(default = "yes")]
    pub scale_by_head_dim: bool,

    pub init: InitKind,
    #[serde(default = "recipe_qk")]
    pub alpha_qk: f64,
    #[serde(default = "recipe_vo")]
    pub alpha_vo: f64,
    #[serde(default = "recipe_ud")]
    pub alpha_u: f64,
    #[serde(default = "recipe_ud")]
    pub alpha_d: f64,

    pub optim: OptimKind,
    pub eta: f64,
    pub weight_decay: f64,
    #[serde(default = "polar_tol")]
    pub polar_tol: f64,
    /// Fixed orthogonalization budget for spectral GD; 0 means the converged
    /// polar factor.
    #[serde(default)]
    pub polar_lift_steps: usize,
    #[serde(default)]
    pub polar_converge_steps: usize,

    pub steps: usize,
    pub batch: usize,
    pub vocab: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub checkpoint_every: usize,
    pub stats_taps: bool,

    /// Grid: candidate learning rates per cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_sweep: Option<Vec<f64>>,
    /// Grid: steps of the pilot runs that pick the learning rate; 0 trains
    /// every candidate for the full budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot_steps: Option<usize>,
    /// Number of held-out evaluation batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_batches: Option<usize>,
    /// Temperature ablation: bases to compare.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_list: Option<Vec<f64>>,
    /// Quantization sweep: weight and activation bit widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_w: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_a: Option<Vec<u32>>,
}

fn yes() -> bool {
    true
}
fn recipe_qk() -> f64 {
    InitSpec::recipe().alpha_qk
}
fn recipe_vo() -> f64 {
    InitSpec::recipe().alpha_vo
}
fn recipe_ud() -> f64 {
    InitSpec::recipe().alpha_u
}
fn polar_tol() -> f64 {
    POLAR_TOL
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_train(c: &TrainConfig) -> Self {
        let (lift, converge) = c.optim.polar_schedule.unwrap_or((0, 0));
        Self {
            d: c.block.d,
            h: c.block.h,
            d_f: c.block.d_f,
            t: c.block.t,
            residual: c.block.residual,
            norm_kind: c.block.norm_kind,
            causal: c.block.causal,
            beta: c.block.beta,
            n_layers: c.block.n_layers,
            scale_by_head_dim: c.block.scale_by_head_dim,
            init: c.init.kind,
            alpha_qk: c.init.alpha_qk,
            alpha_vo: c.init.alpha_vo,
            alpha_u: c.init.alpha_u,
            alpha_d: c.init.alpha_d,
            optim: c.optim.kind,
            eta: c.optim.eta,
            weight_decay: c.optim.weight_decay,
            polar_tol: c.optim.polar_tol,
            polar_lift_steps: lift,
            polar_converge_steps: converge,
            steps: c.steps,
            batch: c.batch,
            vocab: c.vocab,
            data_seed: c.data_seed,
            model_seed: c.model_seed,
            checkpoint_every: c.checkpoint_every,
            stats_taps: c.stats_taps,
            eta_sweep: None,
            pilot_steps: None,
            eval_batches: None,
            beta_list: None,
            bits_w: None,
            bits_a: None,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let polar_schedule = match (self.polar_lift_steps, self.polar_converge_steps) {
            (0, 0) => None,
            s => Some(s),
        };
        let c = TrainConfig {
            block: BlockConfig {
                d: self.d,
                h: self.h,
                d_f: self.d_f,
                t: self.t,
                residual: self.residual,
                norm_kind: self.norm_kind,
                causal: self.causal,
                beta: self.beta,
                n_layers: self.n_layers,
                scale_by_head_dim: self.scale_by_head_dim,
            },
            init: InitSpec {
                kind: self.init,
                alpha_qk: self.alpha_qk,
                alpha_vo: self.alpha_vo,
                alpha_u: self.alpha_u,
                alpha_d: self.alpha_d,
            },
            optim: OptimSpec {
                kind: self.optim,
                eta: self.eta,
                weight_decay: self.weight_decay,
                polar_tol: self.polar_tol,
                polar_schedule,
            },
            steps: self.steps,
            batch: self.batch,
            vocab: self.vocab,
            data_seed: self.data_seed,
            model_seed: self.model_seed,
            checkpoint_every: self.checkpoint_every,
            stats_taps: self.stats_taps,
        };
        c.validate()?;
        Ok(c)
    }
}
