//! Pre-norm decoder blocks, with and without residual paths.

mod backward;
mod forward;
mod loss;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::init::{attention_qk_init, attention_vo_init, gaussian_init, mlp_init, InitKind, InitSpec};
use crate::linalg::{Matrix, RngStream};

pub use backward::model_backward;
pub use forward::{
    attention_forward, block_forward, gelu, gelu_grad, mlp_forward, model_forward, model_forward_hooked, norm_forward,
    BlockTaps, ForwardTape, LayerTape, NoHook, Tap, TapHook,
};
pub use loss::cross_entropy;
pub use tensor::ActivationTensor;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
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
    /// Divide logits by `sqrt(d_h)` (multi-head convention) rather than `sqrt(d)`.
    #[serde(default = "yes")]
    pub scale_by_head_dim: bool,
}

fn yes() -> bool {
    true
}

impl BlockConfig {
    pub fn d_h(&self) -> usize {
        self.d / self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || !self.d.is_multiple_of(self.h) {
            return Err(LabError::Config(format!("d = {} must be a multiple of h = {}", self.d, self.h)));
        }
        if self.d == 0 || self.d_f == 0 {
            return Err(LabError::Config("d and d_f must be positive".into()));
        }
        if self.t == 0 {
            return Err(LabError::Config("T must be at least 1".into()));
        }
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(LabError::Config(format!("beta must be >= 1, got {}", self.beta)));
        }
        Ok(())
    }

    /// `tau_l = beta^(-l)`, zero-based.
    pub fn tau(&self, layer: usize) -> f64 {
        self.beta.powi(-(layer as i32))
    }

    /// Logit multiplier for layer `l`: `tau_l / sqrt(d_h)`.
    pub fn logit_scale(&self, layer: usize) -> f64 {
        let denom = if self.scale_by_head_dim { self.d_h() } else { self.d };
        self.tau(layer) / (denom as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
    pub wu: Matrix,
    pub wd: Matrix,
    pub attn_gain: Vec<f64>,
    pub mlp_gain: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Vec<f64>,
    pub head: Matrix,
}

impl LayerParams {
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let (d, dh, h) = (cfg.d, cfg.d_h(), cfg.h);
        Self {
            wq: vec![Matrix::zeros(d, dh); h],
            wk: vec![Matrix::zeros(d, dh); h],
            wv: vec![Matrix::zeros(d, dh); h],
            wo: Matrix::zeros(d, d),
            wu: Matrix::zeros(d, cfg.d_f),
            wd: Matrix::zeros(cfg.d_f, d),
            attn_gain: vec![0.0; d],
            mlp_gain: vec![0.0; d],
        }
    }

    pub fn init(rng: &mut RngStream, cfg: &BlockConfig, spec: &InitSpec) -> Result<Self> {
        let (d, dh, h, df) = (cfg.d, cfg.d_h(), cfg.h, cfg.d_f);
        let mut p = Self::zeros(cfg);
        match spec.kind {
            InitKind::OrthogonalRecipe => {
                for i in 0..h {
                    let (q, k) = attention_qk_init(rng, d, dh, spec.alpha_qk)?;
                    p.wq[i] = q;
                    p.wk[i] = k;
                }
                let (v, o) = attention_vo_init(rng, d, h, spec.alpha_vo)?;
                p.wv = v;
                p.wo = o;
                let (u, dn) = mlp_init(rng, d, df, spec.alpha_u, spec.alpha_d)?;
                p.wu = u;
                p.wd = dn;
            }
            kind => {
                for i in 0..h {
                    p.wq[i] = gaussian_init(rng, d, dh, kind);
                    p.wk[i] = gaussian_init(rng, d, dh, kind);
                    p.wv[i] = gaussian_init(rng, d, dh, kind);
                }
                p.wo = gaussian_init(rng, d, d, kind);
                p.wu = gaussian_init(rng, d, df, kind);
                p.wd = gaussian_init(rng, df, d, kind);
            }
        }
        p.attn_gain = vec![1.0; d];
        p.mlp_gain = vec![1.0; d];
        Ok(p)
    }
}

impl ModelParams {
    pub fn zeros(cfg: &BlockConfig, vocab: usize) -> Self {
        Self {
            embed: Matrix::zeros(vocab, cfg.d),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_gain: vec![0.0; cfg.d],
            head: Matrix::zeros(cfg.d, vocab),
        }
    }

    /// Block weights follow `spec`; embedding and head are always Xavier and
    /// norm gains start at one. Each layer draws from its own split stream.
    pub fn init(rng: &RngStream, cfg: &BlockConfig, vocab: usize, spec: &InitSpec) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if vocab < 2 {
            return Err(LabError::Config(format!("vocab must be at least 2, got {vocab}")));
        }
        let mut er = rng.split(0);
        let embed = gaussian_init(&mut er, vocab, cfg.d, InitKind::GaussianXavier);
        let head = gaussian_init(&mut rng.split(1), cfg.d, vocab, InitKind::GaussianXavier);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerParams::init(&mut rng.split(100 + l as u64), cfg, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, layers, final_gain: vec![1.0; cfg.d], head })
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    /// Every weight matrix with a stable name, in a fixed order. The embedding
    /// table is excluded: it is a lookup of row vectors.
    pub fn matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            for (i, m) in p.wq.iter().enumerate() {
                out.push((format!("l{l}.wq{i}"), m));
            }
            for (i, m) in p.wk.iter().enumerate() {
                out.push((format!("l{l}.wk{i}"), m));
            }
            for (i, m) in p.wv.iter().enumerate() {
                out.push((format!("l{l}.wv{i}"), m));
            }
            out.push((format!("l{l}.wo"), &p.wo));
            out.push((format!("l{l}.wu"), &p.wu));
            out.push((format!("l{l}.wd"), &p.wd));
        }
        out.push(("head".into(), &self.head));
        out
    }

    /// Same order as [`ModelParams::matrices`].
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for p in self.layers.iter_mut() {
            out.extend(p.wq.iter_mut());
            out.extend(p.wk.iter_mut());
            out.extend(p.wv.iter_mut());
            out.push(&mut p.wo);
            out.push(&mut p.wu);
            out.push(&mut p.wd);
        }
        out.push(&mut self.head);
        out
    }

    /// Norm gains, in a fixed order.
    pub fn gains(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        for p in &self.layers {
            out.push(&p.attn_gain);
            out.push(&p.mlp_gain);
        }
        out.push(&self.final_gain);
        out
    }

    pub fn gains_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for p in self.layers.iter_mut() {
            out.push(&mut p.attn_gain);
            out.push(&mut p.mlp_gain);
        }
        out.push(&mut self.final_gain);
        out
    }

    pub fn check_shapes(&self, cfg: &BlockConfig) -> Result<()> {
        let z = Self::zeros(cfg, self.vocab());
        let ok = self.layers.len() == z.layers.len()
            && self.embed.shape() == z.embed.shape()
            && self.head.shape() == z.head.shape()
            && self.final_gain.len() == cfg.d
            && self.matrices().iter().zip(z.matrices()).all(|(a, b)| a.1.shape() == b.1.shape())
            && self.gains().iter().zip(z.gains()).all(|(a, b)| a.len() == b.len());
        if ok {
            Ok(())
        } else {
            Err(LabError::Dimension("parameters do not match the block config".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.matrices().iter().all(|(_, m)| m.is_finite())
            && self.gains().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute entry over all parameters.
    pub fn max_abs(&self) -> f64 {
        let m = self.matrices().iter().map(|(_, m)| m.max_abs()).fold(self.embed.max_abs(), f64::max);
        self.gains().iter().flat_map(|g| g.iter()).fold(m, |a, v| a.max(v.abs()))
    }
}

/// Token ids for `batch` sequences of length `tokens`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch: usize,
    pub tokens: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, tokens: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * tokens {
            return Err(LabError::Dimension(format!("{} ids for {batch} x {tokens}", ids.len())));
        }
        Ok(Self { batch, tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(residual: bool, norm_kind: NormKind) -> BlockConfig {
    BlockConfig {
        d: 16,
        h: 2,
        d_f: 24,
        t: 4,
        residual,
        norm_kind,
        causal: true,
        beta: 1.1,
        n_layers: 2,
        scale_by_head_dim: true,
    }
}
