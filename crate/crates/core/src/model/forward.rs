use crate::error::{LabError, Result};
use crate::linalg::{gemm_block, matmul, Matrix};

use super::{ActivationTensor, BlockConfig, LayerParams, ModelParams, NormKind, TokenBatch, NORM_EPS};

/// Points in the forward pass where activations can be observed or replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    /// Input of the attention-side norm (the block input `X`).
    AttnNormIn,
    /// Input of the attention sublayer (normalized `X`).
    AttnIn,
    /// Input of the MLP-side norm (`Y`).
    MlpNormIn,
    /// Input of the MLP sublayer (normalized `Y`).
    MlpIn,
    /// Input of the final norm, reported with layer index `n_layers`.
    FinalNormIn,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::AttnNormIn, Tap::AttnIn, Tap::MlpNormIn, Tap::MlpIn, Tap::FinalNormIn];

    pub fn label(self) -> &'static str {
        match self {
            Tap::AttnNormIn => "attn_norm_in",
            Tap::AttnIn => "attn_in",
            Tap::MlpNormIn => "mlp_norm_in",
            Tap::MlpIn => "mlp_in",
            Tap::FinalNormIn => "final_norm_in",
        }
    }
}

/// Observes each tapped activation and may return a replacement. A replaced
/// norm input feeds only the norm; the residual path keeps the clean stream.
pub trait TapHook {
    fn apply(&mut self, layer: usize, tap: Tap, x: &Matrix) -> Result<Option<Matrix>>;
}

pub struct NoHook;

impl TapHook for NoHook {
    fn apply(&mut self, _: usize, _: Tap, _: &Matrix) -> Result<Option<Matrix>> {
        Ok(None)
    }
}

/// Forward values of one block needed by the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    pub x: Matrix,
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
    pub xn: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities, index `b * h + head`, each `T x T`.
    pub attn: Vec<Matrix>,
    pub o: Matrix,
    pub y: Matrix,
    pub yhat: Matrix,
    pub rstd2: Vec<f64>,
    pub yn: Matrix,
    pub hpre: Matrix,
    pub g: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub batch: usize,
    pub tokens: usize,
    pub ids: Vec<usize>,
    pub layers: Vec<LayerTape>,
    pub xf: Matrix,
    pub xfhat: Matrix,
    pub rstdf: Vec<f64>,
    pub xfn: Matrix,
}

impl ForwardTape {
    /// Block outputs `X_1 .. X_L`.
    pub fn block_outputs(&self) -> Vec<ActivationTensor> {
        let mut out: Vec<ActivationTensor> =
            self.layers.iter().skip(1).map(|l| self.tensor(l.x.clone())).collect();
        if !self.layers.is_empty() {
            out.push(self.tensor(self.xf.clone()));
        }
        out
    }

    pub fn tensor(&self, m: Matrix) -> ActivationTensor {
        ActivationTensor::from_matrix(self.batch, self.tokens, m).expect("tape rows match batch x tokens")
    }
}

/// Block input `X` and post-attention stream `Y`.
#[derive(Clone, Debug)]
pub struct BlockTaps {
    pub x: ActivationTensor,
    pub y: ActivationTensor,
}

pub(super) fn norm_rows(x: &Matrix, kind: NormKind, gain: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = match kind {
            NormKind::LayerNorm => row.iter().sum::<f64>() / d as f64,
            NormKind::RmsNorm => 0.0,
        };
        let ms = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (ms + NORM_EPS).sqrt();
        rstd.push(rs);
        let hr = xhat.row_mut(r);
        for (h, v) in hr.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let hr = xhat.row(r);
        for ((o, h), g) in out.row_mut(r).iter_mut().zip(hr).zip(gain) {
            *o = h * g;
        }
    }
    (out, xhat, rstd)
}

/// Per-token LayerNorm or RMSNorm with `eps = 1e-6` and gain.
pub fn norm_forward(x: &ActivationTensor, kind: NormKind, gain: &[f64]) -> ActivationTensor {
    let (out, _, _) = norm_rows(x.as_matrix(), kind, gain);
    ActivationTensor::from_matrix(x.batch(), x.tokens(), out).expect("same shape")
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Phi(x) + x phi(x)`
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(super) fn softmax_rows(s: &mut Matrix, causal: bool) {
    let t = s.cols();
    for r in 0..s.rows() {
        let live = if causal { (r + 1).min(t) } else { t };
        let row = s.row_mut(r);
        let m = row[..live].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in &mut row[..live] {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in &mut row[..live] {
            *v /= z;
        }
        for v in &mut row[live..] {
            *v = 0.0;
        }
    }
}

pub(super) struct AttnOut {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Vec<Matrix>,
    pub o: Matrix,
    pub out: Matrix,
}

pub(super) fn attention_rows(
    xn: &Matrix,
    p: &LayerParams,
    batch: usize,
    t: usize,
    scale: f64,
    causal: bool,
) -> Result<AttnOut> {
    let h = p.wq.len();
    let dh = p.wq.first().map_or(0, |m| m.cols());
    let q = matmul(xn, &Matrix::hcat(&p.wq)?)?;
    let k = matmul(xn, &Matrix::hcat(&p.wk)?)?;
    let v = matmul(xn, &Matrix::hcat(&p.wv)?)?;
    let mut o = Matrix::zeros(xn.rows(), h * dh);
    let mut attn = Vec::with_capacity(batch * h);
    for b in 0..batch {
        for i in 0..h {
            let mut s = Matrix::zeros(t, t);
            gemm_block(scale, q.block(b * t, i * dh, t, dh), k.block(b * t, i * dh, t, dh).t(), 0.0, &mut s, 0, 0)?;
            softmax_rows(&mut s, causal);
            gemm_block(1.0, s.block(0, 0, t, t), v.block(b * t, i * dh, t, dh), 0.0, &mut o, b * t, i * dh)?;
            attn.push(s);
        }
    }
    let out = matmul(&o, &p.wo)?;
    Ok(AttnOut { q, k, v, attn, o, out })
}

/// Multi-head self-attention with logits `tau * Q K^T / sqrt(d_h)`.
pub fn attention_forward(x: &ActivationTensor, p: &LayerParams, tau: f64, causal: bool) -> Result<ActivationTensor> {
    let dh = p.wq.first().map_or(1, |m| m.cols());
    let a = attention_rows(x.as_matrix(), p, x.batch(), x.tokens(), tau / (dh as f64).sqrt(), causal)?;
    ActivationTensor::from_matrix(x.batch(), x.tokens(), a.out)
}

pub(super) fn mlp_rows(x: &Matrix, wu: &Matrix, wd: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let hpre = matmul(x, wu)?;
    let mut g = hpre.clone();
    g.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = matmul(&g, wd)?;
    Ok((hpre, g, out))
}

/// `GELU(x wu) wd` with exact GELU.
pub fn mlp_forward(x: &ActivationTensor, wu: &Matrix, wd: &Matrix) -> Result<ActivationTensor> {
    let (_, _, out) = mlp_rows(x.as_matrix(), wu, wd)?;
    ActivationTensor::from_matrix(x.batch(), x.tokens(), out)
}

pub(super) fn layer_forward(
    x: Matrix,
    batch: usize,
    t: usize,
    layer: usize,
    cfg: &BlockConfig,
    p: &LayerParams,
    hook: &mut dyn TapHook,
) -> Result<(LayerTape, Matrix)> {
    let norm_in = hook.apply(layer, Tap::AttnNormIn, &x)?;
    let (mut xn, xhat, rstd) = norm_rows(norm_in.as_ref().unwrap_or(&x), cfg.norm_kind, &p.attn_gain);
    if let Some(r) = hook.apply(layer, Tap::AttnIn, &xn)? {
        xn = r;
    }
    let a = attention_rows(&xn, p, batch, t, cfg.logit_scale(layer), cfg.causal)?;
    let y = if cfg.residual { x.add(&a.out)? } else { a.out };

    let norm_in = hook.apply(layer, Tap::MlpNormIn, &y)?;
    let (mut yn, yhat, rstd2) = norm_rows(norm_in.as_ref().unwrap_or(&y), cfg.norm_kind, &p.mlp_gain);
    if let Some(r) = hook.apply(layer, Tap::MlpIn, &yn)? {
        yn = r;
    }
    let (hpre, g, m) = mlp_rows(&yn, &p.wu, &p.wd)?;
    let next = if cfg.residual { y.add(&m)? } else { m };
    let tape = LayerTape { x, xhat, rstd, xn, q: a.q, k: a.k, v: a.v, attn: a.attn, o: a.o, y, yhat, rstd2, yn, hpre, g };
    Ok((tape, next))
}

/// One block at layer index `layer` (zero-based; sets the temperature).
pub fn block_forward(
    x: &ActivationTensor,
    layer: usize,
    cfg: &BlockConfig,
    p: &LayerParams,
) -> Result<(ActivationTensor, BlockTaps)> {
    let (tape, next) = layer_forward(x.as_matrix().clone(), x.batch(), x.tokens(), layer, cfg, p, &mut NoHook)?;
    let taps = BlockTaps {
        x: ActivationTensor::from_matrix(x.batch(), x.tokens(), tape.x)?,
        y: ActivationTensor::from_matrix(x.batch(), x.tokens(), tape.y)?,
    };
    Ok((ActivationTensor::from_matrix(x.batch(), x.tokens(), next)?, taps))
}

/// Embedding, `n_layers` blocks, final norm and output head.
/// Returns logits of shape `batch x T x V` and the tape.
pub fn model_forward(tokens: &TokenBatch, params: &ModelParams, cfg: &BlockConfig) -> Result<(ActivationTensor, ForwardTape)> {
    model_forward_hooked(tokens, params, cfg, &mut NoHook)
}

pub fn model_forward_hooked(
    tokens: &TokenBatch,
    params: &ModelParams,
    cfg: &BlockConfig,
    hook: &mut dyn TapHook,
) -> Result<(ActivationTensor, ForwardTape)> {
    let vocab = params.vocab();
    let d = cfg.d;
    if params.layers.len() != cfg.n_layers || params.embed.cols() != d {
        return Err(LabError::Dimension("parameters do not match the block config".into()));
    }
    let mut x = Matrix::zeros(tokens.len(), d);
    for (r, &id) in tokens.ids.iter().enumerate() {
        if id >= vocab {
            return Err(LabError::Data(format!("token {id} out of range for vocab {vocab}")));
        }
        x.row_mut(r).copy_from_slice(params.embed.row(id));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, p) in params.layers.iter().enumerate() {
        let (tape, next) = layer_forward(x, tokens.batch, tokens.tokens, l, cfg, p, hook)?;
        layers.push(tape);
        x = next;
    }
    let norm_in = hook.apply(cfg.n_layers, Tap::FinalNormIn, &x)?;
    let (xfn, xfhat, rstdf) = norm_rows(norm_in.as_ref().unwrap_or(&x), cfg.norm_kind, &params.final_gain);
    let logits = matmul(&xfn, &params.head)?;
    if !logits.is_finite() {
        return Err(LabError::Numerical("non-finite logits".into()));
    }
    let tape = ForwardTape {
        batch: tokens.batch,
        tokens: tokens.tokens,
        ids: tokens.ids.clone(),
        layers,
        xf: x,
        xfhat,
        rstdf,
        xfn,
    };
    Ok((ActivationTensor::from_matrix(tokens.batch, tokens.tokens, logits)?, tape))
}
