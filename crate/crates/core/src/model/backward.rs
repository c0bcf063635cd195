use crate::error::{LabError, Result};
use crate::linalg::{gemm, gemm_block, matmul_nt, matmul_tn, Matrix, Op};

use super::forward::{gelu_grad, ForwardTape, LayerTape};
use super::{ActivationTensor, BlockConfig, LayerParams, ModelParams, NormKind};

/// Gradient through `out = gain * xhat`. Accumulates the gain gradient and
/// returns the input gradient.
fn norm_backward(dout: &Matrix, xhat: &Matrix, rstd: &[f64], gain: &[f64], kind: NormKind, dgain: &mut [f64]) -> Matrix {
    let (n, d) = dout.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let (go, xh) = (dout.row(r), xhat.row(r));
        for c in 0..d {
            dgain[c] += go[c] * xh[c];
            dxhat[c] = go[c] * gain[c];
        }
        let mean_d = match kind {
            NormKind::LayerNorm => dxhat.iter().sum::<f64>() / d as f64,
            NormKind::RmsNorm => 0.0,
        };
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn split_heads(full: &Matrix, h: usize) -> Vec<Matrix> {
    let dh = full.cols() / h;
    (0..h).map(|i| full.columns(i * dh, (i + 1) * dh)).collect()
}

fn layer_backward(
    dout: &Matrix,
    tape: &LayerTape,
    p: &LayerParams,
    cfg: &BlockConfig,
    layer: usize,
    batch: usize,
    t: usize,
    grad: &mut LayerParams,
) -> Result<Matrix> {
    let h = cfg.h;
    let dh = cfg.d_h();

    // MLP: out = gelu(yn wu) wd
    grad.wd = matmul_tn(&tape.g, dout)?;
    let mut dh_act = matmul_nt(dout, &p.wd)?;
    for (g, x) in dh_act.data_mut().iter_mut().zip(tape.hpre.data()) {
        *g *= gelu_grad(*x);
    }
    grad.wu = matmul_tn(&tape.yn, &dh_act)?;
    let dyn_ = matmul_nt(&dh_act, &p.wu)?;
    let mut dy = norm_backward(&dyn_, &tape.yhat, &tape.rstd2, &p.mlp_gain, cfg.norm_kind, &mut grad.mlp_gain);
    if cfg.residual {
        dy.axpy(1.0, dout)?;
    }

    // attention: out = O wo, O_bi = A_bi V_bi, A = softmax(c Q K^T)
    grad.wo = matmul_tn(&tape.o, &dy)?;
    let d_o = matmul_nt(&dy, &p.wo)?;
    let rows = d_o.rows();
    let mut dq = Matrix::zeros(rows, h * dh);
    let mut dk = Matrix::zeros(rows, h * dh);
    let mut dv = Matrix::zeros(rows, h * dh);
    let c = cfg.logit_scale(layer);
    let mut da = Matrix::zeros(t, t);
    for b in 0..batch {
        for i in 0..h {
            let a = &tape.attn[b * h + i];
            let (r0, c0) = (b * t, i * dh);
            gemm_block(1.0, d_o.block(r0, c0, t, dh), tape.v.block(r0, c0, t, dh).t(), 0.0, &mut da, 0, 0)?;
            gemm_block(1.0, a.block(0, 0, t, t).t(), d_o.block(r0, c0, t, dh), 0.0, &mut dv, r0, c0)?;
            // dS = A * (dA - rowsum(dA * A)); masked entries have A = 0
            for r in 0..t {
                let (ar, dr) = (a.row(r), da.row_mut(r));
                let s: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                for (dv_, av) in dr.iter_mut().zip(ar) {
                    *dv_ = av * (*dv_ - s);
                }
            }
            gemm_block(c, da.block(0, 0, t, t), tape.k.block(r0, c0, t, dh), 0.0, &mut dq, r0, c0)?;
            gemm_block(c, da.block(0, 0, t, t).t(), tape.q.block(r0, c0, t, dh), 0.0, &mut dk, r0, c0)?;
        }
    }
    grad.wq = split_heads(&matmul_tn(&tape.xn, &dq)?, h);
    grad.wk = split_heads(&matmul_tn(&tape.xn, &dk)?, h);
    grad.wv = split_heads(&matmul_tn(&tape.xn, &dv)?, h);
    let mut dxn = matmul_nt(&dq, &Matrix::hcat(&p.wq)?)?;
    gemm(1.0, &dk, Op::N, &Matrix::hcat(&p.wk)?, Op::T, 1.0, &mut dxn)?;
    gemm(1.0, &dv, Op::N, &Matrix::hcat(&p.wv)?, Op::T, 1.0, &mut dxn)?;
    let mut dx = norm_backward(&dxn, &tape.xhat, &tape.rstd, &p.attn_gain, cfg.norm_kind, &mut grad.attn_gain);
    if cfg.residual {
        dx.axpy(1.0, &dy)?;
    }
    Ok(dx)
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// the loss gradient `dlogits` and the tape of the matching forward pass.
pub fn model_backward(
    tape: &ForwardTape,
    params: &ModelParams,
    cfg: &BlockConfig,
    dlogits: &ActivationTensor,
) -> Result<ModelParams> {
    let vocab = params.vocab();
    let n = tape.batch * tape.tokens;
    if dlogits.as_matrix().shape() != (n, vocab) || tape.layers.len() != params.layers.len() {
        return Err(LabError::Internal("tape does not match logits gradient or parameters".into()));
    }
    let mut grad = ModelParams::zeros(cfg, vocab);
    let dl = dlogits.as_matrix();
    grad.head = matmul_tn(&tape.xfn, dl)?;
    let dxfn = matmul_nt(dl, &params.head)?;
    let mut dx = norm_backward(&dxfn, &tape.xfhat, &tape.rstdf, &params.final_gain, cfg.norm_kind, &mut grad.final_gain);
    for l in (0..params.layers.len()).rev() {
        dx = layer_backward(
            &dx,
            &tape.layers[l],
            &params.layers[l],
            cfg,
            l,
            tape.batch,
            tape.tokens,
            &mut grad.layers[l],
        )?;
    }
    for (r, &id) in tape.ids.iter().enumerate() {
        for (g, v) in grad.embed.row_mut(id).iter_mut().zip(dx.row(r)) {
            *g += v;
        }
    }
    Ok(grad)
}

/// Input gradient of one block for the residual identity check in tests.
#[cfg(test)]
pub(crate) fn block_input_grad(
    dout: &Matrix,
    tape: &LayerTape,
    p: &LayerParams,
    cfg: &BlockConfig,
    batch: usize,
    t: usize,
) -> Matrix {
    let mut g = LayerParams::zeros(cfg);
    layer_backward(dout, tape, p, cfg, 0, batch, t, &mut g).unwrap()
}

#[cfg(test)]
mod tests {
    use super::super::forward::{layer_forward, NoHook};
    use super::super::{cross_entropy, model_forward, tiny_config, TokenBatch};
    use super::*;
    use crate::init::{InitKind, InitSpec};
    use crate::linalg::RngStream;

    #[test]
    fn zero_dlogits_zero_grads() {
        let cfg = tiny_config(true, NormKind::LayerNorm);
        let rng = RngStream::new(1, 0);
        let p = ModelParams::init(&rng, &cfg, 6, &InitSpec::recipe()).unwrap();
        let tb = TokenBatch::new(2, 4, vec![0, 1, 2, 3, 4, 5, 0, 1]).unwrap();
        let (logits, tape) = model_forward(&tb, &p, &cfg).unwrap();
        let z = ActivationTensor::zeros(logits.batch(), logits.tokens(), logits.dim());
        let g = model_backward(&tape, &p, &cfg, &z).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn residual_identity_passes_gradient() {
        let cfg = tiny_config(true, NormKind::RmsNorm);
        let mut rng = RngStream::new(2, 0);
        let mut p = LayerParams::init(&mut rng, &cfg, &InitSpec::recipe()).unwrap();
        p.wv.iter_mut().for_each(|m| *m = Matrix::zeros(m.rows(), m.cols()));
        p.wo = Matrix::zeros(16, 16);
        p.wu = Matrix::zeros(16, 24);
        p.wd = Matrix::zeros(24, 16);
        let x = Matrix::gaussian(&mut rng, 8, 16, 1.0);
        let (tape, _) = layer_forward(x, 2, 4, 0, &cfg, &p, &mut NoHook).unwrap();
        let dout = Matrix::gaussian(&mut rng, 8, 16, 1.0);
        let dx = block_input_grad(&dout, &tape, &p, &cfg, 2, 4);
        assert_eq!(dx, dout);
    }

    fn loss_of(p: &ModelParams, cfg: &BlockConfig, tb: &TokenBatch, targets: &[usize]) -> f64 {
        let (logits, _) = model_forward(tb, p, cfg).unwrap();
        cross_entropy(&logits, targets).unwrap().0
    }

    fn rms(m: &Matrix) -> f64 {
        (m.data().iter().map(|v| v * v).sum::<f64>() / m.data().len() as f64).sqrt()
    }

    /// Central differences on a sample of coordinates of every parameter.
    pub(crate) fn fd_check(residual: bool, kind: NormKind, init: InitSpec) -> f64 {
        let cfg = tiny_config(residual, kind);
        let rng = RngStream::new(3, 0);
        let mut p = ModelParams::init(&rng, &cfg, 7, &init).unwrap();
        let mut r = RngStream::new(4, 0);
        for g in p.gains_mut() {
            g.iter_mut().for_each(|v| *v = 1.0 + 0.2 * r.gaussian());
        }
        let tb = TokenBatch::new(2, 4, (0..8).map(|_| r.below(7)).collect()).unwrap();
        let targets: Vec<usize> = (0..8).map(|_| r.below(7)).collect();
        let (logits, tape) = model_forward(&tb, &p, &cfg).unwrap();
        let (_, dl) = cross_entropy(&logits, &targets).unwrap();
        let grad = model_backward(&tape, &p, &cfg, &dl).unwrap();

        let mut worst: f64 = 0.0;
        let n_mats = p.matrices().len();
        for mi in 0..n_mats {
            let scale = rms(p.matrices()[mi].1).max(1e-3);
            let h = 1e-4 * scale;
            let len = p.matrices()[mi].1.data().len();
            for k in (0..len).step_by(7) {
                let orig = p.matrices_mut()[mi].data()[k];
                p.matrices_mut()[mi].data_mut()[k] = orig + h;
                let lp = loss_of(&p, &cfg, &tb, &targets);
                p.matrices_mut()[mi].data_mut()[k] = orig - h;
                let lm = loss_of(&p, &cfg, &tb, &targets);
                p.matrices_mut()[mi].data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.matrices()[mi].1.data()[k];
                worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4)));
            }
        }
        let n_gains = p.gains().len();
        for gi in 0..n_gains {
            for k in 0..cfg.d {
                let h = 1e-4;
                let orig = p.gains()[gi][k];
                p.gains_mut()[gi][k] = orig + h;
                let lp = loss_of(&p, &cfg, &tb, &targets);
                p.gains_mut()[gi][k] = orig - h;
                let lm = loss_of(&p, &cfg, &tb, &targets);
                p.gains_mut()[gi][k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.gains()[gi][k];
                worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4)));
            }
        }
        for &id in &tb.ids {
            for c in 0..cfg.d {
                let h = 1e-4 * rms(&p.embed);
                let orig = p.embed[(id, c)];
                p.embed[(id, c)] = orig + h;
                let lp = loss_of(&p, &cfg, &tb, &targets);
                p.embed[(id, c)] = orig - h;
                let lm = loss_of(&p, &cfg, &tb, &targets);
                p.embed[(id, c)] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.embed[(id, c)];
                worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4)));
            }
        }
        worst
    }

    #[test]
    fn finite_differences_all_variants() {
        for residual in [true, false] {
            for kind in [NormKind::LayerNorm, NormKind::RmsNorm] {
                for init in [InitSpec::recipe(), InitSpec::gaussian(InitKind::GaussianXavier)] {
                    let e = fd_check(residual, kind, init);
                    assert!(e <= 1e-5, "residual={residual} {kind:?} {:?}: {e}", init.kind);
                }
            }
        }
    }
}
