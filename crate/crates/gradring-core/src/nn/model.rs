//! Forward pass with activation tape and the full analytic backward pass.
//!
//! All backward arithmetic runs in f64; gradients are quantized once when
//! written into the gradient tensors, which carry the parameter dtype. That
//! is where half-precision overflow (and hence step skipping) is detected.

use super::attention::{copy_into_rows, masked_softmax_cols, slice_rows};
use super::{NnError, ParamSet};
use crate::tensor::{Dtype, Tensor};

const LN_EPS: f64 = 1e-5;

/// Gradients in parameter layout plus an overflow indicator.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub grads: ParamSet,
    pub overflow: bool,
}

impl GradientSet {
    pub fn zeros_like(params: &ParamSet) -> GradientSet {
        GradientSet {
            grads: params.zeros_like(),
            overflow: false,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.grads.to_flat()
    }

    pub fn from_flat(&mut self, flat: &[f64]) {
        self.grads.from_flat(flat);
    }

    pub fn all_finite(&self) -> bool {
        !self.overflow && self.grads.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for (_, t) in self.grads.tensors_mut() {
            *t = t.scale(s);
        }
    }
}

struct LnCache {
    xhat: Tensor, // f64, d x t
    istd: Vec<f64>,
}

struct HeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
}

struct LayerCache {
    ln1: LnCache,
    x1: Tensor,
    heads: Vec<HeadCache>,
    concat: Tensor,
    ln2: LnCache,
    x2: Tensor,
    ff_pre: Tensor,
    h: Tensor,
}

struct SampleTape {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Tensor,
    probs: Tensor,
}

/// Activation record from one forward pass, consumed by `backward`.
pub struct Tape {
    fingerprint: u64,
    loss: f64,
    samples: Vec<SampleTape>,
}

impl Tape {
    pub fn loss(&self) -> f64 {
        self.loss
    }
}

/// Token + position embedding: one column per token.
pub fn embed(params: &ParamSet, tokens: &[usize]) -> Result<Tensor, NnError> {
    let cfg = &params.config;
    if tokens.len() > cfg.n_ctx {
        return Err(NnError::SequenceTooLong(tokens.len(), cfg.n_ctx));
    }
    if tokens.is_empty() {
        return Err(NnError::SequenceTooShort(0));
    }
    let d = cfg.n_embd;
    let mut a = Tensor::zeros(&[d, tokens.len()], params.dtype());
    for (t, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab_size {
            return Err(NnError::TokenOutOfRange(tok, cfg.vocab_size));
        }
        for r in 0..d {
            a.set(
                r,
                t,
                params.token_embedding.get(tok, r) + params.pos_embedding.get(t, r),
            );
        }
    }
    Ok(a)
}

fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LnCache) {
    let (d, t) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[d, t], x.dtype());
    let mut xhat = Tensor::zeros(&[d, t], Dtype::F64);
    let mut istd = vec![0.0; t];
    for j in 0..t {
        let mean: f64 = (0..d).map(|i| x.get(i, j)).sum::<f64>() / d as f64;
        let var: f64 = (0..d).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        istd[j] = inv;
        for i in 0..d {
            let xh = (x.get(i, j) - mean) * inv;
            xhat.set(i, j, xh);
            y.set(i, j, gain.get(i, 0) * xh + bias.get(i, 0));
        }
    }
    (y, LnCache { xhat, istd })
}

/// Gradient of layer-norm. Returns (dx, dgain, dbias) in f64.
fn layernorm_backward(cache: &LnCache, gain: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (d, t) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[d, t], Dtype::F64);
    let mut dgain = Tensor::zeros(&[d], Dtype::F64);
    let mut dbias = Tensor::zeros(&[d], Dtype::F64);
    for j in 0..t {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            let dxh = gain.get(i, 0) * dy.get(i, j);
            m1 += dxh;
            m2 += dxh * cache.xhat.get(i, j);
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for i in 0..d {
            let dxh = gain.get(i, 0) * dy.get(i, j);
            dx.set(
                i,
                j,
                cache.istd[j] * (dxh - m1 - cache.xhat.get(i, j) * m2),
            );
            dgain.set(i, 0, dgain.get(i, 0) + dy.get(i, j) * cache.xhat.get(i, j));
            dbias.set(i, 0, dbias.get(i, 0) + dy.get(i, j));
        }
    }
    (dx, dgain, dbias)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn head_tensor(params: &ParamSet) -> &Tensor {
    params.head.as_ref().unwrap_or(&params.token_embedding)
}

/// Column vector broadcast add: out[i][j] = m[i][j] + b[i].
fn add_bias(m: &Tensor, b: &Tensor) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = Tensor::zeros(&[rows, cols], m.dtype());
    for i in 0..rows {
        for j in 0..cols {
            out.set(i, j, m.get(i, j) + b.get(i, 0));
        }
    }
    out
}

fn row_sums(m: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[m.rows()], Dtype::F64);
    for i in 0..m.rows() {
        out.set(i, 0, (0..m.cols()).map(|j| m.get(i, j)).sum());
    }
    out
}

/// Quantized accumulate: dst += src at dst's dtype.
fn accumulate(dst: &mut Tensor, src: &Tensor) {
    let sum: Vec<f64> = dst
        .data()
        .iter()
        .zip(src.data())
        .map(|(a, b)| a + b)
        .collect();
    *dst = Tensor::from_vec(dst.shape(), dst.dtype(), sum);
}

/// Run the model over a batch of token sequences. Each sequence of length T
/// contributes T-1 next-token predictions; the loss is the mean negative
/// log-likelihood over all predictions of all sequences.
pub fn forward(params: &ParamSet, batch: &[Vec<usize>]) -> Result<(f64, Tape), NnError> {
    let cfg = &params.config;
    cfg.validate()?;
    if batch.is_empty() {
        return Err(NnError::BadConfig("empty batch".into()));
    }
    let n_head = cfg.n_head;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut samples = Vec::with_capacity(batch.len());
    let mut loss_total = 0.0;

    for tokens in batch {
        if tokens.len() < 2 {
            return Err(NnError::SequenceTooShort(tokens.len()));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let mut a = embed(params, inputs)?;
        for &tok in &tokens[tokens.len() - 1..] {
            if tok >= cfg.vocab_size {
                return Err(NnError::TokenOutOfRange(tok, cfg.vocab_size));
            }
        }
        let t = inputs.len();
        let mut layers = Vec::with_capacity(cfg.n_layer);
        for layer in &params.layers {
            let (x1, ln1) = layernorm(&a, &layer.ln1_gain, &layer.ln1_bias);
            let mut concat = Tensor::zeros(&[cfg.n_embd, t], a.dtype());
            let mut heads = Vec::with_capacity(n_head);
            for h in 0..n_head {
                let wq = slice_rows(&layer.w_q, h * dh, dh);
                let wk = slice_rows(&layer.w_k, h * dh, dh);
                let wv = slice_rows(&layer.w_v, h * dh, dh);
                let q = wq.matmul(&x1)?;
                let k = wk.matmul(&x1)?;
                let v = wv.matmul(&x1)?;
                let scores = k.transpose().matmul(&q)?.scale(scale);
                let probs = masked_softmax_cols(&scores, cfg.causal_mask);
                let b_h = v.matmul(&probs)?;
                copy_into_rows(&mut concat, h * dh, &b_h);
                heads.push(HeadCache { q, k, v, probs });
            }
            let attn = layer.w_attn_out.matmul(&concat)?;
            let a1 = a.add(&attn)?;
            let (x2, ln2) = layernorm(&a1, &layer.ln2_gain, &layer.ln2_bias);
            let ff_pre = add_bias(&layer.w_ff1.matmul(&x2)?, &layer.b_ff1);
            let h_act = ff_pre.map(gelu);
            let ff = add_bias(&layer.w_ff2.matmul(&h_act)?, &layer.b_ff2);
            let a2 = a1.add(&ff)?;
            layers.push(LayerCache {
                ln1,
                x1,
                heads,
                concat,
                ln2,
                x2,
                ff_pre,
                h: h_act,
            });
            a = a2;
        }
        let (xf, lnf) = layernorm(&a, &params.ln_f_gain, &params.ln_f_bias);
        let logits = head_tensor(params).matmul(&xf)?;
        // Loss from a numerically stable log-softmax in f64.
        let vocab = cfg.vocab_size;
        let mut probs = Tensor::zeros(&[vocab, t], Dtype::F64);
        for j in 0..t {
            let target = tokens[j + 1];
            let mx = (0..vocab).fold(f64::NEG_INFINITY, |m, i| m.max(logits.get(i, j)));
            let lse: f64 = (0..vocab).map(|i| (logits.get(i, j) - mx).exp()).sum();
            for i in 0..vocab {
                probs.set(i, j, (logits.get(i, j) - mx).exp() / lse);
            }
            loss_total += -(logits.get(target, j) - mx - lse.ln()) / t as f64;
        }
        samples.push(SampleTape {
            tokens: tokens.clone(),
            layers,
            lnf,
            xf,
            probs,
        });
    }

    let loss = loss_total / batch.len() as f64;
    Ok((
        loss,
        Tape {
            fingerprint: params.fingerprint(),
            loss,
            samples,
        },
    ))
}

/// Analytic gradients of `loss * loss_scale` with respect to every
/// parameter. Fails with `StaleTape` if the parameters changed since the
/// tape was recorded.
pub fn backward(tape: &Tape, params: &ParamSet, loss_scale: f64) -> Result<GradientSet, NnError> {
    if params.fingerprint() != tape.fingerprint {
        return Err(NnError::StaleTape);
    }
    let cfg = &params.config;
    let n_head = cfg.n_head;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let d = cfg.n_embd;
    let batch = tape.samples.len() as f64;
    let mut out = GradientSet::zeros_like(params);

    // f64 working copies of the weights used on the reverse path.
    let head_w = head_tensor(params).cast(Dtype::F64);
    let f64_layers: Vec<_> = params
        .layers
        .iter()
        .map(|l| {
            (
                l.w_q.cast(Dtype::F64),
                l.w_k.cast(Dtype::F64),
                l.w_v.cast(Dtype::F64),
                l.w_attn_out.cast(Dtype::F64),
                l.w_ff1.cast(Dtype::F64),
                l.w_ff2.cast(Dtype::F64),
            )
        })
        .collect();

    for sample in &tape.samples {
        let t = sample.tokens.len() - 1;
        // dL/dlogits = (softmax - onehot) * loss_scale / (batch * t).
        let w = loss_scale / (batch * t as f64);
        let mut dlogits = sample.probs.scale(w);
        for j in 0..t {
            let target = sample.tokens[j + 1];
            dlogits.set(target, j, dlogits.get(target, j) - w);
        }
        let xf64 = sample.xf.cast(Dtype::F64);
        let dhead = dlogits.matmul(&xf64.transpose())?;
        let dxf = head_w.transpose().matmul(&dlogits)?;
        if cfg.tied_output {
            accumulate(&mut out.grads.token_embedding, &dhead);
        } else {
            accumulate(out.grads.head.as_mut().unwrap(), &dhead);
        }
        let (mut da, dgf, dbf) = layernorm_backward(&sample.lnf, &params.ln_f_gain, &dxf);
        accumulate(&mut out.grads.ln_f_gain, &dgf);
        accumulate(&mut out.grads.ln_f_bias, &dbf);

        for (l, cache) in sample.layers.iter().enumerate().rev() {
            let (wq, wk, wv, wo, wff1, wff2) = &f64_layers[l];
            let gl = &mut out.grads.layers[l];
            // Feed-forward branch; `da` is the gradient at the block output.
            let h64 = cache.h.cast(Dtype::F64);
            accumulate(&mut gl.b_ff2, &row_sums(&da));
            accumulate(&mut gl.w_ff2, &da.matmul(&h64.transpose())?);
            let dh_act = wff2.transpose().matmul(&da)?;
            let dpre = dh_act.zip_with(&cache.ff_pre.cast(Dtype::F64), |g, x| g * gelu_prime(x))?;
            accumulate(&mut gl.b_ff1, &row_sums(&dpre));
            let x264 = cache.x2.cast(Dtype::F64);
            accumulate(&mut gl.w_ff1, &dpre.matmul(&x264.transpose())?);
            let dx2 = wff1.transpose().matmul(&dpre)?;
            let (dres, dg2, db2) = layernorm_backward(&cache.ln2, &params.layers[l].ln2_gain, &dx2);
            accumulate(&mut gl.ln2_gain, &dg2);
            accumulate(&mut gl.ln2_bias, &db2);
            let da1 = da.add(&dres)?;

            // Attention branch.
            let concat64 = cache.concat.cast(Dtype::F64);
            accumulate(&mut gl.w_attn_out, &da1.matmul(&concat64.transpose())?);
            let dconcat = wo.transpose().matmul(&da1)?;
            let x164 = cache.x1.cast(Dtype::F64);
            let mut dx1 = Tensor::zeros(&[d, t], Dtype::F64);
            let mut dwq = Tensor::zeros(&[d, d], Dtype::F64);
            let mut dwk = Tensor::zeros(&[d, d], Dtype::F64);
            let mut dwv = Tensor::zeros(&[d, d], Dtype::F64);
            for h in 0..n_head {
                let hc = &cache.heads[h];
                let db_h = slice_rows(&dconcat, h * dh, dh);
                let p64 = hc.probs.cast(Dtype::F64);
                let v64 = hc.v.cast(Dtype::F64);
                let q64 = hc.q.cast(Dtype::F64);
                let k64 = hc.k.cast(Dtype::F64);
                let dv = db_h.matmul(&p64.transpose())?;
                let dp = v64.transpose().matmul(&db_h)?;
                // Column-wise softmax Jacobian; masked rows have zero
                // probability and thus zero gradient.
                let mut ds = Tensor::zeros(&[t, t], Dtype::F64);
                for j in 0..t {
                    let dot: f64 = (0..t).map(|i| dp.get(i, j) * p64.get(i, j)).sum();
                    for i in 0..t {
                        ds.set(i, j, p64.get(i, j) * (dp.get(i, j) - dot));
                    }
                }
                let dq = k64.matmul(&ds)?.scale(scale);
                let dk = q64.matmul(&ds.transpose())?.scale(scale);
                copy_into_rows(&mut dwq, h * dh, &dq.matmul(&x164.transpose())?);
                copy_into_rows(&mut dwk, h * dh, &dk.matmul(&x164.transpose())?);
                copy_into_rows(&mut dwv, h * dh, &dv.matmul(&x164.transpose())?);
                let wq_h = slice_rows(wq, h * dh, dh);
                let wk_h = slice_rows(wk, h * dh, dh);
                let wv_h = slice_rows(wv, h * dh, dh);
                dx1 = dx1.add(&wq_h.transpose().matmul(&dq)?)?;
                dx1 = dx1.add(&wk_h.transpose().matmul(&dk)?)?;
                dx1 = dx1.add(&wv_h.transpose().matmul(&dv)?)?;
            }
            accumulate(&mut gl.w_q, &dwq);
            accumulate(&mut gl.w_k, &dwk);
            accumulate(&mut gl.w_v, &dwv);
            let (dres1, dg1, db1) = layernorm_backward(&cache.ln1, &params.layers[l].ln1_gain, &dx1);
            accumulate(&mut gl.ln1_gain, &dg1);
            accumulate(&mut gl.ln1_bias, &db1);
            da = da1.add(&dres1)?;
        }

        // Embedding scatter.
        for (j, &tok) in sample.tokens[..t].iter().enumerate() {
            for r in 0..d {
                let g = da.get(r, j);
                out.grads
                    .token_embedding
                    .set(tok, r, out.grads.token_embedding.get(tok, r) + g);
                out.grads
                    .pos_embedding
                    .set(j, r, out.grads.pos_embedding.get(j, r) + g);
            }
        }
    }

    out.overflow = out.grads.tensors().iter().any(|(_, t)| t.overflowed())
        || out.grads.to_flat().iter().any(|v| !v.is_finite());
    Ok(out)
}
