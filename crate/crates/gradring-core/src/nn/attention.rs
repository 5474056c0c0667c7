//! Scaled dot-product attention in two algebraically equivalent forms: a
//! per-vector loop (the reference used as an oracle everywhere) and the
//! matrix form actually used by the model.
//!
//! Convention: activation matrices hold one token per column, so A is
//! n_embd x seq_len and the score matrix K^T Q has keys on rows and queries
//! on columns.

use super::{LayerParams, NnError};
use crate::tensor::Tensor;

/// Column-wise softmax with an optional causal mask: query column j may
/// only attend to key rows i <= j. Max-subtraction keeps the exponentials
/// bounded; masked entries are exactly zero.
pub(crate) fn masked_softmax_cols(scores: &Tensor, causal: bool) -> Tensor {
    let (m, n) = (scores.rows(), scores.cols());
    let mut out = Tensor::zeros(&[m, n], scores.dtype());
    for j in 0..n {
        let limit = if causal { (j + 1).min(m) } else { m };
        let mut mx = f64::NEG_INFINITY;
        for i in 0..limit {
            mx = mx.max(scores.get(i, j));
        }
        let mut col = vec![0.0; limit];
        let mut sum = 0.0;
        for i in 0..limit {
            let e = (scores.get(i, j) - mx).exp();
            col[i] = e;
            sum += e;
        }
        for i in 0..limit {
            out.set(i, j, col[i] / sum);
        }
    }
    out
}

/// Per-vector reference: for each query vector, score every key with
/// (q . k)/sqrt(d), normalize, and take the weighted sum of value vectors.
/// Explicit scalar loops; no matrix products.
pub fn attention_reference(
    a: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    causal: bool,
) -> Result<Tensor, NnError> {
    let d = a.rows();
    let t = a.cols();
    let dh = w_q.rows();
    if w_q.cols() != d || w_k.cols() != d || w_v.cols() != d || w_k.rows() != dh || w_v.rows() != dh
    {
        return Err(NnError::BadConfig("attention weight shapes".into()));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let project = |w: &Tensor, i: usize| -> Vec<f64> {
        (0..dh)
            .map(|r| (0..d).map(|c| w.get(r, c) * a.get(c, i)).sum())
            .collect()
    };
    let mut out = Tensor::zeros(&[dh, t], a.dtype());
    for i in 0..t {
        let q_i = project(w_q, i);
        let limit = if causal { i + 1 } else { t };
        let mut alpha = vec![0.0; limit];
        for (j, slot) in alpha.iter_mut().enumerate() {
            let k_j = project(w_k, j);
            *slot = q_i.iter().zip(&k_j).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let mx = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s: Vec<f64> = alpha.iter().map(|&x| (x - mx).exp()).collect();
        let z: f64 = s.iter().sum();
        for x in &mut s {
            *x /= z;
        }
        for j in 0..limit {
            let v_j = project(w_v, j);
            for r in 0..dh {
                let prev = out.get(r, i);
                out.set(r, i, prev + s[j] * v_j[r]);
            }
        }
    }
    Ok(out)
}

/// Matrix form: Q = W^Q A, K = W^K A, V = W^V A, scores = K^T Q / sqrt(d),
/// B = V softmax(scores).
pub fn attention_matrix(
    a: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    causal: bool,
) -> Result<Tensor, NnError> {
    let q = w_q.matmul(a)?;
    let k = w_k.matmul(a)?;
    let v = w_v.matmul(a)?;
    let scale = 1.0 / (w_q.rows() as f64).sqrt();
    let scores = k.transpose().matmul(&q)?.scale(scale);
    let probs = masked_softmax_cols(&scores, causal);
    Ok(v.matmul(&probs)?)
}

/// Run every head of a layer over the row-partitioned projections, stack
/// the head outputs, and apply the output matrix.
pub fn multi_head(a: &Tensor, layer: &LayerParams, n_head: usize) -> Result<Tensor, NnError> {
    let b = multi_head_concat(a, layer, n_head, true)?;
    Ok(layer.w_attn_out.matmul(&b)?)
}

/// Concatenated per-head outputs without the output matrix.
pub(crate) fn multi_head_concat(
    a: &Tensor,
    layer: &LayerParams,
    n_head: usize,
    causal: bool,
) -> Result<Tensor, NnError> {
    let d = a.rows();
    let t = a.cols();
    if d % n_head != 0 {
        return Err(NnError::BadConfig("head split".into()));
    }
    let dh = d / n_head;
    let mut out = Tensor::zeros(&[d, t], a.dtype());
    for h in 0..n_head {
        let wq = slice_rows(&layer.w_q, h * dh, dh);
        let wk = slice_rows(&layer.w_k, h * dh, dh);
        let wv = slice_rows(&layer.w_v, h * dh, dh);
        let b_h = attention_matrix(a, &wq, &wk, &wv, causal)?;
        copy_into_rows(&mut out, h * dh, &b_h);
    }
    Ok(out)
}

pub(crate) fn slice_rows(t: &Tensor, start: usize, count: usize) -> Tensor {
    let cols = t.cols();
    let data = t.data()[start * cols..(start + count) * cols].to_vec();
    Tensor::from_vec(&[count, cols], t.dtype(), data)
}

pub(crate) fn copy_into_rows(dst: &mut Tensor, start: usize, src: &Tensor) {
    let cols = dst.cols();
    debug_assert_eq!(cols, src.cols());
    let n = src.len();
    dst.data_mut()[start * cols..start * cols + n].copy_from_slice(src.data());
}
