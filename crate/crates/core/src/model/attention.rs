use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, KeySpan, Tensor, Var};

/// Projection weights of one attention layer (`d×d` matrices, `d` biases).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Graph handles for [`AttnWeights`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnWeights {
    pub(crate) fn bind(&self, g: &mut Graph) -> AttnVars {
        AttnVars {
            wq: g.constant(self.wq.clone()),
            bq: g.constant(self.bq.clone()),
            wk: g.constant(self.wk.clone()),
            bk: g.constant(self.bk.clone()),
            wv: g.constant(self.wv.clone()),
            bv: g.constant(self.bv.clone()),
            wo: g.constant(self.wo.clone()),
            bo: g.constant(self.bo.clone()),
        }
    }
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Projected multi-head attention of `x` over `kv`.
pub(crate) fn attend(
    g: &mut Graph,
    x: Var,
    kv: Var,
    w: &AttnVars,
    heads: usize,
    spans: Option<Arc<[KeySpan]>>,
) -> Result<Var> {
    let q = linear(g, x, w.wq, w.bq)?;
    let k = linear(g, kv, w.wk, w.bk)?;
    let v = linear(g, kv, w.wv, w.bv)?;
    let o = g.attention(q, k, v, heads, spans)?;
    linear(g, o, w.wo, w.bo)
}

/// Boolean `N×M` attention mask (`true` = query may see key).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        (0..n).for_each(|i| allow[i * n + i] = true);
        Self {
            rows: n,
            cols: n,
            allow,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    /// Per-row key spans. Rows must be non-empty contiguous intervals.
    pub fn spans(&self) -> Result<Arc<[KeySpan]>> {
        (0..self.rows)
            .map(|i| {
                let row = &self.allow[i * self.cols..(i + 1) * self.cols];
                let lo = row.iter().position(|&a| a).ok_or(Error::DegenerateMask { row: i })?;
                let hi = row.iter().rposition(|&a| a).expect("row has a true entry") + 1;
                if row[lo..hi].iter().any(|&a| !a) {
                    return Err(Error::Parameter(format!("mask row {i} is not a contiguous interval")));
                }
                Ok((lo, hi))
            })
            .collect()
    }
}

/// Multi-head cross-attention of queries `q[N×d]` over `kv[M×d]`.
///
/// Masked keys never enter the softmax, which is the same as giving them a
/// score of `-inf`: their weight is exactly zero and the remaining weights
/// are renormalized over the allowed keys.
pub fn cross_attention(
    q: &Tensor,
    kv: &Tensor,
    mask: Option<&AttnMask>,
    weights: &AttnWeights,
    heads: usize,
) -> Result<Tensor> {
    let spans = match mask {
        Some(m) => {
            if m.rows != q.shape()[0] || m.cols != kv.shape()[0] {
                return Err(Error::Dimension(format!(
                    "mask {}×{} for {:?} queries and {:?} keys",
                    m.rows,
                    m.cols,
                    q.shape(),
                    kv.shape()
                )));
            }
            Some(m.spans()?)
        }
        None => None,
    };
    let mut g = Graph::new();
    let w = weights.bind(&mut g);
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let out = attend(&mut g, qv, kvv, &w, heads, spans)?;
    Ok(g.value(out).clone())
}

/// Dense oracle for [`cross_attention`]: full `N×M` score matrix with masked
/// entries set to `-inf` before a softmax over every key. Plain loops.
pub fn masked_attention_reference(
    q: &Tensor,
    kv: &Tensor,
    mask: Option<&AttnMask>,
    w: &AttnWeights,
    heads: usize,
) -> Result<Tensor> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = kv.shape()[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!("{heads} heads do not divide width {d}")));
    }
    let affine = |x: &Tensor, wt: &Tensor, b: &Tensor| -> Vec<f64> {
        let rows = x.shape()[0];
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            for c in 0..d {
                let mut acc = b.data()[c];
                for k in 0..d {
                    acc += x.data()[i * d + k] * wt.data()[k * d + c];
                }
                out[i * d + c] = acc;
            }
        }
        out
    };
    let (qp, kp, vp) = (affine(q, &w.wq, &w.bq), affine(kv, &w.wk, &w.bk), affine(kv, &w.wv, &w.bv));
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    if mask.is_some_and(|mk| !mk.allows(i, j)) {
                        return f64::NEG_INFINITY;
                    }
                    (0..dh).map(|c| qp[i * d + h * dh + c] * kp[j * d + h * dh + c]).sum::<f64>() * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: i });
            }
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                o[i * d + h * dh + c] = (0..m).map(|j| e[j] / z * vp[j * d + h * dh + c]).sum();
            }
        }
    }
    let o = Tensor::new(vec![n, d], o)?;
    Tensor::new(vec![n, d], affine(&o, &w.wo, &w.bo))
}

impl AttnMask {
    /// Per-token mask from a per-frame window mask, `per_frame` query rows
    /// for each latent frame.
    pub fn from_window(mask: &super::WindowMask, per_frame: usize) -> Self {
        let mut allow = Vec::with_capacity(mask.frames() * per_frame * mask.tokens());
        for f in 0..mask.frames() {
            for _ in 0..per_frame {
                allow.extend_from_slice(mask.row(f));
            }
        }
        Self {
            rows: mask.frames() * per_frame,
            cols: mask.tokens(),
            allow,
        }
    }
}
