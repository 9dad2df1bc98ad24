//! Forward kernels. The tape in [`super::Graph`] reuses these and adds the
//! matching backward passes.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Dimension(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "left operand")?;
    let (k2, n) = matrix_dims(b, "right operand")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {:?} by {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// In-place stable softmax of one slice. Entries equal to `-inf` map to
/// exactly zero. Returns `false` when every entry is `-inf`.
pub(crate) fn softmax_slice(xs: &mut [f64]) -> bool {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    xs.iter_mut().for_each(|v| *v *= inv);
    true
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::Dimension("softmax needs at least one dimension".into()));
    }
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for (row, chunk) in out.chunks_exact_mut(n).enumerate() {
        if !softmax_slice(chunk) {
            return Err(Error::DegenerateMask { row });
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-slice statistics kept for the backward pass.
pub(crate) struct LayerNormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_raw(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormStats) {
    let n = gamma.len();
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let slice = &x[r * n..(r + 1) * n];
        let mean = slice.iter().sum::<f64>() / n as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (slice[j] - mean) * rs;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    (out, LayerNormStats { xhat, rstd })
}

pub(crate) fn check_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::Parameter(format!("layer norm eps must be positive, got {eps}")));
    }
    let n = x.last_dim();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Dimension(format!(
            "layer norm over last dim {n} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Normalizes each last-dimension slice to zero mean and unit (population)
/// variance, then applies `gamma * x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_layer_norm(x, gamma, beta, eps)?;
    let (out, _) = layer_norm_raw(x.data(), gamma.data(), beta.data(), eps);
    Tensor::new(x.shape().to_vec(), out)
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of a scalar position into `dim` features
/// (`sin` on the first half, `cos` on the second).
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = (position * freq).sin();
        out[half + k] = (position * freq).cos();
    }
    out
}
