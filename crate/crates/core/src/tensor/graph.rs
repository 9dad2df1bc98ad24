use std::sync::Arc;

use super::ops::{self, LayerNormStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Half-open key range `[lo, hi)` allowed for one attention query row.
pub type KeySpan = (usize, usize);

struct AttnState {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    spans: Option<Arc<[KeySpan]>>,
    // probabilities per head, per row, over that row's span
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

enum Op {
    Input,
    Param(usize),
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: LayerNormStats,
    },
    Attention(Box<AttnState>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so gradients can be pulled back from a scalar.
///
/// Nodes are appended in evaluation order, so a reverse sweep visits every
/// node after all of its consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// `(param_id, gradient)` for every parameter leaf that received one.
    /// A parameter bound twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_deref().map(|g| (pid, g)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to parameter slot `id`.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.zero_grad();
        self.push(t, Op::Param(id), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[m×n] + row[n]`, broadcasting the row over `m`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = ops::matrix_dims(self.value(x), "add_row input")?;
        if self.value(row).len() != n {
            return Err(Error::Dimension(format!(
                "add_row of {:?} and {:?}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        out.zero_grad();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// `x[m×n] ⊙ row[n]`, broadcasting the row over `m`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = ops::matrix_dims(self.value(x), "mul_row input")?;
        if self.value(row).len() != n {
            return Err(Error::Dimension(format!(
                "mul_row of {:?} and {:?}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        out.zero_grad();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(o, b)| *o *= b);
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::MulRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.zero_grad();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.zero_grad();
        out.data_mut().iter_mut().for_each(|v| *v = ops::silu(*v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        ops::check_layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (out, stats) = ops::layer_norm_raw(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q[N×d]`, `k[M×d]`, `v[M×d]`. Query row `i` only sees keys in
    /// `spans[i]`; `None` means every row sees all `M` keys.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Option<Arc<[KeySpan]>>,
    ) -> Result<Var> {
        let (n, d) = ops::matrix_dims(self.value(q), "attention query")?;
        let (m, dk) = ops::matrix_dims(self.value(k), "attention key")?;
        if self.shape(v) != [m, d] || dk != d {
            return Err(Error::Dimension(format!(
                "attention with q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(sp) = &spans {
            if sp.len() != n {
                return Err(Error::Dimension(format!("{} key spans for {n} query rows", sp.len())));
            }
            for (row, &(lo, hi)) in sp.iter().enumerate() {
                if lo >= hi {
                    return Err(Error::DegenerateMask { row });
                }
                if hi > m {
                    return Err(Error::Dimension(format!("key span {lo}..{hi} exceeds {m} keys")));
                }
            }
        }
        let span = |i: usize| spans.as_ref().map_or((0, m), |s| s[i]);
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            let (lo, hi) = span(i);
            offsets.push(offsets[i] + hi - lo);
        }
        let per_head = offsets[n];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * per_head];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let (lo, hi) = span(i);
                let p = &mut probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                for (slot, j) in p.iter_mut().zip(lo..hi) {
                    *slot = ops::dot(qi, &kd[j * d + c0..j * d + c0 + dh]) * scale;
                }
                ops::softmax_slice(p);
                let oi = &mut out[i * d + c0..i * d + c0 + dh];
                for (&w, j) in p.iter().zip(lo..hi) {
                    let vj = &vd[j * d + c0..j * d + c0 + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let state = AttnState {
            q,
            k,
            v,
            heads,
            spans,
            probs,
            offsets,
        };
        Ok(self.push(out, Op::Attention(Box::new(state)), ng))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = ops::matrix_dims(self.value(table), "embedding table")?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), ng))
    }

    /// Reverse sweep from the scalar `loss`, seeded with `seed` (normally 1).
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
                continue;
            }
            if matches!(node.op, Op::Input | Op::Const) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.pull_back(idx, &g, &mut grads);
        }
        params.reverse();
        Ok(Grads { grads, params })
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        self.backward_scaled(loss, 1.0)
    }

    fn pull_back(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |s| ops::gemm_nt_acc(g, val(*b), s, m, k, n));
                acc(*b, &mut |s| ops::gemm_tn_acc(val(*a), g, s, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(val(*b)).for_each(|((o, x), y)| *o += x * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).zip(val(*a)).for_each(|((o, x), y)| *o += x * y)
                });
            }
            Op::AddRow(x, row) => {
                let n = self.value(*row).len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for chunk in g.chunks_exact(n) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let r = val(*row);
                let n = r.len();
                acc(*x, &mut |s| {
                    for (sc, gc) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        sc.iter_mut().zip(gc).zip(r).for_each(|((o, gv), rv)| *o += gv * rv);
                    }
                });
                let xv = val(*x);
                acc(*row, &mut |s| {
                    for (gc, xc) in g.chunks_exact(n).zip(xv.chunks_exact(n)) {
                        s.iter_mut().zip(gc).zip(xc).for_each(|((o, gv), x)| *o += gv * x);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            Op::Silu(x) => acc(*x, &mut |s| {
                s.iter_mut()
                    .zip(g)
                    .zip(val(*x))
                    .for_each(|((o, gv), xv)| *o += gv * ops::silu_grad(*xv))
            }),
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.last_dim();
                acc(*x, &mut |s| {
                    for ((sc, yc), gc) in s.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let inner = ops::dot(yc, gc);
                        for j in 0..n {
                            sc[j] += yc[j] * (gc[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let n = self.value(*gamma).len();
                let gam = val(*gamma);
                acc(*gamma, &mut |s| {
                    for (gc, hc) in g.chunks_exact(n).zip(stats.xhat.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] += gc[j] * hc[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gc in g.chunks_exact(n) {
                        add_into(s, gc);
                    }
                });
                acc(*x, &mut |s| {
                    let rows = g.chunks_exact(n).zip(stats.xhat.chunks_exact(n));
                    for (r, (gc, hc)) in rows.enumerate() {
                        let dxhat: Vec<f64> = gc.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = ops::dot(&dxhat, hc) / n as f64;
                        let rs = stats.rstd[r];
                        for j in 0..n {
                            s[r * n + j] += rs * (dxhat[j] - m1 - hc[j] * m2);
                        }
                    }
                });
            }
            Op::Attention(st) => self.attention_backward(st, g, grads),
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |s| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Mse(p, t) => {
                let (pd, td) = (val(*p), val(*t));
                let c = 2.0 * g[0] / pd.len() as f64;
                acc(*p, &mut |s| {
                    for ((o, a), b) in s.iter_mut().zip(pd).zip(td) {
                        *o += c * (a - b);
                    }
                });
                acc(*t, &mut |s| {
                    for ((o, a), b) in s.iter_mut().zip(pd).zip(td) {
                        *o -= c * (a - b);
                    }
                });
            }
        }
    }

    fn attention_backward(&self, st: &AttnState, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, d) = (self.shape(st.q)[0], self.shape(st.q)[1]);
        let m = self.shape(st.k)[0];
        let dh = d / st.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_head = st.offsets[n];
        let (qd, kd, vd) = (
            self.value(st.q).data(),
            self.value(st.k).data(),
            self.value(st.v).data(),
        );
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut ds = Vec::new();
        for h in 0..st.heads {
            let c0 = h * dh;
            for i in 0..n {
                let (lo, hi) = st.spans.as_ref().map_or((0, m), |s| s[i]);
                let p = &st.probs[h * per_head + st.offsets[i]..h * per_head + st.offsets[i + 1]];
                let gi = &g[i * d + c0..i * d + c0 + dh];
                ds.clear();
                let mut inner = 0.0;
                for (&w, j) in p.iter().zip(lo..hi) {
                    let dp = ops::dot(gi, &vd[j * d + c0..j * d + c0 + dh]);
                    inner += w * dp;
                    ds.push(dp);
                    dv[j * d + c0..j * d + c0 + dh]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(o, x)| *o += w * x);
                }
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                for ((&w, &dp), j) in p.iter().zip(&ds).zip(lo..hi) {
                    let dsj = w * (dp - inner) * scale;
                    if dsj == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + c0 + c] += dsj * kd[j * d + c0 + c];
                        dk[j * d + c0 + c] += dsj * qi[c];
                    }
                }
            }
        }
        for (var, local) in [(st.q, dq), (st.k, dk), (st.v, dv)] {
            if self.nodes[var.0].needs_grad {
                match &mut grads[var.0] {
                    Some(s) => add_into(s, &local),
                    slot @ None => *slot = Some(local),
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, x)| *o += x);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut r = rng(1);
        let a = Tensor::randn(&[3, 4], &mut r);
        let b = Tensor::randn(&[4, 2], &mut r);
        let mut g = Graph::new();
        let av = g.input(a.clone());
        let bv = g.constant(b.clone());
        let y = g.matmul(av, bv).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let ga = grads.wrt(av).unwrap();
        // independent route: central differences, h = 1e-5
        let h = 1e-5;
        for idx in 0..12 {
            let f = |delta: f64| {
                let mut a2 = a.clone();
                a2.data_mut()[idx] += delta;
                ops::matmul(&a2, &b).unwrap().sum()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            assert!((numeric - ga[idx]).abs() < 1e-8);
        }
        // and the closed form ones(3×2)·bᵀ
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = b.data()[p * 2..p * 2 + 2].iter().sum();
                assert!((ga[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_ops_pass_grad_check() {
        let mut r = rng(2);
        let x = Tensor::randn(&[3, 5], &mut r);
        let w = Tensor::randn(&[3, 5], &mut r);
        let row = Tensor::randn(&[5], &mut r);
        let err = grad_check(
            |g, xv| {
                let wv = g.constant(w.clone());
                let rv = g.constant(row.clone());
                let a = g.mul(xv, wv)?;
                let b = g.sub(a, xv)?;
                let c = g.add_row(b, rv)?;
                let d = g.silu(c);
                let e = g.scale(d, 0.7);
                let f = g.add(e, xv)?;
                let sq = g.mul(f, f)?;
                Ok(g.mean(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn mul_row_passes_grad_check_in_both_operands() {
        let mut r = rng(9);
        let x = Tensor::randn(&[4, 3], &mut r);
        let row = Tensor::randn(&[3], &mut r);
        let (xc, rc) = (x.clone(), row.clone());
        let err = grad_check(
            |g, xv| {
                let rv = g.constant(rc.clone());
                let y = g.mul_row(xv, rv)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
        let err = grad_check(
            |g, rv| {
                let xv = g.constant(xc.clone());
                let y = g.mul_row(xv, rv)?;
                let s = g.silu(y);
                Ok(g.sum(s))
            },
            &row,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn softmax_and_layer_norm_pass_grad_check() {
        let mut r = rng(3);
        let x = Tensor::randn(&[4, 6], &mut r);
        let w = Tensor::randn(&[4, 6], &mut r);
        let gamma = Tensor::randn(&[6], &mut r);
        let beta = Tensor::randn(&[6], &mut r);
        let err = grad_check(
            |g, xv| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let wv = g.constant(w.clone());
                let n = g.layer_norm(xv, gv, bv, 1e-5)?;
                let s = g.softmax(n)?;
                let p = g.mul(s, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut r = rng(4);
        let x = Tensor::randn(&[7], &mut r);
        let err = grad_check(
            |g, xv| {
                let s = g.softmax(xv)?;
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn attention_passes_grad_check_for_each_input() {
        let mut r = rng(5);
        let q = Tensor::randn(&[5, 8], &mut r);
        let k = Tensor::randn(&[7, 8], &mut r);
        let v = Tensor::randn(&[7, 8], &mut r);
        let w = Tensor::randn(&[5, 8], &mut r);
        let spans: Arc<[KeySpan]> = vec![(0, 3), (1, 4), (2, 7), (6, 7), (0, 7)].into();
        for which in 0..3 {
            let target = [&q, &k, &v][which].clone();
            let err = grad_check(
                |g, xv| {
                    let mut vars = [
                        g.constant(q.clone()),
                        g.constant(k.clone()),
                        g.constant(v.clone()),
                    ];
                    vars[which] = xv;
                    let o = g.attention(vars[0], vars[1], vars[2], 2, Some(spans.clone()))?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(o, wv)?;
                    Ok(g.sum(p))
                },
                &target,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-7, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn gather_and_mse_pass_grad_check() {
        let mut r = rng(6);
        let table = Tensor::randn(&[5, 3], &mut r);
        let target = Tensor::randn(&[4, 3], &mut r);
        let err = grad_check(
            |g, tv| {
                let rows = g.gather(tv, &[1, 3, 1, 0])?;
                let t = g.constant(target.clone());
                g.mse(rows, t)
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn attention_rejects_empty_span() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 4]));
        let k = g.constant(Tensor::zeros(&[3, 4]));
        let spans: Arc<[KeySpan]> = vec![(0, 3), (2, 2)].into();
        let err = g.attention(q, k, k, 2, Some(spans)).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    #[test]
    fn parameter_grads_are_reported_by_id() {
        let mut g = Graph::new();
        let w = g.param(7, &Tensor::from_vec(vec![2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let collected: Vec<_> = grads.params().collect();
        assert_eq!(collected, vec![(7, &[4.0, 6.0][..])]);
    }
}
