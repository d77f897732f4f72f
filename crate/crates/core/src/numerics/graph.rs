//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every op records its inputs (and whatever the backward pass needs) on the
//! tape; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients only for nodes that transitively depend on a parameter leaf.

use std::rc::Rc;

use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Additive logit penalty for disallowed keys.
pub const MASK_PENALTY: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Q x K boolean visibility for a single attention call; `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, bits: Vec<bool>) -> Result<Self, NumericsError> {
        if bits.len() != queries * keys {
            return Err(NumericsError::Shape(format!(
                "mask of {} bits for {queries}x{keys}",
                bits.len()
            )));
        }
        Ok(Self { queries, keys, bits })
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self { queries, keys, bits: vec![true; queries * keys] }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..queries)
            .flat_map(|q| (0..keys).map(move |k| (q, k)))
            .map(|(q, k)| f(q, k))
            .collect();
        Self { queries, keys, bits }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.keys + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.keys..(q + 1) * self.keys]
    }
}

/// Batched attention layout: query row `r` attends to the `keys_per_block`
/// key rows of block `q_block[r]`, subject to row `r` of `mask`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub q_block: Vec<usize>,
    pub keys_per_block: usize,
    pub mask: AttentionMask,
}

impl AttentionLayout {
    /// Same mask for every block of `blocks` equally sized query groups.
    pub fn repeated(blocks: usize, mask: &AttentionMask) -> Self {
        let q = mask.queries();
        let q_block = (0..blocks).flat_map(|b| std::iter::repeat_n(b, q)).collect();
        let mut bits = Vec::with_capacity(blocks * mask.bits.len());
        for _ in 0..blocks {
            bits.extend_from_slice(&mask.bits);
        }
        Self {
            q_block,
            keys_per_block: mask.keys(),
            mask: AttentionMask { queries: blocks * q, keys: mask.keys(), bits },
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embed { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    CatBlocks { a: Var, b: Var, blocks: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttentionLayout>, probs: Vec<T> },
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for `v`, or `None` if it does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x [n, m] + bias [m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let m = xv.cols();
        if bv.len() != m {
            return Err(shape_err(format!("add_row {:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o = *o + *b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| *v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| gelu(*v).0).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Normalises each row over the last dimension (epsilon 1e-5), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.len() != m || bv.len() != m {
            return Err(shape_err(format!("layer_norm over {m} with gain {:?}", gv.shape())));
        }
        let eps = T::lit(LN_EPS);
        let inv_m = T::one() / T::lit(m as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_m;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Row lookup `table[ids[r]]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(NumericsError::Index(format!("embedding id {id} >= {n}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }, ng))
    }

    /// Selects rows of a 2-D value.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(NumericsError::Index(format!("row {i} >= {n}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Interleaves two row-blocked values: for each of `blocks` blocks, the
    /// rows of `a`'s block followed by the rows of `b`'s block.
    pub fn cat_blocks(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.rows() % blocks != 0 || bv.rows() % blocks != 0 {
            return Err(shape_err(format!("cat_blocks {:?} {:?} / {blocks}", av.shape(), bv.shape())));
        }
        let d = av.cols();
        let (ra, rb) = (av.rows() / blocks, bv.rows() / blocks);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for blk in 0..blocks {
            data.extend_from_slice(&av.data()[blk * ra * d..(blk + 1) * ra * d]);
            data.extend_from_slice(&bv.data()[blk * rb * d..(blk + 1) * rb * d]);
        }
        let out = Tensor::new(vec![av.rows() + bv.rows(), d], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::CatBlocks { a, b, blocks }, ng))
    }

    /// Multi-head scaled dot-product attention under a batched mask layout.
    ///
    /// Rows with no allowed key produce a zero output vector.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let tk = layout.keys_per_block;
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d {
            return Err(shape_err(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if layout.q_block.len() != qv.rows() || layout.mask.queries() != qv.rows() {
            return Err(shape_err("attention layout does not match query rows".into()));
        }
        if kv.rows() != vv.rows() || layout.q_block.iter().any(|&b| (b + 1) * tk > kv.rows()) {
            return Err(shape_err("attention layout does not match key rows".into()));
        }
        let nq = qv.rows();
        let mut probs = vec![T::zero(); nq * heads * tk];
        let mut out = vec![T::zero(); nq * d];
        attention_forward(qv.data(), kv.data(), vv.data(), d, heads, &layout, &mut probs, &mut out);
        let out = Tensor::new(vec![nq, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, layout, probs }, ng))
    }

    /// Mean of `-log softmax(logits[row])[target]` over `picks = [(row, target)]`.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if picks.is_empty() {
            return Err(NumericsError::Empty("cross entropy over zero targets".into()));
        }
        let mut probs = Vec::with_capacity(picks.len() * vocab);
        let mut total = 0.0f64;
        for &(row, target) in picks {
            if row >= lv.rows() {
                return Err(NumericsError::Index(format!("logit row {row} >= {}", lv.rows())));
            }
            if target >= vocab {
                return Err(NumericsError::Index(format!("target {target} outside vocabulary {vocab}")));
            }
            let (nll, p) = log_softmax_nll(lv.row(row), target);
            total += nll.as_f64();
            probs.extend(p);
        }
        let mean = T::lit(total / picks.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(mean), Op::CrossEntropy { logits, picks: picks.to_vec(), probs }, ng))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var, NumericsError> {
        let mut it = terms.iter();
        let first = *it.next().ok_or_else(|| NumericsError::Empty("sum of nothing".into()))?;
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let out_len = self.nodes[output.0].value.len();
        grads[output.0] = Some(vec![T::one(); out_len]);
        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if m * n == 0 {
                    return;
                }
                acc(*a, &mut |ga| {
                    // dA = dC @ B^T
                    T::gemm(m, n, k, gout, (n as isize, 1), bv.data(), (1, n as isize), T::one(), ga);
                });
                acc(*b, &mut |gb| {
                    // dB = A^T @ dC
                    T::gemm(k, m, n, av.data(), (1, k as isize), gout, (n as isize, 1), T::one(), gb);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x = *x + *y));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(p, q)| *p = *p + *q));
                let m = self.value(*bias).len();
                acc(*bias, &mut |g| {
                    for row in gout.chunks(m.max(1)) {
                        g.iter_mut().zip(row).for_each(|(p, q)| *p = *p + *q);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(p, q)| *p = *p + *q * *s));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |g| {
                    for ((p, q), xi) in g.iter_mut().zip(gout).zip(xv.data()) {
                        *p = *p + *q * gelu(*xi).1;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let m = gv.len();
                acc(*gain, &mut |g| {
                    for (grow, hrow) in gout.chunks(m).zip(xhat.chunks(m)) {
                        for c in 0..m {
                            g[c] = g[c] + grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for grow in gout.chunks(m) {
                        g.iter_mut().zip(grow).for_each(|(p, q)| *p = *p + *q);
                    }
                });
                let inv_m = T::one() / T::lit(m as f64);
                acc(*x, &mut |g| {
                    for (r, (grow, hrow)) in gout.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..m {
                            let dh = grow[c] * gv.data()[c];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hrow[c];
                        }
                        mean_d = mean_d * inv_m;
                        mean_dh = mean_dh * inv_m;
                        for c in 0..m {
                            let dh = grow[c] * gv.data()[c];
                            g[r * m + c] = g[r * m + c] + rstd[r] * (dh - mean_d - hrow[c] * mean_dh);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = self.value(*table).cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] = g[id * d + c] + gout[r * d + c];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            g[i * d + c] = g[i * d + c] + gout[r * d + c];
                        }
                    }
                });
            }
            Op::CatBlocks { a, b, blocks } => {
                let d = self.value(*a).cols();
                let ra = self.value(*a).rows() / blocks;
                let rb = self.value(*b).rows() / blocks;
                let stride = (ra + rb) * d;
                acc(*a, &mut |g| {
                    for blk in 0..*blocks {
                        let src = &gout[blk * stride..blk * stride + ra * d];
                        let dst = &mut g[blk * ra * d..(blk + 1) * ra * d];
                        dst.iter_mut().zip(src).for_each(|(p, q)| *p = *p + *q);
                    }
                });
                acc(*b, &mut |g| {
                    for blk in 0..*blocks {
                        let src = &gout[blk * stride + ra * d..(blk + 1) * stride];
                        let dst = &mut g[blk * rb * d..(blk + 1) * rb * d];
                        dst.iter_mut().zip(src).for_each(|(p, q)| *p = *p + *q);
                    }
                });
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    qv.cols(),
                    *heads,
                    layout,
                    probs,
                    gout,
                    &mut gq,
                    &mut gk,
                    &mut gv,
                );
                for (var, part) in [(*q, &gq), (*k, &gk), (*v, &gv)] {
                    acc(var, &mut |g| g.iter_mut().zip(part.iter()).for_each(|(p, r)| *p = *p + *r));
                }
            }
            Op::CrossEntropy { logits, picks, probs } => {
                let vocab = self.value(*logits).cols();
                let scale = gout[0] / T::lit(picks.len() as f64);
                acc(*logits, &mut |g| {
                    for (p, &(row, target)) in picks.iter().enumerate() {
                        for c in 0..vocab {
                            let mut d = probs[p * vocab + c];
                            if c == target {
                                d = d - T::one();
                            }
                            g[row * vocab + c] = g[row * vocab + c] + d * scale;
                        }
                    }
                });
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

/// Returns `(-log p[target], softmax(row))`, stabilised by max subtraction.
pub(crate) fn log_softmax_nll<T: Scalar>(row: &[T], target: usize) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let nll = z.ln() - (row[target] - max);
    (nll, exps.into_iter().map(|e| e / z).collect())
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    layout: &AttentionLayout,
    probs: &mut [T],
    out: &mut [T],
) {
    let dh = d / heads;
    let tk = layout.keys_per_block;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let penalty = T::lit(MASK_PENALTY);
    let mut scores = vec![T::zero(); tk];
    for (r, &blk) in layout.q_block.iter().enumerate() {
        let allowed = layout.mask.row(r);
        if !allowed.iter().any(|&a| a) {
            continue;
        }
        for h in 0..heads {
            let qrow = &q[r * d + h * dh..r * d + (h + 1) * dh];
            let mut max = T::neg_infinity();
            for j in 0..tk {
                let krow = &k[(blk * tk + j) * d + h * dh..(blk * tk + j) * d + (h + 1) * dh];
                let mut s = qrow.iter().zip(krow).fold(T::zero(), |a, (x, y)| a + *x * *y) * scale;
                if !allowed[j] {
                    s = s + penalty;
                }
                scores[j] = s;
                max = max.max(s);
            }
            let mut z = T::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z = z + *s;
            }
            let p = &mut probs[(r * heads + h) * tk..(r * heads + h + 1) * tk];
            let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
            for j in 0..tk {
                p[j] = scores[j] / z;
                if p[j] == T::zero() {
                    continue;
                }
                let vrow = &v[(blk * tk + j) * d + h * dh..(blk * tk + j) * d + (h + 1) * dh];
                for c in 0..dh {
                    o[c] = o[c] + p[j] * vrow[c];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    layout: &AttentionLayout,
    probs: &[T],
    gout: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let dh = d / heads;
    let tk = layout.keys_per_block;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dp = vec![T::zero(); tk];
    for (r, &blk) in layout.q_block.iter().enumerate() {
        for h in 0..heads {
            let p = &probs[(r * heads + h) * tk..(r * heads + h + 1) * tk];
            if p.iter().all(|x| *x == T::zero()) {
                continue;
            }
            let go = &gout[r * d + h * dh..r * d + (h + 1) * dh];
            let mut dot = T::zero();
            for j in 0..tk {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let base = (blk * tk + j) * d + h * dh;
                let vrow = &v[base..base + dh];
                dp[j] = go.iter().zip(vrow).fold(T::zero(), |a, (x, y)| a + *x * *y);
                dot = dot + p[j] * dp[j];
                for c in 0..dh {
                    gv[base + c] = gv[base + c] + p[j] * go[c];
                }
            }
            let qbase = r * d + h * dh;
            for j in 0..tk {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                let base = (blk * tk + j) * d + h * dh;
                for c in 0..dh {
                    gq[qbase + c] = gq[qbase + c] + ds * k[base + c];
                    gk[base + c] = gk[base + c] + ds * q[qbase + c];
                }
            }
        }
    }
}

/// Single-head masked attention on plain tensors (`q [Q, d]`, `k`/`v [K, d]`).
pub fn masked_softmax_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
) -> Result<Tensor<T>, NumericsError> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    if mask.queries() != q.rows() || mask.keys() != k.rows() {
        return Err(shape_err(format!(
            "mask {}x{} for {} queries and {} keys",
            mask.queries(),
            mask.keys(),
            q.rows(),
            k.rows()
        )));
    }
    let layout = Rc::new(AttentionLayout {
        q_block: vec![0; q.rows()],
        keys_per_block: k.rows(),
        mask: mask.clone(),
    });
    let out = g.attention(qv, kv, vv, 1, layout)?;
    Ok(g.value(out).clone())
}

/// Layer norm over the last dimension of a plain tensor.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let out = g.layer_norm(a, b, c)?;
    Ok(g.value(out).clone())
}

/// Cross entropy of a single logit vector against a target id.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T, NumericsError> {
    if target >= logits.len() {
        return Err(NumericsError::Index(format!(
            "target {target} outside vocabulary {}",
            logits.len()
        )));
    }
    Ok(log_softmax_nll(logits, target).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[vec![0.3, -0.2]]);
        let k = t(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let v = t(&[vec![1.0, 0.0], vec![3.0, 4.0]]);
        let out = masked_softmax_attention(&q, &k, &v, &AttentionMask::full(1, 2)).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
        assert!((out.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_allowed_key_copies_value() {
        let q = t(&[vec![5.0, -3.0]]);
        let k = t(&[vec![9.0, 9.0], vec![-1.0, 0.5]]);
        let v = t(&[vec![1.0, 2.0], vec![7.0, 8.0]]);
        let mask = AttentionMask::new(1, 2, vec![false, true]).unwrap();
        let out = masked_softmax_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.data(), &[7.0, 8.0]);
    }

    #[test]
    fn no_allowed_key_gives_zero() {
        let q = t(&[vec![1.0, 1.0]]);
        let k = t(&[vec![1.0, 1.0]]);
        let v = t(&[vec![4.0, 4.0]]);
        let mask = AttentionMask::new(1, 1, vec![false]).unwrap();
        let out = masked_softmax_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_value_changes_nothing() {
        let q = t(&[vec![0.1, 0.2], vec![0.3, -0.4]]);
        let k = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
        let mut v = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mask = AttentionMask::from_fn(2, 3, |_, j| j != 1);
        let a = masked_softmax_attention(&q, &k, &v, &mask).unwrap();
        v.data_mut()[2] = 1e6;
        v.data_mut()[3] = -42.0;
        let b = masked_softmax_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mask_shape_is_checked() {
        let q = t(&[vec![0.0, 0.0]]);
        let kv = t(&[vec![0.0, 0.0]]);
        assert!(masked_softmax_attention(&q, &kv, &kv, &AttentionMask::full(2, 1)).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[vec![3.0, 3.0, 3.0]]);
        let out = layer_norm(&x, &Tensor::full(vec![3], 1.0), &Tensor::zeros(vec![3])).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_unit_variance_row() {
        let x = t(&[vec![1.0, -1.0]]);
        let out = layer_norm(&x, &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2])).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data()[0] - expect).abs() < 1e-12);
        assert!((out.data()[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_broadcasts_bias() {
        let x = t(&[vec![1.0, 5.0, -2.0], vec![0.3, 0.1, 9.0]]);
        let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = layer_norm(&x, &Tensor::zeros(vec![3]), &bias).unwrap();
        assert_eq!(out.row(0), bias.data());
        assert_eq!(out.row(1), bias.data());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = cross_entropy(&[0.0f64; 4], 2).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let peaked = cross_entropy(&[10.0f64, 0.0, 0.0], 0).unwrap();
        let expect = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((peaked - expect).abs() < 1e-15);
        assert!((peaked - 9.08e-5).abs() < 1e-7);
        let wrong = cross_entropy(&[0.0f64, 200.0, 0.0], 0).unwrap();
        assert!((wrong - 200.0).abs() < 1e-9);
        assert!(cross_entropy(&[0.0f64; 3], 3).is_err());
    }

    #[test]
    fn cross_entropy_large_logits_stay_finite() {
        let v = cross_entropy(&[1e4f32, -1e4, 0.0], 1).unwrap();
        assert!(v.is_finite());
    }
}
