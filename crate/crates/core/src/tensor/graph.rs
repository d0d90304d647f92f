use std::f64::consts::LN_2;

use rand::Rng;

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        dims: MatMulDims,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        inner: usize,
        len: usize,
    },
    CausalMask(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropyBits {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in creation order, which is a topological order, so
/// the backward sweep is a single reverse pass that visits each node once.
///
/// Leaf gradients persist across [`Graph::backward`] calls and accumulate
/// until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf; it tracks gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(value, shape, Op::Add(a, b), rg))
    }

    /// `x + y` where the shape of `y` is a suffix of the shape of `x`; `y`
    /// is repeated over the leading dimensions.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_broadcast", xs, ys));
        }
        let yv = self.value(y);
        let chunk = yv.len().max(1);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(chunk) {
            row.iter_mut().zip(yv).for_each(|(a, &b)| *a = *a + b);
        }
        let rg = self.rg(x) || self.rg(y);
        let shape = xs.to_vec();
        Ok(self.push(value, shape, Op::AddBroadcast(x, y), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(value, shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(value, shape, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(value, shape, Op::Relu(x), rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / keep_prob`.
    ///
    /// With `rng == None` (evaluation) or `keep_prob == 1` this returns `x`
    /// itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep_prob: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability {keep_prob} outside (0, 1]"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / keep_prob);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep_prob {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let value = zip_map(self.value(x), &mask, |v, m| v * m);
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(value, shape, Op::Dropout { x, mask }, rg))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// Batched matrix product over the last two dimensions.
    ///
    /// Batch dimensions must be equal, or one operand must be a plain
    /// matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two dimensions, without materialising the
    /// transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let op = if tb { "matmul_bt" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        if a_batched && b_batched && ba != bb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let batch_shape = if b_batched { bb } else { ba };
        let batch: usize = batch_shape.iter().product();
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);

        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        if !b_batched {
            // Fold a's batch into rows: one large GEMM.
            gemm(false, tb, batch * m, k, n, T::one(), av, bv, T::zero(), &mut out);
        } else {
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                gemm(
                    false,
                    tb,
                    m,
                    k,
                    n,
                    T::one(),
                    &av[ao..ao + m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        };
        Ok(self.push(out, shape, Op::MatMul { a, b, tb, dims }, rg))
    }

    // ── normalisation and distributions ───────────────────────────────

    /// Layer norm over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, shape, op, rg))
    }

    /// Numerically stabilised softmax along `axis`. `-inf` entries map to
    /// exactly zero; an all-`-inf` slice is an error.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                index: axis,
                size: shape.len(),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| xv[idx(j)]).fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(Error::Degenerate);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                let inv = T::one() / total;
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Softmax { x, inner, len }, rg))
    }

    /// Adds the causal mask to attention scores of shape `[.., q, k]`:
    /// entry `(i, j)` becomes `-inf` whenever key `j` lies after query `i`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("causal_mask", &shape, &[]));
        }
        let (q, k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out = self.value(x).to_vec();
        for block in out.chunks_mut(q * k) {
            for i in 0..q {
                for v in &mut block[i * k + i + 1..(i + 1) * k] {
                    *v = T::neg_infinity();
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::CausalMask(x), rg))
    }

    /// Per-row cross-entropy, in bits, of `logits[.., V]` against `targets`.
    pub fn cross_entropy_bits(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::shape("cross_entropy", &shape, &[]))?;
        let rows = self.value(logits).len() / v.max(1);
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index {
                index: t as usize,
                size: v,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut out = Vec::with_capacity(rows);
        let inv_ln2 = T::from_f64(1.0 / LN_2);
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                total = total + *p;
            }
            let inv = T::one() / total;
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p = *p * inv);
            let lse = max + total.ln();
            out.push((lse - row[t as usize]) * inv_ln2);
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropyBits {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(out, shape[..shape.len() - 1].to_vec(), op, rg))
    }

    // ── gathers and shapes ────────────────────────────────────────────

    /// Rows of `table[V, d]` for each id; the result has shape
    /// `out_shape ++ [d]` where `out_shape` multiplies to `ids.len()`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &ts, out_shape));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Vocab { id, vocab });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, shape, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), rg))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let value = permute_data(self.value(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        Ok(self.push(value, out_shape, op, rg))
    }

    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a1 >= rank || a2 >= rank {
            return Err(Error::shape("transpose", self.shape(x), &[a1, a2]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a1, a2);
        self.permute(x, &perm)
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("gather_rows", &shape, &[]))?;
        let total = self.value(x).len() / d.max(1);
        if let Some(&r) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Index {
                index: r,
                size: total,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(x);
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(out, vec![rows.len(), d], op, rg))
    }

    /// `x[start..start + len]` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::Index {
                index: start + len,
                size: shape.first().copied().unwrap_or(0),
            });
        }
        let row: usize = shape[1..].iter().product();
        let value = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(value, out_shape, Op::SliceRows { x, start }, rg))
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(vec![s], Vec::new(), Op::Sum(x), rg)
    }

    /// `Σ weights[i] · x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self
            .value(x)
            .iter()
            .zip(weights)
            .map(|(&a, &w)| a * w)
            .sum::<T>();
        let rg = self.rg(x);
        let op = Op::WeightedSum {
            x,
            weights: weights.to_vec(),
        };
        Ok(self.push(vec![s], Vec::new(), op, rg))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if nodes[v.0].requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[idx] {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b = *b + x),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::AddBroadcast(x, y) => {
                    acc(*x, &mut |buf| add_into(buf, &g));
                    acc(*y, &mut |buf| {
                        for chunk in g.chunks(buf.len().max(1)) {
                            add_into(buf, chunk);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |buf| {
                        for ((o, &gi), &bi) in buf.iter_mut().zip(&g).zip(bv) {
                            *o = *o + gi * bi;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, &gi), &ai) in buf.iter_mut().zip(&g).zip(av) {
                            *o = *o + gi * ai;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc(*x, &mut |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, &gi)| *o = *o + gi * *c)
                    });
                }
                Op::MatMul { a, b, tb, dims } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    matmul_backward(dims, *tb, av, bv, &g, &mut |which, f| {
                        acc(if which { *b } else { *a }, f)
                    });
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    acc(*x, &mut |buf| {
                        for ((o, &gi), &y) in buf.iter_mut().zip(&g).zip(out) {
                            if y > T::zero() {
                                *o = *o + gi;
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    acc(*x, &mut |buf| {
                        for ((o, &gi), &m) in buf.iter_mut().zip(&g).zip(mask) {
                            *o = *o + gi * m;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.len();
                    let gv = &nodes[gamma.0].value;
                    acc(*gamma, &mut |buf| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                buf[j] = buf[j] + gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*beta, &mut |buf| {
                        for gr in g.chunks(d) {
                            add_into(buf, gr);
                        }
                    });
                    acc(*x, &mut |buf| {
                        let inv_d = T::from_f64(1.0 / d as f64);
                        for (r, ((br, gr), hr)) in
                            buf.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                        {
                            let mut mean_dh = T::zero();
                            let mut mean_dhh = T::zero();
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                mean_dh = mean_dh + dh;
                                mean_dhh = mean_dhh + dh * hr[j];
                            }
                            mean_dh = mean_dh * inv_d;
                            mean_dhh = mean_dhh * inv_d;
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                br[j] = br[j] + rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                            }
                        }
                    });
                }
                Op::Softmax { x, inner, len } => {
                    let (inner, len) = (*inner, *len);
                    let y = &node.value;
                    acc(*x, &mut |buf| {
                        let outer = y.len() / (len * inner).max(1);
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let dot = (0..len)
                                    .map(|j| g[base + j * inner] * y[base + j * inner])
                                    .sum::<T>();
                                for j in 0..len {
                                    let p = base + j * inner;
                                    buf[p] = buf[p] + y[p] * (g[p] - dot);
                                }
                            }
                        }
                    });
                }
                Op::CausalMask(x) => {
                    let shape = &node.shape;
                    let (q, k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    acc(*x, &mut |buf| {
                        for (bb, gb) in buf.chunks_mut(q * k).zip(g.chunks(q * k)) {
                            for i in 0..q {
                                let keep = (i + 1).min(k);
                                add_into(&mut bb[i * k..i * k + keep], &gb[i * k..i * k + keep]);
                            }
                        }
                    });
                }
                Op::CrossEntropyBits {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = probs.len() / targets.len().max(1);
                    let inv_ln2 = T::from_f64(1.0 / LN_2);
                    acc(*logits, &mut |buf| {
                        for (r, &t) in targets.iter().enumerate() {
                            let s = g[r] * inv_ln2;
                            let row = &mut buf[r * v..(r + 1) * v];
                            for (o, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                                *o = *o + s * p;
                            }
                            row[t as usize] = row[t as usize] - s;
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = nodes[table.0].shape[1];
                    acc(*table, &mut |buf| {
                        for (pos, &id) in ids.iter().enumerate() {
                            let id = id as usize;
                            add_into(&mut buf[id * d..(id + 1) * d], &g[pos * d..(pos + 1) * d]);
                        }
                    });
                }
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute_data(&g, &node.shape, &inverse);
                    acc(*x, &mut |buf| add_into(buf, &back));
                }
                Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, &g)),
                Op::GatherRows { x, rows } => {
                    let d = node.shape[1];
                    acc(*x, &mut |buf| {
                        for (i, &r) in rows.iter().enumerate() {
                            add_into(&mut buf[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let row: usize = node.shape[1..].iter().product();
                    let off = start * row;
                    acc(*x, &mut |buf| add_into(&mut buf[off..off + g.len()], &g));
                }
                Op::Sum(x) => {
                    let s = g[0];
                    acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + s));
                }
                Op::WeightedSum { x, weights } => {
                    let s = g[0];
                    acc(*x, &mut |buf| {
                        buf.iter_mut().zip(weights).for_each(|(o, &w)| *o = *o + s * w)
                    });
                }
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn matmul_backward<T: Scalar>(
    dims: &MatMulDims,
    tb: bool,
    av: &[T],
    bv: &[T],
    g: &[T],
    acc: &mut dyn FnMut(bool, &mut dyn FnMut(&mut [T])),
) {
    let MatMulDims {
        batch,
        m,
        k,
        n,
        a_batched,
        b_batched,
    } = *dims;
    let one = T::one();
    if !b_batched {
        let rows = batch * m;
        // dA = dC · op(B)ᵀ
        acc(false, &mut |da| {
            gemm(false, !tb, rows, n, k, one, g, bv, one, da)
        });
        // dB = Aᵀ dC  (or dBᵀ = dCᵀ A when B is stored transposed)
        acc(true, &mut |db| {
            if tb {
                gemm(true, false, n, rows, k, one, g, av, one, db)
            } else {
                gemm(true, false, k, rows, n, one, av, g, one, db)
            }
        });
        return;
    }
    acc(false, &mut |da| {
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            gemm(
                false,
                !tb,
                m,
                n,
                k,
                one,
                &g[i * m * n..(i + 1) * m * n],
                &bv[i * k * n..(i + 1) * k * n],
                one,
                &mut da[ao..ao + m * k],
            );
        }
    });
    acc(true, &mut |db| {
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            let (gi, ai) = (&g[i * m * n..(i + 1) * m * n], &av[ao..ao + m * k]);
            let dbi = &mut db[i * k * n..(i + 1) * k * n];
            if tb {
                gemm(true, false, n, m, k, one, gi, ai, one, dbi)
            } else {
                gemm(true, false, k, m, n, one, ai, gi, one, dbi)
            }
        }
    });
}

/// Copies `src` (of `shape`) into the layout where output axis `i` is input
/// axis `perm[i]`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 || perm.iter().enumerate().all(|(i, &p)| i == p) {
        return src.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    // Runs along the last output axis are contiguous when it is also the
    // last input axis.
    let run = if perm[rank - 1] == rank - 1 {
        out_shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; outer_rank];
    let total_runs = src.len() / run.max(1);
    let mut offset = 0usize;
    for _ in 0..total_runs {
        if run > 1 {
            out.extend_from_slice(&src[offset..offset + run]);
        } else {
            out.push(src[offset]);
        }
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
