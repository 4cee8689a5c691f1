//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records each operation as it executes. Nodes are appended in
//! execution order, so every node's inputs precede it and a single reverse
//! sweep propagates adjoints. [`Tape::backward`] returns the gradients of the
//! leaves that require them and clears the tape for the next forward pass.

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt_into, matmul_tn_into, softmax_in_place, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Silu(NodeId),
    Softmax(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        head_dim: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records an input; gradients are kept iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// `x · sigmoid(x)`, elementwise.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let axis = x
            .shape()
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let value = x.softmax(axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Row-wise RMS normalisation of `x[T×d]` followed by a per-channel gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let (t, d) = match xv.shape() {
            &[t, d] => (t, d),
            s => return Err(Error::Shape(format!("rms_norm input must be 2-D, got {s:?}"))),
        };
        if gv.shape() != [d] {
            return Err(Error::Shape(format!(
                "rms_norm gain {:?} does not match width {d}",
                gv.shape()
            )));
        }
        let mut out = vec![0.0; t * d];
        let mut inv_rms = Vec::with_capacity(t);
        for i in 0..t {
            let row = &xv.data()[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for j in 0..d {
                out[i * d + j] = row[j] * r * gv.data()[j];
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (v, d) = match tv.shape() {
            &[v, d] => (v, d),
            s => return Err(Error::Shape(format!("embedding table must be 2-D, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("index {id} outside table of {v} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over `q, k, v: [T × n_heads·head_dim]`.
    ///
    /// Position `t` attends to positions `0..=t` only.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        head_dim: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "attention operands {:?}, {:?}, {:?} must be equal 2-D shapes",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (t, width) = (qv.rows(), qv.cols());
        if head_dim == 0 || width % head_dim != 0 {
            return Err(Error::Shape(format!(
                "attention width {width} is not a multiple of head_dim {head_dim}"
            )));
        }
        let n_heads = width / head_dim;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let mut probs = vec![0.0; n_heads * t * t];
        let mut out = vec![0.0; t * width];
        for h in 0..n_heads {
            let off = h * head_dim;
            for i in 0..t {
                let qi = &qv.data()[i * width + off..i * width + off + head_dim];
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kv.data()[j * width + off..j * width + off + head_dim];
                    *pj = dot(qi, kj) * inv_sqrt;
                }
                softmax_in_place(p);
                let o = &mut out[i * width + off..i * width + off + head_dim];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv.data()[j * width + off..j * width + off + head_dim];
                    for (oo, &x) in o.iter_mut().zip(vj) {
                        *oo += pj * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t, width], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                head_dim,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`).
    ///
    /// `logits` may have any rank ≥ 1; the last axis is the vocabulary and the
    /// leading axes are flattened to one row per target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let vocab = *lv
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("cross_entropy of a scalar".into()))?;
        let rows = if vocab == 0 { 0 } else { lv.numel() / vocab };
        if rows != targets.len() {
            return Err(Error::Shape(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        if rows == 0 {
            return Err(Error::Input("cross_entropy over zero positions".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target id {bad} outside vocab {vocab}")));
        }
        let mut probs = lv.data().to_vec();
        let mut nll = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[tgt];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::scalar(nll / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates adjoints from the scalar `loss` back to every leaf that
    /// requires a gradient, then clears the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            // interior adjoints are not returned
        }

        let grads = self
            .nodes
            .iter()
            .take(n)
            .enumerate()
            .map(|(i, node)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = adj[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("adjoint shape"))
                } else {
                    None
                }
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            let slot =
                adj[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    acc(*a, &|s| matmul_nt_into(g, bv.data(), s, m, nn, k));
                }
                if wants(*b) {
                    acc(*b, &|s| matmul_tn_into(av.data(), g, s, m, k, nn));
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        acc(id, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * bv[i];
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(a, f) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += f * y));
            }
            Op::Sum(a) => {
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Silu(a) => {
                let xv = nodes[a.0].value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(xv[i]);
                        s[i] += g[i] * sg * (1.0 + xv[i] * (1.0 - sg));
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for (yr, (gr, sr)) in y
                        .chunks(width)
                        .zip(g.chunks(width).zip(s.chunks_mut(width)))
                    {
                        let inner = dot(yr, gr);
                        for j in 0..width {
                            sr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = &nodes[x.0].value;
                let gv = nodes[gain.0].value.data();
                let d = xv.cols();
                if wants(*gain) {
                    acc(*gain, &|s| {
                        for (i, r) in inv_rms.iter().enumerate() {
                            for j in 0..d {
                                s[j] += g[i * d + j] * xv.data()[i * d + j] * r;
                            }
                        }
                    });
                }
                if wants(*x) {
                    acc(*x, &|s| {
                        for (i, r) in inv_rms.iter().enumerate() {
                            let row = &xv.data()[i * d..(i + 1) * d];
                            let gr = &g[i * d..(i + 1) * d];
                            // dn = g·gain, n = x·r; dx = r·(dn − n·mean(dn·n))
                            let mut proj = 0.0;
                            for j in 0..d {
                                proj += gr[j] * gv[j] * row[j] * r;
                            }
                            proj /= d as f64;
                            for j in 0..d {
                                s[i * d + j] += r * (gr[j] * gv[j] - row[j] * r * proj);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &|s| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[t * d + j];
                        }
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                head_dim,
                probs,
            } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (t, width) = (qv.rows(), qv.cols());
                let hd = *head_dim;
                let inv_sqrt = 1.0 / (hd as f64).sqrt();
                let mut dq = vec![0.0; t * width];
                let mut dk = vec![0.0; t * width];
                let mut dv = vec![0.0; t * width];
                let mut dp = vec![0.0; t];
                for h in 0..*n_heads {
                    let off = h * hd;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let gi = &g[i * width + off..i * width + off + hd];
                        let mut inner = 0.0;
                        for j in 0..=i {
                            let vj = &vv.data()[j * width + off..j * width + off + hd];
                            dp[j] = dot(gi, vj);
                            inner += p[j] * dp[j];
                            let dvj = &mut dv[j * width + off..j * width + off + hd];
                            for (x, &y) in dvj.iter_mut().zip(gi) {
                                *x += p[j] * y;
                            }
                        }
                        let qi = &qv.data()[i * width + off..i * width + off + hd];
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - inner) * inv_sqrt;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.data()[j * width + off..j * width + off + hd];
                            let dqi = &mut dq[i * width + off..i * width + off + hd];
                            for (x, &y) in dqi.iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                            let dkj = &mut dk[j * width + off..j * width + off + hd];
                            for (x, &y) in dkj.iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
                for (id, d) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    if wants(id) {
                        acc(id, &|s| s.iter_mut().zip(d.iter()).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = *nodes[logits.0].value.shape().last().unwrap();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &|s| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let ind = if j == tgt { 1.0 } else { 0.0 };
                            s[r * vocab + j] += scale * (probs[r * vocab + j] - ind);
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central differences of `f` with respect to every element of `x`.
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(got: &Tensor, want: &[f64], tol: f64) {
        for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
            let rel = (g - w).abs() / g.abs().max(w.abs()).max(1e-8);
            assert!(rel < tol, "entry {i}: autodiff {g} vs fd {w}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng(1)).with_requires_grad(true));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
        assert!(tape.is_empty());
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let w0 = Tensor::randn(&[4], 1.0, &mut rng(2)).with_requires_grad(true);
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).unwrap().max_abs_diff(&w0) < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]));
        let b = tape.leaf(Tensor::ones(&[2, 2]).with_requires_grad(true));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn matmul_gradients_match_fd() {
        let a0 = Tensor::randn(&[3, 4], 1.0, &mut rng(3));
        let b0 = Tensor::randn(&[4, 2], 1.0, &mut rng(4));
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng(5));
        let run = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(a.clone().with_requires_grad(true));
            let b = tape.leaf(b.clone().with_requires_grad(true));
            let wn = tape.leaf(w.clone());
            let c = tape.matmul(a, b).unwrap();
            let cw = tape.mul(c, wn).unwrap();
            let loss = tape.sum(cw);
            let value = tape.value(loss).item();
            let g = tape.backward(loss).unwrap();
            (value, g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        let (_, ga, gb) = run(&a0, &b0);
        assert_close(&ga, &finite_diff(&a0, &|a| run(a, &b0).0), 1e-6);
        assert_close(&gb, &finite_diff(&b0, &|b| run(&a0, b).0), 1e-6);
    }

    #[test]
    fn elementwise_gradients_match_fd() {
        let x0 = Tensor::randn(&[2, 5], 1.5, &mut rng(6));
        let w = Tensor::randn(&[2, 5], 1.0, &mut rng(7));
        let gain0 = Tensor::randn(&[5], 1.0, &mut rng(8));
        let run = |x: &Tensor, gain: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(x.clone().with_requires_grad(true));
            let gn = tape.leaf(gain.clone().with_requires_grad(true));
            let wn = tape.leaf(w.clone());
            let n = tape.rms_norm(x, gn).unwrap();
            let s = tape.silu(n);
            let sm = tape.softmax(s).unwrap();
            let a = tape.add(sm, s).unwrap();
            let m = tape.mul(a, wn).unwrap();
            let m = tape.scale(m, 1.7);
            let loss = tape.sum(m);
            let value = tape.value(loss).item();
            let g = tape.backward(loss).unwrap();
            (value, g.get(x).unwrap().clone(), g.get(gn).unwrap().clone())
        };
        let (_, gx, gg) = run(&x0, &gain0);
        assert_close(&gx, &finite_diff(&x0, &|x| run(x, &gain0).0), 1e-6);
        assert_close(&gg, &finite_diff(&gain0, &|g| run(&x0, g).0), 1e-6);
    }

    #[test]
    fn attention_and_embedding_gradients_match_fd() {
        let table0 = Tensor::randn(&[7, 6], 1.0, &mut rng(9));
        let ids = [3usize, 0, 6, 3];
        let wq = Tensor::randn(&[6, 6], 0.7, &mut rng(10));
        let wk = Tensor::randn(&[6, 6], 0.7, &mut rng(11));
        let wv = Tensor::randn(&[6, 6], 0.7, &mut rng(12));
        let out_w = Tensor::randn(&[4, 6], 1.0, &mut rng(13));
        let run = |table: &Tensor, wq: &Tensor| {
            let mut tape = Tape::new();
            let tb = tape.leaf(table.clone().with_requires_grad(true));
            let q_w = tape.leaf(wq.clone().with_requires_grad(true));
            let k_w = tape.leaf(wk.clone());
            let v_w = tape.leaf(wv.clone());
            let ow = tape.leaf(out_w.clone());
            let x = tape.embedding(tb, &ids).unwrap();
            let q = tape.matmul(x, q_w).unwrap();
            let k = tape.matmul(x, k_w).unwrap();
            let v = tape.matmul(x, v_w).unwrap();
            let a = tape.causal_attention(q, k, v, 3).unwrap();
            let m = tape.mul(a, ow).unwrap();
            let loss = tape.sum(m);
            let value = tape.value(loss).item();
            let g = tape.backward(loss).unwrap();
            (value, g.get(tb).unwrap().clone(), g.get(q_w).unwrap().clone())
        };
        let (_, gt, gq) = run(&table0, &wq);
        assert_close(&gt, &finite_diff(&table0, &|t| run(t, &wq).0), 1e-6);
        assert_close(&gq, &finite_diff(&wq, &|w| run(&table0, w).0), 1e-6);
    }

    #[test]
    fn attention_is_causal() {
        let mut r = rng(14);
        let q = Tensor::randn(&[5, 4], 1.0, &mut r);
        let k = Tensor::randn(&[5, 4], 1.0, &mut r);
        let v = Tensor::randn(&[5, 4], 1.0, &mut r);
        let run = |k: &Tensor, v: &Tensor| {
            let mut tape = Tape::new();
            let (qn, kn, vn) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
            let a = tape.causal_attention(qn, kn, vn, 2).unwrap();
            tape.value(a).clone()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..4 {
            k2.data_mut()[4 * 4 + j] += 3.0;
            v2.data_mut()[4 * 4 + j] -= 2.0;
        }
        let edited = run(&k2, &v2);
        assert_eq!(&base.data()[..16], &edited.data()[..16]);
        assert_ne!(&base.data()[16..], &edited.data()[16..]);
    }

    #[test]
    fn cross_entropy_examples() {
        let vocab = 7;
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 3, vocab]));
        let ce = tape.cross_entropy(l, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!((tape.value(ce).item() - (vocab as f64).ln()).abs() < 1e-14);

        let mut big = Tensor::zeros(&[1, 3]);
        big.data_mut()[1] = 800.0;
        let l = tape.leaf(big);
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-300);

        let l = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(l, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let logits0 = Tensor::randn(&[2, 3, 5], 2.0, &mut rng(15));
        let targets = [4usize, 0, 2, 2, 1, 3];
        let mut oracle = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits0.data()[r * 5..(r + 1) * 5];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            oracle += lse - row[t];
        }
        oracle /= targets.len() as f64;

        let run = |logits: &Tensor| {
            let mut tape = Tape::new();
            let l = tape.leaf(logits.clone().with_requires_grad(true));
            let ce = tape.cross_entropy(l, &targets).unwrap();
            let value = tape.value(ce).item();
            let g = tape.backward(ce).unwrap();
            (value, g.get(l).unwrap().clone())
        };
        let (value, grad) = run(&logits0);
        assert!((value - oracle).abs() < 1e-10);
        assert_close(&grad, &finite_diff(&logits0, &|l| run(l).0), 1e-6);
    }

    #[test]
    fn zero_width_operands_are_accepted() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3, 4]).with_requires_grad(true));
        let w = tape.leaf(Tensor::zeros(&[4, 0]).with_requires_grad(true));
        let q = tape.matmul(x, w).unwrap();
        let a = tape.causal_attention(q, q, q, 2).unwrap();
        let wo = tape.leaf(Tensor::zeros(&[0, 4]).with_requires_grad(true));
        let o = tape.matmul(a, wo).unwrap();
        assert_eq!(tape.value(o).data(), &[0.0; 12]);
        let s = tape.sum(o);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 12]);
    }
}
