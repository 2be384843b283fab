use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Controls dropout. `Eval` makes dropout the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    RowScale {
        x: Var,
        s: Var,
    },
    Interpolate {
        z: Var,
        s: Var,
        h: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SmoothedNll {
        logp: Var,
        weights: Vec<(usize, Vec<f64>)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation.
///
/// Nodes are appended in execution order, which is a valid topological order
/// for the reverse sweep. A graph is single-threaded; build one per forward
/// pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient for a parameter, or `None` if the parameter never entered the graph.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|&(_, v)| self.wrt(v))
    }

    /// One entry per parameter in `store`, zero-filled for unused parameters.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| self.param(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index of `x.permute(axes)`, the source flat index in `x`.
/// Source offsets of the contiguous blocks that make up a permuted tensor,
/// plus the block length. Trailing axes left in place are copied as one block.
fn permute_blocks(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let rank = shape.len();
    let mut kept = 0;
    while kept < rank && axes[rank - 1 - kept] == rank - 1 - kept {
        kept += 1;
    }
    let outer = rank - kept;
    let block: usize = shape[outer..].iter().product();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes[..outer].iter().map(|&a| shape[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; outer];
    for _ in 0..n {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        map.push(src);
        for d in (0..outer).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (map, block)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: None,
            params: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Graph {
            rng: Some(rng),
            ..Self::new(Mode::Train)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Returns the dropout generator, advanced past every mask drawn so far.
    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let inputs = self.inputs(&op);
            let finite_inputs =
                !inputs.is_empty() && inputs.iter().all(|v| self.value(*v).is_finite());
            assert!(
                !finite_inputs,
                "non-finite output from finite inputs in {op:?}"
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[cfg(debug_assertions)]
    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::RowScale { x, s } => vec![*x, *s],
            Op::Interpolate { z, s, h } => vec![*z, *s, *h],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SmoothedNll { logp, .. } => vec![*logp],
            Op::Affine { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Brings a stored parameter onto the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = Arc::clone(&self.nodes[x.0].value);
        self.push_shared(t, Op::Leaf, false)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched product over the leading dim: `a[B,m,k] · b[B,k,n]`, or `a · bᵀ`
    /// with `b[B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_a_bt_acc(ai, bi, oi, m, k, n);
            } else {
                matmul_acc(ai, bi, oi, m, k, n);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&[bs, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        suffix_broadcast(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.numel();
        let mut data = vec![0.0; av.numel()];
        for (out, chunk) in data.chunks_mut(nb).zip(av.data().chunks(nb)) {
            for ((o, &x), &y) in out.iter_mut().zip(chunk).zip(bv.data()) {
                *o = f(x, y);
            }
        }
        Tensor::new(av.shape(), data)
    }

    /// Entry-wise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Entry-wise product; `b` may match a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Multiplies each last-axis row of `x[..., d]` by the matching scalar of `s[..., 1]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let ok = sx.len() == ss.len()
            && ss.last() == Some(&1)
            && sx[..sx.len() - 1] == ss[..ss.len() - 1];
        if !ok {
            return Err(Error::Dimension {
                op: "row_scale",
                lhs: sx,
                rhs: ss,
            });
        }
        let d = *sx.last().unwrap();
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v * c))
            .collect();
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(Tensor::new(&sx, data)?, Op::RowScale { x, s }, rg))
    }

    /// Entry-wise convex combination `z⊙s + (1 − z)⊙h` for gates `z ∈ [0, 1]`.
    ///
    /// The result is clamped into `[min(s, h), max(s, h)]`, which only ever
    /// moves it by the final rounding step.
    pub fn interpolate(&mut self, z: Var, s: Var, h: Var) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        for v in [s, h] {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "interpolate",
                    lhs: shape,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let (zv, sv, hv) = (
            self.value(z).data(),
            self.value(s).data(),
            self.value(h).data(),
        );
        let data = zv
            .iter()
            .zip(sv)
            .zip(hv)
            .map(|((&zi, &si), &hi)| (zi * si + (1.0 - zi) * hi).clamp(si.min(hi), si.max(hi)))
            .collect();
        let rg = self.any_grad(&[z, s, h]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Interpolate { z, s, h }, rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.map(x, |v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Tanh { x }, rg)
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            softmax_row(row, &mut data);
        }
        let t = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            log_softmax_row(row, &mut data);
        }
        let t = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::LogSoftmax { x }, rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(gv[j] * h + bv[j]);
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V, d]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(Error::input("embedding lookup with no ids"));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::Dimension {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (map, block) = permute_blocks(&shape, axes);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for &start in &map {
            data.extend_from_slice(&src[start..start + block]);
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == first.len();
            if !same_rank || (0..first.len()).any(|i| i != axis && s[i] != first[i]) {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let width = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::input(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let n = self.value(x).numel();
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Contract("train-mode dropout without a generator".into()))?;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Label-smoothed negative log-likelihood, averaged over active rows.
    ///
    /// `logp` holds log-probabilities with the class axis last. Each active
    /// row targets `(1 - eps)` on its label and spreads `eps` uniformly over
    /// the remaining classes other than `excluded`. Inactive rows contribute
    /// nothing, not even to the row count.
    pub fn smoothed_nll(
        &mut self,
        logp: Var,
        targets: &[usize],
        active: &[bool],
        eps: f64,
        excluded: Option<usize>,
    ) -> Result<Var> {
        let lv = self.value(logp);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows || active.len() != rows {
            return Err(Error::Dimension {
                op: "smoothed_nll",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), active.len()],
            });
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::input(format!(
                "label smoothing {eps} outside [0, 1)"
            )));
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::Contract(
                "loss over a batch with every position padded".into(),
            ));
        }
        let mut weights = Vec::with_capacity(count);
        let mut total = 0.0;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Index { index: t, size: v });
            }
            let q = smoothing_row(v, t, eps, excluded);
            let row = lv.row(r);
            let mut s = 0.0;
            for (qi, li) in q.iter().zip(row) {
                if *qi != 0.0 {
                    s += qi * li;
                }
            }
            total += s;
            weights.push((r, q));
        }
        let loss = -total / count as f64;
        let scale = 1.0 / count as f64;
        for (_, q) in &mut weights {
            q.iter_mut().for_each(|w| *w *= scale);
        }
        let rg = self.any_grad(&[logp]);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothedNll { logp, weights }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k;
                if self.wants(*a) {
                    let da = accumulate(grads, *a, m * k);
                    matmul_a_bt_acc(g, bv.data(), da, m, n, k);
                }
                if self.wants(*b) {
                    let db = accumulate(grads, *b, k * n);
                    matmul_at_b_acc(av.data(), g, db, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                if self.wants(*a) {
                    let da = accumulate(grads, *a, bs * m * k);
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            matmul_acc(gi, bi, dai, m, n, k);
                        } else {
                            matmul_a_bt_acc(gi, bi, dai, m, n, k);
                        }
                    }
                }
                if self.wants(*b) {
                    let db = accumulate(grads, *b, bs * k * n);
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            matmul_at_b_acc(gi, ai, dbi, m, n, k);
                        } else {
                            matmul_at_b_acc(ai, gi, dbi, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    let da = accumulate(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let db = accumulate(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        db.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.wants(*a) {
                    let da = accumulate(grads, *a, g.len());
                    for (dchunk, gchunk) in da.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((d, gv), bvv) in dchunk.iter_mut().zip(gchunk).zip(bv) {
                            *d += gv * bvv;
                        }
                    }
                }
                if self.wants(*b) {
                    let db = accumulate(grads, *b, nb);
                    for (achunk, gchunk) in av.chunks(nb).zip(g.chunks(nb)) {
                        for ((d, gv), avv) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += gv * avv;
                        }
                    }
                }
            }
            Op::RowScale { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s).data());
                let d = xv.last_dim();
                if self.wants(*x) {
                    let dx = accumulate(grads, *x, g.len());
                    for ((dchunk, gchunk), &c) in dx.chunks_mut(d).zip(g.chunks(d)).zip(sv) {
                        dchunk
                            .iter_mut()
                            .zip(gchunk)
                            .for_each(|(dv, gv)| *dv += gv * c);
                    }
                }
                if self.wants(*s) {
                    let ds = accumulate(grads, *s, sv.len());
                    for ((dv, gchunk), xchunk) in
                        ds.iter_mut().zip(g.chunks(d)).zip(xv.data().chunks(d))
                    {
                        *dv += gchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Interpolate { z, s, h } => {
                let (zv, sv, hv) = (
                    self.value(*z).data(),
                    self.value(*s).data(),
                    self.value(*h).data(),
                );
                if self.wants(*z) {
                    let dz = accumulate(grads, *z, g.len());
                    for i in 0..g.len() {
                        dz[i] += g[i] * (sv[i] - hv[i]);
                    }
                }
                if self.wants(*s) {
                    let ds = accumulate(grads, *s, g.len());
                    for i in 0..g.len() {
                        ds[i] += g[i] * zv[i];
                    }
                }
                if self.wants(*h) {
                    let dh = accumulate(grads, *h, g.len());
                    for i in 0..g.len() {
                        dh[i] += g[i] * (1.0 - zv[i]);
                    }
                }
            }
            Op::Affine { x, scale } => {
                let dx = accumulate(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = accumulate(grads, *x, g.len());
                for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let dx = accumulate(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Tanh { x } => {
                let dx = accumulate(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Softmax { x } => {
                let d = out.last_dim();
                let dx = accumulate(grads, *x, g.len());
                for ((dchunk, gchunk), ychunk) in
                    dx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d))
                {
                    let dot: f64 = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum();
                    for ((dv, gv), y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                        *dv += y * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let d = out.last_dim();
                let dx = accumulate(grads, *x, g.len());
                for ((dchunk, gchunk), ychunk) in
                    dx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d))
                {
                    let gsum: f64 = gchunk.iter().sum();
                    for ((dv, gv), y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                        *dv += gv - y.exp() * gsum;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let dg = accumulate(grads, *gain, d);
                    for (gchunk, hchunk) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dv, a), h) in dg.iter_mut().zip(gchunk).zip(hchunk) {
                            *dv += a * h;
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = accumulate(grads, *bias, d);
                    for gchunk in g.chunks(d) {
                        db.iter_mut().zip(gchunk).for_each(|(dv, a)| *dv += a);
                    }
                }
                if self.wants(*x) {
                    let dx = accumulate(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (gchunk, hchunk)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gchunk[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hchunk).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let inv = inv_std[r];
                        for j in 0..d {
                            dx[r * d + j] += inv * (dxhat[j] - mean_d - hchunk[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let dt = accumulate(grads, *table, tv.numel());
                for (i, &id) in ids.iter().enumerate() {
                    let row = &mut dt[id * d..(id + 1) * d];
                    row.iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(dv, gv)| *dv += gv);
                }
            }
            Op::Reshape { x } => {
                let dx = accumulate(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::Permute { x, axes } => {
                let (map, block) = permute_blocks(self.shape(*x), axes);
                let dx = accumulate(grads, *x, g.len());
                for (gchunk, &start) in g.chunks(block).zip(&map) {
                    dx[start..start + block]
                        .iter_mut()
                        .zip(gchunk)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let dp = accumulate(grads, p, outer * width);
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + width];
                            dp[o * width..(o + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                    offset += width;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let len = out.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dx = accumulate(grads, *x, shape.iter().product());
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = accumulate(grads, *x, g.len());
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::Sum { x } => {
                let dx = accumulate(grads, *x, self.value(*x).numel());
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let dx = accumulate(grads, *x, n);
                let c = g[0] / n as f64;
                dx.iter_mut().for_each(|d| *d += c);
            }
            Op::SmoothedNll { logp, weights } => {
                let lv = self.value(*logp);
                let v = lv.last_dim();
                let dl = accumulate(grads, *logp, lv.numel());
                for (r, q) in weights {
                    for (d, w) in dl[r * v..(r + 1) * v].iter_mut().zip(q) {
                        *d -= g[0] * w;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut sum = 0.0;
    for &v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= sum);
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    out.extend(row.iter().map(|&v| v - lse));
}

/// Target distribution for one smoothed row.
pub(crate) fn smoothing_row(
    v: usize,
    target: usize,
    eps: f64,
    excluded: Option<usize>,
) -> Vec<f64> {
    let excluded = excluded.filter(|&e| e < v && e != target);
    let others = v - 1 - usize::from(excluded.is_some());
    let mut q = vec![0.0; v];
    if eps > 0.0 && others > 0 {
        let share = eps / others as f64;
        q.iter_mut().for_each(|w| *w = share);
        q[target] = 1.0 - eps;
    } else {
        q[target] = 1.0;
    }
    if let Some(e) = excluded {
        q[e] = 0.0;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::eval();
        let i = g.constant(Tensor::eye(2));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.constant(Tensor::zeros(&[2, 1]));
        let y = g.matmul(a, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let mut g = Graph::eval();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_ok());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::eval();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x);
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::eval();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_and_normalized_inputs() {
        let mut g = Graph::eval();
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::filled(&[4], 5.0));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::eval();
        let x = g.constant(t(&[2], &[-3.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        // tanh(0.5), rounded from a high-precision evaluation
        let h = g.constant(Tensor::scalar(0.5));
        let th = g.tanh(h);
        let reference = 0.46211715726000974;
        assert!((g.value(th).item() - reference).abs() < 1e-12);
    }

    #[test]
    fn embedding_identity_gather_and_scatter() {
        let mut g = Graph::eval();
        let e = g.leaf(Tensor::eye(3));
        let y = g.embedding(e, &[2]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0]);

        let y = g.embedding(e, &[1, 1]).unwrap();
        let w = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]));
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(e).data(),
            &[0.0, 0.0, 0.0, 11.0, 22.0, 33.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(
            g.embedding(e, &[3]),
            Err(Error::Index { index: 3, size: 3 })
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::eval();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[1.0, 1.0, 1.0]);

        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::eval();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::eval();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn permute_concat_narrow_round_trip() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let p = g.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 2]);
        assert_eq!(g.value(p).get(&[2, 1, 0]), g.value(x).get(&[1, 2, 0]));
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn smoothed_nll_uniform_is_log_v() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        let lp = g.log_softmax(x);
        for eps in [0.0, 0.1] {
            let l = g
                .smoothed_nll(lp, &[1, 3], &[true, true], eps, Some(0))
                .unwrap();
            assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-14);
        }
        let err = g.smoothed_nll(lp, &[1, 3], &[false, false], 0.0, None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        use rand::SeedableRng;
        let mut g = Graph::eval();
        let x = g.constant(Tensor::filled(&[100], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);

        let run = || {
            let mut g = Graph::train(ChaCha8Rng::seed_from_u64(3));
            let x = g.constant(Tensor::filled(&[100], 1.0));
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(a.data().contains(&0.0));
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::new(&[2, 3], vec![0.1, -0.4, 0.7, 1.2, -0.3, 0.05]).unwrap());
        let w = g.leaf(Tensor::new(&[3, 2], vec![0.3, -0.2, 0.5, 0.9, -1.1, 0.4]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h);
        let lp = g.log_softmax(h);
        let l = g
            .smoothed_nll(lp, &[0, 1], &[true, true], 0.1, None)
            .unwrap();
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        assert_eq!(g1.wrt(w), g2.wrt(w));
        assert_eq!(g1.wrt(x), g2.wrt(x));
    }
}
