use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, dot, gemm, gemm_nt, gemm_tn};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across tapes, so gradients from several
/// leaves (or several tapes) can be summed per parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Softplus,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    None,
    A,
    B,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul {
        a: usize,
        b: usize,
        batches: usize,
        bcast: Broadcast,
        p: usize,
        q: usize,
        r: usize,
    },
    Unary(usize, Unary),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        in_chunk: usize,
        offset: usize,
    },
    Reshape(usize),
    Transpose(usize, usize, usize),
    BroadcastBatch(usize),
    Pick(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    NormalizeRows {
        a: usize,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Eager (define-by-run) record of primitive operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    watched: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a watched intermediate (see [`Tape::backward_watch`]).
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.watched.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sums another set of parameter gradients into this one.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }
}

/// Adds `g` into node `j`'s gradient, taking ownership when it is the first
/// contribution.
fn give(grads: &mut [Option<Vec<f64>>], j: usize, g: Vec<f64>) {
    match &mut grads[j] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(t, x)| *t += x),
        slot @ None => *slot = Some(g),
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; nodes[j].data.len()])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which [`Tape::param`] records constants; nothing is traced.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("tape values are well-formed")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf(None), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("input", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf(None), false))
    }

    /// Records a leaf whose gradient is reported under `id`. Frozen tensors
    /// (and every leaf on an inference tape) become constants.
    pub fn param(&mut self, t: &Tensor, id: ParamId) -> Var {
        let traced = t.requires_grad() && !self.no_grad;
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf(traced.then_some(id)),
            traced,
        )
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    fn zip_bcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a), self.value(b));
        let m = db.len();
        da.chunks(m)
            .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| f(x, y)))
            .collect()
    }

    /// Elementwise `a + b`; `b` may omit leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let data = self.zip_bcast(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let data = self.zip_bcast(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let data = self.zip_bcast(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Mul(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, data, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x + c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, data, Op::AddScalar(a.0), ng)
    }

    /// Matrix product over the last two axes. Leading batch dimensions must
    /// agree, or one operand may be a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (bcast, batches, p, mut shape) = if bb.is_empty() {
            // Fold every leading axis of `a` into its rows.
            (Broadcast::B, 1, numel(&sa[..sa.len() - 1]), sa[..sa.len() - 1].to_vec())
        } else if ba.is_empty() {
            (Broadcast::A, numel(bb), p, [bb, &[p]].concat())
        } else if ba == bb {
            (Broadcast::None, numel(ba), p, [ba, &[p]].concat())
        } else {
            return Err(Error::dim("matmul", &sa, &sb));
        };
        shape.push(r);
        let mut out = vec![0.0; batches * p * r];
        {
            let (da, db) = (self.value(a), self.value(b));
            for n in 0..batches {
                let ao = if matches!(bcast, Broadcast::A) { 0 } else { n * p * q };
                let bo = if matches!(bcast, Broadcast::B) { 0 } else { n * q * r };
                gemm(
                    &da[ao..ao + p * q],
                    &db[bo..bo + q * r],
                    &mut out[n * p * r..(n + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            out,
            Op::Matmul {
                a: a.0,
                b: b.0,
                batches,
                bcast,
                p,
                q,
                r,
            },
            ng,
        ))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Log => f64::ln,
            Unary::Exp => f64::exp,
            Unary::Softplus => kernels::softplus,
            Unary::Relu => |x| x.max(0.0),
            Unary::Tanh => f64::tanh,
        };
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, data, Op::Unary(a.0, kind), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(x[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// `(x - max) - ln Σ exp(x - max)` along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().unwrap_or(&1);
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(len) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| (v - m) - lse));
        }
        let ng = self.ng(a);
        self.push(shape, out, Op::LogSoftmax(a.0), ng)
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layernorm", &shape, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layernorm", &shape, self.shape(gain)));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a.0), ng)
    }

    /// Mean along `axis`; the axis is removed from the result.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (t, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *t += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(
            new_shape,
            out,
            Op::Mean {
                a: a.0,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Concatenates along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let chunks: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*p)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                outer,
                chunks,
            },
            ng,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let in_chunk = full * inner;
        let out_chunk = len * inner;
        let offset = start * inner;
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            out.extend_from_slice(&x[o * in_chunk + offset..o * in_chunk + offset + out_chunk]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                a: a.0,
                outer,
                in_chunk,
                offset,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if ax1 >= shape.len() || ax2 >= shape.len() {
            return Err(Error::dim("transpose", &shape, &[ax1, ax2]));
        }
        let data = kernels::transpose(self.value(a), &shape, ax1, ax2);
        let mut new_shape = shape;
        new_shape.swap(ax1, ax2);
        let ng = self.ng(a);
        Ok(self.push(new_shape, data, Op::Transpose(a.0, ax1, ax2), ng))
    }

    /// Repeats `a` along a new leading axis of length `n`.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * n);
        for _ in 0..n {
            data.extend_from_slice(x);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let ng = self.ng(a);
        self.push(shape, data, Op::BroadcastBatch(a.0), ng)
    }

    /// `out[i] = a[i, idx[i]]` for a rank-2 `a`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() || idx.iter().any(|&i| i >= shape[1]) {
            return Err(Error::dim("pick", &shape, &[idx.len()]));
        }
        let x = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| x[i * shape[1] + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![idx.len()], data, Op::Pick(a.0, idx.to_vec()), ng))
    }

    /// Gathers entries of the leading axis.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::dim("select_rows", &shape, &[rows.len()]));
        }
        let w = numel(&shape[1..]);
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&x[r * w..(r + 1) * w]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        let ng = self.ng(a);
        Ok(self.push(new_shape, data, Op::SelectRows(a.0, rows.to_vec()), ng))
    }

    /// Scales each last-axis row to unit length, dividing by `max(|x|, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let x = self.value(a);
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let n = dot(row, row).sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let ng = self.ng(a);
        self.push(shape, out, Op::NormalizeRows { a: a.0, norms }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_watch(loss, &[])
    }

    /// Like [`Tape::backward`], additionally retaining the gradient of every
    /// var in `watch`.
    pub fn backward_watch(&self, loss: Var, watch: &[Var]) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut out = Gradients::default();
        if !ln.needs_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if watch.iter().any(|w| w.0 == i) {
                out.watched.insert(i, g.clone());
            }
            self.step_back(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn step_back(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let needs = |j: usize| nodes[j].needs_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(grads, nodes, $j)
            };
        }
        match &node.op {
            Op::Leaf(Some(id)) => match out.params.get_mut(id) {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                None => {
                    out.params.insert(*id, g);
                }
            },
            Op::Leaf(None) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*b) {
                    let gb = acc!(*b);
                    let m = gb.len();
                    for chunk in g.chunks(m) {
                        gb.iter_mut().zip(chunk).for_each(|(t, x)| *t += sign * x);
                    }
                }
                if needs(*a) {
                    give(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                let m = db.len();
                if needs(*a) {
                    let ga = acc!(*a);
                    for (c, chunk) in g.chunks(m).enumerate() {
                        for (j, x) in chunk.iter().enumerate() {
                            ga[c * m + j] += x * db[j];
                        }
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    for (c, chunk) in g.chunks(m).enumerate() {
                        for (j, x) in chunk.iter().enumerate() {
                            gb[j] += x * da[c * m + j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                acc!(*a).iter_mut().zip(&g).for_each(|(t, x)| *t += c * x);
            }
            Op::AddScalar(a) | Op::Reshape(a) => give(grads, *a, g),
            Op::Matmul {
                a,
                b,
                batches,
                bcast,
                p,
                q,
                r,
            } => {
                let (p, q, r) = (*p, *q, *r);
                let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                let a_off = |n: usize| if matches!(bcast, Broadcast::A) { 0 } else { n * p * q };
                let b_off = |n: usize| if matches!(bcast, Broadcast::B) { 0 } else { n * q * r };
                if needs(*a) {
                    let ga = acc!(*a);
                    for n in 0..*batches {
                        let ao = a_off(n);
                        let bo = b_off(n);
                        gemm_nt(
                            &g[n * p * r..(n + 1) * p * r],
                            &db[bo..bo + q * r],
                            &mut ga[ao..ao + p * q],
                            p,
                            q,
                            r,
                        );
                    }
                }
                if needs(*b) {
                    let gb = acc!(*b);
                    for n in 0..*batches {
                        let ao = a_off(n);
                        let bo = b_off(n);
                        gemm_tn(
                            &da[ao..ao + p * q],
                            &g[n * p * r..(n + 1) * p * r],
                            &mut gb[bo..bo + q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
            Op::Unary(a, kind) => {
                let x = &nodes[*a].data;
                let y = &node.data;
                let ga = acc!(*a);
                for j in 0..g.len() {
                    let d = match kind {
                        Unary::Gelu => kernels::gelu_grad(x[j]),
                        Unary::Sigmoid => y[j] * (1.0 - y[j]),
                        Unary::Log => 1.0 / x[j],
                        Unary::Exp => y[j],
                        Unary::Softplus => kernels::sigmoid(x[j]),
                        Unary::Relu => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y[j] * y[j],
                    };
                    ga[j] += g[j] * d;
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                let y = &node.data;
                let ga = acc!(*a);
                for o in 0..*outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let mut s = 0.0;
                        for j in 0..len {
                            s += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] += y[idx] * (g[idx] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let len = *node.shape.last().unwrap_or(&1);
                let y = &node.data;
                let ga = acc!(*a);
                for (row, (gr, yr)) in g.chunks(len).zip(y.chunks(len)).enumerate() {
                    let s: f64 = gr.iter().sum();
                    for j in 0..len {
                        ga[row * len + j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gam = &nodes[*gain].data;
                if needs(*gain) {
                    let gg = acc!(*gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = acc!(*bias);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(t, v)| *t += v);
                    }
                }
                if needs(*x) {
                    let gx = acc!(*x);
                    for (row, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[row * d + j] += rstd[row] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                acc!(*a).iter_mut().for_each(|t| *t += s);
            }
            Op::Mean { a, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                let ga = acc!(*a);
                let w = 1.0 / len as f64;
                for o in 0..*outer {
                    for j in 0..len {
                        let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (t, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *t += v * w;
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&inp, &c) in inputs.iter().zip(chunks) {
                    if needs(inp) {
                        let gi = acc!(inp);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            gi[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(t, v)| *t += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice {
                a,
                outer,
                in_chunk,
                offset,
            } => {
                let out_chunk = g.len() / outer;
                let ga = acc!(*a);
                for o in 0..*outer {
                    let dst = &mut ga[o * in_chunk + offset..o * in_chunk + offset + out_chunk];
                    dst.iter_mut()
                        .zip(&g[o * out_chunk..(o + 1) * out_chunk])
                        .for_each(|(t, v)| *t += v);
                }
            }
            Op::Transpose(a, ax1, ax2) => {
                let back = kernels::transpose(&g, &node.shape, *ax1, *ax2);
                acc!(*a).iter_mut().zip(&back).for_each(|(t, v)| *t += v);
            }
            Op::BroadcastBatch(a) => {
                let ga = acc!(*a);
                let m = ga.len();
                for chunk in g.chunks(m) {
                    ga.iter_mut().zip(chunk).for_each(|(t, v)| *t += v);
                }
            }
            Op::Pick(a, idx) => {
                let cols = nodes[*a].shape[1];
                let ga = acc!(*a);
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * cols + j] += g[i];
                }
            }
            Op::SelectRows(a, rows) => {
                let w = numel(&nodes[*a].shape[1..]);
                let ga = acc!(*a);
                for (k, &r) in rows.iter().enumerate() {
                    ga[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(&g[k * w..(k + 1) * w])
                        .for_each(|(t, v)| *t += v);
                }
            }
            Op::NormalizeRows { a, norms } => {
                let d = *node.shape.last().unwrap_or(&1);
                let x = &nodes[*a].data;
                let y = &node.data;
                let ga = acc!(*a);
                for (row, &n) in norms.iter().enumerate() {
                    let r = row * d..(row + 1) * d;
                    let clamped = dot(&x[r.clone()], &x[r.clone()]).sqrt() < n;
                    let yg = if clamped {
                        0.0
                    } else {
                        dot(&y[r.clone()], &g[r.clone()])
                    };
                    for j in r {
                        ga[j] += (g[j] - y[j] * yg) / n;
                    }
                }
            }
        }
    }
}
