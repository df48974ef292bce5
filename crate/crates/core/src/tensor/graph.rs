//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so node ids are a
//! valid topological order and backward is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::value::{numel, strided_gather, strided_scatter_add, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attribute-carrying primitive kinds, for generic dispatch through [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    LayerNorm { axis: usize, eps: f64 },
    Gelu,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    GatherRows(Vec<usize>),
    MaskedFill { mask: Vec<bool>, mask_shape: Vec<usize>, value: f64 },
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    L2Normalize { axis: usize },
    Exp,
    Log,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value computed outside the graph from its inputs; has no adjoint.
    #[allow(dead_code)]
    Opaque(Vec<Var>),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddScalar { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, axis: usize, rstd: Vec<f64> },
    Gelu { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    GatherRows { table: Var, idx: Arc<Vec<usize>> },
    MaskedFill { a: Var, mask: Arc<Vec<bool>> },
    ReduceSum { a: Var, axis: Option<usize> },
    ReduceMean { a: Var, axis: Option<usize> },
    L2Normalize { a: Var, axis: usize, norms: Vec<f64> },
    Exp { a: Var },
    Log { a: Var },
    Square { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Opaque(_) => "opaque",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskedFill { .. } => "masked_fill",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Square { .. } => "square",
            Op::Clamp { .. } => "clamp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const L2_FLOOR: f64 = 1e-12;

/// Splits `shape` around `axis` into (outer, extent, inner) lane geometry.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (outer, len, inner) = lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, len, inner);
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read an `input`-shaped buffer when walking `out` (0 on broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(input);
    let off = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < off || input[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

fn expand(t: &Tensor, out: &[usize]) -> Vec<f64> {
    if t.shape() == out {
        return t.to_vec();
    }
    strided_gather(t.data(), out, &broadcast_strides(t.shape(), out), 0)
}

/// Sums a gradient of shape `out` back down to `input`'s shape.
fn reduce_to(grad: &[f64], out: &[usize], input: &[usize]) -> Vec<f64> {
    if out == input {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; numel(input)];
    strided_scatter_add(&mut acc, grad, out, &broadcast_strides(input, out));
    acc
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that was computed outside the graph from `inputs`.
    /// Any gradient reaching it is an error at backward time.
    pub fn opaque(&mut self, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Opaque(inputs.to_vec()),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(op.name()));
        }
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Generic dispatch over [`Primitive`].
    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            Primitive::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::invalid("concat needs at least one input"));
                }
                return self.concat(inputs, *axis);
            }
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => arity(2)?,
            _ => arity(1)?,
        }
        let a = inputs[0];
        match kind {
            Primitive::MatMul => self.matmul(a, inputs[1]),
            Primitive::Add => self.add(a, inputs[1]),
            Primitive::Sub => self.sub(a, inputs[1]),
            Primitive::Mul => self.mul(a, inputs[1]),
            Primitive::Scale(s) => self.scale(a, *s),
            Primitive::Softmax { axis } => self.softmax(a, *axis),
            Primitive::LogSoftmax { axis } => self.log_softmax(a, *axis),
            Primitive::LayerNorm { axis, eps } => self.layer_norm(a, *axis, *eps),
            Primitive::Gelu => self.gelu(a),
            Primitive::Reshape(s) => self.reshape(a, s),
            Primitive::Permute(p) => self.permute(a, p),
            Primitive::Concat { .. } => unreachable!(),
            Primitive::Slice { axis, start, len } => self.slice(a, *axis, *start, *len),
            Primitive::GatherRows(idx) => self.gather_rows(a, idx),
            Primitive::MaskedFill {
                mask,
                mask_shape,
                value,
            } => self.masked_fill(a, mask, mask_shape, *value),
            Primitive::ReduceSum { axis } => match axis {
                Some(ax) => self.sum(a, *ax),
                None => self.sum_all(a),
            },
            Primitive::ReduceMean { axis } => match axis {
                Some(ax) => self.mean(a, *ax),
                None => self.mean_all(a),
            },
            Primitive::L2Normalize { axis } => self.l2_normalize(a, *axis),
            Primitive::Exp => self.exp(a),
            Primitive::Log => self.log(a),
            Primitive::Square => self.square(a),
        }
    }

    /// `a[..., m, k] · b[k, n]` (shared right operand) or `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let bs = if shared_rhs { 0 } else { bi * k * n };
                gemm_nn(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bs..bs + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        self.push(&shape, out, Op::MatMul { a, b, shared_rhs }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::Shape {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if ta.shape() == out.as_slice() && out.ends_with(tb.shape()) {
            let nb = tb.numel();
            let bd = tb.data();
            ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect()
        } else {
            let ea = expand(ta, &out);
            let eb = expand(tb, &out);
            ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((out, data))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(&shape, data, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(&shape, data, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(&shape, data, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let (shape, data) = (t.shape().to_vec(), t.data().iter().map(|&v| v * s).collect());
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let (shape, data) = (t.shape().to_vec(), t.data().iter().map(|&v| v + s).collect());
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::AddScalar { a }, rg)
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for_each_lane(&shape, axis, |base, len, inner| {
            let max = (0..len).map(|i| x[base + i * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (x[base + i * inner] - max).exp();
                out[base + i * inner] = e;
                total += e;
            }
            for i in 0..len {
                out[base + i * inner] /= total;
            }
        });
        let rg = self.rg(&[a]);
        self.push(&shape, out, Op::Softmax { a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for_each_lane(&shape, axis, |base, len, inner| {
            let max = (0..len).map(|i| x[base + i * inner]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|i| (x[base + i * inner] - max).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[base + i * inner] = x[base + i * inner] - lse;
            }
        });
        let rg = self.rg(&[a]);
        self.push(&shape, out, Op::LogSoftmax { a, axis }, rg)
    }

    /// Normalization to zero mean, unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(a, axis, "layer_norm")?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.len() / shape[axis].max(1));
        for_each_lane(&shape, axis, |base, len, inner| {
            let mean = (0..len).map(|i| x[base + i * inner]).sum::<f64>() / len as f64;
            let var = (0..len)
                .map(|i| {
                    let d = x[base + i * inner] - mean;
                    d * d
                })
                .sum::<f64>()
                / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            for i in 0..len {
                out[base + i * inner] = (x[base + i * inner] - mean) * r;
            }
            rstd.push(r);
        });
        let rg = self.rg(&[a]);
        self.push(&shape, out, Op::LayerNorm { a, axis, rstd }, rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::Gelu { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.nodes.push(Node {
            value,
            op: Op::Reshape { a },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let rg = self.rg(&[a]);
        self.nodes.push(Node {
            value,
            op: Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        self.nodes.push(Node {
            value,
            op: Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(&[a]);
        self.nodes.push(Node {
            value,
            op: Op::Slice { a, axis, start },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Rows of a 2-d `table` selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            &[idx.len(), d],
            data,
            Op::GatherRows {
                table,
                idx: Arc::new(idx.to_vec()),
            },
            rg,
        )
    }

    /// Replaces entries where `mask` is true with `value`. `mask_shape` must be
    /// a suffix of the input shape; the mask repeats over leading axes.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<Var> {
        let t = self.value(a);
        if !t.shape().ends_with(mask_shape) || numel(mask_shape) != mask.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: mask_shape.to_vec(),
            });
        }
        let m = mask.len().max(1);
        let shape = t.shape().to_vec();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % m] { value } else { x })
            .collect();
        let rg = self.rg(&[a]);
        self.push(
            &shape,
            data,
            Op::MaskedFill {
                a,
                mask: Arc::new(mask.to_vec()),
            },
            rg,
        )
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = self.value(a);
        let (shape, data) = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let v = if mean { s / t.numel().max(1) as f64 } else { s };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                self.check_axis(a, ax, if mean { "reduce_mean" } else { "reduce_sum" })?;
                let t = self.value(a);
                let (outer, len, inner) = lanes(t.shape(), ax);
                let x = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                (shape, out)
            }
        };
        let rg = self.rg(&[a]);
        let op = if mean {
            Op::ReduceMean { a, axis }
        } else {
            Op::ReduceSum { a, axis }
        };
        self.push(&shape, data, op, rg)
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, true)
    }

    /// Unit-l2-norm lanes along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "l2_normalize")?;
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::new();
        for_each_lane(&shape, axis, |base, len, inner| {
            let n = (0..len)
                .map(|i| x[base + i * inner] * x[base + i * inner])
                .sum::<f64>()
                .sqrt()
                .max(L2_FLOOR);
            for i in 0..len {
                out[base + i * inner] = x[base + i * inner] / n;
            }
            norms.push(n);
        });
        let rg = self.rg(&[a]);
        self.push(&shape, out, Op::L2Normalize { a, axis, norms }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|v| v.ln()).collect();
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::Log { a }, rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|v| v * v).collect();
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::Square { a }, rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.rg(&[a]);
        self.push(&shape, data, Op::Clamp { a, lo, hi }, rg)
    }

    /// Same value, no gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_val = self.value(seed);
        if seed_val.numel() != 1 {
            return Err(Error::Backward(format!(
                "seed must be a scalar, got shape {:?}",
                seed_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[seed.0].requires_grad {
            return Ok(Gradients {
                grads: grads.into_iter().map(|_| None).collect(),
            });
        }
        grads[seed.0] = Some(vec![1.0]);

        for id in (0..=seed.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.adjoint(id, &dy, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }

        let shaped = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads: shaped })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn adjoint(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Opaque(_) => {
                return Err(Error::Backward(format!(
                    "node {id} (opaque) has no registered adjoint"
                )))
            }
            Op::MatMul { a, b, shared_rhs } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = tb.shape()[tb.ndim() - 1];
                let batch = ta.numel() / (m * k);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; ta.numel()];
                    for bi in 0..batch {
                        let bs = if *shared_rhs { 0 } else { bi * k * n };
                        gemm_nt(
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bs..bs + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; tb.numel()];
                    for bi in 0..batch {
                        let bs = if *shared_rhs { 0 } else { bi * k * n };
                        gemm_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &mut db[bs..bs + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let g = reduce_to(dy, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let mut g = reduce_to(dy, out_shape, self.shape(*b));
                    if sign < 0.0 {
                        g.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let eb = expand(self.value(*b), out_shape);
                    let prod: Vec<f64> = dy.iter().zip(&eb).map(|(g, v)| g * v).collect();
                    let g = reduce_to(&prod, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let ea = expand(self.value(*a), out_shape);
                    let prod: Vec<f64> = dy.iter().zip(&ea).map(|(g, v)| g * v).collect();
                    let g = reduce_to(&prod, out_shape, self.shape(*b));
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, dy.iter().map(|g| g * s).collect());
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.accumulate(grads, *a, dy.to_vec());
            }
            Op::Softmax { a, axis } => {
                let mut dx = vec![0.0; dy.len()];
                for_each_lane(out_shape, *axis, |base, len, inner| {
                    let dot: f64 = (0..len).map(|i| dy[base + i * inner] * y[base + i * inner]).sum();
                    for i in 0..len {
                        let j = base + i * inner;
                        dx[j] = y[j] * (dy[j] - dot);
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax { a, axis } => {
                let mut dx = vec![0.0; dy.len()];
                for_each_lane(out_shape, *axis, |base, len, inner| {
                    let total: f64 = (0..len).map(|i| dy[base + i * inner]).sum();
                    for i in 0..len {
                        let j = base + i * inner;
                        dx[j] = dy[j] - y[j].exp() * total;
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { a, axis, rstd } => {
                let mut dx = vec![0.0; dy.len()];
                let mut lane = 0;
                for_each_lane(out_shape, *axis, |base, len, inner| {
                    let r = rstd[lane];
                    lane += 1;
                    let n = len as f64;
                    let mean_dy: f64 = (0..len).map(|i| dy[base + i * inner]).sum::<f64>() / n;
                    let mean_dyy: f64 =
                        (0..len).map(|i| dy[base + i * inner] * y[base + i * inner]).sum::<f64>() / n;
                    for i in 0..len {
                        let j = base + i * inner;
                        dx[j] = r * (dy[j] - mean_dy - y[j] * mean_dyy);
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, dy.iter().zip(x).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::Permute { a, perm } => {
                // dy is laid out in permuted order; scatter back through the same strides.
                let in_strides = strides(self.shape(*a));
                let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut dx = vec![0.0; dy.len()];
                strided_scatter_add(&mut dx, dy, out_shape, &src_strides);
                self.accumulate(grads, *a, dx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    if self.requires_grad(*p) {
                        let mut g = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&dy[base..base + ext * inner]);
                        }
                        self.accumulate(grads, *p, g);
                    }
                    offset += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let (full, len) = (in_shape[*axis], out_shape[*axis]);
                let mut dx = vec![0.0; numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::GatherRows { table, idx } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dx = vec![0.0; numel(ts)];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += dy[r * d + c];
                    }
                }
                self.accumulate(grads, *table, dx);
            }
            Op::MaskedFill { a, mask } => {
                let m = mask.len().max(1);
                let dx = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| if mask[i % m] { 0.0 } else { g })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::ReduceSum { a, axis } | Op::ReduceMean { a, axis } => {
                let in_shape = self.shape(*a);
                let mean = matches!(node.op, Op::ReduceMean { .. });
                let dx = match axis {
                    None => {
                        let g = if mean { dy[0] / numel(in_shape) as f64 } else { dy[0] };
                        vec![g; numel(in_shape)]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = lanes(in_shape, *ax);
                        let s = if mean { 1.0 / len as f64 } else { 1.0 };
                        let mut dx = vec![0.0; numel(in_shape)];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    dx[(o * len + l) * inner + i] = dy[o * inner + i] * s;
                                }
                            }
                        }
                        dx
                    }
                };
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize { a, axis, norms } => {
                let mut dx = vec![0.0; dy.len()];
                let mut lane = 0;
                for_each_lane(out_shape, *axis, |base, len, inner| {
                    let n = norms[lane];
                    lane += 1;
                    if n <= L2_FLOOR {
                        for i in 0..len {
                            dx[base + i * inner] = dy[base + i * inner] / L2_FLOOR;
                        }
                        return;
                    }
                    let dot: f64 = (0..len).map(|i| dy[base + i * inner] * y[base + i * inner]).sum();
                    for i in 0..len {
                        let j = base + i * inner;
                        dx[j] = (dy[j] - y[j] * dot) / n;
                    }
                });
                self.accumulate(grads, *a, dx);
            }
            Op::Exp { a } => {
                self.accumulate(grads, *a, dy.iter().zip(y).map(|(g, v)| g * v).collect());
            }
            Op::Log { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, dy.iter().zip(x).map(|(g, v)| g / v).collect());
            }
            Op::Square { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, dy.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let dx = dy
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v < *lo || v > *hi { 0.0 } else { g })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
        }
        Ok(())
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0., 0.]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[3., 4.]));
        let n = g.l2_normalize(a, 0).unwrap();
        let v = g.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_numeric_fault() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.log(a), Err(Error::NumericFault { .. })));
        let b = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(b), Err(Error::NumericFault { .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 2], |i| i as f64));
        let s = g.sum_all(x).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn grad_of_softmax_sum_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -1.2, 2.0]));
        let s = g.softmax(x, 0).unwrap();
        let total = g.sum_all(s).unwrap();
        let gr = g.backward(total).unwrap();
        for v in gr.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn opaque_node_has_no_adjoint() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let o = g.opaque(Tensor::ones(&[2]), &[x]);
        let s = g.sum_all(o).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let d = g.stop_gradient(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum_all(p).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3, 1, 2]));
        let b = g.param(Tensor::zeros(&[4, 1]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 2]);
        let s = g.sum_all(y).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[4.0; 6]);
        assert_eq!(gr.get(b).unwrap().data(), &[6.0; 4]);
    }
}
