use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{numel_of, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful on the tape (and generation) that created it;
/// using it elsewhere is reported as a usage error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Log,
    Exp,
    Sqrt,
    Abs,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `b` is either one element or matches a trailing suffix of `a`'s shape.
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f32,
    },
    AddScalar {
        a: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(f64, f64)>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    RepeatLeading {
        a: usize,
        count: usize,
    },
}

/// Records operations in creation order and replays them in reverse to
/// compute gradients.
///
/// Node `i` produces value `i`, so the value list is topologically ordered by
/// construction. A tape created with [`Tape::inference`] evaluates the same
/// forward math without recording anything for backward.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    record: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Self {
            id: fresh_id(),
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            record,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Drops every recorded value. Vars handed out before the reset become
    /// invalid.
    pub fn reset(&mut self) {
        self.id = fresh_id();
        self.values.clear();
        self.ops.clear();
        self.needs_grad.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.values.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.values[v.index]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.value(v).data()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.value(v).grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        self.values[v.index].grad.take()
    }

    fn push(
        &mut self,
        op: Op,
        tensor: Tensor,
        inputs: &[usize],
        name: &'static str,
    ) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs = self.record
            && match op {
                Op::Leaf => tensor.requires_grad(),
                _ => inputs.iter().any(|&i| self.needs_grad[i]),
            };
        let op = if self.record { op } else { Op::Leaf };
        self.values.push(tensor);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Ok(Var {
            tape: self.id,
            index: self.values.len() - 1,
        })
    }

    fn make(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[usize],
        name: &'static str,
    ) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(op, t, inputs, name)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(Op::Leaf, tensor, &[], "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// A gradient-free copy of `a`.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let t = Tensor::new(
            self.values[a].shape().to_vec(),
            self.values[a].data().to_vec(),
        )?;
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.values[ai].data(), self.values[bi].data(), m, k, n);
        self.make(
            Op::MatMul {
                a: ai,
                b: bi,
                m,
                k,
                n,
            },
            vec![m, n],
            out,
            &[ai, bi],
            "matmul",
        )
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.values[ai].data(), self.values[bi].data());
        let mut out = Vec::with_capacity(batch * m * n);
        for t in 0..batch {
            out.extend(kernels::matmul(
                &da[t * m * k..(t + 1) * m * k],
                &db[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        self.make(
            Op::BatchMatMul {
                a: ai,
                b: bi,
                batch,
                m,
                k,
                n,
            },
            vec![batch, m, n],
            out,
            &[ai, bi],
            "bmm",
        )
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.values[ai], &self.values[bi]);
        let (sa, sb) = (ta.shape(), tb.shape());
        let ok = sa == sb
            || tb.numel() == 1
            || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(Error::Shape {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let nb = tb.numel();
        let (da, db) = (ta.data(), tb.data());
        let f: fn(f32, f32) -> f32 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let out: Vec<f32> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect();
        let shape = sa.to_vec();
        self.make(
            Op::Binary { kind, a: ai, b: bi },
            shape,
            out,
            &[ai, bi],
            name,
        )
    }

    /// Elementwise sum. `b` may be a one-element tensor or a bias whose shape
    /// is a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.values[ai];
        let out = t.data().iter().map(|&x| x * factor).collect();
        self.make(
            Op::Scale { a: ai, factor },
            t.shape().to_vec(),
            out,
            &[ai],
            "scale",
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.values[ai];
        let out = t.data().iter().map(|&x| x + c).collect();
        self.make(
            Op::AddScalar { a: ai },
            t.shape().to_vec(),
            out,
            &[ai],
            "add_scalar",
        )
    }

    fn unary(&mut self, kind: UnaryKind, a: Var, name: &'static str) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.values[ai];
        let out = t
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Log => (x as f64).ln() as f32,
                UnaryKind::Exp => (x as f64).exp() as f32,
                UnaryKind::Sqrt => (x as f64).sqrt() as f32,
                UnaryKind::Abs => x.abs(),
                UnaryKind::Gelu => kernels::gelu(x as f64) as f32,
            })
            .collect();
        self.make(
            Op::Unary { kind, a: ai },
            t.shape().to_vec(),
            out,
            &[ai],
            name,
        )
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a, "neg")
    }

    /// Natural log; nonpositive input is reported as a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a, "exp")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a, "sqrt")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a, "abs")
    }

    /// GELU, exact erf form `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a, "gelu")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s: f64 = self.values[ai].data().iter().map(|&x| x as f64).sum();
        self.make(Op::Sum { a: ai }, vec![1], vec![s as f32], &[ai], "sum")
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.values[ai];
        let s: f64 = t.data().iter().map(|&x| x as f64).sum();
        let m = s / t.numel() as f64;
        self.make(Op::Mean { a: ai }, vec![1], vec![m as f32], &[ai], "mean")
    }

    /// Sums out one axis. Reducing a rank-1 tensor gives shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let shape = self.values[ai].shape().to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = kernels::axis_extents(&shape, axis);
        let x = self.values[ai].data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len)
                    .map(|j| x[o * len * inner + j * inner + i] as f64)
                    .sum();
                out[o * inner + i] = s as f32;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.make(
            Op::SumAxis { a: ai, axis },
            out_shape,
            out,
            &[ai],
            "sum_axis",
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let shape = self.values[ai].shape().to_vec();
        check_axis("softmax", &shape, axis)?;
        let out = kernels::softmax(self.values[ai].data(), &shape, axis, false);
        self.make(Op::Softmax { a: ai, axis }, shape, out, &[ai], "softmax")
    }

    /// `x − logsumexp(x)` along `axis`, computed without forming `log(softmax)`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let shape = self.values[ai].shape().to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let out = kernels::softmax(self.values[ai].data(), &shape, axis, true);
        self.make(
            Op::LogSoftmax { a: ai, axis },
            shape,
            out,
            &[ai],
            "log_softmax",
        )
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.values[xi].shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        for p in [gi, bi] {
            let sp = self.values[p].shape();
            if sp != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: sp.to_vec(),
                });
            }
        }
        let xd = self.values[xi].data();
        let stats = kernels::layer_norm_stats(xd, d, eps as f64);
        let (g, b) = (self.values[gi].data(), self.values[bi].data());
        let mut out = Vec::with_capacity(xd.len());
        for (row, &(mean, rstd)) in xd.chunks_exact(d).zip(&stats) {
            for j in 0..d {
                let xhat = (row[j] as f64 - mean) * rstd;
                out.push((xhat * g[j] as f64 + b[j] as f64) as f32);
            }
        }
        self.make(
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                stats,
            },
            shape,
            out,
            &[xi, gi, bi],
            "layer_norm",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let t = &self.values[ai];
        if numel_of(shape) != t.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.make(
            Op::Reshape { a: ai },
            shape.to_vec(),
            data,
            &[ai],
            "reshape",
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`. The result is
    /// materialized.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let shape = self.values[ai].shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let out = kernels::permute(self.values[ai].data(), &shape, axes);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        self.make(
            Op::Permute {
                a: ai,
                axes: axes.to_vec(),
            },
            out_shape,
            out,
            &[ai],
            "permute",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let base = self.values[first].shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &i in &idx {
            let s = self.values[i].shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let len = self.values[i].shape()[axis];
                out.extend_from_slice(
                    &self.values[i].data()[o * len * inner..(o + 1) * len * inner],
                );
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.make(
            Op::Concat {
                inputs: idx.clone(),
                axis,
            },
            shape,
            out,
            &idx,
            "concat",
        )
    }

    /// The slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let shape = self.values[ai].shape().to_vec();
        check_axis("narrow", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (outer, full, inner) = kernels::axis_extents(&shape, axis);
        let x = self.values[ai].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.make(
            Op::Narrow { a: ai, axis, start },
            out_shape,
            out,
            &[ai],
            "narrow",
        )
    }

    /// Stacks `count` copies of `a` along a new leading axis.
    pub fn repeat_leading(&mut self, a: Var, count: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        if count == 0 {
            return Err(Error::Usage("repeat count must be positive".into()));
        }
        let t = &self.values[ai];
        let mut shape = vec![count];
        shape.extend_from_slice(t.shape());
        let out = t.data().repeat(count);
        self.make(
            Op::RepeatLeading { a: ai, count },
            shape,
            out,
            &[ai],
            "repeat_leading",
        )
    }

    /// Populates the gradient of every leaf that requires one.
    ///
    /// Leaves the loss does not reach receive a zero gradient. A tape supports
    /// a single backward pass; call [`Tape::reset`] before recording again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::Usage(
                "backward on a tape created without recording".into(),
            ));
        }
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let li = self.idx(loss)?;
        if self.values[li].numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.values[li].shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(li + 1, || None);
        grads[li] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f32>)> = Vec::new();

        for i in (0..=li).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut leaf_grads);
        }

        for (i, g) in leaf_grads {
            self.values[i].grad = Some(g);
        }
        for (i, t) in self.values.iter_mut().enumerate() {
            if matches!(self.ops[i], Op::Leaf) && t.requires_grad() && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        leaf_grads: &mut Vec<(usize, Vec<f32>)>,
    ) {
        let needs = |j: usize| self.needs_grad[j];
        let val = |j: usize| self.values[j].data();
        let mut send = |j: usize, delta: Vec<f32>| accumulate(&mut grads[j], delta);

        match &self.ops[i] {
            Op::Leaf => leaf_grads.push((i, g)),
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    send(a, kernels::matmul_rhs_t(&g, val(b), m, k, n));
                }
                if needs(b) {
                    send(b, kernels::matmul_lhs_t(val(a), &g, m, k, n));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (da, db) = (val(a), val(b));
                if needs(a) {
                    let mut ga = Vec::with_capacity(batch * m * k);
                    for t in 0..batch {
                        ga.extend(kernels::matmul_rhs_t(
                            &g[t * m * n..(t + 1) * m * n],
                            &db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    send(a, ga);
                }
                if needs(b) {
                    let mut gb = Vec::with_capacity(batch * k * n);
                    for t in 0..batch {
                        gb.extend(kernels::matmul_lhs_t(
                            &da[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    send(b, gb);
                }
            }
            &Op::Binary { kind, a, b } => {
                let (da, db) = (val(a), val(b));
                let nb = db.len();
                if needs(a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(e, &gv)| gv * db[e % nb])
                            .collect(),
                        BinaryKind::Div => g
                            .iter()
                            .enumerate()
                            .map(|(e, &gv)| gv / db[e % nb])
                            .collect(),
                    };
                    send(a, ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0f64; nb];
                    for (e, &gv) in g.iter().enumerate() {
                        let j = e % nb;
                        let gv = gv as f64;
                        gb[j] += match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * da[e] as f64,
                            BinaryKind::Div => -gv * da[e] as f64 / (db[j] as f64 * db[j] as f64),
                        };
                    }
                    send(b, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            &Op::Scale { a, factor } => send(a, g.iter().map(|&v| v * factor).collect()),
            &Op::AddScalar { a } => send(a, g),
            &Op::Unary { kind, a } => {
                let x = val(a);
                let y = self.values[i].data();
                let ga = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| match kind {
                        UnaryKind::Neg => -gv,
                        UnaryKind::Log => gv / xv,
                        UnaryKind::Exp => gv * yv,
                        UnaryKind::Sqrt => gv / (2.0 * yv),
                        UnaryKind::Abs => gv * sign(xv),
                        UnaryKind::Gelu => (gv as f64 * kernels::gelu_grad(xv as f64)) as f32,
                    })
                    .collect();
                send(a, ga);
            }
            &Op::Sum { a } => send(a, vec![g[0]; val(a).len()]),
            &Op::Mean { a } => {
                let n = val(a).len();
                send(a, vec![(g[0] as f64 / n as f64) as f32; n]);
            }
            &Op::SumAxis { a, axis } => {
                let shape = self.values[a].shape();
                let (outer, len, inner) = kernels::axis_extents(shape, axis);
                let mut ga = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for k in 0..inner {
                            ga[o * len * inner + j * inner + k] = g[o * inner + k];
                        }
                    }
                }
                send(a, ga);
            }
            &Op::Softmax { a, axis } => {
                let y = self.values[i].data();
                send(
                    a,
                    kernels::softmax_backward(y, &g, self.values[i].shape(), axis),
                );
            }
            &Op::LogSoftmax { a, axis } => {
                let y = self.values[i].data();
                send(
                    a,
                    kernels::log_softmax_backward(y, &g, self.values[i].shape(), axis),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xd = val(x);
                let gm = val(gamma);
                let d = gm.len();
                let mut g_gamma = vec![0.0f64; d];
                let mut g_beta = vec![0.0f64; d];
                let mut gx = Vec::with_capacity(xd.len());
                let mut xhat = vec![0.0f64; d];
                let mut gxhat = vec![0.0f64; d];
                for ((row, grow), &(mean, rstd)) in
                    xd.chunks_exact(d).zip(g.chunks_exact(d)).zip(stats)
                {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        xhat[j] = (row[j] as f64 - mean) * rstd;
                        gxhat[j] = grow[j] as f64 * gm[j] as f64;
                        g_gamma[j] += grow[j] as f64 * xhat[j];
                        g_beta[j] += grow[j] as f64;
                        m1 += gxhat[j];
                        m2 += gxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx.push((rstd * (gxhat[j] - m1 - xhat[j] * m2)) as f32);
                    }
                }
                if needs(x) {
                    send(x, gx);
                }
                if needs(gamma) {
                    send(gamma, g_gamma.into_iter().map(|v| v as f32).collect());
                }
                if needs(beta) {
                    send(beta, g_beta.into_iter().map(|v| v as f32).collect());
                }
            }
            &Op::Reshape { a } => send(a, g),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inverse[ax] = pos;
                }
                send(*a, kernels::permute(&g, self.values[i].shape(), &inverse));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.values[i].shape();
                let (outer, total, inner) = kernels::axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &p in inputs {
                    let len = self.values[p].shape()[*axis];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let in_shape = self.values[a].shape();
                let (outer, full, inner) = kernels::axis_extents(in_shape, axis);
                let len = self.values[i].shape()[axis];
                let mut ga = vec![0.0f32; outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    ga[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(a, ga);
            }
            &Op::RepeatLeading { a, count } => {
                let n = val(a).len();
                let mut acc = vec![0.0f64; n];
                for c in 0..count {
                    for (s, &gv) in acc.iter_mut().zip(&g[c * n..(c + 1) * n]) {
                        *s += gv as f64;
                    }
                }
                send(a, acc.into_iter().map(|v| v as f32).collect());
            }
        }
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        None => *slot = Some(delta),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Naive triple loop in f64, independent of the kernel's loop order.
    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k)
                    .map(|p| a[i * k + p] as f64 * b[p * n + j] as f64)
                    .sum::<f64>() as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let expected = naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(tape.data(c), expected.as_slice());
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = tape.constant(t(&[2, 2], &[0.3, -1.5, 2.25, 7.0])).unwrap();
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.data(c), &[0.3, -1.5, 2.25, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let s = tape.softmax(z, 0).unwrap();
        for &p in tape.data(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        // exp(k)/Σexp(j) evaluated in f64 (independent of max subtraction)
        let denom: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let oracle: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / denom).collect();
        for (p, (o, frozen)) in tape
            .data(s)
            .iter()
            .zip(oracle.iter().zip([0.09003, 0.24473, 0.66524]))
        {
            assert!((*p as f64 - o).abs() < 1e-6);
            assert!((*p as f64 - frozen).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_normalized_on_axis0() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[2, 3], &[0.5, -2.0, 1.0, 3.0, 0.0, -1.0]))
            .unwrap();
        let shifted = tape.add_scalar(x, 40.0).unwrap();
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(shifted, 0).unwrap();
        for (p, q) in tape.data(a).iter().zip(tape.data(b)) {
            assert!((p - q).abs() < 1e-6);
        }
        let d = tape.data(a);
        for col in 0..3 {
            assert!((d[col] + d[3 + col] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 10.0, 1.0])).unwrap();
        let y = tape.gelu(x).unwrap();
        let d = tape.data(y);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-6);
        // Φ(1) = 0.5·(1+erf(1/√2)), erf(1/√2) = 0.682689492137086
        let oracle = 0.5 * (1.0 + 0.682_689_492_137_086_f64);
        assert!((d[2] as f64 - oracle).abs() < 1e-6);
        assert!((d[2] - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let g = tape.constant(t(&[3], &[1.0; 3])).unwrap();
        let b = tape.constant(t(&[3], &[0.0; 3])).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        // mean 2, population variance 2/3
        let s = (2.0f64 / 3.0).sqrt();
        let oracle = [-1.0 / s, 0.0, 1.0 / s];
        for (v, o) in tape.data(y).iter().zip(oracle) {
            assert!((*v as f64 - o).abs() < 1e-6);
        }
        assert!((tape.data(y)[0] + 1.22474).abs() < 1e-4);

        let c = tape
            .constant(t(&[2, 3], &[4.0, 4.0, 4.0, -1.0, -1.0, -1.0]))
            .unwrap();
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_output_mean_is_beta_mean() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[2, 4], &[0.1, 5.0, -3.0, 2.0, 1.0, 1.5, 0.0, -7.0]))
            .unwrap();
        let g = tape.constant(t(&[4], &[1.0; 4])).unwrap();
        let b = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.3])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let beta_mean = (0.5 - 1.0 + 2.0 + 0.3) / 4.0;
        for row in tape.data(y).chunks(4) {
            let m: f32 = row.iter().sum::<f32>() / 4.0;
            assert!((m - beta_mean).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_variance_without_eps_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let g = tape.constant(t(&[2], &[1.0; 2])).unwrap();
        let b = tape.constant(t(&[2], &[0.0; 2])).unwrap();
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn add_zero_and_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[2.0, 4.0, 6.0])).unwrap();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.data(y), &[2.0, 4.0, 6.0]);
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.data(m), &[4.0]);
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]).unwrap()).unwrap();
        let bias = tape.constant(Tensor::zeros(&[4]).unwrap()).unwrap();
        let plane = tape.constant(Tensor::zeros(&[3, 4]).unwrap()).unwrap();
        let bad = tape.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(tape.add(x, bias).is_ok());
        assert!(tape.add(x, plane).is_ok());
        assert!(matches!(tape.add(x, bad), Err(Error::Shape { .. })));
        assert!(tape.add(bias, x).is_err());
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[3.0e38])).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reshape_and_transpose_preserve_elements() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let r = tape.reshape(x, &[3, 2]).unwrap();
        let tr = tape.transpose(x).unwrap();
        let mut a = tape.data(r).to_vec();
        let mut b = tape.data(tr).to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        assert_eq!(tape.shape(tr), &[3, 2]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape
            .constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]))
            .unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.data(c),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let back = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]))
            .unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum_is_2x_and_paths_accumulate() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 0.25];
        let x = tape.param(t(&[3], &data)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        let expected: Vec<f32> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), expected.as_slice());

        // x used on two separate paths: d/dx (sum(3x) + sum(x)) = 4
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &data)).unwrap();
        let a = tape.scale(x, 3.0).unwrap();
        let sa = tape.sum(a).unwrap();
        let sb = tape.sum(x).unwrap();
        let l = tape.add(sa, sb).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 3]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad_and_frozen_gets_none() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let frozen = tape.constant(t(&[2], &[5.0, 6.0])).unwrap();
        let y = tape.mul(x, frozen).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[1.0])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
        tape.reset();
        let x = tape.param(t(&[1], &[1.0])).unwrap();
        let s = tape.sum(x).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn stale_var_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[1.0])).unwrap();
        tape.reset();
        assert!(matches!(tape.sum(x), Err(Error::Usage(_))));
    }

    #[test]
    fn inference_tape_matches_recording_values() {
        let x = t(&[2, 3], &[0.3, -0.1, 2.0, 1.0, 1.0, -4.0]);
        let w = t(&[3, 2], &[0.5, 0.1, -0.2, 0.7, 1.1, -0.9]);
        let run = |tape: &mut Tape| {
            let a = tape.param(x.clone()).unwrap();
            let b = tape.param(w.clone()).unwrap();
            let c = tape.matmul(a, b).unwrap();
            let g = tape.gelu(c).unwrap();
            tape.data(g).to_vec()
        };
        let mut rec = Tape::new();
        let mut inf = Tape::inference();
        assert_eq!(run(&mut rec), run(&mut inf));
        let v = inf.constant(Tensor::scalar(1.0)).unwrap();
        assert!(inf.backward(v).is_err());
    }
}
