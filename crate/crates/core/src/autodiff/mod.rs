//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, which is a
//! topological order by construction. [`Graph::backward`] walks the tape
//! once in reverse, visiting every node exactly once. Each training step
//! owns its own graph; parameters enter as leaves that share the caller's
//! tensor buffers.

pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::math::{expf, lnf, sigmoidf, tanhf};
use crate::tensor::Tensor;

static BACKWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of backward passes run in this process so far.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.load(Ordering::SeqCst)
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    MatMulBt,
    Add,
    Sub,
    Mul,
    AddRow,
    MulScalar,
    Scale(f32),
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softmax,
    LayerNorm,
    Gather(Vec<usize>),
    CausalAttention { heads: usize },
    DilatedConv { dilation: usize },
    CrossEntropy(Vec<Option<usize>>),
    Concat,
    Slice { offset: usize, shape: Vec<usize> },
    Reshape(Vec<usize>),
    Sum,
    Mean,
    StopGrad,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulBt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    MulScalar {
        a: Var,
        s: Var,
    },
    Scale {
        a: Var,
        c: f32,
    },
    Relu {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        slope: f32,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
        floor: f32,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Var,
        kernel: usize,
        dilation: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        a: Var,
        offset: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    StopGrad,
    StraightThrough {
        soft: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recording of tensor operations that can be differentiated in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_calls: Cell<u32>,
}

/// Result of a backward pass: one gradient slot per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    visits: usize,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor; zeros when untouched.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    /// Node visits made by the reverse sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn acc_into(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    let s = slot(grads, v, g.len());
    for (a, b) in s.iter_mut().zip(g) {
        *a += b;
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

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Nodes that can receive a gradient.
    pub fn tracked_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.tracked).count()
    }

    /// Backward passes run on this graph.
    pub fn backward_calls(&self) -> u32 {
        self.backward_calls.get()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op: name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Generic dispatch by operation tag.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::contract(alloc::format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::MatMulBt => arity(2).and_then(|_| self.matmul_bt(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::AddRow => arity(2).and_then(|_| self.add_row(inputs[0], inputs[1])),
            OpKind::MulScalar => arity(2).and_then(|_| self.mul_scalar(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], *c)),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::LeakyRelu(s) => arity(1).and_then(|_| self.leaky_relu(inputs[0], *s)),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::LayerNorm => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2]))
            }
            OpKind::Gather(ids) => arity(1).and_then(|_| self.gather(inputs[0], ids)),
            OpKind::CausalAttention { heads } => arity(3)
                .and_then(|_| self.causal_attention(inputs[0], inputs[1], inputs[2], *heads)),
            OpKind::DilatedConv { dilation } => {
                arity(3).and_then(|_| self.dilated_conv(inputs[0], inputs[1], inputs[2], *dilation))
            }
            OpKind::CrossEntropy(t) => arity(1).and_then(|_| self.cross_entropy(inputs[0], t)),
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { offset, shape } => {
                arity(1).and_then(|_| self.slice(inputs[0], *offset, shape))
            }
            OpKind::Reshape(shape) => arity(1).and_then(|_| self.reshape(inputs[0], shape)),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::StopGrad => arity(1).and_then(|_| self.stop_grad(inputs[0])),
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `a[m,k] · b[k,n]`; a rank-1 `a` is treated as one row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = match self.value(b).shape() {
            [r, c] => (*r, *c),
            _ => return Err(mismatch("matmul", self.value(a), self.value(b))),
        };
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if self.value(a).rank() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, m, k, n },
            tracked,
            "matmul",
        )
    }

    /// `a[m,k] · b[n,k]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_bt")?;
        let (n, k2) = match self.value(b).shape() {
            [r, c] => (*r, *c),
            _ => return Err(mismatch("matmul_bt", self.value(a), self.value(b))),
        };
        if k != k2 {
            return Err(mismatch("matmul_bt", self.value(a), self.value(b)));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if self.value(a).rank() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMulBt { a, b, m, k, n },
            tracked,
            "matmul_bt",
        )
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let tracked = self.tracked_any(&[a, b]);
        self.push(value, op, tracked, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, cols) = ta.as_matrix();
        if tb.numel() != cols || tb.rank() != 1 {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.to_vec();
        kernels::add_row_inplace(&mut data, tb.data());
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let tracked = self.tracked_any(&[a, bias]);
        self.push(value, Op::AddRow { a, bias }, tracked, "add_row")
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.numel() != 1 {
            return Err(mismatch("mul_scalar", ta, ts));
        }
        let c = ts.item();
        let value = ta.map(|x| x * c);
        let tracked = self.tracked_any(&[a, s]);
        self.push(value, Op::MulScalar { a, s }, tracked, "mul_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let tracked = self.is_tracked(a);
        self.push(value, Op::Scale { a, c }, tracked, "scale")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let tracked = self.is_tracked(a);
        self.push(value, op, tracked, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        self.unary(
            a,
            "leaky_relu",
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu { a, slope },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoidf, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", tanhf, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", expf, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", lnf, Op::Log { a, floor: 0.0 })
    }

    /// `ln(max(x, floor))`; clamped elements receive no gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f32) -> Result<Var> {
        self.unary(a, "log", move |x| lnf(x.max(floor)), Op::Log { a, floor })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, cols) = ta.as_matrix();
        let value = Tensor::from_parts(ta.shape().to_vec(), kernels::softmax_rows(ta.data(), cols));
        let tracked = self.is_tracked(a);
        self.push(value, Op::Softmax { a, cols }, tracked, "softmax")
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, cols) = tx.as_matrix();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let (out, xhat, rstd) = kernels::layer_norm(tx.data(), tg.data(), tb.data(), cols);
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let tracked = self.tracked_any(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
            "layer_norm",
        )
    }

    /// Rows of `table[v, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = match tt.shape() {
            [r, c] => (*r, *c),
            _ => return Err(mismatch("gather", tt, tt)),
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IdOutOfRange { id, n_items: rows });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        let tracked = self.is_tracked(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
            "gather",
        )
    }

    /// Causal multi-head attention over `[t, d]` query/key/value rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(mismatch("causal_attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(mismatch("causal_attention", tq, tv));
        }
        let (t, d) = match tq.shape() {
            [t, d] => (*t, *d),
            _ => return Err(mismatch("causal_attention", tq, tk)),
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(alloc::format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let (out, probs) = kernels::causal_attention(tq.data(), tk.data(), tv.data(), t, d, heads);
        let value = Tensor::from_parts(vec![t, d], out);
        let tracked = self.tracked_any(&[q, k, v]);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            tracked,
            "causal_attention",
        )
    }

    /// Dilated causal convolution: `x[t, cin]`, `w[kernel, cin, cout]`, `bias[cout]`.
    pub fn dilated_conv(&mut self, x: Var, w: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let (t, cin) = match tx.shape() {
            [t, c] => (*t, *c),
            _ => return Err(mismatch("dilated_conv", tx, tw)),
        };
        let (kernel, cout) = match tw.shape() {
            [k, ci, co] if *ci == cin => (*k, *co),
            _ => return Err(mismatch("dilated_conv", tx, tw)),
        };
        if tb.numel() != cout {
            return Err(mismatch("dilated_conv", tw, tb));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be positive"));
        }
        let out = kernels::dilated_causal_conv(
            tx.data(),
            tw.data(),
            tb.data(),
            t,
            cin,
            cout,
            kernel,
            dilation,
        );
        let value = Tensor::from_parts(vec![t, cout], out);
        let tracked = self.tracked_any(&[x, w, bias]);
        self.push(
            value,
            Op::Conv {
                x,
                w,
                bias,
                kernel,
                dilation,
            },
            tracked,
            "dilated_conv",
        )
    }

    /// Mean next-item cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.as_matrix();
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0f32; rows * cols];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= cols {
                return Err(Error::IdOutOfRange {
                    id: t,
                    n_items: cols,
                });
            }
            let row = tl.row(r);
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
            let mut rest = 0.0f64;
            let prow = &mut probs[r * cols..(r + 1) * cols];
            for (i, &v) in row.iter().enumerate() {
                let e = crate::math::exp((v - max) as f64);
                prow[i] = e as f32;
                if i != arg {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for p in prow.iter_mut() {
                *p = (*p as f64 / denom) as f32;
            }
            total += (max - row[t]) as f64 + crate::math::ln_1p(rest);
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let value = Tensor::scalar(loss as f32);
        let tracked = self.is_tracked(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            tracked,
            "cross_entropy",
        )
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let tail: Vec<usize> = self.value(*first).shape().iter().skip(1).copied().collect();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.value(*first), t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let tracked = self.tracked_any(parts);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            tracked,
            "concat",
        )
    }

    /// Contiguous flat range of `a` starting at `offset`, viewed as `shape`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let len: usize = shape.iter().product();
        if offset + len > ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = ta.data()[offset..offset + len].to_vec();
        let tracked = self.is_tracked(a);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Slice { a, offset },
            tracked,
            "slice",
        )
    }

    /// Row `r` of a matrix as a rank-1 tensor.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (_, cols) = self.value(a).as_matrix();
        self.slice(a, r * cols, &[cols])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let tracked = self.is_tracked(a);
        self.push(value, Op::Reshape { a }, tracked, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let tracked = self.is_tracked(a);
        self.push(Tensor::scalar(s as f32), Op::Sum { a }, tracked, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel().max(1) as f64;
        let tracked = self.is_tracked(a);
        self.push(Tensor::scalar(s as f32), Op::Mean { a }, tracked, "mean")
    }

    /// Same value, no gradient path.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false, "stop_grad")
    }

    /// Straight-through composite `hard + soft - sg(soft)`: the forward
    /// value is exactly `hard`, the gradient flows to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(mismatch("straight_through", &hard, self.value(soft)));
        }
        let tracked = self.is_tracked(soft);
        self.push(
            hard,
            Op::StraightThrough { soft },
            tracked,
            "straight_through",
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::full(t.shape(), 1.0))])
    }

    /// Vector-Jacobian product seeded with explicit output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        BACKWARD_PASSES.fetch_add(1, Ordering::SeqCst);
        self.backward_calls.set(self.backward_calls.get() + 1);
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(mismatch("backward seed", self.value(*v), g));
            }
            if self.is_tracked(*v) {
                acc_into(&mut grads, *v, g.data());
            }
        }
        let mut visits = 0;
        for i in (0..n).rev() {
            visits += 1;
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.node_backward(i, g, before);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }

    fn node_backward(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul { a, b, m, k, n } => {
                if tracked(*a) {
                    let da = kernels::matmul_bt(g, val(*b), *m, *n, *k);
                    acc_into(grads, *a, &da);
                }
                if tracked(*b) {
                    let av = val(*a);
                    kernels::matmul_at_acc(av, g, *m, *k, *n, slot(grads, *b, k * n));
                }
            }
            Op::MatMulBt { a, b, m, k, n } => {
                if tracked(*a) {
                    let da = kernels::matmul(g, val(*b), *m, *n, *k);
                    acc_into(grads, *a, &da);
                }
                if tracked(*b) {
                    let av = val(*a);
                    kernels::matmul_at_acc(g, av, *m, *n, *k, slot(grads, *b, n * k));
                }
            }
            Op::Add { a, b } => {
                if tracked(*a) {
                    acc_into(grads, *a, g);
                }
                if tracked(*b) {
                    acc_into(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if tracked(*a) {
                    acc_into(grads, *a, g);
                }
                if tracked(*b) {
                    let s = slot(grads, *b, g.len());
                    for (x, y) in s.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul { a, b } => {
                if tracked(*a) {
                    let bv = val(*b);
                    let s = slot(grads, *a, g.len());
                    for ((x, y), z) in s.iter_mut().zip(g).zip(bv) {
                        *x += y * z;
                    }
                }
                if tracked(*b) {
                    let av = val(*a);
                    let s = slot(grads, *b, g.len());
                    for ((x, y), z) in s.iter_mut().zip(g).zip(av) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if tracked(*a) {
                    acc_into(grads, *a, g);
                }
                if tracked(*bias) {
                    let cols = self.nodes[bias.0].value.numel();
                    let s = slot(grads, *bias, cols);
                    for row in g.chunks_exact(cols) {
                        for (x, y) in s.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulScalar { a, s } => {
                if tracked(*a) {
                    let c = val(*s)[0];
                    let sl = slot(grads, *a, g.len());
                    for (x, y) in sl.iter_mut().zip(g) {
                        *x += y * c;
                    }
                }
                if tracked(*s) {
                    let dot: f32 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::Scale { a, c } => {
                let sl = slot(grads, *a, g.len());
                for (x, y) in sl.iter_mut().zip(g) {
                    *x += y * c;
                }
            }
            Op::Relu { a } => {
                let av = val(*a);
                let sl = slot(grads, *a, g.len());
                for ((x, y), z) in sl.iter_mut().zip(g).zip(av) {
                    if *z > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let av = val(*a);
                let sl = slot(grads, *a, g.len());
                for ((x, y), z) in sl.iter_mut().zip(g).zip(av) {
                    *x += if *z > 0.0 { *y } else { y * slope };
                }
            }
            Op::Sigmoid { a } => {
                let out = node.value.data();
                let sl = slot(grads, *a, g.len());
                for ((x, y), o) in sl.iter_mut().zip(g).zip(out) {
                    *x += y * o * (1.0 - o);
                }
            }
            Op::Tanh { a } => {
                let out = node.value.data();
                let sl = slot(grads, *a, g.len());
                for ((x, y), o) in sl.iter_mut().zip(g).zip(out) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::Exp { a } => {
                let out = node.value.data();
                let sl = slot(grads, *a, g.len());
                for ((x, y), o) in sl.iter_mut().zip(g).zip(out) {
                    *x += y * o;
                }
            }
            Op::Log { a, floor } => {
                let av = val(*a);
                let sl = slot(grads, *a, g.len());
                for ((x, y), z) in sl.iter_mut().zip(g).zip(av) {
                    if *z >= *floor {
                        *x += y / z;
                    }
                }
            }
            Op::Softmax { a, cols } => {
                let out = node.value.data();
                let sl = slot(grads, *a, g.len());
                for ((srow, grow), orow) in sl
                    .chunks_exact_mut(*cols)
                    .zip(g.chunks_exact(*cols))
                    .zip(out.chunks_exact(*cols))
                {
                    let inner: f32 = grow.iter().zip(orow).map(|(x, y)| x * y).sum();
                    for ((s, gg), o) in srow.iter_mut().zip(grow).zip(orow) {
                        *s += o * (gg - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.nodes[gamma.0].value.numel();
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, val(*gamma), cols);
                if tracked(*x) {
                    acc_into(grads, *x, &dx);
                }
                if tracked(*gamma) {
                    acc_into(grads, *gamma, &dg);
                }
                if tracked(*beta) {
                    acc_into(grads, *beta, &db);
                }
            }
            Op::Gather { table, ids } => {
                let tt = &self.nodes[table.0].value;
                let d = tt.shape()[1];
                let sl = slot(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in sl[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                    {
                        *x += y;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = node.value.shape();
                let (t, d) = (shape[0], shape[1]);
                let (dq, dk, dv) = kernels::causal_attention_backward(
                    g,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    t,
                    d,
                    *heads,
                );
                if tracked(*q) {
                    acc_into(grads, *q, &dq);
                }
                if tracked(*k) {
                    acc_into(grads, *k, &dk);
                }
                if tracked(*v) {
                    acc_into(grads, *v, &dv);
                }
            }
            Op::Conv {
                x,
                w,
                bias,
                kernel,
                dilation,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (t, cin) = (xs[0], xs[1]);
                let cout = self.nodes[bias.0].value.numel();
                let (dx, dw, db) = kernels::dilated_causal_conv_backward(
                    g,
                    val(*x),
                    val(*w),
                    t,
                    cin,
                    cout,
                    *kernel,
                    *dilation,
                );
                if tracked(*x) {
                    acc_into(grads, *x, &dx);
                }
                if tracked(*w) {
                    acc_into(grads, *w, &dw);
                }
                if tracked(*bias) {
                    acc_into(grads, *bias, &db);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let cols = probs.len() / targets.len().max(1);
                let scale = g[0] / *count as f32;
                let sl = slot(grads, *logits, probs.len());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let prow = &probs[r * cols..(r + 1) * cols];
                    let srow = &mut sl[r * cols..(r + 1) * cols];
                    for (s, p) in srow.iter_mut().zip(prow) {
                        *s += scale * p;
                    }
                    srow[t] -= scale;
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if tracked(*p) {
                        acc_into(grads, *p, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Slice { a, offset } => {
                let n = self.nodes[a.0].value.numel();
                let sl = slot(grads, *a, n);
                for (x, y) in sl[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::Reshape { a } => acc_into(grads, *a, g),
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                let sl = slot(grads, *a, n);
                for x in sl.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.numel();
                let c = g[0] / n as f32;
                let sl = slot(grads, *a, n);
                for x in sl.iter_mut() {
                    *x += c;
                }
            }
            Op::StraightThrough { soft } => acc_into(grads, *soft, g),
        }
    }
}

impl core::fmt::Debug for Graph {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

#[cfg(test)]
mod tests;
