//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Leaf
//! values are constants, free inputs, or parameters borrowed from a
//! [`ParamStore`]; parameters are never copied into the tape. Calling
//! [`Graph::backward`] replays the tape in reverse and returns a
//! [`Gradients`] table keyed by node and by parameter.
//!
//! Broadcasting is deliberately narrow: a rank-2 right operand of
//! [`Graph::matmul`] is shared across leading dimensions, `*_row` ops
//! broadcast a vector over the last axis, and masks may be given per
//! `[batch, key]` and are then shared by every row of that batch entry.

use std::borrow::Cow;

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Mask, Tensor};
use crate::error::{Error, Result};

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Reshape {
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddConst {
        x: Var,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    ConcatLast {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    Softmax {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        seq: usize,
        width: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl Graph<'static> {
    /// A graph with no parameter store, for free-standing computations.
    pub fn standalone() -> Self {
        Graph::new(&EMPTY_STORE)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(p.value.data()),
            shape: p.value.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the trailing two axes.
    ///
    /// A rank-2 `b` is shared by every leading index of `a`; otherwise the
    /// leading dimensions of `a` and `b` must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let shared_b = sb.len() == 2;
        let lead = &sa[..sa.len() - 2];
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch = numel(lead);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = &av[bi * m * k..(bi + 1) * m * k];
            let bo = if shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
            let oo = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm_acc(ao, bo, oo, m, k, n);
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            let o = bi * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[o + c * rows + r] = xv[o + r * cols + c];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([cols, rows]);
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Transpose { x, batch, rows, cols }, rg))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("swap_axes12 needs rank 4, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x), dims);
        let rg = self.rg(x);
        Ok(self.push(out, vec![s[0], s[2], s[1], s[3]], Op::SwapAxes12 { x, dims }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// `[b, s, h*dh] -> [b, h, s, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "cannot split shape {s:?} into {heads} heads"
            )));
        }
        let r = self.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
        self.swap_axes12(r)
    }

    /// `[b, h, s, dh] -> [b, s, h*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("merge_heads needs rank 4, got {s:?}")));
        }
        let t = self.swap_axes12(x)?;
        self.reshape(t, &[s[0], s[2], s[1] * s[3]])
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let n = *sx.last().unwrap_or(&0);
        if sr.len() != 1 || sr[0] != n {
            return Err(Error::Shape {
                op,
                left: sx.to_vec(),
                right: sr.to_vec(),
            });
        }
        Ok(n)
    }

    /// `x + row`, with `row` broadcast over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_check("add_row", x, row)?;
        let rv = self.value(row);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, shape, Op::AddRow { x, row }, rg))
    }

    /// `x * row`, with `row` broadcast over every leading index.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_check("mul_row", x, row)?;
        let rv = self.value(row);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, shape, Op::MulRow { x, row }, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale { x, factor }, |v| v * factor)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddConst { x }, |v| v + c)
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, shape, Op::ScaleBy { x, s }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let s = self.sigmoid(x);
        self.mul(x, s).expect("same shape")
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![m], vec![1], Op::MeanAll(x), rg)
    }

    /// Mean over one axis; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!("axis {axis} out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::MeanAxis { x, outer, len, inner }, rg))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat_last",
                    left: s0.clone(),
                    right: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            out,
            shape,
            Op::ConcatLast {
                xs: xs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    // ---- model building blocks -------------------------------------------

    /// Row lookup into a `[vocab, width]` table; the result has shape
    /// `lead ++ [width]` where `numel(lead) == ids.len()`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || numel(lead) != ids.len() {
            return Err(Error::Dimension(format!(
                "gather: table {s:?} with {} ids into {lead:?}",
                ids.len()
            )));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            shape,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, with optional masking.
    ///
    /// Masked entries (false) act as `-inf` logits and come out as exact
    /// zeros. The mask either has the logits' shape or `[lead0, n]`, in which
    /// case it is shared by every row under the same leading index.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().expect("tensors have rank >= 1");
        let rows = numel(&s) / n;
        let rows_per_mask_row = match mask {
            None => 0,
            Some(m) if m.shape() == s.as_slice() => 1,
            Some(m) if m.shape().len() == 2 && m.shape()[0] == s[0] && m.shape()[1] == n => {
                rows / s[0]
            }
            Some(m) => {
                return Err(Error::Shape {
                    op: "softmax_rows mask",
                    left: s.clone(),
                    right: m.shape().to_vec(),
                })
            }
        };
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let keep = mask.map(|m| {
                let mr = r / rows_per_mask_row;
                &m.data()[mr * n..(mr + 1) * n]
            });
            let valid = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidMask { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    z += e;
                }
            }
            let inv = 1.0 / z;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, s, Op::Softmax { x }, rg))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain`, over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let n = self.row_check("rms_norm", x, gain)?;
        let xv = self.value(x);
        let gv = self.value(gain);
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                out[r * n + j] = row[j] * inv * gv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, shape, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Mean over the sequence axis of `[b, s, d]`, counting only positions
    /// whose `[b, s]` mask entry is true.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.shape() != &s[..2] {
            return Err(Error::Shape {
                op: "masked_mean_pool",
                left: s,
                right: mask.shape().to_vec(),
            });
        }
        let (b, seq, width) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let md = mask.data();
        let mut out = vec![0.0; b * width];
        for bi in 0..b {
            let count = md[bi * seq..(bi + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::InvalidMask { row: bi });
            }
            let o = &mut out[bi * width..(bi + 1) * width];
            for si in 0..seq {
                if md[bi * seq + si] {
                    let xr = &xv[(bi * seq + si) * width..(bi * seq + si + 1) * width];
                    o.iter_mut().zip(xr).for_each(|(a, &v)| *a += v);
                }
            }
            let inv = 1.0 / count as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            vec![b, width],
            Op::MaskedMeanPool {
                x,
                mask: md.to_vec(),
                seq,
                width,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[b, c]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Dimension(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[y];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Rank(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(id) = node.param {
                grads[i].get_or_insert_with(|| vec![0.0; node.value.len()]);
                params.push((id, Var(i)));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op, y: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        match op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (val(a), val(b));
                let boff = |bi: usize| if shared_b { 0 } else { bi * k * n };
                acc(a, &mut |da| {
                    // da += g · bᵀ
                    if shared_b {
                        let bt = transposed(&bv[..k * n], k, n);
                        gemm_acc(g, &bt, da, batch * m, n, k);
                        return;
                    }
                    for bi in 0..batch {
                        let bt = transposed(&bv[boff(bi)..boff(bi) + k * n], k, n);
                        let gr = &g[bi * m * n..(bi + 1) * m * n];
                        gemm_acc(gr, &bt, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                    }
                });
                acc(b, &mut |db| {
                    // db += aᵀ · g
                    if shared_b {
                        let at = transposed(av, batch * m, k);
                        gemm_acc(&at, g, db, k, batch * m, n);
                    } else {
                        for bi in 0..batch {
                            let at = transposed(&av[bi * m * k..(bi + 1) * m * k], m, k);
                            let gr = &g[bi * m * n..(bi + 1) * m * n];
                            gemm_acc(&at, gr, &mut db[bi * k * n..(bi + 1) * k * n], k, m, n);
                        }
                    }
                });
            }
            &Op::Transpose { x, batch, rows, cols } => acc(x, &mut |dx| {
                for bi in 0..batch {
                    let o = bi * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[o + r * cols + c] += g[o + c * rows + r];
                        }
                    }
                }
            }),
            &Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                acc(x, &mut |dx| add_into(dx, &back));
            }
            &Op::Reshape { x } | &Op::AddConst { x } => acc(x, &mut |dx| add_into(dx, g)),
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddRow { x, row } => {
                acc(x, &mut |d| add_into(d, g));
                acc(row, &mut |d| {
                    let n = d.len();
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            &Op::MulRow { x, row } => {
                let (xv, rv) = (val(x), val(row));
                let n = rv.len();
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * rv[i % n];
                    }
                });
                acc(row, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % n] += gv * xv[i];
                    }
                });
            }
            &Op::Scale { x, factor } => acc(x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * factor)
            }),
            &Op::ScaleBy { x, s } => {
                let c = val(s)[0];
                let xv = val(x);
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c));
                acc(s, &mut |d| d[0] += dot(g, xv));
            }
            &Op::Tanh(x) => acc(x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            &Op::Relu(x) => {
                let xv = val(x);
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            &Op::Exp(x) => acc(x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            }),
            &Op::SumAll(x) => acc(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::MeanAll(x) => acc(x, &mut |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }),
            &Op::MeanAxis { x, outer, len, inner } => acc(x, &mut |d| {
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            d[base + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            }),
            Op::ConcatLast { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    acc(x, &mut |d| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut d[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { table, ids, width } => acc(*table, &mut |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }),
            &Op::Softmax { x } => {
                let n = *nodes[x.0].shape.last().unwrap();
                acc(x, &mut |d| {
                    for r in 0..d.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (val(*x), val(*gain));
                let n = gv.len();
                acc(*x, &mut |d| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = (0..n).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let c = inv * inv * inv * s / n as f64;
                        for j in 0..n {
                            d[r * n + j] += inv * gv[j] * gr[j] - xr[j] * c;
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..n {
                            d[j] += g[r * n + j] * xv[r * n + j] * inv;
                        }
                    }
                });
            }
            Op::MaskedMeanPool { x, mask, seq, width } => acc(*x, &mut |d| {
                let b = mask.len() / seq;
                for bi in 0..b {
                    let m = &mask[bi * seq..(bi + 1) * seq];
                    let inv = 1.0 / m.iter().filter(|&&v| v).count() as f64;
                    let gr = &g[bi * width..(bi + 1) * width];
                    for (si, _) in m.iter().enumerate().filter(|(_, &v)| v) {
                        let o = (bi * seq + si) * width;
                        for j in 0..*width {
                            d[o + j] += gr[j] * inv;
                        }
                    }
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => acc(*logits, &mut |d| {
                let b = labels.len();
                let c = probs.len() / b;
                let s = g[0] / b as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let t = if j == label { 1.0 } else { 0.0 };
                        d[r * c + j] += s * (probs[r * c + j] - t);
                    }
                }
            }),
        }
    }
}

/// Gradients produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf node, if it was reachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter loaded into the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .map(|&(id, v)| (id, self.grads[v.0].as_deref().expect("populated in backward")))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.params() {
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(buf) => add_into(buf, g),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn transposed(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
///
/// Each output element accumulates its `k` products in order with fused
/// multiply-adds, so every code path (blocked, edge, with or without
/// AVX2/FMA) gives identical bits.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_acc_avx512(a, b, out, m, k, n) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_acc_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    gemm_acc_blocked(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_acc_avx512(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    const R: usize = 8;
    const C: usize = 16;
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (ap, op) = (a.as_ptr(), out.as_mut_ptr());
    let full_rows = m - m % R;
    let mut panel = vec![0.0f64; k * C];
    let mut j = 0;
    while j + C <= n {
        for p in 0..k {
            panel[p * C..(p + 1) * C].copy_from_slice(&b[p * n + j..p * n + j + C]);
        }
        let bp = panel.as_ptr();
        let mut i = 0;
        while i < full_rows {
            // SAFETY: rows i..i+R and columns j..j+C are in bounds (asserted above).
            unsafe {
                let mut acc = [[_mm512_setzero_pd(); 2]; R];
                for (r, row) in acc.iter_mut().enumerate() {
                    let o = op.add((i + r) * n + j);
                    *row = [_mm512_loadu_pd(o), _mm512_loadu_pd(o.add(8))];
                }
                for p in 0..k {
                    let bb = bp.add(p * C);
                    let (b0, b1) = (_mm512_loadu_pd(bb), _mm512_loadu_pd(bb.add(8)));
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = _mm512_set1_pd(*ap.add((i + r) * k + p));
                        row[0] = _mm512_fmadd_pd(av, b0, row[0]);
                        row[1] = _mm512_fmadd_pd(av, b1, row[1]);
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    let o = op.add((i + r) * n + j);
                    _mm512_storeu_pd(o, row[0]);
                    _mm512_storeu_pd(o.add(8), row[1]);
                }
            }
            i += R;
        }
        j += C;
    }
    for r in 0..m {
        let j0 = if r < full_rows { j } else { 0 };
        if j0 < n {
            gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n + j0..(r + 1) * n], n, j0);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_acc_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    const R: usize = GEMM_ROWS;
    const C: usize = GEMM_COLS;
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (ap, op) = (a.as_ptr(), out.as_mut_ptr());
    let full_rows = m - m % R;
    let mut panel = vec![0.0f64; k * C];
    let mut j = 0;
    while j + C <= n {
        for p in 0..k {
            panel[p * C..(p + 1) * C].copy_from_slice(&b[p * n + j..p * n + j + C]);
        }
        let bp = panel.as_ptr();
        let mut i = 0;
        while i < full_rows {
            // SAFETY: rows i..i+R and columns j..j+C are in bounds (asserted above).
            unsafe {
                let mut acc = [[_mm256_setzero_pd(); 2]; R];
                for (r, row) in acc.iter_mut().enumerate() {
                    let o = op.add((i + r) * n + j);
                    *row = [_mm256_loadu_pd(o), _mm256_loadu_pd(o.add(4))];
                }
                for p in 0..k {
                    let bb = bp.add(p * C);
                    let (b0, b1) = (_mm256_loadu_pd(bb), _mm256_loadu_pd(bb.add(4)));
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = _mm256_broadcast_sd(&*ap.add((i + r) * k + p));
                        row[0] = _mm256_fmadd_pd(av, b0, row[0]);
                        row[1] = _mm256_fmadd_pd(av, b1, row[1]);
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    let o = op.add((i + r) * n + j);
                    _mm256_storeu_pd(o, row[0]);
                    _mm256_storeu_pd(o.add(4), row[1]);
                }
            }
            i += R;
        }
        j += C;
    }
    for r in 0..m {
        let j0 = if r < full_rows { j } else { 0 };
        if j0 < n {
            gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n + j0..(r + 1) * n], n, j0);
        }
    }
}

const GEMM_ROWS: usize = 6;
const GEMM_COLS: usize = 8;

#[inline(always)]
fn gemm_acc_blocked(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const R: usize = GEMM_ROWS;
    const C: usize = GEMM_COLS;
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j + C <= n {
            let mut acc = [[0.0f64; C]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + C]);
            }
            for p in 0..k {
                let bb: &[f64; C] = b[p * n + j..p * n + j + C].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..C {
                        row[c] = av.mul_add(bb[c], row[c]);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(row);
            }
            j += C;
        }
        if j < n {
            for r in i..i + R {
                gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n + j..(r + 1) * n], n, j);
            }
        }
        i += R;
    }
    for r in i..m {
        gemm_row(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], n, 0);
    }
}

#[inline(always)]
fn gemm_row(arow: &[f64], b: &[f64], orow: &mut [f64], n: usize, j0: usize) {
    for (p, &ap) in arow.iter().enumerate() {
        let brow = &b[p * n + j0..(p + 1) * n];
        orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o = ap.mul_add(bv, *o));
    }
}

fn swap12(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * d;
                let dst = ((ai * c + ci) * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
