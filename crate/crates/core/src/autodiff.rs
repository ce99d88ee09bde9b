//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Nodes are stored in creation order, which is a valid topological order, so
//! [`Tape::backward`] walks the node list once in reverse.
//!
//! The op set is exactly what the encoder, head and losses need. Binary
//! elementwise ops broadcast only scalar-vs-tensor or same-shape operands.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local backward rule for [`Tape::custom_unary`]: given the input, the
/// forward output and the upstream gradient, return the input gradient.
pub type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Sum(Var),
    Reshape(Var),
    MaskMul { x: Var, mask: Vec<f64> },
    Mixout { w: Var, scaled_mask: Vec<f64> },
    Custom { x: Var, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An ordered record of operations that supports one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not influence
    /// the loss.
    pub fn get(&self, var: Var) -> Vec<f64> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[var.0]])
    }

    pub fn get_ref(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.dims().to_vec(),
        rhs: b.dims().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Splits `dims` around `axis` into (outer, axis length, inner).
fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(x.dims(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|j| (src[idx(j)] - max).exp()).sum();
            if log {
                let lse = sum.ln();
                for j in 0..n {
                    out[idx(j)] = src[idx(j)] - max - lse;
                }
            } else {
                for j in 0..n {
                    out[idx(j)] = (src[idx(j)] - max).exp() / sum;
                }
            }
        }
    }
    out
}

/// Softmax of a tensor along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    Tensor::new(x.dims(), softmax_forward(x, axis, false))
}

/// Log-softmax of a tensor along `axis`.
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    Tensor::new(x.dims(), softmax_forward(x, axis, true))
}

fn check_axis(x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::Shape {
            op: "softmax",
            lhs: x.dims().to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.dims()[1] != bv.dims()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        let out = Tensor::new(&[m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() == bv.dims() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(av.dims(), data)
        } else if bv.numel() == 1 {
            let s = bv.data()[0];
            Tensor::new(av.dims(), av.data().iter().map(|x| f(*x, s)).collect())
        } else if av.numel() == 1 {
            let s = av.data()[0];
            Tensor::new(bv.dims(), bv.data().iter().map(|y| f(s, *y)).collect())
        } else {
            Err(shape_err(name, av, bv))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.dims(), xv.data().iter().map(|v| v * factor).collect())
            .expect("same dims");
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Adds a rank-1 bias `[n]` to every row of `x[.. × n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.dims().last().unwrap_or(&1);
        if bv.rank() != 1 || bv.dims()[0] != n || xv.rank() == 0 {
            return Err(shape_err("add_row_bias", xv, bv));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(xv.dims(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.dims(), xv.data().iter().map(|v| v.tanh()).collect())
            .expect("same dims");
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.dims(), xv.data().iter().map(|v| gelu(*v)).collect())
            .expect("same dims");
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = log_softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes each position over the last dimension, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let h = *xv.dims().last().unwrap_or(&0);
        if xv.rank() == 0 || gv.dims() != [h] || bv.dims() != [h] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.numel() / h;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.dims(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err("transpose", xv, xv));
        }
        let (r, c) = (xv.dims()[0], xv.dims()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], data)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || len == 0 || start + len > xv.dims()[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.dims().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (r, c) = (xv.dims()[0], xv.dims()[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    /// Rank-1 inputs are treated as single rows; the result is rank-1 when
    /// every input is.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let all_rank1 = parts.iter().all(|p| self.value(*p).rank() == 1);
        let (rows, _) = self.value(parts[0]).as_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).as_matrix("concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(*p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let dims = if all_rank1 { vec![total] } else { vec![rows, total] };
        let out = Tensor::new(&dims, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks tensors with equal column counts along rows. Rank-1 inputs are
    /// single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero tensors"));
        }
        let (_, cols) = self.value(parts[0]).as_matrix("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            let (r, c) = v.as_matrix("concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), v));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows of `table[V × H]` selected by `ids`, giving `[len(ids) × H]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: tv.dims().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, h) = (tv.dims()[0], tv.dims()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!("row id {id} out of range for {v} rows")));
            }
            data.extend_from_slice(&tv.data()[id * h..(id + 1) * h]);
        }
        let out = Tensor::new(&[ids.len(), h], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row `index` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.gather_rows(x, &[index])?;
        let h = self.dims(v)[1];
        self.reshape(v, &[h])
    }

    /// For each row `n` of `x[B × C]`, the element at column `cols[n]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.dims()[0] != cols.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: xv.dims().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let c = xv.dims()[1];
        let mut data = Vec::with_capacity(cols.len());
        for (n, &col) in cols.iter().enumerate() {
            if col >= c {
                return Err(Error::contract(format!("column {col} out of range for {c} columns")));
            }
            data.push(xv.data()[n * c + col]);
        }
        let out = Tensor::new(&[cols.len()], data)?;
        Ok(self.push(
            out,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Elementwise product with a fixed mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::Shape {
                op: "mask_mul",
                lhs: xv.dims().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.dims(), data)?;
        Ok(self.push(out, Op::MaskMul { x, mask }, &[x]))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    /// Mixout of a weight toward a fixed target. `scaled_mask` holds
    /// `keep_i / (1-p)` per element, so the output is
    /// `target + scaled_mask ⊙ (w - target)`.
    pub fn mixout(&mut self, w: Var, target: &Tensor, scaled_mask: Vec<f64>) -> Result<Var> {
        let wv = self.value(w);
        if wv.dims() != target.dims() || scaled_mask.len() != wv.numel() {
            return Err(shape_err("mixout", wv, target));
        }
        let data = wv
            .data()
            .iter()
            .zip(target.data())
            .zip(&scaled_mask)
            .map(|((w, t), m)| t + m * (w - t))
            .collect();
        let out = Tensor::new(wv.dims(), data)?;
        Ok(self.push(out, Op::Mixout { w, scaled_mask }, &[w]))
    }

    /// A user-supplied unary op with an explicit backward rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: CustomBackward,
    ) -> Var {
        let out = forward(self.value(x));
        self.push(out, Op::Custom { x, backward }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got dims {:?}",
                lv.dims()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let lens = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients { grads, lens })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                if self.wants(*a) {
                    accumulate_owned(&mut grads[a.0], matmul_a_bt(g, bv.data(), m, n, k));
                }
                if self.wants(*b) {
                    accumulate_owned(&mut grads[b.0], matmul_at_b(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let vn = self.value(v).numel();
                    if vn == g.len() {
                        let d: Vec<f64> = g.iter().map(|x| s * x).collect();
                        accumulate_owned(&mut grads[v.0], d);
                    } else {
                        accumulate_owned(&mut grads[v.0], vec![s * g.iter().sum::<f64>()]);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (v, other) in [(*a, bv), (*b, av)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let vn = self.value(v).numel();
                    let od = other.data();
                    let prod: Vec<f64> = if od.len() == g.len() {
                        g.iter().zip(od).map(|(x, y)| x * y).collect()
                    } else {
                        g.iter().map(|x| x * od[0]).collect()
                    };
                    if vn == g.len() {
                        accumulate_owned(&mut grads[v.0], prod);
                    } else {
                        accumulate_owned(&mut grads[v.0], vec![prod.iter().sum()]);
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    accumulate_owned(&mut grads[x.0], g.iter().map(|v| v * f).collect());
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate_owned(&mut grads[x.0], d);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, x)| g * gelu_grad(*x))
                        .collect();
                    accumulate_owned(&mut grads[x.0], d);
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                if !self.wants(*x) {
                    return;
                }
                let is_log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = axis_split(out.dims(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        if is_log {
                            let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let h = self.value(*gain).numel();
                let gd = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; h];
                    let mut db = vec![0.0; h];
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += grow[j] * xrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate_owned(&mut grads[gain.0], dg);
                    }
                    if self.wants(*bias) {
                        accumulate_owned(&mut grads[bias.0], db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * h..(r + 1) * h];
                        let xrow = &xhat[r * h..(r + 1) * h];
                        let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
                        let mean_dx =
                            dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                        for j in 0..h {
                            dx[r * h + j] = rs * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = (out.dims()[0], out.dims()[1]);
                    let mut d = vec![0.0; g.len()];
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] = g[i * c + j];
                        }
                    }
                    accumulate_owned(&mut grads[x.0], d);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let xc = self.value(*x).dims()[1];
                    let (r, len) = (out.dims()[0], out.dims()[1]);
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; r * xc]);
                    for i in 0..r {
                        for j in 0..len {
                            slot[i * xc + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.as_matrix("concat_cols").map(|(r, _)| r).unwrap_or(1);
                let total = out.numel() / rows;
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.numel() / rows;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(pv.numel());
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate_owned(&mut grads[p.0], d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let h = tv.dims()[1];
                    let slot = grads[table.0].get_or_insert_with(|| vec![0.0; tv.numel()]);
                    for (n, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            slot[id * h + j] += g[n * h + j];
                        }
                    }
                }
            }
            Op::Pick { x, cols } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let c = xv.dims()[1];
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; xv.numel()]);
                    for (n, &col) in cols.iter().enumerate() {
                        slot[n * c + col] += g[n];
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    accumulate_owned(&mut grads[x.0], vec![g[0]; n]);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::MaskMul { x, mask } => {
                if self.wants(*x) {
                    accumulate_owned(&mut grads[x.0], g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
            }
            Op::Mixout { w, scaled_mask } => {
                if self.wants(*w) {
                    let d = g.iter().zip(scaled_mask).map(|(a, m)| a * m).collect();
                    accumulate_owned(&mut grads[w.0], d);
                }
            }
            Op::Custom { x, backward } => {
                if self.wants(*x) {
                    accumulate_owned(&mut grads[x.0], backward(self.value(*x), out, g));
                }
            }
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, returning the worst relative error
/// `|a - b| / max(|a|, |b|, 1e-8)` over every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x), vec![1.0; 6]);
    }

    #[test]
    fn self_product_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.5));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x), vec![7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let unused = tape.leaf(Tensor::ones(&[4]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused), vec![0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            _ => panic!("expected shape error"),
        }
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        let s = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.add(a, s).is_ok());
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        let d = y.data();
        assert_eq!(d[0], 0.5);
        assert_eq!(d[2], 0.5);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_ops_pass_grad_check() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], -1.5, 1.5, &mut r);
        let b = Tensor::uniform(&[3, 4], -1.5, 1.5, &mut r);
        let s = Tensor::scalar(0.7);
        let err = grad_check(
            |t, v| {
                let x = t.mul(v[0], v[1])?;
                let y = t.sub(x, v[2])?;
                let z = t.tanh(y);
                let w = t.add(z, v[0])?;
                let q = t.mul(w, w)?;
                Ok(t.sum(q))
            },
            &[a, b, s],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        let mut r = rng();
        let a = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut r);
        let tbl = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r);
        let weights = Tensor::uniform(&[6], -1.0, 1.0, &mut r);
        let err = grad_check(
            |t, v| {
                let left = t.slice_cols(v[0], 0, 3)?;
                let right = t.slice_cols(v[0], 3, 3)?;
                let tr = t.transpose(right)?;
                let gathered = t.gather_rows(v[1], &[4, 0, 4])?;
                let prod = t.matmul(tr, left)?; // 3x3
                let stacked = t.concat_rows(&[prod, gathered])?; // 6x3
                let cat = t.concat_cols(&[stacked, stacked])?; // 6x6
                let r0 = t.row(cat, 2)?;
                let sm = t.softmax(cat, 1)?;
                let lsm = t.log_softmax(sm, 0)?;
                let picked = t.pick(lsm, &[0, 1, 2, 3, 4, 5])?;
                let b = t.add_row_bias(cat, v[2])?;
                let gb = t.gelu(b);
                let s1 = t.sum(gb);
                let s2 = t.sum(picked);
                let s3 = t.mean(r0);
                let tot = t.add(s1, s2)?;
                let tot = t.add(tot, s3)?;
                Ok(t.scale(tot, 0.5))
            },
            &[a, tbl, weights],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn mask_and_mixout_backward_scale_by_mask() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let target = Tensor::new(&[3], vec![0.5, 0.5, 0.5]).unwrap();
        let eff = tape.mixout(w, &target, vec![2.0, 0.0, 2.0]).unwrap();
        assert_eq!(tape.value(eff).data(), &[1.5, 0.5, 5.5]);
        let s = tape.sum(eff);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[5]));
        let y = tape.dropout(x, 0.0, &mut rng()).unwrap();
        assert_eq!(x, y);
        assert!(tape.dropout(x, 1.0, &mut rng()).is_err());
    }
}
