//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in strict reverse append order, accumulating gradient
//! contributions additively into each input that requires a gradient.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every op kind the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    AddScalar,
    AddRow,
    MulRow,
    Exp,
    Log,
    Recip,
    Softplus,
    Squash,
    Gelu,
    Clamp,
    Matmul,
    Transpose,
    Reshape,
    ExpandLast,
    GatherRows,
    SoftmaxLast,
    CausalSoftmax,
    LayerNorm,
    CumsumExclusive,
    PhaseAccumulate,
    Rotary,
    CrossEntropy,
    Sum,
    Mean,
}

impl OpKind {
    /// All ops with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 27] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Recip,
        OpKind::Softplus,
        OpKind::Squash,
        OpKind::Gelu,
        OpKind::Clamp,
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::ExpandLast,
        OpKind::GatherRows,
        OpKind::SoftmaxLast,
        OpKind::CausalSoftmax,
        OpKind::LayerNorm,
        OpKind::CumsumExclusive,
        OpKind::PhaseAccumulate,
        OpKind::Rotary,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
    ];
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Softplus(Var),
    Squash(Var),
    Gelu(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Matmul {
        a: Var,
        b: Var,
        dims: MatmulDims,
    },
    Transpose {
        x: Var,
        a1: usize,
        a2: usize,
    },
    Reshape(Var),
    ExpandLast(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    SoftmaxLast(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CumsumExclusive {
        x: Var,
        axis: usize,
    },
    PhaseAccumulate {
        f: Var,
        n_pairs: usize,
    },
    Rotary {
        x: Var,
        phases: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        lse: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Copy, Debug)]
struct MatmulDims {
    /// Number of independent products; 1 with `shared_rhs`.
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Recip(..) => OpKind::Recip,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Squash(..) => OpKind::Squash,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ExpandLast(..) => OpKind::ExpandLast,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SoftmaxLast(..) => OpKind::SoftmaxLast,
            Op::CausalSoftmax(..) => OpKind::CausalSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CumsumExclusive { .. } => OpKind::CumsumExclusive,
            Op::PhaseAccumulate { .. } => OpKind::PhaseAccumulate,
            Op::Rotary { .. } => OpKind::Rotary,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Recip(x)
            | Op::Softplus(x)
            | Op::Squash(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::ExpandLast(x)
            | Op::SoftmaxLast(x)
            | Op::CausalSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Clamp { x, .. } | Op::Transpose { x, .. } | Op::CumsumExclusive { x, .. } => {
                vec![*x]
            }
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::GatherRows { table, .. } => vec![*table],
            Op::PhaseAccumulate { f, .. } => vec![*f],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Rotary { x, phases } => vec![*x, *phases],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            let inputs_finite = inputs.iter().all(|&v| self.nodes[v.0].value.all_finite());
            assert!(
                !inputs_finite,
                "{:?} produced a non-finite value from finite inputs",
                op.kind()
            );
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    fn trailing_vector(&self, x: Var, v: Var, what: &str) -> Result<usize> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(v) != [n] || self.shape(x).is_empty() {
            return dim_err(format!(
                "{what}: vector of shape {:?} does not match trailing dim of {:?}",
                self.shape(v),
                self.shape(x)
            ));
        }
        Ok(n)
    }

    /// `x[..., j] + v[j]`
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.trailing_vector(x, v, "add_row")?;
        let vd = self.data(v);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddRow(x, v)))
    }

    /// `x[..., j] * v[j]`
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.trailing_vector(x, v, "mul_row")?;
        let vd = self.data(v);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| a * b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulRow(x, v)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::ONE / v, Op::Recip(x))
    }

    /// `log(1 + exp(x))`, floored at the smallest positive subnormal so the
    /// result stays strictly positive even where `exp(x)` underflows.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `1 / (softplus(x) + 1)`, evaluated in float64 and rounded once.
    pub fn squash(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| T::from_f64(1.0 / (softplus(v.to_f64()) + 1.0)),
            Op::Squash(x),
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// `[..., m, k] x [k, n]`, or batched `[B.., m, k] x [B.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let dims = if sb.len() == 2 {
            if sb[0] != k {
                return dim_err(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
            }
            MatmulDims {
                batch: 1,
                m: sa[..sa.len() - 1].iter().product(),
                k,
                n: sb[1],
                shared_rhs: true,
            }
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return dim_err(format!("matmul batch dims differ: {sa:?} x {sb:?}"));
            }
            if sb[sb.len() - 2] != k {
                return dim_err(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
            }
            MatmulDims {
                batch: sa[..sa.len() - 2].iter().product(),
                m,
                k,
                n: sb[sb.len() - 1],
                shared_rhs: false,
            }
        };
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(dims.n);
        let mut out = vec![T::ZERO; dims.batch * dims.m * dims.n];
        let (ad, bd) = (self.data(a), self.data(b));
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.shared_rhs {
                0
            } else {
                bi * dims.k * dims.n
            };
            let c_off = bi * dims.m * dims.n;
            gemm_into(
                dims.m,
                dims.k,
                dims.n,
                &ad[a_off..a_off + dims.m * dims.k],
                (dims.k as isize, 1),
                &bd[b_off..b_off + dims.k * dims.n],
                (dims.n as isize, 1),
                &mut out[c_off..c_off + dims.m * dims.n],
            );
        }
        Ok(self.push(out_shape, out, Op::Matmul { a, b, dims }))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a1 >= rank || a2 >= rank {
            return dim_err(format!(
                "transpose axes ({a1}, {a2}) out of range for rank {rank}"
            ));
        }
        let (data, shape) = swap_axes(self.data(x), self.shape(x), a1, a2);
        Ok(self.push(shape, data, Op::Transpose { x, a1, a2 }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return dim_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                shape
            ));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// `[...] -> [..., n]` by repetition.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Var {
        let data = self
            .data(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let mut shape = self.shape(x).to_vec();
        shape.push(n);
        self.push(shape, data, Op::ExpandLast(x))
    }

    /// Rows of a `[rows, d]` table selected by `indices`; output shape is
    /// `prefix + [d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return dim_err(format!("gather_rows table must be rank 2, got {ts:?}"));
        }
        let (rows, d) = (ts[0], ts[1]);
        if prefix.iter().product::<usize>() != indices.len() {
            return dim_err(format!(
                "gather_rows: {} indices do not fill prefix {:?}",
                indices.len(),
                prefix
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for a table with {rows} rows"
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            data,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap_or(&1);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(self.shape(x).to_vec(), data, Op::SoftmaxLast(x))
    }

    /// Softmax over the last axis of `[..., t, t]` score matrices where entry
    /// `(i, j)` with `j > i` is masked out (probability exactly zero).
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return dim_err(format!("causal_softmax needs [..., t, t], got {s:?}"));
        }
        let t = s[s.len() - 1];
        let mut data = self.data(x).to_vec();
        for (r, row) in data.chunks_mut(t).enumerate() {
            let i = r % t;
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].fill(T::ZERO);
        }
        Ok(self.push(self.shape(x).to_vec(), data, Op::CausalSoftmax(x)))
    }

    /// Layer normalization over the last axis with gain and bias vectors.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.trailing_vector(x, gain, "layernorm gain")?;
        self.trailing_vector(x, bias, "layernorm bias")?;
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let rows = xd.len() / n.max(1);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(T::from_f64(r));
            for (j, v) in row.iter().enumerate() {
                let h = T::from_f64((v.to_f64() - mean) * r);
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// `out[.., p, ..] = sum_{t < p} x[.., t, ..]` along `axis`.
    pub fn cumsum_exclusive(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return dim_err(format!(
                "cumsum_exclusive axis {axis} out of range for shape {s:?}"
            ));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let xd = self.data(x);
        let mut out = vec![T::ZERO; xd.len()];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.fill(0.0);
            for p in 0..len {
                let base = (o * len + p) * inner;
                for i in 0..inner {
                    out[base + i] = T::from_f64(acc[i]);
                    acc[i] += xd[base + i].to_f64();
                }
            }
        }
        Ok(self.push(s.to_vec(), out, Op::CumsumExclusive { x, axis }))
    }

    /// Phase accumulation over the last axis of `f: [..., t]`:
    /// `out[..., p, i] = sum_{s < p} f[..., s]^(i + 1)` for `i < n_pairs`.
    ///
    /// Powers are taken as `exp((i + 1) * ln f)` and summed in float64 with a
    /// single rounding per output. Requires `f > 0`.
    pub fn phase_accumulate(&mut self, f: Var, n_pairs: usize) -> Result<Var> {
        let s = self.shape(f).to_vec();
        if s.is_empty() {
            return dim_err("phase_accumulate needs a rank >= 1 input");
        }
        let len = s[s.len() - 1];
        let fd = self.data(f);
        let mut out = Vec::with_capacity(fd.len() * n_pairs);
        let mut acc = vec![0.0f64; n_pairs];
        for row in fd.chunks(len.max(1)) {
            acc.fill(0.0);
            for &v in row {
                out.extend(acc.iter().map(|&a| T::from_f64(a)));
                let lf = v.to_f64().ln();
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += ((i + 1) as f64 * lf).exp();
                }
            }
        }
        let mut shape = s;
        shape.push(n_pairs);
        Ok(self.push(shape, out, Op::PhaseAccumulate { f, n_pairs }))
    }

    /// Rotate adjacent pairs `(x[2i], x[2i+1])` by `phases[i]`.
    pub fn rotary(&mut self, x: Var, phases: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x), self.shape(phases));
        if sx.is_empty()
            || sx.len() != sp.len()
            || sx[..sx.len() - 1] != sp[..sp.len() - 1]
            || sx[sx.len() - 1] != 2 * sp[sp.len() - 1]
        {
            return dim_err(format!(
                "rotary: input {sx:?} does not pair with phases {sp:?}"
            ));
        }
        let xd = self.data(x);
        let pd = self.data(phases);
        let mut out = vec![T::ZERO; xd.len()];
        for (j, &phi) in pd.iter().enumerate() {
            let (s, c) = (phi.sin(), phi.cos());
            let (u, v) = (xd[2 * j], xd[2 * j + 1]);
            out[2 * j] = u * c - v * s;
            out[2 * j + 1] = u * s + v * c;
        }
        Ok(self.push(sx.to_vec(), out, Op::Rotary { x, phases }))
    }

    /// Mean next-token cross-entropy of `[..., vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let v = *s.last().unwrap_or(&0);
        let rows = if v == 0 {
            0
        } else {
            self.value(logits).numel() / v
        };
        if rows != targets.len() || rows == 0 {
            return dim_err(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!(
                "target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let ld = self.data(logits);
        let mut lse = Vec::with_capacity(rows);
        let mut total = 0.0f64;
        for (row, &t) in ld.chunks(v).zip(targets) {
            let l = log_sum_exp(row);
            total += l - row[t].to_f64();
            lse.push(T::from_f64(l));
        }
        Ok(self.push(
            Vec::new(),
            vec![T::from_f64(total / rows as f64)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                lse,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        self.push(Vec::new(), vec![T::from_f64(s)], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        self.push(Vec::new(), vec![T::from_f64(s / n)], Op::Mean(x))
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.spent {
            return Err(Error::Contract(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = acc(nodes, grads, v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * *s;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::AddRow(x, v) => {
                let n = self.value(*v).numel();
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gv) = acc(nodes, grads, *v) {
                    for row in g.chunks(n) {
                        add_into(gv, row);
                    }
                }
            }
            Op::MulRow(x, v) => {
                let n = self.value(*v).numel();
                let (xd, vd) = (self.data(*x), self.data(*v));
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (orow, grow) in gx.chunks_mut(n).zip(g.chunks(n)) {
                        for ((o, &gi), &vi) in orow.iter_mut().zip(grow).zip(vd) {
                            *o += gi * vi;
                        }
                    }
                }
                if let Some(gv) = acc(nodes, grads, *v) {
                    for (grow, xrow) in g.chunks(n).zip(xd.chunks(n)) {
                        for ((o, &gi), &xi) in gv.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * xi;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi / xi;
                    }
                }
            }
            Op::Recip(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o -= gi * yi * yi;
                    }
                }
            }
            Op::Softplus(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * sigmoid(xi);
                    }
                }
            }
            Op::Squash(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (((o, &gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xd).zip(y) {
                        *o -= gi * sigmoid(xi) * yi * yi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * gelu_parts(xi).1;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Matmul { a, b, dims } => {
                let MatmulDims {
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } = *dims;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = acc(nodes, grads, *a) {
                    for bi in 0..batch {
                        let b_off = if shared_rhs { 0 } else { bi * k * n };
                        // dA = dC · Bᵀ
                        gemm_acc(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &bd[b_off..b_off + k * n],
                            (1, n as isize),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for bi in 0..batch {
                        let b_off = if shared_rhs { 0 } else { bi * k * n };
                        // dB = Aᵀ · dC
                        gemm_acc(
                            k,
                            m,
                            n,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &mut gb[b_off..b_off + k * n],
                        );
                    }
                }
            }
            Op::Transpose { x, a1, a2 } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let (back, _) = swap_axes(g, node.value.shape(), *a1, *a2);
                    add_into(gx, &back);
                }
            }
            Op::ExpandLast(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (o, row) in gx.iter_mut().zip(g.chunks(n)) {
                        *o += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (&i, row) in indices.iter().zip(g.chunks(d)) {
                        add_into(&mut gt[i * d..(i + 1) * d], row);
                    }
                }
            }
            Op::SoftmaxLast(x) | Op::CausalSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
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
                let n = self.value(*gain).numel();
                let gd = self.data(*gain);
                if let Some(gx) = acc(nodes, grads, *x) {
                    let nf = T::from_f64(n as f64);
                    for (r, ((orow, grow), hrow)) in gx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = T::ZERO;
                        let mut mean_dh = T::ZERO;
                        for j in 0..n {
                            let d = grow[j] * gd[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = grow[j] * gd[j];
                            orow[j] += rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if let Some(gg) = acc(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &gi), &hi) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += gi * hi;
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
            }
            Op::CumsumExclusive { x, axis } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut run = vec![0.0f64; inner];
                    for o in 0..outer {
                        run.fill(0.0);
                        for p in (0..len).rev() {
                            let base = (o * len + p) * inner;
                            for i in 0..inner {
                                gx[base + i] += T::from_f64(run[i]);
                                run[i] += g[base + i].to_f64();
                            }
                        }
                    }
                }
            }
            Op::PhaseAccumulate { f, n_pairs } => {
                let n_pairs = *n_pairs;
                let fd = self.data(*f);
                let len = *self.shape(*f).last().unwrap();
                if let Some(gf) = acc(nodes, grads, *f) {
                    let mut tail = vec![0.0f64; n_pairs];
                    for (r, (orow, frow)) in gf.chunks_mut(len).zip(fd.chunks(len)).enumerate() {
                        tail.fill(0.0);
                        for t in (0..len).rev() {
                            // tail[i] = sum_{p > t} g[p, i]
                            let fv = frow[t].to_f64();
                            let lf = fv.ln();
                            let mut d = 0.0;
                            for (i, &tl) in tail.iter().enumerate() {
                                d += (i + 1) as f64 * (i as f64 * lf).exp() * tl;
                            }
                            orow[t] += T::from_f64(d);
                            let gbase = (r * len + t) * n_pairs;
                            for (i, tl) in tail.iter_mut().enumerate() {
                                *tl += g[gbase + i].to_f64();
                            }
                        }
                    }
                }
            }
            Op::Rotary { x, phases } => {
                let pd = self.data(*phases);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (j, &phi) in pd.iter().enumerate() {
                        let (s, c) = (phi.sin(), phi.cos());
                        let (gu, gv) = (g[2 * j], g[2 * j + 1]);
                        gx[2 * j] += gu * c + gv * s;
                        gx[2 * j + 1] += gv * c - gu * s;
                    }
                }
                if let Some(gp) = acc(nodes, grads, *phases) {
                    for (j, o) in gp.iter_mut().enumerate() {
                        *o += y[2 * j] * g[2 * j + 1] - y[2 * j + 1] * g[2 * j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                lse,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let ld = self.data(*logits);
                let scale = g[0] / T::from_f64(targets.len() as f64);
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (r, (orow, lrow)) in gl.chunks_mut(v).zip(ld.chunks(v)).enumerate() {
                        for (o, &l) in orow.iter_mut().zip(lrow) {
                            *o += scale * (l - lse[r]).exp();
                        }
                        orow[targets[r]] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel().max(1) as f64);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
        }
    }
}

fn acc<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Copy of `data` with axes `a1` and `a2` exchanged; returns the new shape too.
pub fn swap_axes<T: Copy>(
    data: &[T],
    shape: &[usize],
    a1: usize,
    a2: usize,
) -> (Vec<T>, Vec<usize>) {
    let (lo, hi) = (a1.min(a2), a1.max(a2));
    let mut out_shape = shape.to_vec();
    out_shape.swap(lo, hi);
    if lo == hi {
        return (data.to_vec(), out_shape);
    }
    let outer: usize = shape[..lo].iter().product();
    let d_lo = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let d_hi = shape[hi];
    let inner: usize = shape[hi + 1..].iter().product();
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for h in 0..d_hi {
            for m in 0..mid {
                for l in 0..d_lo {
                    let src = (((o * d_lo + l) * mid + m) * d_hi + h) * inner;
                    out.extend_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    (out, out_shape)
}

#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices cover the strided extents and `c` is a distinct buffer.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as in `gemm_into`; beta = 1 accumulates into `c`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::ONE,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    let pos = if x > T::ZERO { x } else { T::ZERO };
    (pos + (-x.abs()).exp().ln_1p()).max(T::TINY)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// `(gelu(x), gelu'(x))`, tanh approximation.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::ONE + t);
    let dy = half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x);
    (y, dy)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn cumsum_exclusive_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[2.0, 3.0, 5.0]));
        let y = tape.cumsum_exclusive(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 5.0]);

        let ones = tape.constant(t64(&[4], &[1.0; 4]));
        let pos = tape.cumsum_exclusive(ones, 0).unwrap();
        assert_eq!(tape.value(pos).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn cumsum_exclusive_gradient_is_reverse_count() {
        // Central-difference oracle on the 3-element case: d/dx_t sum(out) = #{p > t}.
        let f = |x: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(t64(&[3], x));
            let c = tape.cumsum_exclusive(v, 0).unwrap();
            let s = tape.sum(c);
            tape.value(s).item()
        };
        let x0 = [0.3, -1.2, 2.5];
        let h = 1e-6;
        let mut fd = [0.0; 3];
        for i in 0..3 {
            let (mut xp, mut xm) = (x0, x0);
            xp[i] += h;
            xm[i] -= h;
            fd[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        for (got, want) in fd.iter().zip([2.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-8);
        }

        let mut tape = Tape::<f64>::new();
        let v = tape.param(t64(&[3], &x0));
        let c = tape.cumsum_exclusive(v, 0).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn cumsum_axis_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cumsum_exclusive(x, 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0f64) - 100.0).abs() < 1e-6);
        let tiny = softplus(-100.0f64);
        assert!(tiny > 0.0);
        // exp(-100) = 3.720075976020836e-44 to double precision; log1p(u) = u for such u.
        assert!((tiny - 3.720075976020836e-44).abs() / 3.72e-44 < 1e-12);
        for x in [-1e4, -745.0, -100.0, 0.0, 1e4] {
            assert!(softplus(x as f32) > 0.0);
            assert!(softplus(x) > 0.0);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = tape.softmax_last(x);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn exp_log_roundtrip_f32() {
        let mut tape = Tape::<f32>::new();
        let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        let f = tape.constant(Tensor::from_f64(&[grid.len()], &grid).unwrap());
        let l = tape.log(f);
        let back = tape.exp(l);
        assert!(tape.value(back).max_abs_diff(tape.value(f)) <= 1e-6);
    }

    #[test]
    fn backward_simple_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(t64(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_accumulates_over_consumers() {
        // x feeds three ops; its gradient is the sum of the three contributions.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, -2.0]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let c = tape.exp(x);
        let ab = tape.add(a, b).unwrap();
        let abc = tape.add(ab, c).unwrap();
        let s = tape.sum(abc);
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap().data();
        assert!((gx[0] - (5.0 + 1f64.exp())).abs() < 1e-12);
        assert!((gx[1] - (5.0 + (-2f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn swap_axes_matches_index_formula() {
        let shape = [2, 3, 4, 5];
        let data: Vec<usize> = (0..120).collect();
        let (out, s) = swap_axes(&data, &shape, 1, 2);
        assert_eq!(s, vec![2, 4, 3, 5]);
        for b in 0..2 {
            for h in 0..4 {
                for t in 0..3 {
                    for d in 0..5 {
                        let o = ((b * 4 + h) * 3 + t) * 5 + d;
                        let i = ((b * 3 + t) * 4 + h) * 5 + d;
                        assert_eq!(out[o], data[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn causal_softmax_single_position() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1], &[3.7]));
        let y = tape.causal_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[2, 256]));
        let ce = tape.cross_entropy(l, &[3, 200]).unwrap();
        assert!((tape.value(ce).item() - 256f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::<f64>::zeros(&[1, 5]);
        logits.set(&[0, 2], 20.0);
        let l = tape.constant(logits);
        let ce = tape.cross_entropy(l, &[2]).unwrap();
        let v = tape.value(ce).item();
        assert!(v > 0.0 && v < 1e-8);

        assert!(matches!(
            tape.cross_entropy(l, &[5]),
            Err(Error::Contract(_))
        ));
    }
}
