//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation executes eagerly: the forward value is computed when the
//! op is recorded, validated finite, and stored on the tape node. `backward`
//! walks the tape once in reverse topological order (node ids are already
//! topologically sorted by construction) and accumulates gradients by
//! addition at fan-in points.
//!
//! A tape is confined to a single thread for its lifetime. Tensors moving
//! in and out are plain values and transfer freely.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{axis_split, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise functions with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Silu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Log,
    Neg,
    Square,
    Sqrt,
    Recip,
    Atanh,
    /// `atanh(u)/u` with the removable singularity at 0 handled by series.
    AtanhRatio,
    /// `tanh(u)/u` with the removable singularity at 0 handled by series.
    TanhRatio,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            Self::Silu => "silu",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::Tanh => "tanh",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Neg => "neg",
            Self::Square => "square",
            Self::Sqrt => "sqrt",
            Self::Recip => "recip",
            Self::Atanh => "atanh",
            Self::AtanhRatio => "atanh_ratio",
            Self::TanhRatio => "tanh_ratio",
        }
    }

    /// Domain check over the whole input, before evaluation.
    fn check_domain<F: Real>(self, xs: &[F]) -> Result<()> {
        let bad = |detail: String| Error::Domain {
            op: self.name(),
            detail,
        };
        match self {
            Self::Log => {
                if xs.iter().any(|&x| x <= F::zero()) {
                    return Err(bad("log requires strictly positive input".into()));
                }
            }
            Self::Sqrt => {
                if xs.iter().any(|&x| x < F::zero()) {
                    return Err(bad("sqrt requires non-negative input".into()));
                }
            }
            Self::Atanh | Self::AtanhRatio => {
                if xs.iter().any(|&x| x.abs() >= F::one()) {
                    return Err(bad("inverse tanh argument must satisfy |x| < 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn eval<F: Real>(self, x: F) -> F {
        match self {
            Self::Silu => x * sigmoid(x),
            Self::Sigmoid => sigmoid(x),
            Self::Softplus => softplus(x),
            Self::Tanh => x.tanh(),
            Self::Exp => x.exp(),
            Self::Log => x.ln(),
            Self::Neg => -x,
            Self::Square => x * x,
            Self::Sqrt => x.sqrt(),
            Self::Recip => F::one() / x,
            Self::Atanh => x.atanh(),
            Self::AtanhRatio => atanh_ratio(x),
            Self::TanhRatio => tanh_ratio(x),
        }
    }

    /// Derivative at `x`, given the forward output `fx`.
    fn deriv<F: Real>(self, x: F, fx: F) -> F {
        let one = F::one();
        match self {
            Self::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Self::Sigmoid => fx * (one - fx),
            Self::Softplus => sigmoid(x),
            Self::Tanh => one - fx * fx,
            Self::Exp => fx,
            Self::Log => one / x,
            Self::Neg => -one,
            Self::Square => F::of(2.0) * x,
            Self::Sqrt => one / (F::of(2.0) * fx),
            Self::Recip => -fx * fx,
            Self::Atanh => one / (one - x * x),
            Self::AtanhRatio => atanh_ratio_deriv(x),
            Self::TanhRatio => tanh_ratio_deriv(x),
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    // Split on sign to avoid overflow of exp for large |x|.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const RATIO_SERIES_CUTOFF: f64 = 1e-4;

fn atanh_ratio<F: Real>(u: F) -> F {
    if u.abs() < F::of(RATIO_SERIES_CUTOFF) {
        let u2 = u * u;
        F::one() + u2 / F::of(3.0) + u2 * u2 / F::of(5.0)
    } else {
        u.atanh() / u
    }
}

fn atanh_ratio_deriv<F: Real>(u: F) -> F {
    if u.abs() < F::of(RATIO_SERIES_CUTOFF) {
        F::of(2.0 / 3.0) * u + F::of(4.0 / 5.0) * u * u * u
    } else {
        (u / (F::one() - u * u) - u.atanh()) / (u * u)
    }
}

fn tanh_ratio<F: Real>(u: F) -> F {
    if u.abs() < F::of(RATIO_SERIES_CUTOFF) {
        let u2 = u * u;
        F::one() - u2 / F::of(3.0) + F::of(2.0 / 15.0) * u2 * u2
    } else {
        u.tanh() / u
    }
}

fn tanh_ratio_deriv<F: Real>(u: F) -> F {
    if u.abs() < F::of(RATIO_SERIES_CUTOFF) {
        -F::of(2.0 / 3.0) * u + F::of(8.0 / 15.0) * u * u * u
    } else {
        let t = u.tanh();
        (u * (F::one() - t * t) - t) / (u * u)
    }
}

/// ZOH input-matrix factor `(exp(u) - 1)/u`, with a two-term Taylor
/// fallback `1 + u/2` for `|u| < 1e-4`.
pub(crate) fn zoh_phi<F: Real>(u: F) -> F {
    if u.abs() < F::of(RATIO_SERIES_CUTOFF) {
        F::one() + u / F::of(2.0)
    } else {
        u.exp_m1() / u
    }
}

pub(crate) fn zoh_phi_deriv<F: Real>(u: F) -> F {
    if u.abs() < F::of(RATIO_SERIES_CUTOFF) {
        F::of(0.5)
    } else {
        (u * u.exp() - u.exp_m1()) / (u * u)
    }
}

/// Axis reduction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: F },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Unary { a: usize, f: UnaryFn },
    Reduce { a: usize, axis: usize, mode: ReduceMode },
    Softmax { a: usize, axis: usize },
    Reshape { a: usize },
    ConcatLast { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    MulBias { a: usize, b: usize },
    AddRows { a: usize, s: usize },
    MulRows { a: usize, s: usize },
    ScaleByScalar { a: usize, s: usize },
    RowNorm { a: usize },
    BallProject { x: usize, radius: usize },
    CausalConv { x: usize, k: usize },
    ZohABar { a_mat: usize, delta: usize },
    ZohBBar { a_mat: usize, b_in: usize, delta: usize },
    SelectiveScan { a_bar: usize, b_bar: usize, c: usize, x: usize, states: Vec<F> },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Dropout { a: usize, mult: Vec<F> },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    needs_grad: bool,
}

/// Recording of a forward computation, ready for one reverse sweep.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient map produced by [`Tape::backward`], keyed by node handle.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` participates.
    /// Leaves created with `requires_grad` always have an entry
    /// (zeros when the leaf does not feed the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient
    /// target for `backward`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_unchecked(Op::Leaf, value, requires_grad)
    }

    /// Registers a non-differentiated input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push_unchecked(&mut self, op: Op<F>, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, op: Op<F>, value: Tensor<F>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(op, value, needs))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).map_err(|_| Error::NonFinite { op: op_name })?;
        self.push(op_name, op, value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.nodes[a.0].value.map("add_scalar", |x| x + c)?;
        self.push("add_scalar", Op::AddScalar { a: a.0 }, value, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.nodes[a.0].value.map("mul_scalar", |x| x * c)?;
        self.push("mul_scalar", Op::MulScalar { a: a.0, c }, value, &[a])
    }

    /// Matrix product of `a` (shape `[.., k]`) with a 2-d `b` (`[k, n]`).
    /// Leading axes of `a` are treated as a flattened row dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() < 1 || tb.rank() != 2 {
            return Err(mismatch());
        }
        let k = *ta.shape().last().unwrap();
        if tb.shape()[0] != k {
            return Err(mismatch());
        }
        let n = tb.shape()[1];
        let rows = ta.numel() / k.max(1);
        let mut out = vec![F::zero(); rows * n];
        matmul_into(ta.data(), tb.data(), rows, k, n, &mut out);
        let mut shape = ta.shape()[..ta.rank() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out).map_err(|_| Error::NonFinite { op: "matmul" })?;
        self.push("matmul", Op::Matmul { a: a.0, b: b.0 }, value, &[a, b])
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out).expect("transpose preserves finiteness");
        self.push("transpose", Op::Transpose { a: a.0 }, value, &[a])
    }

    /// Elementwise function application with its analytic derivative.
    pub fn unary(&mut self, a: Var, f: UnaryFn) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        f.check_domain(ta.data())?;
        let value = ta.map(f.name(), |x| f.eval(x))?;
        self.push(f.name(), Op::Unary { a: a.0, f }, value, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Exp)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Neg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryFn::Recip)
    }

    /// Removes `axis`, summing or averaging over it.
    pub fn reduce(&mut self, a: Var, axis: usize, mode: ReduceMode) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        if len == 0 && mode == ReduceMode::Mean {
            return Err(Error::Domain {
                op: "reduce",
                detail: "mean over an empty axis".into(),
            });
        }
        let mut out = vec![F::zero(); outer * inner];
        let src = ta.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mode == ReduceMode::Mean {
            let inv = F::one() / F::of(len as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out).map_err(|_| Error::NonFinite { op: "reduce" })?;
        self.push("reduce", Op::Reduce { a: a.0, axis, mode }, value, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, ReduceMode::Sum)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, ReduceMode::Mean)
    }

    /// Max-subtracted softmax along `axis` (shape-preserving).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = F::neg_infinity();
                for l in 0..len {
                    m = m.max(src[at(l)]);
                }
                let mut z = F::zero();
                for l in 0..len {
                    let e = (src[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let value =
            Tensor::new(ta.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: "softmax" })?;
        self.push("softmax", Op::Softmax { a: a.0, axis }, value, &[a])
    }

    /// Shape change without touching data; gradient passes through.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        self.push("reshape", Op::Reshape { a: a.0 }, value, &[a])
    }

    /// Concatenates along the last axis; leading axes must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: "concat_last",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != tb.rank() || ta.rank() == 0 {
            return Err(mismatch());
        }
        let lead = ta.rank() - 1;
        if ta.shape()[..lead] != tb.shape()[..lead] {
            return Err(mismatch());
        }
        let (p, q) = (ta.shape()[lead], tb.shape()[lead]);
        let rows: usize = ta.shape()[..lead].iter().product();
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&tb.data()[r * q..(r + 1) * q]);
        }
        let mut shape = ta.shape()[..lead].to_vec();
        shape.push(p + q);
        let value = Tensor::new(shape, out).expect("concat preserves finiteness");
        self.push("concat_last", Op::ConcatLast { a: a.0, b: b.0 }, value, &[a, b])
    }

    fn last_dim_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: op_name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() == 0 || tb.rank() != 1 || *ta.shape().last().unwrap() != tb.shape()[0] {
            return Err(mismatch());
        }
        let c = tb.shape()[0];
        let rows = ta.numel() / c.max(1);
        let mut out = Vec::with_capacity(ta.numel());
        for r in 0..rows {
            for j in 0..c {
                out.push(f(ta.data()[r * c + j], tb.data()[j]));
            }
        }
        let value =
            Tensor::new(ta.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: op_name })?;
        self.push(op_name, op, value, &[a, b])
    }

    /// `a[.., c] + b[c]`: bias addition broadcast over leading axes.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        self.last_dim_broadcast("add_bias", a, b, |x, y| x + y, Op::AddBias { a: a.0, b: b.0 })
    }

    /// `a[.., c] * b[c]`: per-channel scale broadcast over leading axes.
    pub fn mul_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        self.last_dim_broadcast("mul_bias", a, b, |x, y| x * y, Op::MulBias { a: a.0, b: b.0 })
    }

    fn rows_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        s: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: op_name,
            lhs: ta.shape().to_vec(),
            rhs: ts.shape().to_vec(),
        };
        if ta.rank() == 0 || ts.shape() != &ta.shape()[..ta.rank() - 1] {
            return Err(mismatch());
        }
        let c = *ta.shape().last().unwrap();
        let rows = ts.numel();
        let mut out = Vec::with_capacity(ta.numel());
        for r in 0..rows {
            let sv = ts.data()[r];
            for j in 0..c {
                out.push(f(ta.data()[r * c + j], sv));
            }
        }
        let value =
            Tensor::new(ta.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: op_name })?;
        self.push(op_name, op, value, &[a, s])
    }

    /// `a[r.., c] + s[r..]`: adds one scalar per leading index.
    pub fn add_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.rows_broadcast("add_rows", a, s, |x, y| x + y, Op::AddRows { a: a.0, s: s.0 })
    }

    /// `a[r.., c] * s[r..]`: scales each last-axis row by one scalar.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.rows_broadcast("mul_rows", a, s, |x, y| x * y, Op::MulRows { a: a.0, s: s.0 })
    }

    /// Multiplies the whole tensor by a one-element tensor node.
    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by_scalar",
                lhs: self.nodes[a.0].value.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let sv = ts.data()[0];
        let value = self.nodes[a.0].value.map("scale_by_scalar", |x| x * sv)?;
        self.push(
            "scale_by_scalar",
            Op::ScaleByScalar { a: a.0, s: s.0 },
            value,
            &[a, s],
        )
    }

    /// Euclidean norm of each last-axis row: `[.., d] -> [..]`.
    /// The backward pass treats zero rows as having zero gradient.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "row_norm",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let d = *ta.shape().last().unwrap();
        let rows = ta.numel() / d.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &ta.data()[r * d..(r + 1) * d];
            out.push(row.iter().map(|&x| x * x).fold(F::zero(), |p, q| p + q).sqrt());
        }
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        let value = Tensor::new(shape, out).map_err(|_| Error::NonFinite { op: "row_norm" })?;
        self.push("row_norm", Op::RowNorm { a: a.0 }, value, &[a])
    }

    /// Radial clip of each last-axis row to norm at most `radius`
    /// (a positive one-element node). Rows inside pass through unchanged;
    /// rows outside are rescaled to the radius, direction preserved.
    /// Differentiable in both the rows and the radius.
    pub fn ball_project(&mut self, x: Var, radius: Var) -> Result<Var> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[radius.0].value);
        if tr.numel() != 1 || tx.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "ball_project",
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let r_max = tr.data()[0];
        if r_max <= F::zero() {
            return Err(Error::Domain {
                op: "ball_project",
                detail: "radius must be positive".into(),
            });
        }
        let d = *tx.shape().last().unwrap();
        let rows = tx.numel() / d.max(1);
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let n = row
                .iter()
                .map(|&v| v * v)
                .fold(F::zero(), |p, q| p + q)
                .sqrt();
            if n > r_max {
                let s = r_max / n;
                for v in row {
                    *v *= s;
                }
            }
        }
        let value =
            Tensor::new(tx.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: "ball_project" })?;
        self.push(
            "ball_project",
            Op::BallProject { x: x.0, radius: radius.0 },
            value,
            &[x, radius],
        )
    }

    /// Depthwise causal 1-d convolution.
    ///
    /// `x` has shape `(B, N, M)`, `kernels` has shape `(M, W)`. The input is
    /// zero-padded on the left with `W - 1` positions, so the output at time
    /// `t` depends only on inputs at times `<= t`. The kernel's last tap
    /// multiplies the current position:
    /// `out[b,t,m] = sum_j k[m,j] * x[b, t-(W-1-j), m]`.
    pub fn causal_conv(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernels.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: "causal_conv",
            lhs: tx.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        };
        if tx.rank() != 3 || tk.rank() != 2 {
            return Err(mismatch());
        }
        let (bsz, n, m) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if tk.shape()[0] != m || tk.shape()[1] == 0 {
            return Err(mismatch());
        }
        let w = tk.shape()[1];
        let mut out = vec![F::zero(); tx.numel()];
        let xd = tx.data();
        let kd = tk.data();
        for b in 0..bsz {
            for t in 0..n {
                for ch in 0..m {
                    let mut acc = F::zero();
                    for j in 0..w {
                        let shift = w - 1 - j;
                        if t >= shift {
                            acc += kd[ch * w + j] * xd[(b * n + (t - shift)) * m + ch];
                        }
                    }
                    out[(b * n + t) * m + ch] = acc;
                }
            }
        }
        let value =
            Tensor::new(tx.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: "causal_conv" })?;
        self.push(
            "causal_conv",
            Op::CausalConv { x: x.0, k: kernels.0 },
            value,
            &[x, kernels],
        )
    }

    /// Zero-order-hold state factor: `out[.., m, l] = exp(delta[.., m] * a[m, l])`.
    ///
    /// Requires `delta > 0` and `a < 0` elementwise, which keeps every output
    /// in `(0, 1)`.
    pub fn zoh_a_bar(&mut self, a_mat: Var, delta: Var) -> Result<Var> {
        let (ta, td) = (&self.nodes[a_mat.0].value, &self.nodes[delta.0].value);
        let (m, l) = self.zoh_validate("zoh_a_bar", ta, td)?;
        let rows = td.numel() / m;
        let mut out = Vec::with_capacity(td.numel() * l);
        for idx in 0..rows * m {
            let dt = td.data()[idx];
            let ch = idx % m;
            for s in 0..l {
                out.push((dt * ta.data()[ch * l + s]).exp());
            }
        }
        let mut shape = td.shape().to_vec();
        shape.push(l);
        let value = Tensor::new(shape, out).map_err(|_| Error::NonFinite { op: "zoh_a_bar" })?;
        self.push(
            "zoh_a_bar",
            Op::ZohABar { a_mat: a_mat.0, delta: delta.0 },
            value,
            &[a_mat, delta],
        )
    }

    /// Zero-order-hold input factor:
    /// `out[.., m, l] = phi(delta*a) * delta[.., m] * b_in[.., l]` with
    /// `phi(u) = (exp(u) - 1)/u` (Taylor fallback `1 + u/2` for `|u| < 1e-4`).
    pub fn zoh_b_bar(&mut self, a_mat: Var, b_in: Var, delta: Var) -> Result<Var> {
        let (ta, tb, td) = (
            &self.nodes[a_mat.0].value,
            &self.nodes[b_in.0].value,
            &self.nodes[delta.0].value,
        );
        let (m, l) = self.zoh_validate("zoh_b_bar", ta, td)?;
        if tb.rank() != td.rank()
            || *tb.shape().last().unwrap_or(&0) != l
            || tb.shape()[..tb.rank() - 1] != td.shape()[..td.rank() - 1]
        {
            return Err(Error::ShapeMismatch {
                op: "zoh_b_bar",
                lhs: tb.shape().to_vec(),
                rhs: td.shape().to_vec(),
            });
        }
        let rows = td.numel() / m;
        let mut out = Vec::with_capacity(td.numel() * l);
        for row in 0..rows {
            for ch in 0..m {
                let dt = td.data()[row * m + ch];
                for s in 0..l {
                    let u = dt * ta.data()[ch * l + s];
                    out.push(zoh_phi(u) * dt * tb.data()[row * l + s]);
                }
            }
        }
        let mut shape = td.shape().to_vec();
        shape.push(l);
        let value = Tensor::new(shape, out).map_err(|_| Error::NonFinite { op: "zoh_b_bar" })?;
        self.push(
            "zoh_b_bar",
            Op::ZohBBar {
                a_mat: a_mat.0,
                b_in: b_in.0,
                delta: delta.0,
            },
            value,
            &[a_mat, b_in, delta],
        )
    }

    fn zoh_validate(
        &self,
        op: &'static str,
        a_mat: &Tensor<F>,
        delta: &Tensor<F>,
    ) -> Result<(usize, usize)> {
        if a_mat.rank() != 2 || delta.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a_mat.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        let (m, l) = (a_mat.shape()[0], a_mat.shape()[1]);
        if *delta.shape().last().unwrap() != m {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a_mat.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        if delta.data().iter().any(|&d| d <= F::zero()) {
            return Err(Error::Domain {
                op,
                detail: "discretization step must be positive".into(),
            });
        }
        if a_mat.data().iter().any(|&a| a >= F::zero()) {
            return Err(Error::Domain {
                op,
                detail: "state matrix entries must be strictly negative".into(),
            });
        }
        Ok((m, l))
    }

    /// Selective-scan recurrence with per-timestep coefficients:
    /// `h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t]`, `y[t][m] = <c[t], h[t][m]>`,
    /// starting from `h[-1] = 0`.
    ///
    /// Shapes: `a_bar`, `b_bar` are `(B, N, M, L)`, `c` is `(B, N, L)`,
    /// `x` is `(B, N, M)`, output is `(B, N, M)`. Saves the state sequence
    /// for the reverse sweep.
    pub fn selective_scan(&mut self, a_bar: Var, b_bar: Var, c: Var, x: Var) -> Result<Var> {
        let dims = scan_dims(
            self.nodes[a_bar.0].value.shape(),
            self.nodes[b_bar.0].value.shape(),
            self.nodes[c.0].value.shape(),
            self.nodes[x.0].value.shape(),
        )?;
        let (y, states) = scan_forward_with_states(
            self.nodes[a_bar.0].value.data(),
            self.nodes[b_bar.0].value.data(),
            self.nodes[c.0].value.data(),
            self.nodes[x.0].value.data(),
            dims,
        );
        let (bsz, n, m, _) = dims;
        let value =
            Tensor::new(vec![bsz, n, m], y).map_err(|_| Error::NonFinite { op: "selective_scan" })?;
        self.push(
            "selective_scan",
            Op::SelectiveScan {
                a_bar: a_bar.0,
                b_bar: b_bar.0,
                c: c.0,
                x: x.0,
                states,
            },
            value,
            &[a_bar, b_bar, c, x],
        )
    }

    /// Mean cross-entropy between `logits` (shape `(B, C)`) and integer
    /// labels, computed in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (bsz, classes) = (tl.shape()[0], tl.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&lb| lb >= classes) {
            return Err(Error::Domain {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let mut total = F::zero();
        for b in 0..bsz {
            let row = &tl.data()[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            total += m + z.ln() - row[labels[b]];
        }
        let mean = total / F::of(bsz as f64);
        let value = Tensor::scalar(mean).map_err(|_| Error::NonFinite { op: "cross_entropy" })?;
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            value,
            &[logits],
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales kept elements by `1/(1 - rate)`. Identity (no node) when
    /// `train` is false or `rate == 0`. The RNG is passed explicitly so
    /// training is reproducible.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument {
                detail: format!("dropout rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = F::of(1.0 / (1.0 - rate));
        let mult: Vec<F> = (0..self.nodes[a.0].value.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().zip(&mult).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)
            .map_err(|_| Error::NonFinite { op: "dropout" })?;
        self.push("dropout", Op::Dropout { a: a.0, mult }, value, &[a])
    }

    /// Affine map: `matmul(x, w) + bias` broadcast over leading axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node that participates; every `requires_grad` leaf gets an entry
    /// (zeros when disconnected from the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_val.shape().to_vec(), F::one()).expect("ones"));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].clone().expect("checked above");
            self.propagate(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf = node.op {
                if node.needs_grad {
                    if let Some(ref g) = grads[i] {
                        g.ensure_finite("backward")?;
                    } else {
                        grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: usize, contrib: Vec<F>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (dst, src) in existing.data_mut().iter_mut().zip(&contrib) {
                    *dst += *src;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.nodes[target].value.shape().to_vec(), contrib)
                        .unwrap_or_else(|_| Tensor::zeros(self.nodes[target].value.shape().to_vec())),
                );
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, gd.iter().zip(db).map(|(&g, &y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(da).map(|(&g, &x)| g * x).collect());
            }
            Op::Div { a, b } => {
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(grads, *a, gd.iter().zip(db).map(|(&g, &y)| g / y).collect());
                self.accumulate(
                    grads,
                    *b,
                    gd.iter()
                        .zip(da.iter().zip(db))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, gd.to_vec()),
            Op::MulScalar { a, c } => {
                self.accumulate(grads, *a, gd.iter().map(|&v| v * *c).collect());
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let k = *ta.shape().last().unwrap();
                let n = tb.shape()[1];
                let rows = ta.numel() / k.max(1);
                // d a = g . b^T
                let mut ga = vec![F::zero(); ta.numel()];
                for r in 0..rows {
                    for kk in 0..k {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += gd[r * n + j] * tb.data()[kk * n + j];
                        }
                        ga[r * k + kk] = acc;
                    }
                }
                self.accumulate(grads, *a, ga);
                // d b = a^T . g
                let mut gb = vec![F::zero(); tb.numel()];
                for kk in 0..k {
                    for j in 0..n {
                        let mut acc = F::zero();
                        for r in 0..rows {
                            acc += ta.data()[r * k + kk] * gd[r * n + j];
                        }
                        gb[kk * n + j] = acc;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Transpose { a } => {
                let ta = &self.nodes[*a].value;
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mut ga = vec![F::zero(); ta.numel()];
                for x in 0..c {
                    for y in 0..r {
                        ga[y * c + x] = gd[x * r + y];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Unary { a, f } => {
                let ta = self.nodes[*a].value.data();
                let fx = self.nodes[i].value.data();
                let ga = gd
                    .iter()
                    .zip(ta.iter().zip(fx))
                    .map(|(&g, (&x, &y))| g * f.deriv(x, y))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Reduce { a, axis, mode } => {
                let ta = &self.nodes[*a].value;
                let (outer, len, inner) = axis_split(ta.shape(), *axis);
                let scale = match mode {
                    ReduceMode::Sum => F::one(),
                    ReduceMode::Mean => F::one() / F::of(len as f64),
                };
                let mut ga = vec![F::zero(); ta.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for idx in 0..inner {
                            ga[base + idx] = gd[o * inner + idx] * scale;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax { a, axis } => {
                let p = self.nodes[i].value.data();
                let ta = &self.nodes[*a].value;
                let (outer, len, inner) = axis_split(ta.shape(), *axis);
                let mut ga = vec![F::zero(); ta.numel()];
                for o in 0..outer {
                    for idx in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + idx;
                        let mut dot = F::zero();
                        for l in 0..len {
                            dot += gd[at(l)] * p[at(l)];
                        }
                        for l in 0..len {
                            ga[at(l)] = p[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape { a } => self.accumulate(grads, *a, gd.to_vec()),
            Op::ConcatLast { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let p = *ta.shape().last().unwrap();
                let q = *tb.shape().last().unwrap();
                let rows = ta.numel() / p.max(1);
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gb = vec![F::zero(); tb.numel()];
                for r in 0..rows {
                    ga[r * p..(r + 1) * p].copy_from_slice(&gd[r * (p + q)..r * (p + q) + p]);
                    gb[r * q..(r + 1) * q]
                        .copy_from_slice(&gd[r * (p + q) + p..(r + 1) * (p + q)]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddBias { a, b } => {
                let c = *self.nodes[*b].value.shape().first().unwrap();
                let rows = gd.len() / c.max(1);
                self.accumulate(grads, *a, gd.to_vec());
                let mut gb = vec![F::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += gd[r * c + j];
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::MulBias { a, b } => {
                let ta = self.nodes[*a].value.data();
                let tb = self.nodes[*b].value.data();
                let c = tb.len();
                let rows = gd.len() / c.max(1);
                let mut ga = vec![F::zero(); ta.len()];
                let mut gb = vec![F::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        ga[r * c + j] = gd[r * c + j] * tb[j];
                        gb[j] += gd[r * c + j] * ta[r * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRows { a, s } => {
                let rows = self.nodes[*s].value.numel();
                let c = gd.len() / rows.max(1);
                self.accumulate(grads, *a, gd.to_vec());
                let mut gs = vec![F::zero(); rows];
                for r in 0..rows {
                    for j in 0..c {
                        gs[r] += gd[r * c + j];
                    }
                }
                self.accumulate(grads, *s, gs);
            }
            Op::MulRows { a, s } => {
                let ta = self.nodes[*a].value.data();
                let ts = self.nodes[*s].value.data();
                let rows = ts.len();
                let c = gd.len() / rows.max(1);
                let mut ga = vec![F::zero(); ta.len()];
                let mut gs = vec![F::zero(); rows];
                for r in 0..rows {
                    for j in 0..c {
                        ga[r * c + j] = gd[r * c + j] * ts[r];
                        gs[r] += gd[r * c + j] * ta[r * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *s, gs);
            }
            Op::ScaleByScalar { a, s } => {
                let ta = self.nodes[*a].value.data();
                let sv = self.nodes[*s].value.data()[0];
                self.accumulate(grads, *a, gd.iter().map(|&g| g * sv).collect());
                let gs = gd
                    .iter()
                    .zip(ta)
                    .map(|(&g, &x)| g * x)
                    .fold(F::zero(), |p, q| p + q);
                self.accumulate(grads, *s, vec![gs]);
            }
            Op::RowNorm { a } => {
                let ta = self.nodes[*a].value.data();
                let norms = self.nodes[i].value.data();
                let rows = norms.len();
                let d = ta.len() / rows.max(1);
                let mut ga = vec![F::zero(); ta.len()];
                for r in 0..rows {
                    if norms[r] > F::zero() {
                        let scale = gd[r] / norms[r];
                        for j in 0..d {
                            ga[r * d + j] = scale * ta[r * d + j];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BallProject { x, radius } => {
                let tx = self.nodes[*x].value.data();
                let r_max = self.nodes[*radius].value.data()[0];
                let d = *self.nodes[*x].value.shape().last().unwrap();
                let rows = tx.len() / d.max(1);
                let mut gx = vec![F::zero(); tx.len()];
                let mut gr = F::zero();
                for r in 0..rows {
                    let row = &tx[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let n = row
                        .iter()
                        .map(|&v| v * v)
                        .fold(F::zero(), |p, q| p + q)
                        .sqrt();
                    if n <= r_max {
                        gx[r * d..(r + 1) * d].copy_from_slice(grow);
                    } else {
                        let dot = grow
                            .iter()
                            .zip(row)
                            .map(|(&g, &v)| g * v)
                            .fold(F::zero(), |p, q| p + q);
                        let s = r_max / n;
                        for j in 0..d {
                            gx[r * d + j] = s * (grow[j] - dot * row[j] / (n * n));
                        }
                        gr += dot / n;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *radius, vec![gr]);
            }
            Op::CausalConv { x, k } => {
                let tx = &self.nodes[*x].value;
                let tk = &self.nodes[*k].value;
                let (bsz, n, m) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let w = tk.shape()[1];
                let mut gx = vec![F::zero(); tx.numel()];
                let mut gk = vec![F::zero(); tk.numel()];
                for b in 0..bsz {
                    for t in 0..n {
                        for ch in 0..m {
                            let go = gd[(b * n + t) * m + ch];
                            for j in 0..w {
                                let shift = w - 1 - j;
                                if t >= shift {
                                    let xi = (b * n + (t - shift)) * m + ch;
                                    gx[xi] += go * tk.data()[ch * w + j];
                                    gk[ch * w + j] += go * tx.data()[xi];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
            }
            Op::ZohABar { a_mat, delta } => {
                let ta = &self.nodes[*a_mat].value;
                let td = &self.nodes[*delta].value;
                let (m, l) = (ta.shape()[0], ta.shape()[1]);
                let rows = td.numel() / m;
                let out = self.nodes[i].value.data();
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gdlt = vec![F::zero(); td.numel()];
                for idx in 0..rows * m {
                    let dt = td.data()[idx];
                    let ch = idx % m;
                    for s in 0..l {
                        let e = out[idx * l + s];
                        let go = gd[idx * l + s];
                        gdlt[idx] += go * ta.data()[ch * l + s] * e;
                        ga[ch * l + s] += go * dt * e;
                    }
                }
                self.accumulate(grads, *a_mat, ga);
                self.accumulate(grads, *delta, gdlt);
            }
            Op::ZohBBar { a_mat, b_in, delta } => {
                let ta = &self.nodes[*a_mat].value;
                let tb = &self.nodes[*b_in].value;
                let td = &self.nodes[*delta].value;
                let (m, l) = (ta.shape()[0], ta.shape()[1]);
                let rows = td.numel() / m;
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gb = vec![F::zero(); tb.numel()];
                let mut gdlt = vec![F::zero(); td.numel()];
                for row in 0..rows {
                    for ch in 0..m {
                        let dt = td.data()[row * m + ch];
                        for s in 0..l {
                            let av = ta.data()[ch * l + s];
                            let bv = tb.data()[row * l + s];
                            let u = dt * av;
                            let phi = zoh_phi(u);
                            let dphi = zoh_phi_deriv(u);
                            let go = gd[(row * m + ch) * l + s];
                            gdlt[row * m + ch] += go * (dphi * av * dt + phi) * bv;
                            ga[ch * l + s] += go * dphi * dt * dt * bv;
                            gb[row * l + s] += go * phi * dt;
                        }
                    }
                }
                self.accumulate(grads, *a_mat, ga);
                self.accumulate(grads, *b_in, gb);
                self.accumulate(grads, *delta, gdlt);
            }
            Op::SelectiveScan {
                a_bar,
                b_bar,
                c,
                x,
                states,
            } => {
                let ta = &self.nodes[*a_bar].value;
                let tb = &self.nodes[*b_bar].value;
                let tc = &self.nodes[*c].value;
                let tx = &self.nodes[*x].value;
                let (bsz, n, m, l) = (
                    ta.shape()[0],
                    ta.shape()[1],
                    ta.shape()[2],
                    ta.shape()[3],
                );
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gb = vec![F::zero(); tb.numel()];
                let mut gc = vec![F::zero(); tc.numel()];
                let mut gx = vec![F::zero(); tx.numel()];
                // Reverse adjoint recurrence, time-outer with one running
                // state-gradient buffer per (channel, state) lane.
                let mut dh = vec![F::zero(); m * l];
                for b in 0..bsz {
                    dh.iter_mut().for_each(|v| *v = F::zero());
                    for t in (0..n).rev() {
                        let ci = (b * n + t) * l;
                        for ch in 0..m {
                            let hi = ((b * n + t) * m + ch) * l;
                            let prev_base = if t == 0 { 0 } else { ((b * n + t - 1) * m + ch) * l };
                            let go = gd[(b * n + t) * m + ch];
                            let dl = &mut dh[ch * l..(ch + 1) * l];
                            // y[t][ch] = <c[t], h[t][ch]>
                            for s in 0..l {
                                dl[s] += go * tc.data()[ci + s];
                                gc[ci + s] += go * states[hi + s];
                            }
                            let xv = tx.data()[(b * n + t) * m + ch];
                            let mut dx = F::zero();
                            for s in 0..l {
                                let h_prev = if t == 0 {
                                    F::zero()
                                } else {
                                    states[prev_base + s]
                                };
                                ga[hi + s] += dl[s] * h_prev;
                                gb[hi + s] += dl[s] * xv;
                                dx += dl[s] * tb.data()[hi + s];
                                dl[s] *= ta.data()[hi + s];
                            }
                            gx[(b * n + t) * m + ch] += dx;
                        }
                    }
                }
                self.accumulate(grads, *a_bar, ga);
                self.accumulate(grads, *b_bar, gb);
                self.accumulate(grads, *c, gc);
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = &self.nodes[*logits].value;
                let (bsz, classes) = (tl.shape()[0], tl.shape()[1]);
                let g0 = gd[0];
                let scale = g0 / F::of(bsz as f64);
                let mut gl = vec![F::zero(); tl.numel()];
                for b in 0..bsz {
                    let row = &tl.data()[b * classes..(b + 1) * classes];
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let z: F = row.iter().map(|&v| (v - m).exp()).sum();
                    for cidx in 0..classes {
                        let p = (row[cidx] - m).exp() / z;
                        let y = if labels[b] == cidx { F::one() } else { F::zero() };
                        gl[b * classes + cidx] = scale * (p - y);
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Dropout { a, mult } => {
                self.accumulate(
                    grads,
                    *a,
                    gd.iter().zip(mult).map(|(&g, &m)| g * m).collect(),
                );
            }
        }
        Ok(())
    }
}

fn matmul_into<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn scan_dims(
    a_bar: &[usize],
    b_bar: &[usize],
    c: &[usize],
    x: &[usize],
) -> Result<(usize, usize, usize, usize)> {
    let mismatch = |lhs: &[usize], rhs: &[usize]| Error::ShapeMismatch {
        op: "selective_scan",
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    if a_bar.len() != 4 {
        return Err(mismatch(a_bar, &[]));
    }
    let (bsz, n, m, l) = (a_bar[0], a_bar[1], a_bar[2], a_bar[3]);
    if b_bar != a_bar {
        return Err(mismatch(a_bar, b_bar));
    }
    if c != [bsz, n, l] {
        return Err(mismatch(a_bar, c));
    }
    if x != [bsz, n, m] {
        return Err(mismatch(a_bar, x));
    }
    Ok((bsz, n, m, l))
}

/// Sequential recurrence, also returning the full state sequence
/// (laid out like `a_bar`: `(B, N, M, L)`). Iteration is time-outer with
/// contiguous channel/state inner loops so large sequences stream through
/// memory instead of striding.
pub(crate) fn scan_forward_with_states<F: Real>(
    a_bar: &[F],
    b_bar: &[F],
    c: &[F],
    x: &[F],
    (bsz, n, m, l): (usize, usize, usize, usize),
) -> (Vec<F>, Vec<F>) {
    let mut y = vec![F::zero(); bsz * n * m];
    let mut states = vec![F::zero(); bsz * n * m * l];
    for b in 0..bsz {
        for t in 0..n {
            let ct = &c[(b * n + t) * l..(b * n + t + 1) * l];
            for ch in 0..m {
                let hi = ((b * n + t) * m + ch) * l;
                let prev_base = if t == 0 { 0 } else { ((b * n + t - 1) * m + ch) * l };
                let xv = x[(b * n + t) * m + ch];
                let mut acc = F::zero();
                for s in 0..l {
                    let prev = if t == 0 { F::zero() } else { states[prev_base + s] };
                    let h = a_bar[hi + s] * prev + b_bar[hi + s] * xv;
                    states[hi + s] = h;
                    acc += ct[s] * h;
                }
                y[(b * n + t) * m + ch] = acc;
            }
        }
    }
    (y, states)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] worked by hand: [[19,22],[43,50]].
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unary_scalar_formulas() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, 0.0]));
        let s = tape.silu(x).unwrap();
        let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert!((tape.value(s).data()[1] - silu1).abs() < 1e-12);

        let z = tape.constant(t(&[1], &[0.0]));
        let sp = tape.softplus(z).unwrap();
        assert!((tape.value(sp).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        let err = tape.unary(x, UnaryFn::Log).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "log", .. }));
    }

    #[test]
    fn reduce_hand_oracles() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s0 = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.value(s0).data(), &[4.0, 6.0]);
        let one = tape.constant(t(&[1], &[5.0]));
        let m = tape.mean_axis(one, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let zeros = tape.constant(Tensor::zeros(vec![4]));
        let mz = tape.mean_axis(zeros, 0).unwrap();
        assert_eq!(tape.value(mz).data(), &[0.0]);
        let err = tape.sum_axis(x, 2).unwrap_err();
        assert!(matches!(err, Error::AxisOutOfRange { axis: 2, rank: 2 }));
    }

    #[test]
    fn softmax_symmetry_stability_closed_form() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let sa = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);

        let b = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let sb = tape.softmax(b, 0).unwrap();
        assert_eq!(tape.value(sb).data(), &[0.5, 0.5]);

        let c = tape.constant(t(&[2], &[0.0, 3.0f64.ln()]));
        let sc = tape.softmax(c, 0).unwrap();
        assert!((tape.value(sc).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(sc).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn causal_conv_hand_oracles() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));

        // Width-1 identity kernel.
        let k1 = tape.constant(t(&[1, 1], &[1.0]));
        let y1 = tape.causal_conv(x, k1).unwrap();
        assert_eq!(tape.value(y1).data(), &[1.0, 2.0, 3.0]);

        // Kernel [1, 1]: out[t] = x[t-1] + x[t] with zero left pad.
        let k2 = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let y2 = tape.causal_conv(x, k2).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 3.0, 5.0]);

        // Kernel [0, 1] selects the current position.
        let k3 = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let y3 = tape.causal_conv(x, k3).unwrap();
        assert_eq!(tape.value(y3).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::<f64>::uniform(vec![4, 6], -3.0, 3.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let s = tape.softmax(a, 1).unwrap();
        for r in 0..4 {
            let sum: f64 = tape.value(s).data()[r * 6..(r + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
        let shifted = x.map("shift", |v| v + 123.5).unwrap();
        let b = tape.constant(shifted);
        let s2 = tape.softmax(b, 1).unwrap();
        let diff = tape.value(s).max_abs_diff(tape.value(s2)).unwrap();
        assert!(diff < 1e-12, "constant shift moved softmax by {diff}");
    }

    #[test]
    fn causal_conv_is_bitwise_causal() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 5, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]));
        let k = tape.constant(t(&[2, 3], &[0.5, -0.2, 0.8, 0.1, 0.4, -0.6]));
        let y = tape.causal_conv(x, k).unwrap();
        // Change inputs strictly after t = 2.
        let x2 = tape.constant(t(&[1, 5, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 9.9, 9.9, 9.9, 9.9]));
        let y2 = tape.causal_conv(x2, k).unwrap();
        for t_idx in 0..=2 {
            for c in 0..2 {
                let i = t_idx * 2 + c;
                assert_eq!(
                    tape.value(y).data()[i].to_bits(),
                    tape.value(y2).data()[i].to_bits()
                );
            }
        }
    }

    #[test]
    fn overflowing_op_errors_instead_of_storing_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[800.0]));
        assert!(matches!(
            tape.exp(x).unwrap_err(),
            Error::NonFinite { op: "exp" }
        ));
        let num = tape.constant(t(&[1], &[1.0]));
        let den = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(
            tape.div(num, den).unwrap_err(),
            Error::NonFinite { op: "div" }
        ));
    }

    #[test]
    fn causal_conv_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 2]));
        let k = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            tape.causal_conv(x, k).unwrap_err(),
            Error::ShapeMismatch { op: "causal_conv", .. }
        ));
    }

    #[test]
    fn backward_square_and_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[], &[3.0]), true);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[], &[2.0]), true);
        let y = tape.leaf(t(&[], &[5.0]), true);
        let p = tape.mul(x, y).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[5.0]);
        assert_eq!(grads.wrt(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_fan_in_accumulates_by_addition() {
        // f(x) = silu(x) + silu(x): gradient is exactly twice the
        // single-consumer gradient.
        let silu_deriv = |x: f64| {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        };
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[], &[1.0]), true);
        let s1 = tape.silu(x).unwrap();
        let s2 = tape.silu(x).unwrap();
        let y = tape.add(s1, s2).unwrap();
        let grads = tape.backward(y).unwrap();
        let g = grads.wrt(x).unwrap().data()[0];
        assert!((g - 2.0 * silu_deriv(1.0)).abs() < 1e-12, "g = {g}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.square(x).unwrap();
        assert!(matches!(
            tape.backward(y).unwrap_err(),
            Error::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[], &[1.0]), true);
        let unused = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        use rand::SeedableRng;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x, "eval mode records no node");

        let mut rng_a = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let ya = tape.dropout(x, 0.5, true, &mut rng_a).unwrap();
        let yb = tape.dropout(x, 0.5, true, &mut rng_b).unwrap();
        assert_eq!(tape.value(ya).data(), tape.value(yb).data());
    }

    #[test]
    fn cross_entropy_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(vec![1, 42]));
        let l = tape.cross_entropy(logits, &[7]).unwrap();
        assert!((tape.value(l).item().unwrap() - 42.0f64.ln()).abs() < 1e-12);

        // logits [ln 1, ln 3], label 1: softmax = [1/4, 3/4], loss = -ln(3/4).
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 2], &[0.0, 3.0f64.ln()]));
        let l = tape.cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() + 0.75f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(vec![1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]).unwrap_err(),
            Error::Domain { .. }
        ));
    }

    #[test]
    fn cross_entropy_confident_limit_and_stability() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn zoh_scalar_closed_form() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[-1.0]));
        let delta = tape.constant(t(&[1, 1, 1], &[0.1]));
        let b_in = tape.constant(t(&[1, 1, 1], &[2.0]));
        let a_bar = tape.zoh_a_bar(a, delta).unwrap();
        let b_bar = tape.zoh_b_bar(a, b_in, delta).unwrap();
        let expect_a = (-0.1f64).exp();
        let expect_b = ((-0.1f64).exp_m1() / -0.1) * 0.1 * 2.0;
        assert!((tape.value(a_bar).data()[0] - expect_a).abs() < 1e-12);
        assert!((tape.value(b_bar).data()[0] - expect_b).abs() < 1e-12);
        // Frozen values from the scalar closed form.
        assert!((tape.value(a_bar).data()[0] - 0.904837).abs() < 1e-6);
        assert!((tape.value(b_bar).data()[0] - 0.190325).abs() < 1e-6);
    }

    #[test]
    fn zoh_rejects_bad_domains() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[-1.0]));
        let delta = tape.constant(t(&[1, 1, 1], &[0.0]));
        assert!(matches!(
            tape.zoh_a_bar(a, delta).unwrap_err(),
            Error::Domain { .. }
        ));
        let a_pos = tape.constant(t(&[1, 1], &[0.5]));
        let delta_ok = tape.constant(t(&[1, 1, 1], &[0.1]));
        assert!(matches!(
            tape.zoh_a_bar(a_pos, delta_ok).unwrap_err(),
            Error::Domain { .. }
        ));
    }

    #[test]
    fn selective_scan_hand_recurrence() {
        // A=0.5, B=1, C=1, x=[1,1,1] at M=L=1: y = [1, 1.5, 1.75].
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3, 1, 1], &[0.5, 0.5, 0.5]));
        let b = tape.constant(t(&[1, 3, 1, 1], &[1.0, 1.0, 1.0]));
        let c = tape.constant(t(&[1, 3, 1], &[1.0, 1.0, 1.0]));
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 1.0, 1.0]));
        let y = tape.selective_scan(a, b, c, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn ball_project_keeps_inside_and_clips_outside() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.1, 0.0, 5.0, 0.0]));
        let r = tape.constant(Tensor::scalar(1.0).unwrap());
        let y = tape.ball_project(x, r).unwrap();
        assert_eq!(&tape.value(y).data()[..2], &[0.1, 0.0]);
        assert!((tape.value(y).data()[2] - 1.0).abs() < 1e-12);
    }
}
