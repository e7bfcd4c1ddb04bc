//! Append-only tape recording primitive applications for reverse-mode
//! differentiation.
//!
//! Every primitive evaluates eagerly and pushes one node holding its output.
//! Nodes are only ever appended, so append order is a valid topological
//! order and [`Tape::backward`] walks it in reverse exactly once.

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial border handling for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Zero(usize),
    /// Mirror without repeating the edge pixel (`[2 1 | 0 1 2 | 1 0]`).
    Reflect(usize),
}

impl Padding {
    fn amount(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        kernel: usize,
        padding: Padding,
    },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    MaxScalar(Var, f64),
    Softmax(Var, usize),
    Broadcast(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of a computation. See the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// How the smaller operand of a binary primitive is repeated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand repeats over the leading axes of the left one.
    Right,
    Left,
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn bcast_rule(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.numel() == 1 || is_suffix(a.shape(), b.shape()) {
        Ok(Bcast::Right)
    } else if a.numel() == 1 || is_suffix(b.shape(), a.shape()) {
        Ok(Bcast::Left)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Sums `g` (full extent) down onto a buffer of `n` elements that was repeated.
fn reduce_repeats(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// `c = op(a) * op(b)` with arbitrary strides; `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: all strides describe in-bounds accesses of the provided slices
    // (callers pass shapes taken from the tensors). With beta = 0 the kernel
    // writes every element of the m*n output without reading it first.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    k: usize,
    pad: usize,
    padding: Padding,
}

impl ConvGeom {
    /// Source pixel for output (oy, ox) and tap (dy, dx); `None` reads zero.
    fn source(&self, oy: usize, ox: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let iy = (oy + dy) as isize - self.pad as isize;
        let ix = (ox + dx) as isize - self.pad as isize;
        match self.padding {
            Padding::Reflect(_) => Some((reflect(iy, self.h), reflect(ix, self.w))),
            _ => {
                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                    None
                } else {
                    Some((iy as usize, ix as usize))
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let row = self.k * self.k * self.cin;
        let mut cols = Vec::with_capacity(self.ho * self.wo * row);
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                for dy in 0..self.k {
                    for dx in 0..self.k {
                        match self.source(oy, ox, dy, dx) {
                            Some((sy, sx)) => {
                                let src = (sy * self.w + sx) * self.cin;
                                cols.extend_from_slice(&input[src..src + self.cin]);
                            }
                            None => cols.resize(cols.len() + self.cin, 0.0),
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64]) -> Vec<f64> {
        let row = self.k * self.k * self.cin;
        let mut dx_in = vec![0.0; self.h * self.w * self.cin];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let base = (oy * self.wo + ox) * row;
                for dy in 0..self.k {
                    for dx in 0..self.k {
                        if let Some((sy, sx)) = self.source(oy, ox, dy, dx) {
                            let dst = (sy * self.w + sx) * self.cin;
                            let src = base + (dy * self.k + dx) * self.cin;
                            for c in 0..self.cin {
                                dx_in[dst + c] += dcols[src + c];
                            }
                        }
                    }
                }
            }
        }
        dx_in
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Logistic function evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Largest argument whose exponential is finite.
const EXP_MAX_ARG: f64 = 709.782_712_893_384;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- binary elementwise -------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rule = bcast_rule(name, ta, tb)?;
        let (shape, data) = match rule {
            Bcast::Same => (
                ta.shape().to_vec(),
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| f(*x, *y))
                    .collect(),
            ),
            Bcast::Right => {
                let bd = tb.data();
                let mut out = Vec::with_capacity(ta.numel());
                for chunk in ta.data().chunks_exact(bd.len().max(1)) {
                    out.extend(chunk.iter().zip(bd).map(|(x, y)| f(*x, *y)));
                }
                (ta.shape().to_vec(), out)
            }
            Bcast::Left => {
                let ad = ta.data();
                let mut out = Vec::with_capacity(tb.numel());
                for chunk in tb.data().chunks_exact(ad.len().max(1)) {
                    out.extend(ad.iter().zip(chunk).map(|(x, y)| f(*x, *y)));
                }
                (tb.shape().to_vec(), out)
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Elementwise sum; the smaller operand may be a scalar or a trailing-axes suffix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a fixed scalar attribute.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    /// Adds a fixed scalar attribute.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Offset(x), rg))
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let out = transpose_data(t.data(), m, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    /// 2-D cross-correlation with a square kernel and unit stride.
    ///
    /// `input` is `[H, W, C_in]` (channels last), `weight` is
    /// `[k, k, C_in, C_out]`; the result is `[H', W', C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, padding: Padding) -> Result<Var> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (si, sw) = (ti.shape(), tw.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sw.to_vec(),
        };
        if si.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != si[2] {
            return Err(mismatch());
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sw[0], sw[3]);
        let pad = padding.amount();
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch());
        }
        if matches!(padding, Padding::Reflect(_)) && (pad >= h || pad >= w) {
            return Err(Error::Domain {
                op: "conv2d",
                detail: format!("reflection padding {pad} needs extents above {pad}"),
            });
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            ho: h + 2 * pad - k + 1,
            wo: w + 2 * pad - k + 1,
            k,
            pad,
            padding,
        };
        let cols = geom.im2col(ti.data());
        let row = k * k * cin;
        let out = gemm(
            geom.ho * geom.wo,
            row,
            cout,
            &cols,
            row,
            1,
            tw.data(),
            cout,
            1,
        );
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            Tensor::new(vec![geom.ho, geom.wo, cout], out)?,
            Op::Conv2d {
                input,
                weight,
                kernel: k,
                padding,
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let s = self.value(x).shape();
        if axis >= s.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    fn reduce_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => Vec::new(),
            Some(a) => {
                let mut s = shape.to_vec();
                s.remove(a);
                s
            }
        }
    }

    fn sum_values(t: &Tensor, axis: Option<usize>) -> Vec<f64> {
        match axis {
            None => vec![t.data().iter().fold(0.0, |acc, v| acc + v)],
            Some(a) => {
                let (outer, len, inner) = axis_split(t.shape(), a);
                let d = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, v) in dst.iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                out
            }
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            self.check_axis("sum", x, a)?;
        }
        let t = self.value(x);
        let out = Tensor::new(
            Self::reduce_shape(t.shape(), axis),
            Self::sum_values(t, axis),
        )?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum(x, axis), rg))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            self.check_axis("mean", x, a)?;
        }
        let t = self.value(x);
        let count = match axis {
            None => t.numel(),
            Some(a) => t.shape()[a],
        };
        if count == 0 {
            return Err(Error::Domain {
                op: "mean",
                detail: "empty reduction".into(),
            });
        }
        let data = Self::sum_values(t, axis)
            .into_iter()
            .map(|v| v / count as f64)
            .collect();
        let out = Tensor::new(Self::reduce_shape(t.shape(), axis), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean(x, axis), rg))
    }

    /// Maximum over an axis; gradient flows to the first maximal element.
    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            self.check_axis("max", x, a)?;
        }
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Domain {
                op: "max",
                detail: "empty reduction".into(),
            });
        }
        let d = t.data();
        let (values, argmax) = match axis {
            None => {
                let mut best = 0;
                for (i, v) in d.iter().enumerate() {
                    if *v > d[best] {
                        best = i;
                    }
                }
                (vec![d[best]], vec![best])
            }
            Some(a) => {
                let (outer, len, inner) = axis_split(t.shape(), a);
                let mut vals = Vec::with_capacity(outer * inner);
                let mut idx = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let j = (o * len + l) * inner + i;
                            if d[j] > d[best] {
                                best = j;
                            }
                        }
                        vals.push(d[best]);
                        idx.push(best);
                    }
                }
                (vals, idx)
            }
        };
        let out = Tensor::new(Self::reduce_shape(t.shape(), axis), values)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Max { x, argmax }, rg))
    }

    // ---- unary elementwise ----------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, op, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v > EXP_MAX_ARG) {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("argument {v} overflows"),
            });
        }
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self
            .value(x)
            .data()
            .iter()
            .find(|v| v.is_nan() || **v <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {v}"),
            });
        }
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(x, s)` elementwise; the gradient is zero wherever `x <= s`.
    pub fn max_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| if v > s { v } else { s }, Op::MaxScalar(x, s))
    }

    /// Softmax along `axis`, shifted by the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if len == 0 {
            return Err(Error::Domain {
                op: "softmax",
                detail: "empty axis".into(),
            });
        }
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for l in 0..len {
                    m = m.max(d[at(l)]);
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    // ---- structural -----------------------------------------------------

    /// Repeats `x` over leading axes (or from a scalar) to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !(t.numel() == 1 || is_suffix(shape, t.shape())) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let src = t.data();
        let data = (0..n).map(|i| src[i % src.len()]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Broadcast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        let (outer, full, inner) = axis_split(t.shape(), axis);
        if start + len > full {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let d = t.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Domain {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base_shape = self.value(first).shape().to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(node) to every trainable leaf reachable from
    /// `loss`. Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut pending: Vec<Vec<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.0 + 1, Vec::new);
        pending[loss.0].push(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if pending[id].is_empty() {
                continue;
            }
            let g = combine_contributions(std::mem::take(&mut pending[id]));
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (input, contribution) in self.input_grads(id, &g) {
                if self.nodes[input.0].requires_grad {
                    pending[input.0].push(contribution);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn input_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_repeats(g, val(*a).numel())));
                out.push((*b, reduce_repeats(g, val(*b).numel())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_repeats(g, val(*a).numel())));
                let mut gb = reduce_repeats(g, val(*b).numel());
                gb.iter_mut().for_each(|v| *v = -*v);
                out.push((*b, gb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (ta.numel(), tb.numel());
                if self.rg(*a) {
                    out.push((*a, reduce_repeats(&mul_repeating(g, tb.data()), na)));
                }
                if self.rg(*b) {
                    out.push((*b, reduce_repeats(&mul_repeating(g, ta.data()), nb)));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Offset(x) => out.push((*x, g.to_vec())),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // g [m,n] x b^T [n,k]
                    out.push((*a, gemm(m, n, k, g, n, 1, tb.data(), 1, n)));
                }
                if self.rg(*b) {
                    // a^T [k,m] x g [m,n]
                    out.push((*b, gemm(k, m, n, ta.data(), 1, k, g, n, 1)));
                }
            }
            Op::Transpose(x) => {
                let s = val(*x).shape();
                out.push((*x, transpose_data(g, s[1], s[0])));
            }
            Op::Conv2d {
                input,
                weight,
                kernel,
                padding,
            } => {
                let (ti, tw) = (val(*input), val(*weight));
                let (h, w, cin) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let cout = tw.shape()[3];
                let k = *kernel;
                let pad = padding.amount();
                let geom = ConvGeom {
                    h,
                    w,
                    cin,
                    ho: h + 2 * pad - k + 1,
                    wo: w + 2 * pad - k + 1,
                    k,
                    pad,
                    padding: *padding,
                };
                let row = k * k * cin;
                let npix = geom.ho * geom.wo;
                if self.rg(*weight) {
                    let cols = geom.im2col(ti.data());
                    out.push((*weight, gemm(row, npix, cout, &cols, 1, row, g, cout, 1)));
                }
                if self.rg(*input) {
                    let dcols = gemm(npix, cout, row, g, cout, 1, tw.data(), 1, cout);
                    out.push((*input, geom.col2im(&dcols)));
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let t = val(*x);
                let scale = match (&node.op, axis) {
                    (Op::Mean(..), None) => 1.0 / t.numel() as f64,
                    (Op::Mean(..), Some(a)) => 1.0 / t.shape()[*a] as f64,
                    _ => 1.0,
                };
                let gx = match axis {
                    None => vec![g[0] * scale; t.numel()],
                    Some(a) => {
                        let (outer, len, inner) = axis_split(t.shape(), *a);
                        let mut gx = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for _ in 0..len {
                                gx.extend(src.iter().map(|v| v * scale));
                            }
                        }
                        gx
                    }
                };
                out.push((*x, gx));
            }
            Op::Max { x, argmax, .. } => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (gi, &j) in g.iter().zip(argmax) {
                    gx[j] += gi;
                }
                out.push((*x, gx));
            }
            Op::Exp(x) => out.push((*x, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())),
            Op::Log(x) => {
                let xd = val(*x).data();
                out.push((*x, g.iter().zip(xd).map(|(gi, xi)| gi / xi).collect()));
            }
            Op::Tanh(x) => out.push((
                *x,
                g.iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect(),
            )),
            Op::Sigmoid(x) => out.push((
                *x,
                g.iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect(),
            )),
            Op::Gelu(x) => {
                let xd = val(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gi, xi)| gi * gelu_grad(*xi))
                        .collect(),
                ));
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                ));
            }
            Op::MaxScalar(x, s) => {
                let xd = val(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gi, xi)| if xi > s { *gi } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Broadcast(x) => out.push((*x, reduce_repeats(g, val(*x).numel()))),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Slice { x, axis, start } => {
                let t = val(*x);
                let (outer, full, inner) = axis_split(t.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; t.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((x, gx));
                }
            }
        }
        out
    }
}

/// `g * other`, with `other` repeated to the length of `g` when it is shorter.
fn mul_repeating(g: &[f64], other: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len());
    for chunk in g.chunks_exact(other.len().max(1)) {
        out.extend(chunk.iter().zip(other).map(|(x, y)| x * y));
    }
    out
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

/// Sums gradient contributions so that the result does not depend on the
/// order in which consumers were appended: per element, values are added
/// in ascending order.
fn combine_contributions(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    match parts.len() {
        1 => parts.pop().unwrap(),
        2 => {
            let b = parts.pop().unwrap();
            let mut a = parts.pop().unwrap();
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        }
        k => {
            let mut column = vec![0.0; k];
            (0..parts[0].len())
                .map(|i| {
                    for (c, p) in column.iter_mut().zip(&parts) {
                        *c = p[i];
                    }
                    column.sort_by(f64::total_cmp);
                    column.iter().sum()
                })
                .collect()
        }
    }
}
