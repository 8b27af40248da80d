//! Graph-irrelevant per-row functions carried by `ApplyEdge` / `ApplyVertex`.
//!
//! Each function evaluates one output row from one row of every input, so the
//! executor can drive it under any thread mapping. Functions that produce a
//! parameter gradient instead accumulate into a parameter-shaped buffer.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Dir, Graph};
use crate::tensor::{leaky_relu, sigmoid, Elementwise, ParamTensor};

/// A rectangular slice of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ParamRef {
    pub param: usize,
    pub row0: usize,
    pub rows: usize,
    pub col0: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn whole(param: usize, rows: usize, cols: usize) -> Self {
        Self { param, row0: 0, rows, col0: 0, cols }
    }

    pub fn col_slice(self, col0: usize, cols: usize) -> Self {
        Self { col0: self.col0 + col0, cols, ..self }
    }

    pub fn row_slice(self, row0: usize, rows: usize) -> Self {
        Self { row0: self.row0 + row0, rows, ..self }
    }

    pub fn is_whole(&self, shape: (usize, usize)) -> bool {
        self.row0 == 0 && self.col0 == 0 && (self.rows, self.cols) == shape
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}[{}:{},{}:{}]", self.param, self.row0, self.row0 + self.rows, self.col0, self.col0 + self.cols)
    }
}

/// Borrowed view of a parameter slice.
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    data: &'a [f64],
    stride: usize,
    r: ParamRef,
}

impl<'a> ParamView<'a> {
    pub fn new(params: &'a [ParamTensor], r: ParamRef) -> Self {
        let t = &params[r.param].value;
        Self { data: &t.data, stride: t.cols, r }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(self.r.row0 + i) * self.stride + self.r.col0 + j]
    }
}

/// Pointwise activation used by fused bias+activation and gradient kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Act {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Act::Relu => x.max(0.0),
            Act::LeakyRelu(a) => leaky_relu(x, a),
            Act::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation input.
    #[inline]
    fn grad_from_input(self, x: f64) -> f64 {
        match self {
            Act::Relu => f64::from(u8::from(x > 0.0)),
            Act::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Act::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Derivative expressed through the activation output. Valid for the
    /// leaky variant only with a positive slope.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Act::Relu => f64::from(u8::from(y > 0.0)),
            Act::LeakyRelu(a) => {
                if y > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Act::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApplyFn {
    /// Unary or binary elementwise kernel.
    Elem(Elementwise),
    Scale(f64),
    /// Multiplies by `1 / degree` of the row vertex (0 for isolated vertices).
    ScaleInvDegree(Dir),
    /// `(r x h*k) * (r x h)`, second operand broadcast across each head block.
    MulHeads { heads: usize },
    /// Per-head sum of products, `(r x h*k, r x h*k) -> r x h`.
    HeadSum { heads: usize },
    /// Dense projection `x * W`.
    Linear(ParamRef),
    /// Per-head dot product with rows of `p (h x k)`.
    HeadDot { p: ParamRef, heads: usize },
    BiasAct { bias: ParamRef, act: Option<Act> },
    /// Diagonal-covariance gaussian kernels: `(r x d) -> r x K`.
    Gaussian { mu: ParamRef, inv_sigma: ParamRef },
    /// Kernel-weighted mean of `K` feature blocks: `(r x K*f, r x K) -> r x f`.
    KernelMix { kernels: usize },

    // Backward-only kernels.
    GradIn(Act),
    GradOut(Act),
    /// `-g * y / b` for `y = a / b`.
    DivGradDenom,
    LinearT(ParamRef),
    HeadDotT { p: ParamRef, heads: usize },
    /// Extracts one half of each head block of a `u_concat_v` gradient.
    ConcatPart { heads: usize, part: usize },
    GaussianGradInput { mu: ParamRef, inv_sigma: ParamRef },
    KernelMixGradS { kernels: usize },
    KernelMixGradW { kernels: usize },
    /// Keeps the gradient only on the edge recorded as the group's argmax.
    SelectArgmax,

    // Parameter-gradient kernels (output is parameter-shaped).
    LinearWGrad(ParamRef),
    HeadDotPGrad { p: ParamRef, heads: usize },
    BiasGrad(ParamRef),
    GaussianMuGrad { mu: ParamRef, inv_sigma: ParamRef },
    GaussianSigmaGrad { mu: ParamRef, inv_sigma: ParamRef },
}

/// Per-row evaluation context.
pub struct RowCtx<'a> {
    pub graph: &'a Graph,
    /// Vertex id or edge id, matching the node's domain.
    pub row: usize,
}

fn shape_err(f: &ApplyFn, msg: impl fmt::Display) -> Error {
    Error::Shape(format!("{}: {msg}", f.name()))
}

impl ApplyFn {
    pub fn name(&self) -> String {
        match self {
            ApplyFn::Elem(e) => match e {
                Elementwise::LeakyRelu(a) => format!("leaky_relu({a})"),
                other => format!("{other:?}").to_lowercase(),
            },
            ApplyFn::Scale(c) => format!("scale({c})"),
            ApplyFn::ScaleInvDegree(d) => format!("inv_degree({d:?})"),
            ApplyFn::MulHeads { heads } => format!("mul_heads(h={heads})"),
            ApplyFn::HeadSum { heads } => format!("head_sum(h={heads})"),
            ApplyFn::Linear(p) => format!("linear({p})"),
            ApplyFn::HeadDot { p, heads } => format!("head_dot({p},h={heads})"),
            ApplyFn::BiasAct { bias, act } => match act {
                Some(a) => format!("bias_act({bias},{a:?})"),
                None => format!("bias({bias})"),
            },
            ApplyFn::Gaussian { mu, inv_sigma } => format!("gaussian({mu},{inv_sigma})"),
            ApplyFn::KernelMix { kernels } => format!("kernel_mix(K={kernels})"),
            ApplyFn::GradIn(a) => format!("grad_in({a:?})"),
            ApplyFn::GradOut(a) => format!("grad_out({a:?})"),
            ApplyFn::DivGradDenom => "div_grad_denom".into(),
            ApplyFn::LinearT(p) => format!("linear_t({p})"),
            ApplyFn::HeadDotT { p, heads } => format!("head_dot_t({p},h={heads})"),
            ApplyFn::ConcatPart { heads, part } => format!("concat_part(h={heads},{part})"),
            ApplyFn::GaussianGradInput { mu, inv_sigma } => format!("gaussian_grad_x({mu},{inv_sigma})"),
            ApplyFn::KernelMixGradS { kernels } => format!("kernel_mix_grad_s(K={kernels})"),
            ApplyFn::KernelMixGradW { kernels } => format!("kernel_mix_grad_w(K={kernels})"),
            ApplyFn::SelectArgmax => "select_argmax".into(),
            ApplyFn::LinearWGrad(p) => format!("linear_w_grad({p})"),
            ApplyFn::HeadDotPGrad { p, heads } => format!("head_dot_p_grad({p},h={heads})"),
            ApplyFn::BiasGrad(p) => format!("bias_grad({p})"),
            ApplyFn::GaussianMuGrad { mu, .. } => format!("gaussian_mu_grad({mu})"),
            ApplyFn::GaussianSigmaGrad { inv_sigma, .. } => format!("gaussian_sigma_grad({inv_sigma})"),
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            ApplyFn::Elem(e) => e.arity(),
            ApplyFn::Scale(_)
            | ApplyFn::ScaleInvDegree(_)
            | ApplyFn::Linear(_)
            | ApplyFn::HeadDot { .. }
            | ApplyFn::BiasAct { .. }
            | ApplyFn::Gaussian { .. }
            | ApplyFn::LinearT(_)
            | ApplyFn::HeadDotT { .. }
            | ApplyFn::ConcatPart { .. }
            | ApplyFn::BiasGrad(_) => 1,
            ApplyFn::MulHeads { .. }
            | ApplyFn::HeadSum { .. }
            | ApplyFn::KernelMix { .. }
            | ApplyFn::GradIn(_)
            | ApplyFn::GradOut(_)
            | ApplyFn::KernelMixGradS { .. }
            | ApplyFn::KernelMixGradW { .. }
            | ApplyFn::SelectArgmax
            | ApplyFn::LinearWGrad(_)
            | ApplyFn::HeadDotPGrad { .. } => 2,
            ApplyFn::DivGradDenom
            | ApplyFn::GaussianGradInput { .. }
            | ApplyFn::GaussianMuGrad { .. }
            | ApplyFn::GaussianSigmaGrad { .. } => 3,
        }
    }

    /// Expensive functions contain a dense projection; they are fusion
    /// barriers and are never recomputed.
    pub fn is_expensive(&self) -> bool {
        matches!(
            self,
            ApplyFn::Linear(_)
                | ApplyFn::HeadDot { .. }
                | ApplyFn::LinearT(_)
                | ApplyFn::HeadDotT { .. }
                | ApplyFn::LinearWGrad(_)
                | ApplyFn::HeadDotPGrad { .. }
        )
    }

    /// Parameter slice this function's output accumulates into, if any.
    pub fn param_target(&self) -> Option<ParamRef> {
        match *self {
            ApplyFn::LinearWGrad(p) | ApplyFn::BiasGrad(p) => Some(p),
            ApplyFn::HeadDotPGrad { p, .. } => Some(p),
            ApplyFn::GaussianMuGrad { mu, .. } => Some(mu),
            ApplyFn::GaussianSigmaGrad { inv_sigma, .. } => Some(inv_sigma),
            _ => None,
        }
    }

    pub fn is_param_grad(&self) -> bool {
        self.param_target().is_some()
    }

    /// Parameters read by the function.
    pub fn params(&self) -> Vec<ParamRef> {
        match *self {
            ApplyFn::Linear(p) | ApplyFn::LinearT(p) => vec![p],
            ApplyFn::HeadDot { p, .. } | ApplyFn::HeadDotT { p, .. } => vec![p],
            ApplyFn::BiasAct { bias, .. } => vec![bias],
            ApplyFn::Gaussian { mu, inv_sigma }
            | ApplyFn::GaussianGradInput { mu, inv_sigma }
            | ApplyFn::GaussianMuGrad { mu, inv_sigma }
            | ApplyFn::GaussianSigmaGrad { mu, inv_sigma } => vec![mu, inv_sigma],
            _ => vec![],
        }
    }

    /// Output width for the given input widths; validates shapes.
    pub fn out_cols(&self, ins: &[usize]) -> Result<usize> {
        if ins.len() != self.arity() {
            return Err(shape_err(self, format!("expects {} inputs, got {}", self.arity(), ins.len())));
        }
        let same = |a: usize, b: usize| {
            if a == b {
                Ok(a)
            } else {
                Err(shape_err(self, format!("width {a} vs {b}")))
            }
        };
        let heads_div = |w: usize, h: usize| {
            if h > 0 && w % h == 0 {
                Ok(w / h)
            } else {
                Err(shape_err(self, format!("width {w} not divisible by {h} heads")))
            }
        };
        match self {
            ApplyFn::Elem(e) if e.arity() == 2 => same(ins[0], ins[1]),
            ApplyFn::Elem(_) | ApplyFn::Scale(_) | ApplyFn::ScaleInvDegree(_) => Ok(ins[0]),
            ApplyFn::MulHeads { heads } => {
                heads_div(ins[0], *heads)?;
                same(ins[1], *heads)?;
                Ok(ins[0])
            }
            ApplyFn::HeadSum { heads } => {
                same(ins[0], ins[1])?;
                heads_div(ins[0], *heads)?;
                Ok(*heads)
            }
            ApplyFn::Linear(p) => {
                same(ins[0], p.rows)?;
                Ok(p.cols)
            }
            ApplyFn::LinearT(p) => {
                same(ins[0], p.cols)?;
                Ok(p.rows)
            }
            ApplyFn::HeadDot { p, heads } => {
                same(p.rows, *heads)?;
                same(ins[0], heads * p.cols)?;
                Ok(*heads)
            }
            ApplyFn::HeadDotT { p, heads } => {
                same(p.rows, *heads)?;
                same(ins[0], *heads)?;
                Ok(heads * p.cols)
            }
            ApplyFn::BiasAct { bias, .. } => {
                same(bias.rows, 1)?;
                same(ins[0], bias.cols)
            }
            ApplyFn::Gaussian { mu, inv_sigma } => {
                same(mu.rows, inv_sigma.rows)?;
                same(mu.cols, inv_sigma.cols)?;
                same(ins[0], mu.cols)?;
                Ok(mu.rows)
            }
            ApplyFn::KernelMix { kernels } => {
                same(ins[1], *kernels)?;
                heads_div(ins[0], *kernels)
            }
            ApplyFn::GradIn(_) | ApplyFn::GradOut(_) => same(ins[0], ins[1]),
            ApplyFn::DivGradDenom => {
                same(ins[0], ins[1])?;
                same(ins[0], ins[2])
            }
            ApplyFn::ConcatPart { heads, part } => {
                if *part > 1 {
                    return Err(shape_err(self, "part must be 0 or 1"));
                }
                let per_head = heads_div(ins[0], *heads)?;
                if per_head % 2 != 0 {
                    return Err(shape_err(self, "odd concat block"));
                }
                Ok(ins[0] / 2)
            }
            ApplyFn::GaussianGradInput { mu, .. } => {
                same(ins[0], mu.rows)?;
                same(ins[1], mu.cols)?;
                same(ins[2], mu.rows)?;
                Ok(mu.cols)
            }
            ApplyFn::KernelMixGradS { kernels } => {
                same(ins[1], *kernels)?;
                Ok(ins[0] * kernels)
            }
            ApplyFn::KernelMixGradW { kernels } => {
                same(ins[1], ins[0] * kernels)?;
                Ok(*kernels)
            }
            ApplyFn::SelectArgmax => same(ins[0], ins[1]),
            ApplyFn::LinearWGrad(p) => {
                same(ins[0], p.rows)?;
                same(ins[1], p.cols)?;
                Ok(p.cols)
            }
            ApplyFn::HeadDotPGrad { p, heads } => {
                same(ins[0], heads * p.cols)?;
                same(ins[1], *heads)?;
                Ok(p.cols)
            }
            ApplyFn::BiasGrad(p) => same(ins[0], p.cols),
            ApplyFn::GaussianMuGrad { mu, .. } | ApplyFn::GaussianSigmaGrad { mu, .. } => {
                same(ins[0], mu.rows)?;
                same(ins[1], mu.cols)?;
                same(ins[2], mu.rows)?;
                Ok(mu.cols)
            }
        }
    }

    /// FLOPs charged per evaluated row.
    ///
    /// Elementwise kernels cost one unit per output element; projections cost
    /// `2 * in * out` like a dense matmul.
    pub fn flops_per_row(&self, ins: &[usize], out: usize) -> u64 {
        let v = match self {
            ApplyFn::Elem(_)
            | ApplyFn::Scale(_)
            | ApplyFn::ScaleInvDegree(_)
            | ApplyFn::MulHeads { .. }
            | ApplyFn::GradIn(_)
            | ApplyFn::GradOut(_)
            | ApplyFn::DivGradDenom
            | ApplyFn::ConcatPart { .. }
            | ApplyFn::SelectArgmax => out,
            ApplyFn::BiasAct { act, .. } => out * if act.is_some() { 2 } else { 1 },
            ApplyFn::BiasGrad(_) => ins[0],
            ApplyFn::HeadSum { .. } => 2 * ins[0],
            ApplyFn::Linear(p) | ApplyFn::LinearT(p) | ApplyFn::LinearWGrad(p) => 2 * p.rows * p.cols,
            ApplyFn::HeadDot { p, heads }
            | ApplyFn::HeadDotT { p, heads }
            | ApplyFn::HeadDotPGrad { p, heads } => 2 * heads * p.cols,
            ApplyFn::Gaussian { mu, .. } => mu.rows * (4 * mu.cols + 2),
            ApplyFn::GaussianGradInput { mu, .. }
            | ApplyFn::GaussianMuGrad { mu, .. }
            | ApplyFn::GaussianSigmaGrad { mu, .. } => mu.rows * (4 * mu.cols + 1),
            ApplyFn::KernelMix { kernels } => out * (2 * kernels + 1),
            ApplyFn::KernelMixGradS { kernels } => 2 * kernels * ins[0],
            ApplyFn::KernelMixGradW { kernels } => kernels * (2 * ins[0] + 1),
        };
        v as u64
    }

    /// Elements of input `i` touched per evaluated row. Operands broadcast
    /// across a head block are charged once per use.
    pub fn reads_per_row(&self, i: usize, ins: &[usize], out: usize) -> usize {
        match (self, i) {
            (ApplyFn::MulHeads { .. }, 1) => out,
            (ApplyFn::KernelMix { .. }, 1) => out * ins[1],
            _ => ins[i],
        }
    }

    /// Evaluates one output row.
    pub fn eval_row(&self, params: &[ParamTensor], ins: &[&[f64]], ctx: &RowCtx<'_>, out: &mut [f64]) {
        match self {
            ApplyFn::Elem(e) => {
                if e.arity() == 1 {
                    for (o, &x) in out.iter_mut().zip(ins[0]) {
                        *o = e.unary(x);
                    }
                } else {
                    for ((o, &a), &b) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                        *o = e.binary(a, b);
                    }
                }
            }
            ApplyFn::Scale(c) => {
                for (o, &x) in out.iter_mut().zip(ins[0]) {
                    *o = c * x;
                }
            }
            ApplyFn::ScaleInvDegree(dir) => {
                let deg = ctx.graph.index(*dir).degree(ctx.row);
                let s = if deg == 0 { 0.0 } else { 1.0 / deg as f64 };
                for (o, &x) in out.iter_mut().zip(ins[0]) {
                    *o = s * x;
                }
            }
            ApplyFn::MulHeads { heads } => {
                let k = ins[0].len() / heads;
                for (j, o) in out.iter_mut().enumerate() {
                    *o = ins[0][j] * ins[1][j / k];
                }
            }
            ApplyFn::HeadSum { heads } => {
                let k = ins[0].len() / heads;
                for (h, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in h * k..(h + 1) * k {
                        s += ins[0][j] * ins[1][j];
                    }
                    *o = s;
                }
            }
            ApplyFn::Linear(p) => {
                let w = ParamView::new(params, *p);
                out.fill(0.0);
                for (i, &x) in ins[0].iter().enumerate() {
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += x * w.get(i, c);
                    }
                }
            }
            ApplyFn::LinearT(p) => {
                let w = ParamView::new(params, *p);
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (c, &g) in ins[0].iter().enumerate() {
                        s += g * w.get(i, c);
                    }
                    *o = s;
                }
            }
            ApplyFn::HeadDot { p, .. } => {
                let a = ParamView::new(params, *p);
                let k = p.cols;
                for (h, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..k {
                        s += ins[0][h * k + j] * a.get(h, j);
                    }
                    *o = s;
                }
            }
            ApplyFn::HeadDotT { p, .. } => {
                let a = ParamView::new(params, *p);
                let k = p.cols;
                for (j, o) in out.iter_mut().enumerate() {
                    *o = ins[0][j / k] * a.get(j / k, j % k);
                }
            }
            ApplyFn::BiasAct { bias, act } => {
                let b = ParamView::new(params, *bias);
                for (c, (o, &x)) in out.iter_mut().zip(ins[0]).enumerate() {
                    let z = x + b.get(0, c);
                    *o = act.map_or(z, |a| a.apply(z));
                }
            }
            ApplyFn::Gaussian { mu, inv_sigma } => {
                let (m, s) = (ParamView::new(params, *mu), ParamView::new(params, *inv_sigma));
                for (k, o) in out.iter_mut().enumerate() {
                    let mut q = 0.0;
                    for (d, &x) in ins[0].iter().enumerate() {
                        let z = (x - m.get(k, d)) * s.get(k, d);
                        q += z * z;
                    }
                    *o = (-0.5 * q).exp();
                }
            }
            ApplyFn::KernelMix { kernels } => {
                let f = out.len();
                for (j, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for k in 0..*kernels {
                        s += ins[1][k] * ins[0][k * f + j];
                    }
                    *o = s / *kernels as f64;
                }
            }
            ApplyFn::GradIn(a) => {
                for ((o, &g), &x) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                    *o = g * a.grad_from_input(x);
                }
            }
            ApplyFn::GradOut(a) => {
                for ((o, &g), &y) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                    *o = g * a.grad_from_output(y);
                }
            }
            ApplyFn::DivGradDenom => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = -ins[0][j] * ins[1][j] / ins[2][j];
                }
            }
            ApplyFn::ConcatPart { heads, part } => {
                let k = out.len() / heads;
                for (j, o) in out.iter_mut().enumerate() {
                    let (h, i) = (j / k, j % k);
                    *o = ins[0][h * 2 * k + part * k + i];
                }
            }
            ApplyFn::GaussianGradInput { mu, inv_sigma } => {
                let (m, s) = (ParamView::new(params, *mu), ParamView::new(params, *inv_sigma));
                out.fill(0.0);
                for k in 0..mu.rows {
                    let gw = ins[0][k] * ins[2][k];
                    for (d, o) in out.iter_mut().enumerate() {
                        let sd = s.get(k, d);
                        *o -= gw * (ins[1][d] - m.get(k, d)) * sd * sd;
                    }
                }
            }
            ApplyFn::KernelMixGradS { kernels } => {
                let f = ins[0].len();
                let inv = 1.0 / *kernels as f64;
                for (j, o) in out.iter_mut().enumerate() {
                    *o = ins[0][j % f] * ins[1][j / f] * inv;
                }
            }
            ApplyFn::KernelMixGradW { kernels } => {
                let f = ins[0].len();
                for (k, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..f {
                        s += ins[0][j] * ins[1][k * f + j];
                    }
                    *o = s / *kernels as f64;
                }
            }
            ApplyFn::SelectArgmax => {
                let e = ctx.row as f64;
                for ((o, &g), &am) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                    *o = if am == e { g } else { 0.0 };
                }
            }
            ApplyFn::LinearWGrad(_)
            | ApplyFn::HeadDotPGrad { .. }
            | ApplyFn::BiasGrad(_)
            | ApplyFn::GaussianMuGrad { .. }
            | ApplyFn::GaussianSigmaGrad { .. } => {
                unreachable!("parameter-gradient kernels accumulate, they do not produce rows")
            }
        }
    }

    /// Adds one row's contribution to a parameter-gradient buffer laid out
    /// like the target slice.
    pub fn accumulate_row(&self, params: &[ParamTensor], ins: &[&[f64]], acc: &mut [f64]) {
        match self {
            ApplyFn::LinearWGrad(p) => {
                for (i, &x) in ins[0].iter().enumerate() {
                    for (c, &g) in ins[1].iter().enumerate() {
                        acc[i * p.cols + c] += x * g;
                    }
                }
            }
            ApplyFn::HeadDotPGrad { p, .. } => {
                let k = p.cols;
                for (h, &g) in ins[1].iter().enumerate() {
                    for j in 0..k {
                        acc[h * k + j] += g * ins[0][h * k + j];
                    }
                }
            }
            ApplyFn::BiasGrad(_) => {
                for (a, &d) in acc.iter_mut().zip(ins[0]) {
                    *a += d;
                }
            }
            ApplyFn::GaussianMuGrad { mu, inv_sigma } | ApplyFn::GaussianSigmaGrad { mu, inv_sigma } => {
                let (m, s) = (ParamView::new(params, *mu), ParamView::new(params, *inv_sigma));
                let want_mu = matches!(self, ApplyFn::GaussianMuGrad { .. });
                let d_len = mu.cols;
                for k in 0..mu.rows {
                    let gw = ins[0][k] * ins[2][k];
                    for d in 0..d_len {
                        let diff = ins[1][d] - m.get(k, d);
                        let sd = s.get(k, d);
                        acc[k * d_len + d] += if want_mu {
                            gw * diff * sd * sd
                        } else {
                            -gw * diff * diff * sd
                        };
                    }
                }
            }
            _ => unreachable!("{} does not produce a parameter gradient", self.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn ctx(g: &Graph) -> RowCtx<'_> {
        RowCtx { graph: g, row: 0 }
    }

    fn eval(f: &ApplyFn, params: &[ParamTensor], ins: &[&[f64]], out_len: usize) -> Vec<f64> {
        let g = Graph::from_edges(1, &[]).unwrap();
        let mut out = vec![0.0; out_len];
        f.eval_row(params, ins, &ctx(&g), &mut out);
        out
    }

    #[test]
    fn head_dot_matches_concat_split() {
        // a^T [x || y] == a_l^T x + a_r^T y on one head.
        let a = ParamTensor::new("a", Tensor::from_rows(&[&[0.5, -1.0, 2.0, 0.25]]));
        let params = [a];
        let whole = ParamRef::whole(0, 1, 4);
        let x = [1.0, 2.0];
        let y = [3.0, -4.0];
        let cat = [x[0], x[1], y[0], y[1]];
        let full = eval(&ApplyFn::HeadDot { p: whole, heads: 1 }, &params, &[&cat], 1)[0];
        let l = eval(&ApplyFn::HeadDot { p: whole.col_slice(0, 2), heads: 1 }, &params, &[&x], 1)[0];
        let r = eval(&ApplyFn::HeadDot { p: whole.col_slice(2, 2), heads: 1 }, &params, &[&y], 1)[0];
        assert_eq!(full, l + r);
        assert_eq!(full, 0.5 - 2.0 + 6.0 - 1.0);
    }

    #[test]
    fn linear_flops_and_shapes() {
        let p = ParamRef::whole(0, 4, 3);
        let f = ApplyFn::Linear(p);
        assert!(f.is_expensive());
        assert_eq!(f.out_cols(&[4]).unwrap(), 3);
        assert!(f.out_cols(&[5]).is_err());
        assert_eq!(f.flops_per_row(&[4], 3), 24);
        assert!(!ApplyFn::Elem(Elementwise::Exp).is_expensive());
        let hd = ApplyFn::HeadDot { p: ParamRef::whole(0, 2, 3), heads: 2 };
        assert_eq!(hd.out_cols(&[6]).unwrap(), 2);
        assert_eq!(hd.flops_per_row(&[6], 2), 12);
    }

    #[test]
    fn mul_heads_broadcast_reads() {
        let f = ApplyFn::MulHeads { heads: 2 };
        assert_eq!(f.out_cols(&[6, 2]).unwrap(), 6);
        assert_eq!(f.reads_per_row(1, &[6, 2], 6), 6);
        assert_eq!(f.reads_per_row(0, &[6, 2], 6), 6);
        let out = eval(&f, &[], &[&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[10.0, 100.0]], 6);
        assert_eq!(out, vec![10.0, 20.0, 30.0, 400.0, 500.0, 600.0]);
    }

    #[test]
    fn concat_part_extracts_head_halves() {
        // Two heads of width 2: [u0 u0' v0 v0' | u1 u1' v1 v1'].
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let left = eval(&ApplyFn::ConcatPart { heads: 2, part: 0 }, &[], &[&g], 4);
        let right = eval(&ApplyFn::ConcatPart { heads: 2, part: 1 }, &[], &[&g], 4);
        assert_eq!(left, vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(right, vec![3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn gaussian_at_mean_is_one() {
        let mu = ParamTensor::new("mu", Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]]));
        let s = ParamTensor::new("s", Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 2.0]]));
        let params = [mu, s];
        let f = ApplyFn::Gaussian { mu: ParamRef::whole(0, 2, 2), inv_sigma: ParamRef::whole(1, 2, 2) };
        let out = eval(&f, &params, &[&[1.0, 2.0]], 2);
        assert_eq!(out[0], 1.0);
        assert!((out[1] - (-0.5f64 * (1.0 + 16.0)).exp()).abs() < 1e-15);
    }

    #[test]
    fn param_grad_targets() {
        let p = ParamRef::whole(3, 2, 2);
        assert_eq!(ApplyFn::BiasGrad(p).param_target(), Some(p));
        assert!(ApplyFn::Linear(p).param_target().is_none());
        let mut acc = vec![0.0; 4];
        ApplyFn::LinearWGrad(p).accumulate_row(&[], &[&[1.0, 2.0], &[3.0, 4.0]], &mut acc);
        assert_eq!(acc, vec![3.0, 4.0, 6.0, 8.0]);
    }
}
