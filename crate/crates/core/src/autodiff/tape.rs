use std::collections::HashMap;

use crate::autodiff::kernels::{self, AxisTap, Broadcast, ConvDims};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Param,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Tanh,
    Softplus,
    Sigmoid,
    Abs,
    SmoothL1,
    AddScalar,
    Scale,
    Broadcast,
    Reshape,
    SumAxis,
    SumAll,
    Cumsum,
    Softmax,
    Trilinear,
    Gather,
    Conv3d,
    Affine,
    SliceLast,
    LaplaceDensity,
    Blur2d,
    Upsample,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Param => "param",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Abs => "abs",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::AddScalar => "add_scalar",
            OpKind::Scale => "scale",
            OpKind::Broadcast => "broadcast",
            OpKind::Reshape => "reshape",
            OpKind::SumAxis => "sum_axis",
            OpKind::SumAll => "sum_all",
            OpKind::Cumsum => "cumsum",
            OpKind::Softmax => "softmax",
            OpKind::Trilinear => "trilinear",
            OpKind::Gather => "gather",
            OpKind::Conv3d => "conv3d",
            OpKind::Affine => "affine",
            OpKind::SliceLast => "slice_last",
            OpKind::LaplaceDensity => "laplace_density",
            OpKind::Blur2d => "blur2d",
            OpKind::Upsample => "upsample",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl OpKind {
    pub const ALL: [OpKind; 29] = [
    OpKind::Param,
    OpKind::Constant,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Neg,
    OpKind::Exp,
    OpKind::Tanh,
    OpKind::Softplus,
    OpKind::Sigmoid,
    OpKind::Abs,
    OpKind::SmoothL1,
    OpKind::AddScalar,
    OpKind::Scale,
    OpKind::Broadcast,
    OpKind::Reshape,
    OpKind::SumAxis,
    OpKind::SumAll,
    OpKind::Cumsum,
    OpKind::Softmax,
    OpKind::Trilinear,
    OpKind::Gather,
    OpKind::Conv3d,
    OpKind::Affine,
    OpKind::SliceLast,
    OpKind::LaplaceDensity,
    OpKind::Blur2d,
    OpKind::Upsample,
];
}

/// Eight interpolation corners of one trilinear query; `None` for
/// out-of-range queries, which read as zero.
pub type Corners<T> = Option<[(u32, T); 8]>;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Tanh,
    Softplus,
    Sigmoid,
    Abs,
    SmoothL1,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Param,
    Constant,
    Unary(Unary, usize),
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        map_a: Broadcast,
        map_b: Broadcast,
    },
    AddScalar(usize),
    Scale(usize, T),
    Broadcast(usize, Broadcast),
    Reshape(usize),
    SumAxis { x: usize, axis: usize },
    SumAll(usize),
    Cumsum { x: usize, axis: usize, exclusive: bool },
    Softmax { x: usize, axis: usize },
    Trilinear { grid: usize, corners: Vec<Corners<T>> },
    Gather { x: usize, rows: Vec<usize> },
    Conv3d { x: usize, w: usize, b: usize, dims: ConvDims },
    Affine { x: usize, w: usize, b: usize, cin: usize, cout: usize },
    SliceLast { x: usize, start: usize, len: usize },
    LaplaceDensity { sdf: usize, beta: usize },
    Blur2d { x: usize, kernel: Vec<T> },
    Upsample { x: usize, rows: Vec<AxisTap>, cols: Vec<AxisTap> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::Unary(u, _) => match u {
                Unary::Neg => OpKind::Neg,
                Unary::Exp => OpKind::Exp,
                Unary::Tanh => OpKind::Tanh,
                Unary::Softplus => OpKind::Softplus,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Abs => OpKind::Abs,
                Unary::SmoothL1 => OpKind::SmoothL1,
            },
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
                Binary::Div => OpKind::Div,
            },
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Cumsum { .. } => OpKind::Cumsum,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Trilinear { .. } => OpKind::Trilinear,
            Op::Gather { .. } => OpKind::Gather,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::Affine { .. } => OpKind::Affine,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::LaplaceDensity { .. } => OpKind::LaplaceDensity,
            Op::Blur2d { .. } => OpKind::Blur2d,
            Op::Upsample { .. } => OpKind::Upsample,
        }
    }
}

struct Node<T> {
    value: Grid<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction and `backward` visits it once in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    corrupt: Option<(OpKind, T)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter on the tape.
pub struct Gradients<T> {
    grads: HashMap<usize, Grid<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a parameter; `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Grid<T>> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Grid<T>> {
        self.grads.remove(&v.0)
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Laplace-CDF density `Psi_beta(-s) / beta` and its partials in `s` and `beta`.
#[inline]
pub(crate) fn laplace_density_partials<T: Real>(s: T, beta: T) -> (T, T, T) {
    let half = T::of(0.5);
    let inv = T::one() / beta;
    if s >= T::zero() {
        let e = (-s * inv).exp();
        let sigma = half * e * inv;
        (sigma, -sigma * inv, sigma * (s - beta) * inv * inv)
    } else {
        let e = (s * inv).exp();
        let psi = T::one() - half * e;
        let sigma = psi * inv;
        let ds = -half * e * inv * inv;
        let db = -psi * inv * inv + half * e * s * inv * inv * inv;
        (sigma, ds, db)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the derivative of every primitive of `kind` by `factor` during
    /// backward. Used by the gradient checker's negative tests.
    #[doc(hidden)]
    pub fn corrupt_derivative(&mut self, kind: OpKind, factor: T) {
        self.corrupt = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &Grid<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Adds a learnable leaf.
    pub fn param(&mut self, value: Grid<T>) -> Var {
        self.push_raw(value, Op::Param, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Grid<T>) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Grid<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Grid<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name().to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------------
    // Elementwise.

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let f: fn(T) -> T = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => |v| v.exp(),
            Unary::Tanh => |v| v.tanh(),
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Abs => |v| v.abs(),
            Unary::SmoothL1 => |v| {
                let a = v.abs();
                if a < T::one() {
                    T::of(0.5) * v * v
                } else {
                    a - T::of(0.5)
                }
            },
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary(kind, x.0), &[x.0])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    /// Huber-style smooth L1 with transition point 1.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::SmoothL1, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::contract(name, format!("shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let map_a = kernels::broadcast_map(&sa, &shape);
        let map_b = kernels::broadcast_map(&sb, &shape);
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let out: Vec<T> = match (&map_a, &map_b) {
            (Broadcast::Same, Broadcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Broadcast::Same, Broadcast::Scalar) => da.iter().map(|&x| f(x, db[0])).collect(),
            (Broadcast::Scalar, Broadcast::Same) => db.iter().map(|&y| f(da[0], y)).collect(),
            _ => (0..n)
                .map(|i| f(da[map_a.index(i)], db[map_b.index(i)]))
                .collect(),
        };
        let value = Grid::new(shape, out)?;
        self.push(
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                map_a,
                map_b,
            },
            &[a.0, b.0],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x.0), &[x.0])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x.0, c), &[x.0])
    }

    // ---------------------------------------------------------------------
    // Shape manipulation and reductions.

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match kernels::broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::contract(
                    "broadcast",
                    format!("cannot broadcast {sx:?} to {shape:?}"),
                ))
            }
        }
        let map = kernels::broadcast_map(&sx, shape);
        let d = self.data(x);
        let n: usize = shape.iter().product();
        let out = Grid::new(shape, (0..n).map(|i| d[map.index(i)]).collect())?;
        self.push(out, Op::Broadcast(x.0, map), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x.0), &[x.0])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::contract(
                op,
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        Ok(kernels::split_axis(shape, axis))
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("sum_axis", x, axis)?;
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..][..inner];
                for (a, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *a += s;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        self.push(Grid::new(shape, out)?, Op::SumAxis { x: x.0, axis }, &[x.0])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Grid::scalar(s), Op::SumAll(x.0), &[x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.cumsum_impl(x, axis, false)
    }

    /// Exclusive cumulative sum along `axis`: element `k` sums elements `< k`.
    /// Avoids the cancellation of subtracting `x` from the inclusive sum.
    pub fn cumsum_exclusive(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.cumsum_impl(x, axis, true)
    }

    fn cumsum_impl(&mut self, x: Var, axis: usize, exclusive: bool) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("cumsum", x, axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut run = T::zero();
                for k in 0..n {
                    let at = (o * n + k) * inner + i;
                    if exclusive {
                        out[at] = run;
                        run += src[at];
                    } else {
                        run += src[at];
                        out[at] = run;
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Grid::new(shape, out)?, Op::Cumsum { x: x.0, axis, exclusive }, &[x.0])
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", x, axis)?;
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Grid::new(shape, out)?, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    /// Channels `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).channels();
        if len == 0 || start + len > c {
            return Err(Error::contract(
                "slice_last",
                format!("range {start}..{} exceeds {c} channels", start + len),
            ));
        }
        let d = self.data(x);
        let out: Vec<T> = d
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(
            Grid::new(shape, out)?,
            Op::SliceLast { x: x.0, start, len },
            &[x.0],
        )
    }

    /// Rows of `x` viewed as `[rows, channels]`; output `[rows.len(), channels]`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let c = self.value(x).channels();
        let nrows = self.value(x).len() / c;
        if rows.is_empty() {
            return Err(Error::contract("gather", "empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::contract(
                "gather",
                format!("row {bad} out of range ({nrows} rows)"),
            ));
        }
        let d = self.data(x);
        let out: Vec<T> = rows
            .iter()
            .flat_map(|&r| d[r * c..(r + 1) * c].iter().copied())
            .collect();
        let shape = vec![rows.len(), c];
        self.push(Grid::new(shape, out)?, Op::Gather { x: x.0, rows }, &[x.0])
    }

    // ---------------------------------------------------------------------
    // Structured primitives.

    /// Trilinear gather from a `[A, B, C, ch]` lattice at continuous indices.
    /// Queries outside `[0, n-1]` on any axis, or `None`, read as zero.
    pub fn trilinear(&mut self, grid: Var, points: &[Option<[f64; 3]>]) -> Result<Var> {
        let shape = self.shape(grid).to_vec();
        if shape.len() != 4 {
            return Err(Error::contract(
                "trilinear",
                format!("expected [A, B, C, ch] lattice, got {shape:?}"),
            ));
        }
        if points.is_empty() {
            return Err(Error::contract("trilinear", "no query points"));
        }
        let dims = [shape[0], shape[1], shape[2]];
        let ch = shape[3];
        let corners: Vec<Corners<T>> = points
            .iter()
            .map(|p| p.and_then(|p| trilinear_corners(dims, p)))
            .collect();
        let d = self.data(grid);
        let mut out = vec![T::zero(); points.len() * ch];
        for (o, c) in out.chunks_mut(ch).zip(&corners) {
            if let Some(c) = c {
                for &(cell, w) in c {
                    let src = &d[cell as usize * ch..][..ch];
                    for (a, &s) in o.iter_mut().zip(src) {
                        *a += w * s;
                    }
                }
            }
        }
        let value = Grid::new([points.len(), ch], out)?;
        self.push(value, Op::Trilinear { grid: grid.0, corners }, &[grid.0])
    }

    /// 3D convolution over `[H, W, D, Cin]` with weights `[3, 3, 3, Cin, Cout]`
    /// and bias `[Cout]`; zero padded so the output is `[H, W, D, Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sw.len() != 5 || sw[..3] != [3, 3, 3] || sw[3] != sx[3] || sb != [sw[4]] {
            return Err(Error::contract(
                "conv3d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?} are incompatible"),
            ));
        }
        let dims = ConvDims {
            h: sx[0],
            w: sx[1],
            d: sx[2],
            cin: sx[3],
            cout: sw[4],
        };
        let out = kernels::conv3_forward(self.data(x), self.data(w), self.data(b), dims);
        let value = Grid::new([dims.h, dims.w, dims.d, dims.cout], out)?;
        self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.0,
                dims,
            },
            &[x.0, w.0, b.0],
        )
    }

    /// `x · w + b` over the trailing axis, `w` is `[Cin, Cout]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] || sb != [sw[1]] {
            return Err(Error::contract(
                "affine",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?} are incompatible"),
            ));
        }
        let (cin, cout) = (sw[0], sw[1]);
        let out = kernels::affine_forward(self.data(x), self.data(w), self.data(b), cin, cout);
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let value = Grid::new(shape, out)?;
        self.push(
            value,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
                cin,
                cout,
            },
            &[x.0, w.0, b.0],
        )
    }

    /// Density `beta^-1 · Psi_beta(-sdf)` with a Laplace CDF `Psi_beta`.
    /// `beta` must be a positive `[1]` grid.
    pub fn laplace_density(&mut self, sdf: Var, beta: Var) -> Result<Var> {
        if self.value(beta).len() != 1 {
            return Err(Error::contract("laplace_density", "beta must be a scalar"));
        }
        let b = self.value(beta).item();
        if b.is_nan() || b <= T::zero() {
            return Err(Error::contract(
                "laplace_density",
                format!("beta must be positive, got {b}"),
            ));
        }
        let out = self.value(sdf).map(|s| laplace_density_partials(s, b).0);
        self.push(
            out,
            Op::LaplaceDensity {
                sdf: sdf.0,
                beta: beta.0,
            },
            &[sdf.0, beta.0],
        )
    }

    /// Separable zero-padded filter over the two leading axes of `[H, W, C]`.
    /// The kernel must be odd-length and symmetric.
    pub fn blur2d(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract("blur2d", format!("expected [H, W, C], got {shape:?}")));
        }
        let n = kernel.len();
        if n % 2 == 0 || (0..n).any(|i| kernel[i] != kernel[n - 1 - i]) {
            return Err(Error::contract("blur2d", "kernel must be odd-length and symmetric"));
        }
        let out = kernels::blur2d(self.data(x), shape[0], shape[1], shape[2], kernel);
        let value = Grid::new(shape, out)?;
        self.push(
            value,
            Op::Blur2d {
                x: x.0,
                kernel: kernel.to_vec(),
            },
            &[x.0],
        )
    }

    /// Bilinear resize of `[h, w, C]` to `[height, width, C]`, align-corners false.
    pub fn upsample(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || height < shape[0] || width < shape[1] {
            return Err(Error::contract(
                "upsample",
                format!("cannot upsample {shape:?} to {height}x{width}"),
            ));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let rows = kernels::bilinear_taps(h, height);
        let cols = kernels::bilinear_taps(w, width);
        let d = self.data(x);
        let mut out = vec![T::zero(); height * width * c];
        for (oi, ty) in rows.iter().enumerate() {
            let fy = T::of(ty.frac);
            for (oj, tx) in cols.iter().enumerate() {
                let fx = T::of(tx.frac);
                let o = &mut out[(oi * width + oj) * c..][..c];
                let taps = [
                    (ty.lo, tx.lo, (T::one() - fy) * (T::one() - fx)),
                    (ty.lo, tx.hi, (T::one() - fy) * fx),
                    (ty.hi, tx.lo, fy * (T::one() - fx)),
                    (ty.hi, tx.hi, fy * fx),
                ];
                for (i, j, wgt) in taps {
                    let src = &d[(i * w + j) * c..][..c];
                    for (a, &s) in o.iter_mut().zip(src) {
                        *a += wgt * s;
                    }
                }
            }
        }
        let value = Grid::new([height, width, c], out)?;
        self.push(value, Op::Upsample { x: x.0, rows, cols }, &[x.0])
    }

    // ---------------------------------------------------------------------
    // Reverse pass.

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    /// Parameters not connected to `loss` receive zero grids.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != [1] {
            return Err(Error::contract(
                "backward",
                format!("loss must have shape [1], got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                Op::Param => {
                    out.insert(id, Grid::new(node.value.shape(), g)?);
                    continue;
                }
                Op::Constant => continue,
                _ => {}
            }
            if let Some((kind, factor)) = self.corrupt {
                if node.op.kind() == kind {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.propagate(node, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                out.entry(id)
                    .or_insert_with(|| Grid::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let wants = |i: usize| self.nodes[i].needs_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[i].needs_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![T::zero(); self.nodes[i].value.len()]);
            f(slot);
        };
        let y = node.value.data();

        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Unary(kind, x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| match kind {
                    Unary::Neg => gx.iter_mut().zip(g).for_each(|(a, &gi)| *a -= gi),
                    Unary::Exp => {
                        for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                            *a += gi * yi;
                        }
                    }
                    Unary::Tanh => {
                        for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                            *a += gi * (T::one() - yi * yi);
                        }
                    }
                    Unary::Softplus => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                            *a += gi * sigmoid(xi);
                        }
                    }
                    Unary::Sigmoid => {
                        for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                            *a += gi * yi * (T::one() - yi);
                        }
                    }
                    Unary::Abs => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                            if xi > T::zero() {
                                *a += gi;
                            } else if xi < T::zero() {
                                *a -= gi;
                            }
                        }
                    }
                    Unary::SmoothL1 => {
                        for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                            let d = if xi.abs() < T::one() { xi } else { xi.signum() };
                            *a += gi * d;
                        }
                    }
                });
            }
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (a, b) = (*a, *b);
                if wants(a) {
                    acc(a, &mut |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            let d = match kind {
                                Binary::Add | Binary::Sub => gi,
                                Binary::Mul => gi * bv[map_b.index(i)],
                                Binary::Div => gi / bv[map_b.index(i)],
                            };
                            ga[map_a.index(i)] += d;
                        }
                    });
                }
                if wants(b) {
                    acc(b, &mut |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            let d = match kind {
                                Binary::Add => gi,
                                Binary::Sub => -gi,
                                Binary::Mul => gi * av[map_a.index(i)],
                                Binary::Div => -gi * y[i] / bv[map_b.index(i)],
                            };
                            gb[map_b.index(i)] += d;
                        }
                    });
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &gi)| *a += gi));
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &gi)| *a += gi * *c));
            }
            Op::Broadcast(x, map) => {
                acc(*x, &mut |gx| {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[map.index(i)] += gi;
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(self.nodes[*x].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut gx[(o * n + k) * inner..][..inner];
                            for (a, &gi) in dst.iter_mut().zip(&g[o * inner..][..inner]) {
                                *a += gi;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Cumsum { x, axis, exclusive } => {
                let (outer, n, inner) = kernels::split_axis(self.nodes[*x].value.shape(), *axis);
                let exclusive = *exclusive;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut run = T::zero();
                            for k in (0..n).rev() {
                                let at = (o * n + k) * inner + i;
                                if exclusive {
                                    gx[at] += run;
                                    run += g[at];
                                } else {
                                    run += g[at];
                                    gx[at] += run;
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(self.nodes[*x].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Trilinear { grid, corners } => {
                let ch = self.nodes[*grid].value.channels();
                acc(*grid, &mut |gg| {
                    for (gi, c) in g.chunks(ch).zip(corners) {
                        if let Some(c) = c {
                            for &(cell, w) in c {
                                let dst = &mut gg[cell as usize * ch..][..ch];
                                for (a, &v) in dst.iter_mut().zip(gi) {
                                    *a += w * v;
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather { x, rows } => {
                let ch = self.nodes[*x].value.channels();
                acc(*x, &mut |gx| {
                    for (gi, &r) in g.chunks(ch).zip(rows) {
                        for (a, &v) in gx[r * ch..][..ch].iter_mut().zip(gi) {
                            *a += v;
                        }
                    }
                });
            }
            Op::Conv3d { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::conv3_backward(val(*x), val(*w), g, *dims);
                acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(a, &v)| *a += v));
                acc(*w, &mut |s| s.iter_mut().zip(&gw).for_each(|(a, &v)| *a += v));
                acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(a, &v)| *a += v));
            }
            Op::Affine { x, w, b, cin, cout } => {
                let (gx, gw, gb) = kernels::affine_backward(val(*x), val(*w), g, *cin, *cout);
                acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(a, &v)| *a += v));
                acc(*w, &mut |s| s.iter_mut().zip(&gw).for_each(|(a, &v)| *a += v));
                acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(a, &v)| *a += v));
            }
            Op::SliceLast { x, start, len } => {
                let c = self.nodes[*x].value.channels();
                acc(*x, &mut |gx| {
                    for (dst, src) in gx.chunks_mut(c).zip(g.chunks(*len)) {
                        for (a, &v) in dst[*start..*start + *len].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                });
            }
            Op::LaplaceDensity { sdf, beta } => {
                let s = val(*sdf);
                let bta = val(*beta)[0];
                acc(*sdf, &mut |gs| {
                    for ((a, &gi), &si) in gs.iter_mut().zip(g).zip(s) {
                        *a += gi * laplace_density_partials(si, bta).1;
                    }
                });
                acc(*beta, &mut |gb| {
                    let total: T = g
                        .iter()
                        .zip(s)
                        .map(|(&gi, &si)| gi * laplace_density_partials(si, bta).2)
                        .sum();
                    gb[0] += total;
                });
            }
            Op::Blur2d { x, kernel } => {
                let shape = self.nodes[*x].value.shape();
                let back = kernels::blur2d(g, shape[0], shape[1], shape[2], kernel);
                acc(*x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(a, &v)| *a += v));
            }
            Op::Upsample { x, rows, cols } => {
                let shape = self.nodes[*x].value.shape();
                let (w, c) = (shape[1], shape[2]);
                let width = cols.len();
                acc(*x, &mut |gx| {
                    for (oi, ty) in rows.iter().enumerate() {
                        let fy = T::of(ty.frac);
                        for (oj, tx) in cols.iter().enumerate() {
                            let fx = T::of(tx.frac);
                            let gi = &g[(oi * width + oj) * c..][..c];
                            let taps = [
                                (ty.lo, tx.lo, (T::one() - fy) * (T::one() - fx)),
                                (ty.lo, tx.hi, (T::one() - fy) * fx),
                                (ty.hi, tx.lo, fy * (T::one() - fx)),
                                (ty.hi, tx.hi, fy * fx),
                            ];
                            for (i, j, wgt) in taps {
                                let dst = &mut gx[(i * w + j) * c..][..c];
                                for (a, &v) in dst.iter_mut().zip(gi) {
                                    *a += wgt * v;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Corner cells and barycentric weights of a lattice query, or `None` when
/// the query falls outside `[0, n-1]` on some axis.
pub fn trilinear_corners<T: Real>(dims: [usize; 3], p: [f64; 3]) -> Corners<T> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let x = p[a];
        if !(x >= 0.0 && x <= (n - 1) as f64) {
            return None;
        }
        let l = (x.floor() as usize).min(n - 1);
        lo[a] = l;
        hi[a] = (l + 1).min(n - 1);
        frac[a] = x - l as f64;
    }
    let cell = |i: usize, j: usize, k: usize| ((i * dims[1] + j) * dims[2] + k) as u32;
    let mut out = [(0u32, T::zero()); 8];
    let mut n = 0;
    for (ci, wi) in [(lo[0], 1.0 - frac[0]), (hi[0], frac[0])] {
        for (cj, wj) in [(lo[1], 1.0 - frac[1]), (hi[1], frac[1])] {
            for (ck, wk) in [(lo[2], 1.0 - frac[2]), (hi[2], frac[2])] {
                out[n] = (cell(ci, cj, ck), T::of(wi * wj * wk));
                n += 1;
            }
        }
    }
    Some(out)
}
