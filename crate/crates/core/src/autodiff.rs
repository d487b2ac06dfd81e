//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every forward operation in insertion order; [`Tape::backward`]
//! walks the nodes in strict reverse order and accumulates vector-Jacobian products.
//! The op set is closed: it covers exactly what the depth network and the training
//! losses need. The tape is generic over the element type so the same program can be
//! evaluated in `f32` for training and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element of a tensor.
pub trait Element: Float + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    /// Height and width of the two trailing axes.
    pub fn hw(&self) -> (usize, usize) {
        let r = self.shape.len();
        match r {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[r - 2], self.shape[r - 1]),
        }
    }

    /// Element at row `y`, column `x` of the trailing 2-D plane.
    pub fn at(&self, y: usize, x: usize) -> T {
        let (_, w) = self.hw();
        self.data[y * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bilinear read of a 2-D plane at subpixel `(u, v)` (column, row).
///
/// Valid only when all four lattice neighbours are inside the image; out-of-range
/// reads return `None` instead of clamping.
pub fn bilinear<T: Element>(image: &Tensor<T>, u: f64, v: f64) -> Option<f64> {
    let (h, w) = image.hw();
    let tap = Tap::<f64>::locate(u, v, w, h)?;
    let d = image.data();
    let i00 = d[tap.v0 * w + tap.u0].f64();
    let i01 = d[tap.v0 * w + tap.u0 + 1].f64();
    let i10 = d[(tap.v0 + 1) * w + tap.u0].f64();
    let i11 = d[(tap.v0 + 1) * w + tap.u0 + 1].f64();
    let (fu, fv) = (tap.fu, tap.fv);
    Some((1.0 - fv) * ((1.0 - fu) * i00 + fu * i01) + fv * ((1.0 - fu) * i10 + fu * i11))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    valid: bool,
    u0: usize,
    v0: usize,
    fu: T,
    fv: T,
}

impl<T: Element> Tap<T> {
    fn invalid() -> Self {
        Self {
            valid: false,
            u0: 0,
            v0: 0,
            fu: T::zero(),
            fv: T::zero(),
        }
    }

    fn locate(u: f64, v: f64, w: usize, h: usize) -> Option<Self> {
        if !(u.is_finite() && v.is_finite()) || w < 2 || h < 2 {
            return None;
        }
        if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
            return None;
        }
        let u0 = (u.floor() as usize).min(w - 2);
        let v0 = (v.floor() as usize).min(h - 2);
        Some(Self {
            valid: true,
            u0,
            v0,
            fu: T::of(u - u0 as f64),
            fv: T::of(v - v0 as f64),
        })
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    Offset(Var),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Elu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    DiffX(Var),
    DiffY(Var),
    Box3(Var),
    GridSample {
        image: Var,
        coords: Var,
        taps: Vec<Tap<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.lens.get(v.0).copied().unwrap_or(0)],
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op<T>,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that carries no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", Op::Leaf, t.shape, t.data, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("param", Op::Leaf, t.shape, t.data, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(name, op, shape, value, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(name, op, shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("offset", a, Op::Offset(a), |x| x + c)
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "scale node must hold one value"));
        }
        let k = self.value(s)[0];
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(a) || self.rg(s);
        let shape = self.shape(a).to_vec();
        self.push("scale_by", Op::ScaleBy(a, s), shape, value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary("elu", a, Op::Elu(a), |x| {
            if x > T::zero() {
                x
            } else {
                x.exp() - T::one()
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary("recip", a, Op::Recip(a), |x| T::one() / x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|x| x.f64()).sum();
        let rg = self.rg(a);
        self.push("sum", Op::Sum(a), vec![1], vec![T::of(s)], rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).iter().map(|x| x.f64()).sum();
        let rg = self.rg(a);
        self.push("mean", Op::Mean(a), vec![1], vec![T::of(s / n as f64)], rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", Op::Reshape(a), shape, value, rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            value,
            rg,
        )
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, KH, KW]`, `bias` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (is, ws) = (self.shape(input), self.shape(weight));
        if is.len() != 4 || ws.len() != 4 || is[1] != ws[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {is:?}, weight {ws:?}")));
        }
        let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let x = self.value(input);
        let k = self.value(weight);
        let mut out = vec![T::zero(); n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                let plane = &mut out[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
                if let Some(bv) = bias {
                    let bias_v = self.nodes[bv.0].value[co];
                    plane.iter_mut().for_each(|o| *o = bias_v);
                }
                for ci in 0..cin {
                    let xin = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *o = *o + wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            vec![n, cout, ho, wo],
            out,
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(a).len() / (h * w).max(1);
        let x = self.value(a);
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(src[(y / 2) * w + xx / 2]);
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        let rg = self.rg(a);
        self.push("upsample2x", Op::Upsample2x(a), shape, out, rg)
    }

    /// Forward difference along the last axis: `out[.., x] = a[.., x+1] - a[.., x]`.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (h, w) = plane_hw(&s);
        if w < 2 {
            return Err(Error::shape("diff_x", format!("{s:?}")));
        }
        let planes = self.value(a).len() / (h * w);
        let x = self.value(a);
        let mut out = Vec::with_capacity(planes * h * (w - 1));
        for row in 0..planes * h {
            let r = &x[row * w..(row + 1) * w];
            out.extend(r.windows(2).map(|p| p[1] - p[0]));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = w - 1;
        let rg = self.rg(a);
        self.push("diff_x", Op::DiffX(a), shape, out, rg)
    }

    /// Forward difference along the second-to-last axis.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (h, w) = plane_hw(&s);
        if h < 2 || s.len() < 2 {
            return Err(Error::shape("diff_y", format!("{s:?}")));
        }
        let planes = self.value(a).len() / (h * w);
        let x = self.value(a);
        let mut out = Vec::with_capacity(planes * (h - 1) * w);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in 0..h - 1 {
                for xx in 0..w {
                    out.push(src[(y + 1) * w + xx] - src[y * w + xx]);
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = h - 1;
        let rg = self.rg(a);
        self.push("diff_y", Op::DiffY(a), shape, out, rg)
    }

    /// 3x3 mean filter over the two trailing axes with edge replication.
    pub fn box3(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (h, w) = plane_hw(&s);
        let planes = self.value(a).len() / (h * w).max(1);
        let x = self.value(a);
        let ninth = T::of(1.0 / 9.0);
        let mut out = vec![T::zero(); x.len()];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for yy in box_taps(y, h) {
                        for xk in box_taps(xx, w) {
                            acc = acc + src[yy * w + xk];
                        }
                    }
                    dst[y * w + xx] = acc * ninth;
                }
            }
        }
        let rg = self.rg(a);
        self.push("box3", Op::Box3(a), s, out, rg)
    }

    /// Bilinear sampling of a single-channel image at subpixel coordinates.
    ///
    /// `image` has shape `[.., H, W]` with unit leading extents; `coords` has shape
    /// `[.., 2]` holding `(u, v)` = (column, row) pairs. Coordinates whose four lattice
    /// neighbours are not all inside the image yield value 0 and `false` in the
    /// returned mask. Differentiable with respect to both image and coordinates.
    pub fn grid_sample(&mut self, image: Var, coords: Var) -> Result<(Var, Vec<bool>)> {
        let is = self.shape(image).to_vec();
        let (h, w) = plane_hw(&is);
        if is.len() < 2 || self.value(image).len() != h * w {
            return Err(Error::shape("grid_sample", format!("image {is:?}")));
        }
        let cs = self.shape(coords).to_vec();
        if cs.last() != Some(&2) {
            return Err(Error::shape("grid_sample", format!("coords {cs:?}")));
        }
        let img = self.value(image);
        let c = self.value(coords);
        let n = c.len() / 2;
        let mut taps = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for i in 0..n {
            let (u, v) = (c[2 * i].f64(), c[2 * i + 1].f64());
            match Tap::<T>::locate(u, v, w, h) {
                Some(t) => {
                    let i00 = img[t.v0 * w + t.u0];
                    let i01 = img[t.v0 * w + t.u0 + 1];
                    let i10 = img[(t.v0 + 1) * w + t.u0];
                    let i11 = img[(t.v0 + 1) * w + t.u0 + 1];
                    let one = T::one();
                    out.push(
                        (one - t.fv) * ((one - t.fu) * i00 + t.fu * i01)
                            + t.fv * ((one - t.fu) * i10 + t.fu * i11),
                    );
                    taps.push(t);
                    mask.push(true);
                }
                None => {
                    out.push(T::zero());
                    taps.push(Tap::invalid());
                    mask.push(false);
                }
            }
        }
        let rg = self.rg(image) || self.rg(coords);
        let shape = if cs.len() == 1 {
            vec![1]
        } else {
            cs[..cs.len() - 1].to_vec()
        };
        let v = self.push(
            "grid_sample",
            Op::GridSample {
                image,
                coords,
                taps,
            },
            shape,
            out,
            rg,
        )?;
        Ok((v, mask))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::NotScalar(self.nodes[root.0].shape.clone()));
        }
        let n = root.0 + 1;
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else {
                continue;
            };
            self.vjp(node, g, lo, &lens);
        }
        if grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads, lens })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<T>>], lens: &[usize], v: Var) -> Option<&'a mut [T]> {
        if self.nodes[v.0].requires_grad {
            Some(accumulate(&mut lo[v.0], lens[v.0]))
        } else {
            None
        }
    }

    fn vjp(&self, node: &Node<T>, g: &[T], lo: &mut [Option<Vec<T>>], lens: &[usize]) {
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(gb) = self.slot(lo, lens, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(gb) = self.slot(lo, lens, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + x * y;
                    }
                }
                if let Some(gb) = self.slot(lo, lens, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + x * y;
                    }
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(lo, lens, *b) {
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            gb[i] = gb[i] + g[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s)[0];
                let av = self.value(*a);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * k);
                }
                if let Some(gs) = self.slot(lo, lens, *s) {
                    let dot: f64 = g.iter().zip(av).map(|(x, y)| x.f64() * y.f64()).sum();
                    gs[0] = gs[0] + T::of(dot);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d = *d + x * y * (one - y);
                    }
                }
            }
            Op::Elu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for i in 0..g.len() {
                        let dy = if av[i] > T::zero() { one } else { node.value[i] + one };
                        ga[i] = ga[i] + g[i] * dy;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for i in 0..g.len() {
                        let s = if av[i] > T::zero() {
                            one
                        } else if av[i] < T::zero() {
                            -one
                        } else {
                            T::zero()
                        };
                        ga[i] = ga[i] + g[i] * s;
                    }
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * T::of(2.0) * av[i];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d = *d + x * y;
                    }
                }
            }
            Op::Recip(a) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d = *d - x * y * y;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(lo, lens, *a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    let gi = g[0] / n;
                    ga.iter_mut().for_each(|d| *d = *d + gi);
                }
            }
            Op::Concat { inputs, axis } => {
                let total = node.shape[*axis];
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let mut start = 0;
                for &v in inputs {
                    let extent = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(lo, lens, v) {
                        let chunk = extent * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + start * inner..][..chunk];
                            for (d, &x) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d = *d + x;
                            }
                        }
                    }
                    start += extent;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv2d_vjp(node, g, *input, *weight, *bias, *stride, *pad, lo, lens),
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = plane_hw(s);
                let planes = self.value(*a).len() / (h * w).max(1);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for p in 0..planes {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut ga[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let d = &mut dst[(y / 2) * w + x / 2];
                                *d = *d + src[y * 2 * w + x];
                            }
                        }
                    }
                }
            }
            Op::DiffX(a) => {
                let (h, w) = plane_hw(self.shape(*a));
                let rows = self.value(*a).len() / w;
                if let Some(ga) = self.slot(lo, lens, *a) {
                    debug_assert!(h > 0);
                    for r in 0..rows {
                        for x in 0..w - 1 {
                            let gi = g[r * (w - 1) + x];
                            ga[r * w + x + 1] = ga[r * w + x + 1] + gi;
                            ga[r * w + x] = ga[r * w + x] - gi;
                        }
                    }
                }
            }
            Op::DiffY(a) => {
                let (h, w) = plane_hw(self.shape(*a));
                let planes = self.value(*a).len() / (h * w);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for p in 0..planes {
                        for y in 0..h - 1 {
                            for x in 0..w {
                                let gi = g[p * (h - 1) * w + y * w + x];
                                let base = p * h * w;
                                ga[base + (y + 1) * w + x] = ga[base + (y + 1) * w + x] + gi;
                                ga[base + y * w + x] = ga[base + y * w + x] - gi;
                            }
                        }
                    }
                }
            }
            Op::Box3(a) => {
                let (h, w) = plane_hw(self.shape(*a));
                let planes = self.value(*a).len() / (h * w).max(1);
                let ninth = T::of(1.0 / 9.0);
                if let Some(ga) = self.slot(lo, lens, *a) {
                    for p in 0..planes {
                        let base = p * h * w;
                        for y in 0..h {
                            for x in 0..w {
                                let gi = g[base + y * w + x] * ninth;
                                for yy in box_taps(y, h) {
                                    for xk in box_taps(x, w) {
                                        let d = &mut ga[base + yy * w + xk];
                                        *d = *d + gi;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GridSample {
                image,
                coords,
                taps,
            } => {
                let (_, w) = plane_hw(self.shape(*image));
                let img = self.value(*image);
                if let Some(gi) = self.slot(lo, lens, *image) {
                    for (t, &gv) in taps.iter().zip(g) {
                        if !t.valid {
                            continue;
                        }
                        let (fu, fv) = (t.fu, t.fv);
                        let b = t.v0 * w + t.u0;
                        gi[b] = gi[b] + gv * (one - fu) * (one - fv);
                        gi[b + 1] = gi[b + 1] + gv * fu * (one - fv);
                        gi[b + w] = gi[b + w] + gv * (one - fu) * fv;
                        gi[b + w + 1] = gi[b + w + 1] + gv * fu * fv;
                    }
                }
                if let Some(gc) = self.slot(lo, lens, *coords) {
                    for (i, (t, &gv)) in taps.iter().zip(g).enumerate() {
                        if !t.valid {
                            continue;
                        }
                        let b = t.v0 * w + t.u0;
                        let (i00, i01, i10, i11) = (img[b], img[b + 1], img[b + w], img[b + w + 1]);
                        let du = (one - t.fv) * (i01 - i00) + t.fv * (i11 - i10);
                        let dv = (one - t.fu) * (i10 - i00) + t.fu * (i11 - i01);
                        gc[2 * i] = gc[2 * i] + gv * du;
                        gc[2 * i + 1] = gc[2 * i + 1] + gv * dv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_vjp(
        &self,
        node: &Node<T>,
        g: &[T],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        lo: &mut [Option<Vec<T>>],
        lens: &[usize],
    ) {
        let is = self.shape(input);
        let ws = self.shape(weight);
        let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (node.shape[2], node.shape[3]);
        let x = self.value(input);
        let k = self.value(weight);
        if let Some(b) = bias {
            if let Some(gb) = self.slot(lo, lens, b) {
                for bi in 0..n {
                    for co in 0..cout {
                        let s: T = g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo]
                            .iter()
                            .fold(T::zero(), |a, &v| a + v);
                        gb[co] = gb[co] + s;
                    }
                }
            }
        }
        if let Some(gw) = self.slot(lo, lens, weight) {
            for bi in 0..n {
                for co in 0..cout {
                    let gp = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                    for ci in 0..cin {
                        let xin = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = T::zero();
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            acc = acc + gp[oy * wo + ox] * row[ix as usize];
                                        }
                                    }
                                }
                                let d = &mut gw[((co * cin + ci) * kh + ky) * kw + kx];
                                *d = *d + acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = self.slot(lo, lens, input) {
            for bi in 0..n {
                for co in 0..cout {
                    let gp = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                    for ci in 0..cin {
                        let dst = &mut gx[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            let d = &mut row[ix as usize];
                                            *d = *d + wv * gp[oy * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn plane_hw(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        r => (shape[r - 2], shape[r - 1]),
    }
}

fn box_taps(i: usize, n: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(n - 1)]
}

/// One named block of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segment table describing how a flat buffer splits into tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> usize {
        let shape = shape.into();
        let seg = Segment {
            name: name.into(),
            offset: self.len,
            shape,
        };
        self.len += seg.len();
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat trainable parameters plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch);
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.len();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f32]> {
        self.layout
            .segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let seg = self.layout.segments.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.values[seg.offset..seg.offset + seg.len()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Registers every segment on the tape as a trainable leaf.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        let cast: Vec<T> = self.values.iter().map(|&v| T::of(v as f64)).collect();
        bind_values(&self.layout, &cast, tape)
    }

    /// Flattens per-segment gradients back into the parameter order.
    pub fn gather<T: Element>(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<T> {
        gather_grads(&self.layout, grads, vars)
    }
}

pub fn bind_values<T: Element>(
    layout: &ParamLayout,
    values: &[T],
    tape: &mut Tape<T>,
) -> Result<Vec<Var>> {
    if values.len() != layout.len() {
        return Err(Error::LayoutMismatch);
    }
    layout
        .segments
        .iter()
        .map(|s| {
            let data = values[s.offset..s.offset + s.len()].to_vec();
            tape.param(Tensor::new(s.shape.clone(), data)?)
        })
        .collect()
}

pub fn gather_grads<T: Element>(layout: &ParamLayout, grads: &Gradients<T>, vars: &[Var]) -> Vec<T> {
    let mut out = Vec::with_capacity(layout.len());
    for v in vars {
        out.extend(grads.wrt(*v));
    }
    out
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Floor of the relative-error denominator.
    pub eps: f64,
    /// Parameter indices to probe; `None` probes all of them.
    pub indices: Option<Vec<usize>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            eps: 1e-6,
            indices: None,
        }
    }
}

/// Worst analytic-vs-numeric gradient disagreement of a scalar tape program.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

/// Compares backward gradients of `f` against central finite differences.
///
/// Relative error per parameter is `|a - fd| / max(|a|, |fd|, eps)`.
pub fn grad_check<T, F>(f: F, params: &ParamVector, opts: &GradCheck) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if opts.h <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let layout = params.layout();
    let base: Vec<T> = params.values().iter().map(|&v| T::of(v as f64)).collect();
    let eval = |vals: &[T]| -> Result<(f64, Tape<T>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = bind_values(layout, vals, &mut tape)?;
        let root = f(&mut tape, &vars)?;
        Ok((tape.scalar(root).f64(), tape, root, vars))
    };
    let (_, tape, root, vars) = eval(&base)?;
    let grads = tape.backward(root)?;
    let analytic = gather_grads(layout, &grads, &vars);
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..base.len()).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probed: indices.len(),
    };
    let mut vals = base.clone();
    for &i in &indices {
        let x0 = base[i];
        vals[i] = T::of(x0.f64() + opts.h);
        let fp = eval(&vals)?.0;
        vals[i] = T::of(x0.f64() - opts.h);
        let fm = eval(&vals)?.0;
        vals[i] = x0;
        // Use the realised step so f32 rounding of x0 +- h does not bias the quotient.
        let step = T::of(x0.f64() + opts.h).f64() - T::of(x0.f64() - opts.h).f64();
        let fd = (fp - fm) / step;
        let a = analytic[i].f64();
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.eps);
        if rel > report.max_rel_error || report.probed == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = fd;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar(y), 0.5);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape
            .constant(Tensor::new([2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap())
            .unwrap();
        let z = tape.constant(Tensor::zeros([2, 2])).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_of_ones_center_is_nine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y)[4], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 2, 8, 8], 1.0)).unwrap();
        let k = tape.constant(Tensor::full([4, 2, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 4]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2])).unwrap();
        let b = tape.constant(Tensor::zeros([3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2])).unwrap();
        assert!(matches!(tape.recip(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn ramp_lattice_hits_are_exact() {
        let img = Tensor::<f64>::from_fn([4, 5], |i| (i % 5) as f64);
        let mut tape = Tape::<f64>::new();
        let iv = tape.constant(img).unwrap();
        let coords = t(&[3, 2], &[0.0, 0.0, 2.0, 1.0, 4.0, 3.0]);
        let c = tape.constant(coords).unwrap();
        let (s, mask) = tape.grid_sample(iv, c).unwrap();
        assert_eq!(tape.value(s), &[0.0, 2.0, 4.0]);
        assert_eq!(mask, vec![true; 3]);
    }

    #[test]
    fn midpoint_sample_and_coordinate_gradient() {
        let img = t(&[2, 2], &[0.0, 2.0, 0.0, 2.0]);
        let sample_at = |u: f64| {
            let mut tape = Tape::<f64>::new();
            let iv = tape.constant(img.clone()).unwrap();
            let c = tape.param(t(&[1, 2], &[u, 0.0])).unwrap();
            let (s, _) = tape.grid_sample(iv, c).unwrap();
            let r = tape.sum(s).unwrap();
            let g = tape.backward(r).unwrap().wrt(c);
            (tape.scalar(r), g)
        };
        let (v, g) = sample_at(0.5);
        assert_eq!(v, 1.0);
        let h = 1e-3;
        let fd = (sample_at(0.5 + h).0 - sample_at(0.5 - h).0) / (2.0 * h);
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((fd - g[0]).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_samples_are_masked_not_clamped() {
        let img = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let mut tape = Tape::<f64>::new();
        let iv = tape.constant(img).unwrap();
        let c = tape
            .constant(t(&[3, 2], &[-0.1, 0.0, 1.0, 1.0, 0.5, 1.01]))
            .unwrap();
        let (s, mask) = tape.grid_sample(iv, c).unwrap();
        assert_eq!(mask, vec![false, true, false]);
        assert_eq!(tape.value(s), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_square_gradient_is_two_theta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::full([4], 3.0)).unwrap();
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x), vec![1.0; 4]);
        let sq = tape.square(x).unwrap();
        let r = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(r).unwrap().wrt(x), vec![6.0; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::full([4], 3.0)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[2.0])).unwrap();
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap().wrt(x);
        assert_eq!(g, vec![5.0]);
    }

    fn linear_layout() -> (Arc<ParamLayout>, ParamVector) {
        let mut layout = ParamLayout::new();
        layout.push("w", [6]);
        let layout = Arc::new(layout);
        let p = ParamVector::new(layout.clone(), vec![0.3, -1.2, 0.5, 2.0, -0.7, 0.1]).unwrap();
        (layout, p)
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let (_, p) = linear_layout();
        let coef = [1.0, 2.0, -3.0, 0.5, 0.25, 4.0];
        let rep = grad_check::<f64, _>(
            |tape, vars| {
                let c = tape.constant(t(&[6], &coef))?;
                let m = tape.mul(vars[0], c)?;
                tape.sum(m)
            },
            &p,
            &GradCheck::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn grad_check_sigmoid_chain_f32() {
        let (_, p) = linear_layout();
        let rep = grad_check::<f32, _>(
            |tape, vars| {
                let a = tape.sigmoid(vars[0])?;
                let b = tape.scale(a, 3.0)?;
                let c = tape.sigmoid(b)?;
                let d = tape.square(c)?;
                tape.sum(d)
            },
            &p,
            &GradCheck {
                h: 1e-2,
                eps: 1e-3,
                indices: None,
            },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn concat_and_reshape_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.param(t(&[1, 1, 2], &[5.0, 6.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = tape
            .constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let m = tape.mul(c, w).unwrap();
        let r = tape.sum(m).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.wrt(a), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.wrt(b), vec![5.0, 6.0]);
    }

    #[test]
    fn box_filter_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([3, 4], 2.5)).unwrap();
        let b = tape.box3(a).unwrap();
        assert!(tape.value(b).iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn finite_differences_have_expected_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .constant(Tensor::from_fn([1, 1, 3, 4], |i| (i % 4) as f64 * 2.0))
            .unwrap();
        let dx = tape.diff_x(a).unwrap();
        let dy = tape.diff_y(a).unwrap();
        assert_eq!(tape.shape(dx), &[1, 1, 3, 3]);
        assert_eq!(tape.shape(dy), &[1, 1, 2, 4]);
        assert!(tape.value(dx).iter().all(|&v| v == 2.0));
        assert!(tape.value(dy).iter().all(|&v| v == 0.0));
    }
}
