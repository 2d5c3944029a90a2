//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive whose inputs require gradients, in
//! execution order. [`Tape::backward`] walks that record in reverse and
//! accumulates gradients additively into shared inputs. Operations on inputs
//! that do not require gradients are evaluated eagerly and stored as
//! constants, so the same model code serves training and inference.
//!
//! There is no implicit broadcasting. Shapes are coerced only through
//! [`Var::expand`], [`Var::reshape`] and friends.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, col2im, gemm, im2col, ConvGeom, Trans};
use super::tensor::{check_finite, Element, Tensor};
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Silu(usize),
    Tanh(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    LayerNorm(usize, f64),
    Softmax(usize, usize),
    Reshape(usize),
    Transpose(usize, Vec<usize>),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat(Vec<usize>, usize),
    Expand(usize, usize),
    Sum(usize),
    Mean(usize),
    MseLoss(usize, usize),
}

struct Node<E> {
    value: Rc<Tensor<E>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// influence the loss.
    pub fn get(&self, var: Var<'_, E>) -> Tensor<E> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var<'_, E>) -> Tensor<E> {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

fn add_into<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

fn conv_geom(
    op: &'static str,
    input: &[usize],
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (kh, kw) = kernel;
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be positive")));
    }
    let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
    if h < kh || w < kw {
        return Err(Error::InvalidShape {
            op,
            shape: input.to_vec(),
            reason: format!("kernel {kh}x{kw} larger than padded input"),
        });
    }
    Ok(ConvGeom {
        channels: input[1],
        height: input[2],
        width: input[3],
        kh,
        kw,
        stride,
        padding,
        out_h: (h - kh) / stride + 1,
        out_w: (w - kw) / stride + 1,
    })
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf that gradients are collected for.
    pub fn param(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf treated as a constant.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<E>, op: Op, requires_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor<E>, op: Op, parents: &[usize]) -> Result<Var<'_, E>> {
        check_finite(name, &value)?;
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn value(&self, id: usize) -> Rc<Tensor<E>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: loss_val.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(loss_val.shape().to_vec(), E::one()));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.clone();
            let wants = |i: usize| nodes[i].requires_grad;
            let emit = |i: usize, t: Tensor<E>, grads: &mut Vec<Option<Tensor<E>>>| {
                if wants(i) {
                    add_into(&mut grads[i], t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Matmul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let (ga, gb) = matmul_backward(&av, &bv, &g);
                    emit(a, ga, &mut grads);
                    emit(b, gb, &mut grads);
                }
                &Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    let (xv, wv) = (val(x), val(w));
                    let (gx, gw, gb) = conv2d_backward(&xv, &wv, &g, stride, padding, wants(x));
                    if let Some(gx) = gx {
                        emit(x, gx, &mut grads);
                    }
                    emit(w, gw, &mut grads);
                    if let Some(b) = bias {
                        emit(b, gb, &mut grads);
                    }
                }
                &Op::ConvTranspose2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    let (xv, wv) = (val(x), val(w));
                    let (gx, gw, gb) = conv_transpose2d_backward(&xv, &wv, &g, stride, padding, wants(x));
                    if let Some(gx) = gx {
                        emit(x, gx, &mut grads);
                    }
                    emit(w, gw, &mut grads);
                    if let Some(b) = bias {
                        emit(b, gb, &mut grads);
                    }
                }
                &Op::Add(a, b) => {
                    emit(a, g.clone(), &mut grads);
                    emit(b, g, &mut grads);
                }
                &Op::Sub(a, b) => {
                    emit(a, g.clone(), &mut grads);
                    emit(b, g.map(|v| -v), &mut grads);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    emit(a, zip_map(&g, &bv, |g, y| g * y), &mut grads);
                    emit(b, zip_map(&g, &av, |g, x| g * x), &mut grads);
                }
                &Op::Scale(a, s) => {
                    let s = E::from_f64_lossy(s);
                    emit(a, g.map(|v| v * s), &mut grads);
                }
                &Op::AddScalar(a) => emit(a, g, &mut grads),
                &Op::Gelu(a) => {
                    let x = val(a);
                    let c = E::from_f64_lossy(GELU_C);
                    let k = E::from_f64_lossy(GELU_K);
                    let half = E::from_f64_lossy(0.5);
                    let three = E::from_f64_lossy(3.0);
                    let d = zip_map(&g, &x, |g, x| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dudx = c * (E::one() + three * k * x * x);
                        g * (half * (E::one() + th) + half * x * (E::one() - th * th) * dudx)
                    });
                    emit(a, d, &mut grads);
                }
                &Op::Silu(a) => {
                    let x = val(a);
                    let d = zip_map(&g, &x, |g, x| {
                        let s = sigmoid(x);
                        g * s * (E::one() + x * (E::one() - s))
                    });
                    emit(a, d, &mut grads);
                }
                &Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * (E::one() - y * y));
                    emit(a, d, &mut grads);
                }
                &Op::Exp(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * y);
                    emit(a, d, &mut grads);
                }
                &Op::Clamp(a, lo, hi) => {
                    let x = val(a);
                    let (lo, hi) = (E::from_f64_lossy(lo), E::from_f64_lossy(hi));
                    let d = zip_map(&g, &x, |g, x| if x > lo && x < hi { g } else { E::zero() });
                    emit(a, d, &mut grads);
                }
                &Op::LayerNorm(a, eps) => {
                    let x = val(a);
                    emit(a, layer_norm_backward(&x, &g, eps), &mut grads);
                }
                &Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), axis);
                    let mut d = vec![E::zero(); y.numel()];
                    let (yd, gd) = (y.data(), g.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: E = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    emit(a, Tensor::from_parts(y.shape().to_vec(), d), &mut grads);
                }
                &Op::Reshape(a) => {
                    let shape = nodes[a].value.shape().to_vec();
                    emit(a, g.reshaped(shape)?, &mut grads);
                }
                Op::Transpose(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (shape, data) = kernels::permute(g.data(), g.shape(), &inv);
                    emit(*a, Tensor::from_parts(shape, data), &mut grads);
                }
                &Op::Slice { x, axis, start } => {
                    let xs = nodes[x].value.shape().to_vec();
                    let (outer, n, inner) = split_axis(&xs, axis);
                    let len = g.shape()[axis];
                    let mut d = vec![E::zero(); nodes[x].value.numel()];
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        d[(o * n + start) * inner..(o * n + start + len) * inner].copy_from_slice(src);
                    }
                    emit(x, Tensor::from_parts(xs, d), &mut grads);
                }
                Op::Concat(parts, axis) => {
                    let axis = *axis;
                    let (outer, total, inner) = split_axis(g.shape(), axis);
                    let mut offset = 0;
                    for &p in parts {
                        let ps = nodes[p].value.shape().to_vec();
                        let len = ps[axis];
                        if wants(p) {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                d.extend_from_slice(
                                    &g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner],
                                );
                            }
                            emit(p, Tensor::from_parts(ps, d), &mut grads);
                        }
                        offset += len;
                    }
                }
                &Op::Expand(a, axis) => {
                    let xs = nodes[a].value.shape().to_vec();
                    let (outer, n, inner) = split_axis(g.shape(), axis);
                    let mut d = vec![E::zero(); outer * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            let src = &g.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (acc, &v) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *acc = *acc + v;
                            }
                        }
                    }
                    emit(a, Tensor::from_parts(xs, d), &mut grads);
                }
                &Op::Sum(a) => {
                    let s = nodes[a].value.shape().to_vec();
                    emit(a, Tensor::full(s, g.item()), &mut grads);
                }
                &Op::Mean(a) => {
                    let v = &nodes[a].value;
                    let n = E::from_usize(v.numel()).unwrap();
                    emit(a, Tensor::full(v.shape().to_vec(), g.item() / n), &mut grads);
                }
                &Op::MseLoss(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let k = E::from_f64_lossy(2.0) * g.item() / E::from_usize(av.numel()).unwrap();
                    let d = zip_map(&av, &bv, |x, y| k * (x - y));
                    if wants(b) {
                        emit(b, d.map(|v| -v), &mut grads);
                    }
                    emit(a, d, &mut grads);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep gradients; intermediates were consumed above.
        Ok(Gradients { grads, shapes })
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize)> {
    if a.len() < 2 || a.len() != b.len() {
        return None;
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
        return None;
    }
    let batch = a[..r - 2].iter().product();
    Some((batch, a[r - 2], a[r - 1], b[r - 1]))
}

fn matmul_backward<E: Element>(a: &Tensor<E>, b: &Tensor<E>, g: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let mut ga = vec![E::zero(); a.numel()];
    let mut gb = vec![E::zero(); b.numel()];
    for i in 0..batch {
        let gs = &g.data()[i * m * n..(i + 1) * m * n];
        let asl = &a.data()[i * m * k..(i + 1) * m * k];
        let bsl = &b.data()[i * k * n..(i + 1) * k * n];
        gemm(m, n, k, gs, Trans::No, bsl, Trans::Yes, &mut ga[i * m * k..(i + 1) * m * k], false);
        gemm(k, m, n, asl, Trans::Yes, gs, Trans::No, &mut gb[i * k * n..(i + 1) * k * n], false);
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

type ConvGrads<E> = (Option<Tensor<E>>, Tensor<E>, Tensor<E>);

fn bias_grad<E: Element>(g: &Tensor<E>) -> Tensor<E> {
    let s = g.shape();
    let (n, o, hw) = (s[0], s[1], s[2] * s[3]);
    let mut gb = vec![E::zero(); o];
    for b in 0..n {
        for (c, acc) in gb.iter_mut().enumerate() {
            let start = (b * o + c) * hw;
            *acc = *acc + g.data()[start..start + hw].iter().copied().sum();
        }
    }
    Tensor::from_parts(vec![o], gb)
}

fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    padding: usize,
    need_x: bool,
) -> ConvGrads<E> {
    let ws = w.shape();
    let geom = conv_geom("conv2d", x.shape(), (ws[2], ws[3]), stride, padding).expect("checked in forward");
    let (n, o) = (x.shape()[0], ws[0]);
    let ckk = geom.cols_rows();
    let ohw = geom.out_h * geom.out_w;
    let img_len = geom.channels * geom.height * geom.width;
    let mut cols = vec![E::zero(); geom.cols_len()];
    let mut gcols = vec![E::zero(); geom.cols_len()];
    let mut gw = vec![E::zero(); w.numel()];
    let mut gx = if need_x { vec![E::zero(); x.numel()] } else { Vec::new() };
    for b in 0..n {
        let gs = &g.data()[b * o * ohw..(b + 1) * o * ohw];
        im2col(&x.data()[b * img_len..(b + 1) * img_len], &geom, &mut cols);
        gemm(o, ohw, ckk, gs, Trans::No, &cols, Trans::Yes, &mut gw, true);
        if need_x {
            gemm(ckk, o, ohw, w.data(), Trans::Yes, gs, Trans::No, &mut gcols, false);
            col2im(&gcols, &geom, &mut gx[b * img_len..(b + 1) * img_len]);
        }
    }
    (
        need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        Tensor::from_parts(ws.to_vec(), gw),
        bias_grad(g),
    )
}

/// Geometry of the ordinary convolution a transposed convolution inverts.
fn transpose_geom(op: &'static str, x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    let (kh, kw) = (w[2], w[3]);
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be positive")));
    }
    let full_h = (x[2] - 1) * stride + kh;
    let full_w = (x[3] - 1) * stride + kw;
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return Err(Error::InvalidShape {
            op,
            shape: x.to_vec(),
            reason: format!("padding {padding} consumes the whole output"),
        });
    }
    Ok(ConvGeom {
        channels: w[1],
        height: full_h - 2 * padding,
        width: full_w - 2 * padding,
        kh,
        kw,
        stride,
        padding,
        out_h: x[2],
        out_w: x[3],
    })
}

fn conv_transpose2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    padding: usize,
    need_x: bool,
) -> ConvGrads<E> {
    let geom = transpose_geom("transposed_conv2d", x.shape(), w.shape(), stride, padding).expect("checked in forward");
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let okk = geom.cols_rows();
    let hw = geom.out_h * geom.out_w;
    let out_len = geom.channels * geom.height * geom.width;
    let mut gcols = vec![E::zero(); geom.cols_len()];
    let mut gw = vec![E::zero(); w.numel()];
    let mut gx = if need_x { vec![E::zero(); x.numel()] } else { Vec::new() };
    for b in 0..n {
        im2col(&g.data()[b * out_len..(b + 1) * out_len], &geom, &mut gcols);
        let xs = &x.data()[b * c * hw..(b + 1) * c * hw];
        gemm(c, hw, okk, xs, Trans::No, &gcols, Trans::Yes, &mut gw, true);
        if need_x {
            gemm(c, okk, hw, w.data(), Trans::No, &gcols, Trans::No, &mut gx[b * c * hw..(b + 1) * c * hw], false);
        }
    }
    (
        need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        Tensor::from_parts(w.shape().to_vec(), gw),
        bias_grad(g),
    )
}

fn layer_norm_backward<E: Element>(x: &Tensor<E>, g: &Tensor<E>, eps: f64) -> Tensor<E> {
    let d = *x.shape().last().unwrap();
    let nd = E::from_usize(d).unwrap();
    let eps = E::from_f64_lossy(eps);
    let mut out = vec![E::zero(); x.numel()];
    for ((xr, gr), or) in x
        .data()
        .chunks_exact(d)
        .zip(g.data().chunks_exact(d))
        .zip(out.chunks_exact_mut(d))
    {
        let mean = xr.iter().copied().sum::<E>() / nd;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nd;
        let rstd = E::one() / (var + eps).sqrt();
        let gmean = gr.iter().copied().sum::<E>() / nd;
        let gxmean = xr
            .iter()
            .zip(gr)
            .map(|(&v, &gv)| gv * (v - mean) * rstd)
            .sum::<E>()
            / nd;
        for ((o, &v), &gv) in or.iter_mut().zip(xr).zip(gr) {
            let xhat = (v - mean) * rstd;
            *o = rstd * (gv - gmean - xhat * gxmean);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<E>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, E>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables belong to different tapes");
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(E) -> E,
        op: Op,
    ) -> Result<Var<'t, E>> {
        let out = self.value().map(f);
        self.tape.record(name, out, op, &[self.id])
    }

    fn binary(
        &self,
        other: Var<'t, E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<Var<'t, E>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        self.tape.record(name, zip_map(&a, &b, f), op, &[self.id, other.id])
    }

    /// Matrix product over the last two axes; leading (batch) axes must match.
    pub fn matmul(&self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let mut out = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                Trans::No,
                &b.data()[i * k * n..(i + 1) * k * n],
                Trans::No,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.tape
            .record("matmul", Tensor::from_parts(shape, out), Op::Matmul(self.id, other.id), &[self.id, other.id])
    }

    /// 2-D convolution: input `[N, C, H, W]`, weight `[O, C, kh, kw]`,
    /// optional bias `[O]`.
    pub fn conv2d(&self, weight: Var<'t, E>, bias: Option<Var<'t, E>>, stride: usize, padding: usize) -> Result<Var<'t, E>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let geom = conv_geom("conv2d", x.shape(), (w.shape()[2], w.shape()[3]), stride, padding)?;
        let (n, o) = (x.shape()[0], w.shape()[0]);
        let ohw = geom.out_h * geom.out_w;
        let img_len = geom.channels * geom.height * geom.width;
        let bias_val = bias.map(|b| b.value());
        if let Some(bv) = &bias_val {
            if bv.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let mut out = vec![E::zero(); n * o * ohw];
        {
            use rayon::prelude::*;
            let (x, w, bias_val) = (&*x, &*w, bias_val.as_deref());
            out.par_chunks_mut(o * ohw).enumerate().for_each(|(b, dst)| {
                let mut cols = vec![E::zero(); geom.cols_len()];
                im2col(&x.data()[b * img_len..(b + 1) * img_len], &geom, &mut cols);
                gemm(o, geom.cols_rows(), ohw, w.data(), Trans::No, &cols, Trans::No, dst, false);
                if let Some(bv) = &bias_val {
                    for (c, chunk) in dst.chunks_exact_mut(ohw).enumerate() {
                        let bc = bv.data()[c];
                        chunk.iter_mut().for_each(|v| *v = *v + bc);
                    }
                }
            });
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(&b);
            parents.push(b.id);
        }
        self.tape.record(
            "conv2d",
            Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
            },
            &parents,
        )
    }

    /// Transposed 2-D convolution: input `[N, C, H, W]`, weight
    /// `[C, O, kh, kw]`, output `[N, O, (H−1)·s − 2p + kh, …]`.
    pub fn transposed_conv2d(
        &self,
        weight: Var<'t, E>,
        bias: Option<Var<'t, E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, E>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let geom = transpose_geom("transposed_conv2d", x.shape(), w.shape(), stride, padding)?;
        let (n, c, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let hw = geom.out_h * geom.out_w;
        let out_len = o * geom.height * geom.width;
        let bias_val = bias.map(|b| b.value());
        if let Some(bv) = &bias_val {
            if bv.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "transposed_conv2d bias",
                    lhs: vec![o],
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let mut out = vec![E::zero(); n * out_len];
        {
            use rayon::prelude::*;
            let (x, w, bias_val) = (&*x, &*w, bias_val.as_deref());
            out.par_chunks_mut(out_len).enumerate().for_each(|(b, dst)| {
                let mut cols = vec![E::zero(); geom.cols_len()];
                gemm(
                    geom.cols_rows(),
                    c,
                    hw,
                    w.data(),
                    Trans::Yes,
                    &x.data()[b * c * hw..(b + 1) * c * hw],
                    Trans::No,
                    &mut cols,
                    false,
                );
                col2im(&cols, &geom, dst);
                if let Some(bv) = &bias_val {
                    let plane = geom.height * geom.width;
                    for (ch, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                        let bc = bv.data()[ch];
                        chunk.iter_mut().for_each(|v| *v = *v + bc);
                    }
                }
            });
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(&b);
            parents.push(b.id);
        }
        self.tape.record(
            "transposed_conv2d",
            Tensor::from_parts(vec![n, o, geom.height, geom.width], out),
            Op::ConvTranspose2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
            },
            &parents,
        )
    }

    pub fn add(&self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Multiplies every element by `s`.
    pub fn scalar_scale(&self, s: f64) -> Result<Var<'t, E>> {
        let k = E::from_f64_lossy(s);
        self.unary("scalar_scale", |v| v * k, Op::Scale(self.id, s))
    }

    /// Adds `s` to every element.
    pub fn add_scalar(&self, s: f64) -> Result<Var<'t, E>> {
        let k = E::from_f64_lossy(s);
        self.unary("add_scalar", |v| v + k, Op::AddScalar(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t, E>> {
        let c = E::from_f64_lossy(GELU_C);
        let k = E::from_f64_lossy(GELU_K);
        let half = E::from_f64_lossy(0.5);
        self.unary(
            "gelu",
            |x| half * x * (E::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(self.id),
        )
    }

    pub fn silu(&self) -> Result<Var<'t, E>> {
        self.unary("silu", |x| x * sigmoid(x), Op::Silu(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'t, E>> {
        self.unary("tanh", |x| x.tanh(), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t, E>> {
        self.unary("exp", |x| x.exp(), Op::Exp(self.id))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t, E>> {
        let (l, h) = (E::from_f64_lossy(lo), E::from_f64_lossy(hi));
        self.unary("clamp", |x| x.max(l).min(h), Op::Clamp(self.id, lo, hi))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t, E>> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let nd = E::from_usize(d).unwrap();
        let e = E::from_f64_lossy(eps);
        let mut out = vec![E::zero(); x.numel()];
        for (xr, or) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = xr.iter().copied().sum::<E>() / nd;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nd;
            let rstd = E::one() / (var + e).sqrt();
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - mean) * rstd;
            }
        }
        self.tape.record(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm(self.id, eps),
            &[self.id],
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: x.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![E::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xd[at(j)]).fold(E::neg_infinity(), E::max);
                let mut denom = E::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom = denom + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / denom;
                }
            }
        }
        self.tape.record(
            "softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id, axis),
            &[self.id],
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, E>> {
        let x = (*self.value()).clone();
        let out = x.reshaped(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Var<'t, E>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        let valid = perm.len() == x.rank()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: x.shape().to_vec(),
                reason: format!("{perm:?} is not a permutation of its axes"),
            });
        }
        let (shape, data) = kernels::permute(x.data(), x.shape(), perm);
        self.tape.record(
            "transpose",
            Tensor::from_parts(shape, data),
            Op::Transpose(self.id, perm.to_vec()),
            &[self.id],
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: x.shape().to_vec(),
                reason: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.tape.record(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if axis >= x.rank() || x.shape()[axis] != 1 || n == 0 {
            return Err(Error::InvalidShape {
                op: "expand",
                shape: x.shape().to_vec(),
                reason: format!("axis {axis} must have size 1 to expand to {n}"),
            });
        }
        let (outer, _, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = n;
        self.tape.record(
            "expand",
            Tensor::from_parts(shape, data),
            Op::Expand(self.id, axis),
            &[self.id],
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Var<'t, E>> {
        let s = self.value().sum_all();
        self.tape.record("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Result<Var<'t, E>> {
        let m = self.value().mean_all();
        self.tape.record("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Mean squared difference to `target`, as a `[1]` tensor.
    pub fn mse_loss(&self, target: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&target);
        let (a, b) = (self.value(), target.value());
        same_shape("mse_loss", &a, &b)?;
        let n = E::from_usize(a.numel()).unwrap();
        let s: E = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.tape.record(
            "mse_loss",
            Tensor::scalar(s / n),
            Op::MseLoss(self.id, target.id),
            &[self.id, target.id],
        )
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'t, E: Element>(parts: &[Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let tape = first.tape;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = vals[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::InvalidShape {
            op: "concat",
            shape: base,
            reason: format!("axis {axis} out of range"),
        });
    }
    for v in &vals[1..] {
        let s = v.shape();
        let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s.to_vec(),
            });
        }
    }
    let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &vals {
            let len = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.record("concat", Tensor::from_parts(shape, data), Op::Concat(ids.clone(), axis), &ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        let out = i.matmul(a).unwrap();
        assert_eq!(*out.value(), *a.value());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 5]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn layer_norm_standardizes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.layer_norm(1e-5).unwrap().value();
        let mean = y.mean_all();
        let var = y.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // var(x) = 2/3, so the stabilizer shifts the result by ~eps/(2·var).
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }

    #[test]
    fn conv2d_all_ones_hand_oracle() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = x.conv2d(w, None, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([2, 3, 4, 4]));
        let w = tape.constant(Tensor::ones([3, 5, 4, 4]));
        let y = x.transposed_conv2d(w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 8, 8]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn unreachable_param_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x) + sum(2x) → grad 3
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, -1.0]));
        let a = x.sum().unwrap();
        let b = x.scalar_scale(2.0).unwrap().sum().unwrap();
        let loss = a.add(b).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::full([2], 100.0));
        let err = x.exp().unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp" }));
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([2]));
        let b = a.scalar_scale(2.0).unwrap();
        assert!(!b.requires_grad());
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 5, 3], |i| i as f64));
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 5).unwrap();
        let y = concat(&[a, b], 1).unwrap();
        assert_eq!(*y.value(), *x.value());
    }
}
