//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes are
//! appended in evaluation order, so parents always precede children and the
//! reverse sweep in [`Tape::backward`] is a plain reverse iteration.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{matmul_at_into, matmul_bt_into, matmul_into, Real, Tensor};
use crate::error::{contract, shape_err, Error, Result};
use crate::imaging::Resampler;

/// Probability clamp applied inside [`Var::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

/// Operation kinds, used for diagnostics and backward-fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRowBias,
    Sigmoid,
    Relu,
    Tanh,
    Sum,
    Mean,
    MatMul,
    MatMulBt,
    Transpose,
    Reshape,
    SoftmaxRows,
    ConcatRows,
    SliceRows,
    MeanRows,
    Conv2d,
    Resize,
    Crop,
    PadZero,
    MinMaxNorm,
    Bce,
    Dice,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRowBias(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SoftmaxRows(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    MeanRows(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
    },
    Resize {
        input: usize,
        rows: Rc<Resampler<T>>,
        cols: Rc<Resampler<T>>,
    },
    Crop(usize),
    PadZero(usize),
    MinMaxNorm {
        input: usize,
        eps: T,
        lo: usize,
        hi: usize,
    },
    Bce(usize, usize),
    Dice(usize, usize, T),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Resize { .. } => OpKind::Resize,
            Op::Crop(..) => OpKind::Crop,
            Op::PadZero(..) => OpKind::PadZero,
            Op::MinMaxNorm { .. } => OpKind::MinMaxNorm,
            Op::Bce(..) => OpKind::Bce,
            Op::Dice(..) => OpKind::Dice,
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Append-only record of a forward computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<OpKind>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(contract(op, format!("expected a rank-2 tensor, got shape {shape:?}"))),
    }
}

/// Splits a rank-2 `[H,W]` or rank-3 `[C,H,W]` shape into `(C,H,W)`.
fn dims_chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(contract(op, format!("expected [H,W] or [C,H,W], got {shape:?}"))),
    }
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 2] = h;
    out[r - 1] = w;
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that gradients are tracked for.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value, true)
    }

    /// Records a value with no gradient (inputs, targets).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value, false)
    }

    /// Negates the backward rule of every node of `kind`. Only useful as a
    /// negative control for [`super::grad_check`].
    #[doc(hidden)]
    pub fn corrupt_backward(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    /// Stacks rank-2 tensors (or vectors as `[1,n]`) along the first axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat_rows", "no inputs"))?;
        let tail: Vec<usize> = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.shape()[1..] != tail[..] || v.rank() != first.shape().len() {
                return Err(shape_err("concat_rows", first.shape().as_slice(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let tracked = parts.iter().any(|p| p.tracked());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Op::ConcatRows(ids), Tensor::new(shape, data)?, tracked))
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if !root.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![T::one()]);
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            backprop_node(&nodes, &mut grads, node, &g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradient buffer for one parent; allocated on first use, `None` for untracked parents.
fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].tracked {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(ga) = slot(nodes, grads, id) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &d), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *x += d * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, &d), &o) in gb.iter_mut().zip(g).zip(av) {
                    *x += d * o;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += *c * d);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
            }
        }
        Op::AddRowBias(x, b) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v += d);
            }
            let n = val(*b).numel();
            if let Some(gb) = slot(nodes, grads, *b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(v, &d)| *v += d);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &d), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += d * y * (T::one() - y);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &d), &i) in ga.iter_mut().zip(g).zip(av) {
                    if i > T::zero() {
                        *x += d;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &d), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += d * (T::one() - y * y);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = T::lit(val(*a).numel() as f64);
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_bt_into(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_at_into(av.data(), g, gb, m, k, n);
            }
        }
        Op::MatMulBt(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_into(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_at_into(g, av.data(), gb, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let n = out.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), xr) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                    for ((x, &d), &y) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += y * (d - dot);
                    }
                }
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let n = val(id).numel();
                if let Some(gp) = slot(nodes, grads, id) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(x, &d)| *x += d);
                }
                offset += n;
            }
        }
        Op::SliceRows(a, start) => {
            let cols: usize = val(*a).shape()[1..].iter().product();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga[start * cols..start * cols + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, &d)| *x += d);
            }
        }
        Op::MeanRows(a) => {
            let m = val(*a).shape()[0];
            let inv = T::one() / T::lit(m as f64);
            if let Some(ga) = slot(nodes, grads, *a) {
                for row in ga.chunks_mut(g.len()) {
                    row.iter_mut().zip(g).for_each(|(x, &d)| *x += d * inv);
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
        } => {
            let (iv, kv) = (val(*input), val(*kernel));
            let geo = ConvGeometry::new(iv.shape(), kv.shape(), *stride);
            if let Some(gi) = slot(nodes, grads, *input) {
                geo.backward_input(g, kv.data(), gi);
            }
            if let Some(gk) = slot(nodes, grads, *kernel) {
                geo.backward_kernel(g, iv.data(), gk);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                let plane = geo.out_h * geo.out_w;
                for (co, b) in gb.iter_mut().enumerate() {
                    *b += g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                }
            }
        }
        Op::Resize { input, rows, cols } => {
            let (c, h, w) = dims_chw("resize", val(*input).shape()).expect("validated in forward");
            if let Some(gi) = slot(nodes, grads, *input) {
                resize_backward(g, gi, c, h, w, rows, cols);
            }
        }
        Op::Crop(a) => {
            let (c, h, w) = dims_chw("crop", val(*a).shape()).expect("validated in forward");
            let (_, ch, cw) = dims_chw("crop", out.shape()).expect("validated in forward");
            if let Some(ga) = slot(nodes, grads, *a) {
                for ci in 0..c {
                    for y in 0..ch {
                        let src = &g[(ci * ch + y) * cw..(ci * ch + y + 1) * cw];
                        let dst = &mut ga[(ci * h + y) * w..(ci * h + y) * w + cw];
                        dst.iter_mut().zip(src).for_each(|(x, &d)| *x += d);
                    }
                }
            }
        }
        Op::PadZero(a) => {
            let (c, h, w) = dims_chw("pad", val(*a).shape()).expect("validated in forward");
            let (_, ph, pw) = dims_chw("pad", out.shape()).expect("validated in forward");
            if let Some(ga) = slot(nodes, grads, *a) {
                for ci in 0..c {
                    for y in 0..h {
                        let src = &g[(ci * ph + y) * pw..(ci * ph + y) * pw + w];
                        let dst = &mut ga[(ci * h + y) * w..(ci * h + y + 1) * w];
                        dst.iter_mut().zip(src).for_each(|(x, &d)| *x += d);
                    }
                }
            }
        }
        Op::MinMaxNorm { input, eps, lo, hi } => {
            let s = val(*input).data();
            let (min, max) = (s[*lo], s[*hi]);
            let den = max - min + *eps;
            if let Some(gs) = slot(nodes, grads, *input) {
                let sum_g: T = g.iter().copied().sum();
                let sum_gy: T = g.iter().zip(s).map(|(&d, &v)| d * (v - min)).sum::<T>() / (den * den);
                gs.iter_mut().zip(g).for_each(|(x, &d)| *x += d / den);
                gs[*lo] += sum_gy - sum_g / den;
                gs[*hi] -= sum_gy;
            }
        }
        Op::Bce(p, t) => {
            let (pv, tv) = (val(*p).data(), val(*t).data());
            let lo = T::lit(BCE_CLAMP);
            let hi = T::one() - lo;
            let scale = g[0] / T::lit(pv.len() as f64);
            if let Some(gp) = slot(nodes, grads, *p) {
                for ((x, &pi), &ti) in gp.iter_mut().zip(pv).zip(tv) {
                    if pi > lo && pi < hi {
                        *x += scale * ((T::one() - ti) / (T::one() - pi) - ti / pi);
                    }
                }
            }
        }
        Op::Dice(p, t, smooth) => {
            let (pv, tv) = (val(*p).data(), val(*t).data());
            let inter: T = pv.iter().zip(tv).map(|(&a, &b)| a * b).sum();
            let den = pv.iter().copied().sum::<T>() + tv.iter().copied().sum::<T>() + *smooth;
            let num = T::lit(2.0) * inter + *smooth;
            if let Some(gp) = slot(nodes, grads, *p) {
                for (x, &ti) in gp.iter_mut().zip(tv) {
                    *x -= g[0] * (T::lit(2.0) * ti * den - num) / (den * den);
                }
            }
        }
    }
}

/// Index arithmetic for a strided, zero-padded cross-correlation with odd kernels.
pub(crate) struct ConvGeometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], kernel: &[usize], stride: usize) -> Self {
        let (cin, h, w) = (input[0], input[1], input[2]);
        let (cout, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        Self {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            out_h: (h + 2 * ph - kh) / stride + 1,
            out_w: (w + 2 * pw - kw) / stride + 1,
        }
    }

    /// Visits every (output index, input index, kernel index) triple that
    /// lands inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let k_idx = ((co * self.cin + ci) * self.kh + ky) * self.kw + kx;
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ky) as isize - ph as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let in_row = (ci * self.h + iy as usize) * self.w;
                            let out_row = (co * self.out_h + oy) * self.out_w;
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride + kx) as isize - pw as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(out_row + ox, in_row + ix as usize, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Real>(&self, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
        let plane = self.out_h * self.out_w;
        let mut out = vec![T::zero(); self.cout * plane];
        for (co, b) in bias.iter().enumerate() {
            out[co * plane..(co + 1) * plane].iter_mut().for_each(|x| *x = *b);
        }
        self.for_each_tap(|o, i, k| out[o] += kernel[k] * input[i]);
        out
    }

    fn backward_input<T: Real>(&self, g: &[T], kernel: &[T], gi: &mut [T]) {
        self.for_each_tap(|o, i, k| gi[i] += kernel[k] * g[o]);
    }

    fn backward_kernel<T: Real>(&self, g: &[T], input: &[T], gk: &mut [T]) {
        self.for_each_tap(|o, i, k| gk[k] += input[i] * g[o]);
    }
}

fn resize_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    rows: &Resampler<T>,
    cols: &Resampler<T>,
) -> Vec<T> {
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut tmp = vec![T::zero(); c * oh * w];
    for ci in 0..c {
        for oy in 0..oh {
            let dst = &mut tmp[(ci * oh + oy) * w..(ci * oh + oy + 1) * w];
            for (sy, wy) in rows.taps(oy) {
                let src = &x[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += wy * s);
            }
        }
    }
    let mut out = vec![T::zero(); c * oh * ow];
    for (dst_row, src_row) in out.chunks_mut(ow).zip(tmp.chunks(w)) {
        for (ox, d) in dst_row.iter_mut().enumerate() {
            *d = cols.taps(ox).map(|(sx, wx)| wx * src_row[sx]).sum();
        }
    }
    out
}

fn resize_backward<T: Real>(
    g: &[T],
    gi: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    rows: &Resampler<T>,
    cols: &Resampler<T>,
) {
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut tmp = vec![T::zero(); c * oh * w];
    for (src_row, dst_row) in g.chunks(ow).zip(tmp.chunks_mut(w)) {
        for (ox, &d) in src_row.iter().enumerate() {
            for (sx, wx) in cols.taps(ox) {
                dst_row[sx] += wx * d;
            }
        }
    }
    for ci in 0..c {
        for oy in 0..oh {
            let src = &tmp[(ci * oh + oy) * w..(ci * oh + oy + 1) * w];
            for (sy, wy) in rows.taps(oy) {
                let dst = &mut gi[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += wy * s);
            }
        }
    }
}

/// Applies a separable resampling to `[H,W]` or `[C,H,W]` data without a tape.
pub(crate) fn resample_plain<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    rows: &Resampler<T>,
    cols: &Resampler<T>,
) -> Vec<T> {
    resize_forward(x, c, h, w, rows, cols)
}

/// Index of the first minimum and first maximum.
pub(crate) fn arg_extrema<T: Real>(s: &[T]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in s.iter().enumerate() {
        if v < s[lo] {
            lo = i;
        }
        if v > s[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Whether any tracked leaf reaches this value.
    pub fn tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        self.tape.push(op, value, self.tracked())
    }

    fn binary(self, other: Var<'t, T>, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        let tracked = self.tracked() || other.tracked();
        self.tape.push(op, value, tracked)
    }

    fn zip_same(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, Op::Add(self.id, other.id), v))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), v))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), v))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar(self.id), v)
    }

    /// `x[i, :] + bias` for every row of a rank-2 `x`.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let (_, n) = dims2("add_row_bias", x.shape())?;
        if b.numel() != n {
            return Err(shape_err("add_row_bias", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(bias, Op::AddRowBias(self.id, bias.id), v))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary(Op::Relu(self.id), v)
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        self.unary(Op::Mean(self.id), v)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul", a.shape())?;
        let (k2, n) = dims2("matmul", b.shape())?;
        if k != k2 {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let mut c = vec![T::zero(); m * n];
        matmul_into(a.data(), b.data(), &mut c, m, k, n);
        let v = Tensor::new([m, n], c)?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), v))
    }

    /// `self · otherᵀ` for `self: [m,k]`, `other: [n,k]`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul_t", a.shape())?;
        let (n, k2) = dims2("matmul_t", b.shape())?;
        if k != k2 {
            return Err(shape_err("matmul_t", a.shape(), b.shape()));
        }
        let mut c = vec![T::zero(); m * n];
        matmul_bt_into(a.data(), b.data(), &mut c, m, k, n);
        let v = Tensor::new([m, n], c)?;
        Ok(self.binary(other, Op::MatMulBt(self.id, other.id), v))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("transpose", a.shape())?;
        let src = a.data();
        let data = (0..n * m).map(|idx| src[(idx % m) * n + idx / m]).collect();
        let v = Tensor::new([n, m], data)?;
        Ok(self.unary(Op::Transpose(self.id), v))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (_, n) = dims2("softmax_rows", a.shape())?;
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(Op::SoftmaxRows(self.id), v))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let rows = *a
            .shape()
            .first()
            .ok_or_else(|| contract("slice_rows", "scalar input"))?;
        if start + len > rows || len == 0 {
            return Err(contract(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + len),
            ));
        }
        let cols: usize = a.shape()[1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(shape, a.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.unary(Op::SliceRows(self.id, start), v))
    }

    /// Column means of a rank-2 tensor, as `[1, n]`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (m, n) = dims2("mean_rows", a.shape())?;
        let mut data = vec![T::zero(); n];
        for row in a.data().chunks(n) {
            data.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
        }
        let inv = T::one() / T::lit(m as f64);
        data.iter_mut().for_each(|d| *d *= inv);
        let v = Tensor::new([1, n], data)?;
        Ok(self.unary(Op::MeanRows(self.id), v))
    }

    /// Cross-correlation of `[Cin,H,W]` with `[Cout,Cin,kh,kw]` odd kernels,
    /// zero padding `(k-1)/2` and the given stride, plus a per-channel bias.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(contract(
                "conv2d",
                format!("expected [Cin,H,W] input and [Cout,Cin,kh,kw] kernel, got {xs:?} and {ks:?}"),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel extents must be odd, got {}x{}", ks[2], ks[3])));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        if ks[1] != xs[0] {
            return Err(shape_err("conv2d", xs, ks));
        }
        if b.numel() != ks[0] {
            return Err(shape_err("conv2d", ks, b.shape()));
        }
        let geo = ConvGeometry::new(xs, ks, stride);
        let out = geo.forward(x.data(), k.data(), b.data());
        let v = Tensor::new([ks[0], geo.out_h, geo.out_w], out)?;
        let tracked = self.tracked() || kernel.tracked() || bias.tracked();
        Ok(self.tape.push(
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                stride,
            },
            v,
            tracked,
        ))
    }

    /// Separable resampling of the last two axes with precomputed taps.
    pub fn resample(self, rows: Rc<Resampler<T>>, cols: Rc<Resampler<T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = dims_chw("resize", x.shape())?;
        if rows.in_len() != h || cols.in_len() != w {
            return Err(shape_err("resize", x.shape(), &[rows.in_len(), cols.in_len()]));
        }
        let data = resize_forward(x.data(), c, h, w, &rows, &cols);
        let v = Tensor::new(with_hw(x.shape(), rows.out_len(), cols.out_len()), data)?;
        Ok(self.unary(
            Op::Resize {
                input: self.id,
                rows,
                cols,
            },
            v,
        ))
    }

    /// Half-pixel bilinear resize of the last two axes.
    pub fn bilinear(self, out_h: usize, out_w: usize, antialias: bool) -> Result<Var<'t, T>> {
        let (_, h, w) = dims_chw("resize", &self.shape())?;
        let rows = Resampler::bilinear(h, out_h, antialias)?;
        let cols = Resampler::bilinear(w, out_w, antialias)?;
        self.resample(Rc::new(rows), Rc::new(cols))
    }

    /// Top-left `h × w` window of the last two axes.
    pub fn crop_top_left(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, ih, iw) = dims_chw("crop", x.shape())?;
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(contract("crop", format!("cannot crop {h}x{w} from {ih}x{iw}")));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                let start = (ci * ih + y) * iw;
                data.extend_from_slice(&x.data()[start..start + w]);
            }
        }
        let v = Tensor::new(with_hw(x.shape(), h, w), data)?;
        Ok(self.unary(Op::Crop(self.id), v))
    }

    /// Zero-pads the last two axes on the bottom and right to `h × w`.
    pub fn pad_bottom_right(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, ih, iw) = dims_chw("pad", x.shape())?;
        if h < ih || w < iw {
            return Err(contract("pad", format!("cannot pad {ih}x{iw} down to {h}x{w}")));
        }
        let mut data = vec![T::zero(); c * h * w];
        for ci in 0..c {
            for y in 0..ih {
                let src = &x.data()[(ci * ih + y) * iw..(ci * ih + y + 1) * iw];
                data[(ci * h + y) * w..(ci * h + y) * w + iw].copy_from_slice(src);
            }
        }
        let v = Tensor::new(with_hw(x.shape(), h, w), data)?;
        Ok(self.unary(Op::PadZero(self.id), v))
    }

    /// `(s - min) / (max - min + eps)` over all elements.
    pub fn minmax_normalize(self, eps: T) -> Var<'t, T> {
        let x = self.value();
        let (lo, hi) = arg_extrema(x.data());
        let (min, max) = (x.data()[lo], x.data()[hi]);
        let den = max - min + eps;
        let v = x.map(|s| (s - min) / den);
        self.unary(
            Op::MinMaxNorm {
                input: self.id,
                eps,
                lo,
                hi,
            },
            v,
        )
    }

    /// Mean binary cross-entropy of probabilities `self` against `target`.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; no gradient reaches `target`.
    pub fn bce(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let (p, t) = (self.value(), target.value());
        if p.shape() != t.shape() {
            return Err(shape_err("bce", p.shape(), t.shape()));
        }
        let lo = T::lit(BCE_CLAMP);
        let hi = T::one() - lo;
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&pi, &ti)| {
                let pc = pi.max(lo).min(hi);
                -(ti * pc.ln() + (T::one() - ti) * (T::one() - pc).ln())
            })
            .sum();
        let v = Tensor::scalar(total / T::lit(p.numel() as f64));
        Ok(self.unary(Op::Bce(self.id, target.id), v))
    }

    /// `1 - (2 Σ p t + smooth) / (Σ p + Σ t + smooth)`; no gradient reaches `target`.
    pub fn dice(self, target: Var<'t, T>, smooth: T) -> Result<Var<'t, T>> {
        let (p, t) = (self.value(), target.value());
        if p.shape() != t.shape() {
            return Err(shape_err("dice", p.shape(), t.shape()));
        }
        let inter: T = p.data().iter().zip(t.data()).map(|(&a, &b)| a * b).sum();
        let den = p.sum() + t.sum() + smooth;
        let v = Tensor::scalar(T::one() - (T::lit(2.0) * inter + smooth) / den);
        Ok(self.unary(Op::Dice(self.id, target.id, smooth), v))
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: &Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 1], &[2.]));
        let b = tape.constant(t(&[1, 1], &[3.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[6.]);

        let n = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(m.matmul(n).unwrap().value().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let f = tape.constant(t(&[3], &[1., -2., 3.]));
        let z = tape.constant(Tensor::zeros([3]));
        assert_eq!(f.add(z).unwrap().value().data(), f.value().data());
        let zero = tape.constant(Tensor::scalar(0.0));
        assert_eq!(zero.sigmoid().value().data(), &[0.5]);
        let a = tape.constant(t(&[2], &[2., 3.]));
        let b = tape.constant(t(&[2], &[4., 5.]));
        assert_eq!(a.mul(b).unwrap().value().data(), &[8., 15.]);
        assert!(a.add(f).is_err());
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(t(&[2], &[1., 2.]));
        let loss = x.scale(2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn fan_out_sums_gradients() {
        // loss = x*x + 3x at x = 2 -> 2x + 3 = 7
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = x.mul(x).unwrap().add(x.scale(3.0)).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(&x).data(), &[7.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 3, 4], |i| i as f64 * 0.5));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = x.conv2d(k, b, 1).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn conv_all_ones_on_constant_map() {
        let c = 2.5;
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 5, 5], c));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(k, b, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0 * c);
        assert_eq!(y.data()[0], 4.0 * c);
        assert_eq!(y.data()[2], 6.0 * c);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 3], |i| i as f64));
        let k = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let y = x.conv2d(k, b, 1).unwrap().value();
        for (c, &bias) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!(y.data()[c * 9..(c + 1) * 9].iter().all(|&v| v == bias));
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(matches!(x.conv2d(k, b, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv_stride_halves_extent() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 8, 6]));
        let k = tape.constant(Tensor::zeros([4, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        assert_eq!(x.conv2d(k, b, 2).unwrap().shape(), vec![4, 4, 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -10., 0., 10.]));
        let y = x.softmax_rows().unwrap().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_rows() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        assert_eq!(c.slice_rows(2, 1).unwrap().value().data(), &[5., 6.]);
        assert!(c.slice_rows(2, 2).is_err());
    }

    #[test]
    fn minmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 3.]));
        let y = x.minmax_normalize(1e-8).value();
        assert!((y.data()[1] - 0.25).abs() < 1e-8);
        let c = tape.constant(t(&[3], &[5., 5., 5.]));
        assert_eq!(c.minmax_normalize(1e-8).value().data(), &[0., 0., 0.]);
    }

    #[test]
    fn corrupted_rule_flips_gradient() {
        let tape = Tape::new();
        tape.corrupt_backward(Some(OpKind::Tanh));
        let x = tape.leaf(Tensor::scalar(0.3));
        let loss = x.tanh();
        let g = tape.backward(loss).unwrap().wrt(&x).data()[0];
        assert!((g + (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-12);
    }
}
