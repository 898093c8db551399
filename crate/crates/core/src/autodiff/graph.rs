use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{self, Bcast};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
    Sigmoid,
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, rstd: Vec<T> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SumAll(usize),
    SumAxis(usize, usize),
    Gather(usize, Arc<[usize]>),
    Scatter(usize, Arc<[usize]>),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    DwConv3x3(usize, usize),
    Bilinear { img: usize, coords: usize },
    Replace(usize, Vec<bool>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::Replace(a, _) => vec![*a],
            Op::LayerNorm { x, .. } | Op::Narrow { x, .. } => vec![*x],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::DwConv3x3(a, b) => vec![*a, *b],
            Op::Bilinear { img, coords } => vec![*img, *coords],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape. Nodes are appended in creation order, so reverse index
/// order is a valid backward traversal.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    backward_done: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// A leaf sharing an existing buffer; receives a gradient.
    pub fn param_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = requires_grad || op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn record(&self, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var<'_, T> {
        self.push(Rc::new(Tensor { shape, data }), op, false)
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::contract(
                "backward already ran on this graph; call reset_grads first",
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

fn accumulate<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            if let Some(g) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    let (xi, yi) = (x.data[i], y.data[i]);
                    let d = match kind {
                        Unary::Neg => -T::one(),
                        Unary::Exp => yi,
                        Unary::Ln => T::one() / xi,
                        Unary::Sqrt => {
                            if yi > T::zero() {
                                T::of(0.5) / yi
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Abs => {
                            if xi > T::zero() {
                                T::one()
                            } else if xi < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Square => T::of(2.0) * xi,
                        Unary::Sigmoid => yi * (T::one() - yi),
                        Unary::Gelu => gelu_grad(xi),
                        Unary::Relu => {
                            if xi > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    g[i] += gout[i] * d;
                }
            }
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let ma = Bcast::new(&av.shape, &y.shape);
            let mb = Bcast::new(&bv.shape, &y.shape);
            if let Some(g) = accumulate(nodes, grads, *a) {
                for i in 0..gout.len() {
                    let ia = ma.idx(i);
                    let d = match kind {
                        Binary::Add | Binary::Sub => T::one(),
                        Binary::Mul => bv.data[mb.idx(i)],
                        Binary::Div => T::one() / bv.data[mb.idx(i)],
                    };
                    g[ia] += gout[i] * d;
                }
            }
            if let Some(g) = accumulate(nodes, grads, *b) {
                for i in 0..gout.len() {
                    let ib = mb.idx(i);
                    let d = match kind {
                        Binary::Add => T::one(),
                        Binary::Sub => -T::one(),
                        Binary::Mul => av.data[ma.idx(i)],
                        Binary::Div => {
                            let bi = bv.data[ib];
                            -av.data[ma.idx(i)] / (bi * bi)
                        }
                    };
                    g[ib] += gout[i] * d;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go * *s;
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let plan = MatmulPlan::new(&av.shape, &bv.shape).expect("validated in forward");
            if let Some(g) = accumulate(nodes, grads, *a) {
                for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
                    // dA = dC · Bᵀ
                    T::gemm(
                        plan.m,
                        plan.p,
                        plan.k,
                        &gout[bi * plan.m * plan.p..],
                        false,
                        &bv.data[ob * plan.k * plan.p..],
                        true,
                        &mut g[oa * plan.m * plan.k..],
                        T::one(),
                    );
                }
            }
            if let Some(g) = accumulate(nodes, grads, *b) {
                for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
                    // dB = Aᵀ · dC
                    T::gemm(
                        plan.k,
                        plan.m,
                        plan.p,
                        &av.data[oa * plan.m * plan.k..],
                        true,
                        &gout[bi * plan.m * plan.p..],
                        false,
                        &mut g[ob * plan.k * plan.p..],
                        T::one(),
                    );
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                let last = *y.shape.last().unwrap();
                for (row, (yr, gr)) in y.data.chunks(last).zip(gout.chunks(last)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    let dst = &mut g[row * last..(row + 1) * last];
                    for j in 0..last {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, rstd } => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                let last = *y.shape.last().unwrap();
                let inv_n = T::one() / T::of(last as f64);
                for (row, (yr, gr)) in y.data.chunks(last).zip(gout.chunks(last)).enumerate() {
                    let mean_g: T = gr.iter().copied().sum::<T>() * inv_n;
                    let mean_gy: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    let dst = &mut g[row * last..(row + 1) * last];
                    for j in 0..last {
                        dst[j] += rstd[row] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Permute(a, axes) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                let inv = kernels::inverse_axes(axes);
                let (back, _) = kernels::permute(gout, &y.shape, &inv);
                for (gi, go) in g.iter_mut().zip(back) {
                    *gi += go;
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            }
        }
        Op::SumAxis(a, axis) => {
            let shape = nodes[*a].value.shape.clone();
            if let Some(g) = accumulate(nodes, grads, *a) {
                let (outer, dim, inner) = kernels::split_axis(&shape, *axis);
                for o in 0..outer {
                    for d in 0..dim {
                        let src = &gout[o * inner..(o + 1) * inner];
                        let dst = &mut g[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (x, &s) in dst.iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                }
            }
        }
        Op::Gather(a, idx) => {
            let row = y.len() / idx.len();
            if let Some(g) = accumulate(nodes, grads, *a) {
                for (k, &r) in idx.iter().enumerate() {
                    let src = &gout[k * row..(k + 1) * row];
                    for (x, &s) in g[r * row..(r + 1) * row].iter_mut().zip(src) {
                        *x += s;
                    }
                }
            }
        }
        Op::Scatter(a, idx) => {
            let row = nodes[*a].value.len() / idx.len();
            if let Some(g) = accumulate(nodes, grads, *a) {
                for (k, &r) in idx.iter().enumerate() {
                    let src = &gout[r * row..(r + 1) * row];
                    for (x, &s) in g[k * row..(k + 1) * row].iter_mut().zip(src) {
                        *x += s;
                    }
                }
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = kernels::split_axis(&y.shape, *axis);
            let mut start = 0;
            for &x in xs {
                let dim = nodes[x].value.shape[*axis];
                if let Some(g) = accumulate(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &gout[(o * total + start) * inner..(o * total + start + dim) * inner];
                        for (d, &s) in g[o * dim * inner..(o + 1) * dim * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                start += dim;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[*x].value.shape.clone();
            if let Some(g) = accumulate(nodes, grads, *x) {
                let (outer, total, inner) = kernels::split_axis(&in_shape, *axis);
                let len = y.shape[*axis];
                for o in 0..outer {
                    let dst = &mut g[(o * total + start) * inner..(o * total + start + len) * inner];
                    for (d, &s) in dst.iter_mut().zip(&gout[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::DwConv3x3(x, w) => {
            let (xv, wv) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            let (n, h, wd, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
            if let Some(g) = accumulate(nodes, grads, *x) {
                dwconv_apply(n, h, wd, c, |src, dst, k| g[dst] += gout[src] * wv.data[k]);
            }
            if let Some(g) = accumulate(nodes, grads, *w) {
                dwconv_apply(n, h, wd, c, |src, dst, k| g[k] += gout[src] * xv.data[dst]);
            }
        }
        Op::Bilinear { img, coords } => {
            let (iv, cv) = (nodes[*img].value.clone(), nodes[*coords].value.clone());
            let (h, w, c) = (iv.shape[0], iv.shape[1], iv.shape[2]);
            let npts = cv.shape[0];
            if let Some(g) = accumulate(nodes, grads, *img) {
                for p in 0..npts {
                    let s = BilinearCell::new(cv.data[2 * p], cv.data[2 * p + 1], h, w);
                    for ch in 0..c {
                        let go = gout[p * c + ch];
                        g[(s.y0 * w + s.x0) * c + ch] += go * (T::one() - s.fx) * (T::one() - s.fy);
                        g[(s.y0 * w + s.x0 + 1) * c + ch] += go * s.fx * (T::one() - s.fy);
                        g[((s.y0 + 1) * w + s.x0) * c + ch] += go * (T::one() - s.fx) * s.fy;
                        g[((s.y0 + 1) * w + s.x0 + 1) * c + ch] += go * s.fx * s.fy;
                    }
                }
            }
            if let Some(g) = accumulate(nodes, grads, *coords) {
                for p in 0..npts {
                    let s = BilinearCell::new(cv.data[2 * p], cv.data[2 * p + 1], h, w);
                    for ch in 0..c {
                        let go = gout[p * c + ch];
                        if s.free_x {
                            g[2 * p] += go * s.slope_x(&iv.data, w, c, ch);
                        }
                        if s.free_y {
                            g[2 * p + 1] += go * s.slope_y(&iv.data, w, c, ch);
                        }
                    }
                }
            }
        }
        Op::Replace(a, mask) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    if !mask[i] {
                        g[i] += gout[i];
                    }
                }
            }
        }
    }
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Visits (output index, input index, kernel index) triples of a zero-padded
/// depthwise 3×3 convolution over an (N, H, W, C) tensor.
fn dwconv_apply(n: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let out_base = ((b * h + i) * w + j) * c;
                for di in 0..3 {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let in_base = ((b * h + ii as usize) * w + jj as usize) * c;
                        let k_base = (di * 3 + dj) * c;
                        for ch in 0..c {
                            f(out_base + ch, in_base + ch, k_base + ch);
                        }
                    }
                }
            }
        }
    }
}

/// Interpolation cell of one continuous sample position, clamped to the image.
struct BilinearCell<T> {
    x0: usize,
    y0: usize,
    fx: T,
    fy: T,
    free_x: bool,
    free_y: bool,
    inside: bool,
}

impl<T: Scalar> BilinearCell<T> {
    fn new(x: T, y: T, h: usize, w: usize) -> Self {
        let (xmax, ymax) = (T::of((w - 1) as f64), T::of((h - 1) as f64));
        let free_x = x >= T::zero() && x <= xmax;
        let free_y = y >= T::zero() && y <= ymax;
        let xc = x.max(T::zero()).min(xmax);
        let yc = y.max(T::zero()).min(ymax);
        let x0 = (xc.floor().as_f64() as usize).min(w - 2);
        let y0 = (yc.floor().as_f64() as usize).min(h - 2);
        Self {
            x0,
            y0,
            fx: xc - T::of(x0 as f64),
            fy: yc - T::of(y0 as f64),
            free_x,
            free_y,
            inside: free_x && free_y,
        }
    }

    fn at(data: &[T], w: usize, c: usize, y: usize, x: usize, ch: usize) -> T {
        data[(y * w + x) * c + ch]
    }

    fn value(&self, data: &[T], w: usize, c: usize, ch: usize) -> T {
        let one = T::one();
        let p00 = Self::at(data, w, c, self.y0, self.x0, ch);
        let p01 = Self::at(data, w, c, self.y0, self.x0 + 1, ch);
        let p10 = Self::at(data, w, c, self.y0 + 1, self.x0, ch);
        let p11 = Self::at(data, w, c, self.y0 + 1, self.x0 + 1, ch);
        (one - self.fy) * ((one - self.fx) * p00 + self.fx * p01) + self.fy * ((one - self.fx) * p10 + self.fx * p11)
    }

    fn cell_slope_x(&self, data: &[T], w: usize, c: usize, ch: usize, x0: usize) -> T {
        let one = T::one();
        let y0 = self.y0;
        (one - self.fy) * (Self::at(data, w, c, y0, x0 + 1, ch) - Self::at(data, w, c, y0, x0, ch))
            + self.fy * (Self::at(data, w, c, y0 + 1, x0 + 1, ch) - Self::at(data, w, c, y0 + 1, x0, ch))
    }

    fn cell_slope_y(&self, data: &[T], w: usize, c: usize, ch: usize, y0: usize) -> T {
        let one = T::one();
        let x0 = self.x0;
        (one - self.fx) * (Self::at(data, w, c, y0 + 1, x0, ch) - Self::at(data, w, c, y0, x0, ch))
            + self.fx * (Self::at(data, w, c, y0 + 1, x0 + 1, ch) - Self::at(data, w, c, y0, x0 + 1, ch))
    }

    // On a grid line the interpolant has a kink; the symmetric derivative
    // (mean of both one-sided slopes) is used there.
    fn slope_x(&self, data: &[T], w: usize, c: usize, ch: usize) -> T {
        let right = self.cell_slope_x(data, w, c, ch, self.x0);
        if self.fx == T::zero() && self.x0 >= 1 {
            let left = self.cell_slope_x(data, w, c, ch, self.x0 - 1);
            T::of(0.5) * (left + right)
        } else {
            right
        }
    }

    fn slope_y(&self, data: &[T], w: usize, c: usize, ch: usize) -> T {
        let down = self.cell_slope_y(data, w, c, ch, self.y0);
        if self.fy == T::zero() && self.y0 >= 1 {
            let up = self.cell_slope_y(data, w, c, ch, self.y0 - 1);
            T::of(0.5) * (up + down)
        } else {
            down
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    out_shape: Vec<usize>,
    /// Per output batch: (batch offset in a, batch offset in b).
    offsets: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = super::broadcast_shapes(ab, bb).map_err(|_| err())?;
        let nb: usize = batch.iter().product();
        let ma = if ab.is_empty() {
            vec![0; nb]
        } else {
            kernels::index_map(ab, &batch)
        };
        let mb = if bb.is_empty() {
            vec![0; nb]
        } else {
            kernels::index_map(bb, &batch)
        };
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(p);
        Ok(Self {
            m,
            k,
            p,
            out_shape,
            offsets: ma.into_iter().zip(mb).collect(),
        })
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn data(&self) -> Vec<T> {
        self.value().data.clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> T {
        self.value().data[0]
    }

    /// Gradient accumulated by the last `backward` call, if this node took part.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let grads = self.graph.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        Some(Tensor {
            shape: self.shape(),
            data: g.clone(),
        })
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward_from(self.id)
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn unary(&self, kind: Unary, f: impl Fn(T) -> T) -> Var<'g, T> {
        let x = self.value();
        let data = x.data.iter().map(|&v| f(v)).collect();
        self.graph.record(data, x.shape.clone(), Op::Unary(kind, self.id))
    }

    fn binary(&self, other: &Var<'g, T>, kind: Binary, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let shape = super::broadcast_shapes(&a.shape, &b.shape).map_err(|_| Error::Shape {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })?;
        let n: usize = shape.iter().product();
        let data = if a.shape == b.shape {
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ma, mb) = (Bcast::new(&a.shape, &shape), Bcast::new(&b.shape, &shape));
            (0..n).map(|i| f(a.data[ma.idx(i)], b.data[mb.idx(i)])).collect()
        };
        Ok(self.graph.record(data, shape, Op::Binary(kind, self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.unary(Unary::Neg, |v| -v)
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        let x = self.value();
        let data = x.data.iter().map(|&v| v * s).collect();
        self.graph.record(data, x.shape.clone(), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        let x = self.value();
        let data = x.data.iter().map(|&v| v + s).collect();
        self.graph.record(data, x.shape.clone(), Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(Unary::Exp, |v| v.exp())
    }

    pub fn ln(&self) -> Var<'g, T> {
        self.unary(Unary::Ln, |v| v.ln())
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(Unary::Sqrt, |v| v.sqrt())
    }

    /// Absolute value with subgradient zero at the origin.
    pub fn abs(&self) -> Var<'g, T> {
        self.unary(Unary::Abs, |v| v.abs())
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(Unary::Square, |v| v * v)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Unary::Sigmoid, |v| T::one() / (T::one() + (-v).exp()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g, T> {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        self.unary(Unary::Gelu, move |x| {
            half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
        })
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Unary::Relu, |v| v.max(T::zero()))
    }

    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let plan = MatmulPlan::new(&a.shape, &b.shape)?;
        let mut out = vec![T::zero(); plan.offsets.len() * plan.m * plan.p];
        for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
            T::gemm(
                plan.m,
                plan.k,
                plan.p,
                &a.data[oa * plan.m * plan.k..],
                false,
                &b.data[ob * plan.k * plan.p..],
                false,
                &mut out[bi * plan.m * plan.p..],
                T::zero(),
            );
        }
        Ok(self.graph.record(out, plan.out_shape, Op::MatMul(self.id, other.id)))
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let last = *x.shape.last().unwrap();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data.chunks(last) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / s;
            }
        }
        Ok(self.graph.record(out, x.shape.clone(), Op::Softmax(self.id)))
    }

    /// Normalizes over the last dimension (no affine transform).
    pub fn layer_norm(&self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let last = *x.shape.last().unwrap();
        let inv_n = T::one() / T::of(last as f64);
        let eps = T::of(eps);
        let mut out = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / last);
        for row in x.data.chunks(last) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        self.graph
            .record(out, x.shape.clone(), Op::LayerNorm { x: self.id, rstd })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.graph.record(x.data.clone(), shape.to_vec(), Op::Reshape(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.shape.len()).collect::<Vec<_>>() {
            return Err(Error::Shape {
                op: "permute",
                lhs: x.shape.clone(),
                rhs: axes.to_vec(),
            });
        }
        let (data, shape) = kernels::permute(&x.data, &x.shape, axes);
        Ok(self.graph.record(data, shape, Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn sum(&self) -> Var<'g, T> {
        let x = self.value();
        let s = x.data.iter().copied().sum();
        self.graph.record(vec![s], vec![1], Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out one axis (the axis is removed; rank-1 input gives shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.shape.len() {
            return Err(Error::contract(format!(
                "sum_axis: axis {axis} out of range for {:?}",
                x.shape
            )));
        }
        let (outer, dim, inner) = kernels::split_axis(&x.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.graph.record(out, shape, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let dim = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / dim))
    }

    /// Selects rows (slices along axis 0) in the given order.
    pub fn gather_rows(&self, idx: Arc<[usize]>) -> Result<Var<'g, T>> {
        let x = self.value();
        let rows = x.shape[0];
        let row = x.len() / rows;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows: empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * row);
        for &r in idx.iter() {
            if r >= rows {
                return Err(Error::contract(format!(
                    "gather_rows: index {r} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&x.data[r * row..(r + 1) * row]);
        }
        let mut shape = x.shape.clone();
        shape[0] = idx.len();
        Ok(self.graph.record(out, shape, Op::Gather(self.id, idx)))
    }

    /// Writes row `k` of `self` to row `idx[k]` of a zero tensor with
    /// `rows` rows; duplicate targets accumulate.
    pub fn scatter_rows(&self, idx: Arc<[usize]>, rows: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.shape[0] != idx.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: x.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let row = x.len() / idx.len();
        let mut out = vec![T::zero(); rows * row];
        for (k, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::contract(format!(
                    "scatter_rows: index {r} out of range for {rows} rows"
                )));
            }
            for (d, &s) in out[r * row..(r + 1) * row]
                .iter_mut()
                .zip(&x.data[k * row..(k + 1) * row])
            {
                *d += s;
            }
        }
        let mut shape = x.shape.clone();
        shape[0] = rows;
        Ok(self.graph.record(out, shape, Op::Scatter(self.id, idx)))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat: no inputs"))?;
        let base = first.shape();
        let mut total = 0;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let ok = v.shape.len() == base.len()
                && v.shape
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: v.shape.clone(),
                });
            }
            total += v.shape[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let dim = v.shape[axis];
                out.extend_from_slice(&v.data[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        for p in parts {
            first.same_graph(p);
        }
        Ok(first
            .graph
            .record(out, shape, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.shape.len() || len == 0 || start + len > x.shape[axis] {
            return Err(Error::contract(format!(
                "narrow: range {start}..{} invalid for axis {axis} of {:?}",
                start + len,
                x.shape
            )));
        }
        let (outer, total, inner) = kernels::split_axis(&x.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        Ok(self.graph.record(
            out,
            shape,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Zero-padded depthwise 3×3 convolution of an (N, H, W, C) tensor with a
    /// (3, 3, C) kernel.
    pub fn dwconv3x3(&self, kernel: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(kernel);
        let (x, k) = (self.value(), kernel.value());
        if x.shape.len() != 4 || k.shape != [3, 3, x.shape[3]] {
            return Err(Error::Shape {
                op: "dwconv3x3",
                lhs: x.shape.clone(),
                rhs: k.shape.clone(),
            });
        }
        let (n, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let mut out = vec![T::zero(); x.len()];
        dwconv_apply(n, h, w, c, |dst, src, ki| out[dst] += x.data[src] * k.data[ki]);
        Ok(self
            .graph
            .record(out, x.shape.clone(), Op::DwConv3x3(self.id, kernel.id)))
    }

    /// Bilinear sampling of an (H, W, C) image at (N, 2) continuous `(x, y)`
    /// positions, where integer positions are pixel centers. Positions outside
    /// the image are clamped to the border; the returned mask flags samples
    /// that needed no clamping.
    pub fn bilinear_sample(&self, coords: &Var<'g, T>) -> Result<(Var<'g, T>, Vec<bool>)> {
        self.same_graph(coords);
        let (img, cv) = (self.value(), coords.value());
        if img.shape.len() != 3 || img.shape[0] < 2 || img.shape[1] < 2 {
            return Err(Error::contract(format!(
                "bilinear_sample needs an (H>=2, W>=2, C) image, got {:?}",
                img.shape
            )));
        }
        if cv.shape.len() != 2 || cv.shape[1] != 2 {
            return Err(Error::Shape {
                op: "bilinear_sample",
                lhs: img.shape.clone(),
                rhs: cv.shape.clone(),
            });
        }
        let (h, w, c) = (img.shape[0], img.shape[1], img.shape[2]);
        let npts = cv.shape[0];
        let mut out = Vec::with_capacity(npts * c);
        let mut inside = Vec::with_capacity(npts);
        for p in 0..npts {
            let cell = BilinearCell::new(cv.data[2 * p], cv.data[2 * p + 1], h, w);
            for ch in 0..c {
                out.push(cell.value(&img.data, w, c, ch));
            }
            inside.push(cell.inside);
        }
        let var = self.graph.record(
            out,
            vec![npts, c],
            Op::Bilinear {
                img: self.id,
                coords: coords.id,
            },
        );
        Ok((var, inside))
    }

    /// Replaces masked elements with constants; gradient flows only through
    /// unmasked elements.
    pub fn replace_masked(&self, mask: &[bool], values: &[T]) -> Result<Var<'g, T>> {
        let x = self.value();
        if mask.len() != x.len() || values.len() != x.len() {
            return Err(Error::contract("replace_masked: mask/value length mismatch"));
        }
        let data = x
            .data
            .iter()
            .zip(mask.iter().zip(values))
            .map(|(&v, (&m, &r))| if m { r } else { v })
            .collect();
        Ok(self
            .graph
            .record(data, x.shape.clone(), Op::Replace(self.id, mask.to_vec())))
    }
}
