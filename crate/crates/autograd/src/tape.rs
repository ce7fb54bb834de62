use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Records a computation so that gradients can be replayed in reverse.
///
/// Every operation on a [`Var`] appends a node. Values are immutable once
/// recorded; [`Tape::backward`] walks the nodes in reverse insertion order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Handle to a recorded value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    ScalarMul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    MeanCols(usize),
    MaxCols(usize, Vec<usize>),
    MaxRows(usize, Vec<usize>),
    Reshape(usize),
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    LayerNorm {
        a: usize,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        height: usize,
        width: usize,
        k: usize,
    },
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
    PowerNorm {
        a: usize,
        scale: f64,
        energy: f64,
    },
    ComplexAffine(usize, Rc<Vec<[f64; 2]>>),
    StraightThrough(usize),
    Focal {
        a: usize,
        targets: Rc<Vec<i8>>,
        alpha: f64,
        gamma: f64,
        count: usize,
    },
    SmoothL1 {
        a: usize,
        target: Rc<Vec<f64>>,
        weight: Rc<Vec<f64>>,
        norm: f64,
    },
    Mse(usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MulCol(a, b)
            | ScalarMul(a, b) | MatMul(a, b) | Mse(a, b) => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            Scale(a, _) | AddConst(a) | Transpose(a) | Sigmoid(a) | Silu(a) | Relu(a)
            | Tanh(a) | Exp(a) | Log(a) | SoftmaxRows(a) | SumAll(a) | MeanAll(a)
            | SumRows(a) | MeanCols(a) | MaxCols(a, _) | MaxRows(a, _) | Reshape(a)
            | GatherRows(a, _) | ScatterRows(a, _) | ComplexAffine(a, _)
            | StraightThrough(a) => vec![*a],
            SliceCols { a, .. }
            | LayerNorm { a, .. }
            | PowerNorm { a, .. }
            | Focal { a, .. }
            | SmoothL1 { a, .. } => vec![*a],
            ConcatCols(v) => v.clone(),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a value that is not differentiated against.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_node(t, Op::Leaf, false)
    }

    /// Records a value that gradients are collected for.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push_node(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let needs = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].needs_grad)
        };
        self.push_node(value, op, needs)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let wants = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, zip_with(g, val(*b), |g, y| g * y));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, zip_with(g, val(*a), |g, x| g * x));
            }
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if wants(*b) {
                let cols = val(*b).len();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(val(*b).shape(), gb));
            }
        }
        Op::MulRow(a, b) => {
            let bv = val(*b);
            let cols = bv.len();
            if wants(*a) {
                let mut ga = g.clone();
                for row in ga.data_mut().chunks_mut(cols) {
                    for (x, s) in row.iter_mut().zip(bv.data()) {
                        *x *= s;
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let mut gb = vec![0.0; cols];
                for (grow, arow) in g.data().chunks(cols).zip(val(*a).data().chunks(cols)) {
                    for j in 0..cols {
                        gb[j] += grow[j] * arow[j];
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb));
            }
        }
        Op::MulCol(a, b) => {
            let bv = val(*b);
            let av = val(*a);
            let cols = av.cols();
            if wants(*a) {
                let mut ga = g.clone();
                for (row, s) in ga.data_mut().chunks_mut(cols).zip(bv.data()) {
                    for x in row.iter_mut() {
                        *x *= s;
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let gb: Vec<f64> = g
                    .data()
                    .chunks(cols)
                    .zip(av.data().chunks(cols))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb));
            }
        }
        Op::Scale(a, f) => accumulate(nodes, grads, *a, g.map(|x| x * f)),
        Op::AddConst(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::ScalarMul(a, s) => {
            let sv = val(*s).item();
            if wants(*a) {
                accumulate(nodes, grads, *a, g.map(|x| x * sv));
            }
            if wants(*s) {
                let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                accumulate(nodes, grads, *s, Tensor::new(val(*s).shape(), vec![d]));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if wants(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb));
            }
        }
        Op::Transpose(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, transpose(g, out.rows(), out.cols()).reshaped(av.shape()));
        }
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, zip_with(g, out, |g, y| g * y * (1.0 - y))),
        Op::Silu(a) => {
            let ga = zip_with(g, val(*a), |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            });
            accumulate(nodes, grads, *a, ga);
        }
        Op::Relu(a) => {
            accumulate(nodes, grads, *a, zip_with(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, zip_with(g, out, |g, y| g * (1.0 - y * y))),
        Op::Exp(a) => accumulate(nodes, grads, *a, zip_with(g, out, |g, y| g * y)),
        Op::Log(a) => accumulate(nodes, grads, *a, zip_with(g, val(*a), |g, x| g / x)),
        Op::SoftmaxRows(a) => {
            let cols = out.cols();
            let mut ga = vec![0.0; out.len()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(cols)
                .zip(out.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for j in 0..cols {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(val(*a).shape(), ga));
        }
        Op::SumAll(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item()));
        }
        Op::MeanAll(a) => {
            let av = val(*a);
            let n = av.len().max(1) as f64;
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item() / n));
        }
        Op::SumRows(a) => {
            let av = val(*a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (dst, gi) in ga.chunks_mut(cols).zip(g.data()) {
                dst.fill(*gi);
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::MeanCols(a) => {
            let av = val(*a);
            let (rows, cols) = (av.rows(), av.cols());
            let inv = 1.0 / rows as f64;
            let mut ga = vec![0.0; av.len()];
            for dst in ga.chunks_mut(cols) {
                for (d, gi) in dst.iter_mut().zip(g.data()) {
                    *d = gi * inv;
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::MaxCols(a, arg) => {
            let av = val(*a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (j, &r) in arg.iter().enumerate() {
                ga[r * cols + j] += g.data()[j];
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::MaxRows(a, arg) => {
            let av = val(*a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (i, &c) in arg.iter().enumerate() {
                ga[i * cols + c] += g.data()[i];
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, g.clone().reshaped(&shape));
        }
        Op::SliceCols { a, start } => {
            let av = val(*a);
            let (rows, cols) = (av.rows(), av.cols());
            let width = out.cols();
            let mut ga = vec![0.0; av.len()];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + width]
                    .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let w = pv.cols();
                if wants(p) {
                    let mut gp = vec![0.0; pv.len()];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(pv.shape(), gp));
                }
                offset += w;
            }
        }
        Op::LayerNorm { a, rstd } => {
            let cols = out.cols();
            let inv_n = 1.0 / cols as f64;
            let mut ga = vec![0.0; out.len()];
            for (((gr, yr), dst), r) in g
                .data()
                .chunks(cols)
                .zip(out.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
                .zip(rstd)
            {
                let mean_g: f64 = gr.iter().sum::<f64>() * inv_n;
                let mean_gy: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() * inv_n;
                for j in 0..cols {
                    dst[j] = r * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(val(*a).shape(), ga));
        }
        Op::Conv2d {
            x,
            w,
            height,
            width,
            k,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let cin = xv.cols();
            let cout = wv.cols();
            let hw = height * width;
            let kk = k * k * cin;
            if wants(*w) {
                let col = im2col(xv.data(), *height, *width, cin, *k);
                let mut gw = vec![0.0; kk * cout];
                gemm(kk, hw, cout, &col, true, g.data(), false, &mut gw, 0.0);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape(), gw));
            }
            if wants(*x) {
                let mut gcol = vec![0.0; hw * kk];
                gemm(hw, cout, kk, g.data(), false, wv.data(), true, &mut gcol, 0.0);
                let gx = col2im(&gcol, *height, *width, cin, *k);
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
            }
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (i, &r) in idx.iter().enumerate() {
                for j in 0..cols {
                    ga[r * cols + j] += g.data()[i * cols + j];
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::ScatterRows(a, idx) => {
            let av = val(*a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (i, &r) in idx.iter().enumerate() {
                ga[i * cols..(i + 1) * cols].copy_from_slice(&g.data()[r * cols..(r + 1) * cols]);
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::PowerNorm { a, scale, energy } => {
            let av = val(*a);
            if *energy == 0.0 {
                accumulate(nodes, grads, *a, g.clone());
            } else {
                let xg: f64 = av.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
                let ga = zip_with(g, av, |gi, xi| scale * (gi - xi * xg / energy));
                accumulate(nodes, grads, *a, ga);
            }
        }
        Op::ComplexAffine(a, coef) => {
            let mut ga = vec![0.0; g.len()];
            for (i, c) in coef.iter().enumerate() {
                let (gr, gi) = (g.data()[2 * i], g.data()[2 * i + 1]);
                ga[2 * i] = c[0] * gr + c[1] * gi;
                ga[2 * i + 1] = -c[1] * gr + c[0] * gi;
            }
            accumulate(nodes, grads, *a, Tensor::new(val(*a).shape(), ga));
        }
        Op::StraightThrough(a) => accumulate(nodes, grads, *a, g.clone().reshaped(val(*a).shape())),
        Op::Focal {
            a,
            targets,
            alpha,
            gamma,
            count,
        } => {
            let av = val(*a);
            let scale = g.item() / (*count).max(1) as f64;
            let mut ga = vec![0.0; av.len()];
            for (i, (&x, &t)) in av.data().iter().zip(targets.iter()).enumerate() {
                if t < 0 {
                    continue;
                }
                let (s, at) = if t == 1 { (1.0, *alpha) } else { (-1.0, 1.0 - alpha) };
                let pt = sigmoid(s * x);
                let log_pt = -softplus(-s * x);
                let q = 1.0 - pt;
                ga[i] = scale * s * at * (gamma * q.powf(*gamma) * pt * log_pt - q.powf(gamma + 1.0));
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::SmoothL1 {
            a,
            target,
            weight,
            norm,
        } => {
            let av = val(*a);
            let scale = g.item() / norm;
            let ga: Vec<f64> = av
                .data()
                .iter()
                .zip(target.iter())
                .zip(weight.iter())
                .map(|((&p, &t), &w)| {
                    let d = p - t;
                    let dd = if d.abs() < 1.0 { d } else { d.signum() };
                    scale * w * dd
                })
                .collect();
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga));
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let f = 2.0 * g.item() / av.len().max(1) as f64;
            let diff = zip_with(av, bv, |x, y| f * (x - y));
            if wants(*b) {
                accumulate(nodes, grads, *b, diff.map(|x| -x));
            }
            accumulate(nodes, grads, *a, diff);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.len(), b.len(), "elementwise shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn transpose(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = t.data()[r * cols + c];
        }
    }
    Tensor::new(&[cols, rows], out)
}

/// Patch matrix for a `k x k` same-padded convolution over a channel-last map.
/// Row `p` holds the `(dy, dx, c)`-ordered neighbourhood of cell `p`.
pub(crate) fn im2col(x: &[f64], h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let kk = k * k * cin;
    let mut col = vec![0.0; h * w * kk];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut col[(y * w + xx) * kk..(y * w + xx + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    let off = (ky * k + kx) * cin;
                    dst[off..off + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

pub(crate) fn col2im(col: &[f64], h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let kk = k * k * cin;
    let mut x = vec![0.0; h * w * cin];
    for y in 0..h {
        for xx in 0..w {
            let src = &col[(y * w + xx) * kk..(y * w + xx + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * cin;
                    let off = (ky * k + kx) * cin;
                    for c in 0..cin {
                        x[dst + c] += src[off + c];
                    }
                }
            }
        }
    }
    x
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
        self.tape.push(zip_with(&a, &b, f), op)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        let cols = a.cols();
        assert_eq!(b.len(), cols, "add_row width mismatch");
        let mut v = (*a).clone();
        for r in v.data_mut().chunks_mut(cols) {
            for (x, y) in r.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        let cols = a.cols();
        assert_eq!(b.len(), cols, "mul_row width mismatch");
        let mut v = (*a).clone();
        for r in v.data_mut().chunks_mut(cols) {
            for (x, y) in r.iter_mut().zip(b.data()) {
                *x *= y;
            }
        }
        self.tape.push(v, Op::MulRow(self.id, row.id))
    }

    /// Scales row `i` by element `i` of a length-`rows` vector.
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), col.value());
        let cols = a.cols();
        assert_eq!(b.len(), a.rows(), "mul_col height mismatch");
        let mut v = (*a).clone();
        for (r, s) in v.data_mut().chunks_mut(cols).zip(b.data()) {
            for x in r.iter_mut() {
                *x *= s;
            }
        }
        self.tape.push(v, Op::MulCol(self.id, col.id))
    }

    pub fn scale(&self, f: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, f), |x| x * f)
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |x| x + c)
    }

    /// Multiplies by a single-element variable.
    pub fn scalar_mul(&self, s: Var<'t>) -> Var<'t> {
        let sv = s.value().item();
        let v = self.value().map(|x| x * sv);
        self.tape.push(v, Op::ScalarMul(self.id, s.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(k, b.rows(), "matmul inner dimension mismatch");
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        self.tape.push(Tensor::new(&[m, n], c), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        let a = self.value();
        let v = transpose(&a, a.rows(), a.cols());
        self.tape.push(v, Op::Transpose(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// Softmax along the last axis (each row of the matrix view).
    pub fn softmax_rows(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut v = (*a).clone();
        for r in v.data_mut().chunks_mut(cols) {
            softmax_in_place(r);
        }
        self.tape.push(v, Op::SoftmaxRows(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let s = if a.is_empty() { 0.0 } else { a.sum() / a.len() as f64 };
        self.tape.push(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Sum of each row: `[n, m] -> [n]`.
    pub fn sum_rows(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let v: Vec<f64> = a.data().chunks(cols).map(|r| r.iter().sum()).collect();
        self.tape.push(Tensor::new(&[a.rows()], v), Op::SumRows(self.id))
    }

    /// Mean over rows for every column: `[n, m] -> [m]`.
    pub fn mean_cols(&self) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut v = vec![0.0; cols];
        for r in a.data().chunks(cols) {
            for (acc, x) in v.iter_mut().zip(r) {
                *acc += x;
            }
        }
        for x in &mut v {
            *x /= rows as f64;
        }
        self.tape.push(Tensor::new(&[cols], v), Op::MeanCols(self.id))
    }

    /// Max over rows for every column: `[n, m] -> [m]`.
    pub fn max_cols(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut v = vec![f64::NEG_INFINITY; cols];
        let mut arg = vec![0usize; cols];
        for (i, r) in a.data().chunks(cols).enumerate() {
            for j in 0..cols {
                if r[j] > v[j] {
                    v[j] = r[j];
                    arg[j] = i;
                }
            }
        }
        self.tape.push(Tensor::new(&[cols], v), Op::MaxCols(self.id, arg))
    }

    /// Max over columns for every row: `[n, m] -> [n]`.
    pub fn max_rows(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut v = Vec::with_capacity(a.rows());
        let mut arg = Vec::with_capacity(a.rows());
        for r in a.data().chunks(cols) {
            let (j, m) = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bm), (j, &x)| if x > bm { (j, x) } else { (bj, bm) });
            v.push(m);
            arg.push(j);
        }
        self.tape.push(Tensor::new(&[a.rows()], v), Op::MaxRows(self.id, arg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshaped(shape);
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        assert!(start + width <= cols, "slice_cols out of range");
        let mut v = Vec::with_capacity(rows * width);
        for r in a.data().chunks(cols) {
            v.extend_from_slice(&r[start..start + width]);
        }
        self.tape
            .push(Tensor::new(&[rows, width], v), Op::SliceCols { a: self.id, start })
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut v = (*a).clone();
        let mut rstd = Vec::with_capacity(a.rows());
        for r in v.data_mut().chunks_mut(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for x in r.iter_mut() {
                *x = (*x - mean) * rs;
            }
            rstd.push(rs);
        }
        self.tape.push(v, Op::LayerNorm { a: self.id, rstd })
    }

    /// Same-padded stride-1 convolution of a channel-last `[h*w, cin]` map with
    /// weights laid out as `[k*k*cin, cout]` in `(dy, dx, cin)` order.
    pub fn conv2d(&self, weight: Var<'t>, height: usize, width: usize, k: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let cin = x.cols();
        assert_eq!(x.rows(), height * width, "conv2d input is not h*w rows");
        assert_eq!(k % 2, 1, "conv2d kernel must be odd");
        assert_eq!(w.rows(), k * k * cin, "conv2d weight rows mismatch");
        let cout = w.cols();
        let col = im2col(x.data(), height, width, cin, k);
        let mut out = vec![0.0; height * width * cout];
        gemm(height * width, k * k * cin, cout, &col, false, w.data(), false, &mut out, 0.0);
        self.tape.push(
            Tensor::new(&[height * width, cout], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                height,
                width,
                k,
            },
        )
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut v = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            v.extend_from_slice(a.row(r));
        }
        self.tape.push(
            Tensor::new(&[idx.len(), cols], v),
            Op::GatherRows(self.id, Rc::new(idx.to_vec())),
        )
    }

    /// Places row `i` at row `idx[i]` of an otherwise zero `[rows, cols]` matrix.
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        assert_eq!(a.rows(), idx.len(), "scatter_rows index count mismatch");
        let mut v = vec![0.0; rows * cols];
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "scatter index {r} out of {rows} rows");
            v[r * cols..(r + 1) * cols].copy_from_slice(&a.data()[i * cols..(i + 1) * cols]);
        }
        self.tape.push(
            Tensor::new(&[rows, cols], v),
            Op::ScatterRows(self.id, Rc::new(idx.to_vec())),
        )
    }

    /// Scales interleaved complex values so that their mean power equals `p_bound`.
    /// An all-zero input passes through unchanged.
    pub fn power_normalize(&self, p_bound: f64) -> Var<'t> {
        let a = self.value();
        let energy: f64 = a.data().iter().map(|x| x * x).sum();
        let symbols = (a.len() / 2) as f64;
        let scale = if energy == 0.0 {
            1.0
        } else {
            (p_bound * symbols / energy).sqrt()
        };
        let v = a.map(|x| x * scale);
        self.tape.push(
            v,
            Op::PowerNorm {
                a: self.id,
                scale,
                energy,
            },
        )
    }

    /// `y = coef * x + offset` elementwise over interleaved complex values.
    /// The offset carries no gradient.
    pub fn complex_affine(&self, coef: &[[f64; 2]], offset: &[[f64; 2]]) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), 2 * coef.len());
        assert_eq!(coef.len(), offset.len());
        let mut v = vec![0.0; a.len()];
        for (i, (c, o)) in coef.iter().zip(offset).enumerate() {
            let (xr, xi) = (a.data()[2 * i], a.data()[2 * i + 1]);
            v[2 * i] = c[0] * xr - c[1] * xi + o[0];
            v[2 * i + 1] = c[0] * xi + c[1] * xr + o[1];
        }
        self.tape.push(
            Tensor::new(a.shape(), v),
            Op::ComplexAffine(self.id, Rc::new(coef.to_vec())),
        )
    }

    /// Forward value is `forward`; the backward pass treats the op as identity.
    pub fn straight_through(&self, forward: Tensor) -> Var<'t> {
        assert_eq!(forward.len(), self.value().len());
        self.tape.push(forward, Op::StraightThrough(self.id))
    }

    /// Sigmoid focal loss averaged over non-ignored entries (`target < 0` is ignored).
    pub fn focal_loss(&self, targets: &[i8], alpha: f64, gamma: f64) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), targets.len());
        let mut total = 0.0;
        let mut count = 0;
        for (&x, &t) in a.data().iter().zip(targets) {
            if t < 0 {
                continue;
            }
            let (s, at) = if t == 1 { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
            let pt = sigmoid(s * x);
            let log_pt = -softplus(-s * x);
            total += -at * (1.0 - pt).powf(gamma) * log_pt;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.tape.push(
            Tensor::scalar(loss),
            Op::Focal {
                a: self.id,
                targets: Rc::new(targets.to_vec()),
                alpha,
                gamma,
                count,
            },
        )
    }

    /// `sum_i weight_i * smoothl1(x_i - target_i) / norm`; zero when `norm == 0`.
    pub fn smooth_l1(&self, target: &[f64], weight: &[f64], norm: f64) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), target.len());
        assert_eq!(a.len(), weight.len());
        let (total, norm) = if norm > 0.0 {
            let t: f64 = a
                .data()
                .iter()
                .zip(target)
                .zip(weight)
                .map(|((&p, &t), &w)| {
                    let d = (p - t).abs();
                    w * if d < 1.0 { 0.5 * d * d } else { d - 0.5 }
                })
                .sum();
            (t / norm, norm)
        } else {
            (0.0, f64::INFINITY)
        };
        self.tape.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                a: self.id,
                target: Rc::new(target.to_vec()),
                weight: Rc::new(weight.to_vec()),
                norm,
            },
        )
    }

    /// Mean squared difference; zero for empty inputs.
    pub fn mse(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len(), "mse on mismatched sizes");
        let m = if a.is_empty() {
            0.0
        } else {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.len() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mse(self.id, other.id))
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].rows();
    assert!(values.iter().all(|v| v.rows() == rows), "concat_cols row mismatch");
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            out.extend_from_slice(v.row(r));
        }
    }
    tape.push(
        Tensor::new(&[rows, total], out),
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
    )
}

pub(crate) fn softmax_in_place(r: &mut [f64]) {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in r.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in r.iter_mut() {
        *x /= s;
    }
}
