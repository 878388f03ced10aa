//! Reverse-mode tape over shaped arrays.
//!
//! Nodes are appended in evaluation order, so every input index is smaller
//! than the node consuming it and a single reverse sweep suffices.

use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<Vec<T>> },
    Dense { x: Var, w: Var, b: Var, n: usize, fan_in: usize, fan_out: usize },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    LogSigmoid { x: Var },
    NearestUpsample { x: Var, factor: usize },
    DepthToSpace { x: Var, factor: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Log { x: Var },
    Square { x: Var },
    Grl { x: Var, lambda: T },
    Reshape { x: Var },
    ChannelNorm { x: Var, eps: T },
    WeightedBce { p: Var, pos: Vec<T>, neg: Vec<T>, norm: T, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let data: Vec<T> = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(out, op, rg)
    }

    /// 2-D convolution over `[N, C, H, W]` with weight `[O, C, k, k]` and bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[1] || bs != [ws[0]] || stride == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}, bias {bs:?}, stride {stride}")));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            out_h: (xs[2] + 2 * pad - k) / stride + 1,
            out_w: (xs[3] + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
        };
        let in_len = geom.in_c * geom.in_h * geom.in_w;
        let out_len = geom.out_c * geom.out_hw();
        let mut out = vec![T::zero(); geom.batch * out_len];
        let mut cols = Vec::with_capacity(geom.batch);
        {
            let xd = self.nodes[x.0].value.data();
            let wd = self.nodes[w.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for n in 0..geom.batch {
                let xin = &xd[n * in_len..(n + 1) * in_len];
                let y = &mut out[n * out_len..(n + 1) * out_len];
                for (o, chunk) in y.chunks_mut(geom.out_hw()).enumerate() {
                    chunk.fill(bd[o]);
                }
                if geom.pointwise() {
                    T::gemm(geom.out_c, geom.in_c, geom.out_hw(), wd, false, xin, false, y, T::one());
                    cols.push(Vec::new());
                } else {
                    let col = im2col(xin, &geom);
                    T::gemm(geom.out_c, geom.patch(), geom.out_hw(), wd, false, &col, false, y, T::one());
                    cols.push(col);
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Affine map `[N, in] -> [N, out]` with weight `[out, in]` and bias `[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err("dense", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * fan_out);
        let bd = self.nodes[b.0].value.data();
        for _ in 0..n {
            out.extend_from_slice(bd);
        }
        T::gemm(
            n,
            fan_in,
            fan_out,
            self.nodes[x.0].value.data(),
            false,
            self.nodes[w.0].value.data(),
            true,
            &mut out,
            T::one(),
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(vec![n, fan_out], out)?;
        Ok(self.push(t, Op::Dense { x, w, b, n, fan_in, fan_out }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: T) -> Var {
        let t = self.nodes[x.0].value.clone();
        let rg = self.needs(x);
        self.push(t, Op::Grl { x, lambda }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let src = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != src.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", src.shape())));
        }
        let t = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>), NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (shape, data) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (shape, data) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = T::of(t.len().max(1) as f64);
        let s: T = t.data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s / n), Op::Mean { x }, rg)
    }

    /// Repeats each spatial cell of `[N, C, H, W]` into a `factor×factor` block.
    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err("nearest_upsample", format!("input {s:?}, factor {factor}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); nc * oh * ow];
        for p in 0..nc {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    dst[oy * ow + ox] = row[ox / factor];
                }
            }
        }
        let rg = self.needs(x);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(t, Op::NearestUpsample { x, factor }, rg))
    }

    /// Divides every `[N, C, H, W]` feature vector by its root-mean-square
    /// over channels: `y = x / sqrt(mean_c x² + eps)`.
    pub fn channel_norm(&mut self, x: Var, eps: T) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] == 0 {
            return Err(shape_err("channel_norm", format!("input {s:?}")));
        }
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for_each_channel_rms(src, &s, eps, |idx, r| {
            for &i in idx {
                out[i] = src[i] / r;
            }
        });
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(s, out)?, Op::ChannelNorm { x, eps }, rg))
    }

    /// Rearranges `[N, C·f², H, W]` into `[N, C, H·f, W·f]` (sub-pixel upsampling).
    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        let ff = factor * factor;
        if s.len() != 4 || factor == 0 || s[1] % ff != 0 {
            return Err(shape_err("depth_to_space", format!("input {s:?}, factor {factor}")));
        }
        let (n, c, h, w) = (s[0], s[1] / ff, s[2], s[3]);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for_each_d2s(n, c, h, w, factor, |si, di| out[di] = src[si]);
        let rg = self.needs(x);
        let t = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        Ok(self.push(t, Op::DepthToSpace { x, factor }, rg))
    }

    /// Weighted binary cross-entropy on probabilities, with `p` clamped to `[eps, 1-eps]`:
    /// `-(1/norm) Σ pos_i·log p_i + neg_i·log(1-p_i)`.
    ///
    /// The weight vectors are constants, so any mask derived from another
    /// prediction carries no gradient.
    pub fn weighted_bce(&mut self, p: Var, pos: Vec<T>, neg: Vec<T>, norm: T, eps: T) -> Result<Var, NnError> {
        let pd = self.nodes[p.0].value.data();
        if pos.len() != pd.len() || neg.len() != pd.len() {
            return Err(shape_err("weighted_bce", format!("prediction {} vs weights {}/{}", pd.len(), pos.len(), neg.len())));
        }
        let mut acc = T::zero();
        for ((&pv, &wp), &wn) in pd.iter().zip(&pos).zip(&neg) {
            let q = pv.max(eps).min(T::one() - eps);
            if wp != T::zero() {
                acc = acc + wp * q.ln();
            }
            if wn != T::zero() {
                acc = acc + wn * (T::one() - q).ln();
            }
        }
        let loss = if norm > T::zero() { -acc / norm } else { T::zero() };
        let rg = self.needs(p);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedBce { p, pos, neg, norm, eps }, rg))
    }

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<(), NnError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        for node in &mut self.nodes {
            node.value.take_grad();
        }
        self.nodes[root.0].value.set_grad(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.value.grad() else { continue };
            backprop(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

// d_out -> contributions to inputs; inputs live strictly before the node.
fn backprop<T: Scalar>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    let want = |nodes: &[Node<T>], v: Var| nodes[v.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom, cols } => conv_backward(nodes, *x, *w, *b, geom, cols, g),
        Op::Dense { x, w, b, n, fan_in, fan_out } => {
            let (n, fi, fo) = (*n, *fan_in, *fan_out);
            if want(nodes, *w) {
                let xd = nodes[x.0].value.data().to_vec();
                let gw = nodes[w.0].value.grad_mut_or_zero();
                T::gemm(fo, n, fi, g, true, &xd, false, gw, T::one());
            }
            if want(nodes, *b) {
                let gb = nodes[b.0].value.grad_mut_or_zero();
                for row in g.chunks(fo) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
            }
            if want(nodes, *x) {
                let wd = nodes[w.0].value.data().to_vec();
                let gx = nodes[x.0].value.grad_mut_or_zero();
                T::gemm(n, fo, fi, g, false, &wd, false, gx, T::one());
            }
        }
        Op::LeakyRelu { x, slope } => {
            let s = *slope;
            elementwise(nodes, *x, g, |xi, _| if xi > T::zero() { T::one() } else { s }, out);
        }
        Op::Sigmoid { x } => elementwise(nodes, *x, g, |_, yi| yi * (T::one() - yi), out),
        Op::LogSigmoid { x } => elementwise(nodes, *x, g, |xi, _| sigmoid(-xi), out),
        Op::Log { x } => elementwise(nodes, *x, g, |xi, _| T::one() / xi, out),
        Op::Square { x } => elementwise(nodes, *x, g, |xi, _| xi + xi, out),
        Op::Scale { x, c } => {
            let c = *c;
            elementwise(nodes, *x, g, |_, _| c, out);
        }
        Op::AddScalar { x } | Op::Reshape { x } => elementwise(nodes, *x, g, |_, _| T::one(), out),
        Op::Grl { x, lambda } => {
            let f = -*lambda;
            elementwise(nodes, *x, g, |_, _| f, out);
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if want(nodes, v) {
                    add_into(nodes[v.0].value.grad_mut_or_zero(), g);
                }
            }
        }
        Op::Mul { a, b } => {
            if want(nodes, *a) {
                let other = nodes[b.0].value.data().to_vec();
                let ga = nodes[a.0].value.grad_mut_or_zero();
                for ((acc, &gi), &o) in ga.iter_mut().zip(g).zip(&other) {
                    *acc = *acc + gi * o;
                }
            }
            if want(nodes, *b) {
                let other = nodes[a.0].value.data().to_vec();
                let gb = nodes[b.0].value.grad_mut_or_zero();
                for ((acc, &gi), &o) in gb.iter_mut().zip(g).zip(&other) {
                    *acc = *acc + gi * o;
                }
            }
        }
        Op::Sum { x } => {
            if want(nodes, *x) {
                let g0 = g[0];
                for a in nodes[x.0].value.grad_mut_or_zero().iter_mut() {
                    *a = *a + g0;
                }
            }
        }
        Op::Mean { x } => {
            if want(nodes, *x) {
                let gx = nodes[x.0].value.grad_mut_or_zero();
                let g0 = g[0] / T::of(gx.len().max(1) as f64);
                for a in gx.iter_mut() {
                    *a = *a + g0;
                }
            }
        }
        Op::NearestUpsample { x, factor } => {
            if want(nodes, *x) {
                let f = *factor;
                let s = nodes[x.0].value.shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                let gx = nodes[x.0].value.grad_mut_or_zero();
                for p in 0..nc {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = &mut dst[(oy / f) * w + ox / f];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
        Op::DepthToSpace { x, factor } => {
            if want(nodes, *x) {
                let s = out.shape().to_vec();
                let f = *factor;
                let gx = nodes[x.0].value.grad_mut_or_zero();
                for_each_d2s(s[0], s[1], s[2] / f, s[3] / f, f, |si, di| gx[si] = gx[si] + g[di]);
            }
        }
        Op::ChannelNorm { x, eps } => {
            if want(nodes, *x) {
                let s = out.shape().to_vec();
                let c = T::of(s[1] as f64);
                let xd = nodes[x.0].value.data().to_vec();
                let y = out.data();
                let gx = nodes[x.0].value.grad_mut_or_zero();
                // dx_j = (g_j - y_j · mean_c(g·y)) / r
                for_each_channel_rms(&xd, &s, *eps, |idx, r| {
                    let dot = idx.iter().fold(T::zero(), |a, &i| a + g[i] * y[i]) / c;
                    for &i in idx {
                        gx[i] = gx[i] + (g[i] - y[i] * dot) / r;
                    }
                });
            }
        }
        Op::WeightedBce { p, pos, neg, norm, eps } => {
            if want(nodes, *p) && *norm > T::zero() {
                let scale = g[0] / *norm;
                let pd = nodes[p.0].value.data().to_vec();
                let gp = nodes[p.0].value.grad_mut_or_zero();
                let (lo, hi) = (*eps, T::one() - *eps);
                for (i, &pv) in pd.iter().enumerate() {
                    if pv < lo || pv > hi {
                        continue;
                    }
                    let d = -pos[i] / pv + neg[i] / (T::one() - pv);
                    gp[i] = gp[i] + scale * d;
                }
            }
        }
    }
}

// gx += g * local(x_i, y_i)
fn elementwise<T: Scalar>(nodes: &mut [Node<T>], x: Var, g: &[T], local: impl Fn(T, T) -> T, out: &Tensor<T>) {
    if !nodes[x.0].requires_grad {
        return;
    }
    let (xd, gx) = nodes[x.0].value.data_and_grad();
    for (((acc, &gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xd).zip(out.data()) {
        *acc = *acc + gi * local(xi, yi);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

// Calls `visit(indices, rms)` for every `(n, h, w)` channel vector.
fn for_each_channel_rms<T: Scalar>(x: &[T], shape: &[usize], eps: T, mut visit: impl FnMut(&[usize], T)) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut idx = vec![0; c];
    for b in 0..n {
        for p in 0..hw {
            for (ch, slot) in idx.iter_mut().enumerate() {
                *slot = (b * c + ch) * hw + p;
            }
            let ms = idx.iter().fold(T::zero(), |a, &i| a + x[i] * x[i]) / T::of(c as f64);
            visit(&idx, (ms + eps).sqrt());
        }
    }
}

fn for_each_d2s(n: usize, c: usize, h: usize, w: usize, f: usize, mut visit: impl FnMut(usize, usize)) {
    let (oh, ow) = (h * f, w * f);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    let sc = ch * f * f + dy * f + dx;
                    let src_base = (b * c * f * f + sc) * h * w;
                    let dst_base = (b * c + ch) * oh * ow;
                    for y in 0..h {
                        for x in 0..w {
                            visit(src_base + y * w + x, dst_base + (y * f + dy) * ow + x * f + dx);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let hw = g.out_hw();
    let mut col = vec![T::zero(); g.patch() * hw];
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..][..g.in_w];
                    let dst = &mut row[oy * g.out_w..][..g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let hw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                    let src = &row[oy * g.out_w..][..g.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward<T: Scalar>(nodes: &mut [Node<T>], x: Var, w: Var, b: Var, geom: &ConvGeom, cols: &[Vec<T>], g: &[T]) {
    let out_len = geom.out_c * geom.out_hw();
    let in_len = geom.in_c * geom.in_h * geom.in_w;
    if nodes[b.0].requires_grad {
        let gb = nodes[b.0].value.grad_mut_or_zero();
        for n in 0..geom.batch {
            for (o, chunk) in g[n * out_len..(n + 1) * out_len].chunks(geom.out_hw()).enumerate() {
                gb[o] = gb[o] + chunk.iter().copied().sum::<T>();
            }
        }
    }
    if nodes[w.0].requires_grad {
        let xd = if geom.pointwise() { nodes[x.0].value.data().to_vec() } else { Vec::new() };
        let gw = nodes[w.0].value.grad_mut_or_zero();
        for n in 0..geom.batch {
            let gy = &g[n * out_len..(n + 1) * out_len];
            let col: &[T] = if geom.pointwise() { &xd[n * in_len..(n + 1) * in_len] } else { &cols[n] };
            // dW[O, P] += dY[O, HW] · colᵀ[HW, P]
            T::gemm(geom.out_c, geom.out_hw(), geom.patch(), gy, false, col, true, gw, T::one());
        }
    }
    if nodes[x.0].requires_grad {
        let wd = nodes[w.0].value.data().to_vec();
        let gx = nodes[x.0].value.grad_mut_or_zero();
        let mut dcol = vec![T::zero(); geom.patch() * geom.out_hw()];
        for n in 0..geom.batch {
            let gy = &g[n * out_len..(n + 1) * out_len];
            let dx = &mut gx[n * in_len..(n + 1) * in_len];
            if geom.pointwise() {
                T::gemm(geom.in_c, geom.out_c, geom.out_hw(), &wd, true, gy, false, dx, T::one());
            } else {
                T::gemm(geom.patch(), geom.out_c, geom.out_hw(), &wd, true, gy, false, &mut dcol, T::zero());
                col2im_add(&dcol, geom, dx);
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn log_sigmoid<T: Scalar>(v: T) -> T {
    // -softplus(-v)
    if v >= T::zero() {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}
