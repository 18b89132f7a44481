//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for every node that
//! depends on a leaf created with `requires_grad`.

use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::patch::{cosine, cosine_grad, patch_scatter, patch_vector, FoldLayout, PatchGeom};
use crate::error::{shape_err, Result};
use crate::resample::ResizePlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
    Abs,
    Log,
    Square,
    Sqrt,
    Neg,
    Clamp(f64, f64),
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulPlane(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Rms(Var),
    Concat(Vec<Var>),
    PixelShuffle(Var, usize),
    Resize(Var, Rc<ResizePlan<T>>),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    PlaceBlocks {
        blocks: Vec<(Var, usize, usize)>,
        counts: Vec<T>,
    },
    GatherFold {
        src: Var,
        idx: Rc<Vec<usize>>,
        layout: Rc<FoldLayout>,
        counts: Vec<T>,
    },
    PatchCosine {
        a: Var,
        b: Var,
        idx: Rc<Vec<usize>>,
        geom: PatchGeom,
        eps: T,
    },
    GlobalAvgPool(Var),
    ChannelNorm(Var, T),
    Stack(Vec<Var>),
    Softmax(Var),
    Index(Var, usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations over scalar type `T`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates performed by conv layers recorded on this tape.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding `t`; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Copies the value of `v` into a fresh constant; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(shape_err!("conv weight {:?} incompatible with input channels {c}", ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| shape_err!("conv k={k} does not fit {h}x{wd}"))?;
        let bias = match b {
            Some(b) => {
                if self.value(b).len() != cout {
                    return Err(shape_err!("bias length mismatch"));
                }
                Some(self.value(b).data())
            }
            None => None,
        };
        let y = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom, cout);
        self.macs += (cout * geom.col_rows() * geom.col_cols()) as u64;
        let t = Tensor::new(&[cout, geom.out_h, geom.out_w], y)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution with weight `[cin, cout, k, k]`; output size is
    /// `(h-1)*stride - 2*pad + k + out_pad`.
    pub fn conv_t2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[2] != ws[3] {
            return Err(shape_err!("deconv weight {:?} incompatible with input channels {cin}", ws));
        }
        let (cout, k) = (ws[1], ws[2]);
        let oh = ((h - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(shape_err!("deconv output would be empty")),
        };
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| shape_err!("inconsistent deconv geometry"))?;
        let bias = b.map(|b| self.value(b).data());
        let y = conv::conv_t_forward(self.value(x).data(), self.value(w).data(), bias, &geom, cin);
        self.macs += (cin * geom.col_rows() * geom.col_cols()) as u64;
        let t = Tensor::new(&[cout, oh, ow], y)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t, Op::ConvT2d { x, w, b, geom }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `[C, H, W] ⊙ [1, H, W]`, broadcasting the plane over channels.
    pub fn mul_plane(&mut self, a: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        if self.value(m).shape() != [1, h, w] {
            return Err(shape_err!("plane {:?} does not match {:?}", self.shape(m), self.shape(a)));
        }
        let plane = self.value(m).data();
        let mut out = self.value(a).data().to_vec();
        for ch in 0..c {
            for (v, &p) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(plane) {
                *v *= p;
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        let ng = self.needs(a) || self.needs(m);
        Ok(self.push(t, Op::MulPlane(a, m), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let t = self.value(a).map(|x| forward_unary(f, x));
        let ng = self.needs(a);
        self.push(t, Op::Unary(a, f), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(t, Op::Mean(a), ng)
    }

    /// Root of the mean of squares.
    pub fn rms(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let ms = v.data().iter().fold(T::zero(), |s, &x| s + x * x) / T::of(v.len() as f64);
        let t = Tensor::scalar(ms.sqrt());
        let ng = self.needs(a);
        self.push(t, Op::Rms(a), ng)
    }

    /// Channel concatenation of `[C_i, H, W]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of nothing"));
        }
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!("concat spatial mismatch {ph}x{pw} vs {h}x{w}"));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[c_total, h, w], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Sub-pixel rearrangement `[C*r*r, H, W] -> [C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let (cr, h, w) = self.value(a).chw()?;
        if cr % (r * r) != 0 {
            return Err(shape_err!("pixel shuffle needs channels divisible by {}", r * r));
        }
        let c = cr / (r * r);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); cr * h * w];
        let (oh, ow) = (h * r, w * r);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            out[(ch * oh + y * r + i) * ow + x * r + j] = src[(sc * h + y) * w + x];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::PixelShuffle(a, r), ng))
    }

    pub fn resize(&mut self, a: Var, plan: Rc<ResizePlan<T>>) -> Result<Var> {
        let t = plan.apply(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Resize(a, plan), ng))
    }

    pub fn crop(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a).crop(y0, x0, h, w)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Crop { x: a, y0, x0 }, ng))
    }

    /// Assembles `[C, h_i, w_i]` blocks at top-left offsets into a
    /// `[C, H, W]` map, averaging where blocks overlap.
    pub fn place_blocks(&mut self, blocks: &[(Var, usize, usize)], h: usize, w: usize) -> Result<Var> {
        let c = self.value(blocks.first().ok_or_else(|| shape_err!("no blocks"))?.0).chw()?.0;
        let mut out = vec![T::zero(); c * h * w];
        let mut counts = vec![T::zero(); h * w];
        for &(b, y0, x0) in blocks {
            let (bc, bh, bw) = self.value(b).chw()?;
            if bc != c || y0 + bh > h || x0 + bw > w {
                return Err(shape_err!("block {bc}x{bh}x{bw} at ({y0},{x0}) outside {c}x{h}x{w}"));
            }
            let d = self.value(b).data();
            for y in 0..bh {
                for x in 0..bw {
                    counts[(y0 + y) * w + x0 + x] += T::one();
                    for ch in 0..c {
                        out[(ch * h + y0 + y) * w + x0 + x] += d[(ch * bh + y) * bw + x];
                    }
                }
            }
        }
        for ch in 0..c {
            for (v, &n) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&counts) {
                if n > T::one() {
                    *v /= n;
                }
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        let ng = blocks.iter().any(|&(b, _, _)| self.needs(b));
        Ok(self.push(
            t,
            Op::PlaceBlocks {
                blocks: blocks.to_vec(),
                counts,
            },
            ng,
        ))
    }

    /// Sets patch `idx[i]` of `src` as patch `i` of a `dst`-sized block,
    /// averaging overlapping patch contributions.
    pub fn gather_fold(&mut self, src: Var, idx: Rc<Vec<usize>>, dst: (usize, usize), geom: PatchGeom) -> Result<Var> {
        let (c, h, w) = self.value(src).chw()?;
        let layout = FoldLayout::new(c, (h, w), dst, geom)?;
        layout.check_indices(&idx)?;
        let counts = layout.counts::<T>();
        let out = layout.gather_fold(self.value(src).data(), &idx, &counts);
        let t = Tensor::new(&[c, dst.0, dst.1], out)?;
        let ng = self.needs(src);
        Ok(self.push(
            t,
            Op::GatherFold {
                src,
                idx,
                layout: Rc::new(layout),
                counts,
            },
            ng,
        ))
    }

    /// Cosine similarity between patch `i` of `a` and patch `idx[i]` of `b`,
    /// laid out on `a`'s patch grid as `[1, gh, gw]`.
    pub fn patch_cosine(&mut self, a: Var, b: Var, idx: Rc<Vec<usize>>, geom: PatchGeom, eps: T) -> Result<Var> {
        let (c, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if c != cb {
            return Err(shape_err!("patch cosine channel mismatch {c} vs {cb}"));
        }
        let (gh, gw) = geom.grid(ha, wa)?;
        let (jh, jw) = geom.grid(hb, wb)?;
        if idx.len() != gh * gw || idx.iter().any(|&j| j >= jh * jw) {
            return Err(crate::error::Error::CorruptMatch("patch cosine indices out of range".into()));
        }
        let (mut p, mut q) = (Vec::new(), Vec::new());
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let j = idx[gy * gw + gx];
                patch_vector(self.value(a).data(), c, ha, wa, &geom, gy, gx, &mut p);
                patch_vector(self.value(b).data(), c, hb, wb, &geom, j / jw, j % jw, &mut q);
                out.push(cosine(&p, &q, eps));
            }
        }
        let t = Tensor::new(&[1, gh, gw], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::PatchCosine { a, b, idx, geom, eps }, ng))
    }

    /// `[C, H, W] -> [C, 1, 1]` mean over space.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let d = self.value(a).data();
        let n = T::of((h * w) as f64);
        let out = (0..c)
            .map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<T>() / n)
            .collect();
        let t = Tensor::new(&[c, 1, 1], out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::GlobalAvgPool(a), ng))
    }

    /// Per-pixel L2 norm across channels divided by the channel count,
    /// `[C, H, W] -> [1, H, W]`. `eps` keeps the gradient finite at zero.
    pub fn channel_norm_pool(&mut self, a: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let d = self.value(a).data();
        let cn = T::of(c as f64);
        let out = (0..h * w)
            .map(|i| {
                let ss = (0..c).fold(T::zero(), |s, ch| s + d[ch * h * w + i] * d[ch * h * w + i]);
                (ss + eps * eps).sqrt() / cn
            })
            .collect();
        let t = Tensor::new(&[1, h, w], out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::ChannelNorm(a, eps), ng))
    }

    /// Stacks single-element tensors into a vector `[n]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(shape_err!("stack expects scalars, got {:?}", self.shape(p)));
            }
            out.push(self.scalar_value(p));
        }
        let t = Tensor::new(&[parts.len()], out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::Stack(parts.to_vec()), ng))
    }

    /// Softmax over all elements of `a`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let m = d.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let e: Vec<T> = d.iter().map(|&x| (x - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        let t = Tensor::new(self.shape(a), e.into_iter().map(|v| v / z).collect()).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = *self
            .value(a)
            .data()
            .get(i)
            .ok_or_else(|| shape_err!("index {i} out of range"))?;
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i), ng))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cout = val(*w).shape()[0];
                let need = (needs(*x), needs(*w), b.is_some_and(needs));
                let r = conv::conv2d_backward(val(*x).data(), val(*w).data(), g.data(), geom, cout, need);
                self.put(grads, *x, r.dx);
                self.put(grads, *w, r.dw);
                if let Some(b) = b {
                    self.put(grads, *b, r.db);
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let cin = val(*w).shape()[0];
                let need = (needs(*x), needs(*w), b.is_some_and(needs));
                let r = conv::conv_t_backward(val(*x).data(), val(*w).data(), g.data(), geom, cin, need);
                self.put(grads, *x, r.dx);
                self.put(grads, *w, r.dw);
                if let Some(b) = b {
                    self.put(grads, *b, r.db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    acc(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    acc(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(&mut grads[a.0], g.zip_map(val(*b), |x, y| x * y).expect("shape"));
                }
                if needs(*b) {
                    acc(&mut grads[b.0], g.zip_map(val(*a), |x, y| x * y).expect("shape"));
                }
            }
            Op::MulPlane(a, m) => {
                let (c, h, w) = val(*a).dims3();
                let plane = val(*m).data();
                if needs(*a) {
                    let mut d = g.data().to_vec();
                    for ch in 0..c {
                        for (v, &p) in d[ch * h * w..(ch + 1) * h * w].iter_mut().zip(plane) {
                            *v *= p;
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(&[c, h, w], d).expect("shape"));
                }
                if needs(*m) {
                    let av = val(*a).data();
                    let gd = g.data();
                    let mut d = vec![T::zero(); h * w];
                    for ch in 0..c {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v += gd[ch * h * w + i] * av[ch * h * w + i];
                        }
                    }
                    acc(&mut grads[m.0], Tensor::new(&[1, h, w], d).expect("shape"));
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    let s = *s;
                    acc(&mut grads[a.0], g.map(|v| v * s));
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
            }
            Op::Unary(a, f) => {
                if needs(*a) {
                    let x = val(*a).data();
                    let y = node.value.data();
                    let d: Vec<T> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * unary_derivative(*f, x[i], y[i]))
                        .collect();
                    acc(&mut grads[a.0], Tensor::new(val(*a).shape(), d).expect("shape"));
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(&mut grads[a.0], Tensor::full(val(*a).shape(), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = T::of(val(*a).len() as f64);
                    acc(&mut grads[a.0], Tensor::full(val(*a).shape(), g.data()[0] / n));
                }
            }
            Op::Rms(a) => {
                if needs(*a) {
                    let r = node.value.data()[0];
                    let n = T::of(val(*a).len() as f64);
                    let gv = g.data()[0];
                    let d = if r > T::zero() {
                        val(*a).map(|x| gv * x / (n * r))
                    } else {
                        Tensor::zeros(val(*a).shape())
                    };
                    acc(&mut grads[a.0], d);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        let d = g.data()[off..off + n].to_vec();
                        acc(&mut grads[p.0], Tensor::new(val(p).shape(), d).expect("shape"));
                    }
                    off += n;
                }
            }
            Op::PixelShuffle(a, r) => {
                if needs(*a) {
                    let r = *r;
                    let (cr, h, w) = val(*a).dims3();
                    let c = cr / (r * r);
                    let (oh, ow) = (h * r, w * r);
                    let gd = g.data();
                    let mut d = vec![T::zero(); cr * h * w];
                    for ch in 0..c {
                        for i in 0..r {
                            for j in 0..r {
                                let sc = ch * r * r + i * r + j;
                                for y in 0..h {
                                    for x in 0..w {
                                        d[(sc * h + y) * w + x] = gd[(ch * oh + y * r + i) * ow + x * r + j];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(&[cr, h, w], d).expect("shape"));
                }
            }
            Op::Resize(a, plan) => {
                if needs(*a) {
                    acc(&mut grads[a.0], plan.apply_transpose(g).expect("shape"));
                }
            }
            Op::Crop { x, y0, x0 } => {
                if needs(*x) {
                    let (c, h, w) = val(*x).dims3();
                    let (_, ch, cw) = g.dims3();
                    let mut d = vec![T::zero(); c * h * w];
                    let gd = g.data();
                    for k in 0..c {
                        for y in 0..ch {
                            let dst = (k * h + y0 + y) * w + x0;
                            d[dst..dst + cw].copy_from_slice(&gd[(k * ch + y) * cw..(k * ch + y + 1) * cw]);
                        }
                    }
                    acc(&mut grads[x.0], Tensor::new(&[c, h, w], d).expect("shape"));
                }
            }
            Op::PlaceBlocks { blocks, counts } => {
                let (c, h, w) = g.dims3();
                let gd = g.data();
                for &(b, y0, x0) in blocks {
                    if !needs(b) {
                        continue;
                    }
                    let (_, bh, bw) = val(b).dims3();
                    let mut d = vec![T::zero(); c * bh * bw];
                    for y in 0..bh {
                        for x in 0..bw {
                            let n = counts[(y0 + y) * w + x0 + x].max(T::one());
                            for ch in 0..c {
                                d[(ch * bh + y) * bw + x] = gd[(ch * h + y0 + y) * w + x0 + x] / n;
                            }
                        }
                    }
                    acc(&mut grads[b.0], Tensor::new(&[c, bh, bw], d).expect("shape"));
                }
            }
            Op::GatherFold { src, idx, layout, counts } => {
                if needs(*src) {
                    let d = layout.gather_fold_adjoint(g.data(), idx, counts);
                    acc(&mut grads[src.0], Tensor::new(val(*src).shape(), d).expect("shape"));
                }
            }
            Op::PatchCosine { a, b, idx, geom, eps } => {
                let (c, ha, wa) = val(*a).dims3();
                let (_, hb, wb) = val(*b).dims3();
                let (_, jw) = geom.grid(hb, wb).expect("validated");
                let (gh, gw) = (g.shape()[1], g.shape()[2]);
                let mut da = needs(*a).then(|| vec![T::zero(); c * ha * wa]);
                let mut db = needs(*b).then(|| vec![T::zero(); c * hb * wb]);
                let (mut p, mut q, mut gr) = (Vec::new(), Vec::new(), Vec::new());
                for gy in 0..gh {
                    for gx in 0..gw {
                        let gv = g.data()[gy * gw + gx];
                        if gv == T::zero() {
                            continue;
                        }
                        let j = idx[gy * gw + gx];
                        patch_vector(val(*a).data(), c, ha, wa, geom, gy, gx, &mut p);
                        patch_vector(val(*b).data(), c, hb, wb, geom, j / jw, j % jw, &mut q);
                        if let Some(da) = da.as_mut() {
                            cosine_grad(&p, &q, *eps, &mut gr);
                            patch_scatter(da, c, ha, wa, geom, gy, gx, &gr, gv);
                        }
                        if let Some(db) = db.as_mut() {
                            cosine_grad(&q, &p, *eps, &mut gr);
                            patch_scatter(db, c, hb, wb, geom, j / jw, j % jw, &gr, gv);
                        }
                    }
                }
                if let Some(da) = da {
                    acc(&mut grads[a.0], Tensor::new(&[c, ha, wa], da).expect("shape"));
                }
                if let Some(db) = db {
                    acc(&mut grads[b.0], Tensor::new(&[c, hb, wb], db).expect("shape"));
                }
            }
            Op::GlobalAvgPool(a) => {
                if needs(*a) {
                    let (c, h, w) = val(*a).dims3();
                    let n = T::of((h * w) as f64);
                    let mut d = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        let gv = g.data()[ch] / n;
                        d[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v = gv);
                    }
                    acc(&mut grads[a.0], Tensor::new(&[c, h, w], d).expect("shape"));
                }
            }
            Op::ChannelNorm(a, _) => {
                if needs(*a) {
                    let (c, h, w) = val(*a).dims3();
                    let x = val(*a).data();
                    let y = node.value.data();
                    let cn = T::of(c as f64);
                    let mut d = vec![T::zero(); c * h * w];
                    for i in 0..h * w {
                        // y = sqrt(ss + eps^2) / c  =>  dy/dx = x / (c^2 * y)
                        let denom = cn * cn * y[i];
                        let gv = g.data()[i];
                        for ch in 0..c {
                            d[ch * h * w + i] = gv * x[ch * h * w + i] / denom;
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(&[c, h, w], d).expect("shape"));
                }
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        acc(&mut grads[p.0], Tensor::new(val(p).shape(), vec![g.data()[k]]).expect("shape"));
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let gd = g.data();
                    let dot: T = y.iter().zip(gd).map(|(&s, &gv)| s * gv).sum();
                    let d: Vec<T> = y.iter().zip(gd).map(|(&s, &gv)| s * (gv - dot)).collect();
                    acc(&mut grads[a.0], Tensor::new(val(*a).shape(), d).expect("shape"));
                }
            }
            Op::Index(a, i) => {
                if needs(*a) {
                    let mut d = Tensor::zeros(val(*a).shape());
                    d.data_mut()[*i] = g.data()[0];
                    acc(&mut grads[a.0], d);
                }
            }
        }
    }

    fn put(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Option<Vec<T>>) {
        if let Some(d) = d {
            if self.needs(v) {
                let t = Tensor::new(self.shape(v), d).expect("gradient shape");
                acc(&mut grads[v.0], t);
            }
        }
    }
}

fn forward_unary<T: Scalar>(f: Unary, x: T) -> T {
    let zero = T::zero();
    match f {
        Unary::Relu => x.max(zero),
        Unary::LeakyRelu(s) => {
            if x > zero {
                x
            } else {
                x * T::of(s)
            }
        }
        Unary::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Abs => x.abs(),
        Unary::Log => x.ln(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Neg => -x,
        Unary::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
    }
}

fn unary_derivative<T: Scalar>(f: Unary, x: T, y: T) -> T {
    let (zero, one) = (T::zero(), T::one());
    match f {
        Unary::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        Unary::LeakyRelu(s) => {
            if x > zero {
                one
            } else {
                T::of(s)
            }
        }
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (one - y),
        Unary::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        Unary::Log => one / x,
        Unary::Square => x + x,
        Unary::Sqrt => {
            if y > zero {
                one / (y + y)
            } else {
                zero
            }
        }
        Unary::Neg => -one,
        Unary::Clamp(lo, hi) => {
            if x >= T::of(lo) && x <= T::of(hi) {
                one
            } else {
                zero
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
