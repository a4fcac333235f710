//! The autodiff tape and its operations.
//!
//! [`Graph`] records every op applied during a forward pass. Each op
//! validates shapes up front and returns a [`Var`] handle to its output
//! node. [`Graph::backward`] walks the tape in reverse, accumulating
//! gradients additively into every node that (transitively) requires them.
//!
//! Conventions worth knowing:
//!
//! * `conv2d` is cross-correlation (no kernel flip), the usual deep-learning
//!   convention. Zero padding, output size `(in + 2p - k) / stride + 1`.
//! * `relu` uses subgradient 0 at the kink; `maxpool2` routes ties to the
//!   first maximal element in row-major window order.
//! * `batchnorm` normalizes per channel over `N*H*W` with biased variance
//!   and epsilon inside the square root.
//! * The losses clamp probabilities to `[1e-7, 1 - 1e-7]`; outside the
//!   clamp the subgradient is 0.

use super::{Dims, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Whether batch statistics are computed (training) or running statistics
/// are used (inference).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Probability clamp for the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-7;
/// Additive smoothing term in the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    BnTrain { x: Var, gamma: Var, beta: Var, mean: Vec<T>, istd: Vec<T> },
    BnEval { x: Var, gamma: Var, beta: Var, istd: Vec<T>, mean: Vec<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    Add { a: Var, b: Var },
    MulConst { x: Var, k: T },
    BceLoss { p: Var, y: Var },
    DiceLoss { p: Var, y: Var },
}

struct Node<T: Scalar> {
    dims: Dims,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires: bool,
    op: Op<T>,
}

/// Reverse-mode autodiff tape over rank-4 tensors.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Put a tensor on the tape as a leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t.dims, t.data, requires_grad, Op::Leaf)
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor { dims: self.nodes[v.0].dims, data: self.nodes[v.0].data.clone() }
    }

    /// The single element of a `[1,1,1,1]` node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].dims.numel(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Errors if the node holds any NaN or Inf.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
        }
    }

    fn push(&mut self, dims: Dims, data: Vec<T>, requires: bool, op: Op<T>) -> Var {
        debug_assert_eq!(dims.numel(), data.len());
        self.nodes.push(Node { dims, data, grad: None, requires, op });
        Var(self.nodes.len() - 1)
    }

    fn requires_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires)
    }

    // ---- ops ----

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, kh, kw]`, `b: [1, Co, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        let bd = self.dims(b);
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if wd.c != xd.c {
            return Err(Error::dim(format!(
                "conv2d input channels {} do not match kernel channels {}",
                xd.c, wd.c
            )));
        }
        if bd != Dims::new(1, wd.n, 1, 1) {
            return Err(Error::dim(format!(
                "conv2d bias dims {} do not match [1, {}, 1, 1]",
                bd, wd.n
            )));
        }
        if xd.h + 2 * padding < wd.h || xd.w + 2 * padding < wd.w {
            return Err(Error::dim(format!(
                "conv2d kernel {}x{} does not fit padded input {}x{}",
                wd.h,
                wd.w,
                xd.h + 2 * padding,
                xd.w + 2 * padding
            )));
        }
        let od = Dims::new(
            xd.n,
            wd.n,
            (xd.h + 2 * padding - wd.h) / stride + 1,
            (xd.w + 2 * padding - wd.w) / stride + 1,
        );
        let mut out = vec![T::ZERO; od.numel()];
        conv2d_forward(
            &self.nodes[x.0].data,
            xd,
            &self.nodes[w.0].data,
            wd,
            &self.nodes[b.0].data,
            &mut out,
            od,
            stride,
            padding,
        );
        let req = self.requires_any(&[x, w, b]);
        Ok(self.push(od, out, req, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In train mode normalizes with the batch statistics and returns them
    /// (biased variance) so the caller can maintain running estimates. In
    /// eval mode the caller supplies the running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xd = self.dims(x);
        let c = xd.c;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.dims(v) != Dims::new(1, c, 1, 1) {
                return Err(Error::dim(format!(
                    "batchnorm {name} dims {} do not match [1, {c}, 1, 1]",
                    self.dims(v)
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(format!(
                "batchnorm running stats length {}/{} does not match {c} channels",
                running_mean.len(),
                running_var.len()
            )));
        }
        let per = xd.n * xd.h * xd.w;
        if per == 0 {
            return Err(Error::dim("batchnorm input has no elements per channel"));
        }
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let inv = T::from_f64(1.0 / per as f64);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut s = T::ZERO;
                    for n in 0..xd.n {
                        let base = xd.row(n, ch, 0);
                        for v in &self.nodes[x.0].data[base..base + xd.h * xd.w] {
                            s += *v;
                        }
                    }
                    let m = s * inv;
                    let mut sq = T::ZERO;
                    for n in 0..xd.n {
                        let base = xd.row(n, ch, 0);
                        for v in &self.nodes[x.0].data[base..base + xd.h * xd.w] {
                            let d = *v - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let istd: Vec<T> = var.iter().map(|v| T::ONE / (*v + eps).sqrt()).collect();
        let mut out = vec![T::ZERO; xd.numel()];
        {
            let xs = &self.nodes[x.0].data;
            let gs = &self.nodes[gamma.0].data;
            let bs = &self.nodes[beta.0].data;
            for n in 0..xd.n {
                for ch in 0..c {
                    let base = xd.row(n, ch, 0);
                    let (m, is, g, b) = (mean[ch], istd[ch], gs[ch], bs[ch]);
                    for i in base..base + xd.h * xd.w {
                        out[i] = (xs[i] - m) * is * g + b;
                    }
                }
            }
        }
        let req = self.requires_any(&[x, gamma, beta]);
        let op = match mode {
            Mode::Train => Op::BnTrain { x, gamma, beta, mean: mean.clone(), istd: istd.clone() },
            Mode::Eval => Op::BnEval { x, gamma, beta, istd: istd.clone(), mean: mean.clone() },
        };
        let out_var = self.push(xd, out, req, op);
        Ok((out_var, mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xd = self.dims(x);
        let out: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .map(|v| if *v > T::ZERO { *v } else { T::ZERO })
            .collect();
        let req = self.nodes[x.0].requires;
        self.push(xd, out, req, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xd = self.dims(x);
        let out: Vec<T> = self.nodes[x.0].data.iter().map(|v| sigmoid_stable(*v)).collect();
        let req = self.nodes[x.0].requires;
        self.push(xd, out, req, Op::Sigmoid { x })
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        if xd.h % 2 != 0 || xd.w % 2 != 0 {
            return Err(Error::dim(format!("maxpool2 requires even spatial dims, got {}", xd)));
        }
        let od = Dims::new(xd.n, xd.c, xd.h / 2, xd.w / 2);
        let mut out = vec![T::ZERO; od.numel()];
        let mut argmax = vec![0u32; od.numel()];
        let xs = &self.nodes[x.0].data;
        for n in 0..xd.n {
            for ch in 0..xd.c {
                for oh in 0..od.h {
                    for ow in 0..od.w {
                        // ties keep the first maximal element in row-major
                        // window order
                        let mut best_idx = xd.at(n, ch, 2 * oh, 2 * ow);
                        let mut best = xs[best_idx];
                        for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = xd.at(n, ch, 2 * oh + dh, 2 * ow + dw);
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                        let o = od.at(n, ch, oh, ow);
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                }
            }
        }
        let req = self.nodes[x.0].requires;
        Ok(self.push(od, out, req, Op::MaxPool2 { x, argmax }))
    }

    /// Nearest-neighbour upsampling by a factor of 2.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xd = self.dims(x);
        let od = Dims::new(xd.n, xd.c, xd.h * 2, xd.w * 2);
        let mut out = vec![T::ZERO; od.numel()];
        let xs = &self.nodes[x.0].data;
        for n in 0..xd.n {
            for ch in 0..xd.c {
                for h in 0..xd.h {
                    let src = xd.row(n, ch, h);
                    for dh in 0..2 {
                        let dst = od.row(n, ch, 2 * h + dh);
                        for w in 0..xd.w {
                            let v = xs[src + w];
                            out[dst + 2 * w] = v;
                            out[dst + 2 * w + 1] = v;
                        }
                    }
                }
            }
        }
        let req = self.nodes[x.0].requires;
        self.push(od, out, req, Op::Upsample2 { x })
    }

    /// Mean over the spatial dims: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xd = self.dims(x);
        let od = Dims::new(xd.n, xd.c, 1, 1);
        let inv = T::from_f64(1.0 / (xd.h * xd.w) as f64);
        let mut out = vec![T::ZERO; od.numel()];
        let xs = &self.nodes[x.0].data;
        for n in 0..xd.n {
            for ch in 0..xd.c {
                let base = xd.row(n, ch, 0);
                let mut s = T::ZERO;
                for v in &xs[base..base + xd.h * xd.w] {
                    s += *v;
                }
                out[od.at(n, ch, 0, 0)] = s * inv;
            }
        }
        let req = self.nodes[x.0].requires;
        self.push(od, out, req, Op::GlobalAvgPool { x })
    }

    /// Fully connected layer on `[N, Ci, 1, 1]` tensors.
    ///
    /// `w: [Co, Ci, 1, 1]`, `b: [1, Co, 1, 1]`, output `[N, Co, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        let bd = self.dims(b);
        if xd.h != 1 || xd.w != 1 {
            return Err(Error::dim(format!("linear input must be [N, C, 1, 1], got {}", xd)));
        }
        if wd.c != xd.c || wd.h != 1 || wd.w != 1 {
            return Err(Error::dim(format!(
                "linear weight dims {} do not match input channels {}",
                wd, xd.c
            )));
        }
        if bd != Dims::new(1, wd.n, 1, 1) {
            return Err(Error::dim(format!("linear bias dims {} do not match [1, {}, 1, 1]", bd, wd.n)));
        }
        let od = Dims::new(xd.n, wd.n, 1, 1);
        let mut out = vec![T::ZERO; od.numel()];
        let xs = &self.nodes[x.0].data;
        let ws = &self.nodes[w.0].data;
        let bs = &self.nodes[b.0].data;
        for n in 0..xd.n {
            let xrow = &xs[n * xd.c..(n + 1) * xd.c];
            for co in 0..wd.n {
                let wrow = &ws[co * wd.c..(co + 1) * wd.c];
                out[n * wd.n + co] = bs[co] + dot(xrow, wrow);
            }
        }
        let req = self.requires_any(&[x, w, b]);
        Ok(self.push(od, out, req, Op::Linear { x, w, b }))
    }

    /// Concatenate along the channel axis. Either side may have 0 channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a);
        let bd = self.dims(b);
        if ad.n != bd.n || ad.h != bd.h || ad.w != bd.w {
            return Err(Error::dim(format!(
                "concat_channels non-channel dims differ: {} vs {}",
                ad, bd
            )));
        }
        let od = Dims::new(ad.n, ad.c + bd.c, ad.h, ad.w);
        let mut out = vec![T::ZERO; od.numel()];
        let plane = ad.h * ad.w;
        let asrc = &self.nodes[a.0].data;
        let bsrc = &self.nodes[b.0].data;
        for n in 0..ad.n {
            let dst = od.row(n, 0, 0);
            let a0 = ad.row(n, 0, 0);
            let b0 = bd.row(n, 0, 0);
            out[dst..dst + ad.c * plane].copy_from_slice(&asrc[a0..a0 + ad.c * plane]);
            out[dst + ad.c * plane..dst + od.c * plane]
                .copy_from_slice(&bsrc[b0..b0 + bd.c * plane]);
        }
        let req = self.requires_any(&[a, b]);
        Ok(self.push(od, out, req, Op::ConcatChannels { a, b }))
    }

    /// Multiply each channel plane of `x` by the matching scalar in `s`.
    ///
    /// `x: [N, C, H, W]`, `s: [N, C, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xd = self.dims(x);
        let sd = self.dims(s);
        if sd != Dims::new(xd.n, xd.c, 1, 1) {
            return Err(Error::dim(format!(
                "scale_channels scale dims {} do not match [{}, {}, 1, 1]",
                sd, xd.n, xd.c
            )));
        }
        let mut out = vec![T::ZERO; xd.numel()];
        let xs = &self.nodes[x.0].data;
        let ss = &self.nodes[s.0].data;
        let plane = xd.h * xd.w;
        for n in 0..xd.n {
            for ch in 0..xd.c {
                let k = ss[n * xd.c + ch];
                let base = xd.row(n, ch, 0);
                for i in base..base + plane {
                    out[i] = xs[i] * k;
                }
            }
        }
        let req = self.requires_any(&[x, s]);
        Ok(self.push(xd, out, req, Op::ScaleChannels { x, s }))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.dims(a);
        if ad != self.dims(b) {
            return Err(Error::dim(format!(
                "add dims differ: {} vs {}",
                ad,
                self.dims(b)
            )));
        }
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let req = self.requires_any(&[a, b]);
        Ok(self.push(ad, out, req, Op::Add { a, b }))
    }

    /// Multiply by a compile-time-known constant.
    pub fn mul_const(&mut self, x: Var, k: T) -> Var {
        let xd = self.dims(x);
        let out: Vec<T> = self.nodes[x.0].data.iter().map(|v| *v * k).collect();
        let req = self.nodes[x.0].requires;
        self.push(xd, out, req, Op::MulConst { x, k })
    }

    /// Mean binary cross-entropy between predictions `p` and targets `y`.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs;
    /// the subgradient outside the clamp is 0. Targets must not require
    /// gradients.
    pub fn bce_loss(&mut self, p: Var, y: Var) -> Result<Var> {
        self.check_loss_inputs(p, y, "bce_loss")?;
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::from_f64(1.0 - BCE_CLAMP);
        let ps = &self.nodes[p.0].data;
        let ys = &self.nodes[y.0].data;
        let mut s = T::ZERO;
        for (pv, yv) in ps.iter().zip(ys) {
            let pc = (*pv).maximum(lo).minimum(hi);
            s += -(*yv * pc.ln() + (T::ONE - *yv) * (T::ONE - pc).ln());
        }
        let val = s * T::from_f64(1.0 / ps.len() as f64);
        let req = self.nodes[p.0].requires;
        Ok(self.push(Dims::new(1, 1, 1, 1), vec![val], req, Op::BceLoss { p, y }))
    }

    /// Soft Dice loss `1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s)` with
    /// smoothing `s = 1`. Targets must not require gradients.
    pub fn dice_loss(&mut self, p: Var, y: Var) -> Result<Var> {
        self.check_loss_inputs(p, y, "dice_loss")?;
        let ps = &self.nodes[p.0].data;
        let ys = &self.nodes[y.0].data;
        let smooth = T::from_f64(DICE_SMOOTH);
        let two = T::from_f64(2.0);
        let mut inter = T::ZERO;
        let mut psum = T::ZERO;
        let mut ysum = T::ZERO;
        for (pv, yv) in ps.iter().zip(ys) {
            inter += *pv * *yv;
            psum += *pv;
            ysum += *yv;
        }
        let val = T::ONE - (two * inter + smooth) / (psum + ysum + smooth);
        let req = self.nodes[p.0].requires;
        Ok(self.push(Dims::new(1, 1, 1, 1), vec![val], req, Op::DiceLoss { p, y }))
    }

    fn check_loss_inputs(&self, p: Var, y: Var, what: &str) -> Result<()> {
        if self.dims(p) != self.dims(y) {
            return Err(Error::dim(format!(
                "{what} prediction dims {} do not match target dims {}",
                self.dims(p),
                self.dims(y)
            )));
        }
        if self.nodes[y.0].requires {
            return Err(Error::config(format!("{what} targets must not require gradients")));
        }
        Ok(())
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node. Gradients accumulate
    /// additively; a node feeding several consumers receives the sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].dims.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got {}",
                self.nodes[loss.0].dims
            )));
        }
        if !self.nodes[loss.0].requires {
            return Err(Error::config("backward on a node that does not require gradients"));
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::ONE;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.take().unwrap();
            self.backprop_node(id, &grad);
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        if node.grad.is_none() {
            node.grad = Some(vec![T::ZERO; node.dims.numel()]);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Accumulate `f(out_grad)` into the gradient of `v`.
    fn add_grad(&mut self, v: Var, contribution: &[T]) {
        self.ensure_grad(v);
        let g = self.nodes[v.0].grad.as_mut().unwrap();
        for (dst, src) in g.iter_mut().zip(contribution) {
            *dst += *src;
        }
    }

    fn backprop_node(&mut self, id: usize, g: &[T]) {
        // Ops are cheap to describe; the match moves the borrow juggling
        // into per-op helpers that read inputs immutably and return fresh
        // gradient buffers.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding } => {
                let (x, w, b, stride, padding) = (*x, *w, *b, *stride, *padding);
                let od = self.nodes[id].dims;
                let xd = self.dims(x);
                let wd = self.dims(w);
                if self.wants(x) {
                    let mut dx = vec![T::ZERO; xd.numel()];
                    conv2d_backward_x(g, od, &self.nodes[w.0].data, wd, &mut dx, xd, stride, padding);
                    self.add_grad(x, &dx);
                }
                if self.wants(w) {
                    let mut dw = vec![T::ZERO; wd.numel()];
                    conv2d_backward_w(g, od, &self.nodes[x.0].data, xd, &mut dw, wd, stride, padding);
                    self.add_grad(w, &dw);
                }
                if self.wants(b) {
                    let mut db = vec![T::ZERO; wd.n];
                    for n in 0..od.n {
                        for co in 0..od.c {
                            let base = od.row(n, co, 0);
                            let mut s = T::ZERO;
                            for v in &g[base..base + od.h * od.w] {
                                s += *v;
                            }
                            db[co] += s;
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::BnTrain { x, gamma, beta, mean, istd, .. } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, istd) = (mean.clone(), istd.clone());
                let xd = self.dims(x);
                let per = (xd.n * xd.h * xd.w) as f64;
                let plane = xd.h * xd.w;
                let xs = &self.nodes[x.0].data;
                let gs = &self.nodes[gamma.0].data;
                // per-channel reductions of g and g*xhat
                let mut sum_g = vec![T::ZERO; xd.c];
                let mut sum_gx = vec![T::ZERO; xd.c];
                for n in 0..xd.n {
                    for ch in 0..xd.c {
                        let base = xd.row(n, ch, 0);
                        let (m, is) = (mean[ch], istd[ch]);
                        let mut sg = T::ZERO;
                        let mut sgx = T::ZERO;
                        for i in base..base + plane {
                            let xhat = (xs[i] - m) * is;
                            sg += g[i];
                            sgx += g[i] * xhat;
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }
                if self.wants(x) {
                    let xs = &self.nodes[x.0].data;
                    let inv_per = T::from_f64(1.0 / per);
                    let nval = T::from_f64(per);
                    let mut dx = vec![T::ZERO; xd.numel()];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let base = xd.row(n, ch, 0);
                            let (m, is, ga) = (mean[ch], istd[ch], gs[ch]);
                            let k = ga * is * inv_per;
                            for i in base..base + plane {
                                let xhat = (xs[i] - m) * is;
                                dx[i] = k * (nval * g[i] - sum_g[ch] - xhat * sum_gx[ch]);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.wants(gamma) {
                    self.add_grad(gamma, &sum_gx);
                }
                if self.wants(beta) {
                    self.add_grad(beta, &sum_g);
                }
            }
            Op::BnEval { x, gamma, beta, istd, mean } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, istd) = (mean.clone(), istd.clone());
                let xd = self.dims(x);
                let plane = xd.h * xd.w;
                if self.wants(x) {
                    let gs = &self.nodes[gamma.0].data;
                    let mut dx = vec![T::ZERO; xd.numel()];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let base = xd.row(n, ch, 0);
                            let k = gs[ch] * istd[ch];
                            for i in base..base + plane {
                                dx[i] = g[i] * k;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.wants(gamma) {
                    let xs = &self.nodes[x.0].data;
                    let mut dg = vec![T::ZERO; xd.c];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let base = xd.row(n, ch, 0);
                            let (m, is) = (mean[ch], istd[ch]);
                            let mut s = T::ZERO;
                            for i in base..base + plane {
                                s += g[i] * (xs[i] - m) * is;
                            }
                            dg[ch] += s;
                        }
                    }
                    self.add_grad(gamma, &dg);
                }
                if self.wants(beta) {
                    let mut db = vec![T::ZERO; xd.c];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let base = xd.row(n, ch, 0);
                            let mut s = T::ZERO;
                            for v in &g[base..base + plane] {
                                s += *v;
                            }
                            db[ch] += s;
                        }
                    }
                    self.add_grad(beta, &db);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.wants(x) {
                    let dx: Vec<T> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(xv, gv)| if *xv > T::ZERO { *gv } else { T::ZERO })
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.wants(x) {
                    let dx: Vec<T> = self.nodes[id]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(yv, gv)| *gv * *yv * (T::ONE - *yv))
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                if self.wants(x) {
                    let argmax = argmax.clone();
                    let mut dx = vec![T::ZERO; self.dims(x).numel()];
                    for (o, src) in argmax.iter().enumerate() {
                        dx[*src as usize] += g[o];
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Upsample2 { x } => {
                let x = *x;
                if self.wants(x) {
                    let xd = self.dims(x);
                    let od = self.nodes[id].dims;
                    let mut dx = vec![T::ZERO; xd.numel()];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            for h in 0..xd.h {
                                let dst = xd.row(n, ch, h);
                                for dh in 0..2 {
                                    let src = od.row(n, ch, 2 * h + dh);
                                    for w in 0..xd.w {
                                        dx[dst + w] += g[src + 2 * w] + g[src + 2 * w + 1];
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                if self.wants(x) {
                    let xd = self.dims(x);
                    let plane = xd.h * xd.w;
                    let inv = T::from_f64(1.0 / plane as f64);
                    let mut dx = vec![T::ZERO; xd.numel()];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let gv = g[n * xd.c + ch] * inv;
                            let base = xd.row(n, ch, 0);
                            for v in &mut dx[base..base + plane] {
                                *v = gv;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xd = self.dims(x);
                let wd = self.dims(w);
                if self.wants(x) {
                    let ws = &self.nodes[w.0].data;
                    let mut dx = vec![T::ZERO; xd.numel()];
                    for n in 0..xd.n {
                        for co in 0..wd.n {
                            let gv = g[n * wd.n + co];
                            let wrow = &ws[co * wd.c..(co + 1) * wd.c];
                            let drow = &mut dx[n * xd.c..(n + 1) * xd.c];
                            for (d, wv) in drow.iter_mut().zip(wrow) {
                                *d += gv * *wv;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.wants(w) {
                    let xs = &self.nodes[x.0].data;
                    let mut dw = vec![T::ZERO; wd.numel()];
                    for n in 0..xd.n {
                        let xrow = &xs[n * xd.c..(n + 1) * xd.c];
                        for co in 0..wd.n {
                            let gv = g[n * wd.n + co];
                            let drow = &mut dw[co * wd.c..(co + 1) * wd.c];
                            for (d, xv) in drow.iter_mut().zip(xrow) {
                                *d += gv * *xv;
                            }
                        }
                    }
                    self.add_grad(w, &dw);
                }
                if self.wants(b) {
                    let mut db = vec![T::ZERO; wd.n];
                    for n in 0..xd.n {
                        for co in 0..wd.n {
                            db[co] += g[n * wd.n + co];
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let ad = self.dims(a);
                let bd = self.dims(b);
                let od = self.nodes[id].dims;
                let plane = ad.h * ad.w;
                if self.wants(a) {
                    let mut da = vec![T::ZERO; ad.numel()];
                    for n in 0..ad.n {
                        let src = od.row(n, 0, 0);
                        let dst = ad.row(n, 0, 0);
                        da[dst..dst + ad.c * plane]
                            .copy_from_slice(&g[src..src + ad.c * plane]);
                    }
                    self.add_grad(a, &da);
                }
                if self.wants(b) {
                    let mut db = vec![T::ZERO; bd.numel()];
                    for n in 0..bd.n {
                        let src = od.row(n, 0, 0) + ad.c * plane;
                        let dst = bd.row(n, 0, 0);
                        db[dst..dst + bd.c * plane]
                            .copy_from_slice(&g[src..src + bd.c * plane]);
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::ScaleChannels { x, s } => {
                let (x, s) = (*x, *s);
                let xd = self.dims(x);
                let plane = xd.h * xd.w;
                if self.wants(x) {
                    let ss = &self.nodes[s.0].data;
                    let mut dx = vec![T::ZERO; xd.numel()];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let k = ss[n * xd.c + ch];
                            let base = xd.row(n, ch, 0);
                            for i in base..base + plane {
                                dx[i] = g[i] * k;
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.wants(s) {
                    let xs = &self.nodes[x.0].data;
                    let mut ds = vec![T::ZERO; xd.n * xd.c];
                    for n in 0..xd.n {
                        for ch in 0..xd.c {
                            let base = xd.row(n, ch, 0);
                            ds[n * xd.c + ch] = dot(&g[base..base + plane], &xs[base..base + plane]);
                        }
                    }
                    self.add_grad(s, &ds);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    self.add_grad(a, g);
                }
                if self.wants(b) {
                    self.add_grad(b, g);
                }
            }
            Op::MulConst { x, k } => {
                let (x, k) = (*x, *k);
                if self.wants(x) {
                    let dx: Vec<T> = g.iter().map(|v| *v * k).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::BceLoss { p, y } => {
                let (p, y) = (*p, *y);
                if self.wants(p) {
                    let lo = T::from_f64(BCE_CLAMP);
                    let hi = T::from_f64(1.0 - BCE_CLAMP);
                    let ps = &self.nodes[p.0].data;
                    let ys = &self.nodes[y.0].data;
                    let inv = T::from_f64(1.0 / ps.len() as f64);
                    let g0 = g[0];
                    let dp: Vec<T> = ps
                        .iter()
                        .zip(ys)
                        .map(|(pv, yv)| {
                            if *pv < lo || *pv > hi {
                                T::ZERO
                            } else {
                                let pc = *pv;
                                g0 * inv * (-(*yv) / pc + (T::ONE - *yv) / (T::ONE - pc))
                            }
                        })
                        .collect();
                    self.add_grad(p, &dp);
                }
            }
            Op::DiceLoss { p, y } => {
                let (p, y) = (*p, *y);
                if self.wants(p) {
                    let ps = &self.nodes[p.0].data;
                    let ys = &self.nodes[y.0].data;
                    let smooth = T::from_f64(DICE_SMOOTH);
                    let two = T::from_f64(2.0);
                    let mut inter = T::ZERO;
                    let mut psum = T::ZERO;
                    let mut ysum = T::ZERO;
                    for (pv, yv) in ps.iter().zip(ys) {
                        inter += *pv * *yv;
                        psum += *pv;
                        ysum += *yv;
                    }
                    let a = two * inter + smooth;
                    let b = psum + ysum + smooth;
                    let g0 = g[0];
                    let dp: Vec<T> = ys
                        .iter()
                        .map(|yv| g0 * (a - two * *yv * b) / (b * b))
                        .collect();
                    self.add_grad(p, &dp);
                }
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Dot product with fixed-order lane accumulation. The lane structure keeps
/// the summation order independent of the optimizer while still allowing
/// vectorization.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [T::ZERO; LANES];
    let chunks = n / LANES;
    for i in 0..chunks {
        let base = i * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut s = T::ZERO;
    for a in acc {
        s += a;
    }
    for i in chunks * LANES..n {
        s += a[i] * b[i];
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    xs: &[T],
    xd: Dims,
    ws: &[T],
    wd: Dims,
    bs: &[T],
    out: &mut [T],
    od: Dims,
    stride: usize,
    padding: usize,
) {
    for n in 0..od.n {
        for co in 0..od.c {
            let b = bs[co];
            let base = od.row(n, co, 0);
            for v in &mut out[base..base + od.h * od.w] {
                *v = b;
            }
            for ci in 0..xd.c {
                for kh in 0..wd.h {
                    for kw in 0..wd.w {
                        let wv = ws[wd.at(co, ci, kh, kw)];
                        for oh in 0..od.h {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih as usize >= xd.h {
                                continue;
                            }
                            let xrow = xd.row(n, ci, ih as usize);
                            let orow = od.row(n, co, oh);
                            if stride == 1 {
                                // input col = ow + kw - padding; clip to [0, W)
                                let lo = padding.saturating_sub(kw);
                                let hi = (xd.w + padding).saturating_sub(kw).min(od.w);
                                if lo >= hi {
                                    continue;
                                }
                                let xoff = lo + kw - padding;
                                let src = &xs[xrow + xoff..xrow + xoff + (hi - lo)];
                                let dst = &mut out[orow + lo..orow + hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ow in 0..od.w {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw as usize >= xd.w {
                                        continue;
                                    }
                                    out[orow + ow] += wv * xs[xrow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_x<T: Scalar>(
    g: &[T],
    od: Dims,
    ws: &[T],
    wd: Dims,
    dx: &mut [T],
    xd: Dims,
    stride: usize,
    padding: usize,
) {
    for n in 0..od.n {
        for co in 0..od.c {
            for ci in 0..xd.c {
                for kh in 0..wd.h {
                    for kw in 0..wd.w {
                        let wv = ws[wd.at(co, ci, kh, kw)];
                        for oh in 0..od.h {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih as usize >= xd.h {
                                continue;
                            }
                            let xrow = xd.row(n, ci, ih as usize);
                            let grow = od.row(n, co, oh);
                            if stride == 1 {
                                let lo = padding.saturating_sub(kw);
                                let hi = (xd.w + padding).saturating_sub(kw).min(od.w);
                                if lo >= hi {
                                    continue;
                                }
                                let xoff = lo + kw - padding;
                                let src = &g[grow + lo..grow + hi];
                                let dst = &mut dx[xrow + xoff..xrow + xoff + (hi - lo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ow in 0..od.w {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw as usize >= xd.w {
                                        continue;
                                    }
                                    dx[xrow + iw as usize] += wv * g[grow + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_w<T: Scalar>(
    g: &[T],
    od: Dims,
    xs: &[T],
    xd: Dims,
    dw: &mut [T],
    wd: Dims,
    stride: usize,
    padding: usize,
) {
    for n in 0..od.n {
        for co in 0..od.c {
            for ci in 0..xd.c {
                for kh in 0..wd.h {
                    for kw in 0..wd.w {
                        let mut acc = T::ZERO;
                        for oh in 0..od.h {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih as usize >= xd.h {
                                continue;
                            }
                            let xrow = xd.row(n, ci, ih as usize);
                            let grow = od.row(n, co, oh);
                            if stride == 1 {
                                let lo = padding.saturating_sub(kw);
                                let hi = (xd.w + padding).saturating_sub(kw).min(od.w);
                                if lo >= hi {
                                    continue;
                                }
                                let xoff = lo + kw - padding;
                                acc += dot(
                                    &g[grow + lo..grow + hi],
                                    &xs[xrow + xoff..xrow + xoff + (hi - lo)],
                                );
                            } else {
                                for ow in 0..od.w {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw as usize >= xd.w {
                                        continue;
                                    }
                                    acc += g[grow + ow] * xs[xrow + iw as usize];
                                }
                            }
                        }
                        dw[wd.at(co, ci, kh, kw)] += acc;
                    }
                }
            }
        }
    }
}
