//! Reverse-mode differentiation over the dynamic op graph.
//!
//! Each tensor records the op that produced it plus handles to the inputs.
//! `backward` seeds the scalar loss with 1, walks the graph in reverse
//! topological order, and accumulates gradients additively so a tensor used
//! on several paths receives the sum of all path gradients.

use std::collections::HashMap;

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::ops::LAYER_NORM_EPS;
use crate::tensor::{Scalar, Tensor};

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    MulBcast(Tensor<T>, Tensor<T>),
    Affine { x: Tensor<T>, a: T },
    Ln(Tensor<T>),
    Gelu(Tensor<T>),
    SumAll(Tensor<T>),
    MeanPerImage(Tensor<T>),
    Conv2d {
        x: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ChannelLayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
    },
    SimpleGate(Tensor<T>),
    GlobalAvgPool(Tensor<T>),
    NearestResize(Tensor<T>),
    PixelShuffle { x: Tensor<T>, r: usize },
    PixelUnshuffle { x: Tensor<T>, r: usize },
    ConcatChannels(Vec<Tensor<T>>),
    MergePairs { x: Tensor<T>, pairs: Vec<(usize, usize)> },
    SliceN { x: Tensor<T>, start: usize },
    SliceC { x: Tensor<T>, start: usize },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulBcast(a, b) => vec![a, b],
            Op::Affine { x, .. }
            | Op::Ln(x)
            | Op::Gelu(x)
            | Op::SumAll(x)
            | Op::MeanPerImage(x)
            | Op::SimpleGate(x)
            | Op::GlobalAvgPool(x)
            | Op::NearestResize(x)
            | Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::MergePairs { x, .. }
            | Op::SliceN { x, .. }
            | Op::SliceC { x, .. } => vec![x],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![x, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::ChannelLayerNorm { x, gamma, beta } => vec![x, gamma, beta],
            Op::ConcatChannels(xs) => xs.iter().collect(),
        }
    }
}

struct GradStore<T> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn new() -> Self {
        GradStore {
            grads: HashMap::new(),
        }
    }

    fn accumulate(&mut self, t: &Tensor<T>, g: Vec<T>) {
        debug_assert_eq!(g.len(), t.numel());
        match self.grads.get_mut(&t.id()) {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => {
                self.grads.insert(t.id(), g);
            }
        }
    }

    fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.grads.remove(&t.id())
    }
}

/// Tensors that participate in this backward pass: they require grad and sit
/// on a path from a requires_grad leaf to the loss.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    // Iterative post-order DFS; nodes come out inputs-first, then reversed so
    // the root is processed before anything it depends on.
    let mut order = Vec::new();
    let mut visited: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    while let Some((node, child_idx)) = stack.pop() {
        if child_idx == 0 {
            if visited.contains_key(&node.id()) {
                continue;
            }
            visited.insert(node.id(), ());
        }
        let inputs = node.op().inputs();
        let next: Option<Tensor<T>> = inputs
            .iter()
            .skip(child_idx)
            .find(|t| t.requires_grad() && !visited.contains_key(&t.id()))
            .map(|t| (*t).clone());
        match next {
            Some(child) => {
                // Resume this node after the child subtree.
                let resume_at = inputs
                    .iter()
                    .position(|t| t.id() == child.id())
                    .unwrap_or(inputs.len())
                    + 1;
                stack.push((node, resume_at));
                stack.push((child, 0));
            }
            None => order.push(node),
        }
    }
    order.reverse();
    order
}

/// Assign d(loss)/d(tensor) to every requires_grad tensor reachable from `loss`.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if !loss.shape().is_scalar() {
        return Err(Error::NonScalar {
            op: "backward",
            shape: loss.shape().to_string(),
        });
    }
    if !loss.requires_grad() {
        return Err(Error::NoGradPath);
    }
    let order = topo_order(loss);
    let mut store = GradStore::new();
    store.accumulate(loss, vec![T::one()]);

    for node in &order {
        let grad = match store.take(node) {
            Some(g) => g,
            None => continue,
        };
        propagate(node, &grad, &mut store)?;
        node.accumulate_grad(grad);
    }
    Ok(())
}

fn needs<T: Scalar>(t: &Tensor<T>) -> bool {
    t.requires_grad()
}

fn propagate<T: Scalar>(node: &Tensor<T>, grad: &[T], store: &mut GradStore<T>) -> Result<()> {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(a) {
                store.accumulate(a, grad.to_vec());
            }
            if needs(b) {
                store.accumulate(b, grad.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                store.accumulate(a, grad.to_vec());
            }
            if needs(b) {
                store.accumulate(b, grad.iter().map(|g| -*g).collect());
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                let bd = b.data();
                store.accumulate(a, grad.iter().zip(bd.iter()).map(|(g, v)| *g * *v).collect());
            }
            if needs(b) {
                let ad = a.data();
                store.accumulate(b, grad.iter().zip(ad.iter()).map(|(g, v)| *g * *v).collect());
            }
        }
        Op::MulBcast(x, s) => {
            let xs = x.shape();
            let ss = s.shape();
            let hw = xs.h * xs.w;
            if needs(x) {
                let sd = s.data();
                let mut dx = vec![T::zero(); xs.numel()];
                for n in 0..xs.n {
                    let sn = if ss.n == 1 { 0 } else { n };
                    for c in 0..xs.c {
                        let sv = sd[sn * ss.c + c];
                        let base = (n * xs.c + c) * hw;
                        for i in 0..hw {
                            dx[base + i] = grad[base + i] * sv;
                        }
                    }
                }
                store.accumulate(x, dx);
            }
            if needs(s) {
                let xd = x.data();
                let mut ds = vec![T::zero(); ss.numel()];
                for n in 0..xs.n {
                    let sn = if ss.n == 1 { 0 } else { n };
                    for c in 0..xs.c {
                        let base = (n * xs.c + c) * hw;
                        let mut acc = T::zero();
                        for i in 0..hw {
                            acc += grad[base + i] * xd[base + i];
                        }
                        ds[sn * ss.c + c] += acc;
                    }
                }
                store.accumulate(s, ds);
            }
        }
        Op::Affine { x, a } => {
            if needs(x) {
                store.accumulate(x, grad.iter().map(|g| *g * *a).collect());
            }
        }
        Op::Ln(x) => {
            if needs(x) {
                let xd = x.data();
                store.accumulate(x, grad.iter().zip(xd.iter()).map(|(g, v)| *g / *v).collect());
            }
        }
        Op::Gelu(x) => {
            if needs(x) {
                let xd = x.data();
                let dx = grad
                    .iter()
                    .zip(xd.iter())
                    .map(|(g, v)| *g * (v.gauss_cdf() + *v * v.gauss_pdf()))
                    .collect();
                store.accumulate(x, dx);
            }
        }
        Op::SumAll(x) => {
            if needs(x) {
                store.accumulate(x, vec![grad[0]; x.numel()]);
            }
        }
        Op::MeanPerImage(x) => {
            if needs(x) {
                let s = x.shape();
                let per = s.c * s.h * s.w;
                let inv = T::from_f64(1.0 / per as f64);
                let mut dx = vec![T::zero(); x.numel()];
                for n in 0..s.n {
                    let gv = grad[n] * inv;
                    for v in &mut dx[n * per..(n + 1) * per] {
                        *v = gv;
                    }
                }
                store.accumulate(x, dx);
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
            groups,
        } => {
            let ws = weight.shape();
            let geo = ConvGeometry::new(
                x.shape(),
                ws.c * groups,
                ws.n,
                ws.h,
                *stride,
                *padding,
                *groups,
            )
            .expect("geometry validated at forward");
            let need_dx = needs(x);
            let need_dw = needs(weight);
            let need_db = bias.as_ref().map(needs).unwrap_or(false);
            let grads = conv::backward(
                grad,
                &x.data(),
                &weight.data(),
                &geo,
                need_dx,
                need_dw,
                need_db,
            );
            if let Some(dx) = grads.dx {
                store.accumulate(x, dx);
            }
            if let Some(dw) = grads.dw {
                store.accumulate(weight, dw);
            }
            if let (Some(db), Some(b)) = (grads.db, bias.as_ref()) {
                store.accumulate(b, db);
            }
        }
        Op::ChannelLayerNorm { x, gamma, beta } => {
            let s = x.shape();
            let hw = s.h * s.w;
            let xd = x.data();
            let gd = gamma.data();
            let eps = T::from_f64(LAYER_NORM_EPS);
            let inv_c = T::from_f64(1.0 / s.c as f64);
            let need_dx = needs(x);
            let need_dg = needs(gamma);
            let need_db = needs(beta);
            let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
            let mut dg = need_dg.then(|| vec![T::zero(); s.c]);
            let mut db = need_db.then(|| vec![T::zero(); s.c]);
            for n in 0..s.n {
                for px in 0..hw {
                    let mut mean = T::zero();
                    for c in 0..s.c {
                        mean += xd[(n * s.c + c) * hw + px];
                    }
                    mean *= inv_c;
                    let mut var = T::zero();
                    for c in 0..s.c {
                        let d = xd[(n * s.c + c) * hw + px] - mean;
                        var += d * d;
                    }
                    var *= inv_c;
                    let inv_std = (var + eps).sqrt().recip();
                    // dxhat_c = g_c * gamma_c; dx follows the standard layer-norm rule.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..s.c {
                        let i = (n * s.c + c) * hw + px;
                        let xhat = (xd[i] - mean) * inv_std;
                        let dxhat = grad[i] * gd[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if let Some(dg) = dg.as_mut() {
                            dg[c] += grad[i] * xhat;
                        }
                        if let Some(db) = db.as_mut() {
                            db[c] += grad[i];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for c in 0..s.c {
                            let i = (n * s.c + c) * hw + px;
                            let xhat = (xd[i] - mean) * inv_std;
                            let dxhat = grad[i] * gd[c];
                            dx[i] = inv_std
                                * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                        }
                    }
                }
            }
            drop(xd);
            drop(gd);
            if let Some(dx) = dx {
                store.accumulate(x, dx);
            }
            if let Some(dg) = dg {
                store.accumulate(gamma, dg);
            }
            if let Some(db) = db {
                store.accumulate(beta, db);
            }
        }
        Op::SimpleGate(x) => {
            if needs(x) {
                let s = x.shape();
                let half = s.c / 2;
                let hw = s.h * s.w;
                let xd = x.data();
                let mut dx = vec![T::zero(); x.numel()];
                for n in 0..s.n {
                    for c in 0..half {
                        let a = (n * s.c + c) * hw;
                        let b = (n * s.c + half + c) * hw;
                        let o = (n * half + c) * hw;
                        for i in 0..hw {
                            dx[a + i] = grad[o + i] * xd[b + i];
                            dx[b + i] = grad[o + i] * xd[a + i];
                        }
                    }
                }
                drop(xd);
                store.accumulate(x, dx);
            }
        }
        Op::GlobalAvgPool(x) => {
            if needs(x) {
                let s = x.shape();
                let hw = s.h * s.w;
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = vec![T::zero(); x.numel()];
                for i in 0..s.n * s.c {
                    let gv = grad[i] * inv;
                    for v in &mut dx[i * hw..(i + 1) * hw] {
                        *v = gv;
                    }
                }
                store.accumulate(x, dx);
            }
        }
        Op::NearestResize(x) => {
            if needs(x) {
                let s = x.shape();
                let os = node.shape();
                let mut dx = vec![T::zero(); x.numel()];
                let mut gi = 0;
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * s.h * s.w;
                        for i in 0..os.h {
                            let si = i * s.h / os.h;
                            let row = base + si * s.w;
                            for j in 0..os.w {
                                let sj = j * s.w / os.w;
                                dx[row + sj] += grad[gi];
                                gi += 1;
                            }
                        }
                    }
                }
                store.accumulate(x, dx);
            }
        }
        Op::PixelShuffle { x, r } => {
            if needs(x) {
                let s = x.shape();
                let os = node.shape();
                let r = *r;
                let mut dx = vec![T::zero(); x.numel()];
                for n in 0..s.n {
                    for c in 0..os.c {
                        for di in 0..r {
                            for dj in 0..r {
                                let ic = c * r * r + di * r + dj;
                                let ibase = (n * s.c + ic) * s.h * s.w;
                                for i in 0..s.h {
                                    for j in 0..s.w {
                                        let oi = os.index(n, c, r * i + di, r * j + dj);
                                        dx[ibase + i * s.w + j] = grad[oi];
                                    }
                                }
                            }
                        }
                    }
                }
                store.accumulate(x, dx);
            }
        }
        Op::PixelUnshuffle { x, r } => {
            if needs(x) {
                let s = x.shape();
                let os = node.shape();
                let r = *r;
                let mut dx = vec![T::zero(); x.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for di in 0..r {
                            for dj in 0..r {
                                let ocx = c * r * r + di * r + dj;
                                let obase = (n * os.c + ocx) * os.h * os.w;
                                for i in 0..os.h {
                                    for j in 0..os.w {
                                        let ii = s.index(n, c, r * i + di, r * j + dj);
                                        dx[ii] = grad[obase + i * os.w + j];
                                    }
                                }
                            }
                        }
                    }
                }
                store.accumulate(x, dx);
            }
        }
        Op::ConcatChannels(xs) => {
            let os = node.shape();
            let hw = os.h * os.w;
            let mut co = 0;
            for x in xs {
                let s = x.shape();
                if needs(x) {
                    let mut dx = vec![T::zero(); x.numel()];
                    for n in 0..s.n {
                        let src = &grad[(n * os.c + co) * hw..(n * os.c + co + s.c) * hw];
                        dx[n * s.c * hw..(n + 1) * s.c * hw].copy_from_slice(src);
                    }
                    store.accumulate(x, dx);
                }
                co += s.c;
            }
        }
        Op::MergePairs { x, pairs } => {
            if needs(x) {
                let s = x.shape();
                let hw = s.h * s.w;
                let mut dx = vec![T::zero(); x.numel()];
                for n in 0..s.n {
                    for (o, &(a, b)) in pairs.iter().enumerate() {
                        let po = (n * pairs.len() + o) * hw;
                        let pa = (n * s.c + a) * hw;
                        let pb = (n * s.c + b) * hw;
                        for i in 0..hw {
                            dx[pa + i] += grad[po + i];
                            dx[pb + i] += grad[po + i];
                        }
                    }
                }
                store.accumulate(x, dx);
            }
        }
        Op::SliceN { x, start } => {
            if needs(x) {
                let s = x.shape();
                let per = s.c * s.h * s.w;
                let mut dx = vec![T::zero(); x.numel()];
                dx[start * per..start * per + grad.len()].copy_from_slice(grad);
                store.accumulate(x, dx);
            }
        }
        Op::SliceC { x, start } => {
            if needs(x) {
                let s = x.shape();
                let os = node.shape();
                let hw = s.h * s.w;
                let mut dx = vec![T::zero(); x.numel()];
                for n in 0..s.n {
                    let src = &grad[n * os.c * hw..(n + 1) * os.c * hw];
                    dx[(n * s.c + start) * hw..(n * s.c + start + os.c) * hw]
                        .copy_from_slice(src);
                }
                store.accumulate(x, dx);
            }
        }
    }
    Ok(())
}
