//! Differentiable ops: convolutions, GELU, per-pixel channel norm, SimpleGate,
//! Simple Channel Attention, nearest-neighbor resize, pixel shuffle/unshuffle,
//! channel concat, pooling, reductions and the elementwise vocabulary.

use rand::Rng;

use crate::autograd::Op;
use crate::conv::{self, ConvGeometry};
pub use crate::conv::conv_out_extent;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// A convolution layer: weights plus the geometry that interprets them.
#[derive(Clone)]
pub struct Conv2dParams<T: Scalar> {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// (out_channels, in_channels / groups, k, k)
    pub weight: Tensor<T>,
    /// (1, out_channels, 1, 1)
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2dParams<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::arg("conv2d", "zero-sized channel, kernel or stride"));
        }
        match kind {
            ConvKind::Depthwise => {
                if in_channels != out_channels {
                    return Err(Error::arg(
                        "conv2d",
                        format!("depthwise needs in == out channels, got {in_channels} -> {out_channels}"),
                    ));
                }
            }
            ConvKind::Pointwise => {
                if kernel != 1 || stride != 1 || padding != 0 {
                    return Err(Error::arg(
                        "conv2d",
                        "pointwise requires k = s = 1 and p = 0",
                    ));
                }
            }
            ConvKind::Standard => {}
        }
        let groups = match kind {
            ConvKind::Depthwise => in_channels,
            _ => 1,
        };
        let expect = Shape::new(out_channels, in_channels / groups, kernel, kernel);
        if weight.shape() != expect {
            return Err(Error::shape(
                "conv2d",
                format!("weight shape {} != expected {}", weight.shape(), expect),
            ));
        }
        if let Some(b) = &bias {
            let be = Shape::new(1, out_channels, 1, 1);
            if b.shape() != be {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {} != expected {}", b.shape(), be),
                ));
            }
        }
        Ok(Conv2dParams {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        })
    }

    /// Fan-in uniform init: weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), bias 0.
    pub fn init<R: Rng>(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let groups = match kind {
            ConvKind::Depthwise => in_channels,
            _ => 1,
        };
        let fan_in = (in_channels / groups) * kernel * kernel;
        let shape = Shape::new(out_channels, in_channels / groups, kernel, kernel);
        let weight = uniform_param(shape, fan_in, rng);
        let bias = Tensor::param(
            Shape::new(1, out_channels, 1, 1),
            vec![T::zero(); out_channels],
        )
        .expect("bias init");
        Conv2dParams::new(
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            Some(bias),
        )
        .expect("validated conv init")
    }

    pub fn groups(&self) -> usize {
        match self.kind {
            ConvKind::Depthwise => self.in_channels,
            _ => 1,
        }
    }
}

pub(crate) fn uniform_param<T: Scalar, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, data).expect("uniform init")
}

/// Simple Channel Attention parameters: pooled pointwise conv C -> C.
#[derive(Clone)]
pub struct ScaParams<T: Scalar> {
    /// (C_out, C_in, 1, 1)
    pub weight: Tensor<T>,
    /// (1, C_out, 1, 1)
    pub bias: Tensor<T>,
}

impl<T: Scalar> ScaParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::shape("sca", format!("weight must be 1x1, got {ws}")));
        }
        if bias.shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape("sca", "bias shape mismatch"));
        }
        Ok(ScaParams { weight, bias })
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let weight = uniform_param(Shape::new(channels, channels, 1, 1), channels, rng);
        let bias = Tensor::param(Shape::new(1, channels, 1, 1), vec![T::zero(); channels])
            .expect("sca bias");
        ScaParams { weight, bias }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape().n
    }
}

/// Per-pixel channel normalization scale/shift, each shaped (1, C, 1, 1).
#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn init(channels: usize) -> Self {
        let gamma = Tensor::param(Shape::new(1, channels, 1, 1), vec![T::one(); channels])
            .expect("gamma init");
        let beta = Tensor::param(Shape::new(1, channels, 1, 1), vec![T::zero(); channels])
            .expect("beta init");
        LayerNormParams { gamma, beta }
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
    Tensor::from_op(a.shape(), data, Op::Add(a.clone(), b.clone()), "add")
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x - *y).collect();
    Tensor::from_op(a.shape(), data, Op::Sub(a.clone(), b.clone()), "sub")
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
    Tensor::from_op(a.shape(), data, Op::Mul(a.clone(), b.clone()), "mul")
}

/// Broadcast multiply by a per-channel tensor shaped (1, C, 1, 1) or (N, C, 1, 1).
pub fn mul_bcast<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ss = scale.shape();
    if ss.c != xs.c || ss.h != 1 || ss.w != 1 || (ss.n != 1 && ss.n != xs.n) {
        return Err(Error::shape(
            "mul_bcast",
            format!("scale {} incompatible with input {}", ss, xs),
        ));
    }
    let hw = xs.h * xs.w;
    let xd = x.data();
    let sd = scale.data();
    let mut out = vec![T::zero(); xs.numel()];
    for n in 0..xs.n {
        let sn = if ss.n == 1 { 0 } else { n };
        for c in 0..xs.c {
            let s = sd[sn * ss.c + c];
            let base = (n * xs.c + c) * hw;
            for i in 0..hw {
                out[base + i] = xd[base + i] * s;
            }
        }
    }
    drop(xd);
    drop(sd);
    Tensor::from_op(xs, out, Op::MulBcast(x.clone(), scale.clone()), "mul_bcast")
}

/// y = a * x + b with scalar constants.
pub fn affine<T: Scalar>(x: &Tensor<T>, a: T, b: T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|v| a * *v + b).collect();
    Tensor::from_op(x.shape(), data, Op::Affine { x: x.clone(), a }, "affine")
}

pub fn ln<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|v| v.ln()).collect();
    Tensor::from_op(x.shape(), data, Op::Ln(x.clone()), "ln")
}

/// Exact GELU x * Phi(x) using the Gaussian CDF in erf form.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|v| *v * v.gauss_cdf()).collect();
    Tensor::from_op(x.shape(), data, Op::Gelu(x.clone()), "gelu")
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc = T::zero();
    for v in x.data().iter() {
        acc += *v;
    }
    Tensor::from_op(Shape::scalar(), vec![acc], Op::SumAll(x.clone()), "sum_all")
}

/// Mean over (C, H, W) per image: (N, C, H, W) -> (N, 1, 1, 1).
pub fn mean_per_image<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let per = s.c * s.h * s.w;
    if per == 0 {
        return Err(Error::shape("mean_per_image", "empty image extent"));
    }
    let xd = x.data();
    let inv = T::from_f64(1.0 / per as f64);
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let mut acc = T::zero();
        for v in &xd[n * per..(n + 1) * per] {
            acc += *v;
        }
        out.push(acc * inv);
    }
    drop(xd);
    Tensor::from_op(
        Shape::new(s.n, 1, 1, 1),
        out,
        Op::MeanPerImage(x.clone()),
        "mean_per_image",
    )
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(
        x.shape(),
        p.in_channels,
        p.out_channels,
        p.kernel,
        p.stride,
        p.padding,
        p.groups(),
    )?;
    let out = conv::forward(
        &x.data(),
        &p.weight.data(),
        p.bias.as_ref().map(|b| b.data()).as_deref().map(|v| &v[..]),
        &geo,
    );
    Tensor::from_op(
        geo.out_shape(),
        out,
        Op::Conv2d {
            x: x.clone(),
            weight: p.weight.clone(),
            bias: p.bias.clone(),
            stride: p.stride,
            padding: p.padding,
            groups: p.groups(),
        },
        "conv2d",
    )
}

/// Normalize the channel vector at each (n, h, w) to zero mean / unit variance,
/// then scale and shift per channel.
pub fn channel_layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::shape("channel_layer_norm", "zero channels"));
    }
    if p.gamma.shape() != Shape::new(1, s.c, 1, 1) || p.beta.shape() != Shape::new(1, s.c, 1, 1) {
        return Err(Error::shape("channel_layer_norm", "gamma/beta channel mismatch"));
    }
    let hw = s.h * s.w;
    let xd = x.data();
    let gd = p.gamma.data();
    let bd = p.beta.data();
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_c = T::from_f64(1.0 / s.c as f64);
    let mut out = vec![T::zero(); s.numel()];
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
            for c in 0..s.c {
                let i = (n * s.c + c) * hw + px;
                out[i] = (xd[i] - mean) * inv_std * gd[c] + bd[c];
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    Tensor::from_op(
        s,
        out,
        Op::ChannelLayerNorm {
            x: x.clone(),
            gamma: p.gamma.clone(),
            beta: p.beta.clone(),
        },
        "channel_layer_norm",
    )
}

/// Split channels into halves and multiply them elementwise: C -> C/2.
pub fn simple_gate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.c.is_multiple_of(2) {
        return Err(Error::shape(
            "simple_gate",
            format!("channel count {} is odd", s.c),
        ));
    }
    let half = s.c / 2;
    let hw = s.h * s.w;
    let xd = x.data();
    let mut out = vec![T::zero(); s.n * half * hw];
    for n in 0..s.n {
        for c in 0..half {
            let a = (n * s.c + c) * hw;
            let b = (n * s.c + half + c) * hw;
            let o = (n * half + c) * hw;
            for i in 0..hw {
                out[o + i] = xd[a + i] * xd[b + i];
            }
        }
    }
    drop(xd);
    Tensor::from_op(
        Shape::new(s.n, half, s.h, s.w),
        out,
        Op::SimpleGate(x.clone()),
        "simple_gate",
    )
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h * s.w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let hw = s.h * s.w;
    let inv = T::from_f64(1.0 / hw as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); s.n * s.c];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for v in &xd[i * hw..(i + 1) * hw] {
            acc += *v;
        }
        *o = acc * inv;
    }
    drop(xd);
    Tensor::from_op(
        Shape::new(s.n, s.c, 1, 1),
        out,
        Op::GlobalAvgPool(x.clone()),
        "global_avg_pool",
    )
}

/// Re-weight each channel by a pointwise projection of its global average.
pub fn sca<T: Scalar>(x: &Tensor<T>, p: &ScaParams<T>) -> Result<Tensor<T>> {
    let pooled = global_avg_pool(x)?;
    let pw = Conv2dParams::new(
        ConvKind::Pointwise,
        p.weight.shape().c,
        p.weight.shape().n,
        1,
        1,
        0,
        p.weight.clone(),
        Some(p.bias.clone()),
    )?;
    let attn = conv2d(&pooled, &pw)?;
    mul_bcast(x, &attn)
}

/// dst(i, j) = src(floor(i * h_src / h_dst), floor(j * w_src / w_dst)).
pub fn nearest_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("nearest_resize", "empty source"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("nearest_resize", "output extents must be >= 1"));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); s.n * s.c * out_h * out_w];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for i in 0..out_h {
                let si = i * s.h / out_h;
                let row = base + si * s.w;
                for j in 0..out_w {
                    let sj = j * s.w / out_w;
                    out[o] = xd[row + sj];
                    o += 1;
                }
            }
        }
    }
    drop(xd);
    Tensor::from_op(
        Shape::new(s.n, s.c, out_h, out_w),
        out,
        Op::NearestResize(x.clone()),
        "nearest_resize",
    )
}

/// (N, C, H, W) -> (N, C/r^2, rH, rW) with
/// output(c, r*i+di, r*j+dj) = input(c*r^2 + di*r + dj, i, j).
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels {} not divisible by r^2 = {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    let (oh, ow) = (s.h * r, s.w * r);
    let xd = x.data();
    let out_shape = Shape::new(s.n, oc, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..s.n {
        for c in 0..oc {
            for di in 0..r {
                for dj in 0..r {
                    let ic = c * r * r + di * r + dj;
                    let ibase = (n * s.c + ic) * s.h * s.w;
                    for i in 0..s.h {
                        for j in 0..s.w {
                            let oi = out_shape.index(n, c, r * i + di, r * j + dj);
                            out[oi] = xd[ibase + i * s.w + j];
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    Tensor::from_op(out_shape, out, Op::PixelShuffle { x: x.clone(), r }, "pixel_shuffle")
}

/// Inverse of `pixel_shuffle`: (N, C, H, W) -> (N, C*r^2, H/r, W/r).
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial extents {}x{} not divisible by r = {}", s.h, s.w, r),
        ));
    }
    let (oh, ow) = (s.h / r, s.w / r);
    let oc = s.c * r * r;
    let xd = x.data();
    let out_shape = Shape::new(s.n, oc, oh, ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for di in 0..r {
                for dj in 0..r {
                    let ocx = c * r * r + di * r + dj;
                    let obase = (n * oc + ocx) * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let ii = s.index(n, c, r * i + di, r * j + dj);
                            out[obase + i * ow + j] = xd[ii];
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    Tensor::from_op(
        out_shape,
        out,
        Op::PixelUnshuffle { x: x.clone(), r },
        "pixel_unshuffle",
    )
}

pub fn concat_channels<T: Scalar>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::arg("concat_channels", "empty input list"));
    }
    let first = xs[0].shape();
    let mut total_c = 0;
    for x in xs {
        let s = x.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape(
                "concat_channels",
                format!("{} vs {}", s, first),
            ));
        }
        total_c += s.c;
    }
    let out_shape = Shape::new(first.n, total_c, first.h, first.w);
    let hw = first.h * first.w;
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..first.n {
        let mut co = 0;
        for x in xs {
            let s = x.shape();
            let xd = x.data();
            let src = &xd[n * s.c * hw..(n + 1) * s.c * hw];
            let dst = &mut out[(n * total_c + co) * hw..(n * total_c + co + s.c) * hw];
            dst.copy_from_slice(src);
            co += s.c;
        }
    }
    Tensor::from_op(
        out_shape,
        out,
        Op::ConcatChannels(xs.to_vec()),
        "concat_channels",
    )
}

/// out[i] = x[pairs[i].0] + x[pairs[i].1]; the pair selection is data-independent
/// as far as gradients are concerned.
pub fn merge_pairs<T: Scalar>(x: &Tensor<T>, pairs: &[(usize, usize)]) -> Result<Tensor<T>> {
    let s = x.shape();
    let mut seen = vec![false; s.c];
    for &(a, b) in pairs {
        if a >= s.c || b >= s.c {
            return Err(Error::arg("merge_pairs", "channel index out of range"));
        }
        if seen[a] || seen[b] || a == b {
            return Err(Error::arg("merge_pairs", "channel reused across pairs"));
        }
        seen[a] = true;
        seen[b] = true;
    }
    let hw = s.h * s.w;
    let out_shape = Shape::new(s.n, pairs.len(), s.h, s.w);
    let xd = x.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..s.n {
        for (o, &(a, b)) in pairs.iter().enumerate() {
            let pa = (n * s.c + a) * hw;
            let pb = (n * s.c + b) * hw;
            let po = (n * pairs.len() + o) * hw;
            for i in 0..hw {
                out[po + i] = xd[pa + i] + xd[pb + i];
            }
        }
    }
    drop(xd);
    Tensor::from_op(
        out_shape,
        out,
        Op::MergePairs {
            x: x.clone(),
            pairs: pairs.to_vec(),
        },
        "merge_pairs",
    )
}

/// Take `len` consecutive entries along the first (N / out-channel) extent.
pub fn slice_n<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.n || len == 0 {
        return Err(Error::arg("slice_n", "range out of bounds"));
    }
    let per = s.c * s.h * s.w;
    let out = x.data()[start * per..(start + len) * per].to_vec();
    Tensor::from_op(
        Shape::new(len, s.c, s.h, s.w),
        out,
        Op::SliceN { x: x.clone(), start },
        "slice_n",
    )
}

/// Take `len` consecutive channels.
pub fn slice_c<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c || len == 0 {
        return Err(Error::arg("slice_c", "range out of bounds"));
    }
    let hw = s.h * s.w;
    let xd = x.data();
    let out_shape = Shape::new(s.n, len, s.h, s.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..s.n {
        let src = &xd[(n * s.c + start) * hw..(n * s.c + start + len) * hw];
        out[n * len * hw..(n + 1) * len * hw].copy_from_slice(src);
    }
    drop(xd);
    Tensor::from_op(
        out_shape,
        out,
        Op::SliceC { x: x.clone(), start },
        "slice_c",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct six-nested-loop cross-correlation, independent of the library path.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        k: usize,
        stride: usize,
        padding: usize,
        in_c: usize,
        out_c: usize,
    ) -> Vec<f64> {
        let s = x.shape();
        let oh = (s.h + 2 * padding - k) / stride + 1;
        let ow = (s.w + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; s.n * out_c * oh * ow];
        for n in 0..s.n {
            for oc in 0..out_c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..in_c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (i * stride + kh) as isize - padding as isize;
                                    let iw = (j * stride + kw) as isize - padding as isize;
                                    if ih < 0 || iw < 0 || ih >= s.h as isize || iw >= s.w as isize {
                                        continue;
                                    }
                                    acc += x.at(n, ic, ih as usize, iw as usize)
                                        * w.at(oc, ic, kh, kw);
                                }
                            }
                        }
                        out[((n * out_c + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_all_ones_sums_the_window() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64; 4]).unwrap();
        let w = Tensor::param(Shape::new(1, 1, 2, 2), vec![1.0; 4]).unwrap();
        let p = Conv2dParams::new(ConvKind::Depthwise, 1, 1, 2, 2, 0, w, None).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn pointwise_identity_weight_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::param(Shape::new(3, 3, 1, 1), eye).unwrap();
        let p = Conv2dParams::new(ConvKind::Pointwise, 3, 3, 1, 1, 0, w, None).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(&*y.data(), &*x.data());
    }

    #[test]
    fn standard_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, Shape::new(1, 3, 5, 5));
        let w = rand_tensor(&mut rng, Shape::new(4, 3, 3, 3));
        let bias_vals: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias = Tensor::param(Shape::new(1, 4, 1, 1), bias_vals.clone()).unwrap();
        let w = Tensor::param(w.shape(), w.data().clone()).unwrap();
        let p = Conv2dParams::new(ConvKind::Standard, 3, 4, 3, 1, 1, w.clone(), Some(bias)).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let expected = conv_reference(&x, &w, &bias_vals, 3, 1, 1, 3, 4);
        assert_eq!(y.numel(), expected.len());
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_undersized_input_and_bad_shapes() {
        let w = Tensor::param(Shape::new(2, 1, 3, 3), vec![0.1; 18]).unwrap();
        let p = Conv2dParams::new(ConvKind::Standard, 1, 2, 3, 1, 0, w, None).unwrap();
        let tiny = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 4]).unwrap();
        assert!(conv2d(&tiny, &p).is_err());
        let wrong_c = Tensor::from_vec(Shape::new(1, 2, 4, 4), vec![0.0; 32]).unwrap();
        assert!(conv2d(&wrong_c, &p).is_err());
    }

    #[test]
    fn gelu_reference_values() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0f64, 10.0, 1.0]).unwrap();
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1] > 9.999 && y.data()[1] <= 10.0);
        // 1 * Phi(1) with Phi the Gaussian CDF.
        assert!((y.data()[2] - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_input_zeroes_out() {
        let x = Tensor::from_vec(Shape::new(1, 4, 2, 2), vec![3.25f64; 16]).unwrap();
        let p = LayerNormParams::init(4);
        let y = channel_layer_norm(&x, &p).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_beta_only() {
        let x = Tensor::from_vec(Shape::new(1, 2, 2, 2), (0..8).map(|i| i as f64).collect()).unwrap();
        let gamma = Tensor::param(Shape::new(1, 2, 1, 1), vec![0.0; 2]).unwrap();
        let beta = Tensor::param(Shape::new(1, 2, 1, 1), vec![5.0; 2]).unwrap();
        let y = channel_layer_norm(&x, &LayerNormParams { gamma, beta }).unwrap();
        assert!(y.data().iter().all(|v| (*v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_standardizes_each_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, Shape::new(1, 4, 2, 2));
        let p = LayerNormParams::init(4);
        let y = channel_layer_norm(&x, &p).unwrap();
        let s = y.shape();
        for px in 0..4 {
            let vals: Vec<f64> = (0..4).map(|c| y.at(0, c, px / 2, px % 2)).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-6, "pixel {px} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "pixel {px} var {var}");
        }
        let _ = s;
    }

    #[test]
    fn simple_gate_is_elementwise_product_of_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, Shape::new(2, 6, 3, 3));
        let y = simple_gate(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 3, 3));
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let expect = x.at(n, c, i, j) * x.at(n, c + 3, i, j);
                        assert_eq!(y.at(n, c, i, j), expect);
                    }
                }
            }
        }
        let odd = rand_tensor(&mut rng, Shape::new(1, 3, 2, 2));
        assert!(simple_gate(&odd).is_err());
    }

    #[test]
    fn sca_single_channel_closed_form() {
        // Constant input c: attention = w * c + b, output = c * (w * c + b).
        let c = 0.6f64;
        let (wv, bv) = (1.3, -0.2);
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![c; 9]).unwrap();
        let weight = Tensor::param(Shape::new(1, 1, 1, 1), vec![wv]).unwrap();
        let bias = Tensor::param(Shape::new(1, 1, 1, 1), vec![bv]).unwrap();
        let y = sca(&x, &ScaParams { weight, bias }).unwrap();
        let expect = c * (wv * c + bv);
        assert!(y.data().iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn sca_zero_weight_unit_bias_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, Shape::new(1, 4, 3, 3));
        let weight = Tensor::param(Shape::new(4, 4, 1, 1), vec![0.0; 16]).unwrap();
        let bias = Tensor::param(Shape::new(1, 4, 1, 1), vec![1.0; 4]).unwrap();
        let y = sca(&x, &ScaParams { weight, bias }).unwrap();
        assert_eq!(&*y.data(), &*x.data());
    }

    #[test]
    fn sca_matches_pool_then_scale_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4));
        let p = ScaParams::<f64>::init(3, &mut rng);
        let y = sca(&x, &p).unwrap();
        for n in 0..2 {
            let pooled: Vec<f64> = (0..3)
                .map(|c| {
                    let mut acc = 0.0;
                    for i in 0..4 {
                        for j in 0..4 {
                            acc += x.at(n, c, i, j);
                        }
                    }
                    acc / 16.0
                })
                .collect();
            for oc in 0..3 {
                let mut attn = p.bias.data()[oc];
                for ic in 0..3 {
                    attn += p.weight.at(oc, ic, 0, 0) * pooled[ic];
                }
                for i in 0..4 {
                    for j in 0..4 {
                        let expect = x.at(n, oc, i, j) * attn;
                        assert!((y.at(n, oc, i, j) - expect).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_resize_replicates_blocks() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = nearest_resize(&x, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.at(0, 0, i, j), x.at(0, 0, i / 2, j / 2));
            }
        }
    }

    #[test]
    fn nearest_resize_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 5, 7));
        let y = nearest_resize(&x, 5, 7).unwrap();
        assert_eq!(&*y.data(), &*x.data());
    }

    #[test]
    fn nearest_resize_matches_index_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, Shape::new(1, 1, 3, 3));
        let y = nearest_resize(&x, 8, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(y.at(0, 0, i, j), x.at(0, 0, i * 3 / 8, j * 3 / 8));
            }
        }
    }

    #[test]
    fn pixel_shuffle_index_law() {
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(&*y.data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, Shape::new(1, 8, 3, 3));
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 6, 6));
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    for di in 0..2 {
                        for dj in 0..2 {
                            let expect = x.at(0, c * 4 + di * 2 + dj, i, j);
                            assert_eq!(y.at(0, c, 2 * i + di, 2 * j + dj), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_divisibility_errors() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2));
        assert!(pixel_shuffle(&x, 2).is_err());
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 3, 3));
        assert!(pixel_unshuffle(&x, 2).is_err());
    }

    #[test]
    fn concat_preserves_order_and_pool_averages() {
        let a = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 3, 1, 2), vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let cat = concat_channels(&[a, b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 1, 2));
        assert_eq!(&*cat.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);

        let c = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let pooled = global_avg_pool(&c).unwrap();
        assert_eq!(pooled.data()[0], 4.0);
        let constant = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![0.42f64; 9]).unwrap();
        let pooled_constant: f64 = global_avg_pool(&constant).unwrap().data()[0];
        assert!((pooled_constant - 0.42).abs() < 1e-12);
    }

    #[test]
    fn backward_examples_from_calculus() {
        // loss = sum(x^2) at x = [1, 2, 3] gives grad [2, 4, 6].
        let x = Tensor::param(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let loss = sum_all(&mul(&x, &x).unwrap()).unwrap();
        crate::autograd::backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);

        // loss = sum(x) gives all-ones.
        let y = Tensor::param(Shape::new(1, 1, 2, 2), vec![5.0, -1.0, 0.0, 9.0]).unwrap();
        let loss = sum_all(&y).unwrap();
        crate::autograd::backward(&loss).unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn gradient_accumulation_across_shared_use() {
        // Using a tensor twice yields the sum of both path gradients.
        let x = Tensor::param(Shape::new(1, 1, 1, 2), vec![1.5, -0.5]).unwrap();
        let a = affine(&x, 2.0, 0.0).unwrap();
        let b = affine(&x, 3.0, 0.0).unwrap();
        let loss = sum_all(&add(&a, &b).unwrap()).unwrap();
        crate::autograd::backward(&loss).unwrap();
        let shared = x.grad().unwrap();

        let x1 = Tensor::param(Shape::new(1, 1, 1, 2), vec![1.5, -0.5]).unwrap();
        let l1 = sum_all(&affine(&x1, 2.0, 0.0).unwrap()).unwrap();
        crate::autograd::backward(&l1).unwrap();
        let x2 = Tensor::param(Shape::new(1, 1, 1, 2), vec![1.5, -0.5]).unwrap();
        let l2 = sum_all(&affine(&x2, 3.0, 0.0).unwrap()).unwrap();
        crate::autograd::backward(&l2).unwrap();
        for i in 0..2 {
            assert_eq!(shared[i], x1.grad().unwrap()[i] + x2.grad().unwrap()[i]);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::param(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = mul(&x, &x).unwrap();
        assert!(crate::autograd::backward(&y).is_err());
    }

    #[test]
    fn forward_and_gradients_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let x = Tensor::param(
                Shape::new(1, 4, 5, 5),
                (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let p = Conv2dParams::<f64>::init(ConvKind::Standard, 4, 2, 3, 1, 1, &mut rng);
            let y = conv2d(&gelu(&x).unwrap(), &p).unwrap();
            let loss = sum_all(&mul(&y, &y).unwrap()).unwrap();
            crate::autograd::backward(&loss).unwrap();
            let y_bits: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            let g_bits: Vec<u64> = x.grad().unwrap().iter().map(|v| v.to_bits()).collect();
            (y_bits, g_bits)
        };
        assert_eq!(run(), run());
    }
}
