//! Raw cross-correlation kernels shared by the forward op and its backward pass.
//!
//! Pointwise (k=1, s=1, p=0, groups=1) and depthwise (groups = channels) cases
//! get dedicated loops; they dominate the runtime of the whole network.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Output extent per axis: floor((n_in + 2p - k) / s) + 1, error on empty output.
pub fn conv_out_extent(n_in: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n_in + 2 * padding;
    if padded < k {
        return Err(Error::shape(
            "conv2d",
            format!("input extent {n_in} with padding {padding} smaller than kernel {k}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        x: Shape,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if x.c != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weights expect {}", x.c, in_c),
            ));
        }
        if !in_c.is_multiple_of(groups) || !out_c.is_multiple_of(groups) {
            return Err(Error::shape(
                "conv2d",
                format!("channels ({in_c} -> {out_c}) not divisible by groups {groups}"),
            ));
        }
        let out_h = conv_out_extent(x.h, k, stride, padding)?;
        let out_w = conv_out_extent(x.w, k, stride, padding)?;
        Ok(ConvGeometry {
            n: x.n,
            in_c,
            out_c,
            in_h: x.h,
            in_w: x.w,
            out_h,
            out_w,
            k,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.out_c, self.out_h, self.out_w)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_c && self.in_c == self.out_c
    }
}

pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() {
        return forward_pointwise(x, w, bias, g);
    }
    if g.is_depthwise() {
        return forward_depthwise(x, w, bias, g);
    }
    forward_general(x, w, bias, g)
}

fn forward_pointwise<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let hw = g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.n * g.out_c * hw];
    for n in 0..g.n {
        let x_img = &x[n * g.in_c * hw..(n + 1) * g.in_c * hw];
        let out_img = &mut out[n * g.out_c * hw..(n + 1) * g.out_c * hw];
        for oc in 0..g.out_c {
            let plane = &mut out_img[oc * hw..(oc + 1) * hw];
            if let Some(b) = bias {
                plane.fill(b[oc]);
            }
            for ic in 0..g.in_c {
                let coeff = w[oc * g.in_c + ic];
                if coeff == T::zero() {
                    continue;
                }
                let src = &x_img[ic * hw..(ic + 1) * hw];
                for (o, s) in plane.iter_mut().zip(src) {
                    *o += coeff * *s;
                }
            }
        }
    }
    out
}

fn forward_depthwise<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let in_hw = g.in_h * g.in_w;
    let out_hw = g.out_h * g.out_w;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.out_c * out_hw];
    let pad = g.padding as isize;
    for n in 0..g.n {
        for c in 0..g.in_c {
            let src = &x[(n * g.in_c + c) * in_hw..(n * g.in_c + c + 1) * in_hw];
            let ker = &w[c * kk..(c + 1) * kk];
            let b = bias.map_or(T::zero(), |b| b[c]);
            let dst = &mut out[(n * g.out_c + c) * out_hw..(n * g.out_c + c + 1) * out_hw];
            for oh in 0..g.out_h {
                let ih0 = (oh * g.stride) as isize - pad;
                for ow in 0..g.out_w {
                    let iw0 = (ow * g.stride) as isize - pad;
                    let mut acc = b;
                    for kh in 0..g.k {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let row = ih as usize * g.in_w;
                        for kw in 0..g.k {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            acc += ker[kh * g.k + kw] * src[row + iw as usize];
                        }
                    }
                    dst[oh * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

fn forward_general<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let in_hw = g.in_h * g.in_w;
    let out_hw = g.out_h * g.out_w;
    let icg = g.in_c / g.groups;
    let ocg = g.out_c / g.groups;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.out_c * out_hw];
    let pad = g.padding as isize;
    for n in 0..g.n {
        for grp in 0..g.groups {
            for ocl in 0..ocg {
                let oc = grp * ocg + ocl;
                let b = bias.map_or(T::zero(), |b| b[oc]);
                let dst = &mut out[(n * g.out_c + oc) * out_hw..(n * g.out_c + oc + 1) * out_hw];
                for oh in 0..g.out_h {
                    let ih0 = (oh * g.stride) as isize - pad;
                    for ow in 0..g.out_w {
                        let iw0 = (ow * g.stride) as isize - pad;
                        let mut acc = b;
                        for icl in 0..icg {
                            let ic = grp * icg + icl;
                            let src = &x[(n * g.in_c + ic) * in_hw..(n * g.in_c + ic + 1) * in_hw];
                            let ker = &w[(oc * icg + icl) * kk..(oc * icg + icl + 1) * kk];
                            for kh in 0..g.k {
                                let ih = ih0 + kh as isize;
                                if ih < 0 || ih >= g.in_h as isize {
                                    continue;
                                }
                                let row = ih as usize * g.in_w;
                                for kw in 0..g.k {
                                    let iw = iw0 + kw as isize;
                                    if iw < 0 || iw >= g.in_w as isize {
                                        continue;
                                    }
                                    acc += ker[kh * g.k + kw] * src[row + iw as usize];
                                }
                            }
                        }
                        dst[oh * g.out_w + ow] = acc;
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let mut db = if need_db {
        Some(vec![T::zero(); g.out_c])
    } else {
        None
    };
    if let Some(db) = db.as_mut() {
        let out_hw = g.out_h * g.out_w;
        for n in 0..g.n {
            for oc in 0..g.out_c {
                let plane = &grad_out[(n * g.out_c + oc) * out_hw..(n * g.out_c + oc + 1) * out_hw];
                let mut acc = T::zero();
                for v in plane {
                    acc += *v;
                }
                db[oc] += acc;
            }
        }
    }

    if !need_dx && !need_dw {
        return ConvGrads { dx: None, dw: None, db };
    }

    if g.is_pointwise() {
        let (dx, dw) = backward_pointwise(grad_out, x, w, g, need_dx, need_dw);
        return ConvGrads { dx, dw, db };
    }
    let (dx, dw) = backward_general(grad_out, x, w, g, need_dx, need_dw);
    ConvGrads { dx, dw, db }
}

fn backward_pointwise<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.in_h * g.in_w;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.in_c * hw]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_c * g.in_c]);
    for n in 0..g.n {
        let x_img = &x[n * g.in_c * hw..(n + 1) * g.in_c * hw];
        let g_img = &grad_out[n * g.out_c * hw..(n + 1) * g.out_c * hw];
        for oc in 0..g.out_c {
            let gplane = &g_img[oc * hw..(oc + 1) * hw];
            for ic in 0..g.in_c {
                if let Some(dx) = dx.as_mut() {
                    let coeff = w[oc * g.in_c + ic];
                    if coeff != T::zero() {
                        let dplane = &mut dx[(n * g.in_c + ic) * hw..(n * g.in_c + ic + 1) * hw];
                        for (d, gv) in dplane.iter_mut().zip(gplane) {
                            *d += coeff * *gv;
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    let xplane = &x_img[ic * hw..(ic + 1) * hw];
                    let mut acc = T::zero();
                    for (gv, xv) in gplane.iter().zip(xplane) {
                        acc += *gv * *xv;
                    }
                    dw[oc * g.in_c + ic] += acc;
                }
            }
        }
    }
    (dx, dw)
}

fn backward_general<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_hw = g.in_h * g.in_w;
    let out_hw = g.out_h * g.out_w;
    let icg = g.in_c / g.groups;
    let ocg = g.out_c / g.groups;
    let kk = g.k * g.k;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.in_c * in_hw]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_c * icg * kk]);
    let pad = g.padding as isize;
    for n in 0..g.n {
        for grp in 0..g.groups {
            for ocl in 0..ocg {
                let oc = grp * ocg + ocl;
                let gplane = &grad_out[(n * g.out_c + oc) * out_hw..(n * g.out_c + oc + 1) * out_hw];
                for oh in 0..g.out_h {
                    let ih0 = (oh * g.stride) as isize - pad;
                    for ow in 0..g.out_w {
                        let go = gplane[oh * g.out_w + ow];
                        if go == T::zero() {
                            continue;
                        }
                        let iw0 = (ow * g.stride) as isize - pad;
                        for icl in 0..icg {
                            let ic = grp * icg + icl;
                            let x_base = (n * g.in_c + ic) * in_hw;
                            let w_base = (oc * icg + icl) * kk;
                            for kh in 0..g.k {
                                let ih = ih0 + kh as isize;
                                if ih < 0 || ih >= g.in_h as isize {
                                    continue;
                                }
                                let row = ih as usize * g.in_w;
                                for kw in 0..g.k {
                                    let iw = iw0 + kw as isize;
                                    if iw < 0 || iw >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = x_base + row + iw as usize;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xi] += go * w[w_base + kh * g.k + kw];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[w_base + kh * g.k + kw] += go * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
