//! Range Fuser plus the CascadedGaze and NAF blocks.
//!
//! Both blocks share the two-residual layout: x1 = x + beta * mixer(norm1(x)),
//! out = x1 + gamma * ffn(norm2(x1)). The CG mixer expands channels, merges
//! them back, runs the GCE cascade and fuses the contexts; the NAF mixer is
//! pointwise -> depthwise -> SimpleGate -> SCA -> pointwise. beta and gamma
//! start at zero so a fresh block is the identity map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gce::{self, GceConfig, GceContexts, GceParams, MergeStrategy, Similarity};
use crate::ops::{self, Conv2dParams, ConvKind, LayerNormParams, ScaParams};
use crate::tensor::{Scalar, Shape, Tensor};

/// Channel expansion mode ahead of the GCE cascade.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Expansion {
    /// Expand x2 then merge channel pairs back to C (default).
    X2Merge,
    /// Expand x2 and run the cascade at 2C.
    X2,
    /// Keep the width: pointwise C -> C, no merge.
    X1,
}

impl Expansion {
    pub fn expanded_channels(&self, width: usize) -> usize {
        match self {
            Expansion::X2Merge | Expansion::X2 => 2 * width,
            Expansion::X1 => width,
        }
    }

    pub fn gce_channels(&self, width: usize) -> usize {
        match self {
            Expansion::X2Merge | Expansion::X1 => width,
            Expansion::X2 => 2 * width,
        }
    }

    pub fn merges(&self) -> bool {
        matches!(self, Expansion::X2Merge)
    }
}

/// Nearest-resize, concat, SCA and channel reduction over the GCE contexts.
///
/// The SCA and reduction weights are allocated for the configured maximum
/// context count; when the size rule drops contexts at runtime the leading
/// m*C input channels of each weight are used so one parameter inventory
/// serves every input resolution.
#[derive(Clone)]
pub struct RangeFuserParams<T: Scalar> {
    pub sca: ScaParams<T>,
    pub reduce: Conv2dParams<T>,
    /// Channel width of a single context map.
    pub context_channels: usize,
}

impl<T: Scalar> RangeFuserParams<T> {
    pub fn init<R: Rng>(
        context_channels: usize,
        max_contexts: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let full = context_channels * max_contexts;
        RangeFuserParams {
            sca: ScaParams::init(full, rng),
            reduce: Conv2dParams::init(ConvKind::Pointwise, full, out_channels, 1, 1, 0, rng),
            context_channels,
        }
    }
}

/// Fuse the present contexts into a (target_h, target_w) map with the block's
/// base channel count.
pub fn range_fuser<T: Scalar>(
    ctxs: &GceContexts<T>,
    target_hw: (usize, usize),
    p: &RangeFuserParams<T>,
) -> Result<Tensor<T>> {
    let (th, tw) = target_hw;
    let present = ctxs.present();
    let mut resized = Vec::with_capacity(present.len());
    for ctx in &present {
        resized.push(ops::nearest_resize(ctx, th, tw)?);
    }
    let cat = ops::concat_channels(&resized)?;
    let needed = cat.shape().c;
    let allocated = p.reduce.in_channels;
    if needed > allocated {
        return Err(Error::shape(
            "range_fuser",
            format!("{needed} concatenated channels exceed the {allocated} the reduction expects"),
        ));
    }
    let attended = if needed == allocated {
        ops::sca(&cat, &p.sca)?
    } else {
        let w = ops::slice_c(&ops::slice_n(&p.sca.weight, 0, needed)?, 0, needed)?;
        let b = ops::slice_c(&p.sca.bias, 0, needed)?;
        ops::sca(&cat, &ScaParams { weight: w, bias: b })?
    };
    let reduce = if needed == allocated {
        p.reduce.clone()
    } else {
        Conv2dParams::new(
            ConvKind::Pointwise,
            needed,
            p.reduce.out_channels,
            1,
            1,
            0,
            ops::slice_c(&p.reduce.weight, 0, needed)?,
            p.reduce.bias.clone(),
        )?
    };
    ops::conv2d(&attended, &reduce)
}

#[derive(Clone)]
pub struct CgBlockParams<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub expand: Conv2dParams<T>,
    pub expansion: Expansion,
    /// Per-channel depthwise kernels scored by the kernel-based merge
    /// similarities. Kept out of the optimizer: the pair selection is not
    /// differentiable, so gradients never reach it.
    pub merge_kernels: Option<Tensor<T>>,
    pub gce_cfg: GceConfig,
    pub gce: GceParams<T>,
    pub fuser: RangeFuserParams<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn1: Conv2dParams<T>,
    pub ffn2: Conv2dParams<T>,
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
}

fn zero_scale<T: Scalar>(channels: usize) -> Tensor<T> {
    Tensor::param(Shape::new(1, channels, 1, 1), vec![T::zero(); channels]).expect("scale init")
}

impl<T: Scalar> CgBlockParams<T> {
    /// `template` supplies the kernel schedule, layer style and merge
    /// strategy; the cascade channel count follows from the expansion mode.
    pub fn init<R: Rng>(width: usize, template: &GceConfig, expansion: Expansion, rng: &mut R) -> Self {
        let expanded = expansion.expanded_channels(width);
        let gce_channels = expansion.gce_channels(width);
        let gce_cfg = GceConfig {
            kernels: template.kernels.clone(),
            channels: gce_channels,
            layer_style: template.layer_style,
            merge: template.merge,
        };
        let merge_kernels = match (expansion.merges(), template.merge) {
            (true, MergeStrategy::Dynamic(Similarity::KernelCosine))
            | (true, MergeStrategy::Dynamic(Similarity::KernelMae)) => {
                let k1 = gce_cfg.kernels[0];
                let shape = Shape::new(expanded, 1, k1, k1);
                let bound = 1.0 / ((k1 * k1) as f64).sqrt();
                let data = (0..shape.numel())
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Some(Tensor::from_vec(shape, data).expect("merge kernel bank"))
            }
            _ => None,
        };
        CgBlockParams {
            norm1: LayerNormParams::init(width),
            expand: Conv2dParams::init(ConvKind::Pointwise, width, expanded, 1, 1, 0, rng),
            expansion,
            merge_kernels,
            gce: GceParams::init(&gce_cfg, rng),
            fuser: RangeFuserParams::init(gce_channels, gce_cfg.kernels.len(), width, rng),
            gce_cfg,
            norm2: LayerNormParams::init(width),
            ffn1: Conv2dParams::init(ConvKind::Pointwise, width, 2 * width, 1, 1, 0, rng),
            ffn2: Conv2dParams::init(ConvKind::Pointwise, width, width, 1, 1, 0, rng),
            beta: zero_scale(width),
            gamma: zero_scale(width),
        }
    }

    pub fn width(&self) -> usize {
        self.expand.in_channels
    }
}

/// Forward pass of one CascadedGaze block, capturing the GCE contexts when a
/// sink is supplied (context-map visualization).
pub fn cg_block_forward_captured<T: Scalar>(
    x: &Tensor<T>,
    p: &CgBlockParams<T>,
    capture: Option<&mut Option<GceContexts<T>>>,
) -> Result<Tensor<T>> {
    let (h, w) = (x.shape().h, x.shape().w);
    let y = ops::channel_layer_norm(x, &p.norm1)?;
    let y = ops::conv2d(&y, &p.expand)?;
    let y = ops::gelu(&y)?;
    let y = if p.expansion.merges() {
        gce::apply_merge(&y, p.gce_cfg.merge, p.merge_kernels.as_ref())?
    } else {
        y
    };
    let ctxs = gce::gce_forward(&y, &p.gce_cfg, &p.gce)?;
    let z = range_fuser(&ctxs, (h, w), &p.fuser)?;
    if let Some(slot) = capture {
        *slot = Some(GceContexts {
            local: ctxs.local.clone(),
            middle: ctxs.middle.clone(),
            global: ctxs.global.clone(),
        });
    }
    let x1 = ops::add(x, &ops::mul_bcast(&z, &p.beta)?)?;
    let f = ops::channel_layer_norm(&x1, &p.norm2)?;
    let f = ops::conv2d(&f, &p.ffn1)?;
    let f = ops::simple_gate(&f)?;
    let f = ops::conv2d(&f, &p.ffn2)?;
    ops::add(&x1, &ops::mul_bcast(&f, &p.gamma)?)
}

pub fn cg_block_forward<T: Scalar>(x: &Tensor<T>, p: &CgBlockParams<T>) -> Result<Tensor<T>> {
    cg_block_forward_captured(x, p, None)
}

#[derive(Clone)]
pub struct NafBlockParams<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub pw1: Conv2dParams<T>,
    pub dw: Conv2dParams<T>,
    pub sca: ScaParams<T>,
    pub pw2: Conv2dParams<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn1: Conv2dParams<T>,
    pub ffn2: Conv2dParams<T>,
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
}

impl<T: Scalar> NafBlockParams<T> {
    pub fn init<R: Rng>(width: usize, rng: &mut R) -> Self {
        NafBlockParams {
            norm1: LayerNormParams::init(width),
            pw1: Conv2dParams::init(ConvKind::Pointwise, width, 2 * width, 1, 1, 0, rng),
            dw: Conv2dParams::init(ConvKind::Depthwise, 2 * width, 2 * width, 3, 1, 1, rng),
            sca: ScaParams::init(width, rng),
            pw2: Conv2dParams::init(ConvKind::Pointwise, width, width, 1, 1, 0, rng),
            norm2: LayerNormParams::init(width),
            ffn1: Conv2dParams::init(ConvKind::Pointwise, width, 2 * width, 1, 1, 0, rng),
            ffn2: Conv2dParams::init(ConvKind::Pointwise, width, width, 1, 1, 0, rng),
            beta: zero_scale(width),
            gamma: zero_scale(width),
        }
    }

    pub fn width(&self) -> usize {
        self.pw1.in_channels
    }
}

pub fn naf_block_forward<T: Scalar>(x: &Tensor<T>, p: &NafBlockParams<T>) -> Result<Tensor<T>> {
    let y = ops::channel_layer_norm(x, &p.norm1)?;
    let y = ops::conv2d(&y, &p.pw1)?;
    let y = ops::conv2d(&y, &p.dw)?;
    let y = ops::simple_gate(&y)?;
    let y = ops::sca(&y, &p.sca)?;
    let y = ops::conv2d(&y, &p.pw2)?;
    let x1 = ops::add(x, &ops::mul_bcast(&y, &p.beta)?)?;
    let f = ops::channel_layer_norm(&x1, &p.norm2)?;
    let f = ops::conv2d(&f, &p.ffn1)?;
    let f = ops::simple_gate(&f)?;
    let f = ops::conv2d(&f, &p.ffn2)?;
    ops::add(&x1, &ops::mul_bcast(&f, &p.gamma)?)
}

pub(crate) fn collect_conv<T: Scalar>(
    prefix: &str,
    conv: &Conv2dParams<T>,
    out: &mut Vec<(String, Tensor<T>)>,
) {
    out.push((format!("{prefix}.weight"), conv.weight.clone()));
    if let Some(b) = &conv.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

fn collect_norm<T: Scalar>(prefix: &str, norm: &LayerNormParams<T>, out: &mut Vec<(String, Tensor<T>)>) {
    out.push((format!("{prefix}.gamma"), norm.gamma.clone()));
    out.push((format!("{prefix}.beta"), norm.beta.clone()));
}

fn collect_sca<T: Scalar>(prefix: &str, sca: &ScaParams<T>, out: &mut Vec<(String, Tensor<T>)>) {
    out.push((format!("{prefix}.weight"), sca.weight.clone()));
    out.push((format!("{prefix}.bias"), sca.bias.clone()));
}

fn conv_role(kind: ConvKind) -> &'static str {
    match kind {
        ConvKind::Depthwise => "dw",
        ConvKind::Pointwise => "pw",
        ConvKind::Standard => "conv",
    }
}

impl<T: Scalar> CgBlockParams<T> {
    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        collect_norm(&format!("{prefix}.norm1"), &self.norm1, out);
        collect_conv(&format!("{prefix}.expand"), &self.expand, out);
        if let Some(bank) = &self.merge_kernels {
            out.push((format!("{prefix}.merge.kernels"), bank.clone()));
        }
        for (i, layer) in self.gce.layers.iter().enumerate() {
            let role = conv_role(layer.primary.kind);
            collect_conv(&format!("{prefix}.gce.layer{i}.{role}"), &layer.primary, out);
            if let Some(second) = &layer.secondary {
                let role = conv_role(second.kind);
                collect_conv(&format!("{prefix}.gce.layer{i}.{role}"), second, out);
            }
        }
        collect_sca(&format!("{prefix}.fuser.sca"), &self.fuser.sca, out);
        collect_conv(&format!("{prefix}.fuser.reduce"), &self.fuser.reduce, out);
        collect_norm(&format!("{prefix}.norm2"), &self.norm2, out);
        collect_conv(&format!("{prefix}.ffn1"), &self.ffn1, out);
        collect_conv(&format!("{prefix}.ffn2"), &self.ffn2, out);
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
    }
}

impl<T: Scalar> NafBlockParams<T> {
    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        collect_norm(&format!("{prefix}.norm1"), &self.norm1, out);
        collect_conv(&format!("{prefix}.pw1"), &self.pw1, out);
        collect_conv(&format!("{prefix}.dw"), &self.dw, out);
        collect_sca(&format!("{prefix}.sca"), &self.sca, out);
        collect_conv(&format!("{prefix}.pw2"), &self.pw2, out);
        collect_norm(&format!("{prefix}.norm2"), &self.norm2, out);
        collect_conv(&format!("{prefix}.ffn1"), &self.ffn1, out);
        collect_conv(&format!("{prefix}.ffn2"), &self.ffn2, out);
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
    }
}
