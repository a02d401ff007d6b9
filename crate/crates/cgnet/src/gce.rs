//! Channel merging (static and similarity-matched) and the Global Context
//! Extractor: a cascade of up to three stride-equals-kernel layers whose
//! outputs summarize k1, k1*k2 and k1*k2*k3 sized input neighborhoods.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Conv2dParams, ConvKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LayerStyle {
    /// Depthwise reduction followed by a pointwise mix (default).
    DwThenPw,
    PwThenDw,
    Standard,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Similarity {
    ChannelCosine,
    KernelCosine,
    KernelMae,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MergeStrategy {
    Static,
    Dynamic(Similarity),
}

#[derive(Clone, Debug)]
pub struct GceConfig {
    /// Kernel schedule [k1, k2, k3]; fewer entries give a shorter cascade.
    pub kernels: Vec<usize>,
    pub channels: usize,
    pub layer_style: LayerStyle,
    pub merge: MergeStrategy,
}

impl GceConfig {
    pub fn new(kernels: Vec<usize>, channels: usize) -> Self {
        GceConfig {
            kernels,
            channels,
            layer_style: LayerStyle::DwThenPw,
            merge: MergeStrategy::Static,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("gce channels must be >= 1".into()));
        }
        if self.kernels.is_empty() || self.kernels.len() > 3 {
            return Err(Error::Config(
                "gce kernel schedule must hold 1 to 3 entries".into(),
            ));
        }
        if self.kernels.contains(&0) {
            return Err(Error::Config("gce kernels must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of cascade layers that survive the size rule at (h, w).
    pub fn present_layers(&self, h: usize, w: usize) -> usize {
        let mut count = 0;
        let (mut h, mut w) = (h, w);
        for &k in &self.kernels {
            h = gce_layer_size(h, k);
            w = gce_layer_size(w, k);
            if h == 0 || w == 0 {
                break;
            }
            count += 1;
        }
        count
    }
}

/// One cascade layer: the spatial reduction conv plus, for the separable
/// styles, the pointwise mix that follows or precedes it.
#[derive(Clone)]
pub struct GceLayerParams<T: Scalar> {
    pub primary: Conv2dParams<T>,
    pub secondary: Option<Conv2dParams<T>>,
}

impl<T: Scalar> GceLayerParams<T> {
    fn init<R: Rng>(style: LayerStyle, channels: usize, k: usize, rng: &mut R) -> Self {
        match style {
            LayerStyle::DwThenPw => GceLayerParams {
                primary: Conv2dParams::init(ConvKind::Depthwise, channels, channels, k, k, 0, rng),
                secondary: Some(Conv2dParams::init(
                    ConvKind::Pointwise,
                    channels,
                    channels,
                    1,
                    1,
                    0,
                    rng,
                )),
            },
            LayerStyle::PwThenDw => GceLayerParams {
                primary: Conv2dParams::init(ConvKind::Pointwise, channels, channels, 1, 1, 0, rng),
                secondary: Some(Conv2dParams::init(
                    ConvKind::Depthwise,
                    channels,
                    channels,
                    k,
                    k,
                    0,
                    rng,
                )),
            },
            LayerStyle::Standard => GceLayerParams {
                primary: Conv2dParams::init(ConvKind::Standard, channels, channels, k, k, 0, rng),
                secondary: None,
            },
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = ops::conv2d(x, &self.primary)?;
        if let Some(second) = &self.secondary {
            y = ops::conv2d(&y, second)?;
        }
        ops::gelu(&y)
    }
}

#[derive(Clone)]
pub struct GceParams<T: Scalar> {
    pub layers: Vec<GceLayerParams<T>>,
}

impl<T: Scalar> GceParams<T> {
    pub fn init<R: Rng>(cfg: &GceConfig, rng: &mut R) -> Self {
        let layers = cfg
            .kernels
            .iter()
            .map(|&k| GceLayerParams::init(cfg.layer_style, cfg.channels, k, rng))
            .collect();
        GceParams { layers }
    }
}

/// Local, middle and global context maps; deeper entries are absent whenever
/// the size rule dropped their layer.
pub struct GceContexts<T: Scalar> {
    pub local: Tensor<T>,
    pub middle: Option<Tensor<T>>,
    pub global: Option<Tensor<T>>,
}

impl<T: Scalar> GceContexts<T> {
    pub fn present(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.local];
        if let Some(m) = &self.middle {
            v.push(m);
        }
        if let Some(g) = &self.global {
            v.push(g);
        }
        v
    }

    pub fn count(&self) -> usize {
        1 + self.middle.is_some() as usize + self.global.is_some() as usize
    }
}

/// Spatial extent after one stride-equals-kernel, zero-padding layer.
pub fn gce_layer_size(n_in: usize, k: usize) -> usize {
    n_in / k
}

/// Merge even channels with odd channels: out[c] = x[2c] + x[2c+1].
pub fn static_merge<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().c;
    if !c.is_multiple_of(2) {
        return Err(Error::shape(
            "static_merge",
            format!("channel count {c} is odd"),
        ));
    }
    let pairs: Vec<(usize, usize)> = (0..c / 2).map(|i| (2 * i, 2 * i + 1)).collect();
    ops::merge_pairs(x, &pairs)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn neg_mae(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y).abs();
    }
    -(acc / a.len() as f64)
}

/// Greedy highest-score matching of even-indexed channels against odd-indexed
/// ones; ties break toward the lowest channel indices. Returns (even, odd)
/// pairs ordered by the even channel.
pub fn greedy_channel_pairs(scores: &[Vec<f64>], evens: &[usize], odds: &[usize]) -> Vec<(usize, usize)> {
    let mut candidates = Vec::with_capacity(evens.len() * odds.len());
    for (i, &a) in evens.iter().enumerate() {
        for (j, &b) in odds.iter().enumerate() {
            candidates.push((scores[i][j], a, b));
        }
    }
    candidates.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_a = vec![false; evens.len()];
    let mut used_b = vec![false; odds.len()];
    let index_of = |list: &[usize], v: usize| list.iter().position(|&x| x == v).unwrap();
    let mut pairs = Vec::with_capacity(evens.len());
    for (_, a, b) in candidates {
        let ia = index_of(evens, a);
        let ib = index_of(odds, b);
        if used_a[ia] || used_b[ib] {
            continue;
        }
        used_a[ia] = true;
        used_b[ib] = true;
        pairs.push((a, b));
        if pairs.len() == evens.len() {
            break;
        }
    }
    pairs.sort_by_key(|&(a, _)| a);
    pairs
}

/// Merge similarity-matched even/odd channel pairs by elementwise summation.
/// Kernel-based similarities score the per-channel depthwise kernel weights
/// supplied in `aux_kernels` (first extent = channel count).
pub fn dynamic_merge<T: Scalar>(
    x: &Tensor<T>,
    similarity: Similarity,
    aux_kernels: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.c.is_multiple_of(2) {
        return Err(Error::shape(
            "dynamic_merge",
            format!("channel count {} is odd", s.c),
        ));
    }
    let evens: Vec<usize> = (0..s.c).step_by(2).collect();
    let odds: Vec<usize> = (1..s.c).step_by(2).collect();

    let channel_vectors: Vec<Vec<f64>> = match similarity {
        Similarity::ChannelCosine => {
            let hw = s.h * s.w;
            let xd = x.data();
            (0..s.c)
                .map(|c| {
                    let mut v = Vec::with_capacity(s.n * hw);
                    for n in 0..s.n {
                        let base = (n * s.c + c) * hw;
                        v.extend(xd[base..base + hw].iter().map(|t| t.into_f64()));
                    }
                    v
                })
                .collect()
        }
        Similarity::KernelCosine | Similarity::KernelMae => {
            let aux = aux_kernels.ok_or_else(|| {
                Error::arg(
                    "dynamic_merge",
                    "kernel-based similarity requires per-channel kernel weights",
                )
            })?;
            let ashape = aux.shape();
            if ashape.n != s.c {
                return Err(Error::shape(
                    "dynamic_merge",
                    format!("kernel bank holds {} channels, input has {}", ashape.n, s.c),
                ));
            }
            let per = aux.numel() / s.c;
            let ad = aux.data();
            (0..s.c)
                .map(|c| ad[c * per..(c + 1) * per].iter().map(|t| t.into_f64()).collect())
                .collect()
        }
    };

    let score = |a: &[f64], b: &[f64]| match similarity {
        Similarity::ChannelCosine | Similarity::KernelCosine => cosine(a, b),
        Similarity::KernelMae => neg_mae(a, b),
    };
    let scores: Vec<Vec<f64>> = evens
        .iter()
        .map(|&a| {
            odds.iter()
                .map(|&b| score(&channel_vectors[a], &channel_vectors[b]))
                .collect()
        })
        .collect();

    let pairs = greedy_channel_pairs(&scores, &evens, &odds);
    ops::merge_pairs(x, &pairs)
}

/// Apply the channel-merge configured on `cfg` to a tensor with 2x channels.
pub fn apply_merge<T: Scalar>(
    x: &Tensor<T>,
    strategy: MergeStrategy,
    aux_kernels: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match strategy {
        MergeStrategy::Static => static_merge(x),
        MergeStrategy::Dynamic(sim) => dynamic_merge(x, sim, aux_kernels),
    }
}

/// Run the cascade. Layer l is skipped, along with everything after it, as
/// soon as either spatial output extent floors to zero. The first layer not
/// fitting is an error: callers must guarantee H, W >= k1.
pub fn gce_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &GceConfig,
    params: &GceParams<T>,
) -> Result<GceContexts<T>> {
    cfg.validate()?;
    let s = x.shape();
    if s.c != cfg.channels {
        return Err(Error::shape(
            "gce_forward",
            format!("input has {} channels, config expects {}", s.c, cfg.channels),
        ));
    }
    let k1 = cfg.kernels[0];
    if s.h < k1 || s.w < k1 {
        return Err(Error::shape(
            "gce_forward",
            format!("spatial extents {}x{} below first kernel {}", s.h, s.w, k1),
        ));
    }
    let mut maps: Vec<Tensor<T>> = Vec::with_capacity(cfg.kernels.len());
    let mut cur = x.clone();
    let (mut h, mut w) = (s.h, s.w);
    for (layer, &k) in params.layers.iter().zip(&cfg.kernels) {
        let (oh, ow) = (gce_layer_size(h, k), gce_layer_size(w, k));
        if oh == 0 || ow == 0 {
            break;
        }
        cur = layer.forward(&cur)?;
        debug_assert_eq!((cur.shape().h, cur.shape().w), (oh, ow));
        maps.push(cur.clone());
        h = oh;
        w = ow;
    }
    let mut it = maps.into_iter();
    Ok(GceContexts {
        local: it.next().expect("first layer fits by precondition"),
        middle: it.next(),
        global: it.next(),
    })
}
