//! Analytic MACs and parameter counting over a NetworkConfig, perturbation
//! receptive-field probing, and grayscale context-map export.
//!
//! MAC convention: one multiply-accumulate = 1 MAC. Convolutions count
//! out_h * out_w * (in_c / groups) * out_c * k^2; the pooled pointwise inside
//! SCA counts in_c * out_c. Elementwise ops, norms, resizes, gates, pools and
//! merges count zero. Parameter counts are independent of resolution and
//! include non-trainable buffers, matching the checkpoint inventory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gce::{gce_layer_size, LayerStyle, MergeStrategy, Similarity};
use crate::network::{ForwardRecord, Model, NetworkConfig, StageId};
use crate::tensor::Tensor;

pub fn standard_conv_macs(out_h: usize, out_w: usize, in_c: usize, out_c: usize, k: usize) -> u64 {
    (out_h * out_w * in_c * out_c * k * k) as u64
}

pub fn depthwise_conv_macs(out_h: usize, out_w: usize, channels: usize, k: usize) -> u64 {
    (out_h * out_w * channels * k * k) as u64
}

pub fn pointwise_conv_macs(h: usize, w: usize, in_c: usize, out_c: usize) -> u64 {
    (h * w * in_c * out_c) as u64
}

/// The SCA pointwise conv runs on the pooled 1x1 map.
pub fn sca_macs(in_c: usize, out_c: usize) -> u64 {
    (in_c * out_c) as u64
}

#[derive(Clone, Debug)]
pub struct CostRow {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Resolution the MACs column was evaluated at; None for a params-only walk.
    pub resolution: Option<(usize, usize)>,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap();
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}  {:>14}  {:>12}\n", "layer", "macs", "params"));
        for r in &self.rows {
            out.push_str(&format!("{:<name_w$}  {:>14}  {:>12}\n", r.name, r.macs, r.params));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>14}  {:>12}\n",
            "total",
            self.total_macs(),
            self.total_params()
        ));
        out.push_str(&format!(
            "total: {:.3} GMACs, {:.3} M params\n",
            self.total_macs() as f64 / 1e9,
            self.total_params() as f64 / 1e6
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,macs,params\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.name, r.macs, r.params));
        }
        out.push_str(&format!("total,{},{}\n", self.total_macs(), self.total_params()));
        out
    }
}

struct Walker {
    rows: Vec<CostRow>,
}

impl Walker {
    fn row(&mut self, name: String, macs: u64, params: u64) {
        self.rows.push(CostRow { name, macs, params });
    }

    /// Cascade layer bookkeeping: returns the per-layer output extents that
    /// survive the size rule (empty slots dropped).
    fn gce_sizes(kernels: &[usize], res: Option<(usize, usize)>) -> Vec<Option<(usize, usize)>> {
        let mut out = Vec::with_capacity(kernels.len());
        let mut cur = res;
        for &k in kernels {
            cur = cur.and_then(|(h, w)| {
                let (oh, ow) = (gce_layer_size(h, k), gce_layer_size(w, k));
                (oh > 0 && ow > 0).then_some((oh, ow))
            });
            out.push(cur);
        }
        out
    }

    fn cg_block(&mut self, prefix: &str, cfg: &NetworkConfig, width: usize, res: Option<(usize, usize)>) -> Result<()> {
        let expansion = cfg.expansion;
        let expanded = expansion.expanded_channels(width);
        let gce_c = expansion.gce_channels(width);
        let kernels = &cfg.gce_kernels;
        let k1 = kernels[0];
        if let Some((h, w)) = res {
            if h < k1 || w < k1 {
                return Err(Error::arg(
                    "count_macs",
                    format!("{prefix}: extents {h}x{w} below the first cascade kernel {k1}"),
                ));
            }
        }
        self.row(format!("{prefix}.norm1"), 0, 2 * width as u64);
        self.row(
            format!("{prefix}.expand"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, expanded)),
            (width * expanded + expanded) as u64,
        );
        let kernel_merge = matches!(
            cfg.merge,
            MergeStrategy::Dynamic(Similarity::KernelCosine) | MergeStrategy::Dynamic(Similarity::KernelMae)
        );
        if expansion.merges() && kernel_merge {
            self.row(
                format!("{prefix}.merge.kernels"),
                0,
                (expanded * k1 * k1) as u64,
            );
        }
        let sizes = Self::gce_sizes(kernels, res);
        let mut in_res = res;
        for (i, (&k, out_res)) in kernels.iter().zip(&sizes).enumerate() {
            match cfg.layer_style {
                LayerStyle::DwThenPw => {
                    self.row(
                        format!("{prefix}.gce.layer{i}.dw"),
                        out_res.map_or(0, |(oh, ow)| depthwise_conv_macs(oh, ow, gce_c, k)),
                        (gce_c * k * k + gce_c) as u64,
                    );
                    self.row(
                        format!("{prefix}.gce.layer{i}.pw"),
                        out_res.map_or(0, |(oh, ow)| pointwise_conv_macs(oh, ow, gce_c, gce_c)),
                        (gce_c * gce_c + gce_c) as u64,
                    );
                }
                LayerStyle::PwThenDw => {
                    self.row(
                        format!("{prefix}.gce.layer{i}.pw"),
                        out_res
                            .and(in_res)
                            .map_or(0, |(ih, iw)| pointwise_conv_macs(ih, iw, gce_c, gce_c)),
                        (gce_c * gce_c + gce_c) as u64,
                    );
                    self.row(
                        format!("{prefix}.gce.layer{i}.dw"),
                        out_res.map_or(0, |(oh, ow)| depthwise_conv_macs(oh, ow, gce_c, k)),
                        (gce_c * k * k + gce_c) as u64,
                    );
                }
                LayerStyle::Standard => {
                    self.row(
                        format!("{prefix}.gce.layer{i}.conv"),
                        out_res.map_or(0, |(oh, ow)| standard_conv_macs(oh, ow, gce_c, gce_c, k)),
                        (gce_c * gce_c * k * k + gce_c) as u64,
                    );
                }
            }
            in_res = *out_res;
        }
        let max_ctx = kernels.len();
        let present = sizes.iter().filter(|s| s.is_some()).count();
        let full = max_ctx * gce_c;
        let used = present * gce_c;
        self.row(
            format!("{prefix}.fuser.sca"),
            if res.is_some() { sca_macs(used, used) } else { 0 },
            (full * full + full) as u64,
        );
        self.row(
            format!("{prefix}.fuser.reduce"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, used, width)),
            (full * width + width) as u64,
        );
        self.row(format!("{prefix}.norm2"), 0, 2 * width as u64);
        self.row(
            format!("{prefix}.ffn1"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, 2 * width)),
            (width * 2 * width + 2 * width) as u64,
        );
        self.row(
            format!("{prefix}.ffn2"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, width)),
            (width * width + width) as u64,
        );
        self.row(format!("{prefix}.beta"), 0, width as u64);
        self.row(format!("{prefix}.gamma"), 0, width as u64);
        Ok(())
    }

    fn naf_block(&mut self, prefix: &str, width: usize, res: Option<(usize, usize)>) {
        self.row(format!("{prefix}.norm1"), 0, 2 * width as u64);
        self.row(
            format!("{prefix}.pw1"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, 2 * width)),
            (width * 2 * width + 2 * width) as u64,
        );
        self.row(
            format!("{prefix}.dw"),
            res.map_or(0, |(h, w)| depthwise_conv_macs(h, w, 2 * width, 3)),
            (2 * width * 9 + 2 * width) as u64,
        );
        self.row(
            format!("{prefix}.sca"),
            if res.is_some() { sca_macs(width, width) } else { 0 },
            (width * width + width) as u64,
        );
        self.row(
            format!("{prefix}.pw2"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, width)),
            (width * width + width) as u64,
        );
        self.row(format!("{prefix}.norm2"), 0, 2 * width as u64);
        self.row(
            format!("{prefix}.ffn1"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, 2 * width)),
            (width * 2 * width + 2 * width) as u64,
        );
        self.row(
            format!("{prefix}.ffn2"),
            res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, width, width)),
            (width * width + width) as u64,
        );
        self.row(format!("{prefix}.beta"), 0, width as u64);
        self.row(format!("{prefix}.gamma"), 0, width as u64);
    }
}

fn walk(cfg: &NetworkConfig, res: Option<(usize, usize)>) -> Result<CostReport> {
    cfg.validate()?;
    if let Some((h, w)) = res {
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::arg(
                "count_macs",
                format!("resolution {h}x{w} must be a positive multiple of 16"),
            ));
        }
    }
    let mut walker = Walker { rows: Vec::new() };
    let c = cfg.width;
    walker.row(
        "intro".into(),
        res.map_or(0, |(h, w)| standard_conv_macs(h, w, 3, c, 3)),
        (3 * c * 9 + c) as u64,
    );
    for i in 0..4 {
        let width = cfg.stage_width(i);
        let stage_res = res.map(|(h, w)| (h >> i, w >> i));
        for b in 0..cfg.enc_blocks[i] {
            walker.cg_block(&format!("enc{i}.cg{b}"), cfg, width, stage_res)?;
        }
        for b in 0..cfg.enc_extra_naf[i] {
            walker.naf_block(&format!("enc{i}.naf{b}"), width, stage_res);
        }
        walker.row(
            format!("enc{i}.down"),
            stage_res.map_or(0, |(h, w)| standard_conv_macs(h / 2, w / 2, width, 2 * width, 2)),
            (width * 2 * width * 4 + 2 * width) as u64,
        );
    }
    let mw = cfg.middle_width();
    let mid_res = res.map(|(h, w)| (h >> 4, w >> 4));
    for b in 0..cfg.middle_blocks {
        let prefix = format!("middle.block{b}");
        if cfg.placement.middle() {
            walker.cg_block(&prefix, cfg, mw, mid_res)?;
        } else {
            walker.naf_block(&prefix, mw, mid_res);
        }
    }
    for j in 0..4 {
        let w_in = cfg.width << (4 - j);
        let in_res = res.map(|(h, w)| (h >> (4 - j), w >> (4 - j)));
        walker.row(
            format!("dec{j}.up"),
            in_res.map_or(0, |(h, w)| pointwise_conv_macs(h, w, w_in, 2 * w_in)),
            (w_in * 2 * w_in + 2 * w_in) as u64,
        );
        let out_res = res.map(|(h, w)| (h >> (3 - j), w >> (3 - j)));
        for b in 0..cfg.dec_blocks[j] {
            let prefix = format!("dec{j}.block{b}");
            if cfg.placement.decoder() {
                walker.cg_block(&prefix, cfg, w_in / 2, out_res)?;
            } else {
                walker.naf_block(&prefix, w_in / 2, out_res);
            }
        }
    }
    for k in 0..cfg.heads {
        walker.row(
            format!("head{k}"),
            res.map_or(0, |(h, w)| standard_conv_macs(h, w, c, 3, 3)),
            (c * 3 * 9 + 3) as u64,
        );
    }
    Ok(CostReport {
        rows: walker.rows,
        resolution: res,
    })
}

/// Analytic MACs and parameters for one image at (h, w). Weight-independent.
pub fn count_macs(cfg: &NetworkConfig, h: usize, w: usize) -> Result<CostReport> {
    walk(cfg, Some((h, w)))
}

/// Total weight and bias count, including non-trainable buffers.
pub fn count_params(cfg: &NetworkConfig) -> Result<u64> {
    Ok(walk(cfg, None)?.total_params())
}

/// Influence sets per output cell of one output map: `sets[oi * out_w + oj]`
/// lists the input pixels whose perturbation changed that cell.
pub struct InfluenceGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub sets: Vec<Vec<(usize, usize)>>,
}

impl InfluenceGrid {
    pub fn set_at(&self, oi: usize, oj: usize) -> &[(usize, usize)] {
        &self.sets[oi * self.out_w + oj]
    }
}

/// Perturb every input pixel by `delta` (all channels at once) and record,
/// per output level and cell, whether any channel of that cell changed
/// bit-exactly. One forward pass per input pixel.
pub fn influence_scan<F>(f: &F, base: &Tensor<f64>, delta: f64) -> Result<Vec<InfluenceGrid>>
where
    F: Fn(&Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let s = base.shape();
    let baseline = crate::with_no_grad(|| f(base))?;
    let mut grids: Vec<InfluenceGrid> = baseline
        .iter()
        .map(|t| InfluenceGrid {
            out_h: t.shape().h,
            out_w: t.shape().w,
            sets: vec![Vec::new(); t.shape().h * t.shape().w],
        })
        .collect();
    for pi in 0..s.h {
        for pj in 0..s.w {
            let mut data = base.data().clone();
            for n in 0..s.n {
                for c in 0..s.c {
                    data[s.index(n, c, pi, pj)] += delta;
                }
            }
            let probe = Tensor::from_vec(s, data)?;
            let outs = crate::with_no_grad(|| f(&probe))?;
            for (grid, (out, before)) in grids.iter_mut().zip(outs.iter().zip(&baseline)) {
                let os = out.shape();
                let od = out.data();
                let bd = before.data();
                for oi in 0..os.h {
                    for oj in 0..os.w {
                        let mut changed = false;
                        for n in 0..os.n {
                            for c in 0..os.c {
                                let idx = os.index(n, c, oi, oj);
                                if od[idx].to_bits() != bd[idx].to_bits() {
                                    changed = true;
                                    break;
                                }
                            }
                            if changed {
                                break;
                            }
                        }
                        if changed {
                            grid.sets[oi * os.w + oj].push((pi, pj));
                        }
                    }
                }
            }
        }
    }
    Ok(grids)
}

pub struct ProbeReport {
    pub influencing: Vec<(usize, usize)>,
    /// (min_row, min_col, max_row, max_col), inclusive.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

fn bbox_of(pixels: &[(usize, usize)]) -> Option<(usize, usize, usize, usize)> {
    let first = pixels.first()?;
    let mut bb = (first.0, first.1, first.0, first.1);
    for &(r, c) in pixels {
        bb.0 = bb.0.min(r);
        bb.1 = bb.1.min(c);
        bb.2 = bb.2.max(r);
        bb.3 = bb.3.max(c);
    }
    Some(bb)
}

/// Influence set of one output cell of output map `level`.
pub fn receptive_probe<F>(
    f: &F,
    base: &Tensor<f64>,
    level: usize,
    coord: (usize, usize),
    delta: f64,
) -> Result<ProbeReport>
where
    F: Fn(&Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let grids = influence_scan(f, base, delta)?;
    let grid = grids
        .get(level)
        .ok_or_else(|| Error::arg("receptive_probe", format!("no output level {level}")))?;
    if coord.0 >= grid.out_h || coord.1 >= grid.out_w {
        return Err(Error::arg(
            "receptive_probe",
            format!(
                "coordinate ({}, {}) outside the {}x{} output",
                coord.0, coord.1, grid.out_h, grid.out_w
            ),
        ));
    }
    let influencing = grid.set_at(coord.0, coord.1).to_vec();
    let bbox = bbox_of(&influencing);
    Ok(ProbeReport { influencing, bbox })
}

/// Channel-mean of each present context of one CG block, min-max normalized
/// to [0, 255] and written as local/middle/global PGM files. A zero-range map
/// emits all zeros.
pub fn dump_context_maps(
    model: &Model<f32>,
    image: &Tensor<f32>,
    stage: StageId,
    block_index: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut record = ForwardRecord::capturing(stage, block_index);
    crate::with_no_grad(|| model.forward_recorded(image, &mut record))?;
    let ctxs = record.contexts.ok_or_else(|| {
        Error::arg(
            "dump_context_maps",
            format!("stage {stage} block {block_index} hosts no GCE module"),
        )
    })?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let named: [(&str, Option<&Tensor<f32>>); 3] = [
        ("local", Some(&ctxs.local)),
        ("middle", ctxs.middle.as_ref()),
        ("global", ctxs.global.as_ref()),
    ];
    for (name, ctx) in named {
        let Some(ctx) = ctx else { continue };
        let s = ctx.shape();
        let d = ctx.data();
        let hw = s.h * s.w;
        let mut mean = vec![0.0f64; hw];
        for c in 0..s.c {
            for i in 0..hw {
                mean[i] += d[c * hw + i] as f64;
            }
        }
        for v in &mut mean {
            *v /= s.c as f64;
        }
        let (lo, hi) = mean
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let bytes: Vec<u8> = if range < 1e-12 {
            vec![0u8; hw]
        } else {
            mean.iter()
                .map(|v| (((v - lo) / range) * 255.0).round() as u8)
                .collect()
        };
        let path = out_dir.join(format!("{name}.pgm"));
        crate::netpbm::write_pgm(&path, &bytes, s.h, s.w)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gce::{gce_forward, GceConfig, GceParams};
    use crate::ops::{self, Conv2dParams, ConvKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn micro_macs_are_exact() {
        assert_eq!(pointwise_conv_macs(2, 2, 3, 4), 48);
        assert_eq!(depthwise_conv_macs(4, 4, 8, 3), 1152);
        assert_eq!(standard_conv_macs(2, 2, 3, 4, 3), 432);
        assert_eq!(sca_macs(6, 6), 36);
    }

    #[test]
    fn micro_param_counts() {
        // 3x3 conv 3 -> 8 with bias, then a pointwise 16 -> 16 with bias.
        let conv = 3 * 8 * 9 + 8;
        assert_eq!(conv, 224);
        let pw = 16 * 16 + 16;
        assert_eq!(pw, 272);
    }

    #[test]
    fn report_totals_are_row_sums() {
        let cfg = NetworkConfig::desk(8);
        let report = count_macs(&cfg, 64, 64).unwrap();
        let macs: u64 = report.rows.iter().map(|r| r.macs).sum();
        let params: u64 = report.rows.iter().map(|r| r.params).sum();
        assert_eq!(report.total_macs(), macs);
        assert_eq!(report.total_params(), params);
        assert!(macs > 0 && params > 0);
    }

    #[test]
    fn params_are_resolution_independent() {
        let cfg = NetworkConfig::desk(8);
        let a = count_macs(&cfg, 32, 32).unwrap().total_params();
        let b = count_macs(&cfg, 128, 64).unwrap().total_params();
        assert_eq!(a, b);
        assert_eq!(a, count_params(&cfg).unwrap());
    }

    #[test]
    fn count_params_matches_built_inventory() {
        let cfg = NetworkConfig::desk(6);
        let model = crate::network::build::<f32>(&cfg, 1).unwrap();
        assert_eq!(count_params(&cfg).unwrap(), model.param_count());
    }

    #[test]
    fn invalid_resolution_is_rejected() {
        let cfg = NetworkConfig::desk(8);
        assert!(count_macs(&cfg, 60, 64).is_err());
        // 16x16 leaves stage 4 at 2x2, below the first cascade kernel.
        assert!(count_macs(&cfg, 16, 16).is_err());
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: crate::Shape) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn depthwise_probe_finds_the_textbook_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let conv = Conv2dParams::<f64>::init(ConvKind::Depthwise, 2, 2, 3, 1, 1, &mut rng);
        let base = rand_tensor(&mut rng, crate::Shape::new(1, 2, 9, 9));
        let f = |x: &Tensor<f64>| Ok(vec![ops::conv2d(x, &conv)?]);
        let report = receptive_probe(&f, &base, 0, (4, 4), 1e-3).unwrap();
        assert_eq!(report.bbox, Some((3, 3, 5, 5)));
        assert_eq!(report.influencing.len(), 9);
    }

    #[test]
    fn cascade_level_two_covers_a_nine_by_nine_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = GceConfig::new(vec![3, 3], 2);
        let params = GceParams::<f64>::init(&cfg, &mut rng);
        let base = rand_tensor(&mut rng, crate::Shape::new(1, 2, 18, 18));
        let f = |x: &Tensor<f64>| {
            let ctx = gce_forward(x, &cfg, &params)?;
            let mut outs = vec![ctx.local];
            outs.extend(ctx.middle);
            Ok(outs)
        };
        let report = receptive_probe(&f, &base, 1, (1, 0), 1e-3).unwrap();
        assert_eq!(report.bbox, Some((9, 0, 17, 8)));
        assert_eq!(report.influencing.len(), 81);
    }

    #[test]
    fn context_dump_writes_expected_extents() {
        let dir = std::env::temp_dir().join(format!("cgnet-dump-{}", std::process::id()));
        let cfg = NetworkConfig::desk(4);
        let model = crate::network::build::<f32>(&cfg, 77).unwrap();
        let image = crate::data::synth_image(8, 48, 48).unwrap();
        let written = dump_context_maps(&model, &image, StageId::Encoder(0), 0, &dir).unwrap();
        // Stage 0 runs at 48x48 with kernels [3,3,5]: extents 16, 5, 1.
        assert_eq!(written.len(), 3);
        let expect = [(16usize, 16usize), (5, 5), (1, 1)];
        for (path, (eh, ew)) in written.iter().zip(expect) {
            let (_, h, w) = crate::netpbm::read_pgm(path).unwrap();
            assert_eq!((h, w), (eh, ew), "{}", path.display());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn context_dump_of_zero_weight_model_emits_zeros() {
        let dir = std::env::temp_dir().join(format!("cgnet-dump0-{}", std::process::id()));
        let cfg = NetworkConfig::desk(4);
        let model = crate::network::build::<f32>(&cfg, 78).unwrap();
        for (_, t) in model.named_params() {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        let image = Tensor::from_vec(
            crate::Shape::new(1, 3, 48, 48),
            vec![0.5; 3 * 48 * 48],
        )
        .unwrap();
        let written = dump_context_maps(&model, &image, StageId::Encoder(0), 0, &dir).unwrap();
        for path in &written {
            let (bytes, _, _) = crate::netpbm::read_pgm(path).unwrap();
            assert!(bytes.iter().all(|&b| b == 0), "{}", path.display());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dump_rejects_stages_without_gce() {
        let dir = std::env::temp_dir().join(format!("cgnet-dumperr-{}", std::process::id()));
        let cfg = NetworkConfig::desk(4);
        let model = crate::network::build::<f32>(&cfg, 79).unwrap();
        let image = crate::data::synth_image(9, 48, 48).unwrap();
        assert!(dump_context_maps(&model, &image, StageId::Middle, 0, &dir).is_err());
        assert!(dump_context_maps(&model, &image, StageId::Encoder(0), 5, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    // The local context acts like an edge detector; measured as a proxy, its
    // normalized map shows more spatial variation than the global one on an
    // edge-heavy input.
    #[test]
    fn local_map_has_sharper_gradients_than_global() {
        fn mean_abs_gradient(bytes: &[u8], h: usize, w: usize) -> f64 {
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        acc += (bytes[i * w + j] as f64 - bytes[i * w + j + 1] as f64).abs();
                        count += 1;
                    }
                    if i + 1 < h {
                        acc += (bytes[i * w + j] as f64 - bytes[(i + 1) * w + j] as f64).abs();
                        count += 1;
                    }
                }
            }
            acc / count.max(1) as f64
        }

        let dir = std::env::temp_dir().join(format!("cgnet-dumpedge-{}", std::process::id()));
        let cfg = NetworkConfig::desk(4);
        let model = crate::network::build::<f32>(&cfg, 80).unwrap();
        // Hard vertical edge plus a diagonal: plenty of local structure.
        let mut data = vec![0.0f32; 3 * 96 * 96];
        for c in 0..3 {
            for i in 0..96 {
                for j in 0..96 {
                    let v = if j > 48 { 0.9 } else { 0.1 };
                    let v = if i == j { 1.0 } else { v };
                    data[(c * 96 + i) * 96 + j] = v;
                }
            }
        }
        let image = Tensor::from_vec(crate::Shape::new(1, 3, 96, 96), data).unwrap();
        let written = dump_context_maps(&model, &image, StageId::Encoder(0), 0, &dir).unwrap();
        // Upsample both maps to the input resolution before measuring, the
        // way the maps are viewed side by side.
        let upsample = |bytes: &[u8], h: usize, w: usize| -> Vec<u8> {
            let mut out = vec![0u8; 96 * 96];
            for i in 0..96 {
                for j in 0..96 {
                    out[i * 96 + j] = bytes[(i * h / 96) * w + (j * w / 96)];
                }
            }
            out
        };
        let (local, lh, lw) = crate::netpbm::read_pgm(&written[0]).unwrap();
        let (global, gh, gw) = crate::netpbm::read_pgm(written.last().unwrap()).unwrap();
        let local_grad = mean_abs_gradient(&upsample(&local, lh, lw), 96, 96);
        let global_grad = mean_abs_gradient(&upsample(&global, gh, gw), 96, 96);
        assert!(
            local_grad > global_grad,
            "local {local_grad:.2} must exceed global {global_grad:.2}"
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
