//! Run configuration: key=value files with '#' comments, preset defaults,
//! and command-line overrides. Unknown keys are rejected with the nearest
//! valid key named; every command echoes the resolved configuration so a run
//! can be replayed from its output.

use std::collections::BTreeMap;
use std::path::Path;

use crate::blocks::Expansion;
use crate::data::NoiseModel;
use crate::error::{Error, Result};
use crate::gce::{LayerStyle, MergeStrategy, Similarity};
use crate::network::{GcePlacement, NetworkConfig};
use crate::optim::LrSchedule;
use crate::train::TrainPlan;

struct KeySpec {
    key: &'static str,
    default: &'static str,
    doc: &'static str,
}

const SCHEMA: &[KeySpec] = &[
    KeySpec { key: "preset", default: "desk", doc: "desk | sidd | gaussian | gopro" },
    KeySpec { key: "width", default: "", doc: "base channel count (empty: preset value)" },
    KeySpec { key: "enc_blocks", default: "", doc: "CG blocks per encoder stage, e.g. 2,2,4,6" },
    KeySpec { key: "enc_extra_naf", default: "", doc: "NAF blocks appended per encoder stage" },
    KeySpec { key: "middle_blocks", default: "", doc: "block count at the bottleneck" },
    KeySpec { key: "dec_blocks", default: "", doc: "blocks per decoder stage" },
    KeySpec { key: "heads", default: "", doc: "output images per forward pass" },
    KeySpec { key: "gce_kernels", default: "", doc: "cascade kernel schedule, e.g. 3,3,5" },
    KeySpec { key: "merge", default: "", doc: "static | channel_cosine | kernel_cosine | kernel_mae" },
    KeySpec { key: "layer_style", default: "", doc: "dw_pw | pw_dw | standard" },
    KeySpec { key: "placement", default: "", doc: "encoder | encoder_middle | encoder_decoder | encoder_middle_decoder" },
    KeySpec { key: "expansion", default: "", doc: "x2_merge | x2 | x1" },
    KeySpec { key: "iters", default: "2000", doc: "training iterations" },
    KeySpec { key: "batch", default: "4", doc: "patches per training step" },
    KeySpec { key: "patch", default: "32", doc: "training patch size (multiple of 16)" },
    KeySpec { key: "patch_schedule", default: "", doc: "progressive sizes, e.g. 0:160,80000:192 (overrides patch)" },
    KeySpec { key: "lr_start", default: "1e-3", doc: "initial learning rate" },
    KeySpec { key: "lr_end", default: "1e-7", doc: "final learning rate" },
    KeySpec { key: "beta1", default: "0.9", doc: "AdamW first-moment decay" },
    KeySpec { key: "beta2", default: "0.9", doc: "AdamW second-moment decay" },
    KeySpec { key: "eps", default: "1e-8", doc: "AdamW denominator stabilizer" },
    KeySpec { key: "weight_decay", default: "0", doc: "decoupled weight decay" },
    KeySpec { key: "clip_norm", default: "0", doc: "global gradient-norm clip (0 disables)" },
    KeySpec { key: "eval_every", default: "200", doc: "metric log cadence in iterations" },
    KeySpec { key: "seed", default: "0", doc: "master seed for init, sampling and noise" },
    KeySpec { key: "sigma", default: "25", doc: "noise standard deviation on the 0-255 scale" },
    KeySpec { key: "clip_noise", default: "false", doc: "clamp noisy images back to [0, 1]" },
    KeySpec { key: "train_images", default: "16", doc: "synthetic pool size for training" },
    KeySpec { key: "eval_images", default: "4", doc: "held-out synthetic images" },
    KeySpec { key: "image_size", default: "96", doc: "synthetic image extent (multiple of 16)" },
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    SCHEMA
        .iter()
        .min_by_key(|spec| levenshtein(key, spec.key))
        .map(|spec| spec.key)
        .unwrap_or("preset")
}

fn check_key(key: &str) -> Result<()> {
    if SCHEMA.iter().any(|s| s.key == key) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unknown key '{key}' (nearest valid key: '{}')",
            nearest_key(key)
        )))
    }
}

/// Documented schema with defaults, for --help style output.
pub fn schema_help() -> String {
    let mut out = String::from("configuration keys (key=value per line, '#' comments):\n");
    for s in SCHEMA {
        let default = if s.default.is_empty() { "(preset)" } else { s.default };
        out.push_str(&format!("  {:<16} default {:<10} {}\n", s.key, default, s.doc));
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Resolve defaults <- preset <- file <- overrides, validating every key.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut explicit: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = file {
            for (key, value) in parse_config_file(path)? {
                explicit.insert(key, value);
            }
        }
        for (key, value) in overrides {
            check_key(key)?;
            explicit.insert(key.clone(), value.clone());
        }

        let preset = explicit
            .get("preset")
            .cloned()
            .unwrap_or_else(|| "desk".to_string());
        let base_net = preset_network(&preset)?;

        let mut values: BTreeMap<String, String> = SCHEMA
            .iter()
            .map(|s| (s.key.to_string(), s.default.to_string()))
            .collect();
        values.insert("preset".into(), preset);
        apply_network(&mut values, &base_net);
        for (key, value) in explicit {
            values.insert(key, value);
        }
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}' has malformed value '{}'", self.get(key))))
    }

    fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}' has malformed value '{}'", self.get(key))))
            })
            .collect()
    }

    fn parse_four(&self, key: &str) -> Result<[usize; 4]> {
        let v = self.parse_list(key)?;
        v.try_into()
            .map_err(|_| Error::Config(format!("key '{key}' needs exactly 4 entries")))
    }

    /// Sorted key=value lines; sufficient to replay the run.
    pub fn resolved_dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            width: self.parse("width")?,
            enc_blocks: self.parse_four("enc_blocks")?,
            enc_extra_naf: self.parse_four("enc_extra_naf")?,
            middle_blocks: self.parse("middle_blocks")?,
            dec_blocks: self.parse_four("dec_blocks")?,
            heads: self.parse("heads")?,
            gce_kernels: self.parse_list("gce_kernels")?,
            merge: parse_merge(self.get("merge"))?,
            layer_style: parse_layer_style(self.get("layer_style"))?,
            placement: parse_placement(self.get("placement"))?,
            expansion: parse_expansion(self.get("expansion"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_plan(&self) -> Result<TrainPlan> {
        let iters: u64 = self.parse("iters")?;
        let schedule = if self.get("patch_schedule").is_empty() {
            vec![(0u64, self.parse("patch")?)]
        } else {
            parse_patch_schedule(self.get("patch_schedule"))?
        };
        let clip: f64 = self.parse("clip_norm")?;
        let plan = TrainPlan {
            iters,
            batch: self.parse("batch")?,
            patch_schedule: schedule,
            lr: LrSchedule::new(self.parse("lr_start")?, self.parse("lr_end")?, iters.max(1))?,
            beta1: self.parse("beta1")?,
            beta2: self.parse("beta2")?,
            eps: self.parse("eps")?,
            weight_decay: self.parse("weight_decay")?,
            clip_norm: (clip > 0.0).then_some(clip),
            eval_every: self.parse("eval_every")?,
            seed: self.parse("seed")?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let mut nm = NoiseModel::new(self.parse("sigma")?, self.parse("seed")?)?;
        nm.clip = self.parse("clip_noise")?;
        Ok(nm)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn pool_spec(&self) -> Result<(usize, usize, usize)> {
        let train_images: usize = self.parse("train_images")?;
        let eval_images: usize = self.parse("eval_images")?;
        let size: usize = self.parse("image_size")?;
        if !size.is_multiple_of(16) || size == 0 {
            return Err(Error::Config(format!(
                "image_size {size} must be a positive multiple of 16"
            )));
        }
        Ok((train_images, eval_images, size))
    }
}

/// One key=value per line; '#' starts a comment; blank lines ignored.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: malformed line '{raw}' (expected key=value)",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        check_key(&key).map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Parse a `k=v` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' must look like key=value")))?;
    let k = k.trim().to_string();
    check_key(&k)?;
    Ok((k, v.trim().to_string()))
}

fn preset_network(name: &str) -> Result<NetworkConfig> {
    match name {
        "desk" => Ok(NetworkConfig::desk(8)),
        "sidd" => Ok(NetworkConfig::sidd()),
        "gaussian" => Ok(NetworkConfig::gaussian()),
        "gopro" => Ok(NetworkConfig::gopro()),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (expected desk, sidd, gaussian or gopro)"
        ))),
    }
}

fn apply_network(values: &mut BTreeMap<String, String>, cfg: &NetworkConfig) {
    let j = |xs: &[usize]| xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    values.insert("width".into(), cfg.width.to_string());
    values.insert("enc_blocks".into(), j(&cfg.enc_blocks));
    values.insert("enc_extra_naf".into(), j(&cfg.enc_extra_naf));
    values.insert("middle_blocks".into(), cfg.middle_blocks.to_string());
    values.insert("dec_blocks".into(), j(&cfg.dec_blocks));
    values.insert("heads".into(), cfg.heads.to_string());
    values.insert("gce_kernels".into(), j(&cfg.gce_kernels));
    values.insert("merge".into(), merge_name(cfg.merge).into());
    values.insert("layer_style".into(), layer_style_name(cfg.layer_style).into());
    values.insert("placement".into(), placement_name(cfg.placement).into());
    values.insert("expansion".into(), expansion_name(cfg.expansion).into());
}

pub fn parse_merge(s: &str) -> Result<MergeStrategy> {
    match s {
        "static" => Ok(MergeStrategy::Static),
        "channel_cosine" => Ok(MergeStrategy::Dynamic(Similarity::ChannelCosine)),
        "kernel_cosine" => Ok(MergeStrategy::Dynamic(Similarity::KernelCosine)),
        "kernel_mae" => Ok(MergeStrategy::Dynamic(Similarity::KernelMae)),
        other => Err(Error::Config(format!("unknown merge strategy '{other}'"))),
    }
}

pub fn merge_name(m: MergeStrategy) -> &'static str {
    match m {
        MergeStrategy::Static => "static",
        MergeStrategy::Dynamic(Similarity::ChannelCosine) => "channel_cosine",
        MergeStrategy::Dynamic(Similarity::KernelCosine) => "kernel_cosine",
        MergeStrategy::Dynamic(Similarity::KernelMae) => "kernel_mae",
    }
}

pub fn parse_layer_style(s: &str) -> Result<LayerStyle> {
    match s {
        "dw_pw" => Ok(LayerStyle::DwThenPw),
        "pw_dw" => Ok(LayerStyle::PwThenDw),
        "standard" => Ok(LayerStyle::Standard),
        other => Err(Error::Config(format!("unknown layer style '{other}'"))),
    }
}

pub fn layer_style_name(s: LayerStyle) -> &'static str {
    match s {
        LayerStyle::DwThenPw => "dw_pw",
        LayerStyle::PwThenDw => "pw_dw",
        LayerStyle::Standard => "standard",
    }
}

pub fn parse_placement(s: &str) -> Result<GcePlacement> {
    match s {
        "encoder" => Ok(GcePlacement::EncoderOnly),
        "encoder_middle" => Ok(GcePlacement::EncoderMiddle),
        "encoder_decoder" => Ok(GcePlacement::EncoderDecoder),
        "encoder_middle_decoder" => Ok(GcePlacement::EncoderMiddleDecoder),
        other => Err(Error::Config(format!("unknown placement '{other}'"))),
    }
}

pub fn placement_name(p: GcePlacement) -> &'static str {
    match p {
        GcePlacement::EncoderOnly => "encoder",
        GcePlacement::EncoderMiddle => "encoder_middle",
        GcePlacement::EncoderDecoder => "encoder_decoder",
        GcePlacement::EncoderMiddleDecoder => "encoder_middle_decoder",
    }
}

pub fn parse_expansion(s: &str) -> Result<Expansion> {
    match s {
        "x2_merge" => Ok(Expansion::X2Merge),
        "x2" => Ok(Expansion::X2),
        "x1" => Ok(Expansion::X1),
        other => Err(Error::Config(format!("unknown expansion '{other}'"))),
    }
}

pub fn expansion_name(e: Expansion) -> &'static str {
    match e {
        Expansion::X2Merge => "x2_merge",
        Expansion::X2 => "x2",
        Expansion::X1 => "x1",
    }
}

fn parse_patch_schedule(s: &str) -> Result<Vec<(u64, usize)>> {
    s.split(',')
        .map(|tok| {
            let (start, size) = tok
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad patch_schedule entry '{tok}'")))?;
            let start = start
                .parse()
                .map_err(|_| Error::Config(format!("bad patch_schedule entry '{tok}'")))?;
            let size = size
                .parse()
                .map_err(|_| Error::Config(format!("bad patch_schedule entry '{tok}'")))?;
            Ok((start, size))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cgnet-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn preset_width_is_retained_when_explicit() {
        let f = tmpfile("sidd.cfg", "preset=sidd\nwidth=60\n");
        let cfg = RunConfig::resolve(Some(&f), &[]).unwrap();
        let net = cfg.network_config().unwrap();
        assert_eq!(net.width, 60);
        assert_eq!(net.enc_blocks, [2, 2, 4, 6]);
    }

    #[test]
    fn empty_file_gives_preset_defaults() {
        let f = tmpfile("empty.cfg", "# nothing but comments\n\n");
        let cfg = RunConfig::resolve(Some(&f), &[("preset".into(), "gopro".into())]).unwrap();
        let net = cfg.network_config().unwrap();
        assert_eq!(net.width, 62);
        assert_eq!(net.enc_extra_naf, [0, 0, 0, 25]);
        assert_eq!(net.heads, 4);
    }

    #[test]
    fn unknown_key_names_nearest_match() {
        let f = tmpfile("typo.cfg", "widht=60\n");
        let err = RunConfig::resolve(Some(&f), &[]).unwrap_err().to_string();
        assert!(err.contains("widht"), "{err}");
        assert!(err.contains("width"), "{err}");
        assert!(err.contains(":1"), "should carry the line number: {err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = tmpfile("broken.cfg", "width=8\nsigma 25\n");
        let err = RunConfig::resolve(Some(&f), &[]).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let f = tmpfile("base.cfg", "sigma=25\n");
        let cfg = RunConfig::resolve(Some(&f), &[("sigma".into(), "50".into())]).unwrap();
        assert_eq!(cfg.noise_model().unwrap().sigma, 50.0);
    }

    #[test]
    fn dump_replays_the_run() {
        let cfg = RunConfig::resolve(None, &[("width".into(), "12".into())]).unwrap();
        let dump = cfg.resolved_dump();
        let f = tmpfile("replay.cfg", &dump);
        let replay = RunConfig::resolve(Some(&f), &[]).unwrap();
        assert_eq!(cfg.resolved_dump(), replay.resolved_dump());
    }

    #[test]
    fn patch_schedule_parsing() {
        let cfg = RunConfig::resolve(
            None,
            &[
                ("patch_schedule".into(), "0:32,1000:48".into()),
                ("iters".into(), "2000".into()),
            ],
        )
        .unwrap();
        let plan = cfg.train_plan().unwrap();
        assert_eq!(plan.patch_schedule, vec![(0, 32), (1000, 48)]);
    }
}
