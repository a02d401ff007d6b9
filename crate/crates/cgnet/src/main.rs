use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgnet::config::{parse_override, schema_help, RunConfig};
use cgnet::data::{add_gaussian_noise, synth_image, NoiseModel, SynthPool};
use cgnet::error::{Error, Result};
use cgnet::metrics::{psnr, ssim};
use cgnet::network::{build, Model, StageId};
use cgnet::profiler::{count_macs, count_params, dump_context_maps};
use cgnet::train::{noisy_baseline, train};
use cgnet::{netpbm, with_no_grad};

/// CascadedGaze image restoration: training, inference, metrics, profiling.
#[derive(Parser)]
#[command(name = "cgnet", version, about, after_help = schema_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (key=value lines, '#' comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set width=16. Repeatable; beats the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set preset=<name>.
    #[arg(long)]
    preset: Option<String>,
    /// Shorthand for --set seed=<n>.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(("preset".to_string(), p.clone()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".to_string(), s.to_string()));
        }
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        let cfg = RunConfig::resolve(self.config.as_deref(), &overrides)?;
        print!("# resolved configuration\n{}# end configuration\n", cfg.resolved_dump());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic noisy patches; writes checkpoint and metric log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for model.ckpt and metrics.tsv.
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Restore PPM image(s) with a trained model.
    Denoise {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image or directory of .ppm files (never modified).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "runs/denoise")]
        out_dir: PathBuf,
        /// Clean reference image or directory; prints PSNR when given.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// PSNR/SSIM between two directories of PPM images matched by name.
    Eval {
        /// Directory of restored/candidate images.
        #[arg(long)]
        candidate: PathBuf,
        /// Directory of clean reference images.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Analytic MACs and parameter counts for a configuration.
    Profile {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input resolution (square), must be a multiple of 16.
        #[arg(long, default_value_t = 256)]
        res: usize,
        /// Emit comma-separated rows instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Export grayscale local/middle/global context maps of one block.
    Visualize {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to visualize; fresh seeded weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input PPM; a synthetic image is generated when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Stage hosting the block: enc0..enc3, middle or dec0..dec3.
        #[arg(long, default_value = "enc0")]
        stage: String,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value = "runs/contexts")]
        out_dir: PathBuf,
    },
    /// Write clean/noisy synthetic image pairs.
    SynthData {
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Square image extent.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/synth")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; fold every usage problem onto exit 1.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out_dir } => cmd_train(&config, &out_dir),
        Command::Denoise {
            config,
            checkpoint,
            input,
            out_dir,
            reference,
        } => cmd_denoise(&config, &checkpoint, &input, &out_dir, reference.as_deref()),
        Command::Eval { candidate, reference } => cmd_eval(&candidate, &reference),
        Command::Profile { config, res, csv } => cmd_profile(&config, res, csv),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Visualize {
            config,
            checkpoint,
            input,
            stage,
            block,
            out_dir,
        } => cmd_visualize(&config, checkpoint.as_deref(), input.as_deref(), &stage, block, &out_dir),
        Command::SynthData {
            count,
            size,
            sigma,
            seed,
            out_dir,
        } => cmd_synth_data(count, size, sigma, seed, &out_dir),
    }
}

fn cmd_train(config: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let net = cfg.network_config()?;
    let plan = cfg.train_plan()?;
    let noise = cfg.noise_model()?;
    let (train_images, eval_images, image_size) = cfg.pool_spec()?;
    let seed = cfg.seed()?;

    let train_pool = SynthPool::generate(seed.wrapping_add(1), train_images, image_size, image_size)?;
    let eval_pool = SynthPool::generate(seed.wrapping_add(2), eval_images, image_size, image_size)?;
    let model = build::<f32>(&net, seed)?;

    let baseline = noisy_baseline(&eval_pool, &noise, plan.seed)?;
    println!("noisy-input baseline: {baseline:.3} dB over {eval_images} held-out images");

    let log = train(&model, &plan, &noise, &train_pool, &eval_pool)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("model.ckpt");
    model.save(&ckpt)?;
    let metrics_path = out_dir.join("metrics.tsv");
    std::fs::write(&metrics_path, log.to_tsv())?;

    if let Some(last) = log.rows.last() {
        println!(
            "iter {}: loss {:.4}, eval psnr {:.3} dB ({:+.3} dB vs noisy input)",
            last.iter,
            last.loss,
            last.eval_psnr,
            last.eval_psnr - baseline
        );
    }
    println!("checkpoint: {}", ckpt.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

fn ppm_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::ImageFormat(format!(
                "no .ppm files under {}",
                path.display()
            )));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn cmd_denoise(
    config: &ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
    reference: Option<&Path>,
) -> Result<()> {
    let cfg = config.resolve()?;
    let net = cfg.network_config()?;
    let model = Model::load(&net, checkpoint)?;
    std::fs::create_dir_all(out_dir)?;

    let inputs = ppm_inputs(input)?;
    let mut scores = Vec::new();
    for file in &inputs {
        let image = netpbm::read_ppm(file)?;
        let restored = with_no_grad(|| model.forward_mean(&image))?;
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "image.ppm".into());
        let out_path = out_dir.join(format!("restored_{name}"));
        netpbm::write_ppm(&out_path, &restored)?;
        if let Some(refdir) = reference {
            let ref_path = if refdir.is_dir() { refdir.join(&name) } else { refdir.to_path_buf() };
            let clean = netpbm::read_ppm(&ref_path)?;
            let db = psnr(&restored, &clean, 1.0)?;
            println!("{name}: psnr {db:.3} dB -> {}", out_path.display());
            scores.push(db);
        } else {
            println!("{name} -> {}", out_path.display());
        }
    }
    if !scores.is_empty() {
        println!(
            "mean psnr over {} image(s): {:.3} dB",
            scores.len(),
            scores.iter().sum::<f64>() / scores.len() as f64
        );
    }
    Ok(())
}

fn cmd_eval(candidate: &Path, reference: &Path) -> Result<()> {
    let files = ppm_inputs(candidate)?;
    let mut psnr_total = 0.0;
    let mut ssim_total = 0.0;
    let mut count = 0usize;
    println!("{:<28} {:>10} {:>8}", "image", "psnr(dB)", "ssim");
    for file in &files {
        let name = file.file_name().unwrap_or_default().to_string_lossy().to_string();
        let ref_path = reference.join(&name);
        if !ref_path.exists() {
            println!("{name:<28} {:>10} {:>8}", "-", "missing");
            continue;
        }
        let a = netpbm::read_ppm(file)?;
        let b = netpbm::read_ppm(&ref_path)?;
        let p = psnr(&a, &b, 1.0)?;
        let s = ssim(&a, &b)?;
        println!("{name:<28} {p:>10.3} {s:>8.4}");
        psnr_total += p;
        ssim_total += s;
        count += 1;
    }
    if count == 0 {
        return Err(Error::ImageFormat("no image pairs matched by name".into()));
    }
    println!(
        "{:<28} {:>10.3} {:>8.4}",
        format!("mean over {count}"),
        psnr_total / count as f64,
        ssim_total / count as f64
    );
    Ok(())
}

fn cmd_profile(config: &ConfigArgs, res: usize, csv: bool) -> Result<()> {
    let cfg = config.resolve()?;
    let net = cfg.network_config()?;
    let report = count_macs(&net, res, res)?;
    if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_table());
    }
    debug_assert_eq!(report.total_params(), count_params(&net)?);
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let report = cgnet::gradcheck::run_suite(seed)?;
    for case in &report.cases {
        println!(
            "{} {:<32} max rel err {:.3e}",
            if case.pass { "PASS" } else { "FAIL" },
            case.name,
            case.max_rel_err
        );
    }
    let failed = report.cases.iter().filter(|c| !c.pass).count();
    println!(
        "gradcheck: {}/{} cases passed (seed {seed})",
        report.cases.len() - failed,
        report.cases.len()
    );
    if failed > 0 {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(())
}

fn cmd_visualize(
    config: &ConfigArgs,
    checkpoint: Option<&Path>,
    input: Option<&Path>,
    stage: &str,
    block: usize,
    out_dir: &Path,
) -> Result<()> {
    let cfg = config.resolve()?;
    let net = cfg.network_config()?;
    let seed = cfg.seed()?;
    let model = match checkpoint {
        Some(path) => Model::load(&net, path)?,
        None => build::<f32>(&net, seed)?,
    };
    let image = match input {
        Some(path) => netpbm::read_ppm(path)?,
        None => synth_image(seed.wrapping_add(3), 96, 96)?,
    };
    let stage: StageId = stage.parse()?;
    let written = dump_context_maps(&model, &image, stage, block, out_dir)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_synth_data(count: usize, size: usize, sigma: f64, seed: u64, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let noise = NoiseModel::new(sigma, seed)?;
    for i in 0..count {
        let clean = synth_image(seed.wrapping_add(i as u64), size, size)?;
        let noisy = add_gaussian_noise(&clean, &noise.with_seed(seed.wrapping_add(1000 + i as u64)))?;
        let clean_path = out_dir.join(format!("clean_{i:03}.ppm"));
        let noisy_path = out_dir.join(format!("noisy_{i:03}.ppm"));
        netpbm::write_ppm(&clean_path, &clean)?;
        netpbm::write_ppm(&noisy_path, &noisy)?;
    }
    println!("wrote {count} clean/noisy pairs under {}", out_dir.display());
    Ok(())
}
