//! The training loop: sample noisy patches, minimize the negative-PSNR loss
//! with AdamW under cosine annealing, and log metrics at a fixed cadence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::backward;
use crate::data::{add_gaussian_noise, sample_batch, NoiseModel, SynthPool};
use crate::error::{Error, Result};
use crate::metrics::{neg_psnr_loss, psnr};
use crate::network::Model;
use crate::optim::{adamw_step, clear_grads, clip_global_norm, cosine_lr, AdamWState, LrSchedule};
use crate::tensor::with_no_grad;

#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub iters: u64,
    pub batch: usize,
    /// (start_iteration, patch_size) pairs; the entry with the largest start
    /// not exceeding the current iteration is active.
    pub patch_schedule: Vec<(u64, usize)>,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub eval_every: u64,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.patch_schedule.is_empty() {
            return Err(Error::Config("patch schedule must not be empty".into()));
        }
        if self.patch_schedule[0].0 != 0 {
            return Err(Error::Config("patch schedule must start at iteration 0".into()));
        }
        let mut prev = None;
        for &(start, size) in &self.patch_schedule {
            if size % 16 != 0 {
                return Err(Error::Config(format!(
                    "patch size {size} must be a multiple of 16"
                )));
            }
            if let Some(p) = prev {
                if start <= p {
                    return Err(Error::Config(
                        "patch schedule iterations must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(start);
        }
        Ok(())
    }

    pub fn patch_at(&self, iter: u64) -> usize {
        let mut size = self.patch_schedule[0].1;
        for &(start, s) in &self.patch_schedule {
            if start <= iter {
                size = s;
            }
        }
        size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub eval_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// Tab-separated iter/lr/loss/psnr, one line per event.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iter\tlr\tloss\tpsnr\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:.8e}\t{:.6}\t{:.4}\n", r.iter, r.lr, r.loss, r.eval_psnr));
        }
        out
    }
}

/// Mean PSNR of the model's restorations over fixed noisy copies of the
/// evaluation pool. Noise seeds derive from the plan seed so the same
/// degraded images are scored at every cadence point.
pub fn evaluate(model: &Model<f32>, pool: &SynthPool, noise: &NoiseModel, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, clean) in pool.images.iter().enumerate() {
        let nm = noise.with_seed(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
        let noisy = add_gaussian_noise(clean, &nm)?;
        let restored = with_no_grad(|| model.forward_mean(&noisy))?;
        total += psnr(&restored, clean, 1.0)?;
    }
    Ok(total / pool.images.len() as f64)
}

/// Mean PSNR of the noisy inputs themselves; the baseline training must beat.
pub fn noisy_baseline(pool: &SynthPool, noise: &NoiseModel, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, clean) in pool.images.iter().enumerate() {
        let nm = noise.with_seed(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
        let noisy = add_gaussian_noise(clean, &nm)?;
        total += psnr(&noisy, clean, 1.0)?;
    }
    Ok(total / pool.images.len() as f64)
}

/// Run the plan. Weights update in place; the returned log holds one row per
/// eval cadence point. Fully deterministic per (plan.seed, noise.seed).
pub fn train(
    model: &Model<f32>,
    plan: &TrainPlan,
    noise: &NoiseModel,
    train_pool: &SynthPool,
    eval_pool: &SynthPool,
) -> Result<TrainLog> {
    plan.validate()?;
    let params = model.trainable_params();
    let mut state = AdamWState::new(&params, plan.beta1, plan.beta2, plan.eps, plan.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut log = TrainLog::default();

    for iter in 0..plan.iters {
        let lr = cosine_lr(iter, &plan.lr)?;
        let patch = plan.patch_at(iter);
        let clean = sample_batch(train_pool, plan.batch, patch, &mut rng)?;
        let nm = noise.with_seed(rng.gen());
        let noisy = add_gaussian_noise(&clean, &nm)?;

        let preds = model.forward(&noisy)?;
        let loss = neg_psnr_loss(&preds, &clean)?;
        let loss_v = loss.scalar_value()? as f64;

        clear_grads(&params);
        backward(&loss)?;
        if let Some(max_norm) = plan.clip_norm {
            clip_global_norm(&params, max_norm);
        }
        adamw_step(&params, &mut state, lr)?;

        let done = iter + 1 == plan.iters;
        if (plan.eval_every > 0 && (iter + 1) % plan.eval_every == 0) || done {
            let eval_psnr = evaluate(model, eval_pool, noise, plan.seed)?;
            log.rows.push(TrainLogRow {
                iter: iter + 1,
                lr,
                loss: loss_v,
                eval_psnr,
            });
        }
    }
    Ok(log)
}
