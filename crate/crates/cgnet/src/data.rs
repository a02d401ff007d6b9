//! Synthetic clean-image generation, Gaussian noise, and patch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Additive white Gaussian noise with `sigma` on the 0-255 scale. Noise is
/// drawn as N(0, (sigma/255)^2) in normalized [0, 1] space and is not clipped
/// unless `clip` is set, so the sigma <-> PSNR closed form stays exact.
#[derive(Clone, Copy, Debug)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
    pub clip: bool,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::arg("noise_model", "sigma must be non-negative"));
        }
        Ok(NoiseModel {
            sigma,
            seed,
            clip: false,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        NoiseModel { seed, ..*self }
    }
}

pub fn add_gaussian_noise(img: &Tensor<f32>, nm: &NoiseModel) -> Result<Tensor<f32>> {
    if nm.sigma < 0.0 {
        return Err(Error::arg("add_gaussian_noise", "sigma must be non-negative"));
    }
    if nm.sigma == 0.0 && !nm.clip {
        return Ok(img.detach());
    }
    let sd = nm.sigma / 255.0;
    let normal = Normal::new(0.0f64, sd).map_err(|e| Error::arg("add_gaussian_noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let data = img
        .data()
        .iter()
        .map(|v| {
            let noisy = *v as f64 + normal.sample(&mut rng);
            let noisy = if nm.clip { noisy.clamp(0.0, 1.0) } else { noisy };
            noisy as f32
        })
        .collect();
    Tensor::from_vec(img.shape(), data)
}

/// Deterministic procedural clean image: smooth gradients, a few rectangles
/// and ellipses, and band-limited sinusoid texture, clamped to [0, 1].
pub fn synth_image(seed: u64, h: usize, w: usize) -> Result<Tensor<f32>> {
    if h == 0 || w == 0 {
        return Err(Error::arg("synth_image", "extents must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = vec![vec![0.0f64; h * w]; 3];

    let base: [f64; 3] = [
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
    ];
    let gdir = rng.gen_range(0.0..std::f64::consts::TAU);
    let gamp: [f64; 3] = [
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.25..0.25),
    ];
    let (gc, gs) = (gdir.cos(), gdir.sin());
    let diag = ((h * h + w * w) as f64).sqrt();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 * gc + y as f64 * gs) / diag;
                planes[c][y * w + x] = base[c] + gamp[c] * t;
            }
        }
    }

    // Band-limited texture: a few low-frequency sinusoids.
    let waves = rng.gen_range(2..=4);
    for _ in 0..waves {
        let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / diag;
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = [
            rng.gen_range(0.0..0.08),
            rng.gen_range(0.0..0.08),
            rng.gen_range(0.0..0.08),
        ];
        let (ct, st) = (theta.cos(), theta.sin());
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 * ct + y as f64 * st;
                    planes[c][y * w + x] += amp[c] * (freq * u + phase).sin();
                }
            }
        }
    }

    let rects = rng.gen_range(2..=5);
    for _ in 0..rects {
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        let rw = rng.gen_range(1..=w.div_ceil(2));
        let rh = rng.gen_range(1..=h.div_ceil(2));
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let alpha = rng.gen_range(0.5..1.0);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                for c in 0..3 {
                    let p = &mut planes[c][y * w + x];
                    *p = *p * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }

    let ellipses = rng.gen_range(1..=3);
    for _ in 0..ellipses {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(1.0..(w as f64 / 2.0).max(1.5));
        let ry = rng.gen_range(1.0..(h as f64 / 2.0).max(1.5));
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let alpha = rng.gen_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    for c in 0..3 {
                        let p = &mut planes[c][y * w + x];
                        *p = *p * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(3 * h * w);
    for plane in &planes {
        data.extend(plane.iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// A fixed pool of synthetic clean images acting as the dataset.
pub struct SynthPool {
    pub images: Vec<Tensor<f32>>,
}

impl SynthPool {
    pub fn generate(seed: u64, count: usize, h: usize, w: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count)
            .map(|_| synth_image(rng.gen(), h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthPool { images })
    }
}

/// Copy a (size x size) crop starting at (y0, x0) out of a single image.
pub fn crop(img: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if y0 + size > s.h || x0 + size > s.w {
        return Err(Error::arg("crop", "crop exceeds image bounds"));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(s.n * s.c * size * size);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..size {
                let row = s.index(n, c, y0 + y, x0);
                out.extend_from_slice(&d[row..row + size]);
            }
        }
    }
    drop(d);
    Tensor::from_vec(Shape::new(s.n, s.c, size, size), out)
}

/// Draw `batch` random crops from the pool and stack them along N.
pub fn sample_batch(
    pool: &SynthPool,
    batch: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    if pool.images.is_empty() {
        return Err(Error::arg("sample_batch", "empty image pool"));
    }
    let mut data = Vec::with_capacity(batch * 3 * patch * patch);
    for _ in 0..batch {
        let img = &pool.images[rng.gen_range(0..pool.images.len())];
        let s = img.shape();
        if s.h < patch || s.w < patch {
            return Err(Error::arg(
                "sample_batch",
                format!("pool image {}x{} smaller than patch {}", s.h, s.w, patch),
            ));
        }
        let y0 = rng.gen_range(0..=s.h - patch);
        let x0 = rng.gen_range(0..=s.w - patch);
        let patch_t = crop(img, y0, x0, patch)?;
        data.extend_from_slice(&patch_t.data());
    }
    Tensor::from_vec(Shape::new(batch, 3, patch, patch), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let img = synth_image(1, 24, 24).unwrap();
        let nm = NoiseModel::new(0.0, 5).unwrap();
        let noisy = add_gaussian_noise(&img, &nm).unwrap();
        assert_eq!(&*noisy.data(), &*img.data());
    }

    #[test]
    fn noise_std_matches_sigma() {
        // One million samples: empirical std within 1% of 25/255.
        let img = Tensor::from_vec(Shape::new(1, 1, 1000, 1000), vec![0.5; 1_000_000]).unwrap();
        let nm = NoiseModel::new(25.0, 99).unwrap();
        let noisy = add_gaussian_noise(&img, &nm).unwrap();
        let mut mean = 0.0f64;
        for v in noisy.data().iter() {
            mean += (*v - 0.5) as f64;
        }
        mean /= 1e6;
        let mut var = 0.0f64;
        for v in noisy.data().iter() {
            let d = (*v - 0.5) as f64 - mean;
            var += d * d;
        }
        var /= 1e6;
        let std = var.sqrt();
        let target = 25.0 / 255.0;
        assert!((std - target).abs() / target < 0.01, "std {std} vs {target}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let img = synth_image(2, 32, 32).unwrap();
        let nm = NoiseModel::new(25.0, 1234).unwrap();
        let a = add_gaussian_noise(&img, &nm).unwrap();
        let b = add_gaussian_noise(&img, &nm).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_image(7, 40, 56).unwrap();
        let b = synth_image(7, 40, 56).unwrap();
        assert_eq!(&*a.data(), &*b.data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn distinct_seeds_differ_measurably() {
        let a = synth_image(100, 48, 48).unwrap();
        let b = synth_image(101, 48, 48).unwrap();
        let mad: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.numel() as f64;
        assert!(mad > 0.01, "mean absolute difference {mad} too small");
    }

    #[test]
    fn crop_matches_source_region() {
        let img = synth_image(3, 20, 20).unwrap();
        let c = crop(&img, 4, 6, 8).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 3, 8, 8));
        assert_eq!(c.at(0, 1, 0, 0), img.at(0, 1, 4, 6));
        assert_eq!(c.at(0, 2, 7, 7), img.at(0, 2, 11, 13));
    }
}
