//! Finite-difference gradient oracle and the gradcheck suite the CLI exposes.
//!
//! The oracle runs central differences in double precision:
//! (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per element. Gradcheck compares
//! it against `backward` with relative error |a - b| / max(|a|, |b|, 1e-3);
//! the floor keeps finite-difference roundoff from dominating near-zero
//! gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autograd::backward;
use crate::blocks::{cg_block_forward, naf_block_forward, CgBlockParams, NafBlockParams};
use crate::error::{Error, Result};
use crate::gce::{GceConfig, LayerStyle, MergeStrategy};
use crate::ops::{self, Conv2dParams, ConvKind, LayerNormParams, ScaParams};
use crate::tensor::{Shape, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(Error::arg("finite_diff_grad", "eps must be positive"));
    }
    let base = x.data().clone();
    let probe = Tensor::from_vec(x.shape(), base.clone())?;
    let eval = |data: Vec<f64>| -> Result<f64> {
        probe.set_data(data)?;
        let out = f(&probe)?;
        let v = out.scalar_value()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        Ok(v)
    };
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let fp = eval(plus)?;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fm = eval(minus)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Compare `backward`-computed input gradients against the oracle for a
/// scalar-valued function of one tensor.
pub fn check_input_grad<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::param(x.shape(), x.data().clone())?;
    let loss = f(&leaf)?;
    backward(&loss)?;
    let analytic = leaf
        .grad()
        .ok_or(Error::NoGradPath)?;
    let numeric = finite_diff_grad(&f, x, DEFAULT_FD_EPS)?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Compare gradients on an arbitrary parameter tensor that `f` closes over.
pub fn check_param_grad<F>(f: F, param: &Tensor<f64>) -> Result<f64>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    param.clear_grad();
    let loss = f()?;
    backward(&loss)?;
    let analytic = param.grad().ok_or(Error::NoGradPath)?;

    let base = param.data().clone();
    let mut numeric = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += DEFAULT_FD_EPS;
        param.set_data(plus)?;
        let fp = f()?.scalar_value()?;
        let mut minus = base.clone();
        minus[i] -= DEFAULT_FD_EPS;
        param.set_data(minus)?;
        let fm = f()?.scalar_value()?;
        numeric[i] = (fp - fm) / (2.0 * DEFAULT_FD_EPS);
    }
    param.set_data(base)?;
    Ok(max_rel_err(&analytic, &numeric))
}

pub struct GradcheckCase {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("finite random tensor")
}

fn record(report: &mut GradcheckReport, name: impl Into<String>, err: f64) {
    report.cases.push(GradcheckCase {
        name: name.into(),
        pass: err < GRADCHECK_TOLERANCE,
        max_rel_err: err,
    });
}

/// Gradcheck every primitive op and the composed CG/NAF blocks at small shapes.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport { cases: Vec::new() };

    let s = Shape::new(2, 4, 5, 6);
    let x = rand_tensor(&mut rng, s);
    let y = rand_tensor(&mut rng, s);

    record(
        &mut report,
        "add",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::add(t, &y)?, &ops::add(t, &y)?)?), &x)?,
    );
    record(
        &mut report,
        "sub",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::sub(t, &y)?, &ops::sub(t, &y)?)?), &x)?,
    );
    record(
        &mut report,
        "mul",
        check_input_grad(|t| ops::sum_all(&ops::mul(t, &y)?), &x)?,
    );
    record(
        &mut report,
        "mul_self",
        check_input_grad(|t| ops::sum_all(&ops::mul(t, t)?), &x)?,
    );

    let scale = rand_tensor(&mut rng, Shape::new(1, 4, 1, 1));
    record(
        &mut report,
        "mul_bcast.x",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::mul_bcast(t, &scale)?, &ops::mul_bcast(t, &scale)?)?), &x)?,
    );
    record(
        &mut report,
        "mul_bcast.scale",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::mul_bcast(&x, t)?, &y)?), &scale)?,
    );

    record(
        &mut report,
        "affine",
        check_input_grad(|t| ops::sum_all(&ops::affine(&ops::mul(t, t)?, 2.5, -0.25)?), &x)?,
    );
    let positive = {
        let data = x.data().iter().map(|v| v.abs() + 0.5).collect();
        Tensor::from_vec(s, data)?
    };
    record(
        &mut report,
        "ln",
        check_input_grad(|t| ops::sum_all(&ops::ln(t)?), &positive)?,
    );
    record(
        &mut report,
        "gelu",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::gelu(t)?, &y)?), &x)?,
    );
    record(
        &mut report,
        "mean_per_image",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::mean_per_image(&ops::mul(t, t)?)?, &ops::mean_per_image(&y)?)?), &x)?,
    );

    for kind in [ConvKind::Standard, ConvKind::Depthwise, ConvKind::Pointwise] {
        let (k, stride, padding, out_c) = match kind {
            ConvKind::Standard => (3, 1, 1, 3),
            ConvKind::Depthwise => (2, 2, 0, 4),
            ConvKind::Pointwise => (1, 1, 0, 5),
        };
        let conv = Conv2dParams::<f64>::init(kind, 4, out_c, k, stride, padding, &mut rng);
        let name = format!("conv2d.{:?}", kind).to_lowercase();
        record(
            &mut report,
            format!("{name}.input"),
            check_input_grad(|t| ops::sum_all(&ops::mul(&ops::conv2d(t, &conv)?, &ops::conv2d(t, &conv)?)?), &x)?,
        );
        record(
            &mut report,
            format!("{name}.weight"),
            check_param_grad(
                || ops::sum_all(&ops::mul(&ops::conv2d(&x, &conv)?, &ops::conv2d(&x, &conv)?)?),
                &conv.weight,
            )?,
        );
        record(
            &mut report,
            format!("{name}.bias"),
            check_param_grad(
                || ops::sum_all(&ops::mul(&ops::conv2d(&x, &conv)?, &ops::conv2d(&x, &conv)?)?),
                conv.bias.as_ref().unwrap(),
            )?,
        );
    }

    let ln_params = {
        let gamma = Tensor::param(Shape::new(1, 4, 1, 1), (0..4).map(|_| rng.gen_range(0.5..1.5)).collect())?;
        let beta = Tensor::param(Shape::new(1, 4, 1, 1), (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
        LayerNormParams { gamma, beta }
    };
    record(
        &mut report,
        "channel_layer_norm.input",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::channel_layer_norm(t, &ln_params)?, &y)?),
            &x,
        )?,
    );
    record(
        &mut report,
        "channel_layer_norm.gamma",
        check_param_grad(
            || ops::sum_all(&ops::mul(&ops::channel_layer_norm(&x, &ln_params)?, &y)?),
            &ln_params.gamma,
        )?,
    );
    record(
        &mut report,
        "channel_layer_norm.beta",
        check_param_grad(
            || ops::sum_all(&ops::mul(&ops::channel_layer_norm(&x, &ln_params)?, &y)?),
            &ln_params.beta,
        )?,
    );

    let gate_target = rand_tensor(&mut rng, Shape::new(2, 2, 5, 6));
    record(
        &mut report,
        "simple_gate",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::simple_gate(t)?, &gate_target)?), &x)?,
    );

    let sca_params = ScaParams::<f64>::init(4, &mut rng);
    record(
        &mut report,
        "sca.input",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::sca(t, &sca_params)?, &y)?), &x)?,
    );
    record(
        &mut report,
        "sca.weight",
        check_param_grad(
            || ops::sum_all(&ops::mul(&ops::sca(&x, &sca_params)?, &y)?),
            &sca_params.weight,
        )?,
    );

    record(
        &mut report,
        "global_avg_pool",
        check_input_grad(|t| ops::sum_all(&ops::mul(&ops::global_avg_pool(&ops::mul(t, t)?)?, &ops::global_avg_pool(&y)?)?), &x)?,
    );
    let resize_target = rand_tensor(&mut rng, Shape::new(2, 4, 8, 9));
    record(
        &mut report,
        "nearest_resize",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::nearest_resize(t, 8, 9)?, &resize_target)?),
            &x,
        )?,
    );

    let shuffle_in = rand_tensor(&mut rng, Shape::new(1, 8, 3, 3));
    let shuffle_target = rand_tensor(&mut rng, Shape::new(1, 2, 6, 6));
    record(
        &mut report,
        "pixel_shuffle",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::pixel_shuffle(t, 2)?, &shuffle_target)?),
            &shuffle_in,
        )?,
    );
    let unshuffle_in = rand_tensor(&mut rng, Shape::new(2, 4, 4, 6));
    let unshuffle_target = rand_tensor(&mut rng, Shape::new(2, 16, 2, 3));
    record(
        &mut report,
        "pixel_unshuffle",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::pixel_unshuffle(t, 2)?, &unshuffle_target)?),
            &unshuffle_in,
        )?,
    );

    let concat_other = rand_tensor(&mut rng, Shape::new(2, 3, 5, 6));
    let concat_target = rand_tensor(&mut rng, Shape::new(2, 7, 5, 6));
    record(
        &mut report,
        "concat_channels",
        check_input_grad(
            |t| {
                ops::sum_all(&ops::mul(
                    &ops::concat_channels(&[t.clone(), concat_other.clone()])?,
                    &concat_target,
                )?)
            },
            &x,
        )?,
    );

    let merge_target = rand_tensor(&mut rng, Shape::new(2, 2, 5, 6));
    record(
        &mut report,
        "merge_pairs",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::merge_pairs(t, &[(0, 3), (2, 1)])?, &merge_target)?),
            &x,
        )?,
    );
    record(
        &mut report,
        "slice_c",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::slice_c(t, 1, 2)?, &merge_target)?),
            &x,
        )?,
    );
    let slice_n_target = rand_tensor(&mut rng, Shape::new(1, 4, 5, 6));
    record(
        &mut report,
        "slice_n",
        check_input_grad(
            |t| ops::sum_all(&ops::mul(&ops::slice_n(t, 1, 1)?, &slice_n_target)?),
            &x,
        )?,
    );

    // Composed blocks at small shapes. Residual scales are randomized so the
    // mixer and FFN paths both carry gradient.
    let cg_cfg = GceConfig {
        kernels: vec![3, 3],
        channels: 4,
        layer_style: LayerStyle::DwThenPw,
        merge: MergeStrategy::Static,
    };
    let mut cg = CgBlockParams::<f64>::init(4, &cg_cfg, crate::blocks::Expansion::X2Merge, &mut rng);
    randomize_residual_scales(&mut cg.beta, &mut rng);
    randomize_residual_scales(&mut cg.gamma, &mut rng);
    let cg_input = rand_tensor(&mut rng, Shape::new(1, 4, 6, 6));
    record(
        &mut report,
        "cg_block.input",
        check_input_grad(|t| ops::sum_all(&cg_block_forward(t, &cg)?), &cg_input)?,
    );
    record(
        &mut report,
        "cg_block.expand.weight",
        check_param_grad(
            || ops::sum_all(&cg_block_forward(&cg_input, &cg)?),
            &cg.expand.weight,
        )?,
    );
    record(
        &mut report,
        "cg_block.fuser.reduce.weight",
        check_param_grad(
            || ops::sum_all(&cg_block_forward(&cg_input, &cg)?),
            &cg.fuser.reduce.weight,
        )?,
    );
    record(
        &mut report,
        "cg_block.gce.dw1.weight",
        check_param_grad(
            || ops::sum_all(&cg_block_forward(&cg_input, &cg)?),
            &cg.gce.layers[0].primary.weight,
        )?,
    );

    let mut naf = NafBlockParams::<f64>::init(4, &mut rng);
    randomize_residual_scales(&mut naf.beta, &mut rng);
    randomize_residual_scales(&mut naf.gamma, &mut rng);
    let naf_input = rand_tensor(&mut rng, Shape::new(1, 4, 8, 8));
    record(
        &mut report,
        "naf_block.input",
        check_input_grad(|t| ops::sum_all(&naf_block_forward(t, &naf)?), &naf_input)?,
    );
    record(
        &mut report,
        "naf_block.pw1.weight",
        check_param_grad(
            || ops::sum_all(&naf_block_forward(&naf_input, &naf)?),
            &naf.pw1.weight,
        )?,
    );

    Ok(report)
}

fn randomize_residual_scales(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng) {
    let data = (0..t.numel()).map(|_| rng.gen_range(0.2..1.0)).collect();
    t.set_data(data).expect("residual scale data");
}
