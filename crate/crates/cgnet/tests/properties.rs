//! Property tests for the op-level invariants: shape laws, linearity,
//! inverse pairs and constancy preservation.

use proptest::prelude::*;

use cgnet::gce::{dynamic_merge, gce_layer_size, static_merge, Similarity};
use cgnet::ops::{self, Conv2dParams, ConvKind};
use cgnet::{Shape, Tensor};

fn tensor_strategy(n: usize, c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * c * h * w)
        .prop_map(move |data| Tensor::from_vec(Shape::new(n, c, h, w), data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // The general conv shape law, checked against the actual op output for
    // every kind over randomized geometry.
    #[test]
    fn conv_output_obeys_the_shape_law(
        h in 1usize..12,
        w in 1usize..12,
        k in 1usize..5,
        stride in 1usize..4,
        padding in 0usize..3,
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = 2;
        let padded_h = h + 2 * padding;
        let padded_w = w + 2 * padding;
        prop_assume!(padded_h >= k && padded_w >= k);
        let x_data: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.17).sin()).collect();
        let x = Tensor::from_vec(Shape::new(1, c, h, w), x_data).unwrap();
        for kind in [ConvKind::Standard, ConvKind::Depthwise, ConvKind::Pointwise] {
            let (kk, ss, pp) = match kind {
                ConvKind::Pointwise => (1, 1, 0),
                _ => (k, stride, padding),
            };
            let conv = Conv2dParams::<f64>::init(kind, c, c, kk, ss, pp, &mut rng);
            let y = ops::conv2d(&x, &conv).unwrap();
            let expect_h = ops::conv_out_extent(h, kk, ss, pp).unwrap();
            let expect_w = ops::conv_out_extent(w, kk, ss, pp).unwrap();
            prop_assert_eq!(y.shape(), Shape::new(1, c, expect_h, expect_w));
        }
    }

    // gce_layer_size is the general law instantiated at s = k, p = 0.
    #[test]
    fn layer_size_agrees_with_conv_law(n in 0usize..600, k in 1usize..8) {
        let by_floor = gce_layer_size(n, k);
        if n >= k {
            prop_assert_eq!(by_floor, ops::conv_out_extent(n, k, k, 0).unwrap());
        } else {
            prop_assert_eq!(by_floor, 0);
        }
    }

    // conv2d with zero bias is linear in its input.
    #[test]
    fn conv_is_linear_without_bias(
        x in tensor_strategy(1, 2, 6, 6),
        y in tensor_strategy(1, 2, 6, 6),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Conv2dParams::<f64>::init(ConvKind::Standard, 2, 3, 3, 1, 1, &mut rng);
        conv.bias = None;
        let combo = ops::add(&ops::affine(&x, alpha, 0.0).unwrap(), &ops::affine(&y, beta, 0.0).unwrap()).unwrap();
        let lhs = ops::conv2d(&combo, &conv).unwrap();
        let cx = ops::conv2d(&x, &conv).unwrap();
        let cy = ops::conv2d(&y, &conv).unwrap();
        let rhs = ops::add(&ops::affine(&cx, alpha, 0.0).unwrap(), &ops::affine(&cy, beta, 0.0).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data().iter()) {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    // pixel_shuffle and pixel_unshuffle invert each other.
    #[test]
    fn shuffle_then_unshuffle_is_identity(
        x in tensor_strategy(1, 8, 3, 4),
        r in prop::sample::select(vec![1usize, 2]),
    ) {
        let there = ops::pixel_shuffle(&x, r).unwrap();
        let back = ops::pixel_unshuffle(&there, r).unwrap();
        prop_assert_eq!(&*back.data(), &*x.data());
    }

    #[test]
    fn unshuffle_then_shuffle_is_identity(x in tensor_strategy(1, 3, 4, 6)) {
        let there = ops::pixel_unshuffle(&x, 2).unwrap();
        let back = ops::pixel_shuffle(&there, 2).unwrap();
        prop_assert_eq!(&*back.data(), &*x.data());
    }

    // static merge is linear.
    #[test]
    fn static_merge_linearity(
        x in tensor_strategy(1, 6, 3, 3),
        y in tensor_strategy(1, 6, 3, 3),
        alpha in -3.0f64..3.0,
    ) {
        let sum = ops::add(&x, &y).unwrap();
        let lhs = static_merge(&sum).unwrap();
        let rhs = ops::add(&static_merge(&x).unwrap(), &static_merge(&y).unwrap()).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data().iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let scaled = ops::affine(&x, alpha, 0.0).unwrap();
        let lhs = static_merge(&scaled).unwrap();
        let rhs = ops::affine(&static_merge(&x).unwrap(), alpha, 0.0).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data().iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    // Every merge strategy halves the channel count.
    #[test]
    fn merges_halve_channels(
        x in tensor_strategy(1, 8, 3, 3),
        kernels in tensor_strategy(8, 1, 3, 3),
    ) {
        prop_assert_eq!(static_merge(&x).unwrap().shape().c, 4);
        for sim in [Similarity::ChannelCosine, Similarity::KernelCosine, Similarity::KernelMae] {
            let merged = dynamic_merge(&x, sim, Some(&kernels)).unwrap();
            prop_assert_eq!(merged.shape().c, 4);
        }
    }

    // Nearest resize preserves constant maps; downsample-then-upsample of a
    // constant reconstructs it exactly.
    #[test]
    fn nearest_resize_constant_invariants(
        v in -10.0f64..10.0,
        h in 1usize..9,
        w in 1usize..9,
        oh in 1usize..17,
        ow in 1usize..17,
        factor in 1usize..4,
    ) {
        let x = Tensor::from_vec(Shape::new(1, 1, h, w), vec![v; h * w]).unwrap();
        let resized = ops::nearest_resize(&x, oh, ow).unwrap();
        prop_assert!(resized.data().iter().all(|t| *t == v));

        let big = Tensor::from_vec(
            Shape::new(1, 1, h * factor, w * factor),
            vec![v; h * factor * w * factor],
        )
        .unwrap();
        let down = ops::nearest_resize(&big, h, w).unwrap();
        let up = ops::nearest_resize(&down, h * factor, w * factor).unwrap();
        prop_assert_eq!(&*up.data(), &*big.data());
    }

    // psnr is symmetric in its arguments.
    #[test]
    fn psnr_symmetry(a in tensor_strategy(1, 3, 6, 6), b in tensor_strategy(1, 3, 6, 6)) {
        let ab = cgnet::metrics::psnr(&a, &b, 1.0).unwrap();
        let ba = cgnet::metrics::psnr(&b, &a, 1.0).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }
}
