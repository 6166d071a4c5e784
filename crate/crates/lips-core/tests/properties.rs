//! Property-based invariants of the numeric kernels.

use proptest::prelude::*;

use lips_core::rng::WeightRng;
use lips_core::routing::{route_and_compress_counted, CompressionWeights, RoutingConfig};
use lips_core::tensor::{
    bilinear_resize, bilinear_sample, conv2d, conv_out_dim, layer_norm, linear, softmax,
    Conv2dParams, LayerNormParams, LinearParams, Tensor,
};

fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = WeightRng::for_component(seed, 0xABCD);
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.uniform(4.0)).collect();
    Tensor::new(&[c, h, w], data).unwrap()
}

fn identity_conv(c: usize) -> Conv2dParams {
    let mut weight = Tensor::zeros(&[c, c, 1, 1]).unwrap();
    for i in 0..c {
        weight.data_mut()[i * c + i] = 1.0;
    }
    Conv2dParams::new(weight, vec![0.0; c]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_conv_preserves_any_map(
        c in 1usize..5,
        h in 1usize..7,
        w in 1usize..7,
        seed in 0u64..1000,
    ) {
        let input = random_map(c, h, w, seed);
        let out = conv2d(&input, &identity_conv(c), 1, 0).unwrap();
        prop_assert_eq!(out, input);
    }

    #[test]
    fn doubling_conv_input_doubles_output_exactly(
        c in 1usize..4,
        h in 2usize..6,
        w in 2usize..6,
        seed in 0u64..1000,
    ) {
        // Scaling by two only shifts exponents, so linearity holds bitwise.
        let input = random_map(c, h, w, seed);
        let mut rng = WeightRng::for_component(seed, 0x77);
        let params = rng.conv(c + 1, c, 3);
        let base = conv2d(&input, &params, 1, 1).unwrap();

        let mut doubled = input.clone();
        for v in doubled.data_mut() {
            *v *= 2.0;
        }
        let mut zero_bias = params.clone();
        zero_bias.bias.iter_mut().for_each(|b| *b = 0.0);
        let base_nb = conv2d(&input, &zero_bias, 1, 1).unwrap();
        let out = conv2d(&doubled, &zero_bias, 1, 1).unwrap();
        for (&two_x, &x) in out.data().iter().zip(base_nb.data()) {
            prop_assert_eq!(two_x, 2.0 * x);
        }
        // The biased result differs from the unbiased one by the bias alone.
        for (o, (&nb, ch)) in base.data().iter().zip(
            base_nb.data().iter().zip((0..(c + 1)).flat_map(|i| core::iter::repeat(i).take(h * w))),
        ) {
            prop_assert!((o - (nb + params.bias[ch])).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        shift in -20.0f32..20.0,
        seed in 0u64..1000,
    ) {
        let mut rng = WeightRng::for_component(seed, 0x99);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.uniform(30.0)).collect();
        let input = Tensor::new(&[rows, cols], data.clone()).unwrap();
        let probs = softmax(&input).unwrap();
        for row in probs.data().chunks(cols) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        let shifted: Vec<f32> = data.iter().map(|v| v + shift).collect();
        let shifted = softmax(&Tensor::new(&[rows, cols], shifted).unwrap()).unwrap();
        for (&a, &b) in probs.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-5, "shift changed {a} to {b}");
        }
    }

    #[test]
    fn resize_to_own_extent_is_identity(
        c in 1usize..4,
        h in 1usize..8,
        w in 1usize..8,
        seed in 0u64..1000,
    ) {
        let input = random_map(c, h, w, seed);
        let out = bilinear_resize(&input, h, w).unwrap();
        prop_assert_eq!(out, input);
    }

    #[test]
    fn resize_output_stays_within_input_range(
        c in 1usize..3,
        h in 1usize..6,
        w in 1usize..6,
        oh in 1usize..9,
        ow in 1usize..9,
        seed in 0u64..1000,
    ) {
        // Clamped bilinear blending can never extrapolate.
        let input = random_map(c, h, w, seed);
        let lo = input.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = input.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out = bilinear_resize(&input, oh, ow).unwrap();
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn interior_samples_stay_within_input_range(
        h in 2usize..7,
        w in 2usize..7,
        px in 0.0f32..1.0,
        py in 0.0f32..1.0,
        seed in 0u64..1000,
    ) {
        // Map the raw point into the span of cell centers, where the sample
        // support never leaves the map and convexity holds.
        let input = random_map(1, h, w, seed);
        let x = (0.5 + px * (w as f32 - 1.0)) / w as f32;
        let y = (0.5 + py * (h as f32 - 1.0)) / h as f32;
        let lo = input.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = input.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out = bilinear_sample(&input, &[(x, y)]).unwrap();
        let v = out.data()[0];
        prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} outside [{lo}, {hi}]");
    }

    #[test]
    fn layer_norm_standardizes_every_row(
        rows in 1usize..5,
        cols in 2usize..12,
        seed in 0u64..1000,
    ) {
        let mut rng = WeightRng::for_component(seed, 0x55);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.uniform(5.0)).collect();
        let input = Tensor::new(&[rows, cols], data).unwrap();
        let out = layer_norm(&input, &LayerNormParams::identity(cols)).unwrap();
        for (row, src) in out.data().chunks(cols).zip(input.data().chunks(cols)) {
            let mean: f32 = row.iter().sum::<f32>() / cols as f32;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let in_mean: f32 = src.iter().sum::<f32>() / cols as f32;
            let in_var: f32 =
                src.iter().map(|v| (v - in_mean) * (v - in_mean)).sum::<f32>() / cols as f32;
            // Standardizing with epsilon leaves variance v / (v + eps), not 1.
            let want = in_var / (in_var + lips_core::tensor::LAYER_NORM_EPS);
            prop_assert!(mean.abs() < 1e-4, "row mean {mean}");
            prop_assert!((var - want).abs() < 1e-3, "row variance {var}, expected {want}");
        }
    }

    #[test]
    fn identity_linear_preserves_rows(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in 0u64..1000,
    ) {
        let mut rng = WeightRng::for_component(seed, 0x44);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.uniform(3.0)).collect();
        let input = Tensor::new(&[rows, cols], data).unwrap();
        let mut weight = Tensor::zeros(&[cols, cols]).unwrap();
        for i in 0..cols {
            weight.data_mut()[i * cols + i] = 1.0;
        }
        let params = LinearParams::new(weight, vec![0.0; cols]).unwrap();
        prop_assert_eq!(linear(&input, &params).unwrap(), input);
    }

    #[test]
    fn routing_emits_selected_levels_at_fused_strides(
        mask in 1usize..16,
        half_h in 1usize..4,
        half_w in 1usize..4,
        seed in 0u64..100,
    ) {
        let levels: Vec<usize> = (1..=4).filter(|l| mask & (1 << (l - 1)) != 0).collect();
        let cfg = RoutingConfig::with_levels(&levels).unwrap();
        let (h, w) = (64 * half_h, 64 * half_w);
        let channels = [4usize, 6, 8, 10];

        let enc = lips_core::encoder::EncoderWeights::from_seed(channels, seed).unwrap();
        let image = lips_core::pipeline::synthetic_image(h, w, seed).unwrap();
        let pyramid = lips_core::encoder::run_encoder(&enc, &image).unwrap();

        let weights = CompressionWeights::from_seed(&cfg, channels, seed).unwrap();
        let mut macs = 0u64;
        let routed = route_and_compress_counted(&cfg, &weights, &pyramid, &mut macs).unwrap();

        prop_assert_eq!(routed.levels.len(), levels.len());
        prop_assert!(macs > 0);
        for (lvl, &want) in routed.levels.iter().zip(&levels) {
            prop_assert_eq!(lvl.level, want);
            prop_assert_eq!(lvl.stride, cfg.fused_stride(want));
            let src = pyramid.level(want).unwrap().shape();
            let cs = cfg.compression_strides[want - 1];
            let shape = lvl.map.shape();
            prop_assert_eq!(shape[0], cfg.output_channels);
            prop_assert_eq!(shape[1], conv_out_dim(src[1], 3, cs, 1).unwrap());
            prop_assert_eq!(shape[2], conv_out_dim(src[2], 3, cs, 1).unwrap());
        }
    }
}
