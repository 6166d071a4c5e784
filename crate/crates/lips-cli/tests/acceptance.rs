//! Acceptance suite. Each test covers one shipping requirement end to end:
//! analytic/instrumented cost agreement, ablation deltas, variant-grid
//! structure, resolution scaling, stage shares, the deformable-attention and
//! gradient oracles, masked-attention semantics, metric oracles, and the
//! command-line contract. One pass/fail line per requirement.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use lips_core::config::ModelConfig;
use lips_core::cost::{
    profile_model, sweep_encoder_layers, sweep_resolution, sweep_width, EncoderCostMode, Stage,
};
use lips_core::metrics::{
    mask_average_precision, panoptic_quality_with_matches, Instance, ScoredInstance,
};
use lips_core::panoptic::{PanopticSegmentation, SegmentInfo};
use lips_core::pipeline::{forward, synthetic_image, ModelWeights};
use lips_core::pixel_decoder::{
    msdeform_attn, msdeform_attn_raw, msdeform_offset_gradient, DeformStats, MaskFeatures,
    MsDeformWeights, TokenLevel, TokenSequence,
};
use lips_core::presets::Preset;
use lips_core::query_decoder::{
    masked_cross_attention, run_query_decoder_with_mode, AttentionWeights, MaskMode,
    QueryCounters, QueryDecoderConfig, QueryDecoderWeights,
};
use lips_core::rng::WeightRng;
use lips_core::tensor::{bilinear_sample, bilinear_sample_grad, linear, LinearParams, Tensor};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Uniform integer in `0..n` from the deterministic weight generator.
fn pick(rng: &mut WeightRng, n: usize) -> usize {
    (((rng.unit() as f64) * n as f64) as usize).min(n - 1)
}

fn rand_tensor(rng: &mut WeightRng, shape: &[usize], bound: f32) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| rng.uniform(bound)).collect()).unwrap()
}

fn identity_linear(d: usize) -> LinearParams {
    let mut eye = vec![0.0f32; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    LinearParams::new(Tensor::new(&[d, d], eye).unwrap(), vec![0.0; d]).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

// ---------------------------------------------------------------------------
// 1. The analytic cost model reproduces the instrumented forward pass.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_analytic_profile_matches_instrumented_forward_exactly() {
    let mut configs: Vec<ModelConfig> = Vec::new();
    for (i, preset) in Preset::ALL.into_iter().enumerate() {
        for (j, extent) in [64usize, 32].into_iter().enumerate() {
            let mut cfg = preset.model_config();
            cfg.input_h = extent;
            cfg.input_w = extent;
            cfg.seed = (i * 2 + j) as u64 + 1;
            configs.push(cfg);
        }
    }
    // Two non-square inputs with a narrowed custom model.
    let mut custom = Preset::LipsFull.model_config();
    custom.input_h = 32;
    custom.input_w = 64;
    custom.seed = 42;
    custom.routing.output_channels = 64;
    custom.pixel.width = 64;
    custom.pixel.heads = 4;
    custom.pixel.depth = 2;
    custom.pixel.ffn_dim = 96;
    custom.query.hidden_dim = 64;
    custom.query.num_queries = 9;
    custom.query.num_layers = 4;
    custom.query.num_classes = 7;
    custom.query.ffn_dim = 80;
    custom.validate().unwrap();
    configs.push(custom.clone());
    let mut flipped = custom;
    flipped.input_h = 64;
    flipped.input_w = 32;
    flipped.seed = 43;
    configs.push(flipped);
    assert!(configs.len() >= 10);

    for cfg in &configs {
        let tag = format!(
            "{}x{} levels {:?} width {}",
            cfg.input_h, cfg.input_w, cfg.routing.selected_levels, cfg.pixel.width
        );
        let report = profile_model(cfg, EncoderCostMode::Toy).unwrap();
        let weights = ModelWeights::from_config(cfg).unwrap();
        let image = synthetic_image(cfg.input_h, cfg.input_w, cfg.seed ^ 0x55).unwrap();
        let out = forward(cfg, &weights, &image).unwrap();
        for stage in Stage::ALL {
            assert_eq!(
                report.stage_macs(stage),
                out.stats.macs.get(stage),
                "{tag}: {stage} MACs"
            );
            assert_eq!(
                report.stage_params(stage),
                weights.stage_params(stage),
                "{tag}: {stage} params"
            );
        }
        assert_eq!(report.total_macs(), out.stats.macs.total(), "{tag}: total MACs");
        assert_eq!(report.total_params(), weights.param_count(), "{tag}: total params");
        assert_eq!(out.stats.msdeform_calls, cfg.pixel.depth as u64, "{tag}: trunk calls");
    }
}

// ---------------------------------------------------------------------------
// 2. Marginal cost of one deformable trunk layer at the wide baseline.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_marginal_trunk_layer_costs_about_eight_gmacs() {
    let cfg = Preset::Mask2FormerR50Like.model_config();
    let table = Preset::Mask2FormerR50Like.encoder_cost();
    let rows =
        sweep_encoder_layers(&cfg, EncoderCostMode::External(&table), &[1, 2, 3, 4, 5, 6])
            .unwrap();
    let totals: Vec<u64> = rows.iter().map(|(_, r)| r.total_macs()).collect();

    let marginal = totals[5] - totals[4];
    let g = marginal as f64;
    assert!(4.0e9 < g && g < 12.0e9, "marginal layer cost {marginal} MACs");

    // Layers are homogeneous: every extra layer costs the same, and going
    // from three layers to six costs exactly three marginals.
    for pair in totals.windows(2) {
        assert_eq!(pair[1] - pair[0], marginal);
    }
    assert_eq!(totals[5] - totals[2], 3 * marginal);
}

// ---------------------------------------------------------------------------
// 3. Width ablation: 256 -> 128 saving, and exact 4x on pure convolutions.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_width_halving_saves_expected_macs_and_quarters_fpn_convs() {
    let cfg = Preset::Mask2FormerR50Like.model_config();
    let table = Preset::Mask2FormerR50Like.encoder_cost();
    let rows = sweep_width(&cfg, EncoderCostMode::External(&table), &[256, 128, 64]).unwrap();
    let total = |i: usize| rows[i].1.total_macs();

    let delta = total(0) - total(1);
    let g = delta as f64;
    assert!(24.65e9 < g && g < 73.95e9, "width 256->128 saves {delta} MACs");

    // Narrower still keeps shrinking, so the 256->64 reduction is larger.
    assert!(total(2) < total(1), "width 64 total {} vs width 128 {}", total(2), total(1));
    assert!(total(0) - total(2) > delta);

    // The FPN convolutions are width x width, so halving the width divides
    // their cost by exactly four (and quartering it by exactly sixteen).
    for stride in [4usize, 8, 16, 32] {
        for op in ["lateral", "smooth"] {
            let label = format!("pixel_decoder.fpn.s{stride}.{op}");
            let full = rows[0].1.item(&label).expect("item priced").macs;
            let half = rows[1].1.item(&label).expect("item priced").macs;
            let quarter = rows[2].1.item(&label).expect("item priced").macs;
            assert_eq!(full, 4 * half, "{label}");
            assert_eq!(full, 16 * quarter, "{label}");
        }
    }
}

// ---------------------------------------------------------------------------
// 4. Routed-level variant grid: monotone totals, ratio, parameter budget.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_variant_totals_monotone_with_expected_ratio_and_params() {
    let variants = [Preset::Lips1, Preset::Lips2, Preset::Lips3, Preset::LipsFull];
    let total_at = |preset: Preset, h: usize, w: usize| -> u64 {
        let mut cfg = preset.model_config();
        cfg.input_h = h;
        cfg.input_w = w;
        let table = preset.encoder_cost();
        profile_model(&cfg, EncoderCostMode::External(&table)).unwrap().total_macs()
    };

    for (h, w) in [(640usize, 640usize), (512, 1024)] {
        let mut prev = 0u64;
        for preset in variants {
            let total = total_at(preset, h, w);
            assert!(
                total > prev,
                "{} at {h}x{w}: {total} MACs does not exceed the previous variant's {prev}",
                preset.name()
            );
            prev = total;
        }
    }

    let ratio = total_at(Preset::Lips2, 640, 640) as f64
        / total_at(Preset::LipsFull, 640, 640) as f64;
    let center = 26.4 / 36.8;
    assert!(
        ratio > 0.75 * center && ratio < 1.25 * center,
        "two-level/full total ratio {ratio:.4} outside {:.4}..{:.4}",
        0.75 * center,
        1.25 * center
    );

    let params = Preset::LipsFull.profile().unwrap().total_params() as f64;
    assert!(
        params > 19.8e6 * 0.85 && params < 19.8e6 * 1.15,
        "full-variant parameter count {params}"
    );
}

// ---------------------------------------------------------------------------
// 5. Resolution scaling: the reduction factor grows with input size.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_reduction_factor_grows_with_resolution_and_totals_in_band() {
    let grid = [(256usize, 256usize), (640, 640), (2048, 2048)];
    let base_cfg = Preset::Mask2FormerR50Like.model_config();
    let base_table = Preset::Mask2FormerR50Like.encoder_cost();
    let full_cfg = Preset::LipsFull.model_config();
    let full_table = Preset::LipsFull.encoder_cost();
    let base = sweep_resolution(&base_cfg, EncoderCostMode::External(&base_table), &grid).unwrap();
    let full = sweep_resolution(&full_cfg, EncoderCostMode::External(&full_table), &grid).unwrap();

    let mut prev = 0.0f64;
    for ((res, rb), (_, rf)) in base.iter().zip(full.iter()) {
        let factor = rb.total_macs() as f64 / rf.total_macs() as f64;
        assert!(
            factor > prev,
            "reduction factor {factor:.4} at {res:?} does not exceed {prev:.4}"
        );
        prev = factor;
    }

    // Every stage of the wide baseline costs at least as much at a larger
    // input.
    for stage in Stage::ALL {
        let mut prev = 0u64;
        for (res, report) in &base {
            let macs = report.stage_macs(stage);
            assert!(macs >= prev, "{stage} MACs shrank at {res:?}");
            prev = macs;
        }
    }

    let two_level = |h: usize, w: usize| -> f64 {
        let mut cfg = Preset::Lips2.model_config();
        cfg.input_h = h;
        cfg.input_w = w;
        let table = Preset::Lips2.encoder_cost();
        profile_model(&cfg, EncoderCostMode::External(&table)).unwrap().total_macs() as f64
    };
    let at512 = two_level(512, 512);
    assert!(
        at512 > 11.6e9 * 0.6 && at512 < 11.6e9 * 1.4,
        "two-level total at 512x512 is {at512}"
    );
    let at640 = two_level(640, 640);
    assert!(
        at640 > 15.7e9 * 0.6 && at640 < 15.7e9 * 1.4,
        "two-level total at 640x640 is {at640}"
    );
}

// ---------------------------------------------------------------------------
// 6. Stage shares of the wide baseline under the calibrated encoder table.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_baseline_stage_shares_match_calibration() {
    let report = Preset::Mask2FormerR50Like.profile().unwrap();
    let encoder = report.share_pct(Stage::Encoder);
    assert!((encoder - 31.6).abs() < 1e-6, "encoder share {encoder:.3}%");

    let pixel = report.share_pct(Stage::PixelDecoder);
    assert!((pixel - 53.7).abs() <= 10.0, "pixel-decoder share {pixel:.3}%");

    let query = report.share_pct(Stage::QueryDecoder);
    assert!(query < 15.0, "query-decoder share {query:.3}%");
}

// ---------------------------------------------------------------------------
// 7. Deformable attention against an independent reference loop.
// ---------------------------------------------------------------------------

struct DeformInstance {
    seq: TokenSequence,
    queries: Tensor,
    weights: MsDeformWeights,
    heads: usize,
    points: usize,
}

fn random_deform_instance(tag: u64) -> DeformInstance {
    let mut rng = WeightRng::for_component(7000, tag);
    let heads = 1 + pick(&mut rng, 2);
    let head_dim = 1 + pick(&mut rng, 3);
    let width = heads * head_dim;
    let points = 1 + pick(&mut rng, 3);
    let level_count = 1 + pick(&mut rng, 3);
    let mut levels = Vec::new();
    let mut start = 0usize;
    for m in 0..level_count {
        let h = 1 + pick(&mut rng, 4);
        let w = 1 + pick(&mut rng, 4);
        levels.push(TokenLevel { level: m + 1, stride: 8 << m, h, w, start });
        start += h * w;
    }
    let tokens = rand_tensor(&mut rng, &[start, width], 1.0);
    let queries = rand_tensor(&mut rng, &[start, width], 1.0);
    let weights = MsDeformWeights::from_rng(&mut rng, width, heads, level_count, points);
    DeformInstance { seq: TokenSequence { tokens, levels }, queries, weights, heads, points }
}

/// Plain-loop linear map, written independently of the library kernel.
fn reference_linear(input: &[f32], rows: usize, params: &LinearParams) -> Vec<f32> {
    let (ci, co) = (params.in_features(), params.out_features());
    assert_eq!(input.len(), rows * ci);
    let w = params.weight.data();
    let mut out = vec![0.0f32; rows * co];
    for r in 0..rows {
        for o in 0..co {
            let mut acc = 0.0f32;
            for i in 0..ci {
                acc += input[r * ci + i] * w[o * ci + i];
            }
            out[r * co + o] = acc + params.bias[o];
        }
    }
    out
}

/// Naive token x head x level x point reference for deformable attention:
/// predict offsets and logits from the queries, softmax the logits per head,
/// bilinearly sample the value projection (zero outside the map), and apply
/// the output projection.
fn reference_msdeform(inst: &DeformInstance) -> Vec<f32> {
    let seq = &inst.seq;
    let n = seq.tokens.shape()[0];
    let width = seq.tokens.shape()[1];
    let (heads, points) = (inst.heads, inst.points);
    let level_count = seq.levels.len();
    let hlp = heads * level_count * points;
    let head_dim = width / heads;

    let offsets = reference_linear(inst.queries.data(), n, &inst.weights.offsets);
    let logits = reference_linear(inst.queries.data(), n, &inst.weights.attn);
    let values = reference_linear(seq.tokens.data(), n, &inst.weights.value);

    let fetch = |lvl: &TokenLevel, y: isize, x: isize, c: usize| -> f32 {
        if y < 0 || x < 0 || y >= lvl.h as isize || x >= lvl.w as isize {
            0.0
        } else {
            values[(lvl.start + y as usize * lvl.w + x as usize) * width + c]
        }
    };

    let mut gathered = vec![0.0f32; n * width];
    for lvl in &seq.levels {
        for cell in 0..lvl.h * lvl.w {
            let token = lvl.start + cell;
            let ref_x = ((cell % lvl.w) as f32 + 0.5) / lvl.w as f32;
            let ref_y = ((cell / lvl.w) as f32 + 0.5) / lvl.h as f32;
            for head in 0..heads {
                let row = &logits[token * hlp + head * level_count * points
                    ..token * hlp + (head + 1) * level_count * points];
                let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
                let norm: f32 = exps.iter().sum();
                for (m, target) in seq.levels.iter().enumerate() {
                    for p in 0..points {
                        let slot = (head * level_count + m) * points + p;
                        let dx = offsets[token * hlp * 2 + slot * 2];
                        let dy = offsets[token * hlp * 2 + slot * 2 + 1];
                        let u = (ref_x + dx / target.w as f32) * target.w as f32 - 0.5;
                        let v = (ref_y + dy / target.h as f32) * target.h as f32 - 0.5;
                        let (x0, y0) = (u.floor() as isize, v.floor() as isize);
                        let (fx, fy) = (u - x0 as f32, v - y0 as f32);
                        let weight = exps[m * points + p] / norm;
                        for c in head * head_dim..(head + 1) * head_dim {
                            let a = fetch(target, y0, x0, c);
                            let b = fetch(target, y0, x0 + 1, c);
                            let lo = fetch(target, y0 + 1, x0, c);
                            let hi = fetch(target, y0 + 1, x0 + 1, c);
                            let val = (1.0 - fy) * ((1.0 - fx) * a + fx * b)
                                + fy * ((1.0 - fx) * lo + fx * hi);
                            gathered[token * width + c] += weight * val;
                        }
                    }
                }
            }
        }
    }
    reference_linear(&gathered, n, &inst.weights.output)
}

#[test]
fn criterion_07_deformable_attention_matches_reference_loop() {
    let mut trials = 0;
    for tag in 0..60u64 {
        let inst = random_deform_instance(tag);
        let mut stats = DeformStats::default();
        let got =
            msdeform_attn(&inst.seq, &inst.queries, &inst.weights, inst.heads, inst.points, &mut stats)
                .unwrap();
        let want = reference_msdeform(&inst);
        for (i, (&g, &w)) in got.data().iter().zip(want.iter()).enumerate() {
            assert!(
                (g - w).abs() <= 1e-5,
                "trial {tag}, element {i}: library {g} vs reference {w}"
            );
        }
        trials += 1;
    }
    assert!(trials >= 50);

    // Zero offsets with a single point per head collapse to a projected
    // gather of each token's own cell: output = W_out(W_v(tokens)).
    let mut rng = WeightRng::for_component(7100, 0);
    let (width, heads, points) = (8usize, 2usize, 1usize);
    let levels = vec![TokenLevel { level: 1, stride: 8, h: 4, w: 4, start: 0 }];
    let tokens = rand_tensor(&mut rng, &[16, width], 1.0);
    let queries = rand_tensor(&mut rng, &[16, width], 1.0);
    let mut weights = MsDeformWeights::from_rng(&mut rng, width, heads, 1, points);
    weights.offsets = LinearParams::new(
        Tensor::zeros(&[heads * points * 2, width]).unwrap(),
        vec![0.0; heads * points * 2],
    )
    .unwrap();
    let seq = TokenSequence { tokens, levels };
    let mut stats = DeformStats::default();
    let got = msdeform_attn(&seq, &queries, &weights, heads, points, &mut stats).unwrap();
    let gather = linear(&linear(&seq.tokens, &weights.value).unwrap(), &weights.output).unwrap();
    assert!(
        max_abs_diff(&got, &gather) <= 1e-6,
        "zero-offset output differs from the projected gather"
    );

    // With identity value/output projections over an all-ones map, every
    // interior output channel equals the per-head attention weight sum.
    let (width, heads, points) = (4usize, 2usize, 3usize);
    let levels = vec![TokenLevel { level: 1, stride: 8, h: 5, w: 5, start: 0 }];
    let tokens = Tensor::new(&[25, width], vec![1.0; 25 * width]).unwrap();
    let mut weights = MsDeformWeights::from_rng(&mut rng, width, heads, 1, points);
    weights.value = identity_linear(width);
    weights.output = identity_linear(width);
    let hlp = heads * points;
    let offsets = rand_tensor(&mut rng, &[25, hlp * 2], 0.2);
    let logits = rand_tensor(&mut rng, &[25, hlp], 2.0);
    let seq = TokenSequence { tokens, levels };
    let mut macs = 0u64;
    let out = msdeform_attn_raw(&seq, &offsets, &logits, &weights, heads, points, &mut macs).unwrap();
    for y in 1..4 {
        for x in 1..4 {
            let token = y * 5 + x;
            for c in 0..width {
                let got = out.data()[token * width + c];
                assert!(
                    (got - 1.0).abs() <= 1e-6,
                    "attention weights at token {token}, channel {c} sum to {got}"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 8. Analytic sampling gradients against central finite differences.
// ---------------------------------------------------------------------------

/// Normalized coordinate whose pixel-space position sits 0.1..0.35 cells away
/// from the bilinear kinks (integer pixel positions).
fn off_kink_coord(rng: &mut WeightRng, extent: usize) -> f32 {
    let cell = pick(rng, extent);
    let delta = 0.1 + 0.25 * rng.unit();
    let sign = if rng.unit() < 0.5 { -1.0 } else { 1.0 };
    let u = cell as f32 + 0.5 + sign * delta;
    (u + 0.5) / extent as f32
}

#[test]
fn criterion_08_sampling_gradients_match_central_differences() {
    // Point-sampling gradient.
    let mut rng = WeightRng::for_component(8000, 1);
    for trial in 0..100 {
        let c = 1 + pick(&mut rng, 3);
        let h = 2 + pick(&mut rng, 5);
        let w = 2 + pick(&mut rng, 5);
        let feat = rand_tensor(&mut rng, &[c, h, w], 2.0);
        let count = 1 + pick(&mut rng, 4);
        let points: Vec<(f32, f32)> = (0..count)
            .map(|_| (off_kink_coord(&mut rng, w), off_kink_coord(&mut rng, h)))
            .collect();
        let upstream = rand_tensor(&mut rng, &[count, c], 1.0);
        let grads = bilinear_sample_grad(&feat, &points, &upstream).unwrap();

        let objective = |pts: &[(f32, f32)]| -> f64 {
            let s = bilinear_sample(&feat, pts).unwrap();
            s.data()
                .iter()
                .zip(upstream.data().iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        for (p, &(px, py)) in points.iter().enumerate() {
            for axis in 0..2 {
                let extent = if axis == 0 { w } else { h };
                let eps = 0.01 / extent as f32;
                let mut plus = points.clone();
                let mut minus = points.clone();
                let span = if axis == 0 {
                    plus[p].0 = px + eps;
                    minus[p].0 = px - eps;
                    (plus[p].0 - minus[p].0) as f64
                } else {
                    plus[p].1 = py + eps;
                    minus[p].1 = py - eps;
                    (plus[p].1 - minus[p].1) as f64
                };
                let numeric = (objective(&plus) - objective(&minus)) / span;
                let analytic = if axis == 0 { grads[p].0 } else { grads[p].1 } as f64;
                let scale = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() <= 1e-3 * scale,
                    "trial {trial}, point {p}, axis {axis}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    // Deformable-attention offset gradient.
    for trial in 0..100u64 {
        let inst = random_deform_instance(9000 + trial);
        let mut rng = WeightRng::for_component(8100, trial);
        let n = inst.seq.tokens.shape()[0];
        let width = inst.seq.tokens.shape()[1];
        let level_count = inst.seq.levels.len();
        let hlp = inst.heads * level_count * inst.points;
        let mut offsets = rand_tensor(&mut rng, &[n, hlp * 2], 1.0);
        let logits = rand_tensor(&mut rng, &[n, hlp], 2.0);

        let token = pick(&mut rng, n);
        let slot = pick(&mut rng, hlp);
        let axis = pick(&mut rng, 2);
        let flat = slot * 2 + axis;

        // Snap the probed coordinate away from the bilinear kinks so the
        // finite-difference window stays on one linear piece.
        let target = &inst.seq.levels[(slot / inst.points) % level_count];
        let own = inst
            .seq
            .levels
            .iter()
            .rev()
            .find(|l| token >= l.start)
            .expect("token belongs to a level");
        let cell = token - own.start;
        let reference = if axis == 0 {
            ((cell % own.w) as f32 + 0.5) / own.w as f32 * target.w as f32
        } else {
            ((cell / own.w) as f32 + 0.5) / own.h as f32 * target.h as f32
        };
        let base = reference - 0.5;
        let idx = token * hlp * 2 + flat;
        let u = base + offsets.data()[idx];
        let delta = 0.1 + 0.25 * rng.unit();
        let sign = if rng.unit() < 0.5 { -1.0f32 } else { 1.0 };
        offsets.data_mut()[idx] = (u.floor() + 0.5 + sign * delta) - base;

        let analytic = msdeform_offset_gradient(
            &inst.seq,
            &offsets,
            &logits,
            &inst.weights,
            inst.heads,
            inst.points,
            token,
            flat,
        )
        .unwrap() as f64;

        // Rows other than the probed token's do not depend on its offsets,
        // so the row sum carries the whole difference.
        let objective = |off: &Tensor| -> f64 {
            let mut macs = 0u64;
            let out = msdeform_attn_raw(
                &inst.seq,
                off,
                &logits,
                &inst.weights,
                inst.heads,
                inst.points,
                &mut macs,
            )
            .unwrap();
            out.data()[token * width..(token + 1) * width].iter().map(|&v| v as f64).sum()
        };
        let mut plus = offsets.clone();
        plus.data_mut()[idx] += 0.01;
        let mut minus = offsets.clone();
        minus.data_mut()[idx] -= 0.01;
        let span = (plus.data()[idx] - minus.data()[idx]) as f64;
        let numeric = (objective(&plus) - objective(&minus)) / span;
        let scale = analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic - numeric).abs() <= 1e-3 * scale,
            "trial {trial}, token {token}, entry {flat}: analytic {analytic} vs numeric {numeric}"
        );
    }
}

// ---------------------------------------------------------------------------
// 9. Masked cross-attention semantics.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_masked_attention_matches_its_closed_forms() {
    let mut rng = WeightRng::for_component(909, 1);
    let (nq, nk, d, heads) = (5usize, 7usize, 8usize, 2usize);
    let weights = AttentionWeights::from_rng(&mut rng, d);
    let queries = rand_tensor(&mut rng, &[nq, d], 1.0);
    let keys = rand_tensor(&mut rng, &[nk, d], 1.0);
    let values = rand_tensor(&mut rng, &[nk, d], 1.0);
    let mut macs = 0u64;

    let unmasked =
        masked_cross_attention(&queries, &keys, &values, None, &weights, heads, &mut macs).unwrap();

    // An all-allowed mask changes nothing.
    let all = vec![true; nq * nk];
    let allowed =
        masked_cross_attention(&queries, &keys, &values, Some(&all), &weights, heads, &mut macs)
            .unwrap();
    assert!(max_abs_diff(&unmasked, &allowed) <= 1e-6);

    // A single allowed key pins the attention: row i is the output
    // projection of the value projection of that key's value row.
    let keeps: Vec<usize> = (0..nq).map(|i| (i * 3 + 1) % nk).collect();
    let mut single = vec![false; nq * nk];
    for (i, &j) in keeps.iter().enumerate() {
        single[i * nk + j] = true;
    }
    let pinned =
        masked_cross_attention(&queries, &keys, &values, Some(&single), &weights, heads, &mut macs)
            .unwrap();
    let vproj = linear(&values, &weights.v).unwrap();
    let rows: Vec<f32> =
        keeps.iter().flat_map(|&j| vproj.data()[j * d..(j + 1) * d].to_vec()).collect();
    let expected = linear(&Tensor::new(&[nq, d], rows).unwrap(), &weights.out).unwrap();
    assert!(
        max_abs_diff(&pinned, &expected) <= 1e-6,
        "single-key attention is not the projected key value"
    );

    // Fully masked-out rows fall back to unrestricted attention.
    let none = vec![false; nq * nk];
    let fallback =
        masked_cross_attention(&queries, &keys, &values, Some(&none), &weights, heads, &mut macs)
            .unwrap();
    assert!(max_abs_diff(&fallback, &unmasked) <= 1e-6);

    // End to end: a decoder run with all-allowed masks equals the unmasked
    // run, prediction by prediction.
    let cfg = QueryDecoderConfig {
        num_queries: 6,
        num_layers: 3,
        hidden_dim: 16,
        num_classes: 4,
        heads: 4,
        ffn_dim: 32,
        mask_threshold: 0.5,
    };
    let dec_weights = QueryDecoderWeights::from_seed(&cfg, 77).unwrap();
    let feats = MaskFeatures {
        maps: vec![
            (8, rand_tensor(&mut rng, &[16, 4, 4], 1.0)),
            (16, rand_tensor(&mut rng, &[16, 2, 2], 1.0)),
            (32, rand_tensor(&mut rng, &[16, 1, 1], 1.0)),
        ],
    };
    let mut c1 = QueryCounters::default();
    let mut c2 = QueryCounters::default();
    let open =
        run_query_decoder_with_mode(&cfg, &dec_weights, &feats, MaskMode::AllAllowed, &mut c1)
            .unwrap();
    let free =
        run_query_decoder_with_mode(&cfg, &dec_weights, &feats, MaskMode::Unmasked, &mut c2)
            .unwrap();
    assert_eq!(open.predictions.len(), free.predictions.len());
    for (a, b) in open.predictions.iter().zip(free.predictions.iter()) {
        assert!(max_abs_diff(&a.class_logits, &b.class_logits) <= 1e-6);
        assert!(max_abs_diff(&a.mask_logits, &b.mask_logits) <= 1e-6);
    }
}

// ---------------------------------------------------------------------------
// 10. Metric oracles: worked examples and greedy-vs-exhaustive matching.
// ---------------------------------------------------------------------------

fn segmentation(h: usize, w: usize, ids: Vec<u32>, segments: Vec<SegmentInfo>) -> PanopticSegmentation {
    let p = PanopticSegmentation { h, w, id_map: ids, segments };
    p.validate().expect("generated segmentation is consistent");
    p
}

fn random_segmentation(rng: &mut WeightRng) -> PanopticSegmentation {
    let count = pick(rng, 6);
    let segments: Vec<SegmentInfo> = (1..=count as u32)
        .map(|id| SegmentInfo {
            id,
            category_id: 1 + pick(rng, 3) as u32,
            is_thing: rng.unit() < 0.5,
        })
        .collect();
    let ids: Vec<u32> = (0..64).map(|_| pick(rng, count + 1) as u32).collect();
    segmentation(8, 8, ids, segments)
}

/// A prediction correlated with `gt`: same layout under relabeled ids, a few
/// repainted pixels, and sometimes one recategorized segment.
fn perturbed_copy(rng: &mut WeightRng, gt: &PanopticSegmentation) -> PanopticSegmentation {
    let shift = 10u32;
    let mut segments: Vec<SegmentInfo> = gt
        .segments
        .iter()
        .map(|s| SegmentInfo { id: s.id + shift, category_id: s.category_id, is_thing: s.is_thing })
        .collect();
    if !segments.is_empty() && rng.unit() < 0.3 {
        let i = pick(rng, segments.len());
        segments[i].category_id = 1 + pick(rng, 3) as u32;
    }
    let mut ids: Vec<u32> = gt.id_map.iter().map(|&g| if g == 0 { 0 } else { g + shift }).collect();
    for _ in 0..pick(rng, 25) {
        let at = pick(rng, 64);
        let to = pick(rng, gt.segments.len() + 1) as u32;
        ids[at] = if to == 0 { 0 } else { to + shift };
    }
    segmentation(8, 8, ids, segments)
}

/// Candidate pairs (same category, IoU above one half) computed with fresh
/// pixel loops. Ground-truth void pixels are excluded from the union.
fn candidate_pairs(gt: &PanopticSegmentation, pred: &PanopticSegmentation) -> Vec<(u32, u32, f64)> {
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_void: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gt.id_map.iter().zip(pred.id_map.iter()) {
        if g != 0 {
            *gt_area.entry(g).or_insert(0) += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_insert(0) += 1;
            if g == 0 {
                *pred_void.entry(p).or_insert(0) += 1;
            } else {
                *inter.entry((g, p)).or_insert(0) += 1;
            }
        }
    }
    let mut pairs = Vec::new();
    for (&(g, p), &i) in &inter {
        let g_cat = gt.segment(g).unwrap().category_id;
        let p_cat = pred.segment(p).unwrap().category_id;
        if g_cat != p_cat {
            continue;
        }
        let union = gt_area[&g] + pred_area[&p] - i - pred_void.get(&p).copied().unwrap_or(0);
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            pairs.push((g, p, iou));
        }
    }
    pairs
}

/// Exhaustive search for the matching maximizing (pair count, IoU sum).
fn optimal_matching(pairs: &[(u32, u32, f64)]) -> Vec<(u32, u32, f64)> {
    fn search(
        pairs: &[(u32, u32, f64)],
        at: usize,
        chosen: &mut Vec<(u32, u32, f64)>,
        best: &mut (usize, f64, Vec<(u32, u32, f64)>),
    ) {
        if at == pairs.len() {
            let iou: f64 = chosen.iter().map(|c| c.2).sum();
            if chosen.len() > best.0 || (chosen.len() == best.0 && iou > best.1) {
                *best = (chosen.len(), iou, chosen.clone());
            }
            return;
        }
        let (g, p, _) = pairs[at];
        if !chosen.iter().any(|&(cg, cp, _)| cg == g || cp == p) {
            chosen.push(pairs[at]);
            search(pairs, at + 1, chosen, best);
            chosen.pop();
        }
        search(pairs, at + 1, chosen, best);
    }
    let mut best = (0usize, 0.0f64, Vec::new());
    search(pairs, 0, &mut Vec::new(), &mut best);
    best.2
}

#[test]
fn criterion_10_metric_worked_examples_and_matching_optimality() {
    // Two ground-truth segments of one class; the prediction recovers one of
    // them at IoU 0.6 and hallucinates another on void. With one true
    // positive, one false positive and one false negative:
    // PQ = 0.6 / (1 + 0.5 + 0.5) = 0.3, SQ = 0.6, RQ = 0.5.
    let mut gt_ids = vec![0u32; 100];
    gt_ids[0..12].fill(1);
    gt_ids[12..24].fill(2);
    let gt = segmentation(10, 10, gt_ids, vec![
        SegmentInfo { id: 1, category_id: 1, is_thing: true },
        SegmentInfo { id: 2, category_id: 1, is_thing: true },
    ]);
    let mut pred_ids = vec![0u32; 100];
    pred_ids[3..15].fill(1);
    pred_ids[30..40].fill(2);
    let pred = segmentation(10, 10, pred_ids, vec![
        SegmentInfo { id: 1, category_id: 1, is_thing: true },
        SegmentInfo { id: 2, category_id: 1, is_thing: true },
    ]);
    let (result, matches) = panoptic_quality_with_matches(&gt, &pred).unwrap();
    assert_eq!(matches, vec![(1, 1, 0.6)]);
    assert_eq!(result.pq, 0.3);
    assert_eq!(result.sq, 0.6);
    assert_eq!(result.rq, 0.5);

    // One ground-truth instance covered by a larger prediction at IoU 0.7:
    // a true positive at half of the ten thresholds, so AP = 0.5.
    let bits = |len: usize, lo: usize, hi: usize| -> Vec<bool> {
        (0..len).map(|i| i >= lo && i < hi).collect()
    };
    let gts = [Instance { category_id: 1, mask: bits(16, 0, 7) }];
    let preds = [ScoredInstance { category_id: 1, score: 1.0, mask: bits(16, 0, 10) }];
    assert_eq!(mask_average_precision(&gts, &preds).unwrap(), 0.5);

    // Greedy matching equals the exhaustive optimum on random pairs, and the
    // per-class tallies agree with an independent recount.
    for trial in 0..200u64 {
        let mut rng = WeightRng::for_component(10_000, trial);
        let gt = random_segmentation(&mut rng);
        let pred = if trial % 3 == 0 {
            random_segmentation(&mut rng)
        } else {
            perturbed_copy(&mut rng, &gt)
        };

        let (result, mut greedy) = panoptic_quality_with_matches(&gt, &pred).unwrap();
        let mut optimal = optimal_matching(&candidate_pairs(&gt, &pred));
        greedy.sort_by_key(|&(g, p, _)| (g, p));
        optimal.sort_by_key(|&(g, p, _)| (g, p));
        assert_eq!(greedy.len(), optimal.len(), "trial {trial}: match count");
        for (a, b) in greedy.iter().zip(optimal.iter()) {
            assert_eq!((a.0, a.1), (b.0, b.1), "trial {trial}: matched pair");
            assert!((a.2 - b.2).abs() <= 1e-12, "trial {trial}: match IoU");
        }

        // Independent per-class recount from the optimal matching.
        let covered = |seg: &PanopticSegmentation, id: u32| seg.id_map.iter().any(|&v| v == id);
        let mut tally: BTreeMap<u32, (usize, usize, usize, f64)> = BTreeMap::new();
        for seg in &gt.segments {
            if covered(&gt, seg.id) {
                tally.entry(seg.category_id).or_insert((0, 0, 0, 0.0));
            }
        }
        for &(g, _, iou) in &optimal {
            let cat = gt.segment(g).unwrap().category_id;
            let slot = tally.get_mut(&cat).unwrap();
            slot.0 += 1;
            slot.3 += iou;
        }
        for seg in &gt.segments {
            if covered(&gt, seg.id) && !optimal.iter().any(|&(g, _, _)| g == seg.id) {
                tally.get_mut(&seg.category_id).unwrap().2 += 1;
            }
        }
        for seg in &pred.segments {
            if covered(&pred, seg.id) && !optimal.iter().any(|&(_, p, _)| p == seg.id) {
                if let Some(slot) = tally.get_mut(&seg.category_id) {
                    slot.1 += 1;
                }
            }
        }
        assert_eq!(result.per_class.len(), tally.len(), "trial {trial}: class count");
        for class in &result.per_class {
            let &(tp, fp, fn_count, iou_sum) = tally.get(&class.category_id).unwrap();
            assert_eq!(
                (class.tp, class.fp, class.fn_count),
                (tp, fp, fn_count),
                "trial {trial}, class {}",
                class.category_id
            );
            assert!((class.iou_sum - iou_sum).abs() <= 1e-12);
            assert!(
                (class.pq() - class.sq() * class.rq()).abs() <= 1e-9,
                "trial {trial}, class {}: PQ does not factor",
                class.category_id
            );
        }
    }
}

// ---------------------------------------------------------------------------
// 11. Command-line contract: determinism, shapes, and self-evaluation.
// ---------------------------------------------------------------------------

fn lips() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lips"));
    cmd.env("LIPS_THREADS", "2");
    cmd
}

fn run_ok(args: &[&str]) -> String {
    let out = lips().args(args).output().expect("spawn the lips binary");
    assert!(
        out.status.success(),
        "lips {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

fn read_ltsr_file(path: &Path) -> (Vec<usize>, Vec<f32>) {
    let bytes = std::fs::read(path).unwrap();
    assert!(bytes.len() >= 8 && &bytes[..4] == b"LTSR", "bad magic in {}", path.display());
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let rank = word(4);
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i)).collect();
    let base = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    assert_eq!(bytes.len(), base + 4 * numel, "payload size of {}", path.display());
    let data = (0..numel)
        .map(|i| f32::from_le_bytes(bytes[base + 4 * i..base + 4 * i + 4].try_into().unwrap()))
        .collect();
    (shape, data)
}

fn parse_lseg_file(path: &Path) -> PanopticSegmentation {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<usize> =
        lines.next().unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect();
    let (h, w) = (header[0], header[1]);
    let count: usize = lines.next().unwrap().trim().parse().unwrap();
    let segments: Vec<SegmentInfo> = (0..count)
        .map(|_| {
            let f: Vec<u32> =
                lines.next().unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect();
            SegmentInfo { id: f[0], category_id: f[1], is_thing: f[2] == 1 }
        })
        .collect();
    let mut id_map = Vec::with_capacity(h * w);
    for _ in 0..h {
        let row: Vec<u32> =
            lines.next().unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(row.len(), w, "row width in {}", path.display());
        id_map.extend(row);
    }
    assert!(lines.all(|l| l.trim().is_empty()), "trailing content in {}", path.display());
    let seg = PanopticSegmentation { h, w, id_map, segments };
    seg.validate().expect("dumped segmentation is internally consistent");
    seg
}

/// The worked metric example as an LSEG body over a 10x10 canvas.
fn example_lseg(ranges: &[(usize, usize, u32)]) -> String {
    let mut ids = vec![0u32; 100];
    for &(lo, hi, id) in ranges {
        ids[lo..hi].fill(id);
    }
    let mut text = String::from("10 10\n2\n1 1 1\n2 1 1\n");
    for row in ids.chunks(10) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    text
}

#[test]
fn criterion_11_cli_forward_is_deterministic_and_eval_closes_the_loop() {
    let tmp = tempfile::tempdir().unwrap();

    for preset in Preset::ALL {
        let name = preset.name();
        let d1 = tmp.path().join(format!("{name}_a"));
        let d2 = tmp.path().join(format!("{name}_b"));
        let run = |dir: &Path| {
            run_ok(&[
                "forward",
                "--preset",
                name,
                "--resolution",
                "64",
                "--synthetic",
                "5",
                "--dump-dir",
                dir.to_str().unwrap(),
            ])
        };
        let first = run(&d1);
        let second = run(&d2);
        assert_eq!(first, second, "{name}: stdout differs between reruns");
        for file in ["class_logits.ltsr", "mask_logits.ltsr", "panoptic.lseg", "categories.csv"] {
            let a = std::fs::read(d1.join(file)).unwrap();
            let b = std::fs::read(d2.join(file)).unwrap();
            assert_eq!(a, b, "{name}: {file} differs between reruns");
        }

        // Shape contract of the dumped prediction.
        let (class_shape, _) = read_ltsr_file(&d1.join("class_logits.ltsr"));
        assert_eq!(class_shape, vec![100, 151], "{name}: class logits are queries x classes+1");
        let (mask_shape, _) = read_ltsr_file(&d1.join("mask_logits.ltsr"));
        assert_eq!(mask_shape, vec![100, 8, 8], "{name}: mask logits at one eighth of 64");
        let seg = parse_lseg_file(&d1.join("panoptic.lseg"));
        assert_eq!((seg.h, seg.w), (64, 64), "{name}: panoptic canvas");

        // The mask-feature pyramid behind those dumps covers strides 8/16/32.
        let mut cfg = preset.model_config();
        cfg.input_h = 64;
        cfg.input_w = 64;
        let weights = ModelWeights::from_config(&cfg).unwrap();
        let image = synthetic_image(64, 64, 5).unwrap();
        let fwd = forward(&cfg, &weights, &image).unwrap();
        let strides: Vec<usize> = fwd.mask_features.maps.iter().map(|(s, _)| *s).collect();
        for needed in [8usize, 16, 32] {
            assert!(strides.contains(&needed), "{name}: strides {strides:?} miss {needed}");
        }
        if preset != Preset::Mask2FormerR50Like {
            assert_eq!(strides, vec![8, 16, 32], "{name}: routed variants fuse three maps");
        }

        // The dump evaluates against itself as a perfect segmentation.
        let pred = d1.join("panoptic.lseg");
        let cats = d1.join("categories.csv");
        let scores = run_ok(&[
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            pred.to_str().unwrap(),
            "--categories",
            cats.to_str().unwrap(),
        ]);
        assert!(
            scores.lines().any(|l| l == "PQ 100.0"),
            "{name}: self-evaluation printed {scores}"
        );
    }

    // Forward counters agree with the analytic profile through the CLI.
    let counters: BTreeMap<String, u64> =
        run_ok(&["forward", "--preset", "lips_full", "--resolution", "64", "--synthetic", "3"])
            .lines()
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                Some((it.next()?.to_string(), it.next()?.parse().ok()?))
            })
            .collect();
    let profile = run_ok(&[
        "profile",
        "--preset",
        "lips_full",
        "--resolution",
        "64",
        "--encoder-cost",
        "toy",
        "--format",
        "csv",
    ]);
    let mut profile_macs: BTreeMap<String, u64> = BTreeMap::new();
    for line in profile.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        profile_macs.insert(fields[1].to_string(), fields[2].parse().unwrap());
    }
    for stage in ["encoder", "routing", "pixel_decoder", "query_decoder", "head"] {
        assert_eq!(
            counters[&format!("{stage}_macs")],
            profile_macs[stage],
            "stage {stage} disagrees between forward and profile"
        );
    }
    assert_eq!(counters["total_macs"], profile_macs["total"]);

    // The worked metric example through LSEG files scores PQ 30.0.
    let gt_path = tmp.path().join("example_gt.lseg");
    let pred_path = tmp.path().join("example_pred.lseg");
    let cat_path = tmp.path().join("example_categories.csv");
    std::fs::write(&gt_path, example_lseg(&[(0, 12, 1), (12, 24, 2)])).unwrap();
    std::fs::write(&pred_path, example_lseg(&[(3, 15, 1), (30, 40, 2)])).unwrap();
    std::fs::write(&cat_path, "id,name,is_thing\n1,widget,1\n").unwrap();
    let scores = run_ok(&[
        "eval",
        "--pred",
        pred_path.to_str().unwrap(),
        "--gt",
        gt_path.to_str().unwrap(),
        "--categories",
        cat_path.to_str().unwrap(),
    ]);
    assert_eq!(scores.lines().next(), Some("PQ 30.0"), "eval printed {scores}");
    assert!(scores.lines().any(|l| l == "SQ 60.0"));
    assert!(scores.lines().any(|l| l == "RQ 50.0"));

    // Malformed inputs fail loudly: a bad LSEG header carries its line
    // number, and an unknown preset is rejected.
    let bad = tmp.path().join("bad.lseg");
    std::fs::write(&bad, "not a header\n").unwrap();
    let out = lips()
        .args([
            "eval",
            "--pred",
            bad.to_str().unwrap(),
            "--gt",
            bad.to_str().unwrap(),
            "--categories",
            cat_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success(), "malformed LSEG was accepted");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1"), "diagnostic lacks a line number: {err}");

    let out = lips().args(["profile", "--preset", "resnet50"]).output().unwrap();
    assert!(!out.status.success(), "unknown preset was accepted");
}
