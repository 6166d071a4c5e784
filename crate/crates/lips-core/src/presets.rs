//! Named model configurations: a Mask2Former-style wide baseline and the
//! routed-level variant grid, plus external encoder cost tables calibrated
//! against the published figures for each family.

use alloc::format;
use alloc::string::String;
use alloc::vec;

use crate::config::ModelConfig;
use crate::cost::{profile_model, CostReport, EncoderCostMode, ExternalStageCost, Stage};
use crate::error::{Error, Result};
use crate::pixel_decoder::PixelDecoderConfig;
use crate::query_decoder::QueryDecoderConfig;
use crate::routing::RoutingConfig;

/// Reference input extent (pixels per axis) used for calibration.
pub const CALIBRATION_EXTENT: usize = 640;

/// Published share of the total forward cost spent in the wide baseline's
/// encoder, used to size its external cost table.
const BASELINE_ENCODER_SHARE_PCT: f64 = 31.6;

/// Published total parameter counts the external tables are solved against.
const BASELINE_TOTAL_PARAMS: u64 = 44_000_000;
const LIPS_TOTAL_PARAMS: u64 = 19_800_000;

/// MACs of the lightweight external encoder at the calibration extent.
const LIGHT_ENCODER_MACS_AT_640: f64 = 2.0e9;

/// Named configurations covering the published variant grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Wide baseline: levels 2-4, width 256, six trunk layers, mask
    /// features down to stride 4, ResNet-50-like external encoder cost.
    Mask2FormerR50Like,
    /// All four levels routed, width 128, three trunk layers.
    LipsFull,
    /// Levels 1-3 routed.
    Lips3,
    /// Levels 1-2 routed.
    Lips2,
    /// Level 1 only.
    Lips1,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Mask2FormerR50Like, Preset::LipsFull, Preset::Lips3, Preset::Lips2, Preset::Lips1];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mask2FormerR50Like => "mask2former_r50_like",
            Preset::LipsFull => "lips_full",
            Preset::Lips3 => "lips_3",
            Preset::Lips2 => "lips_2",
            Preset::Lips1 => "lips_1",
        }
    }

    pub fn from_name(name: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset '{name}'")))
    }

    /// The full model configuration of this preset at the default 640x640
    /// input extent.
    pub fn model_config(self) -> ModelConfig {
        match self {
            Preset::Mask2FormerR50Like => ModelConfig {
                input_h: CALIBRATION_EXTENT,
                input_w: CALIBRATION_EXTENT,
                seed: 0,
                encoder_channels: [256, 512, 1024, 2048],
                routing: RoutingConfig {
                    selected_levels: vec![2, 3, 4],
                    output_channels: 256,
                    compression_strides: [1, 1, 1, 1],
                },
                pixel: PixelDecoderConfig {
                    depth: 6,
                    width: 256,
                    heads: 8,
                    points_per_level: 4,
                    ffn_dim: 1024,
                    mask_feature_strides: vec![4, 8, 16, 32],
                },
                query: QueryDecoderConfig { hidden_dim: 256, ..QueryDecoderConfig::default() },
            },
            Preset::LipsFull | Preset::Lips3 | Preset::Lips2 | Preset::Lips1 => ModelConfig {
                input_h: CALIBRATION_EXTENT,
                input_w: CALIBRATION_EXTENT,
                seed: 0,
                encoder_channels: [64, 128, 1024, 2048],
                routing: RoutingConfig {
                    selected_levels: match self {
                        Preset::LipsFull => vec![1, 2, 3, 4],
                        Preset::Lips3 => vec![1, 2, 3],
                        Preset::Lips2 => vec![1, 2],
                        _ => vec![1],
                    },
                    ..RoutingConfig::default()
                },
                pixel: PixelDecoderConfig::default(),
                query: QueryDecoderConfig::default(),
            },
        }
    }

    /// The external encoder cost table matching this preset's family.
    pub fn encoder_cost(self) -> ExternalStageCost {
        match self {
            Preset::Mask2FormerR50Like => r50_like_cost(),
            _ => light_encoder_cost(),
        }
    }

    /// Cost profile of this preset with its external encoder table.
    pub fn profile(self) -> Result<CostReport> {
        let cost = self.encoder_cost();
        profile_model(&self.model_config(), EncoderCostMode::External(&cost))
    }
}

/// MACs and params of everything downstream of the encoder at the
/// calibration extent.
fn non_encoder_budget(preset: Preset) -> (f64, u64) {
    let report = profile_model(&preset.model_config(), EncoderCostMode::Toy)
        .expect("preset configurations are always valid");
    let macs = report.total_macs() - report.stage_macs(Stage::Encoder);
    let params = report.total_params() - report.stage_params(Stage::Encoder);
    (macs as f64, params)
}

/// ResNet-50-like table: linear in pixels, sized so the encoder carries the
/// published share of the baseline's total cost at 640x640, with parameters
/// completing the published model size.
fn r50_like_cost() -> ExternalStageCost {
    let (macs, params) = non_encoder_budget(Preset::Mask2FormerR50Like);
    let share = BASELINE_ENCODER_SHARE_PCT / 100.0;
    let macs_at_640 = macs * share / (1.0 - share);
    ExternalStageCost {
        name: String::from("r50_like"),
        c0: 0.0,
        c1: macs_at_640 / (CALIBRATION_EXTENT * CALIBRATION_EXTENT) as f64,
        c2: 0.0,
        params: BASELINE_TOTAL_PARAMS
            .checked_sub(params)
            .expect("published size exceeds the modeled decoder"),
    }
}

/// Lightweight-transformer-like table shared by the routed variants: linear
/// in pixels, with parameters completing the published full-variant size.
fn light_encoder_cost() -> ExternalStageCost {
    let (_, params) = non_encoder_budget(Preset::LipsFull);
    ExternalStageCost {
        name: String::from("light_encoder"),
        c0: 0.0,
        c1: LIGHT_ENCODER_MACS_AT_640 / (CALIBRATION_EXTENT * CALIBRATION_EXTENT) as f64,
        c2: 0.0,
        params: LIPS_TOTAL_PARAMS
            .checked_sub(params)
            .expect("published size exceeds the modeled decoder"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips_by_name() {
        for preset in Preset::ALL {
            preset.model_config().validate().unwrap();
            assert_eq!(Preset::from_name(preset.name()).unwrap(), preset);
        }
        assert!(Preset::from_name("resnet").is_err());
    }

    #[test]
    fn baseline_encoder_share_hits_calibration_target() {
        let report = Preset::Mask2FormerR50Like.profile().unwrap();
        let share = report.share_pct(Stage::Encoder);
        assert!(
            (share - BASELINE_ENCODER_SHARE_PCT).abs() < 1e-6,
            "encoder share {share} differs from the calibration target"
        );
    }

    #[test]
    fn calibrated_totals_match_published_params_exactly() {
        let baseline = Preset::Mask2FormerR50Like.profile().unwrap();
        assert_eq!(baseline.total_params(), BASELINE_TOTAL_PARAMS);
        let full = Preset::LipsFull.profile().unwrap();
        assert_eq!(full.total_params(), LIPS_TOTAL_PARAMS);
    }

    #[test]
    fn variant_grid_matches_routing_levels() {
        assert_eq!(Preset::LipsFull.model_config().routing.selected_levels, vec![1, 2, 3, 4]);
        assert_eq!(Preset::Lips3.model_config().routing.selected_levels, vec![1, 2, 3]);
        assert_eq!(Preset::Lips2.model_config().routing.selected_levels, vec![1, 2]);
        assert_eq!(Preset::Lips1.model_config().routing.selected_levels, vec![1]);
        let baseline = Preset::Mask2FormerR50Like.model_config();
        assert_eq!(baseline.routing.selected_levels, vec![2, 3, 4]);
        assert_eq!(baseline.pixel.depth, 6);
        assert_eq!(baseline.pixel.width, 256);
    }

    #[test]
    fn light_encoder_is_much_cheaper_than_r50_like() {
        let px = CALIBRATION_EXTENT * CALIBRATION_EXTENT;
        let light = Preset::Lips2.encoder_cost().macs_at(px);
        let heavy = Preset::Mask2FormerR50Like.encoder_cost().macs_at(px);
        assert!(light * 4 < heavy, "light {light} vs heavy {heavy}");
    }
}
