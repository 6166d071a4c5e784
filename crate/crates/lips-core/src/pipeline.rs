//! End-to-end forward pass with per-stage MAC instrumentation.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::cost::Stage;
use crate::encoder::{run_encoder_counted, EncoderWeights};
use crate::error::Result;
use crate::pixel_decoder::{run_pixel_decoder, DeformStats, MaskFeatures, PixelDecoderWeights};
use crate::query_decoder::{run_query_decoder, DecoderOutput, QueryCounters, QueryDecoderWeights};
use crate::rng::WeightRng;
use crate::routing::{route_and_compress_counted, CompressionWeights};
use crate::tensor::Tensor;

const SEED_TAG_IMAGE: u64 = 0xF0;

/// Every weight block of the model, deterministically derived from the
/// configured seed. Each component draws from its own stream, so changing
/// one part of the configuration (say, dropping a routed level) leaves the
/// weights of every other component bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: EncoderWeights,
    pub compression: CompressionWeights,
    pub pixel: PixelDecoderWeights,
    pub query: QueryDecoderWeights,
}

impl ModelWeights {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelWeights {
            encoder: EncoderWeights::from_seed(cfg.encoder_channels, cfg.seed)?,
            compression: CompressionWeights::from_seed(&cfg.routing, cfg.encoder_channels, cfg.seed)?,
            pixel: PixelDecoderWeights::from_seed(
                &cfg.pixel,
                cfg.routing.selected_levels.len(),
                cfg.seed,
            )?,
            query: QueryDecoderWeights::from_seed(&cfg.query, cfg.seed)?,
        })
    }

    pub fn param_count(&self) -> u64 {
        Stage::ALL.iter().map(|&s| self.stage_params(s)).sum()
    }

    /// Learnable parameters per pipeline stage.
    pub fn stage_params(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Encoder => self.encoder.param_count(),
            Stage::Routing => self.compression.param_count(),
            Stage::PixelDecoder => self.pixel.param_count(),
            Stage::QueryDecoder => self.query.param_count() - self.query.head.param_count(),
            Stage::Head => self.query.head.param_count(),
        }
    }
}

/// Instrumented MACs per stage, matching the analytic profile stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageMacs {
    pub encoder: u64,
    pub routing: u64,
    pub pixel_decoder: u64,
    pub query_decoder: u64,
    pub head: u64,
}

impl StageMacs {
    pub fn get(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Encoder => self.encoder,
            Stage::Routing => self.routing,
            Stage::PixelDecoder => self.pixel_decoder,
            Stage::QueryDecoder => self.query_decoder,
            Stage::Head => self.head,
        }
    }

    pub fn total(&self) -> u64 {
        Stage::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

/// Counters recorded during one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub macs: StageMacs,
    pub msdeform_calls: u64,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub mask_features: MaskFeatures,
    pub decoder: DecoderOutput,
    pub stats: ForwardStats,
}

/// Runs encoder, routing, pixel decoder and query decoder over a
/// `3 x H x W` image.
pub fn forward(cfg: &ModelConfig, weights: &ModelWeights, image: &Tensor) -> Result<ForwardOutput> {
    cfg.validate()?;
    let mut stats = ForwardStats::default();

    let pyramid = run_encoder_counted(&weights.encoder, image, &mut stats.macs.encoder)?;
    let routed = route_and_compress_counted(
        &cfg.routing,
        &weights.compression,
        &pyramid,
        &mut stats.macs.routing,
    )?;

    let mut deform = DeformStats::default();
    let shape = image.shape();
    let mask_features =
        run_pixel_decoder(&cfg.pixel, &weights.pixel, &routed, shape[1], shape[2], &mut deform)?;
    stats.macs.pixel_decoder = deform.macs;
    stats.msdeform_calls = deform.msdeform_calls;

    let mut counters = QueryCounters::default();
    let decoder = run_query_decoder(&cfg.query, &weights.query, &mask_features, &mut counters)?;
    stats.macs.query_decoder = counters.macs;
    stats.macs.head = counters.head_macs;

    Ok(ForwardOutput { mask_features, decoder, stats })
}

/// Deterministic pseudo-random `3 x H x W` image for synthetic runs.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let mut rng = WeightRng::for_component(seed, SEED_TAG_IMAGE);
    let data: Vec<f32> = (0..3 * h * w).map(|_| rng.unit()).collect();
    Tensor::new(&[3, h, w], data)
}
