//! Whole-model configuration.

use alloc::format;

use crate::encoder::INPUT_DIVISOR;
use crate::error::{Error, Result};
use crate::pixel_decoder::PixelDecoderConfig;
use crate::query_decoder::QueryDecoderConfig;
use crate::routing::RoutingConfig;

/// Configuration for the full segmentation model: input geometry, the toy
/// encoder's channel plan, and the three decoder sub-configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Seed for deterministic synthetic weight generation.
    pub seed: u64,
    /// Encoder output channels at strides 4, 8, 16, 32.
    pub encoder_channels: [usize; 4],
    pub routing: RoutingConfig,
    pub pixel: PixelDecoderConfig,
    pub query: QueryDecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 640,
            input_w: 640,
            seed: 0,
            encoder_channels: [32, 64, 128, 256],
            routing: RoutingConfig::default(),
            pixel: PixelDecoderConfig::default(),
            query: QueryDecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::InvalidConfig("input size must be positive".into()));
        }
        if self.input_h % INPUT_DIVISOR != 0 || self.input_w % INPUT_DIVISOR != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {} x {} must be divisible by {}",
                self.input_h, self.input_w, INPUT_DIVISOR
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("encoder channels must be positive".into()));
        }
        self.routing.validate()?;
        self.pixel.validate()?;
        self.query.validate()?;
        if self.routing.output_channels != self.pixel.width {
            return Err(Error::InvalidConfig(format!(
                "routing output channels {} must equal pixel decoder width {}",
                self.routing.output_channels, self.pixel.width
            )));
        }
        if self.pixel.width != self.query.hidden_dim {
            return Err(Error::InvalidConfig(format!(
                "pixel decoder width {} must equal query decoder hidden dim {}",
                self.pixel.width, self.query.hidden_dim
            )));
        }
        Ok(())
    }
}
