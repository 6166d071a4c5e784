//! Pyramid-level routing and strided compression.
//!
//! Only a configured subset of pyramid levels is forwarded to the pixel
//! decoder. Each selected level passes through one 3x3 convolution that maps
//! it to a common channel width and optionally downsamples it further; the
//! product of pyramid stride and compression stride is the level's fused
//! stride relative to the input image.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{FeaturePyramid, PYRAMID_STRIDES};
use crate::error::{Error, Result};
use crate::rng::WeightRng;
use crate::tensor::{conv2d_counted, Conv2dParams, Tensor};

const SEED_TAG_BASE: u64 = 0x10;

/// Which pyramid levels reach the pixel decoder and how hard each one is
/// compressed on the way.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingConfig {
    /// Strictly ascending subset of `1..=4` (1 = finest, stride 4).
    pub selected_levels: Vec<usize>,
    /// Channel width every compressed level is mapped to.
    pub output_channels: usize,
    /// Compression conv stride per pyramid level, indexed by `level - 1`.
    pub compression_strides: [usize; 4],
}

pub const DEFAULT_COMPRESSION_STRIDES: [usize; 4] = [2, 2, 2, 3];

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            selected_levels: alloc::vec![1, 2, 3, 4],
            output_channels: 128,
            compression_strides: DEFAULT_COMPRESSION_STRIDES,
        }
    }
}

impl RoutingConfig {
    pub fn with_levels(levels: &[usize]) -> Result<Self> {
        let cfg = RoutingConfig { selected_levels: levels.to_vec(), ..RoutingConfig::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.selected_levels.is_empty() {
            return Err(Error::InvalidConfig(String::from("at least one level must be routed")));
        }
        for pair in self.selected_levels.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidConfig(format!(
                    "selected levels must be strictly ascending, got {:?}",
                    self.selected_levels
                )));
            }
        }
        for &l in &self.selected_levels {
            if !(1..=4).contains(&l) {
                return Err(Error::InvalidConfig(format!("selected level {l} out of range 1..=4")));
            }
        }
        if self.output_channels == 0 {
            return Err(Error::InvalidConfig(String::from("output_channels must be >= 1")));
        }
        for (i, &s) in self.compression_strides.iter().enumerate() {
            if s == 0 {
                return Err(Error::InvalidConfig(format!(
                    "compression stride for level {} must be >= 1",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Nominal total stride of a level after compression.
    pub fn fused_stride(&self, level: usize) -> usize {
        PYRAMID_STRIDES[level - 1] * self.compression_strides[level - 1]
    }
}

/// One compression convolution per selected level, in level order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionWeights {
    pub convs: Vec<(usize, Conv2dParams)>,
}

impl CompressionWeights {
    /// Weights keyed per level so that the draw for one level is independent
    /// of which other levels are selected.
    pub fn from_seed(
        cfg: &RoutingConfig,
        encoder_channels: [usize; 4],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.selected_levels.len());
        for &level in &cfg.selected_levels {
            let mut rng = WeightRng::for_component(seed, SEED_TAG_BASE + level as u64);
            convs.push((level, rng.conv(cfg.output_channels, encoder_channels[level - 1], 3)));
        }
        Ok(CompressionWeights { convs })
    }

    pub fn param_count(&self) -> u64 {
        self.convs.iter().map(|(_, c)| c.param_count()).sum()
    }
}

/// One compressed level: common channel width, fused stride metadata.
#[derive(Debug, Clone)]
pub struct RoutedLevel {
    pub level: usize,
    /// Nominal stride of this map relative to the input image.
    pub stride: usize,
    pub map: Tensor,
}

/// Compressed maps of the selected levels, finest first.
#[derive(Debug, Clone)]
pub struct RoutedFeatures {
    pub levels: Vec<RoutedLevel>,
}

impl RoutedFeatures {
    /// Total token count once the maps are flattened.
    pub fn token_count(&self) -> usize {
        self.levels.iter().map(|l| l.map.shape()[1] * l.map.shape()[2]).sum()
    }
}

pub fn route_and_compress(
    cfg: &RoutingConfig,
    weights: &CompressionWeights,
    pyramid: &FeaturePyramid,
) -> Result<RoutedFeatures> {
    let mut macs = 0u64;
    route_and_compress_counted(cfg, weights, pyramid, &mut macs)
}

pub fn route_and_compress_counted(
    cfg: &RoutingConfig,
    weights: &CompressionWeights,
    pyramid: &FeaturePyramid,
    macs: &mut u64,
) -> Result<RoutedFeatures> {
    cfg.validate()?;
    if weights.convs.len() != cfg.selected_levels.len()
        || weights.convs.iter().map(|(l, _)| *l).ne(cfg.selected_levels.iter().copied())
    {
        return Err(Error::InvalidConfig(String::from(
            "compression weights do not cover the selected levels",
        )));
    }
    let mut levels = Vec::with_capacity(cfg.selected_levels.len());
    for (level, conv) in &weights.convs {
        let src = pyramid.level(*level)?;
        let stride = cfg.compression_strides[*level - 1];
        let map = conv2d_counted(src, conv, stride, 1, macs)?;
        levels.push(RoutedLevel { level: *level, stride: cfg.fused_stride(*level), map });
    }
    Ok(RoutedFeatures { levels })
}
