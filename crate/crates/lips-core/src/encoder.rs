//! Toy convolutional backbone.
//!
//! Five stride-2 3x3 convolutions produce a 4-level feature pyramid at
//! strides 4, 8, 16 and 32. The backbone stands in for a real encoder so the
//! rest of the pipeline has deterministic features to run on; profiling
//! against published encoders swaps in an external cost table instead.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::rng::WeightRng;
use crate::tensor::{conv2d_counted, Conv2dParams, Tensor};

/// Downsampling factor of each pyramid level, indexed by `level - 1`.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Input extents must be divisible by the coarsest stride.
pub const INPUT_DIVISOR: usize = 32;

const SEED_TAG: u64 = 0x01;

/// Weights of the five-convolution backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    /// Two stride-2 stem convolutions: image -> c1 -> c1 (stride 4 total).
    pub stem: [Conv2dParams; 2],
    /// One stride-2 convolution per remaining level: c1->c2, c2->c3, c3->c4.
    pub stages: [Conv2dParams; 3],
    channels: [usize; 4],
}

impl EncoderWeights {
    /// Deterministically initialized weights for the given channel plan.
    pub fn from_seed(channels: [usize; 4], seed: u64) -> Result<Self> {
        for &c in &channels {
            if c == 0 {
                return Err(Error::InvalidConfig(String::from(
                    "encoder channel counts must be >= 1",
                )));
            }
        }
        let mut rng = WeightRng::for_component(seed, SEED_TAG);
        let stem = [rng.conv(channels[0], 3, 3), rng.conv(channels[0], channels[0], 3)];
        let stages = [
            rng.conv(channels[1], channels[0], 3),
            rng.conv(channels[2], channels[1], 3),
            rng.conv(channels[3], channels[2], 3),
        ];
        Ok(EncoderWeights { stem, stages, channels })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn param_count(&self) -> u64 {
        self.stem.iter().chain(self.stages.iter()).map(Conv2dParams::param_count).sum()
    }
}

/// Feature maps at strides 4, 8, 16 and 32 (index = level - 1).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    /// Feature map of a 1-based pyramid level.
    pub fn level(&self, level: usize) -> Result<&Tensor> {
        if !(1..=4).contains(&level) {
            return Err(Error::InvalidConfig(format!("pyramid level {level} out of range 1..=4")));
        }
        Ok(&self.levels[level - 1])
    }
}

/// Runs the backbone over a `3 x H x W` image.
pub fn run_encoder(weights: &EncoderWeights, image: &Tensor) -> Result<FeaturePyramid> {
    let mut macs = 0u64;
    run_encoder_counted(weights, image, &mut macs)
}

pub fn run_encoder_counted(
    weights: &EncoderWeights,
    image: &Tensor,
    macs: &mut u64,
) -> Result<FeaturePyramid> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidInput(format!("expected a 3 x H x W image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
        return Err(Error::InvalidInput(format!(
            "image extents must be divisible by {INPUT_DIVISOR}, got {h} x {w}"
        )));
    }
    let x = conv2d_counted(image, &weights.stem[0], 2, 1, macs)?;
    let l1 = conv2d_counted(&x, &weights.stem[1], 2, 1, macs)?;
    let l2 = conv2d_counted(&l1, &weights.stages[0], 2, 1, macs)?;
    let l3 = conv2d_counted(&l2, &weights.stages[1], 2, 1, macs)?;
    let l4 = conv2d_counted(&l3, &weights.stages[2], 2, 1, macs)?;
    Ok(FeaturePyramid { levels: [l1, l2, l3, l4] })
}

/// Closed-form parameter count of the backbone for a channel plan.
pub fn encoder_param_formula(channels: [usize; 4]) -> u64 {
    let conv = |co: usize, ci: usize| (co * ci * 9 + co) as u64;
    conv(channels[0], 3)
        + conv(channels[0], channels[0])
        + conv(channels[1], channels[0])
        + conv(channels[2], channels[1])
        + conv(channels[3], channels[2])
}
