//! Deterministic weight initialization.
//!
//! Every weight bundle is drawn from a ChaCha stream keyed by a master seed
//! mixed with a per-component tag. Components therefore never share stream
//! state: changing one part of the configuration (say, dropping a pyramid
//! level) cannot shift the weights drawn for an unrelated part.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Conv2dParams, LayerNormParams, LinearParams, Tensor};

/// SplitMix64-style finalizer mixing a master seed with a component tag.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator for one model component.
pub struct WeightRng {
    rng: ChaCha8Rng,
}

impl WeightRng {
    pub fn for_component(master_seed: u64, tag: u64) -> Self {
        WeightRng { rng: ChaCha8Rng::seed_from_u64(mix(master_seed, tag)) }
    }

    /// Uniform draw from `[-bound, bound)`.
    pub fn uniform(&mut self, bound: f32) -> f32 {
        self.rng.random_range(-bound..bound)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn unit(&mut self) -> f32 {
        self.rng.random_range(0.0..1.0)
    }

    fn fill(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(bound)).collect()
    }

    /// Convolution weights with a `1/sqrt(fan_in)` uniform bound.
    pub fn conv(&mut self, c_out: usize, c_in: usize, k: usize) -> Conv2dParams {
        let bound = 1.0 / crate::mathx::sqrt((c_in * k * k) as f32);
        let weight = Tensor::new(&[c_out, c_in, k, k], self.fill(c_out * c_in * k * k, bound))
            .expect("conv weight shape is valid by construction");
        let bias = self.fill(c_out, bound);
        Conv2dParams { weight, bias }
    }

    /// Linear weights with a `1/sqrt(fan_in)` uniform bound.
    pub fn linear(&mut self, c_out: usize, c_in: usize) -> LinearParams {
        let bound = 1.0 / crate::mathx::sqrt(c_in as f32);
        let weight = Tensor::new(&[c_out, c_in], self.fill(c_out * c_in, bound))
            .expect("linear weight shape is valid by construction");
        let bias = self.fill(c_out, bound);
        LinearParams { weight, bias }
    }

    /// Unit-scale layer norm (ones and zeros; not random).
    pub fn layer_norm(&mut self, c: usize) -> LayerNormParams {
        LayerNormParams::identity(c)
    }

    /// Embedding table with entries in `[-1, 1)`.
    pub fn embedding(&mut self, n: usize, c: usize) -> Tensor {
        Tensor::new(&[n, c], self.fill(n * c, 1.0)).expect("embedding shape is valid")
    }
}
