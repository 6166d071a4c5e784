//! Masked-attention query decoder.
//!
//! A fixed set of learned queries cross-attends to the mask features, one
//! scale per layer cycling coarse to fine over at most the three coarsest
//! maps. Cross-attention is restricted to the foreground of each query's
//! previous mask prediction; a query whose mask is empty at the current
//! scale falls back to attending everywhere. Every layer (and the raw
//! learned queries) emits class logits and mask logits against the
//! stride-8 mask-feature map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mathx;
use crate::pixel_decoder::MaskFeatures;
use crate::rng::WeightRng;
use crate::tensor::{
    add, bilinear_resize_counted, layer_norm, linear_counted, sine_positional_encoding,
    softmax_inplace, LayerNormParams, LinearParams, Tensor,
};

const SEED_TAG_EMBED: u64 = 0x80;
const SEED_TAG_LAYER_BASE: u64 = 0x90;
const SEED_TAG_HEAD: u64 = 0xC0;

/// Stride of the mask-feature map the prediction heads dot against. Mask
/// logits stay at this resolution regardless of how fine the mask features
/// go; panoptic inference upsamples them afterwards.
pub const MASK_LOGIT_STRIDE: usize = 8;

/// Cross-attention cycles over at most this many of the coarsest maps.
pub const MAX_ATTENTION_SCALES: usize = 3;

/// Shape of the query decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDecoderConfig {
    pub num_queries: usize,
    pub num_layers: usize,
    /// Query width; must match the mask-feature channel width.
    pub hidden_dim: usize,
    /// Thing/stuff classes, excluding the no-object slot.
    pub num_classes: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Foreground threshold applied to sigmoid mask probabilities when
    /// building attention masks.
    pub mask_threshold: f32,
}

impl Default for QueryDecoderConfig {
    fn default() -> Self {
        QueryDecoderConfig {
            num_queries: 100,
            num_layers: 9,
            hidden_dim: 128,
            num_classes: 150,
            heads: 8,
            ffn_dim: 2048,
            mask_threshold: 0.5,
        }
    }
}

impl QueryDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::InvalidConfig(String::from("num_queries must be >= 1")));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig(String::from("num_layers must be >= 1")));
        }
        if self.hidden_dim == 0 || self.hidden_dim % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim must be a positive multiple of 4, got {}",
                self.hidden_dim
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} must divide evenly into {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig(String::from("num_classes must be >= 1")));
        }
        if self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(String::from("ffn_dim must be >= 1")));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_threshold must lie in (0, 1), got {}",
                self.mask_threshold
            )));
        }
        Ok(())
    }
}

/// Projections of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

impl AttentionWeights {
    pub fn from_rng(rng: &mut WeightRng, dim: usize) -> Self {
        AttentionWeights {
            q: rng.linear(dim, dim),
            k: rng.linear(dim, dim),
            v: rng.linear(dim, dim),
            out: rng.linear(dim, dim),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.out.param_count()
    }
}

/// One decoder layer: masked cross-attention, self-attention, feed-forward,
/// each with a residual connection normalized afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLayerWeights {
    pub cross: AttentionWeights,
    pub norm1: LayerNormParams,
    pub self_attn: AttentionWeights,
    pub norm2: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub norm3: LayerNormParams,
}

impl QueryLayerWeights {
    pub fn param_count(&self) -> u64 {
        self.cross.param_count()
            + self.self_attn.param_count()
            + self.norm1.param_count()
            + self.norm2.param_count()
            + self.norm3.param_count()
            + self.ffn1.param_count()
            + self.ffn2.param_count()
    }
}

/// Shared prediction heads: one classification layer and a 3-layer MLP
/// producing per-query mask embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub class: LinearParams,
    pub mask_mlp: [LinearParams; 3],
}

impl HeadWeights {
    pub fn param_count(&self) -> u64 {
        self.class.param_count() + self.mask_mlp.iter().map(LinearParams::param_count).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryDecoderWeights {
    pub query_feat: Tensor,
    pub query_pos: Tensor,
    pub layers: Vec<QueryLayerWeights>,
    pub head: HeadWeights,
}

impl QueryDecoderWeights {
    pub fn from_seed(cfg: &QueryDecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let mut embed_rng = WeightRng::for_component(seed, SEED_TAG_EMBED);
        let query_feat = embed_rng.embedding(cfg.num_queries, d);
        let query_pos = embed_rng.embedding(cfg.num_queries, d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let mut rng = WeightRng::for_component(seed, SEED_TAG_LAYER_BASE + i as u64);
            layers.push(QueryLayerWeights {
                cross: AttentionWeights::from_rng(&mut rng, d),
                norm1: rng.layer_norm(d),
                self_attn: AttentionWeights::from_rng(&mut rng, d),
                norm2: rng.layer_norm(d),
                ffn1: rng.linear(cfg.ffn_dim, d),
                ffn2: rng.linear(d, cfg.ffn_dim),
                norm3: rng.layer_norm(d),
            });
        }
        let mut head_rng = WeightRng::for_component(seed, SEED_TAG_HEAD);
        let head = HeadWeights {
            class: head_rng.linear(cfg.num_classes + 1, d),
            mask_mlp: [head_rng.linear(d, d), head_rng.linear(d, d), head_rng.linear(d, d)],
        };
        Ok(QueryDecoderWeights { query_feat, query_pos, layers, head })
    }

    pub fn param_count(&self) -> u64 {
        self.query_feat.param_count()
            + self.query_pos.param_count()
            + self.layers.iter().map(QueryLayerWeights::param_count).sum::<u64>()
            + self.head.param_count()
    }
}

/// One set of per-query predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `Q x (num_classes + 1)`; the last column is the no-object slot.
    pub class_logits: Tensor,
    /// `Q x h x w` mask logits on the stride-8 mask-feature grid.
    pub mask_logits: Tensor,
}

/// Decoder result: the initial prediction from the raw learned queries plus
/// one prediction per layer (the last entry is the final output).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub predictions: Vec<Prediction>,
    /// Mask-feature stride each layer attended to, in layer order.
    pub layer_strides: Vec<usize>,
}

impl DecoderOutput {
    pub fn final_prediction(&self) -> &Prediction {
        self.predictions.last().expect("decoder always emits predictions")
    }

    pub fn class_logits(&self) -> &Tensor {
        &self.final_prediction().class_logits
    }

    pub fn mask_logits(&self) -> &Tensor {
        &self.final_prediction().mask_logits
    }
}

/// MAC instrumentation split between decoder-layer work and head work.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryCounters {
    pub macs: u64,
    pub head_macs: u64,
}

/// How cross-attention masks are produced. `Predicted` is the standard
/// behaviour; the other modes exist to validate that masking is the only
/// difference from a plain decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Predicted,
    AllAllowed,
    Unmasked,
}

/// Multi-head attention of `queries` over `keys`/`values` with an optional
/// per-(query, key) allowed mask. A query row with no allowed keys attends
/// everywhere instead.
pub fn masked_cross_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    allowed: Option<&[bool]>,
    weights: &AttentionWeights,
    heads: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    let qshape = queries.shape();
    let kshape = keys.shape();
    if qshape.len() != 2 || kshape.len() != 2 || values.shape() != kshape {
        return Err(Error::InvalidShape(format!(
            "attention expects 2-D queries/keys/values, got {qshape:?} / {kshape:?} / {:?}",
            values.shape()
        )));
    }
    let (nq, d) = (qshape[0], qshape[1]);
    let nk = kshape[0];
    if kshape[1] != d {
        return Err(Error::InvalidShape(format!(
            "key width {} does not match query width {d}",
            kshape[1]
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!("width {d} incompatible with {heads} heads")));
    }
    if let Some(mask) = allowed {
        if mask.len() != nq * nk {
            return Err(Error::InvalidShape(format!(
                "allowed mask expected {} entries, got {}",
                nq * nk,
                mask.len()
            )));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / mathx::sqrt(dh as f32);

    let q = linear_counted(queries, &weights.q, macs)?;
    let k = linear_counted(keys, &weights.k, macs)?;
    let v = linear_counted(values, &weights.v, macs)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut ctx = vec![0.0f32; nq * d];
    let mut scores = vec![0.0f32; nk];
    for i in 0..nq {
        let row_mask = allowed.map(|m| &m[i * nk..(i + 1) * nk]);
        // A fully masked-out row falls back to unrestricted attention.
        let use_mask = row_mask.map(|m| m.iter().any(|&a| a)).unwrap_or(false);
        for head in 0..heads {
            let qrow = &qd[i * d + head * dh..i * d + (head + 1) * dh];
            for j in 0..nk {
                let masked = use_mask && !row_mask.expect("mask present")[j];
                scores[j] = if masked {
                    f32::NEG_INFINITY
                } else {
                    let krow = &kd[j * d + head * dh..j * d + (head + 1) * dh];
                    let mut dot = 0.0f32;
                    for (a, b) in qrow.iter().zip(krow.iter()) {
                        dot += a * b;
                    }
                    dot * scale
                };
            }
            softmax_inplace(&mut scores);
            let acc = &mut ctx[i * d + head * dh..i * d + (head + 1) * dh];
            for (j, &a) in scores.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let vrow = &vd[j * d + head * dh..j * d + (head + 1) * dh];
                for (slot, &vv) in acc.iter_mut().zip(vrow.iter()) {
                    *slot += a * vv;
                }
            }
        }
    }
    // Score and value-weighting terms of the attention map.
    *macs += 2 * (nq * nk * d) as u64;
    let ctx = Tensor::new(&[nq, d], ctx)?;
    linear_counted(&ctx, &weights.out, macs)
}

/// Class logits and mask logits for the current query features against a
/// mask-feature map.
pub fn predict_heads(
    query_feat: &Tensor,
    mask_features: &Tensor,
    weights: &HeadWeights,
    macs: &mut u64,
) -> Result<Prediction> {
    let qshape = query_feat.shape();
    let fshape = mask_features.shape();
    if qshape.len() != 2 || fshape.len() != 3 || fshape[0] != qshape[1] {
        return Err(Error::InvalidShape(format!(
            "prediction heads expect Q x D queries and D x h x w features, got {qshape:?} / {fshape:?}"
        )));
    }
    let (nq, d) = (qshape[0], qshape[1]);
    let (h, w) = (fshape[1], fshape[2]);

    let class_logits = linear_counted(query_feat, &weights.class, macs)?;

    let mut embed = query_feat.clone();
    for (i, layer) in weights.mask_mlp.iter().enumerate() {
        embed = linear_counted(&embed, layer, macs)?;
        if i + 1 < weights.mask_mlp.len() {
            for v in embed.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    let ed = embed.data();
    let fd = mask_features.data();
    let mut logits = vec![0.0f32; nq * h * w];
    for q in 0..nq {
        let erow = &ed[q * d..(q + 1) * d];
        for (c, &e) in erow.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            let plane = &fd[c * h * w..(c + 1) * h * w];
            let out = &mut logits[q * h * w..(q + 1) * h * w];
            for (slot, &f) in out.iter_mut().zip(plane.iter()) {
                *slot += e * f;
            }
        }
    }
    *macs += (nq * d * h * w) as u64;
    Ok(Prediction { class_logits, mask_logits: Tensor::new(&[nq, h, w], logits)? })
}

/// Flattens a `D x h x w` map into `(h*w) x D` rows.
fn flatten_map(map: &Tensor) -> Tensor {
    let (d, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let src = map.data();
    let mut out = vec![0.0f32; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = src[(c * h + y) * w + x];
            }
        }
    }
    Tensor::new(&[h * w, d], out).expect("flatten preserves the element count")
}

/// Attention mask from the previous prediction: resize the mask logits to
/// the scale's grid, apply the sigmoid, and keep locations at or above the
/// threshold.
fn build_attention_mask(
    mask_logits: &Tensor,
    h: usize,
    w: usize,
    threshold: f32,
    macs: &mut u64,
) -> Result<Vec<bool>> {
    let resized = if mask_logits.shape()[1] == h && mask_logits.shape()[2] == w {
        mask_logits.clone()
    } else {
        bilinear_resize_counted(mask_logits, h, w, macs)?
    };
    Ok(resized.data().iter().map(|&v| mathx::sigmoid(v) >= threshold).collect())
}

pub fn run_query_decoder(
    cfg: &QueryDecoderConfig,
    weights: &QueryDecoderWeights,
    feats: &MaskFeatures,
    counters: &mut QueryCounters,
) -> Result<DecoderOutput> {
    run_query_decoder_with_mode(cfg, weights, feats, MaskMode::Predicted, counters)
}

pub fn run_query_decoder_with_mode(
    cfg: &QueryDecoderConfig,
    weights: &QueryDecoderWeights,
    feats: &MaskFeatures,
    mode: MaskMode,
    counters: &mut QueryCounters,
) -> Result<DecoderOutput> {
    cfg.validate()?;
    if weights.layers.len() != cfg.num_layers {
        return Err(Error::InvalidConfig(format!(
            "expected {} layers of weights, got {}",
            cfg.num_layers,
            weights.layers.len()
        )));
    }
    if feats.maps.is_empty() {
        return Err(Error::InvalidInput(String::from("no mask features to attend to")));
    }
    let d = cfg.hidden_dim;
    for (stride, map) in &feats.maps {
        if map.shape()[0] != d {
            return Err(Error::InvalidConfig(format!(
                "mask features at stride {stride} have width {}, expected {d}",
                map.shape()[0]
            )));
        }
    }
    let mask_grid = feats.by_stride(MASK_LOGIT_STRIDE)?;

    // Coarse-to-fine scales, at most the three coarsest maps; layer i
    // attends to scale i mod count.
    struct Scale {
        stride: usize,
        h: usize,
        w: usize,
        mem: Tensor,
        keys: Tensor,
    }
    let mut scales = Vec::with_capacity(feats.maps.len().min(MAX_ATTENTION_SCALES));
    for (stride, map) in feats.maps.iter().rev().take(MAX_ATTENTION_SCALES) {
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let mem = flatten_map(map);
        let pos = sine_positional_encoding(h, w, d)?;
        let keys = add(&mem, &pos)?;
        scales.push(Scale { stride: *stride, h, w, mem, keys });
    }

    let mut x = weights.query_feat.clone();
    let mut predictions =
        vec![predict_heads(&x, mask_grid, &weights.head, &mut counters.head_macs)?];
    let mut layer_strides = Vec::with_capacity(cfg.num_layers);

    for (i, layer) in weights.layers.iter().enumerate() {
        let scale = &scales[i % scales.len()];
        layer_strides.push(scale.stride);

        let allowed: Option<Vec<bool>> = match mode {
            MaskMode::Predicted => Some(build_attention_mask(
                &predictions.last().expect("nonempty").mask_logits,
                scale.h,
                scale.w,
                cfg.mask_threshold,
                &mut counters.macs,
            )?),
            MaskMode::AllAllowed => Some(vec![true; cfg.num_queries * scale.h * scale.w]),
            MaskMode::Unmasked => None,
        };

        let q_in = add(&x, &weights.query_pos)?;
        let attn = masked_cross_attention(
            &q_in,
            &scale.keys,
            &scale.mem,
            allowed.as_deref(),
            &layer.cross,
            cfg.heads,
            &mut counters.macs,
        )?;
        x = layer_norm(&add(&x, &attn)?, &layer.norm1)?;

        let q_self = add(&x, &weights.query_pos)?;
        let self_attn = masked_cross_attention(
            &q_self,
            &q_self,
            &x,
            None,
            &layer.self_attn,
            cfg.heads,
            &mut counters.macs,
        )?;
        x = layer_norm(&add(&x, &self_attn)?, &layer.norm2)?;

        let mut hidden = linear_counted(&x, &layer.ffn1, &mut counters.macs)?;
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ffn = linear_counted(&hidden, &layer.ffn2, &mut counters.macs)?;
        x = layer_norm(&add(&x, &ffn)?, &layer.norm3)?;

        predictions.push(predict_heads(&x, mask_grid, &weights.head, &mut counters.head_macs)?);
    }

    Ok(DecoderOutput { predictions, layer_strides })
}
