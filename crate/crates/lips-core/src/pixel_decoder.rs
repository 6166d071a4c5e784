//! Pixel decoder: deformable-attention encoder layers over the compressed
//! token sequence, followed by FPN-style fusion into mask features.
//!
//! The routed levels are flattened (finest first) into one token sequence.
//! Each layer lets every token sample a few bilinear points per head from
//! every level, weighted by a predicted softmax, then applies a feed-forward
//! block; both sublayers use residual connections normalized afterwards.
//! After the last layer the tokens are reshaped back into maps and fused
//! top-down into mask features at fixed output strides.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::WeightRng;
use crate::routing::RoutedFeatures;
use crate::tensor::{
    add, bilinear_resize_counted, conv2d_counted, corner_parts, layer_norm, linear_counted,
    sine_positional_encoding, softmax_inplace, Conv2dParams, LayerNormParams, LinearParams,
    Tensor,
};

const SEED_TAG_LAYER_BASE: u64 = 0x20;
const SEED_TAG_FPN_BASE: u64 = 0x40;

/// Shape of the deformable-attention trunk and its fused outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelDecoderConfig {
    /// Number of deformable encoder layers.
    pub depth: usize,
    /// Token width; must match the routing output channels.
    pub width: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Sampling points per head per level.
    pub points_per_level: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_dim: usize,
    /// Output strides of the fused mask features, finest first.
    pub mask_feature_strides: Vec<usize>,
}

impl Default for PixelDecoderConfig {
    fn default() -> Self {
        PixelDecoderConfig {
            depth: 3,
            width: 128,
            heads: 8,
            points_per_level: 4,
            ffn_dim: 512,
            mask_feature_strides: vec![8, 16, 32],
        }
    }
}

impl PixelDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig(String::from("pixel decoder depth must be >= 1")));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "pixel decoder width must be a positive multiple of 4, got {}",
                self.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} must divide evenly into {} heads",
                self.width, self.heads
            )));
        }
        if self.points_per_level == 0 {
            return Err(Error::InvalidConfig(String::from("points_per_level must be >= 1")));
        }
        if self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(String::from("ffn_dim must be >= 1")));
        }
        if self.mask_feature_strides.is_empty() {
            return Err(Error::InvalidConfig(String::from(
                "at least one mask feature stride is required",
            )));
        }
        for pair in self.mask_feature_strides.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidConfig(format!(
                    "mask feature strides must be strictly ascending, got {:?}",
                    self.mask_feature_strides
                )));
            }
        }
        for &s in &self.mask_feature_strides {
            if s == 0 || 32 % s != 0 {
                return Err(Error::InvalidConfig(format!(
                    "mask feature stride {s} must divide 32"
                )));
            }
        }
        Ok(())
    }
}

/// Extent metadata of one flattened level inside a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLevel {
    pub level: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Row index of this level's first token.
    pub start: usize,
}

/// Multi-level feature maps flattened into `N x width` tokens, finest first.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub levels: Vec<TokenLevel>,
}

impl TokenSequence {
    pub fn from_routed(routed: &RoutedFeatures) -> Result<Self> {
        if routed.levels.is_empty() {
            return Err(Error::InvalidInput(String::from("no routed levels to flatten")));
        }
        let width = routed.levels[0].map.shape()[0];
        let mut levels = Vec::with_capacity(routed.levels.len());
        let total: usize = routed.levels.iter().map(|l| l.map.shape()[1] * l.map.shape()[2]).sum();
        let mut tokens = vec![0.0f32; total * width];
        let mut start = 0usize;
        for lvl in &routed.levels {
            let shape = lvl.map.shape();
            if shape[0] != width {
                return Err(Error::InvalidInput(format!(
                    "routed levels disagree on channel width: {} vs {width}",
                    shape[0]
                )));
            }
            let (h, w) = (shape[1], shape[2]);
            let src = lvl.map.data();
            for y in 0..h {
                for x in 0..w {
                    let row = &mut tokens[(start + y * w + x) * width..][..width];
                    for (c, slot) in row.iter_mut().enumerate() {
                        *slot = src[(c * h + y) * w + x];
                    }
                }
            }
            levels.push(TokenLevel { level: lvl.level, stride: lvl.stride, h, w, start });
            start += h * w;
        }
        Ok(TokenSequence { tokens: Tensor::new(&[total, width], tokens)?, levels })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Reshapes one level's tokens back into a `width x h x w` map.
    pub fn level_map(&self, idx: usize) -> Result<Tensor> {
        let lvl = self
            .levels
            .get(idx)
            .ok_or_else(|| Error::InvalidInput(format!("level index {idx} out of range")))?;
        let width = self.width();
        let data = self.tokens.data();
        let mut out = vec![0.0f32; width * lvl.h * lvl.w];
        for y in 0..lvl.h {
            for x in 0..lvl.w {
                let row = &data[(lvl.start + y * lvl.w + x) * width..][..width];
                for (c, &v) in row.iter().enumerate() {
                    out[(c * lvl.h + y) * lvl.w + x] = v;
                }
            }
        }
        Tensor::new(&[width, lvl.h, lvl.w], out)
    }
}

/// Projections of one deformable attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MsDeformWeights {
    /// width -> heads * levels * points * 2 sampling offsets.
    pub offsets: LinearParams,
    /// width -> heads * levels * points attention logits.
    pub attn: LinearParams,
    /// width -> width value projection.
    pub value: LinearParams,
    /// width -> width output projection.
    pub output: LinearParams,
}

impl MsDeformWeights {
    pub fn from_rng(rng: &mut WeightRng, width: usize, heads: usize, levels: usize, points: usize) -> Self {
        MsDeformWeights {
            offsets: rng.linear(heads * levels * points * 2, width),
            attn: rng.linear(heads * levels * points, width),
            value: rng.linear(width, width),
            output: rng.linear(width, width),
        }
    }

    /// Level count baked into the offset projection.
    pub fn levels(&self, heads: usize, points: usize) -> usize {
        self.offsets.out_features() / (heads * points * 2)
    }

    pub fn param_count(&self) -> u64 {
        self.offsets.param_count()
            + self.attn.param_count()
            + self.value.param_count()
            + self.output.param_count()
    }
}

/// One encoder layer: deformable attention plus feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformLayerWeights {
    pub attn: MsDeformWeights,
    pub norm1: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub norm2: LayerNormParams,
}

impl DeformLayerWeights {
    pub fn param_count(&self) -> u64 {
        self.attn.param_count()
            + self.norm1.param_count()
            + self.ffn1.param_count()
            + self.ffn2.param_count()
            + self.norm2.param_count()
    }
}

/// Lateral and smoothing convolutions per mask-feature stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnWeights {
    pub lateral: Vec<(usize, Conv2dParams)>,
    pub smooth: Vec<(usize, Conv2dParams)>,
}

impl FpnWeights {
    pub fn param_count(&self) -> u64 {
        self.lateral
            .iter()
            .chain(self.smooth.iter())
            .map(|(_, c)| c.param_count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDecoderWeights {
    pub layers: Vec<DeformLayerWeights>,
    pub fpn: FpnWeights,
}

impl PixelDecoderWeights {
    pub fn from_seed(cfg: &PixelDecoderConfig, num_levels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_levels == 0 {
            return Err(Error::InvalidConfig(String::from("need at least one routed level")));
        }
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut rng = WeightRng::for_component(seed, SEED_TAG_LAYER_BASE + i as u64);
            layers.push(DeformLayerWeights {
                attn: MsDeformWeights::from_rng(
                    &mut rng,
                    cfg.width,
                    cfg.heads,
                    num_levels,
                    cfg.points_per_level,
                ),
                norm1: rng.layer_norm(cfg.width),
                ffn1: rng.linear(cfg.ffn_dim, cfg.width),
                ffn2: rng.linear(cfg.width, cfg.ffn_dim),
                norm2: rng.layer_norm(cfg.width),
            });
        }
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        for &s in &cfg.mask_feature_strides {
            let mut rng = WeightRng::for_component(seed, SEED_TAG_FPN_BASE + s as u64);
            lateral.push((s, rng.conv(cfg.width, cfg.width, 1)));
            smooth.push((s, rng.conv(cfg.width, cfg.width, 3)));
        }
        Ok(PixelDecoderWeights { layers, fpn: FpnWeights { lateral, smooth } })
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(DeformLayerWeights::param_count).sum::<u64>()
            + self.fpn.param_count()
    }
}

/// Fused mask features keyed by stride, finest first.
#[derive(Debug, Clone)]
pub struct MaskFeatures {
    pub maps: Vec<(usize, Tensor)>,
}

impl MaskFeatures {
    pub fn by_stride(&self, stride: usize) -> Result<&Tensor> {
        self.maps
            .iter()
            .find(|(s, _)| *s == stride)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidInput(format!("no mask features at stride {stride}")))
    }

    /// The finest map, used as the mask embedding grid.
    pub fn finest(&self) -> &Tensor {
        &self.maps[0].1
    }
}

/// Instrumentation accumulated by the deformable trunk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeformStats {
    pub macs: u64,
    pub msdeform_calls: u64,
}

/// Normalized reference point of a token: the center of its own cell.
#[inline]
fn reference_point(lvl: &TokenLevel, cell: usize) -> (f32, f32) {
    let y = cell / lvl.w;
    let x = cell % lvl.w;
    (((x as f32) + 0.5) / lvl.w as f32, ((y as f32) + 0.5) / lvl.h as f32)
}

#[inline]
fn sample_rows(
    vproj: &[f32],
    width: usize,
    lvl: &TokenLevel,
    c0: usize,
    c1: usize,
    pt: (f32, f32),
    weight: f32,
    acc: &mut [f32],
) {
    let (x0, y0, fx, fy) = corner_parts(pt, lvl.h, lvl.w);
    let fetch = |y: isize, x: isize, c: usize| -> f32 {
        if y < 0 || x < 0 || y >= lvl.h as isize || x >= lvl.w as isize {
            0.0
        } else {
            vproj[(lvl.start + y as usize * lvl.w + x as usize) * width + c]
        }
    };
    for c in c0..c1 {
        let a = fetch(y0, x0, c);
        let b = fetch(y0, x0 + 1, c);
        let cc = fetch(y0 + 1, x0, c);
        let d = fetch(y0 + 1, x0 + 1, c);
        let top = a + fx * (b - a);
        let bot = cc + fx * (d - cc);
        acc[c - c0] += weight * (top + fy * (bot - top));
    }
}

fn check_msdeform_shapes(
    seq: &TokenSequence,
    offsets: &Tensor,
    attn_logits: &Tensor,
    weights: &MsDeformWeights,
    heads: usize,
    points: usize,
) -> Result<usize> {
    let n = seq.token_count();
    let width = seq.width();
    if heads == 0 || width % heads != 0 {
        return Err(Error::InvalidConfig(format!("width {width} incompatible with {heads} heads")));
    }
    let levels = seq.levels.len();
    let hlp = heads * levels * points;
    if offsets.shape() != [n, hlp * 2] {
        return Err(Error::InvalidShape(format!(
            "offsets expected {:?}, got {:?}",
            [n, hlp * 2],
            offsets.shape()
        )));
    }
    if attn_logits.shape() != [n, hlp] {
        return Err(Error::InvalidShape(format!(
            "attention logits expected {:?}, got {:?}",
            [n, hlp],
            attn_logits.shape()
        )));
    }
    if weights.value.in_features() != width
        || weights.value.out_features() != width
        || weights.output.in_features() != width
        || weights.output.out_features() != width
    {
        return Err(Error::InvalidShape(String::from(
            "value/output projections must be width x width",
        )));
    }
    Ok(hlp)
}

/// Deformable attention with precomputed offsets and logits. Each token
/// samples `points` bilinear locations per head per level around its own
/// cell center; offsets are expressed in cells of the target level.
pub fn msdeform_attn_raw(
    seq: &TokenSequence,
    offsets: &Tensor,
    attn_logits: &Tensor,
    weights: &MsDeformWeights,
    heads: usize,
    points: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    let hlp = check_msdeform_shapes(seq, offsets, attn_logits, weights, heads, points)?;
    let n = seq.token_count();
    let width = seq.width();
    let dh = width / heads;
    let levels = seq.levels.len();

    let vproj = linear_counted(&seq.tokens, &weights.value, macs)?;
    let vdata = vproj.data();
    let off = offsets.data();
    let logits = attn_logits.data();

    let mut gathered = vec![0.0f32; n * width];
    let mut attn = vec![0.0f32; points * levels];
    for lvl in &seq.levels {
        for cell in 0..lvl.h * lvl.w {
            let token = lvl.start + cell;
            let rp = reference_point(lvl, cell);
            let orow = &off[token * hlp * 2..(token + 1) * hlp * 2];
            let lrow = &logits[token * hlp..(token + 1) * hlp];
            for head in 0..heads {
                attn.copy_from_slice(&lrow[head * levels * points..(head + 1) * levels * points]);
                softmax_inplace(&mut attn);
                let acc =
                    &mut gathered[token * width + head * dh..token * width + (head + 1) * dh];
                for (m, target) in seq.levels.iter().enumerate() {
                    for p in 0..points {
                        let slot = (head * levels + m) * points + p;
                        let dx = orow[slot * 2];
                        let dy = orow[slot * 2 + 1];
                        let pt = (
                            rp.0 + dx / target.w as f32,
                            rp.1 + dy / target.h as f32,
                        );
                        sample_rows(
                            vdata,
                            width,
                            target,
                            head * dh,
                            (head + 1) * dh,
                            pt,
                            attn[m * points + p],
                            acc,
                        );
                    }
                }
            }
        }
    }
    // 4 MACs of bilinear blending plus 1 weighting MAC per sampled channel.
    *macs += (n * hlp * dh * 5) as u64;
    let gathered = Tensor::new(&[n, width], gathered)?;
    linear_counted(&gathered, &weights.output, macs)
}

/// Full deformable attention: offsets and logits are predicted from the
/// positional-encoded queries, values come from the raw tokens.
pub fn msdeform_attn(
    seq: &TokenSequence,
    queries: &Tensor,
    weights: &MsDeformWeights,
    heads: usize,
    points: usize,
    stats: &mut DeformStats,
) -> Result<Tensor> {
    if queries.shape() != seq.tokens.shape() {
        return Err(Error::InvalidShape(format!(
            "queries expected {:?}, got {:?}",
            seq.tokens.shape(),
            queries.shape()
        )));
    }
    stats.msdeform_calls += 1;
    let offsets = linear_counted(queries, &weights.offsets, &mut stats.macs)?;
    let logits = linear_counted(queries, &weights.attn, &mut stats.macs)?;
    msdeform_attn_raw(seq, &offsets, &logits, weights, heads, points, &mut stats.macs)
}

/// Analytic gradient of `sum(msdeform_attn_raw(...))` with respect to one
/// offset entry, identified by token row and flat index into the
/// `heads x levels x points x 2` offset layout. Built on the closed-form
/// bilinear sampling gradient.
pub fn msdeform_offset_gradient(
    seq: &TokenSequence,
    offsets: &Tensor,
    attn_logits: &Tensor,
    weights: &MsDeformWeights,
    heads: usize,
    points: usize,
    token: usize,
    flat_index: usize,
) -> Result<f32> {
    let hlp = check_msdeform_shapes(seq, offsets, attn_logits, weights, heads, points)?;
    let n = seq.token_count();
    if token >= n || flat_index >= hlp * 2 {
        return Err(Error::InvalidInput(format!(
            "gradient target ({token}, {flat_index}) out of range"
        )));
    }
    let width = seq.width();
    let dh = width / heads;
    let levels = seq.levels.len();

    let slot = flat_index / 2;
    let axis = flat_index % 2;
    let head = slot / (levels * points);
    let m = (slot / points) % levels;
    let p = slot % points;

    let lvl = seq
        .levels
        .iter()
        .find(|l| (l.start..l.start + l.h * l.w).contains(&token))
        .expect("token ranges cover all rows");
    let rp = reference_point(lvl, token - lvl.start);
    let target = &seq.levels[m];

    let mut macs = 0u64;
    let vproj = linear_counted(&seq.tokens, &weights.value, &mut macs)?;

    // Softmax weight of the targeted (head, level, point) slot.
    let lrow = &attn_logits.data()[token * hlp..(token + 1) * hlp];
    let mut attn: Vec<f32> = lrow[head * levels * points..(head + 1) * levels * points].to_vec();
    softmax_inplace(&mut attn);
    let a = attn[m * points + p];

    let dx = offsets.data()[(token * hlp + slot) * 2];
    let dy = offsets.data()[(token * hlp + slot) * 2 + 1];
    let pt = (rp.0 + dx / target.w as f32, rp.1 + dy / target.h as f32);

    // Repack the sampled head block of the target level as a plane tensor so
    // the shared bilinear gradient applies.
    let mut plane = vec![0.0f32; dh * target.h * target.w];
    for y in 0..target.h {
        for x in 0..target.w {
            for c in 0..dh {
                plane[(c * target.h + y) * target.w + x] =
                    vproj.data()[(target.start + y * target.w + x) * width + head * dh + c];
            }
        }
    }
    let plane = Tensor::new(&[dh, target.h, target.w], plane)?;

    // d sum(out) / d gathered[c] is the column sum of the output projection.
    let wout = weights.output.weight.data();
    let mut upstream = vec![0.0f32; dh];
    for (c, slot_up) in upstream.iter_mut().enumerate() {
        let col = head * dh + c;
        let mut s = 0.0f32;
        for row in 0..width {
            s += wout[row * width + col];
        }
        *slot_up = s * a;
    }
    let upstream = Tensor::new(&[1, dh], upstream)?;

    let grad = crate::tensor::bilinear_sample_grad(&plane, &[pt], &upstream)?[0];
    // Normalized-point gradient back to offset units (cells of the target level).
    Ok(if axis == 0 { grad.0 / target.w as f32 } else { grad.1 / target.h as f32 })
}

/// One encoder layer: deformable attention and feed-forward block, each with
/// a residual connection normalized afterwards.
pub fn deform_encoder_layer(
    seq: &TokenSequence,
    pos: &Tensor,
    weights: &DeformLayerWeights,
    heads: usize,
    points: usize,
    stats: &mut DeformStats,
) -> Result<TokenSequence> {
    let queries = add(&seq.tokens, pos)?;
    let attn_out = msdeform_attn(seq, &queries, &weights.attn, heads, points, stats)?;
    let x = layer_norm(&add(&seq.tokens, &attn_out)?, &weights.norm1)?;

    let mut hidden = linear_counted(&x, &weights.ffn1, &mut stats.macs)?;
    for v in hidden.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let ffn = linear_counted(&hidden, &weights.ffn2, &mut stats.macs)?;
    let out = layer_norm(&add(&x, &ffn)?, &weights.norm2)?;
    Ok(TokenSequence { tokens: out, levels: seq.levels.clone() })
}

/// Source level for one FPN target stride: nearest fused stride, preferring
/// the finer level on ties.
pub fn fpn_source_stride(fused_strides: &[usize], target: usize) -> usize {
    let mut best = fused_strides[0];
    for &s in fused_strides {
        let d = s.abs_diff(target);
        let bd = best.abs_diff(target);
        if d < bd || (d == bd && s < best) {
            best = s;
        }
    }
    best
}

/// Top-down fusion of the trunk outputs into mask features at the target
/// strides. Each target takes the nearest fused level (resized if its extent
/// differs), applies a 1x1 lateral convolution, adds the upsampled coarser
/// result, and smooths with a 3x3 convolution.
pub fn run_fpn(
    cfg: &PixelDecoderConfig,
    weights: &FpnWeights,
    fused: &[(usize, Tensor)],
    input_h: usize,
    input_w: usize,
    macs: &mut u64,
) -> Result<MaskFeatures> {
    if fused.is_empty() {
        return Err(Error::InvalidInput(String::from("no fused levels for the FPN")));
    }
    let strides: Vec<usize> = fused.iter().map(|(s, _)| *s).collect();
    let mut maps: Vec<(usize, Tensor)> = Vec::with_capacity(cfg.mask_feature_strides.len());
    let mut prev: Option<Tensor> = None;
    for &target in cfg.mask_feature_strides.iter().rev() {
        if input_h % target != 0 || input_w % target != 0 {
            return Err(Error::InvalidInput(format!(
                "input {input_h} x {input_w} not divisible by mask stride {target}"
            )));
        }
        let (th, tw) = (input_h / target, input_w / target);
        let src_stride = fpn_source_stride(&strides, target);
        let src = &fused.iter().find(|(s, _)| *s == src_stride).expect("stride present").1;
        let src = if src.shape()[1] == th && src.shape()[2] == tw {
            src.clone()
        } else {
            bilinear_resize_counted(src, th, tw, macs)?
        };
        let lat_w = weights
            .lateral
            .iter()
            .find(|(s, _)| *s == target)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::InvalidConfig(format!("no lateral conv for stride {target}")))?;
        let mut merged = conv2d_counted(&src, lat_w, 1, 0, macs)?;
        if let Some(coarser) = prev {
            let up = bilinear_resize_counted(&coarser, th, tw, macs)?;
            merged = add(&merged, &up)?;
        }
        let smooth_w = weights
            .smooth
            .iter()
            .find(|(s, _)| *s == target)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::InvalidConfig(format!("no smooth conv for stride {target}")))?;
        let out = conv2d_counted(&merged, smooth_w, 1, 1, macs)?;
        maps.push((target, out));
        prev = Some(merged);
    }
    maps.reverse();
    Ok(MaskFeatures { maps })
}

/// Runs the full pixel decoder over routed features.
pub fn run_pixel_decoder(
    cfg: &PixelDecoderConfig,
    weights: &PixelDecoderWeights,
    routed: &RoutedFeatures,
    input_h: usize,
    input_w: usize,
    stats: &mut DeformStats,
) -> Result<MaskFeatures> {
    cfg.validate()?;
    if weights.layers.len() != cfg.depth {
        return Err(Error::InvalidConfig(format!(
            "expected {} layers of weights, got {}",
            cfg.depth,
            weights.layers.len()
        )));
    }
    let mut seq = TokenSequence::from_routed(routed)?;
    if seq.width() != cfg.width {
        return Err(Error::InvalidConfig(format!(
            "token width {} does not match configured width {}",
            seq.width(),
            cfg.width
        )));
    }
    for layer in &weights.layers {
        if layer.attn.levels(cfg.heads, cfg.points_per_level) != seq.levels.len() {
            return Err(Error::InvalidConfig(String::from(
                "attention weights were built for a different level count",
            )));
        }
    }

    // Positional encodings, concatenated over levels in token order.
    let width = cfg.width;
    let mut pos = vec![0.0f32; seq.token_count() * width];
    for lvl in &seq.levels {
        let pe = sine_positional_encoding(lvl.h, lvl.w, width)?;
        pos[lvl.start * width..(lvl.start + lvl.h * lvl.w) * width].copy_from_slice(pe.data());
    }
    let pos = Tensor::new(&[seq.token_count(), width], pos)?;

    for layer in &weights.layers {
        seq = deform_encoder_layer(&seq, &pos, layer, cfg.heads, cfg.points_per_level, stats)?;
    }

    let fused: Vec<(usize, Tensor)> = seq
        .levels
        .iter()
        .enumerate()
        .map(|(i, lvl)| Ok((lvl.stride, seq.level_map(i)?)))
        .collect::<Result<_>>()?;
    run_fpn(cfg, &weights.fpn, &fused, input_h, input_w, &mut stats.macs)
}
