//! Analytic MAC and parameter model.
//!
//! `profile_model` walks exactly the layer list the forward pass
//! instantiates and prices each operation with the closed-form
//! [`count_primitive`] formulas, so its per-stage totals equal the
//! instrumented counters of an actual forward run. One multiply-add counts
//! as one MAC; normalizations, softmax, activations and bias additions
//! count zero. Bilinear resizes cost 4 MACs per output value and are
//! skipped (in both the kernels and this model) when input and output
//! extents already agree.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::pixel_decoder::fpn_source_stride;
use crate::query_decoder::{MASK_LOGIT_STRIDE, MAX_ATTENTION_SCALES};
use crate::tensor::conv_out_dim;

/// Pipeline stages of the cost breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Encoder,
    Routing,
    PixelDecoder,
    QueryDecoder,
    Head,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::Encoder, Stage::Routing, Stage::PixelDecoder, Stage::QueryDecoder, Stage::Head];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Routing => "routing",
            Stage::PixelDecoder => "pixel_decoder",
            Stage::QueryDecoder => "query_decoder",
            Stage::Head => "head",
        }
    }
}

impl core::fmt::Display for Stage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// One priced operation (or weight block) of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostItem {
    pub stage: Stage,
    /// Stable dotted path naming the operation, e.g. `routing.level2`.
    pub label: String,
    pub macs: u64,
    pub params: u64,
}

/// Aggregated per-stage cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostEntry {
    pub stage: Stage,
    pub macs: u64,
    pub params: u64,
}

/// Itemized cost profile of one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub items: Vec<CostItem>,
}

impl CostReport {
    pub fn stage_macs(&self, stage: Stage) -> u64 {
        self.items.iter().filter(|i| i.stage == stage).map(|i| i.macs).sum()
    }

    pub fn stage_params(&self, stage: Stage) -> u64 {
        self.items.iter().filter(|i| i.stage == stage).map(|i| i.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.items.iter().map(|i| i.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.items.iter().map(|i| i.params).sum()
    }

    /// Percentage of total MACs attributed to a stage (0 when nothing ran).
    pub fn share_pct(&self, stage: Stage) -> f64 {
        let total = self.total_macs();
        if total == 0 {
            0.0
        } else {
            self.stage_macs(stage) as f64 / total as f64 * 100.0
        }
    }

    /// Per-stage totals in fixed stage order.
    pub fn entries(&self) -> [CostEntry; 5] {
        Stage::ALL.map(|stage| CostEntry {
            stage,
            macs: self.stage_macs(stage),
            params: self.stage_params(stage),
        })
    }

    /// Sum of MACs of items whose label starts with `prefix`.
    pub fn macs_with_prefix(&self, prefix: &str) -> u64 {
        self.items.iter().filter(|i| i.label.starts_with(prefix)).map(|i| i.macs).sum()
    }

    pub fn item(&self, label: &str) -> Option<&CostItem> {
        self.items.iter().find(|i| i.label == label)
    }
}

/// Shape descriptor of one countable operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Conv2d { out_h: usize, out_w: usize, in_ch: usize, out_ch: usize, kernel: usize },
    Linear { rows: usize, in_features: usize, out_features: usize },
    LayerNorm { rows: usize, features: usize },
    Softmax { rows: usize, features: usize },
    /// Full attention of `queries` rows over `keys` rows at width `dim`,
    /// including the four projections.
    Attention { queries: usize, keys: usize, dim: usize },
    /// Deformable attention over a token sequence: offset/weight prediction,
    /// value and output projections, and `heads * levels * points` bilinear
    /// samples per token.
    MsDeformAttn { tokens: usize, dim: usize, heads: usize, levels: usize, points: usize },
    BilinearResize { channels: usize, out_h: usize, out_w: usize },
}

/// MACs and weight parameters of a primitive.
///
/// Conventions: one multiply-add = 1 MAC; output extents are priced densely
/// (zero padding is not discounted); normalizations, softmax and resampling
/// carry no weights except the affine layer-norm pair.
pub fn count_primitive(p: &Primitive) -> Result<(u64, u64)> {
    let m = |v: usize| v as u64;
    Ok(match *p {
        Primitive::Conv2d { out_h, out_w, in_ch, out_ch, kernel } => {
            if kernel == 0 || in_ch == 0 || out_ch == 0 {
                return Err(Error::InvalidConfig(format!("degenerate convolution {p:?}")));
            }
            let k2 = m(kernel) * m(kernel);
            (m(out_h) * m(out_w) * m(out_ch) * m(in_ch) * k2, m(out_ch) * m(in_ch) * k2 + m(out_ch))
        }
        Primitive::Linear { rows, in_features, out_features } => {
            if in_features == 0 || out_features == 0 {
                return Err(Error::InvalidConfig(format!("degenerate linear {p:?}")));
            }
            (
                m(rows) * m(in_features) * m(out_features),
                m(in_features) * m(out_features) + m(out_features),
            )
        }
        Primitive::LayerNorm { rows: _, features } => (0, 2 * m(features)),
        Primitive::Softmax { .. } => (0, 0),
        Primitive::Attention { queries, keys, dim } => {
            if dim == 0 {
                return Err(Error::InvalidConfig(format!("degenerate attention {p:?}")));
            }
            let d = m(dim);
            // q and out projections over queries, k and v over keys, then
            // one score and one value-weighting MAC per (query, key, channel).
            let macs = (2 * m(queries) + 2 * m(keys)) * d * d + 2 * m(queries) * m(keys) * d;
            (macs, 4 * (d * d + d))
        }
        Primitive::MsDeformAttn { tokens, dim, heads, levels, points } => {
            if heads == 0 || dim % heads != 0 || levels == 0 || points == 0 {
                return Err(Error::InvalidConfig(format!(
                    "deformable attention shape is inconsistent: {p:?}"
                )));
            }
            let (n, d) = (m(tokens), m(dim));
            let hlp = m(heads) * m(levels) * m(points);
            let macs = n * d * hlp * 2      // offset prediction
                + n * d * hlp               // attention-weight prediction
                + 2 * n * d * d             // value and output projections
                + n * hlp * (d / m(heads)) * 5; // bilinear sample + weighting
            let params = (d * hlp * 2 + hlp * 2)  // offsets
                + (d * hlp + hlp)                 // attention weights
                + 2 * (d * d + d); // value and output projections
            (macs, params)
        }
        Primitive::BilinearResize { channels, out_h, out_w } => {
            (4 * m(channels) * m(out_h) * m(out_w), 0)
        }
    })
}

/// Cost of a stage the pipeline treats as a black box: MACs follow a
/// quadratic in the input pixel count, parameters are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalStageCost {
    pub name: String,
    /// MACs = c0 + c1 * pixels + c2 * pixels^2, evaluated in f64 and rounded.
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub params: u64,
}

impl ExternalStageCost {
    pub fn macs_at(&self, pixels: usize) -> u64 {
        let p = pixels as f64;
        let macs = self.c0 + self.c1 * p + self.c2 * p * p;
        if macs <= 0.0 {
            0
        } else {
            libm::round(macs) as u64
        }
    }
}

/// Which encoder enters the profile: the toy convolutional backbone that the
/// forward pass actually runs, or an external cost table standing in for a
/// published backbone.
#[derive(Clone, Copy, Debug)]
pub enum EncoderCostMode<'a> {
    Toy,
    External(&'a ExternalStageCost),
}

struct ItemSink {
    items: Vec<CostItem>,
}

impl ItemSink {
    fn push(&mut self, stage: Stage, label: String, macs: u64, params: u64) {
        self.items.push(CostItem { stage, label, macs, params });
    }

    fn primitive(
        &mut self,
        stage: Stage,
        label: String,
        p: &Primitive,
        count_params: bool,
    ) -> Result<(u64, u64)> {
        let (macs, params) = count_primitive(p)?;
        let params = if count_params { params } else { 0 };
        self.push(stage, label, macs, params);
        Ok((macs, params))
    }
}

/// Analytic cost profile of one configuration. Walks the exact operation
/// list the forward pass executes; stage totals equal the instrumented MAC
/// counters of a real run with the same configuration.
pub fn profile_model(cfg: &ModelConfig, encoder: EncoderCostMode) -> Result<CostReport> {
    cfg.validate()?;
    let (h, w) = (cfg.input_h, cfg.input_w);
    let mut sink = ItemSink { items: Vec::new() };

    // Encoder: five stride-2 convolutions, or the external stand-in.
    let ch = cfg.encoder_channels;
    let conv_chain: [(usize, usize); 5] = {
        let mut dims = [(0usize, 0usize); 5];
        let (mut ph, mut pw) = (h, w);
        for slot in dims.iter_mut() {
            ph = conv_out_dim(ph, 3, 2, 1)?;
            pw = conv_out_dim(pw, 3, 2, 1)?;
            *slot = (ph, pw);
        }
        dims
    };
    match encoder {
        EncoderCostMode::Toy => {
            let plans =
                [(3, ch[0]), (ch[0], ch[0]), (ch[0], ch[1]), (ch[1], ch[2]), (ch[2], ch[3])];
            for (i, ((ci, co), (oh, ow))) in plans.iter().zip(conv_chain.iter()).enumerate() {
                sink.primitive(
                    Stage::Encoder,
                    format!("encoder.conv{i}"),
                    &Primitive::Conv2d { out_h: *oh, out_w: *ow, in_ch: *ci, out_ch: *co, kernel: 3 },
                    true,
                )?;
            }
        }
        EncoderCostMode::External(cost) => {
            sink.push(Stage::Encoder, format!("encoder.{}", cost.name), cost.macs_at(h * w), cost.params);
        }
    }
    // Pyramid levels 1..=4 are the outputs of convolutions 1..=4.
    let pyramid: [(usize, usize); 4] = [conv_chain[1], conv_chain[2], conv_chain[3], conv_chain[4]];

    // Routing: one strided 3x3 compression convolution per selected level.
    let d = cfg.routing.output_channels;
    let mut routed: Vec<(usize, usize, usize)> = Vec::new(); // (fused stride, h, w)
    for &level in &cfg.routing.selected_levels {
        let (lh, lw) = pyramid[level - 1];
        let stride = cfg.routing.compression_strides[level - 1];
        let oh = conv_out_dim(lh, 3, stride, 1)?;
        let ow = conv_out_dim(lw, 3, stride, 1)?;
        sink.primitive(
            Stage::Routing,
            format!("routing.level{level}"),
            &Primitive::Conv2d { out_h: oh, out_w: ow, in_ch: ch[level - 1], out_ch: d, kernel: 3 },
            true,
        )?;
        routed.push((cfg.routing.fused_stride(level), oh, ow));
    }

    // Pixel decoder trunk: deformable attention and feed-forward per layer.
    let tokens: usize = routed.iter().map(|&(_, rh, rw)| rh * rw).sum();
    let levels = routed.len();
    let px = &cfg.pixel;
    for layer in 0..px.depth {
        sink.primitive(
            Stage::PixelDecoder,
            format!("pixel_decoder.layer{layer}.msdeform"),
            &Primitive::MsDeformAttn {
                tokens,
                dim: px.width,
                heads: px.heads,
                levels,
                points: px.points_per_level,
            },
            true,
        )?;
        let mut ffn_macs = 0u64;
        let mut ffn_params = 0u64;
        for (fi, fo) in [(px.width, px.ffn_dim), (px.ffn_dim, px.width)] {
            let (m, p) = count_primitive(&Primitive::Linear {
                rows: tokens,
                in_features: fi,
                out_features: fo,
            })?;
            ffn_macs += m;
            ffn_params += p;
        }
        sink.push(
            Stage::PixelDecoder,
            format!("pixel_decoder.layer{layer}.ffn"),
            ffn_macs,
            ffn_params,
        );
        let (_, norm_params) =
            count_primitive(&Primitive::LayerNorm { rows: tokens, features: px.width })?;
        sink.push(
            Stage::PixelDecoder,
            format!("pixel_decoder.layer{layer}.norms"),
            0,
            2 * norm_params,
        );
    }

    // FPN top-down pass, coarsest target first, exactly as the kernels run it.
    let fused_strides: Vec<usize> = routed.iter().map(|&(s, _, _)| s).collect();
    let mut mask_maps: Vec<(usize, usize, usize)> = Vec::new(); // (stride, h, w)
    let mut first_target = true;
    for &target in px.mask_feature_strides.iter().rev() {
        if h % target != 0 || w % target != 0 {
            return Err(Error::InvalidInput(format!(
                "input {h} x {w} not divisible by mask stride {target}"
            )));
        }
        let (th, tw) = (h / target, w / target);
        let src_stride = fpn_source_stride(&fused_strides, target);
        let &(_, sh, sw) = routed
            .iter()
            .find(|&&(s, _, _)| s == src_stride)
            .expect("source stride comes from the routed list");
        if (sh, sw) != (th, tw) {
            sink.primitive(
                Stage::PixelDecoder,
                format!("pixel_decoder.fpn.s{target}.source_resize"),
                &Primitive::BilinearResize { channels: px.width, out_h: th, out_w: tw },
                false,
            )?;
        }
        sink.primitive(
            Stage::PixelDecoder,
            format!("pixel_decoder.fpn.s{target}.lateral"),
            &Primitive::Conv2d { out_h: th, out_w: tw, in_ch: px.width, out_ch: px.width, kernel: 1 },
            true,
        )?;
        if !first_target {
            sink.primitive(
                Stage::PixelDecoder,
                format!("pixel_decoder.fpn.s{target}.topdown_resize"),
                &Primitive::BilinearResize { channels: px.width, out_h: th, out_w: tw },
                false,
            )?;
        }
        sink.primitive(
            Stage::PixelDecoder,
            format!("pixel_decoder.fpn.s{target}.smooth"),
            &Primitive::Conv2d { out_h: th, out_w: tw, in_ch: px.width, out_ch: px.width, kernel: 3 },
            true,
        )?;
        mask_maps.push((target, th, tw));
        first_target = false;
    }
    mask_maps.reverse(); // finest first, matching the fused mask features

    // Query decoder: layers cycle over at most the three coarsest maps.
    let q = &cfg.query;
    let scales: Vec<(usize, usize, usize)> =
        mask_maps.iter().rev().take(MAX_ATTENTION_SCALES).copied().collect();
    let &(_, gh, gw) = mask_maps
        .iter()
        .find(|&&(s, _, _)| s == MASK_LOGIT_STRIDE)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "mask features include no stride-{MASK_LOGIT_STRIDE} map for the logits"
            ))
        })?;
    sink.push(
        Stage::QueryDecoder,
        String::from("query_decoder.embeddings"),
        0,
        2 * (q.num_queries * q.hidden_dim) as u64,
    );
    for layer in 0..q.num_layers {
        let (_, sh, sw) = scales[layer % scales.len()];
        if (sh, sw) != (gh, gw) {
            sink.primitive(
                Stage::QueryDecoder,
                format!("query_decoder.layer{layer}.mask_resize"),
                &Primitive::BilinearResize { channels: q.num_queries, out_h: sh, out_w: sw },
                false,
            )?;
        }
        sink.primitive(
            Stage::QueryDecoder,
            format!("query_decoder.layer{layer}.cross_attention"),
            &Primitive::Attention { queries: q.num_queries, keys: sh * sw, dim: q.hidden_dim },
            true,
        )?;
        sink.primitive(
            Stage::QueryDecoder,
            format!("query_decoder.layer{layer}.self_attention"),
            &Primitive::Attention { queries: q.num_queries, keys: q.num_queries, dim: q.hidden_dim },
            true,
        )?;
        let mut ffn_macs = 0u64;
        let mut ffn_params = 0u64;
        for (fi, fo) in [(q.hidden_dim, q.ffn_dim), (q.ffn_dim, q.hidden_dim)] {
            let (m, p) = count_primitive(&Primitive::Linear {
                rows: q.num_queries,
                in_features: fi,
                out_features: fo,
            })?;
            ffn_macs += m;
            ffn_params += p;
        }
        sink.push(Stage::QueryDecoder, format!("query_decoder.layer{layer}.ffn"), ffn_macs, ffn_params);
        let (_, norm_params) =
            count_primitive(&Primitive::LayerNorm { rows: q.num_queries, features: q.hidden_dim })?;
        sink.push(Stage::QueryDecoder, format!("query_decoder.layer{layer}.norms"), 0, 3 * norm_params);
    }

    // Prediction heads run once on the raw queries and once per layer; the
    // weights are shared, so parameters count once.
    let invocations = (q.num_layers + 1) as u64;
    let (class_macs, class_params) = count_primitive(&Primitive::Linear {
        rows: q.num_queries,
        in_features: q.hidden_dim,
        out_features: q.num_classes + 1,
    })?;
    sink.push(Stage::Head, String::from("head.class"), invocations * class_macs, class_params);
    let (embed_macs, embed_params) = count_primitive(&Primitive::Linear {
        rows: q.num_queries,
        in_features: q.hidden_dim,
        out_features: q.hidden_dim,
    })?;
    sink.push(
        Stage::Head,
        String::from("head.mask_embed"),
        invocations * 3 * embed_macs,
        3 * embed_params,
    );
    let dot = (q.num_queries * q.hidden_dim) as u64 * (gh * gw) as u64;
    sink.push(Stage::Head, String::from("head.mask_dot"), invocations * dot, 0);

    Ok(CostReport { items: sink.items })
}

/// Profiles the configuration at several pixel-decoder depths.
pub fn sweep_encoder_layers(
    cfg: &ModelConfig,
    encoder: EncoderCostMode,
    depths: &[usize],
) -> Result<Vec<(usize, CostReport)>> {
    depths
        .iter()
        .map(|&depth| {
            let mut c = cfg.clone();
            c.pixel.depth = depth;
            Ok((depth, profile_model(&c, encoder)?))
        })
        .collect()
}

/// Profiles the configuration at several pixel-decoder widths. The routing
/// output channels, the mask-branch width, and the trunk feed-forward width
/// follow proportionally; the query feed-forward width stays fixed.
pub fn sweep_width(
    cfg: &ModelConfig,
    encoder: EncoderCostMode,
    widths: &[usize],
) -> Result<Vec<(usize, CostReport)>> {
    widths
        .iter()
        .map(|&width| {
            let mut c = cfg.clone();
            c.pixel.ffn_dim = cfg.pixel.ffn_dim * width / cfg.pixel.width;
            c.pixel.width = width;
            c.routing.output_channels = width;
            c.query.hidden_dim = width;
            Ok((width, profile_model(&c, encoder)?))
        })
        .collect()
}

/// Profiles the configuration over several routed-level subsets.
pub fn sweep_routing(
    cfg: &ModelConfig,
    encoder: EncoderCostMode,
    level_sets: &[&[usize]],
) -> Result<Vec<(Vec<usize>, CostReport)>> {
    level_sets
        .iter()
        .map(|&set| {
            let mut c = cfg.clone();
            c.routing.selected_levels = set.to_vec();
            Ok((set.to_vec(), profile_model(&c, encoder)?))
        })
        .collect()
}

/// Profiles the configuration at several input extents.
pub fn sweep_resolution(
    cfg: &ModelConfig,
    encoder: EncoderCostMode,
    resolutions: &[(usize, usize)],
) -> Result<Vec<((usize, usize), CostReport)>> {
    resolutions
        .iter()
        .map(|&(rh, rw)| {
            let mut c = cfg.clone();
            c.input_h = rh;
            c.input_w = rw;
            Ok(((rh, rw), profile_model(&c, encoder)?))
        })
        .collect()
}
