//! Panoptic post-processing: decoder predictions to a segment id map.
//!
//! Queries are scored by classification confidence times mean foreground
//! mask probability, filtered, and painted onto the canvas in descending
//! score order without overwriting. Thing queries form one segment each;
//! stuff queries of the same category merge into a single segment.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mathx;
use crate::tensor::{bilinear_resize, softmax_inplace, Tensor};

/// One entry of the class vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    /// Nonzero id used in segment maps; 0 is reserved for void.
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
}

/// Ordered class vocabulary; the position of a category is its class slot in
/// the decoder's logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTable {
    categories: Vec<Category>,
}

impl CategoryTable {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::InvalidConfig(String::from("category table cannot be empty")));
        }
        for (i, c) in categories.iter().enumerate() {
            if c.id == 0 {
                return Err(Error::InvalidConfig(String::from("category id 0 is reserved for void")));
            }
            if categories[..i].iter().any(|other| other.id == c.id) {
                return Err(Error::InvalidConfig(format!("duplicate category id {}", c.id)));
            }
        }
        Ok(CategoryTable { categories })
    }

    /// Placeholder vocabulary: ids `1..=n`, all things.
    pub fn synthetic(n: usize) -> Self {
        CategoryTable {
            categories: (1..=n as u32)
                .map(|id| Category { id, name: format!("class_{id}"), is_thing: true })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn slot(&self, slot: usize) -> &Category {
        &self.categories[slot]
    }

    pub fn by_id(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter()
    }
}

/// One segment of a panoptic map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    /// Nonzero id referenced by the id map.
    pub id: u32,
    pub category_id: u32,
    pub is_thing: bool,
}

/// A panoptic segmentation: a dense id map plus per-segment metadata.
/// Id 0 marks void pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticSegmentation {
    pub h: usize,
    pub w: usize,
    pub id_map: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

impl PanopticSegmentation {
    /// Checks internal consistency: map size, unique nonzero segment ids,
    /// and that every painted id is declared.
    pub fn validate(&self) -> Result<()> {
        if self.id_map.len() != self.h * self.w {
            return Err(Error::InvalidInput(format!(
                "id map holds {} pixels, expected {} x {}",
                self.id_map.len(),
                self.h,
                self.w
            )));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.id == 0 {
                return Err(Error::InvalidInput(String::from("segment id 0 is reserved for void")));
            }
            if self.segments[..i].iter().any(|other| other.id == seg.id) {
                return Err(Error::InvalidInput(format!("duplicate segment id {}", seg.id)));
            }
        }
        for &id in &self.id_map {
            if id != 0 && !self.segments.iter().any(|s| s.id == id) {
                return Err(Error::InvalidInput(format!(
                    "pixel id {id} does not match any declared segment"
                )));
            }
        }
        Ok(())
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Category id per pixel (0 for void).
    pub fn semantic_map(&self) -> Vec<u32> {
        self.id_map
            .iter()
            .map(|&id| self.segment(id).map(|s| s.category_id).unwrap_or(0))
            .collect()
    }
}

/// Thresholds of the painting procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticConfig {
    /// Minimum classification-times-mask score for a query to survive.
    pub object_score_threshold: f32,
    /// Minimum fraction of a segment's mask that must remain unoccupied for
    /// the segment to be kept.
    pub overlap_keep_threshold: f32,
    /// Sigmoid probability above which a pixel counts as mask foreground.
    pub mask_binarization: f32,
}

impl Default for PanopticConfig {
    fn default() -> Self {
        PanopticConfig {
            object_score_threshold: 0.25,
            overlap_keep_threshold: 0.8,
            mask_binarization: 0.5,
        }
    }
}

struct Candidate {
    score: f32,
    order: usize,
    category_slot: usize,
    mask: Vec<bool>,
    area: usize,
}

/// Converts decoder predictions into a panoptic segmentation on an
/// `out_h x out_w` canvas.
pub fn panoptic_inference(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    categories: &CategoryTable,
    out_h: usize,
    out_w: usize,
    cfg: &PanopticConfig,
) -> Result<PanopticSegmentation> {
    let cshape = class_logits.shape();
    let mshape = mask_logits.shape();
    if cshape.len() != 2 || mshape.len() != 3 || cshape[0] != mshape[0] {
        return Err(Error::InvalidShape(format!(
            "expected Q x (C+1) class logits and Q x h x w mask logits, got {cshape:?} / {mshape:?}"
        )));
    }
    let num_classes = categories.len();
    if cshape[1] != num_classes + 1 {
        return Err(Error::InvalidShape(format!(
            "class logits have {} columns but the vocabulary needs {}",
            cshape[1],
            num_classes + 1
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(String::from("output canvas must be non-empty")));
    }
    let nq = cshape[0];
    let (mh, mw) = (mshape[1], mshape[2]);

    let mut candidates: Vec<Candidate> = Vec::new();
    for q in 0..nq {
        let mut probs = class_logits.data()[q * (num_classes + 1)..(q + 1) * (num_classes + 1)]
            .to_vec();
        softmax_inplace(&mut probs);
        let (mut best, mut best_p) = (0usize, probs[0]);
        for (slot, &p) in probs.iter().enumerate() {
            if p > best_p {
                best = slot;
                best_p = p;
            }
        }
        if best == num_classes {
            continue; // no-object
        }

        let plane =
            Tensor::new(&[1, mh, mw], mask_logits.data()[q * mh * mw..(q + 1) * mh * mw].to_vec())?;
        let resized = bilinear_resize(&plane, out_h, out_w)?;
        let mut mask = vec![false; out_h * out_w];
        let mut area = 0usize;
        let mut prob_sum = 0.0f32;
        for (i, &logit) in resized.data().iter().enumerate() {
            let p = mathx::sigmoid(logit);
            if p > cfg.mask_binarization {
                mask[i] = true;
                area += 1;
                prob_sum += p;
            }
        }
        if area == 0 {
            continue;
        }
        let score = best_p * (prob_sum / area as f32);
        if score < cfg.object_score_threshold {
            continue;
        }
        candidates.push(Candidate { score, order: q, category_slot: best, mask, area });
    }

    // Highest score first; query order breaks ties deterministically.
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.order.cmp(&b.order)));

    let mut id_map = vec![0u32; out_h * out_w];
    let mut segments: Vec<SegmentInfo> = Vec::new();
    // Stuff categories collapse into one segment per category.
    let mut stuff_ids: Vec<(u32, u32)> = Vec::new();
    for cand in &candidates {
        let surviving: Vec<usize> = cand
            .mask
            .iter()
            .enumerate()
            .filter(|&(i, &m)| m && id_map[i] == 0)
            .map(|(i, _)| i)
            .collect();
        if (surviving.len() as f64) / (cand.area as f64) < cfg.overlap_keep_threshold as f64 {
            continue;
        }
        let category = categories.slot(cand.category_slot);
        let id = if category.is_thing {
            let id = segments.len() as u32 + 1;
            segments.push(SegmentInfo { id, category_id: category.id, is_thing: true });
            id
        } else if let Some(&(_, id)) = stuff_ids.iter().find(|(cat, _)| *cat == category.id) {
            id
        } else {
            let id = segments.len() as u32 + 1;
            segments.push(SegmentInfo { id, category_id: category.id, is_thing: false });
            stuff_ids.push((category.id, id));
            id
        };
        for &i in &surviving {
            id_map[i] = id;
        }
    }

    let out = PanopticSegmentation { h: out_h, w: out_w, id_map, segments };
    debug_assert!(out.validate().is_ok());
    Ok(out)
}
