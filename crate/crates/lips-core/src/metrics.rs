//! Segmentation quality metrics: panoptic quality, mean IoU, and mask
//! average precision.
//!
//! Conventions shared by all three: id 0 marks void, matching requires the
//! same category, and averages run over the categories present in the ground
//! truth (mean IoU additionally admits categories that appear only in the
//! prediction).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::panoptic::PanopticSegmentation;

fn check_same_canvas(gt: &PanopticSegmentation, pred: &PanopticSegmentation) -> Result<()> {
    if (gt.h, gt.w) != (pred.h, pred.w) {
        return Err(Error::InvalidInput(format!(
            "canvas mismatch: ground truth {} x {}, prediction {} x {}",
            gt.h, gt.w, pred.h, pred.w
        )));
    }
    gt.validate()?;
    pred.validate()
}

/// Per-category panoptic quality statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPq {
    pub category_id: u32,
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

impl ClassPq {
    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_count as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.iou_sum / denom
        }
    }

    /// Mean IoU of the matched pairs.
    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    /// Recognition quality: detection F-score.
    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_count as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }
}

/// Panoptic quality averaged over the categories present in the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PqResult {
    pub per_class: Vec<ClassPq>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Matched (gt segment, pred segment) pairs with their IoU, for callers that
/// need the raw matching (tests, diagnostics).
pub type PqMatches = Vec<(u32, u32, f64)>;

/// Computes panoptic quality. Segments match when they share a category and
/// their IoU exceeds 0.5; ground-truth void pixels count toward neither the
/// intersection nor the union. When the ground truth covers no pixels at
/// all, the score is 1 if the prediction is also empty and 0 otherwise.
pub fn panoptic_quality(gt: &PanopticSegmentation, pred: &PanopticSegmentation) -> Result<PqResult> {
    Ok(panoptic_quality_with_matches(gt, pred)?.0)
}

pub fn panoptic_quality_with_matches(
    gt: &PanopticSegmentation,
    pred: &PanopticSegmentation,
) -> Result<(PqResult, PqMatches)> {
    check_same_canvas(gt, pred)?;

    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut pred_on_void: BTreeMap<u32, usize> = BTreeMap::new();
    for (&g, &p) in gt.id_map.iter().zip(pred.id_map.iter()) {
        if g != 0 {
            *gt_area.entry(g).or_insert(0) += 1;
        }
        if p != 0 {
            *pred_area.entry(p).or_insert(0) += 1;
            if g == 0 {
                *pred_on_void.entry(p).or_insert(0) += 1;
            } else {
                *inter.entry((g, p)).or_insert(0) += 1;
            }
        }
    }

    // Candidate pairs above the matching threshold, best IoU first.
    let mut pairs: Vec<(u32, u32, f64)> = Vec::new();
    for (&(g, p), &i) in &inter {
        let g_seg = gt.segment(g).expect("validated");
        let p_seg = pred.segment(p).expect("validated");
        if g_seg.category_id != p_seg.category_id {
            continue;
        }
        let void_overlap = pred_on_void.get(&p).copied().unwrap_or(0);
        let union = gt_area[&g] + pred_area[&p] - i - void_overlap;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            pairs.push((g, p, iou));
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut matched_gt: Vec<u32> = Vec::new();
    let mut matched_pred: Vec<u32> = Vec::new();
    let mut matches: PqMatches = Vec::new();
    for (g, p, iou) in pairs {
        if matched_gt.contains(&g) || matched_pred.contains(&p) {
            continue;
        }
        matched_gt.push(g);
        matched_pred.push(p);
        matches.push((g, p, iou));
    }

    // Categories present in the ground truth (via segments that actually
    // cover pixels), in id order.
    let mut class_ids: Vec<u32> = gt
        .segments
        .iter()
        .filter(|s| gt_area.get(&s.id).copied().unwrap_or(0) > 0)
        .map(|s| s.category_id)
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    let mut per_class: Vec<ClassPq> = class_ids
        .iter()
        .map(|&category_id| ClassPq { category_id, iou_sum: 0.0, tp: 0, fp: 0, fn_count: 0 })
        .collect();
    fn class_slot(cat: u32, per_class: &mut [ClassPq]) -> Option<&mut ClassPq> {
        per_class.iter_mut().find(|c| c.category_id == cat)
    }

    for &(g, _, iou) in &matches {
        let cat = gt.segment(g).expect("validated").category_id;
        let slot = class_slot(cat, &mut per_class).expect("gt category present");
        slot.tp += 1;
        slot.iou_sum += iou;
    }
    for seg in &gt.segments {
        if gt_area.get(&seg.id).copied().unwrap_or(0) == 0 {
            continue; // segments without pixels cannot be matched or missed
        }
        if !matched_gt.contains(&seg.id) {
            let slot = class_slot(seg.category_id, &mut per_class).expect("gt category present");
            slot.fn_count += 1;
        }
    }
    for seg in &pred.segments {
        if pred_area.get(&seg.id).copied().unwrap_or(0) == 0 {
            continue;
        }
        if !matched_pred.contains(&seg.id) {
            // Unmatched predictions only count against categories that the
            // ground truth contains.
            if let Some(slot) = class_slot(seg.category_id, &mut per_class) {
                slot.fp += 1;
            }
        }
    }

    let n = per_class.len() as f64;
    let result = if per_class.is_empty() {
        // No ground-truth content to recover. Two effectively empty
        // segmentations agree perfectly (so self-evaluation always scores
        // 100%); any predicted pixels against an empty ground truth score 0.
        let score = if pred_area.values().any(|&a| a > 0) { 0.0 } else { 1.0 };
        PqResult { per_class, pq: score, sq: score, rq: score }
    } else {
        let pq = per_class.iter().map(ClassPq::pq).sum::<f64>() / n;
        let sq = per_class.iter().map(ClassPq::sq).sum::<f64>() / n;
        let rq = per_class.iter().map(ClassPq::rq).sum::<f64>() / n;
        PqResult { per_class, pq, sq, rq }
    };
    Ok((result, matches))
}

/// Mean IoU over semantic (category) maps derived from the two panoptic
/// segmentations. Pixels that are void in the ground truth are ignored; the
/// average runs over categories present in either map on the valid area.
pub fn mean_iou(gt: &PanopticSegmentation, pred: &PanopticSegmentation) -> Result<f64> {
    check_same_canvas(gt, pred)?;
    let gt_sem = gt.semantic_map();
    let pred_sem = pred.semantic_map();

    let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<u32, usize> = BTreeMap::new();
    for (&g, &p) in gt_sem.iter().zip(pred_sem.iter()) {
        if g == 0 {
            continue;
        }
        *gt_count.entry(g).or_insert(0) += 1;
        if p != 0 {
            *pred_count.entry(p).or_insert(0) += 1;
        }
        if g == p {
            *inter.entry(g).or_insert(0) += 1;
        }
    }

    let mut classes: Vec<u32> = gt_count.keys().chain(pred_count.keys()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0f64;
    for &c in &classes {
        let i = inter.get(&c).copied().unwrap_or(0);
        let u = gt_count.get(&c).copied().unwrap_or(0) + pred_count.get(&c).copied().unwrap_or(0)
            - i;
        if u > 0 {
            sum += i as f64 / u as f64;
        }
    }
    Ok(sum / classes.len() as f64)
}

/// One instance mask for average-precision evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category_id: u32,
    pub mask: Vec<bool>,
}

/// A scored predicted instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub category_id: u32,
    pub score: f32,
    pub mask: Vec<bool>,
}

/// Extracts thing segments as instance masks.
pub fn instances_from_panoptic(p: &PanopticSegmentation) -> Vec<Instance> {
    p.segments
        .iter()
        .filter(|s| s.is_thing)
        .map(|s| Instance {
            category_id: s.category_id,
            mask: p.id_map.iter().map(|&id| id == s.id).collect(),
        })
        .collect()
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95 as exact ratios.
pub fn ap_iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Average precision at one IoU threshold for one category's instances.
/// Predictions must already be sorted by descending score.
fn ap_single(gts: &[&Instance], preds: &[&ScoredInstance], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for pred in preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = mask_iou(&pred.mask, &gt.mask);
            if iou >= threshold && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Precision/recall curve over prediction prefixes.
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (k + 1) as f64;
        let recall = tp as f64 / gts.len() as f64;
        curve.push((recall, precision));
    }

    // 101-point interpolated average precision.
    let mut sum = 0.0f64;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(recall, _)| *recall >= level)
            .map(|(_, precision)| *precision)
            .fold(0.0f64, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// COCO-style mask average precision: averaged over the IoU thresholds
/// 0.50:0.05:0.95 and over the categories present in the ground truth.
/// Ties in prediction scores keep their input order.
pub fn mask_average_precision(gts: &[Instance], preds: &[ScoredInstance]) -> Result<f64> {
    let canvas = gts.iter().map(|g| g.mask.len()).chain(preds.iter().map(|p| p.mask.len()));
    let mut sizes = canvas.collect::<Vec<_>>();
    sizes.dedup();
    if sizes.len() > 1 {
        return Err(Error::InvalidInput(format!(
            "instance masks disagree on canvas size: {sizes:?}"
        )));
    }

    let mut categories: Vec<u32> = gts.iter().map(|g| g.category_id).collect();
    categories.sort_unstable();
    categories.dedup();
    if categories.is_empty() {
        return Ok(0.0);
    }

    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &cat in &categories {
        let cat_gts: Vec<&Instance> = gts.iter().filter(|g| g.category_id == cat).collect();
        let mut cat_preds: Vec<&ScoredInstance> =
            preds.iter().filter(|p| p.category_id == cat).collect();
        cat_preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        for threshold in ap_iou_thresholds() {
            sum += ap_single(&cat_gts, &cat_preds, threshold);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}
