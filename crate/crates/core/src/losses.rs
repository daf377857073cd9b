//! Training objectives: the per-frame set-prediction loss (classification, box,
//! mask, contrastive embedding), the cosine distillation loss and their totals.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::mask::{BoxCxcywh, Mask};
use crate::qfa::{cost_matrix, match_queries, Assignment, QfaConfig};
use crate::synthetic_video::VideoClip;

pub const DEFAULT_NO_OBJECT_WEIGHT: f64 = 0.1;
pub const DEFAULT_EMBED_TEMPERATURE: f64 = 0.1;
const COS_EPS: f64 = 1e-12;
const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Box term (L1 + GIoU).
    pub lambda1: f64,
    /// Mask term (dice + BCE).
    pub lambda2: f64,
    /// Contrastive embedding term.
    pub lambda3: f64,
    /// Distillation term.
    pub lambda4: f64,
    pub no_object_weight: f64,
    pub embed_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 2.0,
            lambda3: 1.0,
            lambda4: 1.0,
            no_object_weight: DEFAULT_NO_OBJECT_WEIGHT,
            embed_temperature: DEFAULT_EMBED_TEMPERATURE,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.lambda1", self.lambda1),
            ("loss.lambda2", self.lambda2),
            ("loss.lambda3", self.lambda3),
            ("loss.lambda4", self.lambda4),
            ("loss.no_object_weight", self.no_object_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(OokdError::validation(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.embed_temperature > 0.0) {
            return Err(OokdError::validation("loss.embed_temperature", "must be positive"));
        }
        Ok(())
    }
}

/// A loss value that may have been skipped for lack of inputs.
#[derive(Debug, Clone)]
pub struct MaybeLoss {
    pub value: Tensor,
    pub skipped: bool,
}

fn scalar_zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

/// Ground truth of one frame: the instances visible in it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub instance_ids: Vec<u32>,
    pub classes: Vec<usize>,
    pub boxes: Vec<BoxCxcywh>,
    pub masks: Vec<Mask>,
}

impl FrameTargets {
    pub fn from_clip(clip: &VideoClip, t: usize) -> Self {
        let mut out = Self {
            instance_ids: Vec::new(),
            classes: Vec::new(),
            boxes: Vec::new(),
            masks: Vec::new(),
        };
        for inst in &clip.instances {
            if inst.visible.get(t).copied().unwrap_or(false) {
                out.instance_ids.push(inst.instance_id);
                out.classes.push(inst.class_id);
                out.boxes.push(inst.boxes[t]);
                out.masks.push(inst.masks[t].clone());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Matches the `N` predictions of one frame to its ground truth with the
/// class + box cost. No ground truth gives an empty assignment.
pub fn match_to_targets(logits: &Tensor, boxes: &Tensor, targets: &FrameTargets, qfa: &QfaConfig) -> Result<Assignment> {
    if targets.is_empty() {
        return Ok(Assignment::empty(qfa.mode));
    }
    let logits = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let boxes: Vec<BoxCxcywh> = boxes
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|b| BoxCxcywh::from_array([b[0], b[1], b[2], b[3]]))
        .collect();
    let cost = cost_matrix(&logits, &boxes, &targets.classes, &targets.boxes, qfa.lambda_b)?;
    match_queries(&cost, qfa.mode)
}

/// `(query, instance_id)` for every matched ground truth.
pub fn matched_ids(assignment: &Assignment, targets: &FrameTargets) -> Vec<(usize, u32)> {
    assignment
        .sigma
        .iter()
        .zip(&targets.instance_ids)
        .map(|(&q, &id)| (q, id))
        .collect()
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + COS_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `(1/M) Σ (1 − cos(student_m, teacher_m))` over rows of two `(M, C)` tensors.
/// The teacher side is detached. `M = 0` gives 0 with `skipped` set.
pub fn kd_loss(student: &Tensor, teacher: &Tensor) -> Result<MaybeLoss> {
    let (m, c) = student.dims2()?;
    if teacher.dims2()? != (m, c) {
        return Err(OokdError::Shape(format!(
            "kd pairs: student {:?} vs teacher {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    if m == 0 {
        return Ok(MaybeLoss {
            value: scalar_zero(student.dtype(), student.device())?,
            skipped: true,
        });
    }
    let cos = (unit_rows(student)? * unit_rows(&teacher.detach())?)?.sum(D::Minus1)?;
    let value = (1.0 - cos)?.mean_all()?;
    Ok(MaybeLoss { value, skipped: false })
}

/// Softmax cross-entropy over `(N, N_c)` logits. Query `n` targets
/// `gt_classes[g]` when `gt_of_query[n] == Some(g)` and the no-object slot
/// otherwise; no-object rows are down-weighted and the result is a weighted mean.
pub fn classification_loss(
    logits: &Tensor,
    gt_of_query: &[Option<usize>],
    gt_classes: &[usize],
    no_object_weight: f64,
) -> Result<Tensor> {
    let (n, nc) = logits.dims2()?;
    if gt_of_query.len() != n {
        return Err(OokdError::Shape(format!("{} assignments for {n} queries", gt_of_query.len())));
    }
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for g in gt_of_query {
        match g {
            Some(g) => {
                let c = *gt_classes
                    .get(*g)
                    .ok_or_else(|| OokdError::Shape(format!("gt index {g} out of range")))?;
                if c + 1 >= nc {
                    return Err(OokdError::validation("class", format!("class {c} out of range for {nc} logits")));
                }
                targets.push(c as u32);
                weights.push(1.0);
            }
            None => {
                targets.push((nc - 1) as u32);
                weights.push(no_object_weight);
            }
        }
    }
    let dev = logits.device();
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_probs
        .gather(&Tensor::from_vec(targets, (n, 1), dev)?, 1)?
        .squeeze(1)?;
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return scalar_zero(logits.dtype(), dev);
    }
    let w = Tensor::from_vec(weights, n, dev)?.to_dtype(logits.dtype())?;
    Ok(((picked * w)?.sum_all()?.neg()? / total_w)?)
}

fn corners(b: &Tensor) -> Result<[Tensor; 4]> {
    let cx = b.narrow(1, 0, 1)?;
    let cy = b.narrow(1, 1, 1)?;
    let hw = (b.narrow(1, 2, 1)? * 0.5)?;
    let hh = (b.narrow(1, 3, 1)? * 0.5)?;
    Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
}

/// Row-wise GIoU of two `(M, 4)` `(cx, cy, w, h)` tensors, shape `(M,)`.
pub fn giou_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hull = ((ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)? * (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?)?;
    let iou = (&inter / &union)?;
    let giou = (iou - ((&hull - &union)? / &hull)?)?;
    Ok(giou.squeeze(1)?)
}

/// L1 (summed over the four coordinates) plus `1 − GIoU` on matched pairs,
/// averaged over `M`. `sigma[m]` is the query matched to GT `m`.
pub fn box_loss(pred_boxes: &Tensor, sigma: &[usize], gt_boxes: &[BoxCxcywh]) -> Result<Tensor> {
    if sigma.len() != gt_boxes.len() {
        return Err(OokdError::Shape(format!("{} matches for {} gt boxes", sigma.len(), gt_boxes.len())));
    }
    let dev = pred_boxes.device();
    if sigma.is_empty() {
        return scalar_zero(pred_boxes.dtype(), dev);
    }
    let m = sigma.len();
    let pred = pred_boxes.index_select(&index_tensor(sigma, dev)?, 0)?;
    let gt: Vec<f64> = gt_boxes.iter().flat_map(|b| b.to_array()).collect();
    let gt = Tensor::from_vec(gt, (m, 4), dev)?.to_dtype(pred_boxes.dtype())?;
    let l1 = (&pred - &gt)?.abs()?.sum(1)?;
    let g = giou_rows(&pred, &gt)?;
    Ok(((l1 + (1.0 - g)?)?.sum_all()? / m as f64)?)
}

/// Area-fraction downsampling of a mask by an integer factor, row-major.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Vec<f32>> {
    if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(OokdError::Shape(format!(
            "mask {}x{} not divisible by {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut out = vec![0f32; h * w];
    let norm = 1.0 / (factor * factor) as f32;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                out[(y / factor) * w + x / factor] += norm;
            }
        }
    }
    Ok(out)
}

/// Dice (squared denominator) plus mean binary cross-entropy between matched
/// mask logits `(N, h, w)` and full-resolution GT masks downsampled to `h x w`.
/// Pairs with an empty GT mask are skipped; the mean runs over the rest.
pub fn mask_loss(mask_logits: &Tensor, sigma: &[usize], gt_masks: &[Mask]) -> Result<Tensor> {
    if sigma.len() != gt_masks.len() {
        return Err(OokdError::Shape(format!("{} matches for {} gt masks", sigma.len(), gt_masks.len())));
    }
    let (_, h, w) = mask_logits.dims3()?;
    let dev = mask_logits.device();
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for (&q, gt) in sigma.iter().zip(gt_masks) {
        if gt.is_empty() {
            continue;
        }
        if gt.height % h != 0 || gt.height / h != gt.width / w || gt.width % w != 0 {
            return Err(OokdError::Shape(format!("gt mask {}x{} vs logits {h}x{w}", gt.height, gt.width)));
        }
        queries.push(q);
        targets.extend(downsample_mask(gt, gt.height / h)?);
    }
    if queries.is_empty() {
        return scalar_zero(mask_logits.dtype(), dev);
    }
    let k = queries.len();
    let x = mask_logits
        .index_select(&index_tensor(&queries, dev)?, 0)?
        .reshape((k, h * w))?;
    let g = Tensor::from_vec(targets, (k, h * w), dev)?.to_dtype(x.dtype())?;
    Ok(((dice_rows(&x, &g)? + bce_rows(&x, &g)?)?.sum_all()? / k as f64)?)
}

/// `1 − 2Σpg / (Σp² + Σg²)` per row with `p = sigmoid(x)`.
pub fn dice_rows(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    let num = ((&p * targets)?.sum(1)? * 2.0)?;
    let den = ((p.sqr()?.sum(1)? + targets.sqr()?.sum(1)?)? + DICE_EPS)?;
    Ok((1.0 - (num / den)?)?)
}

/// Numerically stable per-row mean of `BCE(sigmoid(x), g)`.
pub fn bce_rows(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (logits * targets)?)? + softplus)?;
    Ok(per.mean(1)?)
}

/// Two-frame contrastive loss. `matched_a` lists `(query, instance_id)` of
/// GT-matched queries in frame A (likewise B). For each instance present in
/// both frames, its A query is scored against every matched B query; the B
/// query of the same instance is the positive. Symmetrized over A and B.
pub fn embed_loss(
    emb_a: &Tensor,
    matched_a: &[(usize, u32)],
    emb_b: &Tensor,
    matched_b: &[(usize, u32)],
    temperature: f64,
) -> Result<MaybeLoss> {
    let dev = emb_a.device();
    let shared: Vec<u32> = matched_a
        .iter()
        .map(|&(_, id)| id)
        .filter(|id| matched_b.iter().any(|&(_, j)| j == *id))
        .collect();
    if shared.is_empty() {
        return Ok(MaybeLoss {
            value: scalar_zero(emb_a.dtype(), dev)?,
            skipped: true,
        });
    }
    let one_side = |ea: &Tensor, ma: &[(usize, u32)], eb: &Tensor, mb: &[(usize, u32)]| -> Result<Tensor> {
        let anchor_q: Vec<usize> = shared
            .iter()
            .map(|id| ma.iter().find(|&&(_, j)| j == *id).map(|&(q, _)| q).unwrap())
            .collect();
        let cand_q: Vec<usize> = mb.iter().map(|&(q, _)| q).collect();
        let pos: Vec<u32> = shared
            .iter()
            .map(|id| mb.iter().position(|&(_, j)| j == *id).unwrap() as u32)
            .collect();
        let anchors = ea.index_select(&index_tensor(&anchor_q, dev)?, 0)?;
        let cands = eb.index_select(&index_tensor(&cand_q, dev)?, 0)?;
        let logits = (anchors.matmul(&cands.t()?)? / temperature)?;
        let lp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let n = pos.len();
        let picked = lp.gather(&Tensor::from_vec(pos, (n, 1), dev)?, 1)?;
        Ok(picked.mean_all()?.neg()?)
    };
    let ab = one_side(emb_a, matched_a, emb_b, matched_b)?;
    let ba = one_side(emb_b, matched_b, emb_a, matched_a)?;
    Ok(MaybeLoss {
        value: ((ab + ba)? * 0.5)?,
        skipped: false,
    })
}

/// Unweighted terms of the per-frame objective.
#[derive(Debug, Clone)]
pub struct IdolTerms {
    pub cls: Tensor,
    pub bbox: Tensor,
    pub mask: Tensor,
    pub embed: Tensor,
}

/// Scalar values of every term, for logging.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub embed: f64,
    pub idol: f64,
    pub kd: f64,
    pub kd_skipped: bool,
    pub total: f64,
}

/// `cls + λ1·box + λ2·mask + λ3·embed`.
pub fn idol_loss(terms: &IdolTerms, weights: &LossWeights) -> Result<Tensor> {
    let mut total = terms.cls.clone();
    for (t, w) in [
        (&terms.bbox, weights.lambda1),
        (&terms.mask, weights.lambda2),
        (&terms.embed, weights.lambda3),
    ] {
        if w != 0.0 {
            total = (total + (t * w)?)?;
        }
    }
    Ok(total)
}

/// `idol + λ4·kd`.
pub fn total_loss(idol: &Tensor, kd: &Tensor, lambda4: f64) -> Result<Tensor> {
    if lambda4 == 0.0 {
        return Ok(idol.clone());
    }
    Ok((idol + (kd * lambda4)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossBreakdown {
    pub fn from_terms(terms: &IdolTerms, idol: &Tensor, kd: &MaybeLoss, total: &Tensor) -> Result<Self> {
        Ok(Self {
            cls: scalar(&terms.cls)?,
            bbox: scalar(&terms.bbox)?,
            mask: scalar(&terms.mask)?,
            embed: scalar(&terms.embed)?,
            idol: scalar(idol)?,
            kd: scalar(&kd.value)?,
            kd_skipped: kd.skipped,
            total: scalar(total)?,
        })
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let mut out = Self::default();
        for b in items {
            out.cls += b.cls / n;
            out.bbox += b.bbox / n;
            out.mask += b.mask / n;
            out.embed += b.embed / n;
            out.idol += b.idol / n;
            out.kd += b.kd / n;
            out.total += b.total / n;
        }
        out.kd_skipped = items.iter().all(|b| b.kd_skipped);
        out
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("cls", self.cls),
            ("box", self.bbox),
            ("mask", self.mask),
            ("embed", self.embed),
            ("idol", self.idol),
            ("kd", self.kd),
            ("total", self.total),
        ])
    }
}
