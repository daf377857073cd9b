//! Video-level evaluation: mask-sequence IoU, AP/AR over IoU thresholds with
//! greedy score-ordered matching, and the same-instance embedding similarity
//! histogram with a small PNG overlay plot.

use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::Path;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::losses::{match_to_targets, FrameTargets};
use crate::mask::Mask;
use crate::qfa::QfaConfig;
use crate::synthetic_video::VideoClip;
use crate::tracker::VideoPrediction;
use crate::vis_model::VisModel;

/// `0.50:0.05:0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// `Σ_t |p_t ∩ g_t| / Σ_t |p_t ∪ g_t|`; the shorter track is padded with empty
/// masks and two empty tracks give 0.
pub fn sequence_iou(pred: &[Mask], gt: &[Mask]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for t in 0..pred.len().max(gt.len()) {
        match (pred.get(t), gt.get(t)) {
            (Some(p), Some(g)) => {
                inter += p.intersection_area(g);
                union += p.union_area(g);
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub thresholds: Vec<f64>,
    /// AP averaged over classes, one entry per threshold.
    pub ap_per_threshold: Vec<f64>,
    /// mAP per class id (over thresholds); classes without ground truth are absent.
    pub per_class: BTreeMap<usize, f64>,
    /// Counts at the first threshold.
    pub matched: usize,
    pub missed: usize,
    pub false_tracks: usize,
    /// Whether every class's AP is non-increasing in the IoU threshold.
    pub ap_monotone: bool,
}

impl EvalResult {
    /// Mean AP over the given classes (those without ground truth are skipped).
    pub fn class_subset_map(&self, classes: &[usize]) -> f64 {
        let vals: Vec<f64> = classes.iter().filter_map(|c| self.per_class.get(c)).copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

struct Candidate {
    video: usize,
    score: f64,
    /// Sequence IoU with each GT track of the same class in the same video.
    ious: Vec<f64>,
}

/// 101-point interpolated AP of a score-sorted TP/FP sequence.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level - 1e-12);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Greedy matching in descending score order: each prediction takes the
/// unmatched GT with the highest IoU at or above `threshold`.
fn greedy_tp(cands: &[&Candidate], gt_per_video: &BTreeMap<usize, usize>, threshold: f64) -> Vec<bool> {
    let mut taken: BTreeMap<usize, Vec<bool>> = gt_per_video.iter().map(|(&v, &n)| (v, vec![false; n])).collect();
    cands
        .iter()
        .map(|c| {
            let used = taken.entry(c.video).or_default();
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in c.ious.iter().enumerate() {
                if !used[g] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Class-aware video AP/AR. Predictions are paired with ground-truth clips by `clip_id`.
pub fn video_map(predictions: &[VideoPrediction], ground_truth: &[VideoClip], thresholds: &[f64]) -> Result<EvalResult> {
    if thresholds.is_empty() {
        return Err(OokdError::validation("eval.thresholds", "no IoU thresholds"));
    }
    let mut by_clip: BTreeMap<&str, &VideoPrediction> = BTreeMap::new();
    for p in predictions {
        if !ground_truth.iter().any(|g| g.clip_id == p.clip_id) {
            return Err(OokdError::validation("eval.pred", format!("prediction for unknown clip {}", p.clip_id)));
        }
        if by_clip.insert(p.clip_id.as_str(), p).is_some() {
            return Err(OokdError::validation("eval.pred", format!("duplicate prediction for {}", p.clip_id)));
        }
    }
    for g in ground_truth {
        if let Some(p) = by_clip.get(g.clip_id.as_str()) {
            if p.num_frames != g.num_frames() || p.height != g.height() || p.width != g.width() {
                return Err(OokdError::validation(
                    "eval.pred",
                    format!("prediction for {} does not match the clip geometry", g.clip_id),
                ));
            }
        }
    }

    let mut classes: Vec<usize> = ground_truth
        .iter()
        .flat_map(|g| g.instances.iter().map(|i| i.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let nt = thresholds.len();
    let mut per_class = BTreeMap::new();
    let mut ap_sum = vec![0.0; nt];
    let mut ar1_sum = 0.0;
    let mut ar10_sum = 0.0;
    let (mut matched, mut missed, mut false_tracks) = (0, 0, 0);
    let mut ap_monotone = true;
    for &class in &classes {
        let mut gt_per_video = BTreeMap::new();
        let mut cands = Vec::new();
        let mut num_gt = 0;
        for (v, g) in ground_truth.iter().enumerate() {
            let gts: Vec<&Vec<Mask>> = g
                .instances
                .iter()
                .filter(|i| i.class_id == class)
                .map(|i| &i.masks)
                .collect();
            num_gt += gts.len();
            gt_per_video.insert(v, gts.len());
            if let Some(p) = by_clip.get(g.clip_id.as_str()) {
                for tr in p.tracks.iter().filter(|t| t.class_id == class) {
                    cands.push(Candidate {
                        video: v,
                        score: tr.score,
                        ious: gts.iter().map(|m| sequence_iou(&tr.masks, m)).collect(),
                    });
                }
            }
        }
        // stable: ties keep video and track order
        let mut order: Vec<&Candidate> = cands.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));

        let mut class_aps = Vec::with_capacity(nt);
        for (ti, &thr) in thresholds.iter().enumerate() {
            let tp = greedy_tp(&order, &gt_per_video, thr);
            let ap = interpolated_ap(&tp, num_gt);
            if ti == 0 {
                let hits = tp.iter().filter(|&&t| t).count();
                matched += hits;
                missed += num_gt - hits;
                false_tracks += tp.len() - hits;
            }
            class_aps.push(ap);
            ap_sum[ti] += ap;
        }
        if class_aps.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            log::warn!("AP of class {class} increases with the IoU threshold: {class_aps:?}");
            ap_monotone = false;
        }
        per_class.insert(class, class_aps.iter().sum::<f64>() / nt as f64);

        for (k, acc) in [(1usize, &mut ar1_sum), (10, &mut ar10_sum)] {
            let mut limited: Vec<&Candidate> = Vec::new();
            for v in gt_per_video.keys() {
                let mut mine: Vec<&Candidate> = order.iter().copied().filter(|c| c.video == *v).collect();
                mine.truncate(k);
                limited.extend(mine);
            }
            limited.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut rec = 0.0;
            for &thr in thresholds {
                let hits = greedy_tp(&limited, &gt_per_video, thr).iter().filter(|&&t| t).count();
                rec += if num_gt == 0 { 0.0 } else { hits as f64 / num_gt as f64 };
            }
            *acc += rec / nt as f64;
        }
    }
    let nc = classes.len().max(1) as f64;
    let ap_per_threshold: Vec<f64> = ap_sum.iter().map(|s| s / nc).collect();
    let find = |t: f64| {
        thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map_or(0.0, |i| ap_per_threshold[i])
    };
    Ok(EvalResult {
        map: ap_per_threshold.iter().sum::<f64>() / nt as f64,
        ap50: find(0.5),
        ap75: find(0.75),
        ar1: ar1_sum / nc,
        ar10: ar10_sum / nc,
        thresholds: thresholds.to_vec(),
        ap_per_threshold,
        per_class,
        matched,
        missed,
        false_tracks,
        ap_monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub bins: usize,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub num_pairs: usize,
}

impl SimilarityHistogram {
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for &v in values {
            let x = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
            counts[x.min(bins - 1)] += 1;
        }
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            bins,
            counts,
            mean,
            num_pairs: values.len(),
        }
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|i| -1.0 + 2.0 * i as f64 / self.bins as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    pub num_videos: usize,
    pub bins: usize,
    pub pairs_per_instance: usize,
    pub seed: u64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            num_videos: 100,
            bins: 40,
            pairs_per_instance: 5,
            seed: 0,
        }
    }
}

/// Cosine similarities between the GT-matched query embeddings of the same
/// instance on two different frames. Instances matched on fewer than two frames are skipped.
pub fn same_instance_similarities(
    model: &VisModel,
    dataset: &[VideoClip],
    config: &HistogramConfig,
    qfa: &QfaConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut values = Vec::new();
    for clip in dataset.iter().take(config.num_videos) {
        let frames: Vec<_> = clip.frames.iter().collect();
        let out = model.forward_frames(&frames)?;
        let emb = out.embeddings.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let mut per_instance: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for t in 0..clip.num_frames() {
            let targets = FrameTargets::from_clip(clip, t);
            let a = match_to_targets(&out.class_logits.get(t)?, &out.boxes.get(t)?, &targets, qfa)?;
            for (&q, &id) in a.sigma.iter().zip(&targets.instance_ids) {
                per_instance.entry(id).or_default().push(emb[t][q].clone());
            }
        }
        for embs in per_instance.values() {
            if embs.len() < 2 {
                continue;
            }
            let mut pairs: Vec<(usize, usize)> = (0..embs.len())
                .flat_map(|i| (i + 1..embs.len()).map(move |j| (i, j)))
                .collect();
            pairs.shuffle(&mut rng);
            for &(i, j) in pairs.iter().take(config.pairs_per_instance) {
                values.push(cosine(&embs[i], &embs[j]));
            }
        }
    }
    Ok(values)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

pub fn similarity_histogram(
    model: &VisModel,
    dataset: &[VideoClip],
    config: &HistogramConfig,
    qfa: &QfaConfig,
) -> Result<SimilarityHistogram> {
    if config.bins == 0 {
        return Err(OokdError::validation("histogram.bins", "must be positive"));
    }
    let values = same_instance_similarities(model, dataset, config, qfa)?;
    Ok(SimilarityHistogram::from_values(&values, config.bins))
}

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

/// Overlay plot of normalized histograms (one outlined step curve per
/// histogram) with a vertical line at each mean.
pub fn plot_histograms(histograms: &[SimilarityHistogram], path: &Path) -> Result<()> {
    let (w, h) = (480usize, 280usize);
    let (left, right, top, bottom) = (30usize, 10usize, 10usize, 30usize);
    let mut img = vec![255u8; w * h * 3];
    let put = |img: &mut Vec<u8>, x: usize, y: usize, c: [u8; 3]| {
        if x < w && y < h {
            img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    };
    let pw = w - left - right;
    let ph = h - top - bottom;
    for x in left..=left + pw {
        put(&mut img, x, top + ph, [0, 0, 0]);
    }
    for y in top..=top + ph {
        put(&mut img, left, y, [0, 0, 0]);
    }
    // ticks at -1, -0.5, 0, 0.5, 1
    for i in 0..=4 {
        let x = left + pw * i / 4;
        for y in top + ph..top + ph + 5 {
            put(&mut img, x, y, [0, 0, 0]);
        }
    }
    let peak = histograms
        .iter()
        .flat_map(|hg| {
            let n = hg.num_pairs.max(1) as f64;
            hg.counts.iter().map(move |&c| c as f64 / n)
        })
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for (k, hg) in histograms.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let n = hg.num_pairs.max(1) as f64;
        let mut prev_y = top + ph;
        for (b, &c) in hg.counts.iter().enumerate() {
            let x0 = left + pw * b / hg.bins;
            let x1 = left + pw * (b + 1) / hg.bins;
            let y = top + ph - ((c as f64 / n) / peak * ph as f64).round() as usize;
            for yy in prev_y.min(y)..=prev_y.max(y) {
                put(&mut img, x0, yy, color);
            }
            for xx in x0..=x1 {
                put(&mut img, xx, y, color);
                put(&mut img, xx, y.saturating_sub(1), color);
            }
            prev_y = y;
        }
        let mx = left + ((hg.mean + 1.0) / 2.0 * pw as f64).round() as usize;
        for y in (top..top + ph).step_by(2) {
            put(&mut img, mx, y, color);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| OokdError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| OokdError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| OokdError::schema(path, e.to_string()))?;
    writer
        .write_image_data(&img)
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    Ok(())
}
