//! Online inference: detection filtering, a per-video memory bank of
//! momentum-updated embeddings, and instance ID assignment frame by frame.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::mask::Mask;
use crate::qfa::{match_queries, CostMatrix, MatchMethod};
use crate::synthetic_video::{read_json, write_json, Frame, MaskEntry, VideoClip, DATA_SCHEMA_VERSION};
use crate::vis_model::{FrameQuerySet, VisModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Minimum max non-background class probability of a detection.
    pub conf_threshold: f64,
    /// Cosine similarity below which a detection does not inherit an id.
    pub tau: f64,
    /// Retention weight of the stored embedding in the momentum update.
    pub alpha: f64,
    /// Entries unseen for more than this many frames are retired.
    pub retire_after: usize,
    /// Detections keeping less than this fraction of their mask after
    /// conflict resolution (or with an empty mask) are dropped before association.
    pub min_keep_fraction: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.3,
            tau: 0.3,
            alpha: 0.75,
            retire_after: 10,
            min_keep_fraction: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(OokdError::validation("tracker.alpha", "must lie in (0, 1)"));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(OokdError::validation("tracker.tau", "must lie in [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.min_keep_fraction) {
            return Err(OokdError::validation("tracker.min_keep_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub query: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f32; 4],
    /// Full-resolution mask after conflict resolution.
    pub mask: Mask,
    /// Mask area before conflict resolution.
    pub raw_area: usize,
    pub embedding: Vec<f32>,
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Bilinear upsampling (half-pixel centers) of a stride-`s` logit map, thresholded at 0.
fn upsample_mask(logits: &[f32], (h, w): (usize, usize), height: usize, width: usize) -> Mask {
    let mut m = Mask::empty(height, width);
    let axis = |i: usize, src: usize, dst: usize| -> (usize, usize, f32) {
        let p = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(src - 1), p - lo as f32)
    };
    for y in 0..height {
        let (y0, y1, fy) = axis(y, h, height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, w, width);
            let top = logits[y0 * w + x0] * (1.0 - fx) + logits[y0 * w + x1] * fx;
            let bottom = logits[y1 * w + x0] * (1.0 - fx) + logits[y1 * w + x1] * fx;
            if top * (1.0 - fy) + bottom * fy > 0.0 {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Queries whose max non-background probability reaches `conf_threshold`,
/// in descending score order, with overlapping pixels given to the higher score.
pub fn detect(frame: &FrameQuerySet, conf_threshold: f64, height: usize, width: usize) -> Vec<Detection> {
    let mut dets = Vec::new();
    for q in 0..frame.num_queries {
        let probs = softmax(&frame.class_logits[q]);
        let (class_id, score) = probs[..probs.len() - 1]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        if score < conf_threshold {
            continue;
        }
        let mask = upsample_mask(&frame.mask_logits[q], frame.mask_size, height, width);
        dets.push(Detection {
            query: q,
            class_id,
            score,
            bbox: frame.boxes[q],
            raw_area: mask.area(),
            mask,
            embedding: frame.embeddings[q].clone(),
        });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    let mut claimed = Mask::empty(height, width);
    for d in &mut dets {
        d.mask.subtract(&claimed);
        for (c, &v) in claimed.as_mut_slice().iter_mut().zip(d.mask.as_slice()) {
            *c |= v;
        }
    }
    dets
}

fn normalize(v: &mut [f32]) {
    let n = (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() + 1e-12).sqrt();
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub instance_id: u32,
    pub embedding: Vec<f32>,
    pub last_seen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub entries: Vec<MemoryEntry>,
    pub alpha: f64,
    pub tau: f64,
    pub retire_after: usize,
    next_id: u32,
}

impl MemoryBank {
    pub fn new(config: &TrackerConfig) -> Self {
        Self {
            entries: Vec::new(),
            alpha: config.alpha,
            tau: config.tau,
            retire_after: config.retire_after,
            next_id: 0,
        }
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    fn retire(&mut self, frame: usize) {
        let window = self.retire_after;
        self.entries.retain(|e| frame.saturating_sub(e.last_seen) <= window);
    }

    /// Cosine similarity of every detection (rows) to every entry (columns).
    pub fn similarity(&self, embeddings: &[Vec<f32>]) -> Vec<Vec<f64>> {
        embeddings
            .iter()
            .map(|d| self.entries.iter().map(|e| cosine(d, &e.embedding)).collect())
            .collect()
    }
}

/// One-to-one maximum-similarity assignment; returns the entry index per detection.
pub fn match_similarity(sim: &[Vec<f64>], tau: f64) -> Result<Vec<Option<usize>>> {
    let d = sim.len();
    let e = sim.first().map_or(0, |r| r.len());
    let mut out = vec![None; d];
    if d == 0 || e == 0 {
        return Ok(out);
    }
    // rows must be the larger side
    if d >= e {
        let data = sim.iter().flat_map(|r| r.iter().map(|s| -s)).collect();
        let a = match_queries(&CostMatrix::from_vec(d, e, data)?, MatchMethod::Hungarian)?;
        for (entry, &det) in a.sigma.iter().enumerate() {
            out[det] = Some(entry);
        }
    } else {
        let data = (0..e).flat_map(|j| (0..d).map(move |i| (i, j))).map(|(i, j)| -sim[i][j]).collect();
        let a = match_queries(&CostMatrix::from_vec(e, d, data)?, MatchMethod::Hungarian)?;
        for (det, &entry) in a.sigma.iter().enumerate() {
            out[det] = Some(entry);
        }
    }
    for (det, slot) in out.iter_mut().enumerate() {
        if let Some(entry) = *slot {
            if sim[det][entry] < tau {
                *slot = None;
            }
        }
    }
    Ok(out)
}

/// Assigns an id to every detection embedding at `frame`, updating `memory`:
/// matched entries take `normalize(α·e + (1−α)·f)`, unmatched detections spawn
/// fresh ids, and entries unseen for longer than the retention window are dropped.
pub fn assign_ids(embeddings: &[Vec<f32>], memory: &mut MemoryBank, frame: usize) -> Result<Vec<u32>> {
    memory.retire(frame);
    let sim = memory.similarity(embeddings);
    let matched = match_similarity(&sim, memory.tau)?;
    let alpha = memory.alpha as f32;
    let mut ids = Vec::with_capacity(embeddings.len());
    for (det, slot) in matched.iter().enumerate() {
        let mut f = embeddings[det].clone();
        normalize(&mut f);
        match slot {
            Some(idx) => {
                let entry = &mut memory.entries[*idx];
                for (e, x) in entry.embedding.iter_mut().zip(&f) {
                    *e = alpha * *e + (1.0 - alpha) * x;
                }
                normalize(&mut entry.embedding);
                entry.last_seen = frame;
                ids.push(entry.instance_id);
            }
            None => {
                let id = memory.next_id;
                memory.next_id += 1;
                ids.push(id);
                memory.entries.push(MemoryEntry {
                    instance_id: id,
                    embedding: f,
                    last_seen: frame,
                });
            }
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub instance_id: u32,
    pub class_id: usize,
    pub score: f64,
    /// One mask per frame; empty where the track is absent.
    #[serde(skip)]
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub clip_id: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub tracks: Vec<TrackResult>,
}

#[derive(Default)]
struct TrackAccumulator {
    class_votes: BTreeMap<usize, f64>,
    score_sum: f64,
    frames: usize,
    masks: Vec<Mask>,
}

/// Incremental tracker over a stream of per-frame query sets.
pub struct OnlineTracker {
    config: TrackerConfig,
    memory: MemoryBank,
    height: usize,
    width: usize,
    frame: usize,
    tracks: BTreeMap<u32, TrackAccumulator>,
}

impl OnlineTracker {
    pub fn new(config: TrackerConfig, height: usize, width: usize) -> Self {
        Self {
            memory: MemoryBank::new(&config),
            config,
            height,
            width,
            frame: 0,
            tracks: BTreeMap::new(),
        }
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }

    /// Processes the next frame and returns `(instance_id, detection)` pairs.
    pub fn step(&mut self, frame: &FrameQuerySet) -> Result<Vec<(u32, Detection)>> {
        let t = self.frame;
        let dets: Vec<Detection> = detect(frame, self.config.conf_threshold, self.height, self.width)
            .into_iter()
            .filter(|d| d.raw_area > 0 && d.mask.area() as f64 >= self.config.min_keep_fraction * d.raw_area as f64)
            .collect();
        let embs: Vec<Vec<f32>> = dets.iter().map(|d| d.embedding.clone()).collect();
        let ids = assign_ids(&embs, &mut self.memory, t)?;
        let (h, w) = (self.height, self.width);
        for (id, d) in ids.iter().zip(&dets) {
            let acc = self.tracks.entry(*id).or_default();
            if acc.masks.is_empty() {
                acc.masks = vec![Mask::empty(h, w); t];
            }
            while acc.masks.len() < t {
                acc.masks.push(Mask::empty(h, w));
            }
            if acc.masks.len() == t {
                acc.masks.push(d.mask.clone());
            } else {
                // a second detection in the same frame cannot share an id
                return Err(OokdError::Shape(format!("id {id} assigned twice in frame {t}")));
            }
            *acc.class_votes.entry(d.class_id).or_default() += d.score;
            acc.score_sum += d.score;
            acc.frames += 1;
        }
        self.frame += 1;
        Ok(ids.into_iter().zip(dets).collect())
    }

    pub fn finish(self, clip_id: &str) -> VideoPrediction {
        let n = self.frame;
        let (h, w) = (self.height, self.width);
        let tracks = self
            .tracks
            .into_iter()
            .map(|(id, mut acc)| {
                acc.masks.resize(n, Mask::empty(h, w));
                let class_id = acc
                    .class_votes
                    .iter()
                    .fold((0, f64::NEG_INFINITY), |best, (&c, &v)| if v > best.1 { (c, v) } else { best })
                    .0;
                TrackResult {
                    instance_id: id,
                    class_id,
                    score: acc.score_sum / acc.frames.max(1) as f64,
                    masks: acc.masks,
                }
            })
            .collect();
        VideoPrediction {
            clip_id: clip_id.to_string(),
            height: h,
            width: w,
            num_frames: n,
            tracks,
        }
    }
}

pub fn track_query_sets(
    clip_id: &str,
    sets: &[FrameQuerySet],
    height: usize,
    width: usize,
    config: &TrackerConfig,
) -> Result<VideoPrediction> {
    let mut tracker = OnlineTracker::new(config.clone(), height, width);
    for s in sets {
        tracker.step(s)?;
    }
    Ok(tracker.finish(clip_id))
}

/// Runs the model frame by frame (each frame sees only itself and the memory)
/// and tracks instances through the clip.
pub fn track_video(video: &VideoClip, model: &VisModel, config: &TrackerConfig) -> Result<VideoPrediction> {
    config.validate()?;
    track_frames(&video.clip_id, &video.frames, model, config)
}

pub fn track_frames(clip_id: &str, frames: &[Frame], model: &VisModel, config: &TrackerConfig) -> Result<VideoPrediction> {
    let (h, w) = frames.first().map_or((0, 0), |f| (f.height, f.width));
    let mut tracker = OnlineTracker::new(config.clone(), h, w);
    for f in frames {
        let set = model.infer(&[f])?.remove(0);
        tracker.step(&set)?;
    }
    Ok(tracker.finish(clip_id))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRecord {
    instance_id: u32,
    class_id: usize,
    score: f64,
    masks: Vec<MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    schema_version: u32,
    clip_id: String,
    num_frames: usize,
    height: usize,
    width: usize,
    tracks: Vec<TrackRecord>,
}

pub fn save_prediction(pred: &VideoPrediction, path: &Path) -> Result<()> {
    let record = PredictionRecord {
        schema_version: DATA_SCHEMA_VERSION,
        clip_id: pred.clip_id.clone(),
        num_frames: pred.num_frames,
        height: pred.height,
        width: pred.width,
        tracks: pred
            .tracks
            .iter()
            .map(|t| TrackRecord {
                instance_id: t.instance_id,
                class_id: t.class_id,
                score: t.score,
                masks: t
                    .masks
                    .iter()
                    .enumerate()
                    .map(|(frame, m)| MaskEntry { frame, counts: m.to_rle() })
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &record)
}

pub fn load_prediction(path: &Path) -> Result<VideoPrediction> {
    let r: PredictionRecord = read_json(path)?;
    if r.schema_version != DATA_SCHEMA_VERSION {
        return Err(OokdError::schema(path, format!("unsupported schema version {}", r.schema_version)));
    }
    let mut tracks = Vec::with_capacity(r.tracks.len());
    for t in r.tracks {
        if t.masks.len() != r.num_frames {
            return Err(OokdError::schema(path, format!("track {} has {} masks", t.instance_id, t.masks.len())));
        }
        let masks = t
            .masks
            .iter()
            .map(|e| Mask::from_rle(r.height, r.width, &e.counts))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| OokdError::schema(path, e.to_string()))?;
        tracks.push(TrackResult {
            instance_id: t.instance_id,
            class_id: t.class_id,
            score: t.score,
            masks,
        });
    }
    Ok(VideoPrediction {
        clip_id: r.clip_id,
        height: r.height,
        width: r.width,
        num_frames: r.num_frames,
        tracks,
    })
}

/// Saves one `<clip_id>.json` per prediction under `dir`.
pub fn save_predictions(preds: &[VideoPrediction], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| OokdError::io(dir, e))?;
    for p in preds {
        save_prediction(p, &dir.join(format!("{}.json", p.clip_id)))?;
    }
    Ok(())
}

pub fn load_predictions(dir: &Path) -> Result<Vec<VideoPrediction>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| OokdError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_prediction(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_upsampling_keeps_half_planes() {
        let logits: Vec<f32> = (0..16 * 16).map(|i| if i % 16 < 8 { 1.0 } else { -1.0 }).collect();
        let m = upsample_mask(&logits, (16, 16), 64, 64);
        assert_eq!(m.area(), 32 * 64);
        assert!((0..64).all(|y| m.get(y, 31) && !m.get(y, 32)));
        assert!(upsample_mask(&[1.0; 4], (2, 2), 8, 8).area() == 64);
        assert!(upsample_mask(&[-1.0; 4], (2, 2), 8, 8).is_empty());
    }
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f32]) -> Vec<f32> {
        let mut v = v.to_vec();
        normalize(&mut v);
        v
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> FrameQuerySet {
        let (h, w) = (4, 4);
        FrameQuerySet {
            num_queries: n,
            hidden_dim: 4,
            mask_size: (h, w),
            features: vec![0.0; n * 4],
            class_logits: (0..n).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
            boxes: (0..n).map(|_| [0.5, 0.5, 0.2, 0.2]).collect(),
            mask_logits: (0..n).map(|_| (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            embeddings: (0..n)
                .map(|_| unit(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>()))
                .collect(),
        }
    }

    #[test]
    fn detect_threshold_extremes_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&mut rng, 8);
        assert!(detect(&set, 1.0, 16, 16).is_empty());
        assert_eq!(detect(&set, 0.0, 16, 16).len(), 8);
        let mut prev = usize::MAX;
        for i in 0..=20 {
            let n = detect(&set, i as f64 / 20.0, 16, 16).len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn detect_resolves_conflicts_by_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 6);
        let dets = detect(&set, 0.0, 16, 16);
        for i in 0..dets.len() {
            assert!(i == 0 || dets[i - 1].score >= dets[i].score);
            for j in i + 1..dets.len() {
                assert_eq!(dets[i].mask.intersection_area(&dets[j].mask), 0);
            }
        }
        // the top detection keeps its full mask
        assert_eq!(dets[0].mask.area(), dets[0].raw_area);
    }

    #[test]
    fn empty_memory_spawns_sequential_ids() {
        let mut mem = MemoryBank::new(&TrackerConfig::default());
        let e = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        assert_eq!(assign_ids(&e, &mut mem, 0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn identical_embedding_inherits_id() {
        let mut mem = MemoryBank::new(&TrackerConfig::default());
        let basis = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        assign_ids(&basis, &mut mem, 0).unwrap();
        assert_eq!(assign_ids(&[basis[1].clone()], &mut mem, 1).unwrap(), vec![1]);
        assert_eq!(mem.next_id(), 3);
    }

    #[test]
    fn two_by_two_matches_brute_force() {
        let sim = vec![vec![0.9, 0.2], vec![0.1, 0.8]];
        let got = match_similarity(&sim, 0.3).unwrap();
        let straight = sim[0][0] + sim[1][1];
        let crossed = sim[0][1] + sim[1][0];
        let expected = if straight >= crossed { vec![Some(0), Some(1)] } else { vec![Some(1), Some(0)] };
        assert_eq!(got, expected);
        assert_eq!(got, vec![Some(0), Some(1)]);
    }

    #[test]
    fn below_tau_spawns_new_id() {
        let cfg = TrackerConfig::default();
        let mut mem = MemoryBank::new(&cfg);
        assign_ids(&[unit(&[1.0, 0.0])], &mut mem, 0).unwrap();
        let ids = assign_ids(&[unit(&[0.2, 1.0])], &mut mem, 1).unwrap();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn retired_ids_are_not_reused() {
        let cfg = TrackerConfig { retire_after: 2, ..TrackerConfig::default() };
        let mut mem = MemoryBank::new(&cfg);
        let e = unit(&[1.0, 0.0]);
        assert_eq!(assign_ids(&[e.clone()], &mut mem, 0).unwrap(), vec![0]);
        assert_eq!(assign_ids(&[e.clone()], &mut mem, 2).unwrap(), vec![0]);
        assert_eq!(assign_ids(&[e.clone()], &mut mem, 5).unwrap(), vec![1]);
    }

    #[test]
    fn memory_update_is_ema_then_renormalized() {
        let cfg = TrackerConfig::default();
        let mut mem = MemoryBank::new(&cfg);
        assign_ids(&[unit(&[1.0, 0.0])], &mut mem, 0).unwrap();
        assign_ids(&[unit(&[1.0, 1.0])], &mut mem, 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (x, y) = (0.75 + 0.25 * s, 0.25 * s);
        let n = (x * x + y * y).sqrt();
        let e = &mem.entries[0].embedding;
        assert!((e[0] as f64 - x / n).abs() < 1e-6 && (e[1] as f64 - y / n).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn memory_stays_unit_norm_and_ids_unique(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = TrackerConfig { retire_after: 3, ..TrackerConfig::default() };
            let mut mem = MemoryBank::new(&cfg);
            let mut seen = std::collections::BTreeSet::new();
            let mut retired = std::collections::BTreeSet::new();
            for t in 0..10 {
                let k = rng.random_range(0..5);
                let e: Vec<Vec<f32>> = (0..k)
                    .map(|_| unit(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>()))
                    .collect();
                let ids = assign_ids(&e, &mut mem, t).unwrap();
                let distinct: std::collections::BTreeSet<_> = ids.iter().copied().collect();
                prop_assert_eq!(distinct.len(), ids.len());
                prop_assert!(distinct.is_disjoint(&retired));
                seen.extend(distinct);
                let live: std::collections::BTreeSet<_> = mem.entries.iter().map(|e| e.instance_id).collect();
                retired.extend(seen.difference(&live).copied());
                for entry in &mem.entries {
                    let n: f64 = entry.embedding.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn causal_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sets: Vec<_> = (0..8).map(|_| random_set(&mut rng, 6)).collect();
        let full = track_query_sets("c", &sets, 16, 16, &TrackerConfig::default()).unwrap();
        for t in 1..8 {
            let part = track_query_sets("c", &sets[..t], 16, 16, &TrackerConfig::default()).unwrap();
            for tr in &part.tracks {
                let other = full.tracks.iter().find(|x| x.instance_id == tr.instance_id).unwrap();
                assert_eq!(&other.masks[..t], &tr.masks[..]);
            }
        }
    }

    #[test]
    fn prediction_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sets: Vec<_> = (0..3).map(|_| random_set(&mut rng, 5)).collect();
        let pred = track_query_sets("clip", &sets, 16, 16, &TrackerConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_predictions(&[pred.clone()], dir.path()).unwrap();
        let back = load_predictions(dir.path()).unwrap();
        assert_eq!(back, vec![pred]);
    }
}
