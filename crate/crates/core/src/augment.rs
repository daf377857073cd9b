//! Minor-Paste: copy-paste of minor-class instance tracks, with a paste
//! probability that grows linearly as a class gets rarer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::mask::Mask;
use crate::synthetic_video::{InstanceTrack, VideoClip};

pub const DEFAULT_K: f64 = 0.7;
pub const DEFAULT_MINOR_THRESHOLD: f64 = 0.10;
/// A paste whose visible area stays below this on every frame is aborted.
pub const MIN_PASTE_AREA: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Instance frequency per class id.
    pub p: Vec<f64>,
    /// Paste probability per class id, in `[0, k]`.
    pub p_s: Vec<f64>,
    pub k: f64,
    pub minor_threshold: f64,
}

impl ClassStats {
    pub fn from_frequencies(p: Vec<f64>, k: f64, minor_threshold: f64) -> Result<Self> {
        let p_s = paste_probabilities(&p, k)?;
        Ok(Self {
            p,
            p_s,
            k,
            minor_threshold,
        })
    }

    pub fn is_minor(&self, class_id: usize) -> bool {
        self.p.get(class_id).is_some_and(|&p| p < self.minor_threshold)
    }

    pub fn paste_probability(&self, class_id: usize) -> f64 {
        self.p_s.get(class_id).copied().unwrap_or(0.0)
    }

    /// Plain-text table of `p_c` and `p^s_c`, one row per class.
    pub fn render_table(&self, names: Option<&[String]>) -> String {
        let mut out = String::from("class  name                 p_c       p_s_c     minor\n");
        for (c, (&p, &ps)) in self.p.iter().zip(&self.p_s).enumerate() {
            let name = names.and_then(|n| n.get(c)).map_or("-", |s| s.as_str());
            out.push_str(&format!(
                "{c:<6} {name:<20} {p:<9.4} {ps:<9.4} {}\n",
                if self.is_minor(c) { "yes" } else { "no" }
            ));
        }
        out
    }
}

/// `p^s_c = k (max p - p_c) / (max p - min p)`; all zeros when every class is equally frequent.
pub fn paste_probabilities(p: &[f64], k: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&k) {
        return Err(OokdError::validation("augment.k", format!("{k} is outside [0, 1]")));
    }
    if p.is_empty() {
        return Err(OokdError::validation("p", "no class frequencies"));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(OokdError::validation("p", "frequencies must lie in [0, 1]"));
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(vec![0.0; p.len()]);
    }
    Ok(p.iter().map(|&pc| k * (max - pc) / (max - min)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PasteSource {
    pub clip_index: usize,
    pub instance_index: usize,
}

/// Every instance of a minor class (frequency below the threshold) that is visible at least once.
pub fn select_minor_sources(dataset: &[VideoClip], stats: &ClassStats) -> Vec<PasteSource> {
    let mut out = Vec::new();
    for (ci, clip) in dataset.iter().enumerate() {
        for (ii, inst) in clip.instances.iter().enumerate() {
            if stats.is_minor(inst.class_id) && inst.num_visible() > 0 {
                out.push(PasteSource {
                    clip_index: ci,
                    instance_index: ii,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PasteOutcome {
    Pasted { instance_id: u32, offset: (i64, i64) },
    NotSampled,
    EmptySource,
    TooSmall,
}

/// Bernoulli draw with probability `paste_prob`, then a paste at a random anchor.
///
/// One uniform draw is always consumed for the Bernoulli trial so the rng
/// stream does not depend on the outcome.
pub fn minor_paste<R: Rng + ?Sized>(
    target: &VideoClip,
    source: &VideoClip,
    source_instance: usize,
    paste_prob: f64,
    rng: &mut R,
) -> Result<(VideoClip, PasteOutcome)> {
    let draw: f64 = rng.random();
    if draw >= paste_prob {
        return Ok((target.clone(), PasteOutcome::NotSampled));
    }
    let track = source
        .instances
        .get(source_instance)
        .ok_or_else(|| OokdError::validation("source_instance", "index out of range"))?;
    let t_len = target.num_frames();
    let used: Vec<&Mask> = (0..t_len)
        .map(|t| &track.masks[t.min(track.masks.len() - 1)])
        .collect();
    let bounds = used.iter().filter_map(|m| m.pixel_bounds()).reduce(|a, b| {
        (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3))
    });
    let Some((x0, y0, x1, y1)) = bounds else {
        log::warn!(
            "clip {} instance {}: source mask empty on all frames, paste skipped",
            source.clip_id,
            track.instance_id
        );
        return Ok((target.clone(), PasteOutcome::EmptySource));
    };
    let (h, w) = (target.height() as i64, target.width() as i64);
    let dx_range = offset_range(x0 as i64, x1 as i64, w);
    let dy_range = offset_range(y0 as i64, y1 as i64, h);
    let dx = rng.random_range(dx_range.0..=dx_range.1);
    let dy = rng.random_range(dy_range.0..=dy_range.1);
    paste_at(target, source, source_instance, (dx, dy))
}

// Offsets that keep the union box inside the frame; if the box is wider than
// the frame, any offset keeping some overlap.
fn offset_range(lo: i64, hi: i64, size: i64) -> (i64, i64) {
    let a = -lo;
    let b = size - 1 - hi;
    if a <= b {
        (a, b)
    } else {
        (-hi, size - 1 - lo)
    }
}

/// Deterministic paste of a source track into `target`, translated by `offset = (dx, dy)` pixels.
///
/// Source frames are clamped to the last source frame when the source is
/// shorter than the target. Pasted pixels overwrite the target, overlapped
/// target masks lose the covered pixels and their boxes are recomputed.
pub fn paste_at(
    target: &VideoClip,
    source: &VideoClip,
    source_instance: usize,
    offset: (i64, i64),
) -> Result<(VideoClip, PasteOutcome)> {
    let track = source
        .instances
        .get(source_instance)
        .ok_or_else(|| OokdError::validation("source_instance", "index out of range"))?;
    if track.masks.iter().all(|m| m.is_empty()) {
        log::warn!(
            "clip {} instance {}: source mask empty on all frames, paste skipped",
            source.clip_id,
            track.instance_id
        );
        return Ok((target.clone(), PasteOutcome::EmptySource));
    }
    let (h, w) = (target.height(), target.width());
    let (dx, dy) = offset;
    let mut pasted_masks = Vec::with_capacity(target.num_frames());
    for t in 0..target.num_frames() {
        let st = t.min(track.masks.len() - 1);
        let src = &track.masks[st];
        let mut m = Mask::empty(h, w);
        for sy in 0..src.height {
            for sx in 0..src.width {
                if !src.get(sy, sx) {
                    continue;
                }
                let ty = sy as i64 + dy;
                let tx = sx as i64 + dx;
                if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                    m.set(ty as usize, tx as usize, true);
                }
            }
        }
        pasted_masks.push(m);
    }
    if pasted_masks.iter().all(|m| m.area() < MIN_PASTE_AREA) {
        return Ok((target.clone(), PasteOutcome::TooSmall));
    }

    let mut out = target.clone();
    for (t, pm) in pasted_masks.iter().enumerate() {
        let st = t.min(track.masks.len() - 1);
        let src_frame = &source.frames[st];
        let frame = &mut out.frames[t];
        for y in 0..h {
            for x in 0..w {
                if pm.get(y, x) {
                    let sy = (y as i64 - dy) as usize;
                    let sx = (x as i64 - dx) as usize;
                    frame.set_pixel(y, x, src_frame.pixel(sy, sx));
                }
            }
        }
        for inst in &mut out.instances {
            inst.masks[t].subtract(pm);
        }
    }
    for inst in &mut out.instances {
        inst.refresh_boxes();
    }
    let instance_id = out
        .instances
        .iter()
        .map(|i| i.instance_id + 1)
        .max()
        .unwrap_or(0);
    out.instances
        .push(InstanceTrack::from_masks(instance_id, track.class_id, pasted_masks));
    Ok((
        out,
        PasteOutcome::Pasted {
            instance_id,
            offset,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Class-imbalance-aware pasting of minor-class instances.
    Minor,
    /// Clip-Paste style: any instance, one fixed probability.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mode: AugmentMode,
    pub k: f64,
    pub minor_threshold: f64,
    pub max_pastes: usize,
    /// Paste probability used in `uniform` mode.
    pub uniform_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mode: AugmentMode::Minor,
            k: DEFAULT_K,
            minor_threshold: DEFAULT_MINOR_THRESHOLD,
            max_pastes: 1,
            uniform_prob: 0.35,
        }
    }
}

/// Source pool and class statistics for on-the-fly augmentation of one training set.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub config: AugmentConfig,
    pub stats: ClassStats,
    pub sources: Vec<PasteSource>,
}

impl Augmenter {
    pub fn new(dataset: &[VideoClip], config: AugmentConfig) -> Result<Self> {
        let base = crate::synthetic_video::compute_class_stats(dataset)?;
        let stats = ClassStats::from_frequencies(base.p, config.k, config.minor_threshold)?;
        let sources = match config.mode {
            AugmentMode::Minor => select_minor_sources(dataset, &stats),
            AugmentMode::Uniform => dataset
                .iter()
                .enumerate()
                .flat_map(|(ci, clip)| {
                    clip.instances
                        .iter()
                        .enumerate()
                        .filter(|(_, inst)| inst.num_visible() > 0)
                        .map(move |(ii, _)| PasteSource {
                            clip_index: ci,
                            instance_index: ii,
                        })
                })
                .collect(),
        };
        Ok(Self {
            config,
            stats,
            sources,
        })
    }

    /// Applies up to `max_pastes` paste attempts to `target`; the source is
    /// drawn uniformly from the pool, skipping the target clip itself.
    pub fn augment<R: Rng + ?Sized>(
        &self,
        target_index: usize,
        dataset: &[VideoClip],
        rng: &mut R,
    ) -> Result<(VideoClip, usize)> {
        let mut clip = dataset[target_index].clone();
        let mut pasted = 0;
        if !self.config.enabled || self.sources.is_empty() {
            return Ok((clip, 0));
        }
        for _ in 0..self.config.max_pastes {
            let src = self.sources[rng.random_range(0..self.sources.len())];
            if src.clip_index == target_index {
                // keep the draw count fixed
                let _: f64 = rng.random();
                continue;
            }
            let source = &dataset[src.clip_index];
            let prob = match self.config.mode {
                AugmentMode::Minor => self
                    .stats
                    .paste_probability(source.instances[src.instance_index].class_id),
                AugmentMode::Uniform => self.config.uniform_prob,
            };
            let (next, outcome) = minor_paste(&clip, source, src.instance_index, prob, rng)?;
            if matches!(outcome, PasteOutcome::Pasted { .. }) {
                pasted += 1;
            }
            clip = next;
        }
        Ok((clip, pasted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic_video::{generate_clip, generate_dataset, ClipSpec, Frame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_from_reported_frequencies() {
        // the most frequent class is never pasted, the rarest gets probability k
        let p = [0.355, 0.2, 0.05, 0.003];
        let ps = paste_probabilities(&p, 0.7).unwrap();
        assert_eq!(ps[0], 0.0);
        assert_eq!(ps[3], 0.7);
    }

    #[test]
    fn hand_evaluated_mid_values() {
        let ps = paste_probabilities(&[0.5, 0.3, 0.2], 0.7).unwrap();
        let expected = [0.0, 0.7 * 0.2 / 0.3, 0.7];
        for (a, b) in ps.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((ps[1] - 0.466_666_666_666_666_7).abs() < 1e-9);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        assert_eq!(paste_probabilities(&[0.5, 0.5], 0.7).unwrap(), vec![0.0, 0.0]);
        assert!(paste_probabilities(&[0.5, 0.5], 1.5).is_err());
        assert!(paste_probabilities(&[0.5, 0.5], -0.1).is_err());
        assert!(paste_probabilities(&[], 0.7).is_err());
    }

    fn blank_clip(id: &str, t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip {
            clip_id: id.into(),
            frames: vec![Frame::new(h, w); t],
            instances: vec![],
        }
    }

    fn rect_mask(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn minor_source_selection() {
        let mut clip = blank_clip("a", 2, 8, 8);
        let m = rect_mask(8, 8, 0, 0, 2, 2);
        for (i, c) in [0, 0, 1].into_iter().enumerate() {
            clip.instances
                .push(InstanceTrack::from_masks(i as u32, c, vec![m.clone(); 2]));
        }
        let balanced = ClassStats::from_frequencies(vec![0.5, 0.5], 0.7, 0.1).unwrap();
        assert!(select_minor_sources(std::slice::from_ref(&clip), &balanced).is_empty());
        let skewed = ClassStats::from_frequencies(vec![0.95, 0.05], 0.7, 0.1).unwrap();
        let found = select_minor_sources(std::slice::from_ref(&clip), &skewed);
        assert_eq!(
            found,
            vec![PasteSource {
                clip_index: 0,
                instance_index: 2
            }]
        );
    }

    #[test]
    fn minor_sources_equal_exhaustive_filter() {
        let spec = ClipSpec {
            num_frames: 3,
            height: 32,
            width: 32,
            ..ClipSpec::default()
        };
        let data = generate_dataset(&spec, 40, 11).unwrap();
        let stats = crate::synthetic_video::compute_class_stats(&data).unwrap();
        let got: std::collections::BTreeSet<_> = select_minor_sources(&data, &stats)
            .into_iter()
            .map(|s| (s.clip_index, s.instance_index))
            .collect();
        let mut expected = std::collections::BTreeSet::new();
        for (ci, clip) in data.iter().enumerate() {
            for (ii, inst) in clip.instances.iter().enumerate() {
                let p = stats.p[inst.class_id];
                if p < 0.1 && inst.masks.iter().any(|m| m.area() > 0) {
                    expected.insert((ci, ii));
                }
            }
        }
        assert_eq!(got, expected);
        assert!(!got.is_empty());
    }

    #[test]
    fn zero_probability_is_identity() {
        let spec = ClipSpec {
            num_frames: 3,
            height: 32,
            width: 32,
            ..ClipSpec::default()
        };
        let a = generate_clip(&spec, 1).unwrap();
        let b = generate_clip(&spec, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (out, outcome) = minor_paste(&a, &b, 0, 0.0, &mut rng).unwrap();
            assert_eq!(outcome, PasteOutcome::NotSampled);
            assert_eq!(out, a);
        }
    }

    #[test]
    fn non_overlapping_paste_appends_track() {
        let (h, w) = (16, 16);
        let mut target = blank_clip("t", 3, h, w);
        let tm = rect_mask(h, w, 10, 10, 14, 14);
        target
            .instances
            .push(InstanceTrack::from_masks(4, 0, vec![tm.clone(); 3]));
        let mut source = blank_clip("s", 3, h, w);
        for f in &mut source.frames {
            f.data.fill(200);
        }
        let sm: Vec<Mask> = (0..3).map(|t| rect_mask(h, w, t, 0, t + 5, 5)).collect();
        source.instances.push(InstanceTrack::from_masks(0, 5, sm.clone()));

        let (out, outcome) = paste_at(&target, &source, 0, (0, 0)).unwrap();
        assert_eq!(outcome, PasteOutcome::Pasted { instance_id: 5, offset: (0, 0) });
        assert_eq!(out.instances[0], target.instances[0]);
        let new = &out.instances[1];
        assert_eq!(new.class_id, 5);
        assert_eq!(new.masks, sm);
        out.check_invariants().unwrap();
        for t in 0..3 {
            // union before + pasted area == union after
            let before = target.instances[0].masks[t].area();
            let after: usize = out.instances.iter().map(|i| i.masks[t].area()).sum();
            assert_eq!(after, before + sm[t].area());
            for y in 0..h {
                for x in 0..w {
                    let expected = if sm[t].get(y, x) { [200; 3] } else { [0; 3] };
                    assert_eq!(out.frames[t].pixel(y, x), expected);
                }
            }
        }
    }

    #[test]
    fn covering_paste_empties_small_instance() {
        let (h, w) = (16, 16);
        let mut target = blank_clip("t", 3, h, w);
        let small = rect_mask(h, w, 2, 2, 4, 4);
        target
            .instances
            .push(InstanceTrack::from_masks(0, 0, vec![small.clone(); 3]));
        let mut source = blank_clip("s", 3, h, w);
        let cover: Vec<Mask> = vec![
            rect_mask(h, w, 8, 8, 13, 13),
            rect_mask(h, w, 0, 0, 6, 6),
            rect_mask(h, w, 8, 8, 13, 13),
        ];
        source.instances.push(InstanceTrack::from_masks(0, 3, cover));
        let (out, _) = paste_at(&target, &source, 0, (0, 0)).unwrap();
        let inst = &out.instances[0];
        assert!(inst.masks[1].is_empty());
        assert!(!inst.visible[1]);
        assert!(inst.boxes[1].is_sentinel());
        assert_eq!(inst.masks[0], small);
        assert_eq!(inst.masks[2], small);
        out.check_invariants().unwrap();
    }

    #[test]
    fn shorter_source_is_clamped_and_tiny_paste_aborted() {
        let (h, w) = (16, 16);
        let target = blank_clip("t", 4, h, w);
        let mut source = blank_clip("s", 2, h, w);
        let sm = vec![rect_mask(h, w, 0, 0, 5, 5), rect_mask(h, w, 0, 0, 6, 6)];
        source.instances.push(InstanceTrack::from_masks(0, 1, sm.clone()));
        let (out, _) = paste_at(&target, &source, 0, (1, 1)).unwrap();
        let m = &out.instances[0].masks;
        assert_eq!(m[2], m[1]);
        assert_eq!(m[3], m[1]);
        assert_eq!(m[1].area(), 36);

        // almost entirely out of frame: at most 9 pixels remain
        let (out, outcome) = paste_at(&target, &source, 0, (-3, -3)).unwrap();
        assert_eq!(outcome, PasteOutcome::TooSmall);
        assert_eq!(out, target);

        let mut empty_source = blank_clip("e", 2, h, w);
        empty_source
            .instances
            .push(InstanceTrack::from_masks(0, 1, vec![Mask::empty(h, w); 2]));
        let (out, outcome) = paste_at(&target, &empty_source, 0, (0, 0)).unwrap();
        assert_eq!(outcome, PasteOutcome::EmptySource);
        assert_eq!(out, target);
    }

    #[test]
    fn empirical_paste_rate() {
        let spec = ClipSpec {
            num_frames: 2,
            height: 32,
            width: 32,
            ..ClipSpec::default()
        };
        let a = generate_clip(&spec, 1).unwrap();
        let b = generate_clip(&spec, 2).unwrap();
        let idx = b
            .instances
            .iter()
            .position(|i| i.masks.iter().any(|m| m.area() >= MIN_PASTE_AREA))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &p in &[0.1, 0.4667, 0.7] {
            let trials = 10_000;
            let mut hits = 0;
            for _ in 0..trials {
                let (_, outcome) = minor_paste(&a, &b, idx, p, &mut rng).unwrap();
                if matches!(outcome, PasteOutcome::Pasted { .. }) {
                    hits += 1;
                }
            }
            let rate = hits as f64 / trials as f64;
            assert!((rate - p).abs() <= 0.02, "rate {rate} vs {p}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn augmented_clips_keep_invariants(seed_a in 0u64..500, seed_b in 500u64..1000, rng_seed in any::<u64>()) {
                let spec = ClipSpec { num_frames: 3, height: 32, width: 32, ..ClipSpec::default() };
                let a = generate_clip(&spec, seed_a).unwrap();
                let b = generate_clip(&spec, seed_b).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                let inst = (rng_seed % b.instances.len() as u64) as usize;
                let (out, _) = minor_paste(&a, &b, inst, 1.0, &mut rng).unwrap();
                prop_assert!(out.check_invariants().is_ok());
                prop_assert!(out.instances.len() >= a.instances.len());
            }
        }
    }
}
