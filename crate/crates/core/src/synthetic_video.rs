//! Seeded synthetic videos of moving, rotating, pulsing shapes with exact
//! instance annotations, plus the on-disk dataset format.
//!
//! Layout written by [`save_dataset`]:
//!
//! ```text
//! <root>/dataset.json                   clip order + generating spec (optional on load)
//! <root>/clips/<clip_id>/frame_0000.png lossless RGB frames
//! <root>/annotations/<clip_id>.json     one annotation file per clip
//! ```
//!
//! Annotation masks use the row-major, background-first RLE described in [`crate::mask`].

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::ClassStats;
use crate::error::{OokdError, Result};
use crate::mask::{BoxCxcywh, Mask};

pub const DATA_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Ring,
    Star,
    Cross,
    Diamond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    /// Target frequency of this class among generated instances.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Upper bound on per-step translation, in pixels.
    pub max_translation: f64,
    /// Relative amplitude of the periodic size change.
    pub scale_jitter: f64,
    pub allow_occlusion: bool,
    /// Upper bound on per-step rotation, in radians.
    pub max_rotation: f64,
    /// Relative amplitude of the periodic brightness drift.
    pub brightness_drift: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            max_translation: 1.5,
            scale_jitter: 0.2,
            allow_occlusion: true,
            max_rotation: 0.08,
            brightness_drift: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub class_palette: Vec<ClassSpec>,
    /// Inclusive `[min, max]` instance count.
    pub instances_per_clip: [usize; 2],
    pub motion: MotionSpec,
    pub allow_entry_exit: bool,
    /// Generator steps between consecutive emitted frames.
    #[serde(default = "default_stride")]
    pub frame_stride: usize,
    /// Inclusive `[min, max]` base radius of a shape, in pixels.
    #[serde(default = "default_radius")]
    pub radius_range: [f64; 2],
}

fn default_stride() -> usize {
    1
}

fn default_radius() -> [f64; 2] {
    [6.0, 11.0]
}

/// Six classes with an engineered imbalance. The two minor classes share a
/// color family with a major class so that only the shape separates them.
pub fn default_palette() -> Vec<ClassSpec> {
    let c = |name: &str, shape, color, weight| ClassSpec {
        name: name.to_string(),
        shape,
        color,
        weight,
    };
    vec![
        c("red_ellipse", ShapeKind::Ellipse, [225, 60, 55], 0.34),
        c("green_rectangle", ShapeKind::Rectangle, [60, 200, 80], 0.24),
        c("blue_triangle", ShapeKind::Triangle, [70, 95, 235], 0.16),
        c("yellow_ring", ShapeKind::Ring, [230, 210, 60], 0.12),
        c("red_star", ShapeKind::Star, [225, 60, 55], 0.08),
        c("green_cross", ShapeKind::Cross, [60, 200, 80], 0.06),
    ]
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            num_frames: 12,
            height: 64,
            width: 64,
            class_palette: default_palette(),
            instances_per_clip: [2, 4],
            motion: MotionSpec::default(),
            allow_entry_exit: false,
            frame_stride: 1,
            radius_range: default_radius(),
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(OokdError::validation("num_frames", "must be at least 2"));
        }
        if self.height < 32 {
            return Err(OokdError::validation("height", "must be at least 32"));
        }
        if self.width < 32 {
            return Err(OokdError::validation("width", "must be at least 32"));
        }
        if self.class_palette.is_empty() {
            return Err(OokdError::validation("class_palette", "must not be empty"));
        }
        if self.class_palette.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(OokdError::validation(
                "class_palette",
                "weights must be non-negative",
            ));
        }
        let total: f64 = self.class_palette.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OokdError::validation(
                "class_palette",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let [lo, hi] = self.instances_per_clip;
        if lo < 1 || hi < lo {
            return Err(OokdError::validation(
                "instances_per_clip",
                format!("invalid range [{lo}, {hi}]"),
            ));
        }
        if self.frame_stride < 1 {
            return Err(OokdError::validation("frame_stride", "must be at least 1"));
        }
        let [rlo, rhi] = self.radius_range;
        if !(rlo > 0.0 && rhi >= rlo) {
            return Err(OokdError::validation("radius_range", "invalid range"));
        }
        if !(self.motion.max_translation >= 0.0 && self.motion.scale_jitter >= 0.0) {
            return Err(OokdError::validation("motion", "amplitudes must be >= 0"));
        }
        if self.motion.scale_jitter >= 1.0 {
            return Err(OokdError::validation("motion", "scale_jitter must be < 1"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_palette.len()
    }
}

/// One RGB frame, interleaved `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTrack {
    pub instance_id: u32,
    pub class_id: usize,
    pub masks: Vec<Mask>,
    /// Normalized boxes; [`BoxCxcywh::SENTINEL`] where `visible[t]` is false.
    pub boxes: Vec<BoxCxcywh>,
    pub visible: Vec<bool>,
}

impl InstanceTrack {
    /// Builds a track whose boxes and visibility flags are recomputed from the masks.
    pub fn from_masks(instance_id: u32, class_id: usize, masks: Vec<Mask>) -> Self {
        let mut track = Self {
            instance_id,
            class_id,
            boxes: Vec::new(),
            visible: Vec::new(),
            masks,
        };
        track.refresh_boxes();
        track
    }

    pub fn refresh_boxes(&mut self) {
        self.boxes.clear();
        self.visible.clear();
        for m in &self.masks {
            match m.tight_box() {
                Some(b) => {
                    self.boxes.push(b);
                    self.visible.push(true);
                }
                None => {
                    self.boxes.push(BoxCxcywh::SENTINEL);
                    self.visible.push(false);
                }
            }
        }
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub instances: Vec<InstanceTrack>,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    /// Checks the structural invariants: mask slot counts, per-frame disjointness and box tightness.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let t = self.num_frames();
        let (h, w) = (self.height(), self.width());
        let mut ids = std::collections::BTreeSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.instance_id) {
                return Err(format!("duplicate instance id {}", inst.instance_id));
            }
            if inst.masks.len() != t || inst.boxes.len() != t || inst.visible.len() != t {
                return Err(format!("instance {} has wrong slot count", inst.instance_id));
            }
            for (f, m) in inst.masks.iter().enumerate() {
                if m.height != h || m.width != w {
                    return Err(format!("instance {} frame {f}: mask size", inst.instance_id));
                }
                match m.tight_box() {
                    Some(b) => {
                        if !inst.visible[f] || inst.boxes[f] != b {
                            return Err(format!(
                                "instance {} frame {f}: box not tight",
                                inst.instance_id
                            ));
                        }
                    }
                    None => {
                        if inst.visible[f] || !inst.boxes[f].is_sentinel() {
                            return Err(format!(
                                "instance {} frame {f}: invisible frame without sentinel",
                                inst.instance_id
                            ));
                        }
                    }
                }
            }
        }
        for f in 0..t {
            let mut owner = vec![false; h * w];
            for inst in &self.instances {
                for (o, &v) in owner.iter_mut().zip(inst.masks[f].as_slice()) {
                    if v {
                        if *o {
                            return Err(format!("frame {f}: overlapping masks"));
                        }
                        *o = true;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct InstancePlan {
    class_id: usize,
    shape: ShapeKind,
    color: [f64; 3],
    radius: f64,
    aspect: f64,
    start: (f64, f64),
    velocity: (f64, f64),
    angle: f64,
    spin: f64,
    scale_freq: f64,
    scale_phase: f64,
    bright_freq: f64,
    bright_phase: f64,
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * span);
    if y > span {
        y = 2.0 * span - y;
    }
    lo + y
}

fn inside_shape(shape: ShapeKind, u: f64, v: f64, r: f64, aspect: f64) -> bool {
    let (ra, rb) = (r * aspect.sqrt(), r / aspect.sqrt());
    match shape {
        ShapeKind::Ellipse => (u / ra).powi(2) + (v / rb).powi(2) <= 1.0,
        ShapeKind::Rectangle => u.abs() <= 0.85 * ra && v.abs() <= 0.85 * rb,
        ShapeKind::Triangle => {
            // equilateral, apex up, circumradius r
            let y = v + 0.25 * r;
            y <= 0.75 * r && y >= -0.75 * r && u.abs() <= (0.75 * r - y) / 3f64.sqrt()
        }
        ShapeKind::Ring => {
            let d = (u / ra).powi(2) + (v / rb).powi(2);
            (0.3..=1.0).contains(&d)
        }
        ShapeKind::Star => {
            let d = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            d <= r * (0.55 + 0.45 * (2.5 * phi).cos().abs())
        }
        ShapeKind::Cross => {
            let arm = 0.36 * r;
            (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
        }
        ShapeKind::Diamond => u.abs() / ra + v.abs() / rb <= 1.0,
    }
}

fn sample_class(palette: &[ClassSpec], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, c) in palette.iter().enumerate() {
        acc += c.weight;
        if x < acc {
            return i;
        }
    }
    palette
        .iter()
        .rposition(|c| c.weight > 0.0)
        .unwrap_or(palette.len() - 1)
}

fn plan_instance(spec: &ClipSpec, rng: &mut ChaCha8Rng) -> InstancePlan {
    let class_id = sample_class(&spec.class_palette, rng);
    let class = &spec.class_palette[class_id];
    let jitter = |rng: &mut ChaCha8Rng, c: u8| (c as f64 + rng.random_range(-30.0..30.0)).clamp(0.0, 255.0);
    let color = [
        jitter(rng, class.color[0]),
        jitter(rng, class.color[1]),
        jitter(rng, class.color[2]),
    ];
    let radius = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
    let aspect = match class.shape {
        ShapeKind::Ellipse | ShapeKind::Rectangle | ShapeKind::Ring | ShapeKind::Diamond => {
            rng.random_range(0.7..1.4)
        }
        _ => 1.0,
    };
    let (w, h) = (spec.width as f64, spec.height as f64);
    let margin = radius + 1.0;
    let mut start = (
        rng.random_range(margin..(w - margin).max(margin + 1.0)),
        rng.random_range(margin..(h - margin).max(margin + 1.0)),
    );
    let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = spec.motion.max_translation * rng.random_range(0.3..=1.0);
    let mut velocity = (speed * dir.cos(), speed * dir.sin());
    if spec.allow_entry_exit && rng.random_bool(0.3) {
        // enter from the left or right edge, heading inward
        let from_left = rng.random_bool(0.5);
        start.0 = if from_left { -radius } else { w + radius };
        velocity.0 = if from_left { speed.max(0.5) } else { -speed.max(0.5) };
    }
    let max_rot = spec.motion.max_rotation;
    InstancePlan {
        class_id,
        shape: class.shape,
        color,
        radius,
        aspect,
        start,
        velocity,
        angle: rng.random_range(0.0..std::f64::consts::TAU),
        spin: if max_rot > 0.0 {
            rng.random_range(-max_rot..=max_rot)
        } else {
            0.0
        },
        scale_freq: rng.random_range(0.05..0.15),
        scale_phase: rng.random_range(0.0..std::f64::consts::TAU),
        bright_freq: rng.random_range(0.03..0.1),
        bright_phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

struct InstanceState {
    center: (f64, f64),
    radius: f64,
    angle: f64,
    brightness: f64,
}

fn state_at(spec: &ClipSpec, p: &InstancePlan, step: f64) -> InstanceState {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let radius = p.radius * (1.0 + spec.motion.scale_jitter * (p.scale_freq * step + p.scale_phase).sin());
    let raw = (p.start.0 + p.velocity.0 * step, p.start.1 + p.velocity.1 * step);
    let center = if spec.allow_entry_exit {
        (raw.0, reflect(raw.1, p.radius, h - p.radius))
    } else {
        (
            reflect(raw.0, p.radius, w - p.radius),
            reflect(raw.1, p.radius, h - p.radius),
        )
    };
    InstanceState {
        center,
        radius,
        angle: p.angle + p.spin * step,
        brightness: 1.0 + spec.motion.brightness_drift * (p.bright_freq * step + p.bright_phase).sin(),
    }
}

fn render_full_mask(spec: &ClipSpec, p: &InstancePlan, s: &InstanceState) -> Mask {
    let mut m = Mask::empty(spec.height, spec.width);
    let reach = s.radius * p.aspect.max(1.0 / p.aspect).sqrt() + 1.0;
    let (cx, cy) = s.center;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(spec.width);
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(spec.height);
    let (sin, cos) = s.angle.sin_cos();
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside_shape(p.shape, u, v, s.radius, p.aspect) {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Deterministic clip generation. Returns the clip plus every instance's
/// un-occluded mask per frame (indexed `[instance][frame]`).
pub fn generate_clip_with_layers(spec: &ClipSpec, seed: u64) -> Result<(VideoClip, Vec<Vec<Mask>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let [lo, hi] = spec.instances_per_clip;
    let count = rng.random_range(lo..=hi);

    let bg_base = [
        rng.random_range(15.0..70.0),
        rng.random_range(15.0..70.0),
        rng.random_range(15.0..70.0),
    ];
    let bg_grad = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    let bg_noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-10.0..10.0)).collect();

    let steps: Vec<f64> = (0..spec.num_frames)
        .map(|t| (t * spec.frame_stride) as f64)
        .collect();

    let mut plans: Vec<InstancePlan> = (0..count).map(|_| plan_instance(spec, &mut rng)).collect();
    let mut full: Vec<Vec<Mask>> = render_all(spec, &plans, &steps);
    if !spec.motion.allow_occlusion {
        let mut attempts = 0;
        while any_overlap(&full) {
            attempts += 1;
            if attempts > 500 {
                return Err(OokdError::validation(
                    "motion.allow_occlusion",
                    "could not place instances without overlap; enlarge the frame or reduce instances",
                ));
            }
            plans = (0..count).map(|_| plan_instance(spec, &mut rng)).collect();
            full = render_all(spec, &plans, &steps);
        }
    }

    // z[i] is the depth rank of instance i; higher ranks are drawn on top
    let mut z: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        z.swap(i, j);
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| z[i]);

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut visible: Vec<Vec<Mask>> = vec![Vec::with_capacity(spec.num_frames); count];
    for (t, &step) in steps.iter().enumerate() {
        let mut frame = Frame::new(h, w);
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for &i in &order {
            for (o, &v) in owner.iter_mut().zip(full[i][t].as_slice()) {
                if v {
                    *o = Some(i);
                }
            }
        }
        let states: Vec<InstanceState> = plans.iter().map(|p| state_at(spec, p, step)).collect();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let noise: f64 = rng.random_range(-5.0..5.0);
                let rgb = match owner[idx] {
                    Some(i) => {
                        let b = states[i].brightness;
                        plans[i].color.map(|c| (c * b + noise).clamp(0.0, 255.0) as u8)
                    }
                    None => {
                        let g = bg_grad.0 * x as f64 + bg_grad.1 * y as f64;
                        bg_base.map(|c| (c + g + bg_noise[idx] + noise).clamp(0.0, 255.0) as u8)
                    }
                };
                frame.set_pixel(y, x, rgb);
            }
        }
        for (i, vis) in visible.iter_mut().enumerate() {
            let data: Vec<bool> = owner.iter().map(|o| *o == Some(i)).collect();
            vis.push(Mask::from_vec(h, w, data)?);
        }
        frames.push(frame);
    }

    let instances = visible
        .into_iter()
        .enumerate()
        .map(|(i, masks)| InstanceTrack::from_masks(i as u32, plans[i].class_id, masks))
        .collect();
    let clip = VideoClip {
        clip_id: format!("s{seed:010}"),
        frames,
        instances,
    };
    Ok((clip, full))
}

fn render_all(spec: &ClipSpec, plans: &[InstancePlan], steps: &[f64]) -> Vec<Vec<Mask>> {
    plans
        .iter()
        .map(|p| {
            steps
                .iter()
                .map(|&s| render_full_mask(spec, p, &state_at(spec, p, s)))
                .collect()
        })
        .collect()
}

fn any_overlap(full: &[Vec<Mask>]) -> bool {
    for i in 0..full.len() {
        for j in i + 1..full.len() {
            if full[i]
                .iter()
                .zip(&full[j])
                .any(|(a, b)| a.intersection_area(b) > 0)
            {
                return true;
            }
        }
    }
    false
}

pub fn generate_clip(spec: &ClipSpec, seed: u64) -> Result<VideoClip> {
    generate_clip_with_layers(spec, seed).map(|(clip, _)| clip)
}

/// Generates `count` clips with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_dataset(spec: &ClipSpec, count: usize, base_seed: u64) -> Result<Vec<VideoClip>> {
    (0..count as u64)
        .map(|i| generate_clip(spec, base_seed.wrapping_add(i)))
        .collect()
}

/// Per-class instance frequencies over the dataset (instances, not pixels or frames).
pub fn compute_class_stats(dataset: &[VideoClip]) -> Result<ClassStats> {
    let counts = class_counts(dataset);
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(OokdError::validation(
            "dataset",
            "no instances to compute class statistics from",
        ));
    }
    let num_classes = counts.keys().next_back().map_or(0, |&c| c + 1);
    let mut p = vec![0.0; num_classes];
    for (&c, &n) in &counts {
        p[c] = n as f64 / total as f64;
    }
    ClassStats::from_frequencies(p, crate::augment::DEFAULT_K, crate::augment::DEFAULT_MINOR_THRESHOLD)
}

pub fn class_counts(dataset: &[VideoClip]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for clip in dataset {
        for inst in &clip.instances {
            *counts.entry(inst.class_id).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    clips: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<ClipSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MaskEntry {
    pub frame: usize,
    pub counts: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: u32,
    class_id: usize,
    masks: Vec<MaskEntry>,
    boxes: Vec<[f64; 4]>,
    visible: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipRecord {
    schema_version: u32,
    clip_id: String,
    num_frames: usize,
    height: usize,
    width: usize,
    instances: Vec<InstanceRecord>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| OokdError::io(path, e))?;
    serde_json::to_writer(BufWriter::new(file), value)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OokdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| OokdError::schema(path, e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| OokdError::io(path, e))
}

fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| OokdError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width as u32, frame.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    writer
        .write_image_data(&frame.data)
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Frame> {
    let file = fs::File::open(path).map_err(|e| OokdError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(OokdError::schema(path, "expected 8-bit RGB png"));
    }
    buf.truncate(info.buffer_size());
    Ok(Frame {
        height: info.height as usize,
        width: info.width as usize,
        data: buf,
    })
}

pub fn frame_path(root: &Path, clip_id: &str, t: usize) -> PathBuf {
    root.join("clips").join(clip_id).join(format!("frame_{t:04}.png"))
}

pub fn annotation_path(root: &Path, clip_id: &str) -> PathBuf {
    root.join("annotations").join(format!("{clip_id}.json"))
}

pub fn save_dataset(dataset: &[VideoClip], root: &Path) -> Result<()> {
    save_dataset_with_spec(dataset, root, None)
}

pub fn save_dataset_with_spec(dataset: &[VideoClip], root: &Path, spec: Option<&ClipSpec>) -> Result<()> {
    create_dir(&root.join("annotations"))?;
    for clip in dataset {
        let dir = root.join("clips").join(&clip.clip_id);
        create_dir(&dir)?;
        for (t, frame) in clip.frames.iter().enumerate() {
            write_png(&frame_path(root, &clip.clip_id, t), frame)?;
        }
        let record = ClipRecord {
            schema_version: DATA_SCHEMA_VERSION,
            clip_id: clip.clip_id.clone(),
            num_frames: clip.num_frames(),
            height: clip.height(),
            width: clip.width(),
            instances: clip
                .instances
                .iter()
                .map(|inst| InstanceRecord {
                    instance_id: inst.instance_id,
                    class_id: inst.class_id,
                    masks: inst
                        .masks
                        .iter()
                        .enumerate()
                        .map(|(frame, m)| MaskEntry {
                            frame,
                            counts: m.to_rle(),
                        })
                        .collect(),
                    boxes: inst.boxes.iter().map(|b| b.to_array()).collect(),
                    visible: inst.visible.clone(),
                })
                .collect(),
        };
        write_json(&annotation_path(root, &clip.clip_id), &record)?;
    }
    let manifest = DatasetManifest {
        schema_version: DATA_SCHEMA_VERSION,
        clips: dataset.iter().map(|c| c.clip_id.clone()).collect(),
        spec: spec.cloned(),
    };
    write_json(&root.join("dataset.json"), &manifest)
}

/// A loaded dataset plus non-fatal validation findings (e.g. loose boxes).
#[derive(Debug)]
pub struct LoadReport {
    pub clips: Vec<VideoClip>,
    pub warnings: Vec<String>,
}

pub fn load_dataset(root: &Path) -> Result<Vec<VideoClip>> {
    let report = load_dataset_with_report(root)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report.clips)
}

/// Reads the generating spec stored alongside a dataset, if any.
pub fn load_dataset_spec(root: &Path) -> Result<Option<ClipSpec>> {
    let path = root.join("dataset.json");
    if !path.exists() {
        return Ok(None);
    }
    let manifest: DatasetManifest = read_json(&path)?;
    Ok(manifest.spec)
}

pub fn load_dataset_with_report(root: &Path) -> Result<LoadReport> {
    let manifest_path = root.join("dataset.json");
    let ids: Vec<String> = if manifest_path.exists() {
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        manifest.clips
    } else {
        let dir = root.join("annotations");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| OokdError::io(&dir, e))? {
            let entry = entry.map_err(|e| OokdError::io(&dir, e))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem() {
                    ids.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        ids
    };
    let mut clips = Vec::with_capacity(ids.len());
    let mut warnings = Vec::new();
    for id in ids {
        let (clip, mut w) = load_clip(root, &id)?;
        warnings.append(&mut w);
        clips.push(clip);
    }
    Ok(LoadReport { clips, warnings })
}

fn load_clip(root: &Path, clip_id: &str) -> Result<(VideoClip, Vec<String>)> {
    let ann_path = annotation_path(root, clip_id);
    let record: ClipRecord = read_json(&ann_path)?;
    if record.schema_version != DATA_SCHEMA_VERSION {
        return Err(OokdError::schema(
            &ann_path,
            format!("unsupported schema version {}", record.schema_version),
        ));
    }
    if record.clip_id != clip_id {
        return Err(OokdError::schema(
            &ann_path,
            format!("clip_id {} does not match file name", record.clip_id),
        ));
    }
    let (t, h, w) = (record.num_frames, record.height, record.width);
    let mut frames = Vec::with_capacity(t);
    for f in 0..t {
        let path = frame_path(root, clip_id, f);
        let frame = read_png(&path)?;
        if frame.height != h || frame.width != w {
            return Err(OokdError::schema(&path, "frame size differs from annotation"));
        }
        frames.push(frame);
    }
    let mut warnings = Vec::new();
    let mut instances = Vec::with_capacity(record.instances.len());
    for inst in record.instances {
        let id = inst.instance_id;
        if inst.boxes.len() != t || inst.visible.len() != t {
            return Err(OokdError::schema(
                &ann_path,
                format!("clip {clip_id} instance {id}: expected {t} boxes and visibility flags"),
            ));
        }
        let mut slots: Vec<Option<Mask>> = vec![None; t];
        for entry in inst.masks {
            if entry.frame >= t {
                return Err(OokdError::schema(
                    &ann_path,
                    format!("clip {clip_id} instance {id}: mask for frame {} out of range", entry.frame),
                ));
            }
            let m = Mask::from_rle(h, w, &entry.counts).map_err(|e| {
                OokdError::schema(
                    &ann_path,
                    format!("clip {clip_id} instance {id} frame {}: {e}", entry.frame),
                )
            })?;
            slots[entry.frame] = Some(m);
        }
        let mut masks = Vec::with_capacity(t);
        for (f, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(m) => masks.push(m),
                None => {
                    return Err(OokdError::schema(
                        &ann_path,
                        format!("clip {clip_id} instance {id}: missing mask for frame {f}"),
                    ))
                }
            }
        }
        let boxes: Vec<BoxCxcywh> = inst.boxes.iter().map(|&b| BoxCxcywh::from_array(b)).collect();
        for (f, m) in masks.iter().enumerate() {
            let tight = m.tight_box();
            match tight {
                Some(tb) => {
                    let dev = tb.max_edge_deviation_px(&boxes[f], h, w);
                    if dev > 1.0 || !inst.visible[f] {
                        warnings.push(format!(
                            "clip {clip_id} instance {id} frame {f}: stored box deviates from mask by {dev:.2} px"
                        ));
                    }
                }
                None => {
                    if inst.visible[f] || !boxes[f].is_sentinel() {
                        warnings.push(format!(
                            "clip {clip_id} instance {id} frame {f}: empty mask without sentinel box"
                        ));
                    }
                }
            }
        }
        instances.push(InstanceTrack {
            instance_id: id,
            class_id: inst.class_id,
            masks,
            boxes,
            visible: inst.visible,
        });
    }
    Ok((
        VideoClip {
            clip_id: clip_id.to_string(),
            frames,
            instances,
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ClipSpec {
        ClipSpec {
            num_frames: 4,
            height: 32,
            width: 40,
            ..ClipSpec::default()
        }
    }

    #[test]
    fn determinism() {
        let spec = small_spec();
        let a = generate_clip(&spec, 7).unwrap();
        let b = generate_clip(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(&spec, 8).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn fixed_instance_count() {
        let spec = ClipSpec {
            instances_per_clip: [3, 3],
            ..small_spec()
        };
        for seed in 0..10 {
            assert_eq!(generate_clip(&spec, seed).unwrap().instances.len(), 3);
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = small_spec();
        spec.num_frames = 1;
        match generate_clip(&spec, 0) {
            Err(OokdError::Validation { field, .. }) => assert_eq!(field, "num_frames"),
            other => panic!("unexpected {other:?}"),
        }
        let mut spec = small_spec();
        spec.class_palette[0].weight += 0.1;
        match spec.validate() {
            Err(OokdError::Validation { field, .. }) => assert_eq!(field, "class_palette"),
            other => panic!("unexpected {other:?}"),
        }
        let mut spec = small_spec();
        spec.instances_per_clip = [0, 2];
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.width = 31;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn occluding_instances_stay_disjoint() {
        let spec = ClipSpec {
            instances_per_clip: [2, 2],
            radius_range: [10.0, 12.0],
            num_frames: 8,
            ..small_spec()
        };
        let mut saw_occlusion = false;
        for seed in 0..20 {
            let (clip, full) = generate_clip_with_layers(&spec, seed).unwrap();
            clip.check_invariants().unwrap();
            for t in 0..clip.num_frames() {
                // pixel-count oracle
                let mut counted = vec![0u8; 32 * 40];
                for inst in &clip.instances {
                    for (c, &v) in counted.iter_mut().zip(inst.masks[t].as_slice()) {
                        *c += v as u8;
                    }
                }
                assert!(counted.iter().all(|&c| c <= 1));
                let union: usize = counted.iter().map(|&c| c as usize).sum();
                let unoccluded: usize = full.iter().map(|m| m[t].area()).sum();
                assert!(union <= unoccluded);
                if union < unoccluded {
                    saw_occlusion = true;
                }
            }
        }
        assert!(saw_occlusion, "test setup should produce at least one occlusion");
    }

    #[test]
    fn no_occlusion_mode_keeps_full_masks() {
        let spec = ClipSpec {
            instances_per_clip: [2, 2],
            motion: MotionSpec {
                allow_occlusion: false,
                ..MotionSpec::default()
            },
            ..small_spec()
        };
        let (clip, full) = generate_clip_with_layers(&spec, 3).unwrap();
        for (inst, layers) in clip.instances.iter().zip(&full) {
            assert_eq!(&inst.masks, layers);
        }
    }

    #[test]
    fn class_stats_examples() {
        let spec = small_spec();
        let mut clip = generate_clip(&spec, 1).unwrap();
        let template = clip.instances[0].clone();
        clip.instances = (0..4)
            .map(|i| InstanceTrack {
                instance_id: i,
                class_id: if i < 3 { 0 } else { 1 },
                ..template.clone()
            })
            .collect();
        let stats = compute_class_stats(std::slice::from_ref(&clip)).unwrap();
        assert_eq!(stats.p, vec![0.75, 0.25]);
        clip.instances.truncate(1);
        let stats = compute_class_stats(std::slice::from_ref(&clip)).unwrap();
        assert_eq!(stats.p, vec![1.0]);
        clip.instances.clear();
        assert!(compute_class_stats(&[clip]).is_err());
        assert!(compute_class_stats(&[]).is_err());
    }

    #[test]
    fn class_stats_match_recount() {
        let spec = small_spec();
        let data = generate_dataset(&spec, 50, 100).unwrap();
        let stats = compute_class_stats(&data).unwrap();
        let mut recount = vec![0usize; 6];
        let mut total = 0;
        for clip in &data {
            for inst in &clip.instances {
                recount[inst.class_id] += 1;
                total += 1;
            }
        }
        for (c, &n) in recount.iter().enumerate() {
            let expected = n as f64 / total as f64;
            assert!((stats.p.get(c).copied().unwrap_or(0.0) - expected).abs() < 1e-12);
        }
        assert!((stats.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let data = generate_dataset(&spec, 3, 5).unwrap();
        save_dataset_with_spec(&data, dir.path(), Some(&spec)).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(data, back);
        assert_eq!(load_dataset_spec(dir.path()).unwrap(), Some(spec));

        // drop one mask entry
        let id = &data[1].clip_id;
        let path = annotation_path(dir.path(), id);
        let mut value: serde_json::Value = read_json(&path).unwrap();
        value["instances"][0]["masks"].as_array_mut().unwrap().remove(2);
        write_json(&path, &value).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(id.as_str()) && err.contains("frame 2"), "{err}");
    }

    #[test]
    fn loose_box_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let mut data = generate_dataset(&spec, 1, 9).unwrap();
        let inst = &mut data[0].instances[0];
        let f = inst.visible.iter().position(|&v| v).unwrap();
        inst.boxes[f].w += 3.0 / 40.0;
        save_dataset(&data, dir.path()).unwrap();
        let report = load_dataset_with_report(dir.path()).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("instance 0"));

        // within one pixel: silent
        let mut data = generate_dataset(&spec, 1, 9).unwrap();
        data[0].instances[0].boxes[f].w += 0.5 / 40.0;
        save_dataset(&data, dir.path()).unwrap();
        assert!(load_dataset_with_report(dir.path()).unwrap().warnings.is_empty());
    }
}
