//! Run configuration and the training, distillation, evaluation and ablation stages.
//!
//! Every stage writes a self-contained run directory under `$OOKD_RUNS_DIR`
//! (`config.json`, `log.jsonl`, checkpoints, `metrics.json`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{AugmentConfig, AugmentMode, Augmenter, ClassStats};
use crate::error::{OokdError, Result};
use crate::evalkit::{default_thresholds, same_instance_similarities, video_map, EvalResult, HistogramConfig};
use crate::losses::{
    box_loss, classification_loss, embed_loss, idol_loss, kd_loss, mask_loss, match_to_targets, matched_ids, scalar,
    total_loss, FrameTargets, IdolTerms, LossBreakdown, LossWeights,
};
use crate::nn::{cosine_lr, file_sha256, load_archive, save_archive, Adam, AdamConfig};
use crate::offline_teacher::{
    build_offline_knowledge, teacher_hash, train_aggregator, Aggregator, AggregatorConfig, KnowledgeCache,
    OfflineKnowledge, TeacherTrainConfig,
};
use crate::qfa::{associate, index_pairs, QfaConfig, QueryPair};
use crate::synthetic_video::{
    compute_class_stats, generate_dataset, load_dataset, save_dataset_with_spec, ClipSpec, VideoClip,
};
use crate::tracker::{track_video, TrackerConfig, VideoPrediction};
use crate::vis_model::{FrameOutputs, ModelConfig, VisModel};

pub const RUNS_DIR_ENV: &str = "OOKD_RUNS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GenData,
    Stats,
    #[default]
    TrainBaseline,
    TrainTeacher,
    Distill,
    Track,
    Eval,
    Ablate,
    PlotSimilarity,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Stats => "stats",
            Stage::TrainBaseline => "train-baseline",
            Stage::TrainTeacher => "train-teacher",
            Stage::Distill => "distill",
            Stage::Track => "track",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::PlotSimilarity => "plot-similarity",
        }
    }
}

/// How student and teacher queries are paired for the distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdPairing {
    /// Through the ground-truth instance each side is matched to.
    #[default]
    Qfa,
    /// Student query `n` with teacher query `n`, for all queries.
    IndexPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `train/`, `val/` and `val_long/`. When unset the
    /// splits are generated in memory from the seeds below.
    pub root: Option<PathBuf>,
    pub spec: ClipSpec,
    pub train_clips: usize,
    pub val_clips: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub long_seed: u64,
    /// Generator steps between emitted frames of the long split.
    pub long_stride: usize,
    /// Multiplier on the per-step translation of the long split.
    pub long_motion_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            spec: ClipSpec::default(),
            train_clips: 300,
            val_clips: 60,
            train_seed: 1_000_000,
            val_seed: 2_000_000,
            long_seed: 3_000_000,
            long_stride: 4,
            long_motion_scale: 1.5,
        }
    }
}

impl DataConfig {
    pub fn long_spec(&self) -> ClipSpec {
        let mut spec = self.spec.clone();
        spec.frame_stride = self.spec.frame_stride * self.long_stride;
        spec.motion.max_translation *= self.long_motion_scale;
        spec
    }

    fn split_dir(&self, name: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(name))
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.train_clips == 0 {
            return Err(OokdError::validation("data.train_clips", "must be positive"));
        }
        if self.long_stride == 0 {
            return Err(OokdError::validation("data.long_stride", "must be positive"));
        }
        if !(self.long_motion_scale > 0.0) {
            return Err(OokdError::validation("data.long_motion_scale", "must be positive"));
        }
        let ranges = [
            ("data.train_seed", self.train_seed, self.train_clips),
            ("data.val_seed", self.val_seed, self.val_clips),
            ("data.long_seed", self.long_seed, self.val_clips),
        ];
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.1 < b.1 + b.2 as u64 && b.1 < a.1 + a.2 as u64 {
                    return Err(OokdError::validation(a.0, format!("seed range overlaps {}", b.0)));
                }
            }
        }
        Ok(())
    }
}

/// Step size and batch composition of student training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub clips_per_batch: usize,
    pub frames_per_clip: usize,
    /// Largest gap between consecutive sampled frames of a clip.
    pub max_frame_gap: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: 1e-3,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            max_grad_norm: adam.max_grad_norm,
            steps: 4000,
            clips_per_batch: 4,
            frames_per_clip: 2,
            max_frame_gap: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(OokdError::validation("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OokdError::validation("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if self.clips_per_batch == 0 {
            return Err(OokdError::validation("optimizer.clips_per_batch", "must be positive"));
        }
        if self.frames_per_clip < 2 {
            return Err(OokdError::validation("optimizer.frames_per_clip", "the embedding loss needs at least 2"));
        }
        if self.max_frame_gap == 0 {
            return Err(OokdError::validation("optimizer.max_frame_gap", "must be positive"));
        }
        Ok(())
    }
}

/// Which student stages apply the configured augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentStages {
    pub baseline: bool,
    pub distill: bool,
}

impl Default for AugmentStages {
    fn default() -> Self {
        Self {
            baseline: true,
            distill: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherStageConfig {
    pub aggregator: AggregatorConfig,
    pub steps: usize,
    pub clips_per_batch: usize,
    pub lr: f64,
    /// Frame-model checkpoint the aggregator is trained on.
    pub frame_model: Option<PathBuf>,
}

impl Default for TeacherStageConfig {
    fn default() -> Self {
        Self {
            aggregator: AggregatorConfig::default(),
            steps: 1500,
            clips_per_batch: 2,
            lr: 1e-3,
            frame_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct InitConfig {
    /// Frame-model checkpoint to start from instead of a fresh model.
    pub checkpoint: Option<PathBuf>,
    /// Continue an interrupted run found in the run directory.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DistillConfig {
    pub pairing: KdPairing,
    pub teacher_frame: Option<PathBuf>,
    pub teacher_aggregator: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    /// Directory of saved predictions; evaluated instead of running a checkpoint.
    pub predictions: Option<PathBuf>,
    pub split: Split,
    /// Checkpoints compared by `plot-similarity`.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    MinorPaste,
    KdNoQfa,
    KdQfa,
    Both,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MinorPaste => "minor_paste",
            Variant::KdNoQfa => "kd_no_qfa",
            Variant::KdQfa => "kd_qfa",
            Variant::Both => "both",
        }
    }

    pub fn all() -> Vec<Variant> {
        vec![Variant::Baseline, Variant::MinorPaste, Variant::KdNoQfa, Variant::KdQfa, Variant::Both]
    }

    fn uses_kd(self) -> bool {
        matches!(self, Variant::KdNoQfa | Variant::KdQfa | Variant::Both)
    }

    fn uses_paste(self) -> bool {
        matches!(self, Variant::MinorPaste | Variant::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Steps of the shared pre-training every variant starts from.
    pub base_steps: usize,
    pub teacher_steps: usize,
    /// Steps each variant trains from the shared starting point.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Extra `kd_qfa` runs with these box-cost weights in the matching cost.
    pub lambda_b_sweep: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::all(),
            seeds: vec![0, 1, 2],
            base_steps: 4000,
            teacher_steps: 1500,
            finetune_steps: 1000,
            finetune_lr: 5e-4,
            lambda_b_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Run directory name under the runs root; derived from stage and seed when unset.
    pub run_name: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub qfa: QfaConfig,
    pub augment: AugmentConfig,
    pub augment_stages: AugmentStages,
    pub tracker: TrackerConfig,
    pub optimizer: OptimizerConfig,
    pub init: InitConfig,
    pub teacher: TeacherStageConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub histogram: HistogramConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.num_classes = ClipSpec::default().num_classes();
        Self {
            stage: Stage::default(),
            seed: 0,
            run_name: None,
            data: DataConfig::default(),
            model,
            loss: LossWeights::default(),
            qfa: QfaConfig::default(),
            augment: AugmentConfig::default(),
            augment_stages: AugmentStages::default(),
            tracker: TrackerConfig::default(),
            optimizer: OptimizerConfig::default(),
            init: InitConfig::default(),
            teacher: TeacherStageConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            histogram: HistogramConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn check_known_keys(given: &Value, reference: &Value, path: &str) -> Result<()> {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                None => return Err(OokdError::validation(key, "unknown configuration key")),
                Some(rv) => check_known_keys(v, rv, &key)?,
            }
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| OokdError::validation("config", e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let reference = serde_json::to_value(RunConfig::default())?;
        check_known_keys(&value, &reference, "")?;
        serde_json::from_value(value).map_err(|e| OokdError::validation("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OokdError::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| OokdError::validation(item.clone(), "override must look like key=value"))?;
            let parts: Vec<&str> = key.split('.').collect();
            let mut cursor = &mut value;
            for (i, part) in parts.iter().enumerate() {
                let obj = cursor
                    .as_object_mut()
                    .ok_or_else(|| OokdError::validation(key, "path goes through a non-object value"))?;
                let slot = obj
                    .get_mut(*part)
                    .ok_or_else(|| OokdError::validation(key, "unknown configuration key"))?;
                if i + 1 == parts.len() {
                    *slot = parse_override_value(raw);
                    break;
                }
                cursor = slot;
            }
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.num_classes != self.data.spec.num_classes() {
            return Err(OokdError::validation(
                "model.num_classes",
                format!("data has {} classes", self.data.spec.num_classes()),
            ));
        }
        if (self.model.frame_height, self.model.frame_width) != (self.data.spec.height, self.data.spec.width) {
            return Err(OokdError::validation("model.frame_height", "frame size differs from data.spec"));
        }
        self.loss.validate()?;
        self.tracker.validate()?;
        self.optimizer.validate()?;
        if !(self.qfa.lambda_b >= 0.0) {
            return Err(OokdError::validation("qfa.lambda_b", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.augment.k) {
            return Err(OokdError::validation("augment.k", "must lie in [0, 1]"));
        }
        if !(self.teacher.lr > 0.0) {
            return Err(OokdError::validation("teacher.lr", "must be positive"));
        }
        if self.teacher.aggregator.train_frames == 0 {
            return Err(OokdError::validation("teacher.aggregator.train_frames", "must be positive"));
        }
        if self.histogram.bins == 0 {
            return Err(OokdError::validation("histogram.bins", "must be positive"));
        }
        if self.stage == Stage::Ablate {
            if self.ablation.seeds.is_empty() {
                return Err(OokdError::validation("ablation.seeds", "must not be empty"));
            }
            if self.ablation.variants.is_empty() {
                return Err(OokdError::validation("ablation.variants", "must not be empty"));
            }
            if !(self.ablation.finetune_lr > 0.0) {
                return Err(OokdError::validation("ablation.finetune_lr", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        self.run_name
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.stage.name(), self.seed))
    }
}

/// Output root: `$OOKD_RUNS_DIR`, or `./runs` when unset.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Creates the run directory and writes the resolved config into it.
pub fn prepare_run_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = runs_root().join(config.run_name());
    std::fs::create_dir_all(&dir).map_err(|e| OokdError::io(&dir, e))?;
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json()?).map_err(|e| OokdError::io(&path, e))?;
    Ok(dir)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| OokdError::io(path, e))
}

/// The three data splits of a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    pub val_long: Vec<VideoClip>,
}

impl Splits {
    pub fn val_split(&self, split: Split) -> &[VideoClip] {
        match split {
            Split::Short => &self.val,
            Split::Long => &self.val_long,
        }
    }
}

pub fn generate_splits(data: &DataConfig) -> Result<Splits> {
    data.validate()?;
    Ok(Splits {
        train: generate_dataset(&data.spec, data.train_clips, data.train_seed)?,
        val: generate_dataset(&data.spec, data.val_clips, data.val_seed)?,
        val_long: generate_dataset(&data.long_spec(), data.val_clips, data.long_seed)?,
    })
}

/// Writes all three splits under `root`.
pub fn save_splits(splits: &Splits, data: &DataConfig, root: &Path) -> Result<()> {
    save_dataset_with_spec(&splits.train, &root.join("train"), Some(&data.spec))?;
    save_dataset_with_spec(&splits.val, &root.join("val"), Some(&data.spec))?;
    save_dataset_with_spec(&splits.val_long, &root.join("val_long"), Some(&data.long_spec()))
}

/// Reads the splits from `data.root`, or generates them when no root is configured.
pub fn load_splits(data: &DataConfig) -> Result<Splits> {
    match (data.split_dir("train"), data.split_dir("val"), data.split_dir("val_long")) {
        (Some(train), Some(val), Some(long)) => Ok(Splits {
            train: load_dataset(&train)?,
            val: load_dataset(&val)?,
            val_long: load_dataset(&long)?,
        }),
        _ => generate_splits(data),
    }
}

/// Frozen teacher plus its knowledge cache.
pub struct Teacher {
    pub frame_model: VisModel,
    pub aggregator: Aggregator,
    pub cache: KnowledgeCache,
}

impl Teacher {
    pub fn new(frame_model: VisModel, aggregator: Aggregator) -> Result<Self> {
        if frame_model.config != aggregator.model_config {
            return Err(OokdError::validation("distill.teacher_aggregator", "aggregator was built for another frame model"));
        }
        let hash = teacher_hash(&frame_model, &aggregator)?;
        Ok(Self {
            frame_model,
            aggregator,
            cache: KnowledgeCache::new(hash),
        })
    }

    pub fn load(frame: &Path, aggregator: &Path) -> Result<Self> {
        Self::new(VisModel::load(frame)?, Aggregator::load(aggregator)?)
    }

    /// Knowledge of a training clip; augmented clips are never cached.
    pub fn knowledge(&mut self, clip: &VideoClip, augmented: bool) -> Result<OfflineKnowledge> {
        if augmented {
            build_offline_knowledge(clip, &self.frame_model, &self.aggregator)
        } else {
            Ok(self.cache.get_or_build(clip, &self.frame_model, &self.aggregator)?.clone())
        }
    }
}

/// Everything a student training run needs besides the model itself.
pub struct StudentTraining<'a> {
    pub dataset: &'a [VideoClip],
    pub weights: &'a LossWeights,
    pub qfa: &'a QfaConfig,
    pub optimizer: &'a OptimizerConfig,
    pub augmenter: Option<&'a Augmenter>,
    pub pairing: KdPairing,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub pasted: usize,
    pub loss: LossBreakdown,
}

/// Model, optimizer state and position in the schedule.
pub struct TrainState {
    pub model: VisModel,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: VisModel, optimizer: &OptimizerConfig) -> Self {
        Self {
            model,
            adam: Adam::new(optimizer.adam()),
            step: 0,
        }
    }

    /// Writes `model.safetensors` and `optimizer.safetensors` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join("model.safetensors"))?;
        let meta = BTreeMap::from([
            ("kind".to_string(), "optimizer".to_string()),
            ("step".to_string(), self.step.to_string()),
            ("adam_step".to_string(), self.adam.step.to_string()),
        ]);
        save_archive(&dir.join("optimizer.safetensors"), &self.adam.state_tensors(), meta)
    }

    pub fn load(dir: &Path, optimizer: &OptimizerConfig) -> Result<Self> {
        let model = VisModel::load(&dir.join("model.safetensors"))?;
        let path = dir.join("optimizer.safetensors");
        let (tensors, meta) = load_archive(&path)?;
        let read = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| OokdError::schema(&path, format!("missing {key}")))
        };
        let mut adam = Adam::new(optimizer.adam());
        adam.load_state(&tensors, read("adam_step")?);
        Ok(Self {
            model,
            adam,
            step: read("step")?,
        })
    }
}

/// Randomness of one step depends only on the run seed and the step index.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Sorted frame indices: a random start followed by random gaps in `1..=max_gap`.
pub fn sample_frame_window<R: Rng + ?Sized>(num_frames: usize, count: usize, max_gap: usize, rng: &mut R) -> Vec<usize> {
    if num_frames <= count {
        return (0..num_frames).collect();
    }
    let mut gaps: Vec<usize> = (1..count).map(|_| rng.random_range(1..=max_gap)).collect();
    while gaps.iter().sum::<usize>() >= num_frames {
        if let Some(g) = gaps.iter_mut().max() {
            *g -= 1;
        }
    }
    let span: usize = gaps.iter().sum();
    let mut t = rng.random_range(0..num_frames - span);
    let mut out = vec![t];
    for g in gaps {
        t += g;
        out.push(t);
    }
    out
}

fn mean_of(items: Vec<Tensor>, dtype: DType) -> Result<Tensor> {
    if items.is_empty() {
        return Ok(Tensor::zeros((), dtype, &Device::Cpu)?);
    }
    let n = items.len() as f64;
    let mut acc = items[0].clone();
    for t in &items[1..] {
        acc = (acc + t)?;
    }
    Ok((acc / n)?)
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let n = ids.len();
    Ok(t.index_select(&Tensor::from_vec(ids, n, t.device())?, 0)?)
}

/// Per-frame objective terms of one clip whose frames sit at rows
/// `offset..offset + frames.len()` of `out`, plus the distillation term.
#[allow(clippy::too_many_arguments)]
fn clip_terms(
    out: &FrameOutputs,
    offset: usize,
    clip: &VideoClip,
    frames: &[usize],
    weights: &LossWeights,
    qfa: &QfaConfig,
    knowledge: Option<(&OfflineKnowledge, KdPairing)>,
) -> Result<(IdolTerms, Option<Tensor>)> {
    let dtype = out.features.dtype();
    let n = out.class_logits.dim(1)?;
    let mut cls = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    let mut kds = Vec::new();
    let mut matched = Vec::new();
    for (i, &t) in frames.iter().enumerate() {
        let row = offset + i;
        let targets = FrameTargets::from_clip(clip, t);
        let logits = out.class_logits.get(row)?;
        let pred_boxes = out.boxes.get(row)?;
        let assignment = match_to_targets(&logits, &pred_boxes, &targets, qfa)?;
        cls.push(classification_loss(
            &logits,
            &assignment.gt_of_query(n),
            &targets.classes,
            weights.no_object_weight,
        )?);
        if !targets.is_empty() {
            boxes.push(box_loss(&pred_boxes, &assignment.sigma, &targets.boxes)?);
            masks.push(mask_loss(&out.mask_logits.get(row)?, &assignment.sigma, &targets.masks)?);
        }
        if let Some((k, pairing)) = knowledge {
            let pairs: Vec<QueryPair> = match pairing {
                KdPairing::IndexPairs => index_pairs(n),
                KdPairing::Qfa => {
                    let teacher = k.match_instances(clip, &targets.instance_ids, qfa)?;
                    associate(&assignment.sigma, &teacher.sigma)?
                }
            };
            let student_idx: Vec<usize> = pairs.iter().map(|p| p.student).collect();
            let teacher_idx: Vec<usize> = pairs.iter().map(|p| p.teacher).collect();
            let student = select_rows(&out.embeddings.get(row)?, &student_idx)?;
            let teacher = select_rows(&k.embeddings_tensor(dtype)?, &teacher_idx)?;
            let kd = kd_loss(&student, &teacher)?;
            if !kd.skipped {
                kds.push(kd.value);
            }
        }
        matched.push(matched_ids(&assignment, &targets));
    }
    let mut embeds = Vec::new();
    for i in 1..frames.len() {
        let e = embed_loss(
            &out.embeddings.get(offset + i - 1)?,
            &matched[i - 1],
            &out.embeddings.get(offset + i)?,
            &matched[i],
            weights.embed_temperature,
        )?;
        if !e.skipped {
            embeds.push(e.value);
        }
    }
    let kd = if kds.is_empty() { None } else { Some(mean_of(kds, dtype)?) };
    Ok((
        IdolTerms {
            cls: mean_of(cls, dtype)?,
            bbox: mean_of(boxes, dtype)?,
            mask: mean_of(masks, dtype)?,
            embed: mean_of(embeds, dtype)?,
        },
        kd,
    ))
}

/// Runs one optimisation step at `state.step` and advances it.
pub fn student_step(state: &mut TrainState, run: &StudentTraining, teacher: Option<&mut Teacher>) -> Result<StepRecord> {
    let opt = run.optimizer;
    let step = state.step;
    let mut rng = step_rng(run.seed, step);
    let use_kd = run.weights.lambda4 != 0.0 && teacher.is_some();
    let mut teacher = teacher;
    let mut clips = Vec::with_capacity(opt.clips_per_batch);
    let mut pasted_total = 0;
    for _ in 0..opt.clips_per_batch {
        let idx = rng.random_range(0..run.dataset.len());
        let (clip, pasted) = match run.augmenter {
            Some(a) if a.config.enabled => a.augment(idx, run.dataset, &mut rng)?,
            _ => (run.dataset[idx].clone(), 0),
        };
        let frames = sample_frame_window(clip.num_frames(), opt.frames_per_clip, opt.max_frame_gap, &mut rng);
        pasted_total += pasted;
        clips.push((clip, frames, pasted > 0));
    }
    let frame_refs: Vec<_> = clips
        .iter()
        .flat_map(|(c, f, _)| f.iter().map(move |&t| &c.frames[t]))
        .collect();
    let out = state.model.forward_frames(&frame_refs)?;
    let dtype = state.model.store.dtype();

    let mut offset = 0;
    let mut totals = Vec::new();
    let mut records = Vec::new();
    for (clip, frames, augmented) in &clips {
        let knowledge = match (use_kd, teacher.as_deref_mut()) {
            (true, Some(t)) => Some(t.knowledge(clip, *augmented)?),
            _ => None,
        };
        let (terms, kd) = clip_terms(
            &out,
            offset,
            clip,
            frames,
            run.weights,
            run.qfa,
            knowledge.as_ref().map(|k| (k, run.pairing)),
        )?;
        offset += frames.len();
        let idol = idol_loss(&terms, run.weights)?;
        let kd = crate::losses::MaybeLoss {
            skipped: kd.is_none(),
            value: kd.map_or_else(|| Tensor::zeros((), dtype, &Device::Cpu), Ok)?,
        };
        let total = if kd.skipped { idol.clone() } else { total_loss(&idol, &kd.value, run.weights.lambda4)? };
        records.push(LossBreakdown::from_terms(&terms, &idol, &kd, &total)?);
        totals.push(total);
    }
    let total = mean_of(totals, dtype)?;
    let loss = LossBreakdown::mean(&records);
    if !scalar(&total)?.is_finite() {
        return Err(OokdError::Divergence(format!(
            "non-finite loss at step {step}: {}",
            serde_json::to_string(&loss)?
        )));
    }
    let grads = total.backward()?;
    let lr = cosine_lr(opt.lr, step, opt.steps);
    let grad_norm = state
        .adam
        .step(&state.model.store, &grads, lr)
        .map_err(|e| match e {
            OokdError::Divergence(msg) => OokdError::Divergence(format!("{msg} at step {step}")),
            other => other,
        })?;
    state.step += 1;
    state.model.trained_steps += 1;
    Ok(StepRecord {
        step,
        lr,
        grad_norm,
        pasted: pasted_total,
        loss,
    })
}

/// Trains until `state.step` reaches `stop_at` (at most the scheduled step count).
pub fn train_student(
    state: &mut TrainState,
    run: &StudentTraining,
    mut teacher: Option<&mut Teacher>,
    stop_at: usize,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if run.dataset.is_empty() {
        return Err(OokdError::validation("data.train_clips", "empty training set"));
    }
    if let Some(t) = teacher.as_deref() {
        if t.frame_model.config != state.model.config {
            return Err(OokdError::validation("distill.teacher_frame", "teacher and student model configs differ"));
        }
    }
    let mut records = Vec::new();
    while state.step < stop_at.min(run.optimizer.steps) {
        let rec = student_step(state, run, teacher.as_deref_mut())?;
        on_step(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Appends one JSON object per line.
pub struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| OokdError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(|e| OokdError::io(&self.path, e))?;
        self.out.flush().map_err(|e| OokdError::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| OokdError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| OokdError::schema(path, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub short: EvalResult,
    pub long: EvalResult,
}

/// Tracks every clip online and scores the predictions.
pub fn evaluate(model: &VisModel, clips: &[VideoClip], tracker: &TrackerConfig) -> Result<(Vec<VideoPrediction>, EvalResult)> {
    let preds = clips
        .iter()
        .map(|c| track_video(c, model, tracker))
        .collect::<Result<Vec<_>>>()?;
    let result = video_map(&preds, clips, &default_thresholds())?;
    if !result.ap_monotone {
        log::warn!("AP is not monotone in the IoU threshold");
    }
    Ok((preds, result))
}

pub fn evaluate_splits(model: &VisModel, splits: &Splits, tracker: &TrackerConfig) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        short: evaluate(model, &splits.val, tracker)?.1,
        long: evaluate(model, &splits.val_long, tracker)?.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub metrics: SplitMetrics,
    pub checkpoint: PathBuf,
}

fn augmenter_for(config: &RunConfig, train: &[VideoClip], stage_enabled: bool) -> Result<Option<Augmenter>> {
    if config.augment.enabled && stage_enabled {
        Ok(Some(Augmenter::new(train, config.augment.clone())?))
    } else {
        Ok(None)
    }
}

fn run_student_stage(config: &RunConfig, dir: &Path, splits: &Splits, mut teacher: Option<&mut Teacher>) -> Result<TrainSummary> {
    let augment_enabled = match config.stage {
        Stage::Distill => config.augment_stages.distill,
        _ => config.augment_stages.baseline,
    };
    let augmenter = augmenter_for(config, &splits.train, augment_enabled)?;
    let resumable = dir.join("optimizer.safetensors").exists() && dir.join("model.safetensors").exists();
    let (mut state, append) = if config.init.resume && resumable {
        log::info!("resuming from {}", dir.display());
        (TrainState::load(dir, &config.optimizer)?, true)
    } else {
        let model = match &config.init.checkpoint {
            Some(path) => VisModel::load(path)?,
            None => VisModel::new(config.model.clone(), config.seed)?,
        };
        if model.config != config.model {
            return Err(OokdError::validation("model", "initial checkpoint was built with another model config"));
        }
        (TrainState::new(model, &config.optimizer), false)
    };
    let mut log = JsonlLog::create(&dir.join("log.jsonl"), append)?;
    let run = StudentTraining {
        dataset: &splits.train,
        weights: &config.loss,
        qfa: &config.qfa,
        optimizer: &config.optimizer,
        augmenter: augmenter.as_ref(),
        pairing: config.distill.pairing,
        seed: config.seed,
    };
    let every = (config.optimizer.steps / 20).max(1);
    train_student(&mut state, &run, teacher.as_deref_mut(), config.optimizer.steps, &mut |rec| {
        if rec.step % every == 0 {
            log::info!("step {} loss {:.4} kd {:.4}", rec.step, rec.loss.total, rec.loss.kd);
        }
        log.write(rec)
    })?;
    state.save(dir)?;
    let records = read_log(&dir.join("log.jsonl"))?;
    let metrics = evaluate_splits(&state.model, splits, &config.tracker)?;
    let summary = TrainSummary {
        steps: state.step,
        first_loss: records.first().map(|r| r.loss.total),
        final_loss: records.last().map(|r| r.loss.total),
        metrics,
        checkpoint: dir.join("model.safetensors"),
    };
    write_pretty(&dir.join("metrics.json"), &summary)?;
    Ok(summary)
}

pub fn train_baseline(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let dir = prepare_run_dir(config)?;
    let splits = load_splits(&config.data)?;
    run_student_stage(config, &dir, &splits, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn teacher_train_config(config: &RunConfig, steps: usize, seed: u64) -> TeacherTrainConfig {
    let mut optimizer = config.optimizer.adam();
    optimizer.lr = config.teacher.lr;
    TeacherTrainConfig {
        steps,
        clips_per_batch: config.teacher.clips_per_batch,
        optimizer,
        seed,
    }
}

pub fn train_teacher(config: &RunConfig) -> Result<TeacherSummary> {
    config.validate()?;
    let frame_path = config
        .teacher
        .frame_model
        .as_ref()
        .ok_or_else(|| OokdError::validation("teacher.frame_model", "a frame-model checkpoint is required"))?;
    let dir = prepare_run_dir(config)?;
    let splits = load_splits(&config.data)?;
    let frame_model = VisModel::load(frame_path)?;
    let mut aggregator = Aggregator::from_frame_model(&frame_model, config.teacher.aggregator.clone(), config.seed)?;
    let mut log = JsonlLog::create(&dir.join("log.jsonl"), false)?;
    let mut io_err = None;
    let losses = train_aggregator(
        &splits.train,
        &frame_model,
        &mut aggregator,
        &config.loss,
        &config.qfa,
        &teacher_train_config(config, config.teacher.steps, config.seed),
        &mut |step, b| {
            if io_err.is_none() {
                io_err = log.write(&serde_json::json!({"step": step, "loss": b})).err();
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let checkpoint = dir.join("aggregator.safetensors");
    aggregator.save(&checkpoint)?;
    let summary = TeacherSummary {
        steps: losses.len(),
        first_loss: losses.first().copied(),
        final_loss: losses.last().copied(),
        checkpoint,
    };
    write_pretty(&dir.join("metrics.json"), &summary)?;
    Ok(summary)
}

pub fn distill(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    if config.init.checkpoint.is_none() && !config.init.resume {
        return Err(OokdError::validation("init.checkpoint", "distillation starts from a trained student"));
    }
    let frame = config
        .distill
        .teacher_frame
        .as_ref()
        .ok_or_else(|| OokdError::validation("distill.teacher_frame", "required"))?;
    let agg = config
        .distill
        .teacher_aggregator
        .as_ref()
        .ok_or_else(|| OokdError::validation("distill.teacher_aggregator", "required"))?;
    let before = (file_sha256(frame)?, file_sha256(agg)?);
    let mut teacher = Teacher::load(frame, agg)?;
    let dir = prepare_run_dir(config)?;
    let splits = load_splits(&config.data)?;
    let cache_path = dir.join("knowledge_cache.json");
    if cache_path.exists() {
        teacher.cache = KnowledgeCache::load_for(&cache_path, &teacher.cache.teacher_hash)?;
    }
    let summary = run_student_stage(config, &dir, &splits, Some(&mut teacher))?;
    teacher.cache.save(&cache_path)?;
    if (file_sha256(frame)?, file_sha256(agg)?) != before {
        return Err(OokdError::validation("distill", "teacher checkpoint changed during distillation"));
    }
    Ok(summary)
}

/// Per-class frequencies and paste probabilities of the training split.
pub fn dataset_stats(config: &RunConfig, train: &[VideoClip]) -> Result<ClassStats> {
    let base = compute_class_stats(train)?;
    ClassStats::from_frequencies(base.p, config.augment.k, config.augment.minor_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// Box-cost weight of the matching cost this row was trained with.
    pub lambda_b: f64,
    pub map_short: f64,
    pub map_long: f64,
    pub ap50_long: f64,
    /// Mean AP of the minor classes over short and long predictions pooled.
    pub minor_ap: f64,
    /// Mean same-instance cosine similarity on the long split.
    pub similarity: f64,
    pub final_kd: f64,
    /// Whether AP was non-increasing in the IoU threshold in every evaluation of this row.
    pub ap_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub variant: Variant,
    pub map_short: f64,
    pub map_long: f64,
    pub ap50_long: f64,
    pub minor_ap: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub minor_classes: Vec<usize>,
    /// Box-cost weight shared by the variant rows.
    pub lambda_b: f64,
    pub rows: Vec<AblationRow>,
    pub mean: Vec<AblationSummaryRow>,
    /// Mean `kd_qfa` results per swept box-cost weight.
    pub lambda_b_sweep: Vec<(f64, AblationSummaryRow)>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&AblationSummaryRow> {
        self.mean.iter().find(|r| r.variant == v)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| variant | mAP short | mAP long | AP50 long | minor AP | same-instance cos |\n|---|---|---|---|---|---|\n",
        );
        for r in &self.mean {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.3} |\n",
                r.variant.name(),
                100.0 * r.map_short,
                100.0 * r.map_long,
                100.0 * r.ap50_long,
                100.0 * r.minor_ap,
                r.similarity
            ));
        }
        if !self.lambda_b_sweep.is_empty() {
            out.push_str("\n| lambda_b (kd_qfa) | mAP short | mAP long | AP50 long | same-instance cos |\n|---|---|---|---|---|\n");
            for (lb, r) in &self.lambda_b_sweep {
                out.push_str(&format!(
                    "| {lb} | {:.2} | {:.2} | {:.2} | {:.3} |\n",
                    100.0 * r.map_short,
                    100.0 * r.map_long,
                    100.0 * r.ap50_long,
                    r.similarity
                ));
            }
        }
        out.push_str(&format!(
            "\nAveraged over {} seed(s); minor classes {:?}.\n",
            self.rows.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len(),
            self.minor_classes
        ));
        out
    }
}

fn summarize(rows: &[AblationRow], variants: &[Variant], lambda_b: f64) -> Vec<AblationSummaryRow> {
    variants
        .iter()
        .map(|&v| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v && r.lambda_b == lambda_b).collect();
            let n = sel.len().max(1) as f64;
            let avg = |f: fn(&AblationRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationSummaryRow {
                variant: v,
                map_short: avg(|r| r.map_short),
                map_long: avg(|r| r.map_long),
                ap50_long: avg(|r| r.ap50_long),
                minor_ap: avg(|r| r.minor_ap),
                similarity: avg(|r| r.similarity),
            }
        })
        .collect()
}

struct VariantEval {
    short: EvalResult,
    long: EvalResult,
    pooled: EvalResult,
}

fn evaluate_variant(model: &VisModel, splits: &Splits, tracker: &TrackerConfig) -> Result<VariantEval> {
    let (mut preds, short) = evaluate(model, &splits.val, tracker)?;
    let (long_preds, long) = evaluate(model, &splits.val_long, tracker)?;
    preds.extend(long_preds);
    let gt: Vec<VideoClip> = splits.val.iter().chain(&splits.val_long).cloned().collect();
    let pooled = video_map(&preds, &gt, &default_thresholds())?;
    Ok(VariantEval { short, long, pooled })
}

/// Trains every variant from a shared per-seed starting point and compares
/// them on the short and long validation splits. Artifacts go under `dir`.
pub fn run_ablation(config: &RunConfig, splits: &Splits, dir: &Path) -> Result<AblationReport> {
    config.validate()?;
    let stats = dataset_stats(config, &splits.train)?;
    let minor: Vec<usize> = (0..stats.p.len()).filter(|&c| stats.is_minor(c)).collect();
    let mut rows = Vec::new();
    for &seed in &config.ablation.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&seed_dir).map_err(|e| OokdError::io(&seed_dir, e))?;

        let mut base_opt = config.optimizer.clone();
        base_opt.steps = config.ablation.base_steps;
        let base_path = seed_dir.join("base.safetensors");
        {
            let mut state = TrainState::new(VisModel::new(config.model.clone(), seed)?, &base_opt);
            let run = StudentTraining {
                dataset: &splits.train,
                weights: &config.loss,
                qfa: &config.qfa,
                optimizer: &base_opt,
                augmenter: None,
                pairing: KdPairing::Qfa,
                seed,
            };
            let mut log = JsonlLog::create(&seed_dir.join("base_log.jsonl"), false)?;
            train_student(&mut state, &run, None, base_opt.steps, &mut |r| log.write(r))?;
            state.model.save(&base_path)?;
        }
        log::info!("seed {seed}: shared starting point trained");

        let agg_path = seed_dir.join("aggregator.safetensors");
        if config.ablation.variants.iter().any(|v| v.uses_kd()) || !config.ablation.lambda_b_sweep.is_empty() {
            let frame_model = VisModel::load(&base_path)?;
            let mut aggregator = Aggregator::from_frame_model(&frame_model, config.teacher.aggregator.clone(), seed)?;
            let mut log = JsonlLog::create(&seed_dir.join("teacher_log.jsonl"), false)?;
            train_aggregator(
                &splits.train,
                &frame_model,
                &mut aggregator,
                &config.loss,
                &config.qfa,
                &teacher_train_config(config, config.ablation.teacher_steps, seed),
                &mut |step, b| {
                    let _ = log.write(&serde_json::json!({"step": step, "loss": b}));
                },
            )?;
            aggregator.save(&agg_path)?;
            log::info!("seed {seed}: teacher trained");
        }
        let mut teacher = if agg_path.exists() {
            Some(Teacher::load(&base_path, &agg_path)?)
        } else {
            None
        };

        let mut ft_opt = config.optimizer.clone();
        ft_opt.steps = config.ablation.finetune_steps;
        ft_opt.lr = config.ablation.finetune_lr;
        let mut paste_cfg = config.augment.clone();
        paste_cfg.enabled = true;
        paste_cfg.mode = AugmentMode::Minor;
        let augmenter = Augmenter::new(&splits.train, paste_cfg)?;
        let default_lb = config.qfa.lambda_b;
        let jobs = config.ablation.variants.iter().map(|&v| (v, default_lb)).chain(
            config
                .ablation
                .lambda_b_sweep
                .iter()
                .filter(|&&lb| lb != default_lb || !config.ablation.variants.contains(&Variant::KdQfa))
                .map(|&lb| (Variant::KdQfa, lb)),
        );
        for (variant, lambda_b) in jobs {
            let name = if lambda_b == default_lb {
                variant.name().to_string()
            } else {
                format!("{}_lambda_b_{lambda_b}", variant.name())
            };
            let mut qfa = config.qfa.clone();
            qfa.lambda_b = lambda_b;
            let mut weights = config.loss.clone();
            if !variant.uses_kd() {
                weights.lambda4 = 0.0;
            }
            let run = StudentTraining {
                dataset: &splits.train,
                weights: &weights,
                qfa: &qfa,
                optimizer: &ft_opt,
                augmenter: variant.uses_paste().then_some(&augmenter),
                pairing: if variant == Variant::KdNoQfa { KdPairing::IndexPairs } else { KdPairing::Qfa },
                seed: seed.wrapping_add(1_000),
            };
            let mut state = TrainState::new(VisModel::load(&base_path)?, &ft_opt);
            let mut log = JsonlLog::create(&seed_dir.join(format!("{name}_log.jsonl")), false)?;
            let tail = ft_opt.steps.saturating_sub(50);
            let mut kd_tail = Vec::new();
            let t = if variant.uses_kd() { teacher.as_mut() } else { None };
            train_student(&mut state, &run, t, ft_opt.steps, &mut |r| {
                if r.step >= tail && !r.loss.kd_skipped {
                    kd_tail.push(r.loss.kd);
                }
                log.write(r)
            })?;
            state.model.save(&seed_dir.join(format!("{name}.safetensors")))?;
            let metrics = evaluate_variant(&state.model, splits, &config.tracker)?;
            let sims = same_instance_similarities(&state.model, &splits.val_long, &config.histogram, &config.qfa)?;
            let row = AblationRow {
                variant,
                seed,
                lambda_b,
                map_short: metrics.short.map,
                map_long: metrics.long.map,
                ap50_long: metrics.long.ap50,
                minor_ap: metrics.pooled.class_subset_map(&minor),
                similarity: if sims.is_empty() { 0.0 } else { sims.iter().sum::<f64>() / sims.len() as f64 },
                final_kd: if kd_tail.is_empty() { 0.0 } else { kd_tail.iter().sum::<f64>() / kd_tail.len() as f64 },
                ap_monotone: metrics.short.ap_monotone && metrics.long.ap_monotone && metrics.pooled.ap_monotone,
            };
            log::info!(
                "seed {seed} {name}: mAP_S {:.3} mAP_L {:.3} minor {:.3} sim {:.3}",
                row.map_short,
                row.map_long,
                row.minor_ap,
                row.similarity
            );
            rows.push(row);
        }
    }
    let mut swept: Vec<f64> = config.ablation.lambda_b_sweep.clone();
    swept.sort_by(|a, b| a.total_cmp(b));
    swept.dedup();
    let lambda_b_sweep = swept
        .into_iter()
        .map(|lb| (lb, summarize(&rows, &[Variant::KdQfa], lb).remove(0)))
        .collect();
    let report = AblationReport {
        minor_classes: minor,
        lambda_b: config.qfa.lambda_b,
        mean: summarize(&rows, &config.ablation.variants, config.qfa.lambda_b),
        rows,
        lambda_b_sweep,
    };
    write_pretty(&dir.join("ablation.json"), &report)?;
    let md = dir.join("ablation.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| OokdError::io(&md, e))?;
    Ok(report)
}
