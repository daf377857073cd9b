//! Offline teacher: aggregates the per-frame instance queries of a frozen frame
//! model over a whole clip into `N` video-level queries with an object encoder
//! (self-attention over all frames' queries) and an object decoder (learned
//! video queries), then produces video-level predictions and offline embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::losses::{
    box_loss, classification_loss, embed_loss, idol_loss, mask_loss, match_to_targets, matched_ids, scalar,
    FrameTargets, IdolTerms, LossBreakdown, LossWeights, MaybeLoss,
};
use crate::mask::BoxCxcywh;
use crate::nn::{cosine_lr, load_archive, save_archive, Adam, AdamConfig, LayerNorm, MultiHeadAttention, ParamStore};
use crate::qfa::{match_queries, video_cost_matrix, Assignment, QfaConfig};
use crate::synthetic_video::{read_json, write_json, VideoClip, DATA_SCHEMA_VERSION};
use crate::vis_model::{checkpoint_config, EncoderLayer, ModelConfig, PredictionHeads, QueryDecoder, VisModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Adds a learned per-frame embedding to the encoder tokens.
    pub temporal_encoding: bool,
    /// Longest clip supported by the temporal embedding.
    pub max_frames: usize,
    /// Frames sampled per clip while training the aggregator.
    pub train_frames: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            temporal_encoding: false,
            max_frames: 64,
            train_frames: 4,
        }
    }
}

/// Video-level outputs of the aggregator for one clip of `T` frames.
#[derive(Debug, Clone)]
pub struct VideoOutputs {
    /// `(N, C)` aggregated queries.
    pub queries: Tensor,
    /// `(N, N_c)`.
    pub class_logits: Tensor,
    /// `(T, N, 4)`.
    pub frame_boxes: Tensor,
    /// `(T, N, h, w)`.
    pub frame_masks: Tensor,
    /// `(N, C)` unit-norm offline embeddings.
    pub embeddings: Tensor,
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub model_config: ModelConfig,
    pub store: ParamStore,
    encoder: Vec<EncoderLayer>,
    temporal: Option<Tensor>,
    video_queries: Tensor,
    video_query_pos: Tensor,
    decoder: QueryDecoder,
    readout: MultiHeadAttention,
    readout_norm: LayerNorm,
    pub heads: PredictionHeads,
}

impl Aggregator {
    pub fn new(model_config: &ModelConfig, config: AggregatorConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(model_config, config, seed, DType::F32)
    }

    pub fn with_dtype(model_config: &ModelConfig, config: AggregatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        model_config.validate()?;
        if config.encoder_layers == 0 || config.decoder_layers == 0 {
            return Err(OokdError::validation("teacher.encoder_layers", "aggregator needs at least one layer of each kind"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let c = model_config.hidden_dim;
        let (heads_n, ffn) = (model_config.heads, model_config.ffn_dim);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("agg.encoder.layer{i}"), c, heads_n, ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let temporal = if config.temporal_encoding {
            Some(store.uniform("agg.temporal", &[config.max_frames, 1, c], 0.1, &mut rng)?)
        } else {
            None
        };
        let n = model_config.num_queries;
        let video_queries = store.uniform("agg.video_queries", &[1, n, c], 0.1, &mut rng)?;
        let video_query_pos = store.uniform("agg.video_query_pos", &[1, n, c], 1.0, &mut rng)?;
        let decoder = QueryDecoder::new(&mut store, "agg.decoder", config.decoder_layers, c, heads_n, ffn, &mut rng)?;
        let readout = MultiHeadAttention::new(&mut store, "agg.readout", c, heads_n, &mut rng)?;
        let readout_norm = store.layer_norm("agg.readout_norm", c)?;
        let heads = PredictionHeads::new(&mut store, "heads", model_config, &mut rng)?;
        Ok(Self {
            config,
            model_config: model_config.clone(),
            store,
            encoder,
            temporal,
            video_queries,
            video_query_pos,
            decoder,
            readout,
            readout_norm,
            heads,
        })
    }

    /// New aggregator whose prediction heads start from the frame model's heads.
    pub fn from_frame_model(frame: &VisModel, config: AggregatorConfig, seed: u64) -> Result<Self> {
        let agg = Self::new(&frame.config, config, seed)?;
        agg.store.copy_matching(&frame.store, "heads.", "heads.")?;
        Ok(agg)
    }

    fn tokens(&self, frame_features: &Tensor) -> Result<Tensor> {
        let (t, n, c) = frame_features.dims3()?;
        if t == 0 {
            return Err(OokdError::validation("frames", "aggregation needs at least one frame"));
        }
        if n != self.model_config.num_queries || c != self.model_config.hidden_dim {
            return Err(OokdError::Shape(format!(
                "frame queries {n}x{c}, expected {}x{}",
                self.model_config.num_queries, self.model_config.hidden_dim
            )));
        }
        let x = match &self.temporal {
            Some(temp) => {
                if t > self.config.max_frames {
                    return Err(OokdError::validation("teacher.max_frames", format!("clip has {t} frames")));
                }
                frame_features.broadcast_add(&temp.narrow(0, 0, t)?)?
            }
            None => frame_features.clone(),
        };
        Ok(x.reshape((1, t * n, c))?)
    }

    /// Self-attention sublayer output of the first encoder layer, `(1, T·N, C)`.
    pub fn first_encoder_attention(&self, frame_features: &Tensor) -> Result<Tensor> {
        self.encoder[0].attention(&self.tokens(frame_features)?, None)
    }

    /// Object encoder over the flattened `(T·N)` token sequence; returns `(T, N, C)`.
    pub fn encode(&self, frame_features: &Tensor) -> Result<Tensor> {
        let (t, n, c) = frame_features.dims3()?;
        let mut x = self.tokens(frame_features)?;
        for layer in &self.encoder {
            x = layer.forward(&x, None)?;
        }
        Ok(x.reshape((t, n, c))?)
    }

    fn decode(&self, encoded: &Tensor) -> Result<Tensor> {
        let (t, n, c) = encoded.dims3()?;
        let memory = encoded.reshape((1, t * n, c))?;
        let q = self
            .decoder
            .forward(&self.video_queries, Some(&self.video_query_pos), &memory, None)?;
        Ok(q.squeeze(0)?)
    }

    /// `(T, N, C)` per-frame queries of the frozen frame model -> `(N, C)` video queries.
    pub fn aggregate(&self, frame_features: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(frame_features)?)
    }

    /// Video-level predictions. `mask_feats` is the frame model's `(T, D, h, w)` stride-4 map.
    pub fn forward(&self, frame_features: &Tensor, mask_feats: &Tensor) -> Result<VideoOutputs> {
        let (t, n, c) = frame_features.dims3()?;
        let encoded = self.encode(frame_features)?;
        let queries = self.decode(&encoded)?;
        let q = queries.unsqueeze(0)?.broadcast_as((t, n, c))?.contiguous()?;
        let pos = self.video_query_pos.broadcast_as((t, n, c))?;
        let read = self.readout.forward(&(&q + &pos)?, &encoded, &encoded)?;
        let per_frame = self.readout_norm.forward(&(&q + read)?)?;
        let frame_boxes = self.heads.boxes(&per_frame)?;
        let frame_masks = self.heads.mask_logits(&per_frame, mask_feats, &frame_boxes)?;
        let class_logits = self.heads.class_logits(&queries)?;
        let embeddings = self.heads.embed(&queries)?;
        Ok(VideoOutputs {
            queries,
            class_logits,
            frame_boxes,
            frame_masks,
            embeddings,
        })
    }

    /// Runs the frozen frame model on `frame_indices` of `clip` (detached) and aggregates.
    pub fn forward_clip(&self, frame_model: &VisModel, clip: &VideoClip, frame_indices: &[usize]) -> Result<(VideoOutputs, crate::vis_model::FrameOutputs)> {
        let frames: Vec<_> = frame_indices.iter().map(|&t| &clip.frames[t]).collect();
        let frame_out = frame_model.forward_frames(&frames)?.detach();
        let out = self.forward(&frame_out.features, &frame_out.maps.mask_feats)?;
        Ok((out, frame_out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "aggregator".into());
        meta.insert("model_config".into(), serde_json::to_string(&self.model_config)?);
        meta.insert("aggregator_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("schema_version".into(), DATA_SCHEMA_VERSION.to_string());
        save_archive(path, &self.store.tensors(), meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_archive(path)?;
        let model_config = checkpoint_config(path, &meta, "aggregator")?;
        let config: AggregatorConfig = meta
            .get("aggregator_config")
            .ok_or_else(|| OokdError::schema(path, "missing aggregator_config"))
            .and_then(|raw| serde_json::from_str(raw).map_err(|e| OokdError::schema(path, e.to_string())))?;
        let agg = Self::new(&model_config, config, 0)?;
        agg.store.load_values(&tensors, "")?;
        Ok(agg)
    }
}

/// Host-side offline knowledge of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineKnowledge {
    pub clip_id: String,
    /// `N x C` aggregated queries.
    pub queries: Vec<Vec<f32>>,
    /// `N x C` unit-norm offline embeddings.
    pub embeddings: Vec<Vec<f32>>,
    /// `N x N_c`.
    pub video_class_logits: Vec<Vec<f32>>,
    /// `N x T` boxes as `(cx, cy, w, h)`.
    pub per_frame_boxes: Vec<Vec<[f32; 4]>>,
}

impl OfflineKnowledge {
    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn embeddings_tensor(&self, dtype: DType) -> Result<Tensor> {
        let n = self.embeddings.len();
        let c = self.embeddings.first().map_or(0, |e| e.len());
        let flat: Vec<f32> = self.embeddings.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (n, c), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Teacher-side matching of the instances `instance_ids` of `clip`: class cost
    /// on video logits plus box cost averaged over each instance's visible frames.
    pub fn match_instances(&self, clip: &VideoClip, instance_ids: &[u32], qfa: &QfaConfig) -> Result<Assignment> {
        if instance_ids.is_empty() {
            return Ok(Assignment::empty(qfa.mode));
        }
        let mut classes = Vec::with_capacity(instance_ids.len());
        let mut gt_boxes = Vec::with_capacity(instance_ids.len());
        for id in instance_ids {
            let inst = clip
                .instances
                .iter()
                .find(|i| i.instance_id == *id)
                .ok_or_else(|| OokdError::Shape(format!("instance {id} not in clip {}", clip.clip_id)))?;
            classes.push(inst.class_id);
            gt_boxes.push(
                inst.boxes
                    .iter()
                    .zip(&inst.visible)
                    .map(|(b, &v)| v.then_some(*b))
                    .collect::<Vec<_>>(),
            );
        }
        let logits: Vec<Vec<f64>> = self
            .video_class_logits
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let boxes: Vec<Vec<BoxCxcywh>> = self
            .per_frame_boxes
            .iter()
            .map(|r| r.iter().map(|b| BoxCxcywh::from_array(b.map(|v| v as f64))).collect())
            .collect();
        let cost = video_cost_matrix(&logits, &boxes, &classes, &gt_boxes, qfa.lambda_b)?;
        match_queries(&cost, qfa.mode)
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Offline knowledge of a whole clip from the frozen frame model and the aggregator.
pub fn build_offline_knowledge(video: &VideoClip, frame_model: &VisModel, aggregator: &Aggregator) -> Result<OfflineKnowledge> {
    let all: Vec<usize> = (0..video.num_frames()).collect();
    let (out, _) = aggregator.forward_clip(frame_model, video, &all)?;
    let boxes = out.frame_boxes.to_dtype(DType::F32)?.transpose(0, 1)?.contiguous()?; // (N, T, 4)
    let per_frame_boxes = boxes
        .to_vec3::<f32>()?
        .into_iter()
        .map(|q| q.into_iter().map(|b| [b[0], b[1], b[2], b[3]]).collect())
        .collect();
    Ok(OfflineKnowledge {
        clip_id: video.clip_id.clone(),
        queries: rows(&out.queries)?,
        embeddings: rows(&out.embeddings)?,
        video_class_logits: rows(&out.class_logits)?,
        per_frame_boxes,
    })
}

/// Identifies a teacher (frame model + aggregator) by its parameters.
pub fn teacher_hash(frame_model: &VisModel, aggregator: &Aggregator) -> Result<String> {
    Ok(format!("{}:{}", frame_model.store.hash()?, aggregator.store.hash()?))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KnowledgeCache {
    pub teacher_hash: String,
    pub entries: BTreeMap<String, OfflineKnowledge>,
}

impl KnowledgeCache {
    pub fn new(teacher_hash: String) -> Self {
        Self {
            teacher_hash,
            entries: BTreeMap::new(),
        }
    }

    pub fn get_or_build(&mut self, clip: &VideoClip, frame_model: &VisModel, aggregator: &Aggregator) -> Result<&OfflineKnowledge> {
        if !self.entries.contains_key(&clip.clip_id) {
            let k = build_offline_knowledge(clip, frame_model, aggregator)?;
            self.entries.insert(clip.clip_id.clone(), k);
        }
        Ok(&self.entries[&clip.clip_id])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads a cache file, discarding it when it was built by a different teacher.
    pub fn load_for(path: &Path, teacher_hash: &str) -> Result<Self> {
        if path.exists() {
            let cache: KnowledgeCache = read_json(path)?;
            if cache.teacher_hash == teacher_hash {
                return Ok(cache);
            }
            log::info!("knowledge cache {} belongs to another teacher; rebuilding", path.display());
        }
        Ok(Self::new(teacher_hash.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub clips_per_batch: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            clips_per_batch: 2,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

fn mean(items: Vec<Tensor>, dtype: DType) -> Result<Tensor> {
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

/// Video-level objective on the sampled frames of one clip.
pub fn aggregator_terms(
    aggregator: &Aggregator,
    frame_model: &VisModel,
    clip: &VideoClip,
    frame_indices: &[usize],
    weights: &LossWeights,
    qfa: &QfaConfig,
) -> Result<IdolTerms> {
    let (out, frame_out) = aggregator.forward_clip(frame_model, clip, frame_indices)?;
    let dtype = out.queries.dtype();
    let n = aggregator.model_config.num_queries;
    let targets: Vec<FrameTargets> = frame_indices.iter().map(|&t| FrameTargets::from_clip(clip, t)).collect();
    let present: Vec<&crate::synthetic_video::InstanceTrack> = clip
        .instances
        .iter()
        .filter(|inst| frame_indices.iter().any(|&t| inst.visible[t]))
        .collect();
    let assignment = if present.is_empty() {
        Assignment::empty(qfa.mode)
    } else {
        let classes: Vec<usize> = present.iter().map(|i| i.class_id).collect();
        let gt_boxes: Vec<Vec<Option<BoxCxcywh>>> = present
            .iter()
            .map(|i| frame_indices.iter().map(|&t| i.visible[t].then_some(i.boxes[t])).collect())
            .collect();
        let pred_boxes: Vec<Vec<BoxCxcywh>> = out
            .frame_boxes
            .to_dtype(DType::F64)?
            .transpose(0, 1)?
            .contiguous()?
            .to_vec3::<f64>()?
            .into_iter()
            .map(|q| q.into_iter().map(|b| BoxCxcywh::from_array([b[0], b[1], b[2], b[3]])).collect())
            .collect();
        let logits = out.class_logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let cost = video_cost_matrix(&logits, &pred_boxes, &classes, &gt_boxes, qfa.lambda_b)?;
        match_queries(&cost, qfa.mode)?
    };
    let classes: Vec<usize> = present.iter().map(|i| i.class_id).collect();
    let cls = classification_loss(&out.class_logits, &assignment.gt_of_query(n), &classes, weights.no_object_weight)?;

    let offline_matched: Vec<(usize, u32)> = assignment
        .sigma
        .iter()
        .zip(&present)
        .map(|(&q, inst)| (q, inst.instance_id))
        .collect();
    let mut box_terms = Vec::new();
    let mut mask_terms = Vec::new();
    let mut embed_terms = Vec::new();
    for (i, tg) in targets.iter().enumerate() {
        if tg.is_empty() {
            continue;
        }
        let sigma_t: Vec<usize> = tg
            .instance_ids
            .iter()
            .map(|id| offline_matched.iter().find(|(_, j)| j == id).map(|(q, _)| *q).unwrap())
            .collect();
        box_terms.push(box_loss(&out.frame_boxes.get(i)?, &sigma_t, &tg.boxes)?);
        mask_terms.push(mask_loss(&out.frame_masks.get(i)?, &sigma_t, &tg.masks)?);
        let frame_assign = match_to_targets(&frame_out.class_logits.get(i)?, &frame_out.boxes.get(i)?, tg, qfa)?;
        let e: MaybeLoss = embed_loss(
            &out.embeddings,
            &offline_matched,
            &frame_out.embeddings.get(i)?,
            &matched_ids(&frame_assign, tg),
            weights.embed_temperature,
        )?;
        if !e.skipped {
            embed_terms.push(e.value);
        }
    }
    Ok(IdolTerms {
        cls,
        bbox: mean(box_terms, dtype)?,
        mask: mean(mask_terms, dtype)?,
        embed: mean(embed_terms, dtype)?,
    })
}

/// Sorted random subset of `k` frame indices (all frames when the clip is shorter).
pub fn sample_frames<R: Rng + ?Sized>(num_frames: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if num_frames <= k {
        return (0..num_frames).collect();
    }
    let mut idx = sample(rng, num_frames, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains only the aggregator (encoder, decoder, video queries and its heads)
/// with the video-level objective; the frame model is never updated.
/// `on_step` receives the step index and the loss breakdown.
pub fn train_aggregator(
    dataset: &[VideoClip],
    frame_model: &VisModel,
    aggregator: &mut Aggregator,
    weights: &LossWeights,
    qfa: &QfaConfig,
    config: &TeacherTrainConfig,
    on_step: &mut dyn FnMut(usize, &LossBreakdown),
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(OokdError::validation("data.train", "empty training set"));
    }
    if frame_model.config != aggregator.model_config {
        return Err(OokdError::validation("teacher", "aggregator and frame model configs differ"));
    }
    if frame_model.trained_steps == 0 {
        log::warn!("training the aggregator on an untrained frame model");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.optimizer.clone());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch_terms = Vec::new();
        let mut totals = Vec::new();
        for _ in 0..config.clips_per_batch.max(1) {
            let clip = &dataset[rng.random_range(0..dataset.len())];
            let frames = sample_frames(clip.num_frames(), aggregator.config.train_frames, &mut rng);
            let terms = aggregator_terms(aggregator, frame_model, clip, &frames, weights, qfa)?;
            totals.push(idol_loss(&terms, weights)?);
            batch_terms.push(terms);
        }
        let dtype = aggregator.store.dtype();
        let total = mean(totals, dtype)?;
        let value = scalar(&total)?;
        if !value.is_finite() {
            return Err(OokdError::Divergence(format!("aggregator loss {value} at step {step}")));
        }
        let grads = total.backward()?;
        let lr = cosine_lr(config.optimizer.lr, step, config.steps);
        adam.step(&aggregator.store, &grads, lr)?;
        let breakdown = LossBreakdown::mean(
            &batch_terms
                .iter()
                .map(|t| {
                    let idol = idol_loss(t, weights)?;
                    let none = MaybeLoss {
                        value: Tensor::zeros((), dtype, &Device::Cpu)?,
                        skipped: true,
                    };
                    LossBreakdown::from_terms(t, &idol, &none, &idol)
                })
                .collect::<Result<Vec<_>>>()?,
        );
        on_step(step, &breakdown);
        losses.push(value);
    }
    Ok(losses)
}
