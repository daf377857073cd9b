//! Per-frame query-based instance segmentation model: a strided convolutional
//! backbone, a multi-head attention decoder over `N` learned queries, and the
//! class / box / dynamic-mask / contrastive-embedding heads.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OokdError, Result};
use crate::nn::{load_archive, save_archive, LayerNorm, Mlp, MultiHeadAttention, ParamStore};
use crate::synthetic_video::{Frame, DATA_SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of object queries `N`.
    pub num_queries: usize,
    /// Hidden width `C`.
    pub hidden_dim: usize,
    /// Foreground classes; logits carry one extra no-object slot.
    pub num_classes: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub backbone_channels: [usize; 3],
    /// Channels of the stride-4 map consumed by the dynamic mask head.
    pub mask_dim: usize,
    /// Width of the hidden dynamic convolution.
    pub mask_hidden: usize,
    /// Hidden width of the two-layer contrastive embedding head.
    pub embed_hidden: usize,
    pub frame_height: usize,
    pub frame_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 16,
            hidden_dim: 64,
            num_classes: 6,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            backbone_channels: [16, 32, 64],
            mask_dim: 16,
            mask_hidden: 16,
            embed_hidden: 64,
            frame_height: 64,
            frame_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(OokdError::validation("model.num_queries", "must be positive"));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(OokdError::validation(
                "model.hidden_dim",
                format!("{} is not divisible by {} heads", self.hidden_dim, self.heads),
            ));
        }
        if self.frame_height % 8 != 0 || self.frame_width % 8 != 0 {
            return Err(OokdError::validation("model.frame_height", "frame size must be a multiple of 8"));
        }
        if self.num_classes == 0 {
            return Err(OokdError::validation("model.num_classes", "must be positive"));
        }
        Ok(())
    }

    /// Logit slots per query: classes plus the no-object slot.
    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }

    pub fn no_object_index(&self) -> usize {
        self.num_classes
    }

    pub fn mask_size(&self) -> (usize, usize) {
        (self.frame_height / 4, self.frame_width / 4)
    }

    fn token_count(&self) -> usize {
        (self.frame_height / 8) * (self.frame_width / 8)
    }

    fn dynamic_param_count(&self) -> usize {
        let (d, h) = (self.mask_dim + 2, self.mask_hidden);
        d * h + h + h + 1
    }
}

/// Class, box, dynamic-mask and embedding heads. The offline aggregator owns
/// its own copy, initialized from the frame model.
#[derive(Debug, Clone)]
pub struct PredictionHeads {
    class: Linear,
    boxes: Mlp,
    mask_params: Linear,
    embed: Mlp,
    mask_dim: usize,
    mask_hidden: usize,
    mask_size: (usize, usize),
}

impl PredictionHeads {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.hidden_dim;
        Ok(Self {
            class: store.linear(&format!("{prefix}.class"), c, cfg.num_logits(), rng)?,
            boxes: Mlp::new(store, &format!("{prefix}.box"), c, c, 4, rng)?,
            mask_params: store.linear(&format!("{prefix}.mask_params"), c, cfg.dynamic_param_count(), rng)?,
            embed: Mlp::new(store, &format!("{prefix}.embed"), c, cfg.embed_hidden, c, rng)?,
            mask_dim: cfg.mask_dim,
            mask_hidden: cfg.mask_hidden,
            mask_size: cfg.mask_size(),
        })
    }

    pub fn class_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.class.forward(features)?)
    }

    /// Normalized `(cx, cy, w, h)` through a sigmoid, so every coordinate lies in `(0, 1)`.
    pub fn boxes(&self, features: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.boxes.forward(features)?)?)
    }

    /// Per-query dynamic convolution (two 1x1 layers) over the stride-4 map
    /// concatenated with coordinates relative to the query's box center.
    ///
    /// `features: (B, N, C)`, `mask_feats: (B, D, h, w)`, `boxes: (B, N, 4)` -> `(B, N, h, w)`.
    pub fn mask_logits(&self, features: &Tensor, mask_feats: &Tensor, boxes: &Tensor) -> Result<Tensor> {
        let (b, n, _) = features.dims3()?;
        let (h, w) = self.mask_size;
        let (fd, fh, fw) = (mask_feats.dim(1)?, mask_feats.dim(2)?, mask_feats.dim(3)?);
        if fd != self.mask_dim || fh != h || fw != w {
            return Err(OokdError::Shape(format!(
                "mask features {fd}x{fh}x{fw}, expected {}x{h}x{w}",
                self.mask_dim
            )));
        }
        let hw = h * w;
        let dev = features.device();
        let dtype = features.dtype();
        let d_in = self.mask_dim + 2;
        let hid = self.mask_hidden;

        let params = self.mask_params.forward(features)?; // (B, N, P)
        let w1 = params.narrow(D::Minus1, 0, hid * d_in)?.reshape((b * n, hid, d_in))?;
        let b1 = params.narrow(D::Minus1, hid * d_in, hid)?.reshape((b * n, hid, 1))?;
        let w2 = params.narrow(D::Minus1, hid * d_in + hid, hid)?.reshape((b * n, 1, hid))?;
        let b2 = params.narrow(D::Minus1, hid * d_in + 2 * hid, 1)?.reshape((b * n, 1, 1))?;

        let gx: Vec<f64> = (0..hw).map(|i| ((i % w) as f64 + 0.5) / w as f64).collect();
        let gy: Vec<f64> = (0..hw).map(|i| ((i / w) as f64 + 0.5) / h as f64).collect();
        let grid = Tensor::from_vec([gx, gy].concat(), (1, 1, 2, hw), &Device::Cpu)?
            .to_dtype(dtype)?
            .to_device(dev)?;
        let centers = boxes.detach().narrow(D::Minus1, 0, 2)?.reshape((b, n, 2, 1))?;
        let rel = grid.broadcast_sub(&centers)?; // (B, N, 2, hw)

        let feats = mask_feats
            .reshape((b, 1, self.mask_dim, hw))?
            .broadcast_as((b, n, self.mask_dim, hw))?;
        let x = Tensor::cat(&[&feats, &rel], 2)?.reshape((b * n, d_in, hw))?.contiguous()?;
        let hidden = w1.contiguous()?.matmul(&x)?.broadcast_add(&b1)?.relu()?;
        let out = w2.contiguous()?.matmul(&hidden)?.broadcast_add(&b2)?;
        Ok(out.reshape((b, n, h, w))?)
    }

    /// Two-layer perceptron followed by epsilon-guarded L2 normalization.
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.embed.forward(features)?)
    }
}

/// Row-wise `x / sqrt(|x|^2 + 1e-12)` over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: Mlp,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, ffn, dim, rng)?,
            norm1: store.layer_norm(&format!("{name}.norm1"), dim)?,
            norm2: store.layer_norm(&format!("{name}.norm2"), dim)?,
            norm3: store.layer_norm(&format!("{name}.norm3"), dim)?,
        })
    }

    /// Post-norm layer. `query_pos` is added to queries/keys of self-attention
    /// and to the cross-attention query; `memory_pos` to cross-attention keys.
    fn forward(&self, tgt: &Tensor, query_pos: Option<&Tensor>, memory: &Tensor, memory_pos: Option<&Tensor>) -> Result<Tensor> {
        let with_pos = |x: &Tensor, p: Option<&Tensor>| -> Result<Tensor> {
            Ok(match p {
                Some(p) => x.broadcast_add(p)?,
                None => x.clone(),
            })
        };
        let q = with_pos(tgt, query_pos)?;
        let x = self.norm1.forward(&(tgt + self.self_attn.forward(&q, &q, tgt)?)?)?;
        let q = with_pos(&x, query_pos)?;
        let k = with_pos(memory, memory_pos)?;
        let x = self.norm2.forward(&(&x + self.cross_attn.forward(&q, &k, memory)?)?)?;
        Ok(self.norm3.forward(&(&x + self.ffn.forward(&x)?)?)?)
    }
}

/// Self-attention + feed-forward block, used by the offline object encoder.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    self_attn: MultiHeadAttention,
    ffn: Mlp,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, ffn, dim, rng)?,
            norm1: store.layer_norm(&format!("{name}.norm1"), dim)?,
            norm2: store.layer_norm(&format!("{name}.norm2"), dim)?,
        })
    }

    /// Output of the self-attention sublayer alone (before residual and norm).
    pub fn attention(&self, x: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
        let q = match pos {
            Some(p) => x.broadcast_add(p)?,
            None => x.clone(),
        };
        self.self_attn.forward(&q, &q, x)
    }

    pub fn forward(&self, x: &Tensor, pos: Option<&Tensor>) -> Result<Tensor> {
        let x = self.norm1.forward(&(x + self.attention(x, pos)?)?)?;
        Ok(self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)?)
    }
}

/// Decoder stack shared in structure by the frame model and the offline aggregator.
#[derive(Debug, Clone)]
pub struct QueryDecoder {
    layers: Vec<DecoderLayer>,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, num_layers: usize, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| DecoderLayer::new(store, &format!("{prefix}.layer{i}"), dim, heads, ffn, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tgt: &Tensor, query_pos: Option<&Tensor>, memory: &Tensor, memory_pos: Option<&Tensor>) -> Result<Tensor> {
        let mut x = tgt.clone();
        for layer in &self.layers {
            x = layer.forward(&x, query_pos, memory, memory_pos)?;
        }
        Ok(x)
    }
}

/// Convolution with kernel 2 and stride 2 on a channel-last map, computed as
/// space-to-depth followed by a dense projection.
#[derive(Debug, Clone)]
struct PatchConv {
    proj: Linear,
}

impl PatchConv {
    fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            proj: store.linear(name, 4 * inp, out, rng)?,
        })
    }

    /// `(B, H, W, C)` -> `(B, H/2, W/2, C')`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let patches = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        Ok(self.proj.forward(&patches)?)
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stage1: PatchConv,
    stage2: PatchConv,
    stage3: PatchConv,
    lateral4: Linear,
    lateral8: Linear,
    mask_out: Linear,
}

/// Fixed 2D sinusoidal encoding of an `h x w` token grid: the first half of
/// the channels encodes the row, the second half the column. `(1, h*w, dim)`.
fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f32; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * dim;
            for (offset, pos, len) in [(0, (y as f64 + 0.5) / h as f64, half), (half, (x as f64 + 0.5) / w as f64, dim - half)] {
                for i in 0..len {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / len as f64);
                    let angle = pos * std::f64::consts::TAU / freq;
                    data[base + offset + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, h * w, dim), &Device::Cpu)?)
}

/// Nearest-neighbour 2x upsampling of a channel-last map.
fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Intermediate maps of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    /// `(B, D, H/4, W/4)` input of the dynamic mask head.
    pub mask_feats: Tensor,
    /// `(B, (H/8)(W/8), C)` attention memory, without positional encoding.
    pub memory: Tensor,
}

/// All outputs of the frame model for a batch of frames.
#[derive(Debug, Clone)]
pub struct FrameOutputs {
    /// `(B, N, C)` decoded instance features.
    pub features: Tensor,
    /// `(B, N, N_c)`.
    pub class_logits: Tensor,
    /// `(B, N, 4)` normalized `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `(B, N, H/4, W/4)`.
    pub mask_logits: Tensor,
    /// `(B, N, C)` unit-norm contrastive embeddings.
    pub embeddings: Tensor,
    pub maps: FeatureMaps,
}

impl FrameOutputs {
    pub fn detach(&self) -> Self {
        Self {
            features: self.features.detach(),
            class_logits: self.class_logits.detach(),
            boxes: self.boxes.detach(),
            mask_logits: self.mask_logits.detach(),
            embeddings: self.embeddings.detach(),
            maps: FeatureMaps {
                mask_feats: self.maps.mask_feats.detach(),
                memory: self.maps.memory.detach(),
            },
        }
    }
}

/// Host-side outputs for one frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuerySet {
    pub num_queries: usize,
    pub hidden_dim: usize,
    pub mask_size: (usize, usize),
    pub features: Vec<f32>,
    pub class_logits: Vec<Vec<f32>>,
    pub boxes: Vec<[f32; 4]>,
    /// `N` maps of `h * w` logits.
    pub mask_logits: Vec<Vec<f32>>,
    pub embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct VisModel {
    pub config: ModelConfig,
    /// Optimizer steps this model has been trained for.
    pub trained_steps: usize,
    pub store: ParamStore,
    backbone: Backbone,
    input_proj: Linear,
    pos_embed: Tensor,
    sine_pos: Tensor,
    query_content: Tensor,
    query_pos: Tensor,
    decoder: QueryDecoder,
    pub heads: PredictionHeads,
}

impl VisModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let [c1, c2, c3] = config.backbone_channels;
        let c = config.hidden_dim;
        let backbone = Backbone {
            stage1: PatchConv::new(&mut store, "backbone.stage1", 3, c1, &mut rng)?,
            stage2: PatchConv::new(&mut store, "backbone.stage2", c1, c2, &mut rng)?,
            stage3: PatchConv::new(&mut store, "backbone.stage3", c2, c3, &mut rng)?,
            lateral4: store.linear("backbone.lateral4", c2, config.mask_dim, &mut rng)?,
            lateral8: store.linear("backbone.lateral8", c3, config.mask_dim, &mut rng)?,
            mask_out: store.linear("backbone.mask_out", config.mask_dim, config.mask_dim, &mut rng)?,
        };
        let input_proj = store.linear("input_proj", c3, c, &mut rng)?;
        let pos_embed = store.uniform("pos_embed", &[1, config.token_count(), c], 0.1, &mut rng)?;
        let sine_pos = sine_position_encoding(config.frame_height / 8, config.frame_width / 8, c)?.to_dtype(dtype)?;
        let query_content = store.uniform("query_content", &[1, config.num_queries, c], 0.1, &mut rng)?;
        let query_pos = store.uniform("query_pos", &[1, config.num_queries, c], 1.0, &mut rng)?;
        let decoder = QueryDecoder::new(&mut store, "decoder", config.decoder_layers, c, config.heads, config.ffn_dim, &mut rng)?;
        let heads = PredictionHeads::new(&mut store, "heads", &config, &mut rng)?;
        Ok(Self {
            config,
            trained_steps: 0,
            store,
            backbone,
            input_proj,
            pos_embed,
            sine_pos,
            query_content,
            query_pos,
            decoder,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Stacks frames into a channel-last `(B, H, W, 3)` tensor scaled to `[-0.5, 0.5]`.
    pub fn frames_to_tensor(&self, frames: &[&Frame]) -> Result<Tensor> {
        let (h, w) = (self.config.frame_height, self.config.frame_width);
        let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
        for f in frames {
            if f.height != h || f.width != w {
                return Err(OokdError::Shape(format!(
                    "frame is {}x{}, model expects {h}x{w}",
                    f.height, f.width
                )));
            }
            data.extend(f.data.iter().map(|&v| v as f32 / 255.0 - 0.5));
        }
        let t = Tensor::from_vec(data, (frames.len(), h, w, 3), &Device::Cpu)?;
        Ok(t.to_dtype(self.store.dtype())?)
    }

    /// Backbone + decoder: `(B, H, W, 3)` -> `(B, N, C)` instance features and the feature maps.
    pub fn extract_frame_queries(&self, input: &Tensor) -> Result<(Tensor, FeatureMaps)> {
        let (b, h, w, ch) = input.dims4()?;
        if ch != 3 || h != self.config.frame_height || w != self.config.frame_width {
            return Err(OokdError::Shape(format!(
                "input is {h}x{w}x{ch}, expected {}x{}x3",
                self.config.frame_height, self.config.frame_width
            )));
        }
        let bb = &self.backbone;
        let s2 = bb.stage1.forward(input)?.relu()?;
        let s4 = bb.stage2.forward(&s2)?.relu()?;
        let s8 = bb.stage3.forward(&s4)?.relu()?;
        let (h4, w4) = self.config.mask_size();
        let fused = (bb.lateral4.forward(&s4)? + upsample2x(&bb.lateral8.forward(&s8)?)?)?.relu()?;
        let fused = bb.mask_out.forward(&fused)?;
        let mask_feats = fused
            .reshape((b, h4 * w4, self.config.mask_dim))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, self.config.mask_dim, h4, w4))?;

        let c3 = s8.dim(3)?;
        let tokens = s8.reshape((b, self.config.token_count(), c3))?;
        let memory = self.input_proj.forward(&tokens)?;
        let n = self.config.num_queries;
        let c = self.config.hidden_dim;
        let tgt = self.query_content.broadcast_as((b, n, c))?.contiguous()?;
        let features = self
            .decoder
            .forward(&tgt, Some(&self.query_pos), &memory, Some(&(&self.pos_embed + &self.sine_pos)?))?;
        Ok((features, FeatureMaps { mask_feats, memory }))
    }

    /// Class logits, boxes and mask logits from decoded features.
    pub fn predict_heads(&self, features: &Tensor, maps: &FeatureMaps) -> Result<(Tensor, Tensor, Tensor)> {
        let class_logits = self.heads.class_logits(features)?;
        let boxes = self.heads.boxes(features)?;
        let masks = self.heads.mask_logits(features, &maps.mask_feats, &boxes)?;
        Ok((class_logits, boxes, masks))
    }

    pub fn contrastive_embed(&self, features: &Tensor) -> Result<Tensor> {
        self.heads.embed(features)
    }

    pub fn forward(&self, input: &Tensor) -> Result<FrameOutputs> {
        let (features, maps) = self.extract_frame_queries(input)?;
        let (class_logits, boxes, mask_logits) = self.predict_heads(&features, &maps)?;
        let embeddings = self.contrastive_embed(&features)?;
        Ok(FrameOutputs {
            features,
            class_logits,
            boxes,
            mask_logits,
            embeddings,
            maps,
        })
    }

    pub fn forward_frames(&self, frames: &[&Frame]) -> Result<FrameOutputs> {
        self.forward(&self.frames_to_tensor(frames)?)
    }

    /// Eval-mode forward returning host-side query sets, one per frame.
    pub fn infer(&self, frames: &[&Frame]) -> Result<Vec<FrameQuerySet>> {
        let out = self.forward_frames(frames)?;
        to_query_sets(&out, &self.config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "frame_model".into());
        meta.insert("model_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("schema_version".into(), DATA_SCHEMA_VERSION.to_string());
        meta.insert("trained_steps".into(), self.trained_steps.to_string());
        save_archive(path, &self.store.tensors(), meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_archive(path)?;
        let config = checkpoint_config(path, &meta, "frame_model")?;
        let mut model = Self::new(config, 0)?;
        model.store.load_values(&tensors, "")?;
        model.trained_steps = meta.get("trained_steps").and_then(|v| v.parse().ok()).unwrap_or(0);
        Ok(model)
    }
}

pub(crate) fn checkpoint_config(path: &Path, meta: &BTreeMap<String, String>, kind: &str) -> Result<ModelConfig> {
    match meta.get("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(OokdError::schema(path, format!("expected a {kind} checkpoint, found {other:?}")));
        }
    }
    let version = meta.get("schema_version").and_then(|v| v.parse::<u32>().ok());
    if version != Some(DATA_SCHEMA_VERSION) {
        return Err(OokdError::schema(path, format!("unsupported data schema version {version:?}")));
    }
    let raw = meta
        .get("model_config")
        .ok_or_else(|| OokdError::schema(path, "missing model_config"))?;
    serde_json::from_str(raw).map_err(|e| OokdError::schema(path, e.to_string()))
}

pub fn to_query_sets(out: &FrameOutputs, cfg: &ModelConfig) -> Result<Vec<FrameQuerySet>> {
    let to_f32 = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?) };
    let b = out.features.dim(0)?;
    let n = cfg.num_queries;
    let c = cfg.hidden_dim;
    let nl = cfg.num_logits();
    let (h, w) = cfg.mask_size();
    let features = to_f32(&out.features)?;
    let logits = to_f32(&out.class_logits)?;
    let boxes = to_f32(&out.boxes)?;
    let masks = to_f32(&out.mask_logits)?;
    let emb = to_f32(&out.embeddings)?;
    let mut sets = Vec::with_capacity(b);
    for i in 0..b {
        sets.push(FrameQuerySet {
            num_queries: n,
            hidden_dim: c,
            mask_size: (h, w),
            features: features[i * n * c..(i + 1) * n * c].to_vec(),
            class_logits: (0..n)
                .map(|q| logits[(i * n + q) * nl..(i * n + q + 1) * nl].to_vec())
                .collect(),
            boxes: (0..n)
                .map(|q| {
                    let o = (i * n + q) * 4;
                    [boxes[o], boxes[o + 1], boxes[o + 2], boxes[o + 3]]
                })
                .collect(),
            mask_logits: (0..n)
                .map(|q| masks[(i * n + q) * h * w..(i * n + q + 1) * h * w].to_vec())
                .collect(),
            embeddings: (0..n)
                .map(|q| emb[(i * n + q) * c..(i * n + q + 1) * c].to_vec())
                .collect(),
        });
    }
    Ok(sets)
}
