//! Small layer toolkit on top of candle: a named parameter store with seeded
//! initialization, the layers the models need, an Adam optimizer with
//! serializable state, and checkpoint archives.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OokdError, Result};

/// Named trainable tensors. Iteration order is the key order, which keeps
/// hashing, saving and optimizer updates deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new(DType::F32)
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(OokdError::validation("parameter", format!("duplicate name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.insert(name.to_string(), values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.to_string(), vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[out, inp], bound, rng)?;
        let b = self.uniform(&format!("{name}.bias"), &[out], bound, rng)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((inp * kernel * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[out, inp, kernel, kernel], bound, rng)?;
        let b = self.uniform(&format!("{name}.bias"), &[out], bound, rng)?;
        let cfg = Conv2dConfig {
            padding: kernel / 2,
            stride,
            ..Default::default()
        };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: self.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    /// Copies values from `other` for every name they share (optionally after
    /// stripping `src_prefix` and prepending `dst_prefix`). Returns the number of copied tensors.
    pub fn copy_matching(&self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in other.vars.iter() {
            let Some(rest) = name.strip_prefix(src_prefix) else {
                continue;
            };
            if let Some(dst) = self.vars.get(&format!("{dst_prefix}{rest}")) {
                if dst.shape() != src.shape() {
                    return Err(OokdError::Shape(format!("{name}: {:?} vs {:?}", src.shape(), dst.shape())));
                }
                dst.set(&src.as_tensor().to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            h.update(format!("{:?}", var.shape().dims()).as_bytes());
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in flat {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`; all names must be present with matching shapes.
    pub fn load_values(&self, values: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = values
                .get(&key)
                .ok_or_else(|| OokdError::validation("checkpoint", format!("missing tensor {key}")))?;
            if t.shape() != var.shape() {
                return Err(OokdError::Shape(format!(
                    "{key}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: store.linear(&format!("{name}.fc1"), inp, hidden, rng)?,
            fc2: store.linear(&format!("{name}.fc2"), hidden, out, rng)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Differentiable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(OokdError::validation("heads", format!("{dim} not divisible by {heads}")));
        }
        Ok(Self {
            q: store.linear(&format!("{name}.q"), dim, dim, rng)?,
            k: store.linear(&format!("{name}.k"), dim, dim, rng)?,
            v: store.linear(&format!("{name}.v"), dim, dim, rng)?,
            o: store.linear(&format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// `query: (B, Lq, C)`, `key`/`value: (B, Lk, C)` -> `(B, Lq, C)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, lq, c) = query.dims3()?;
        let lk = key.dim(1)?;
        let hd = c / self.heads;
        let split = |x: Tensor, l: usize| -> candle_core::Result<Tensor> {
            x.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(query)?, lq)?;
        let k = split(self.k.forward(key)?, lk)?;
        let v = split(self.v.forward(value)?, lk)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, c))?;
        Ok(self.o.forward(&out)?)
    }
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update with learning rate `lr`; parameters without a gradient are left untouched.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0;
        let mut present = Vec::new();
        for (name, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                present.push((name.clone(), var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(OokdError::Divergence(format!("gradient norm is {norm}")));
        }
        let scale = if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
            self.config.max_grad_norm / (norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m = match self.m.get(&name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.config.eps)?)?;
            let mut next = (var.as_tensor() - (update * lr)?)?;
            if self.config.weight_decay > 0.0 {
                next = (next - (var.as_tensor() * (lr * self.config.weight_decay))?)?;
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

const ARCHIVE_META_KEY: &str = "ookd";

/// Writes tensors plus string metadata into one safetensors archive.
pub fn save_archive(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: BTreeMap<String, String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| OokdError::io(parent, e))?;
    }
    let meta = HashMap::from([(ARCHIVE_META_KEY.to_string(), serde_json::to_string(&metadata)?)]);
    let data: Vec<(&String, &Tensor)> = tensors.iter().collect();
    safetensors::serialize_to_file(data, Some(meta), path)
        .map_err(|e| OokdError::schema(path, e.to_string()))
}

pub fn load_archive(path: &Path) -> Result<(HashMap<String, Tensor>, BTreeMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| OokdError::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&buf)
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    let metadata: BTreeMap<String, String> = match meta.metadata().as_ref().and_then(|m| m.get(ARCHIVE_META_KEY)) {
        Some(raw) => serde_json::from_str(raw).map_err(|e| OokdError::schema(path, e.to_string()))?,
        None => BTreeMap::new(),
    };
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)
        .map_err(|e| OokdError::schema(path, e.to_string()))?;
    Ok((tensors, metadata))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let buf = std::fs::read(path).map_err(|e| OokdError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut s = ParamStore::default();
            s.linear("a", 3, 4, &mut rng).unwrap();
            s.hash().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut s = ParamStore::new(DType::F64);
        let ln = s.layer_norm("ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new(DType::F64);
        let w = s.constant("w", &[2], 3.0).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            max_grad_norm: 0.0,
            ..Default::default()
        });
        for _ in 0..300 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&s, &grads, 0.1).unwrap();
        }
        let v = w.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::default();
        s.linear("l", 5, 3, &mut rng).unwrap();
        let path = dir.path().join("x.safetensors");
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        save_archive(&path, &s.tensors(), meta.clone()).unwrap();
        let (t, m) = load_archive(&path).unwrap();
        assert_eq!(m, meta);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut other = ParamStore::default();
        other.linear("l", 5, 3, &mut rng).unwrap();
        assert_ne!(other.hash().unwrap(), s.hash().unwrap());
        other.load_values(&t, "").unwrap();
        assert_eq!(other.hash().unwrap(), s.hash().unwrap());
    }
}
