//! Named-tensor weight store and its binary file format.
//!
//! Layout (little-endian): `PSMW`, u32 version (1), u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload.
//! Tensors are written in name order, so equal stores serialize identically.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::nn::{Rng, Tensor};
use crate::sa_moe::{split_ffn, FfnWeights};
use crate::Density;

pub const MAGIC: &[u8; 4] = b"PSMW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weights version {0}")]
    Version(u32),
    #[error("truncated weights file at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("unknown tensor `{0}`")]
    Unknown(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("checksum mismatch: expected {expected}, computed {found}")]
    Checksum { expected: String, found: String },
}

type Result<T> = std::result::Result<T, WeightsError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| WeightsError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| WeightsError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(WeightsError::Version(version));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| WeightsError::BadName)?.to_string();
            let rank = usize::from(r.take(1)?[0]);
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(WeightsError::Truncated(r.pos))?;
            let payload = r.take(n.checked_mul(4).ok_or(WeightsError::Truncated(r.pos))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).expect("length checked");
            if tensors.insert(name.clone(), t).is_some() {
                return Err(WeightsError::Duplicate(name));
            }
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Checks that exactly the tensors of `cfg` are present, with the right
    /// shapes and finite values.
    pub fn audit(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.dims() != shape.as_slice() {
                return Err(WeightsError::Shape { name: name.clone(), expected: shape.clone(), found: t.dims().to_vec() });
            }
            if !t.is_finite() {
                return Err(WeightsError::NonFinite(name.clone()));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(k.as_str())) {
            return Err(WeightsError::Unknown(extra.clone()));
        }
        Ok(())
    }

    /// The shared FFN of a 1-based layer.
    pub fn ffn(&self, layer: usize) -> Result<FfnWeights<'_>> {
        self.ffn_at(&format!("blocks.{layer}.mlp"))
    }

    /// Sub-expert `density` of a mixture-of-experts layer.
    pub fn expert(&self, layer: usize, density: Density) -> Result<FfnWeights<'_>> {
        self.ffn_at(&format!("blocks.{layer}.moe.expert{}", density.index() + 1))
    }

    fn ffn_at(&self, prefix: &str) -> Result<FfnWeights<'_>> {
        Ok(FfnWeights {
            w1: self.get(&format!("{prefix}.fc1.weight"))?,
            b1: self.get(&format!("{prefix}.fc1.bias"))?,
            w2: self.get(&format!("{prefix}.fc2.weight"))?,
            b2: self.get(&format!("{prefix}.fc2.bias"))?,
        })
    }
}

/// Hex SHA-256 of a weights file image.
pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn verify_checksum(bytes: &[u8], expected: &str) -> Result<()> {
    let found = checksum(bytes);
    if found.eq_ignore_ascii_case(expected.trim()) {
        Ok(())
    } else {
        Err(WeightsError::Checksum { expected: expected.trim().to_string(), found })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(WeightsError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub const HEAD_BRANCHES: [(&str, usize); 3] = [("score", 1), ("offset", 2), ("size", 2)];

/// Every tensor name of a model with its shape.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden;
    let p = cfg.patch;
    let c = cfg.head_channels;
    let mut m = BTreeMap::new();
    let mut put = |name: String, dims: &[usize]| {
        m.insert(name, dims.to_vec());
    };
    put("patch_embed.weight".into(), &[d, 3 * p * p]);
    put("patch_embed.bias".into(), &[d]);
    put("pos_embed.template".into(), &[cfg.template_tokens(), d]);
    put("pos_embed.search".into(), &[cfg.search_tokens(), d]);
    for l in 1..=cfg.num_layers() {
        let b = format!("blocks.{l}");
        put(format!("{b}.norm1.weight"), &[d]);
        put(format!("{b}.norm1.bias"), &[d]);
        put(format!("{b}.attn.qkv.weight"), &[3 * d, d]);
        put(format!("{b}.attn.qkv.bias"), &[3 * d]);
        put(format!("{b}.attn.proj.weight"), &[d, d]);
        put(format!("{b}.attn.proj.bias"), &[d]);
        put(format!("{b}.norm2.weight"), &[d]);
        put(format!("{b}.norm2.bias"), &[d]);
        put(format!("{b}.mlp.fc1.weight"), &[h, d]);
        put(format!("{b}.mlp.fc1.bias"), &[h]);
        put(format!("{b}.mlp.fc2.weight"), &[d, h]);
        put(format!("{b}.mlp.fc2.bias"), &[d]);
        if cfg.is_moe_layer(l) {
            for e in 1..=3 {
                put(format!("{b}.moe.expert{e}.fc1.weight"), &[h / 3, d]);
                put(format!("{b}.moe.expert{e}.fc1.bias"), &[h / 3]);
                put(format!("{b}.moe.expert{e}.fc2.weight"), &[d, h / 3]);
                put(format!("{b}.moe.expert{e}.fc2.bias"), &[d]);
            }
            put(format!("{b}.moe.router.fc1.weight"), &[d, 2 * d]);
            put(format!("{b}.moe.router.fc1.bias"), &[d]);
            put(format!("{b}.moe.router.fc2.weight"), &[3, d]);
            put(format!("{b}.moe.router.fc2.bias"), &[3]);
        }
    }
    for stage in [2, 3] {
        let t = format!("transform.stage{stage}");
        put(format!("{t}.norm.weight"), &[d]);
        put(format!("{t}.norm.bias"), &[d]);
        put(format!("{t}.linear.weight"), &[d, d]);
        put(format!("{t}.linear.bias"), &[d]);
    }
    for l in cfg.halting_layers() {
        put(format!("halt.{l}.weight"), &[1, d]);
        put(format!("halt.{l}.bias"), &[1]);
    }
    for (branch, out) in HEAD_BRANCHES {
        let hb = format!("head.{branch}");
        put(format!("{hb}.conv1.weight"), &[c, d, 3, 3]);
        put(format!("{hb}.conv1.bias"), &[c]);
        put(format!("{hb}.bn1.scale"), &[c]);
        put(format!("{hb}.bn1.shift"), &[c]);
        put(format!("{hb}.conv2.weight"), &[c / 2, c, 3, 3]);
        put(format!("{hb}.conv2.bias"), &[c / 2]);
        put(format!("{hb}.bn2.scale"), &[c / 2]);
        put(format!("{hb}.bn2.shift"), &[c / 2]);
        put(format!("{hb}.out.weight"), &[out, c / 2, 1, 1]);
        put(format!("{hb}.out.bias"), &[out]);
    }
    m
}

/// Knobs for the seeded test-weight generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Bias of every halting predictor; positive values make early exits likely.
    pub halt_bias: f32,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { halt_bias: 0.0 }
    }
}

/// Shape-correct Xavier-style weights from a seed.
///
/// Expert slices are the exact hidden-dimension partition of each layer's
/// shared FFN, as they would be right after initialization from a dense model.
pub fn selftest_weights(cfg: &ModelConfig, seed: u64, opts: InitOptions) -> ModelWeights {
    let mut rng = Rng::new(seed);
    let mut w = ModelWeights::new();
    for (name, dims) in expected_shapes(cfg) {
        if name.contains(".moe.expert") {
            continue;
        }
        let n: usize = dims.iter().product();
        let data: Vec<f32> = if name.starts_with("halt.") && name.ends_with(".bias") {
            vec![opts.halt_bias; n]
        } else if name.starts_with("pos_embed.") {
            (0..n).map(|_| rng.normal(0.0, 0.02)).collect()
        } else if name.contains("norm") && name.ends_with(".weight") {
            vec![1.0; n]
        } else if name.contains("norm") && name.ends_with(".bias") {
            vec![0.0; n]
        } else if name.contains(".bn") && name.ends_with(".scale") {
            (0..n).map(|_| rng.uniform(0.95, 1.05)).collect()
        } else if name.ends_with(".bias") || name.ends_with(".shift") {
            (0..n).map(|_| rng.uniform(-0.02, 0.02)).collect()
        } else {
            let (fan_out, fan_in) = fans(&dims);
            let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
            (0..n).map(|_| rng.uniform(-a, a)).collect()
        };
        w.insert(name, Tensor::new(dims, data).expect("shape from manifest"));
    }
    for l in 1..=cfg.num_layers() {
        if !cfg.is_moe_layer(l) {
            continue;
        }
        let experts = split_ffn(&w.ffn(l).expect("shared ffn present")).expect("hidden divisible by 3");
        for d in Density::ORDER {
            let e = &experts.experts[d.index()];
            let prefix = format!("blocks.{l}.moe.expert{}", d.index() + 1);
            w.insert(format!("{prefix}.fc1.weight"), e.w1.clone());
            w.insert(format!("{prefix}.fc1.bias"), e.b1.clone());
            w.insert(format!("{prefix}.fc2.weight"), e.w2.clone());
            w.insert(format!("{prefix}.fc2.bias"), e.b2.clone());
        }
    }
    w
}

fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [o, i] => (*o, *i),
        [o, i, kh, kw] => (o * kh * kw, i * kh * kw),
        _ => (dims.iter().product(), dims.iter().product()),
    }
}
