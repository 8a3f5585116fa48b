//! Text prompts, their embeddings, FiLM conditioning and the spatial prompt
//! pool.

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::data::{Contrast, ScanMeta};
use crate::error::{Error, Result};
use crate::nn::layers::{resize_bilinear, spatial_gap, Linear, Mlp};
use crate::nn::params::Builder;
use crate::sampling::{Accel, Trajectory};

/// Side length of the learnable spatial prompts before interpolation.
pub const POOL_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPrompt {
    pub scanner_text: String,
    pub acquisition_text: String,
}

pub fn render_prompts(meta: &ScanMeta) -> TextPrompt {
    TextPrompt {
        scanner_text: format!(
            "{} {} MRI scanner at {} field strength",
            meta.vendor, meta.scanner_model, meta.field_strength
        ),
        acquisition_text: format!(
            "MRI scan of {}, sampled using {} trajectory with an acceleration factor of {}",
            meta.contrast.name(),
            meta.trajectory.name(),
            meta.accel.factor()
        ),
    }
}

/// Maps text to a fixed-size real vector. Implementations must be
/// deterministic.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Frozen stand-in encoder: SHA-256 of a fixed salt and the text seeds a
/// ChaCha8 stream of standard normals, normalized to unit length.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dim: usize,
}

impl StubEncoder {
    pub const NAME: &'static str = "stub";
    pub const SALT: &'static [u8] = b"crunet-stub-text-encoder-v1";
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("text embedding dimension must be positive"));
        }
        Ok(Self { dim })
    }
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self {
            dim: Self::DEFAULT_DIM,
        }
    }
}

impl TextEncoder for StubEncoder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::validation("cannot embed an empty prompt"));
        }
        let mut hasher = Sha256::new();
        hasher.update(Self::SALT);
        hasher.update(text.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Looks up an encoder by its configured name.
pub fn encoder_by_name(name: &str, dim: usize) -> Result<Box<dyn TextEncoder>> {
    match name {
        StubEncoder::NAME => Ok(Box::new(StubEncoder::new(dim)?)),
        other => Err(Error::validation(format!("unknown text encoder '{other}'"))),
    }
}

/// Every prompt string the templates can produce for one scanner description.
pub fn acquisition_vocabulary() -> Vec<String> {
    let mut out = Vec::new();
    for c in Contrast::ALL {
        for t in Trajectory::ALL {
            for a in Accel::ALL {
                out.push(format!(
                    "MRI scan of {}, sampled using {} trajectory with an acceleration factor of {}",
                    c.name(),
                    t.name(),
                    a.factor()
                ));
            }
        }
    }
    out
}

/// Feature-wise affine modulation whose parameters are generated from the
/// prompt and the per-frame pooled features.
#[derive(Debug, Clone)]
pub struct Film {
    pub generator: Mlp,
    channels: usize,
}

impl Film {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let l1 = Linear::new(&mut b.sub("generator.l1"), 2 * channels, channels)?;
        // small output layer keeps the modulation close to identity at start
        let bound = 0.01 / (channels as f64).sqrt();
        let l2 = Linear::with_bound(&mut b.sub("generator.l2"), channels, 2 * channels, bound)?;
        Ok(Self {
            generator: Mlp { l1, l2 },
            channels,
        })
    }

    /// `features [B,T,C,H,W]`, `prompt [B,C]` -> `(features', W_P, B_P)` with
    /// the modulation parameters shaped `[B,T,C]`.
    pub fn forward(&self, features: &Tensor, prompt: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t, c, _, _) = features.dims5()?;
        let (pb, pc) = prompt.dims2()?;
        if pc != self.channels || c != self.channels || pb != b {
            return Err(Error::validation(format!(
                "FiLM expects {} channels, got features with {c} and prompt [{pb}, {pc}]",
                self.channels
            )));
        }
        let pooled = spatial_gap(features)?;
        let prompt_t = prompt.unsqueeze(1)?.broadcast_as((b, t, c))?;
        let out = self.generator.forward(&Tensor::cat(&[&prompt_t, &pooled], 2)?)?;
        let w = (out.narrow(2, 0, c)? + 1.0)?;
        let bias = out.narrow(2, c, c)?;
        Ok((film_apply(features, &w, &bias)?, w, bias))
    }
}

/// `W ⊙ features + B` with `W, B: [B,T,C]` broadcast over space.
pub fn film_apply(features: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let w = w.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
    let b = b.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
    Ok(features.broadcast_mul(&w)?.broadcast_add(&b)?)
}

/// Undersampling prompt update: temporal mean of `W_P + B_P`, `[B,T,C] -> [B,C]`.
pub fn update_pu(w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((w + b)?.mean(1)?)
}

/// Learnable spatial prompts, one entry per class of each attribute.
#[derive(Debug, Clone)]
pub struct SpatialPromptPool {
    pub trajectory: candle_core::Var,
    pub contrast: candle_core::Var,
    pub accel: candle_core::Var,
}

impl SpatialPromptPool {
    pub fn new(b: &mut Builder, channels: usize, side: usize) -> Result<Self> {
        let bound = 0.1;
        Ok(Self {
            trajectory: b.uniform("trajectory", &[Trajectory::ALL.len(), channels, side, side], bound)?,
            contrast: b.uniform("contrast", &[Contrast::ALL.len(), channels, side, side], bound)?,
            accel: b.uniform("accel", &[Accel::ALL.len(), channels, side, side], bound)?,
        })
    }

    /// Selected prompts stacked as `[B, 3, C, h0, w0]` in the order
    /// trajectory, contrast, acceleration.
    pub fn select(&self, indices: &PoolIndices) -> Result<Tensor> {
        let pick = |pool: &candle_core::Var, idx: &[u32]| -> Result<Tensor> {
            let n = pool.dims()[0];
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
                return Err(Error::validation(format!("prompt pool index {bad} out of range 0..{n}")));
            }
            let idx = Tensor::from_vec(idx.to_vec(), idx.len(), pool.device())?;
            Ok(pool.as_tensor().index_select(&idx, 0)?)
        };
        let s = pick(&self.trajectory, &indices.trajectory)?;
        let c = pick(&self.contrast, &indices.contrast)?;
        let r = pick(&self.accel, &indices.accel)?;
        Ok(Tensor::stack(&[s, c, r], 1)?)
    }
}

/// Per-sample pool selections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub trajectory: Vec<u32>,
    pub contrast: Vec<u32>,
    pub accel: Vec<u32>,
}

impl PoolIndices {
    pub fn from_metas<'a>(metas: impl IntoIterator<Item = &'a ScanMeta>) -> Self {
        let mut out = PoolIndices {
            trajectory: Vec::new(),
            contrast: Vec::new(),
            accel: Vec::new(),
        };
        for m in metas {
            out.trajectory.push(m.trajectory.index() as u32);
            out.contrast.push(m.contrast.index() as u32);
            out.accel.push(m.accel.index() as u32);
        }
        out
    }
}

/// Adds a feature-weighted mix of the selected spatial prompts to the
/// features.
#[derive(Debug, Clone)]
pub struct PromptBlock {
    pub pool: SpatialPromptPool,
    pub weight_head: Linear,
}

impl PromptBlock {
    pub fn new(b: &mut Builder, channels: usize, side: usize) -> Result<Self> {
        Ok(Self {
            pool: SpatialPromptPool::new(&mut b.sub("pool"), channels, side)?,
            weight_head: Linear::new(&mut b.sub("weight_head"), channels, 3)?,
        })
    }

    /// Mixing weights `[B,T,3]` from the pooled features.
    pub fn mixing_weights(&self, features: &Tensor) -> Result<Tensor> {
        let logits = self.weight_head.forward(&spatial_gap(features)?)?;
        softmax_last(&logits)
    }

    pub fn forward(&self, features: &Tensor, indices: &PoolIndices) -> Result<(Tensor, Tensor)> {
        let alpha = self.mixing_weights(features)?;
        self.forward_with_weights(features, indices, &alpha)
    }

    /// Same as [`forward`](Self::forward) with externally supplied mixing
    /// weights. Returns `(features', p_s)`.
    pub fn forward_with_weights(&self, features: &Tensor, indices: &PoolIndices, alpha: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, c, h, w) = features.dims5()?;
        let selected = self.pool.select(indices)?;
        let (sb, _, sc, h0, w0) = selected.dims5()?;
        if sb != b || sc != c {
            return Err(Error::Shape {
                expected: vec![b, 3, c, h0, w0],
                actual: selected.dims().to_vec(),
            });
        }
        let flat = selected.reshape((b, 3, c * h0 * w0))?;
        let mixed = alpha.matmul(&flat)?.reshape((b, t, c, h0, w0))?;
        let prompt_map = resize_bilinear(&mixed, h, w)?;
        let p_s = spatial_gap(&prompt_map)?.mean(1)?;
        Ok((features.broadcast_add(&prompt_map)?, p_s))
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
