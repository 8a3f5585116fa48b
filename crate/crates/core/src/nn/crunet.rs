//! One cascade's refinement network: a two-level recurrent U-Net with
//! prompt conditioning and cross-cascade feature aggregation.

use candle_core::Tensor;

use super::layers::{conv_seq, Conv21d, Conv2d};
use super::params::Builder;
use super::recurrent::{Bcrnnti, Crnnti, Direction};
use crate::error::{Error, Result};
use crate::prompts::{update_pu, Film, PoolIndices, PromptBlock};

pub const LEVEL_DILATIONS: [usize; 3] = [1, 2, 4];

/// Features handed from earlier cascades to later ones at each level
/// (level 1, level 2, bottleneck).
#[derive(Debug, Clone, Default)]
pub struct CascadeFeatureStore {
    pub levels: [Vec<Tensor>; 3],
}

impl CascadeFeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, feats: [Tensor; 3]) {
        for (buf, f) in self.levels.iter_mut().zip(feats) {
            buf.push(f);
        }
    }

    /// Entries per level, in level order.
    pub fn sizes(&self) -> [usize; 3] {
        [self.levels[0].len(), self.levels[1].len(), self.levels[2].len()]
    }
}

/// Concatenates all stored features of a level with the current one and maps
/// them back to `C` channels.
#[derive(Debug, Clone)]
pub struct Cfa {
    pub conv: Conv2d,
}

impl Cfa {
    pub fn new(b: &mut Builder, channels: usize, cascade_index: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, (cascade_index + 1) * channels, channels, dilation, 1, true)?,
        })
    }

    pub fn forward(&self, buffer: &[Tensor], current: &Tensor) -> Result<Tensor> {
        let c = current.dims5()?.2;
        let expected = self.conv.in_channels() / c - 1;
        if buffer.len() != expected {
            return Err(Error::validation(format!(
                "feature buffer holds {} entries, expected {expected}",
                buffer.len()
            )));
        }
        let mut all: Vec<&Tensor> = buffer.iter().collect();
        all.push(current);
        conv_seq(&self.conv, &Tensor::cat(&all, 2)?)
    }
}

/// Recurrent outputs passed to the next cascade: encoder level 1 and 2,
/// bottleneck, decoder level 2 and 1.
#[derive(Debug, Clone)]
pub struct IterHiddens {
    pub enc1: Tensor,
    pub enc2: Tensor,
    pub bottleneck: Tensor,
    pub dec2: Tensor,
    pub dec1: Tensor,
}

/// Text-prompt embeddings already refined to the channel width.
#[derive(Debug, Clone)]
pub struct PromptContext {
    /// `[B, C]` scanner prompt
    pub scanner: Tensor,
    /// `[B, C]` acquisition prompt
    pub acquisition: Tensor,
    pub indices: PoolIndices,
}

#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub cfa: Cfa,
    pub crnn: Crnnti,
    pub film_scanner: Film,
    pub film_acq: Film,
    pub down: Conv21d,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub up: Conv21d,
    pub crnn: Crnnti,
    pub film_scanner: Film,
    pub film_acq: Film,
    pub prompt: PromptBlock,
}

#[derive(Debug, Clone)]
pub struct CrunetBlock {
    pub index: usize,
    pub lift: Conv2d,
    pub enc1: EncoderLevel,
    pub enc2: EncoderLevel,
    pub bottleneck_cfa: Cfa,
    pub bottleneck: Bcrnnti,
    pub dec2: DecoderLevel,
    pub dec1: DecoderLevel,
    pub drop: Conv2d,
}

pub struct CrunetOutput {
    /// Refined 2-channel image `[B,T,2,H,W]`.
    pub image: Tensor,
    pub hiddens: IterHiddens,
    /// Pre-aggregation level features for the store.
    pub features: [Tensor; 3],
    pub p_u: Tensor,
    pub p_s: Tensor,
}

impl CrunetBlock {
    pub fn new(b: &mut Builder, channels: usize, index: usize, pool_side: usize) -> Result<Self> {
        let with_iter = index > 0;
        let [d1, d2, d3] = LEVEL_DILATIONS;
        let enc = |b: &mut Builder, name: &str, d: usize| -> Result<EncoderLevel> {
            let mut s = b.sub(name);
            Ok(EncoderLevel {
                cfa: Cfa::new(&mut s.sub("cfa"), channels, index, d)?,
                crnn: Crnnti::new(&mut s.sub("crnn"), channels, d, Direction::Forward, with_iter)?,
                film_scanner: Film::new(&mut s.sub("film_scanner"), channels)?,
                film_acq: Film::new(&mut s.sub("film_acq"), channels)?,
                down: Conv21d::down(&mut s.sub("down"), channels, d)?,
            })
        };
        let dec = |b: &mut Builder, name: &str, d: usize| -> Result<DecoderLevel> {
            let mut s = b.sub(name);
            Ok(DecoderLevel {
                up: Conv21d::up(&mut s.sub("up"), channels, d)?,
                crnn: Crnnti::new(&mut s.sub("crnn"), channels, d, Direction::Backward, with_iter)?,
                film_scanner: Film::new(&mut s.sub("film_scanner"), channels)?,
                film_acq: Film::new(&mut s.sub("film_acq"), channels)?,
                prompt: PromptBlock::new(&mut s.sub("prompt"), channels, pool_side)?,
            })
        };
        Ok(Self {
            index,
            lift: Conv2d::new(&mut b.sub("lift"), 2, channels, 1, 1, true)?,
            enc1: enc(b, "enc1", d1)?,
            enc2: enc(b, "enc2", d2)?,
            bottleneck_cfa: Cfa::new(&mut b.sub("bottleneck.cfa"), channels, index, d3)?,
            bottleneck: Bcrnnti::new(&mut b.sub("bottleneck.crnn"), channels, d3, with_iter)?,
            dec2: dec(b, "dec2", d2)?,
            dec1: dec(b, "dec1", d1)?,
            drop: Conv2d::new(&mut b.sub("drop"), channels, 2, 1, 1, true)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        prompts: &PromptContext,
        store: &CascadeFeatureStore,
        iter: Option<&IterHiddens>,
    ) -> Result<CrunetOutput> {
        if store.sizes() != [self.index; 3] {
            return Err(Error::validation(format!(
                "cascade {} received feature buffers of sizes {:?}",
                self.index,
                store.sizes()
            )));
        }
        let (iter_e1, iter_e2, iter_b, iter_g2, iter_g1) = match iter {
            Some(h) => (Some(&h.enc1), Some(&h.enc2), Some(&h.bottleneck), Some(&h.dec2), Some(&h.dec1)),
            None => (None, None, None, None, None),
        };

        let f1 = conv_seq(&self.lift, x)?;
        let (e1, s1) = encode(&self.enc1, &store.levels[0], &f1, prompts, iter_e1)?;
        let f2 = self.enc1.down.forward(&s1, None)?;
        let (e2, s2) = encode(&self.enc2, &store.levels[1], &f2, prompts, iter_e2)?;
        let f3 = self.enc2.down.forward(&s2, None)?;

        let merged = self.bottleneck_cfa.forward(&store.levels[2], &f3)?;
        let bott = self.bottleneck.forward(&merged, iter_b)?;

        let (g2, y2, _, p_s) = decode(&self.dec2, &bott, &e2, prompts, iter_g2)?;
        let (g1, y1, p_u, _) = decode(&self.dec1, &y2, &e1, prompts, iter_g1)?;
        let image = (conv_seq(&self.drop, &y1)? + x)?;

        Ok(CrunetOutput {
            image,
            hiddens: IterHiddens {
                enc1: e1,
                enc2: e2,
                bottleneck: bott,
                dec2: g2,
                dec1: g1,
            },
            features: [f1, f2, f3],
            p_u,
            p_s,
        })
    }
}

/// Returns the recurrent output (skip and iteration hidden) and the
/// FiLM-modulated features fed to the downsampling layer.
fn encode(
    level: &EncoderLevel,
    buffer: &[Tensor],
    current: &Tensor,
    prompts: &PromptContext,
    h_iter: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let merged = level.cfa.forward(buffer, current)?;
    let h = level.crnn.forward(&merged, h_iter)?;
    let (m, _, _) = level.film_scanner.forward(&h, &prompts.scanner)?;
    let (m, _, _) = level.film_acq.forward(&m, &prompts.acquisition)?;
    Ok((h, m))
}

/// Returns `(recurrent output, level output, p_u, p_s)`.
fn decode(
    level: &DecoderLevel,
    below: &Tensor,
    skip: &Tensor,
    prompts: &PromptContext,
    h_iter: Option<&Tensor>,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (_, _, _, h, w) = skip.dims5()?;
    let up = (level.up.forward(below, Some((h, w)))? + skip)?;
    let g = level.crnn.forward(&up, h_iter)?;
    let (m, _, _) = level.film_scanner.forward(&g, &prompts.scanner)?;
    let (m, wp, bp) = level.film_acq.forward(&m, &prompts.acquisition)?;
    let p_u = update_pu(&wp, &bp)?;
    let (out, p_s) = level.prompt.forward(&m, &prompts.indices)?;
    Ok((g, out, p_u, p_s))
}
