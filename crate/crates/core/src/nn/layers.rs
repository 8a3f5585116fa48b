//! Basic differentiable layers built from matmul-friendly tensor ops.

use candle_core::{DType, Device, Tensor, Var, D};

use super::im2col::im2col3x3;
use super::params::Builder;
use crate::error::{Error, Result};

/// 3x3 convolution with "same" padding, optional stride 2 and dilation,
/// lowered to a single patch-matrix matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, dilation: usize, stride: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let weight = b.uniform("weight", &[cout, cin, 3, 3], bound)?;
        let bias = if bias { Some(b.uniform("bias", &[cout], bound)?) } else { None };
        Ok(Self {
            weight,
            bias,
            stride,
            dilation,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `x: [N, Cin, H, W] -> [N, Cout, H', W']`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, cin, h, w) = x.dims4()?;
        if cin != self.in_channels() {
            return Err(Error::Shape {
                expected: vec![self.in_channels()],
                actual: vec![cin],
            });
        }
        let d = self.dilation;
        let cout = self.out_channels();
        let cols = im2col3x3(x, d, self.stride)?;
        let (ho, wo) = ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1);
        let kernel = self.weight.as_tensor().reshape((cout, cin * 9))?;
        let mut y = kernel.broadcast_matmul(&cols)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.as_tensor().reshape((1, cout, 1))?)?;
        }
        Ok(y.reshape((n, cout, ho, wo))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self {
            weight: b.uniform("weight", &[dout, din], bound)?,
            bias: b.uniform("bias", &[dout], bound)?,
        })
    }

    pub fn with_bound(b: &mut Builder, din: usize, dout: usize, bound: f64) -> Result<Self> {
        Ok(Self {
            weight: b.uniform("weight", &[dout, din], bound)?,
            bias: b.uniform("bias", &[dout], bound)?,
        })
    }

    /// `x: [..., din] -> [..., dout]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor();
        Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&mut b.sub("l1"), din, hidden)?,
            l2: Linear::new(&mut b.sub("l2"), hidden, dout)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

/// Frame index of `t + offset` with reflection at the sequence ends; a
/// one-frame sequence reflects onto itself.
pub fn reflect_index(t: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let mut i = t;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Three-tap convolution along time with reflection padding, mixing channels.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub weight: Var,
    pub bias: Var,
}

impl TemporalConv {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        let bound = 1.0 / ((3 * channels) as f64).sqrt();
        Ok(Self {
            weight: b.uniform("weight", &[channels, 3 * channels], bound)?,
            bias: b.uniform("bias", &[channels], bound)?,
        })
    }

    /// `seq: [B, T, C, H, W]`
    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        let (bsz, t, c, h, w) = seq.dims5()?;
        let idx = |offset: isize| -> Result<Tensor> {
            let v: Vec<u32> = (0..t as isize).map(|i| reflect_index(i + offset, t) as u32).collect();
            Ok(Tensor::from_vec(v, t, seq.device())?)
        };
        let seq = &seq.contiguous()?;
        let prev = seq.index_select(&idx(-1)?, 1)?;
        let next = seq.index_select(&idx(1)?, 1)?;
        let stacked = Tensor::cat(&[&prev, seq, &next], 2)?.reshape((bsz * t, 3 * c, h * w))?;
        let y = self
            .weight
            .as_tensor()
            .broadcast_matmul(&stacked)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1))?)?;
        Ok(y.reshape((bsz, t, c, h, w))?)
    }
}

/// Bilinear interpolation weights (half-pixel centers, edge clamped) mapping
/// `src` samples to `dst` samples, as a `[dst, src]` matrix.
pub fn bilinear_matrix(dst: usize, src: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0.0f64; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[i * src + i0] += 1.0 - frac;
        m[i * src + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (dst, src), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear resize over the last two axes of a tensor of rank >= 2.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let rank = dims.len();
    if rank < 2 {
        return Err(Error::validation("resize needs at least two axes"));
    }
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let lead: usize = dims[..rank - 2].iter().product();
    let flat = x.reshape((lead, h, w))?;
    let ah = bilinear_matrix(out_h, h, x.dtype())?;
    let aw = bilinear_matrix(out_w, w, x.dtype())?;
    let y = ah.broadcast_matmul(&flat)?.broadcast_matmul(&aw.t()?)?;
    let mut out_dims = dims[..rank - 2].to_vec();
    out_dims.extend([out_h, out_w]);
    Ok(y.reshape(out_dims)?)
}

/// Merges batch and time: `[B, T, C, H, W] -> [B*T, C, H, W]`.
pub fn fold_time(seq: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = seq.dims5()?;
    Ok(seq.reshape((b * t, c, h, w))?)
}

pub fn unfold_time(x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, t, c, h, w))?)
}

/// Applies a 2-D conv frame by frame to a `[B, T, C, H, W]` sequence.
pub fn conv_seq(conv: &Conv2d, seq: &Tensor) -> Result<Tensor> {
    let (b, t, ..) = seq.dims5()?;
    unfold_time(&conv.forward(&fold_time(seq)?)?, b, t)
}

/// Spatial global average pooling: `[B, T, C, H, W] -> [B, T, C]`.
pub fn spatial_gap(seq: &Tensor) -> Result<Tensor> {
    Ok(seq.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Spatial 3x3 conv followed by a temporal 3-tap conv. Downsampling uses a
/// stride-2 spatial conv; upsampling resizes bilinearly to the requested size
/// before the spatial conv.
#[derive(Debug, Clone)]
pub struct Conv21d {
    pub spatial: Conv2d,
    pub temporal: TemporalConv,
}

impl Conv21d {
    pub fn down(b: &mut Builder, channels: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            spatial: Conv2d::new(&mut b.sub("spatial"), channels, channels, dilation, 2, true)?,
            temporal: TemporalConv::new(&mut b.sub("temporal"), channels)?,
        })
    }

    pub fn up(b: &mut Builder, channels: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            spatial: Conv2d::new(&mut b.sub("spatial"), channels, channels, dilation, 1, true)?,
            temporal: TemporalConv::new(&mut b.sub("temporal"), channels)?,
        })
    }

    pub fn forward(&self, seq: &Tensor, resize_to: Option<(usize, usize)>) -> Result<Tensor> {
        let x = match resize_to {
            Some((h, w)) => resize_bilinear(seq, h, w)?,
            None => seq.clone(),
        };
        self.temporal.forward(&conv_seq(&self.spatial, &x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builder_conv(cin: usize, cout: usize, dil: usize, stride: usize) -> Conv2d {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Builder::new(&mut store, &mut rng);
        Conv2d::new(&mut b, cin, cout, dil, stride, true).unwrap()
    }

    fn naive_conv(x: &[f64], dims: (usize, usize, usize, usize), conv: &Conv2d) -> Vec<f64> {
        let (n, cin, h, w) = dims;
        let wt: Vec<f64> = conv.weight.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let bias: Vec<f64> = conv.bias.as_ref().unwrap().as_tensor().to_vec1().unwrap();
        let cout = conv.out_channels();
        let (s, d) = (conv.stride as isize, conv.dilation as isize);
        let ho = (h - 1) / conv.stride + 1;
        let wo = (w - 1) / conv.stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let y = oy as isize * s + (ky - 1) * d;
                                    let x_ = ox as isize * s + (kx - 1) * d;
                                    if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * cin + ci) * h + y as usize) * w + x_ as usize;
                                    let wi = ((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize;
                                    acc += wt[wi] * x[xi];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (dil, stride, h, w) in [(1, 1, 6, 5), (2, 1, 7, 7), (4, 1, 9, 8), (1, 2, 7, 6), (2, 2, 8, 8)] {
            let conv = builder_conv(3, 2, dil, stride);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let n = 2;
            let data: Vec<f64> = (0..n * 3 * h * w).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let x = Tensor::from_vec(data.clone(), (n, 3, h, w), &Device::Cpu).unwrap();
            let y: Vec<f64> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let expect = naive_conv(&data, (n, 3, h, w), &conv);
            assert_eq!(y.len(), expect.len());
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "dil {dil} stride {stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(1, 1), 0);
        assert_eq!(reflect_index(2, 2), 0);
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity() {
        let m: Vec<Vec<f64>> = bilinear_matrix(7, 3, DType::F64).unwrap().to_vec2().unwrap();
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id: Vec<Vec<f64>> = bilinear_matrix(4, 4, DType::F64).unwrap().to_vec2().unwrap();
        for (i, row) in id.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        // constant images stay constant under resize
        let x = Tensor::full(2.5f64, (2, 3, 4), &Device::Cpu).unwrap();
        let y: Vec<f64> = resize_bilinear(&x, 8, 6).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn temporal_conv_on_single_frame_uses_reflection() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut store, &mut rng);
        let tc = TemporalConv::new(&mut b, 2).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 1, 2, 3, 3), &Device::Cpu).unwrap();
        let y = tc.forward(&x).unwrap();
        // one frame: y = (W_prev + W_cur + W_next) x + b
        let w: Vec<Vec<f64>> = tc.weight.as_tensor().to_vec2().unwrap();
        let bias: Vec<f64> = tc.bias.as_tensor().to_vec1().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        for co in 0..2 {
            for p in 0..9 {
                let mut acc = bias[co];
                for ci in 0..2 {
                    acc += (w[co][ci] + w[co][2 + ci] + w[co][4 + ci]) * xv[ci * 9 + p];
                }
                assert!((yv[co * 9 + p] - acc).abs() < 1e-12);
            }
        }
    }
}
