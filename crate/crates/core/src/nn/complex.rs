//! Complex tensors as (re, im) pairs with a differentiable centered DFT.

use candle_core::{DType, Device, Tensor};
use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl CTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.dims() != im.dims() {
            return Err(Error::Shape {
                expected: re.dims().to_vec(),
                actual: im.dims().to_vec(),
            });
        }
        Ok(Self { re, im })
    }

    pub fn from_ndarray<D: ndarray::Dimension>(a: &ndarray::Array<Complex64, D>, dtype: DType) -> Result<Self> {
        let shape = a.shape().to_vec();
        let re: Vec<f64> = a.iter().map(|z| z.re).collect();
        let im: Vec<f64> = a.iter().map(|z| z.im).collect();
        Ok(Self {
            re: Tensor::from_vec(re, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?,
            im: Tensor::from_vec(im, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    pub fn to_ndarray(&self) -> Result<ArrayD<Complex64>> {
        let shape = self.re.dims().to_vec();
        let re: Vec<f64> = self.re.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let im: Vec<f64> = self.im.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let data = re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("matching element count"))
    }

    pub fn dims(&self) -> &[usize] {
        self.re.dims()
    }

    pub fn add(&self, o: &CTensor) -> Result<CTensor> {
        Ok(CTensor {
            re: self.re.broadcast_add(&o.re)?,
            im: self.im.broadcast_add(&o.im)?,
        })
    }

    /// Element-wise product with broadcasting.
    pub fn mul(&self, o: &CTensor) -> Result<CTensor> {
        Ok(CTensor {
            re: (self.re.broadcast_mul(&o.re)? - self.im.broadcast_mul(&o.im)?)?,
            im: (self.re.broadcast_mul(&o.im)? + self.im.broadcast_mul(&o.re)?)?,
        })
    }

    /// `conj(self) * o` with broadcasting.
    pub fn conj_mul(&self, o: &CTensor) -> Result<CTensor> {
        Ok(CTensor {
            re: (self.re.broadcast_mul(&o.re)? + self.im.broadcast_mul(&o.im)?)?,
            im: (self.re.broadcast_mul(&o.im)? - self.im.broadcast_mul(&o.re)?)?,
        })
    }

    /// Multiplies both parts by a real tensor (broadcast).
    pub fn scale(&self, s: &Tensor) -> Result<CTensor> {
        Ok(CTensor {
            re: self.re.broadcast_mul(s)?,
            im: self.im.broadcast_mul(s)?,
        })
    }

    pub fn sum_keepdim(&self, dim: usize) -> Result<CTensor> {
        Ok(CTensor {
            re: self.re.sum_keepdim(dim)?,
            im: self.im.sum_keepdim(dim)?,
        })
    }

    pub fn squeeze(&self, dim: usize) -> Result<CTensor> {
        Ok(CTensor {
            re: self.re.squeeze(dim)?,
            im: self.im.squeeze(dim)?,
        })
    }

    pub fn unsqueeze(&self, dim: usize) -> Result<CTensor> {
        Ok(CTensor {
            re: self.re.unsqueeze(dim)?,
            im: self.im.unsqueeze(dim)?,
        })
    }

    pub fn abs_sq(&self) -> Result<Tensor> {
        Ok((self.re.sqr()? + self.im.sqr()?)?)
    }

    /// Magnitude with a tiny floor inside the square root so the gradient
    /// stays finite at exact zeros.
    pub fn abs(&self) -> Result<Tensor> {
        Ok((self.abs_sq()? + 1e-12)?.sqrt()?)
    }
}

/// Centered orthonormal DFT matrix `F[k, n] = exp(-2 pi i (k-c)(n-c)/N)/sqrt(N)`
/// with `c = N/2`. Returns `(re, im)`; `inverse` conjugates.
pub fn dft_matrix(n: usize, inverse: bool, dtype: DType) -> Result<(Tensor, Tensor)> {
    let c = (n / 2) as f64;
    let norm = 1.0 / (n as f64).sqrt();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut re = Vec::with_capacity(n * n);
    let mut im = Vec::with_capacity(n * n);
    for k in 0..n {
        for j in 0..n {
            // reduce the phase index modulo n before converting to an angle
            let prod = ((k as f64 - c) * (j as f64 - c)).rem_euclid(n as f64);
            let angle = sign * 2.0 * PI * prod / n as f64;
            re.push(angle.cos() * norm);
            im.push(angle.sin() * norm);
        }
    }
    Ok((
        Tensor::from_vec(re, (n, n), &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(im, (n, n), &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

/// Left multiplication by a complex matrix over axis -2 and right
/// multiplication over axis -1: `A X B`.
fn sandwich(a: &(Tensor, Tensor), x: &CTensor, b: &(Tensor, Tensor)) -> Result<CTensor> {
    let dims = x.dims().to_vec();
    let rank = dims.len();
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    let lead: usize = dims[..rank - 2].iter().product();
    let xr = x.re.reshape((lead, h, w))?;
    let xi = x.im.reshape((lead, h, w))?;
    // A X
    let yr = (a.0.broadcast_matmul(&xr)? - a.1.broadcast_matmul(&xi)?)?;
    let yi = (a.0.broadcast_matmul(&xi)? + a.1.broadcast_matmul(&xr)?)?;
    // (A X) B
    let zr = (yr.broadcast_matmul(&b.0)? - yi.broadcast_matmul(&b.1)?)?;
    let zi = (yr.broadcast_matmul(&b.1)? + yi.broadcast_matmul(&b.0)?)?;
    Ok(CTensor {
        re: zr.reshape(dims.as_slice())?,
        im: zi.reshape(dims.as_slice())?,
    })
}

/// Precomputed DFT matrices for one image size.
#[derive(Debug, Clone)]
pub struct Fourier {
    fh: (Tensor, Tensor),
    fw: (Tensor, Tensor),
    ih: (Tensor, Tensor),
    iw: (Tensor, Tensor),
}

impl Fourier {
    pub fn new(h: usize, w: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            fh: dft_matrix(h, false, dtype)?,
            // the centered matrix is symmetric, so it doubles as its transpose
            fw: dft_matrix(w, false, dtype)?,
            ih: dft_matrix(h, true, dtype)?,
            iw: dft_matrix(w, true, dtype)?,
        })
    }

    pub fn fft2c(&self, x: &CTensor) -> Result<CTensor> {
        sandwich(&self.fh, x, &self.fw)
    }

    pub fn ifft2c(&self, x: &CTensor) -> Result<CTensor> {
        sandwich(&self.ih, x, &self.iw)
    }
}

/// Coil expansion: `img [B,T,H,W]`, `maps [B,C,H,W]` -> `[B,T,C,H,W]`.
pub fn sens_expand(img: &CTensor, maps: &CTensor) -> Result<CTensor> {
    img.unsqueeze(2)?.mul(&maps.unsqueeze(1)?)
}

/// Conjugate-weighted coil combination: `[B,T,C,H,W] -> [B,T,H,W]`.
pub fn sens_reduce(coils: &CTensor, maps: &CTensor) -> Result<CTensor> {
    maps.unsqueeze(1)?.conj_mul(coils)?.sum_keepdim(2)?.squeeze(2)
}

/// Hard data consistency: measured k-space replaces the estimate wherever the
/// mask is set. `mask` is `[B,T,1,H,W]` with values in {0,1}.
pub fn data_consistency(
    fourier: &Fourier,
    img: &CTensor,
    measured: &CTensor,
    mask: &Tensor,
    maps: &CTensor,
) -> Result<CTensor> {
    let k = fourier.fft2c(&sens_expand(img, maps)?)?;
    let keep = mask.affine(-1.0, 1.0)?;
    let mixed = CTensor {
        re: (k.re.broadcast_mul(&keep)? + measured.re.broadcast_mul(mask)?)?,
        im: (k.im.broadcast_mul(&keep)? + measured.im.broadcast_mul(mask)?)?,
    };
    sens_reduce(&fourier.ifft2c(&mixed)?, maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn matrix_dft_matches_fft_backend() {
        for (h, w) in [(8, 8), (5, 6), (7, 9)] {
            let x = random((2, 1, h, w), h as u64);
            let f = Fourier::new(h, w, DType::F64).unwrap();
            let ct = CTensor::from_ndarray(&x, DType::F64).unwrap();
            let fwd = f.fft2c(&ct).unwrap().to_ndarray().unwrap();
            let expect = kspace::fft2c(&x).unwrap();
            for (a, b) in fwd.iter().zip(expect.iter()) {
                assert!((a - b).norm() < 1e-10, "{h}x{w}");
            }
            let back = f.ifft2c(&ct).unwrap().to_ndarray().unwrap();
            let expect = kspace::ifft2c(&x).unwrap();
            for (a, b) in back.iter().zip(expect.iter()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }
}
