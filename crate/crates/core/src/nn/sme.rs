use candle_core::Tensor;

use super::complex::CTensor;
use super::layers::{resize_bilinear, Conv2d};
use super::params::Builder;
use crate::error::{Error, Result};

/// Sensitivity map estimator: a small convolutional encoder-decoder applied
/// to each coil's ACS image, followed by per-pixel normalization across
/// coils.
#[derive(Debug, Clone)]
pub struct Sme {
    pub enc: Conv2d,
    pub down: Conv2d,
    pub mid: Conv2d,
    pub up: Conv2d,
    pub out: Conv2d,
}

impl Sme {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            enc: Conv2d::new(&mut b.sub("enc"), 2, channels, 1, 1, true)?,
            down: Conv2d::new(&mut b.sub("down"), channels, channels, 1, 2, true)?,
            mid: Conv2d::new(&mut b.sub("mid"), channels, channels, 1, 1, true)?,
            up: Conv2d::new(&mut b.sub("up"), channels, channels, 1, 1, true)?,
            out: Conv2d::new(&mut b.sub("out"), channels, 2, 1, 1, true)?,
        })
    }

    /// `acs_image [B,C,H,W]` (complex) -> normalized maps of the same shape.
    pub fn forward(&self, acs_image: &CTensor) -> Result<CTensor> {
        let (b, c, h, w) = acs_image.re.dims4()?;
        let x = Tensor::stack(&[&acs_image.re, &acs_image.im], 2)?.reshape((b * c, 2, h, w))?;
        let a = self.enc.forward(&x)?.relu()?;
        let d = self.down.forward(&a)?.relu()?;
        let m = self.mid.forward(&d)?.relu()?;
        let u = (self.up.forward(&resize_bilinear(&m, h, w)?)?.relu()? + a)?;
        let y = (self.out.forward(&u)? + x)?.reshape((b, c, 2, h, w))?;
        let raw = CTensor::new(y.narrow(2, 0, 1)?.squeeze(2)?, y.narrow(2, 1, 1)?.squeeze(2)?)?;
        normalize_maps(&raw)
    }
}

/// Divides every coil map by the root-sum-of-squares across coils.
pub fn normalize_maps(maps: &CTensor) -> Result<CTensor> {
    let energy = maps.abs_sq()?.sum_keepdim(1)?;
    let max = energy.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if max == 0.0 || !max.is_finite() {
        return Err(Error::validation("sensitivity estimate is zero or non-finite"));
    }
    let inv = (energy + 1e-24)?.sqrt()?.recip()?;
    maps.scale(&inv)
}
