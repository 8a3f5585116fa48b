//! Complex image / k-space algebra.
//!
//! All transforms use the centered, orthonormal convention: the DC bin sits at
//! index `n / 2` of each spatial axis and forward/inverse transforms are
//! unitary, so Parseval holds exactly up to rounding.

use ndarray::{s, Array, Array3, Array4, ArrayView3, ArrayView4, Axis, Dimension, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Complex-valued dense array; `[T, C, H, W]` for multi-coil data and
/// `[T, H, W]` for coil-combined images.
pub type ComplexArray<D> = Array<Complex64, D>;

/// Time-invariant coil sensitivity maps, `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    maps: Array3<Complex64>,
}

impl SensitivityMaps {
    pub fn new(maps: Array3<Complex64>) -> Result<Self> {
        ensure_finite(maps.iter())?;
        Ok(Self { maps })
    }

    /// Divides each pixel by the root-sum-of-squares over coils. Pixels where
    /// every coil is zero stay zero.
    pub fn normalized(mut maps: Array3<Complex64>) -> Result<Self> {
        ensure_finite(maps.iter())?;
        let (_, h, w) = maps.dim();
        for y in 0..h {
            for x in 0..w {
                let mut lane = maps.slice_mut(s![.., y, x]);
                let norm = lane.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                if norm > 0.0 {
                    lane.mapv_inplace(|v| v / norm);
                }
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Array3<Complex64> {
        &self.maps
    }

    pub fn num_coils(&self) -> usize {
        self.maps.dim().0
    }

    /// Largest deviation of `sum_c |S_c|^2` from one over pixels where any coil
    /// is nonzero.
    pub fn normalization_error(&self) -> f64 {
        let (_, h, w) = self.maps.dim();
        let mut worst = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let energy: f64 = self.maps.slice(s![.., y, x]).iter().map(|v| v.norm_sqr()).sum();
                if energy > 0.0 {
                    worst = worst.max((energy - 1.0).abs());
                }
            }
        }
        worst
    }
}

pub(crate) fn ensure_finite<'a>(mut values: impl Iterator<Item = &'a Complex64>) -> Result<()> {
    if values.any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::validation("non-finite value in complex array"));
    }
    Ok(())
}

fn fft_last_two_axes<D: Dimension>(
    input: &ComplexArray<D>,
    direction: FftDirection,
) -> Result<ComplexArray<D>> {
    let ndim = input.ndim();
    if ndim < 2 {
        return Err(Error::validation("fft2c needs at least two spatial axes"));
    }
    ensure_finite(input.iter())?;
    let mut out = input.to_owned();
    let mut planner = FftPlanner::<f64>::new();
    for axis in [ndim - 1, ndim - 2] {
        let n = out.len_of(Axis(axis));
        if n == 0 {
            continue;
        }
        let fft = planner.plan_fft(n, direction);
        centered_fft_along(&mut out, Axis(axis), &fft);
    }
    Ok(out)
}

fn centered_fft_along<D: Dimension>(arr: &mut ComplexArray<D>, axis: Axis, fft: &Arc<dyn Fft<f64>>) {
    let n = arr.len_of(axis);
    let half = n / 2;
    let scale = 1.0 / (n as f64).sqrt();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut lane in arr.lanes_mut(axis) {
        // ifftshift on the way in, fftshift on the way out
        for (i, b) in buf.iter_mut().enumerate() {
            *b = lane[(i + half) % n];
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for i in 0..n {
            lane[(i + half) % n] = buf[i] * scale;
        }
    }
}

/// Centered orthonormal 2-D DFT over the last two axes.
pub fn fft2c<D: Dimension>(img: &ComplexArray<D>) -> Result<ComplexArray<D>> {
    fft_last_two_axes(img, FftDirection::Forward)
}

/// Inverse of [`fft2c`].
pub fn ifft2c<D: Dimension>(ksp: &ComplexArray<D>) -> Result<ComplexArray<D>> {
    fft_last_two_axes(ksp, FftDirection::Inverse)
}

/// Root-sum-of-squares coil combination of `[T, C, H, W]` coil images,
/// accumulated with `hypot` so a single coil reproduces `|z|` exactly.
pub fn rss(coil_imgs: ArrayView4<Complex64>) -> Result<Array3<f64>> {
    let (t, c, h, w) = coil_imgs.dim();
    if c == 0 {
        return Err(Error::validation("rss needs at least one coil"));
    }
    let mut out = Array3::<f64>::zeros((t, h, w));
    for ci in 0..c {
        Zip::from(&mut out)
            .and(coil_imgs.index_axis(Axis(1), ci))
            .for_each(|o, v| *o = o.hypot(v.norm()));
    }
    Ok(out)
}

fn check_spatial(img_hw: (usize, usize), sens: &SensitivityMaps) -> Result<()> {
    let (_, h, w) = sens.maps.dim();
    if img_hw != (h, w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            actual: vec![img_hw.0, img_hw.1],
        });
    }
    Ok(())
}

/// SENSE forward model: `out[t, c] = img[t] * S_c`.
pub fn sens_expand(img: ArrayView3<Complex64>, sens: &SensitivityMaps) -> Result<Array4<Complex64>> {
    let (t, h, w) = img.dim();
    check_spatial((h, w), sens)?;
    let c = sens.num_coils();
    let mut out = Array4::<Complex64>::zeros((t, c, h, w));
    for ti in 0..t {
        for ci in 0..c {
            Zip::from(out.slice_mut(s![ti, ci, .., ..]))
                .and(img.index_axis(Axis(0), ti))
                .and(sens.maps.index_axis(Axis(0), ci))
                .for_each(|o, &x, &m| *o = x * m);
        }
    }
    Ok(out)
}

/// Adjoint of [`sens_expand`]: `out[t] = sum_c conj(S_c) * img[t, c]`.
pub fn sens_reduce(coil_imgs: ArrayView4<Complex64>, sens: &SensitivityMaps) -> Result<Array3<Complex64>> {
    let (t, c, h, w) = coil_imgs.dim();
    check_spatial((h, w), sens)?;
    if c != sens.num_coils() {
        return Err(Error::Shape {
            expected: vec![sens.num_coils()],
            actual: vec![c],
        });
    }
    let mut out = Array3::<Complex64>::zeros((t, h, w));
    for ti in 0..t {
        for ci in 0..c {
            Zip::from(out.index_axis_mut(Axis(0), ti))
                .and(coil_imgs.slice(s![ti, ci, .., ..]))
                .and(sens.maps.index_axis(Axis(0), ci))
                .for_each(|o, &x, &m| *o += m.conj() * x);
        }
    }
    Ok(out)
}

/// Scales k-space so the largest coil-image magnitude becomes one. Returns the
/// normalized k-space and the divisor that was applied.
pub fn normalize_case(ksp: &Array4<Complex64>) -> Result<(Array4<Complex64>, f64)> {
    let img = ifft2c(ksp)?;
    let scale = img.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return Err(Error::validation("cannot normalize all-zero k-space"));
    }
    let normalized = fft2c(&img.mapv(|v| v / scale))?;
    Ok((normalized, scale))
}

/// Applies a `[T, H, W]` binary mask to `[T, C, H, W]` k-space.
pub fn apply_mask(ksp: &Array4<Complex64>, mask: ArrayView3<u8>) -> Result<Array4<Complex64>> {
    let (t, c, h, w) = ksp.dim();
    if mask.dim() != (t, h, w) {
        return Err(Error::Shape {
            expected: vec![t, h, w],
            actual: mask.shape().to_vec(),
        });
    }
    let mut out = ksp.clone();
    for ci in 0..c {
        Zip::from(out.index_axis_mut(Axis(1), ci))
            .and(mask)
            .for_each(|k, &m| {
                if m == 0 {
                    *k = Complex64::new(0.0, 0.0);
                }
            });
    }
    Ok(out)
}

/// Zero-filled baseline: RSS of the inverse transform of masked k-space.
pub fn zero_filled_recon(ksp: &Array4<Complex64>, mask: ArrayView3<u8>) -> Result<Array3<f64>> {
    let masked = apply_mask(ksp, mask)?;
    rss(ifft2c(&masked)?.view())
}

/// Central `crop_h x crop_w` window over the last two axes. Odd remainders put
/// the extra row/column on the high-index side.
pub fn center_crop<A: Clone, D: Dimension>(img: &Array<A, D>, crop_h: usize, crop_w: usize) -> Result<Array<A, D>> {
    let ndim = img.ndim();
    if ndim < 2 {
        return Err(Error::validation("center_crop needs at least two axes"));
    }
    let h = img.len_of(Axis(ndim - 2));
    let w = img.len_of(Axis(ndim - 1));
    if crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w {
        return Err(Error::validation(format!(
            "crop {crop_h}x{crop_w} does not fit image {h}x{w}"
        )));
    }
    let top = (h - crop_h) / 2;
    let left = (w - crop_w) / 2;
    let mut view = img.view();
    view.slice_axis_inplace(Axis(ndim - 2), (top..top + crop_h).into());
    view.slice_axis_inplace(Axis(ndim - 1), (left..left + crop_w).into());
    Ok(view.to_owned())
}
