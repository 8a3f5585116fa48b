//! Patch extraction for 3x3 convolutions as a single autograd node.
//!
//! Building the patch matrix from padded slices works, but every slice adds
//! a zero-padded full-size gradient on the way back. Gathering and scattering
//! the nine taps directly keeps the backward pass at one buffer per call.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    dilation: usize,
    stride: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        ((self.h - 1) / self.stride + 1, (self.w - 1) / self.stride + 1)
    }

    /// Output columns `ox` whose source `ox * stride + dx` lies inside `0..len`.
    fn valid_range(&self, dx: isize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if dx < 0 { ((-dx) + s - 1) / s } else { 0 };
        let hi = ((len as isize - dx + s - 1) / s).clamp(0, out as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    /// Calls `f(col, img, count)` for every run of in-image taps: column
    /// offsets `col..col + count` read image pixels starting at `img`,
    /// stepping by `stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let d = self.dilation as isize;
        for plane in 0..self.n * self.c {
            let img_base = plane * self.h * self.w;
            for k in 0..9 {
                let dy = (k / 3) as isize * d - d;
                let dx = (k % 3) as isize * d - d;
                let (x0, x1) = self.valid_range(dx, self.w, wo);
                let (y0, y1) = self.valid_range(dy, self.h, ho);
                if x0 >= x1 {
                    continue;
                }
                let col_base = (plane * 9 + k) * ho * wo;
                for oy in y0..y1 {
                    let y = ((oy * self.stride) as isize + dy) as usize;
                    let src = (img_base + y * self.w) as isize + (x0 * self.stride) as isize + dx;
                    f(col_base + oy * wo + x0, src as usize, x1 - x0);
                }
            }
        }
    }

    fn gather<T: WithDType>(&self, img: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let mut cols = vec![T::zero(); self.n * self.c * 9 * ho * wo];
        let st = self.stride;
        self.for_each_run(|dst, src, count| {
            let out = &mut cols[dst..dst + count];
            if st == 1 {
                out.copy_from_slice(&img[src..src + count]);
            } else {
                for (o, v) in out.iter_mut().zip(img[src..].iter().step_by(st)) {
                    *o = *v;
                }
            }
        });
        cols
    }

    fn scatter<T: WithDType>(&self, cols: &[T]) -> Vec<T> {
        let mut img = vec![T::zero(); self.n * self.c * self.h * self.w];
        let st = self.stride;
        self.for_each_run(|col, dst, count| {
            let part = &cols[col..col + count];
            if st == 1 {
                for (o, v) in img[dst..dst + count].iter_mut().zip(part) {
                    *o += *v;
                }
            } else {
                for (o, v) in img[dst..].iter_mut().step_by(st).zip(part) {
                    *o += *v;
                }
            }
        });
        img
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("patch extraction expects a contiguous tensor"),
    }
}

/// `[N, C, H, W] -> [N, C * 9, H' * W']` with zero padding outside the image.
struct Im2Col {
    dilation: usize,
    stride: usize,
}

/// Adjoint of [`Im2Col`]: accumulates patch columns back onto the image grid.
struct Col2Im {
    geom: Geometry,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let geom = Geometry {
            n,
            c,
            h,
            w,
            dilation: self.dilation,
            stride: self.stride,
        };
        let (ho, wo) = geom.out_hw();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(geom.gather(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(geom.gather(contiguous(v, layout)?)),
            other => bail!("unsupported dtype {:?} for patch extraction", other.dtype()),
        };
        Ok((out, Shape::from((n, c * 9, ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let geom = Geometry {
            n,
            c,
            h,
            w,
            dilation: self.dilation,
            stride: self.stride,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im { geom })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom;
        let (ho, wo) = g.out_hw();
        if layout.shape().dims() != [g.n, g.c * 9, ho * wo] {
            bail!("column buffer has shape {:?}", layout.shape());
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.scatter(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.scatter(contiguous(v, layout)?)),
            other => bail!("unsupported dtype {:?} for patch scattering", other.dtype()),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Im2Col {
            dilation: self.geom.dilation,
            stride: self.geom.stride,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

/// Patch matrix of a 3x3 kernel with "same" padding: `[N, C, H, W]` becomes
/// `[N, C * 9, H' * W']`, with `H' = (H - 1) / stride + 1`.
pub fn im2col3x3(x: &Tensor, dilation: usize, stride: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { dilation, stride })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn scatter_is_the_adjoint_of_gather() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let dev = Device::Cpu;
        for (d, s) in [(1, 1), (2, 1), (1, 2), (4, 2)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
            let cols = im2col3x3(&x, d, s).unwrap();
            let y = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
            let lhs = (&cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();

            let xv = Var::from_tensor(&x).unwrap();
            let grads = (im2col3x3(xv.as_tensor(), d, s).unwrap() * &y)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let back = grads.get(xv.as_tensor()).unwrap();
            let rhs = (&x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "d={d} s={s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn centre_tap_reproduces_the_input() {
        let x = Tensor::arange(0f32, 30.0, &Device::Cpu).unwrap().reshape((1, 1, 5, 6)).unwrap();
        let cols = im2col3x3(&x, 2, 1).unwrap();
        let centre = cols.narrow(1, 4, 1).unwrap().flatten_all().unwrap();
        assert_eq!(centre.to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(cols.dtype(), DType::F32);
    }
}
