//! Undersampling masks for the three trajectories and ACS extraction.

use ndarray::{s, Array3, ArrayView3, Array4, Axis};
use num_complex::Complex64;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// 180 degrees divided by the golden ratio, in radians (~111.246 deg).
pub const GOLDEN_ANGLE: f64 = PI * 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Uniform,
    Gaussian,
    PseudoRadial,
}

impl Trajectory {
    pub const ALL: [Trajectory; 3] = [Trajectory::Uniform, Trajectory::Gaussian, Trajectory::PseudoRadial];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::validation(format!("trajectory index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Trajectory::Uniform => "uniform",
            Trajectory::Gaussian => "gaussian",
            Trajectory::PseudoRadial => "pseudo_radial",
        }
    }

    pub fn is_cartesian(self) -> bool {
        !matches!(self, Trajectory::PseudoRadial)
    }

    pub fn interleaved(self) -> bool {
        !matches!(self, Trajectory::Uniform)
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Trajectory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown trajectory '{s}'")))
    }
}

/// Nominal acceleration factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Accel {
    R8,
    R16,
    R24,
}

impl Accel {
    pub const ALL: [Accel; 3] = [Accel::R8, Accel::R16, Accel::R24];

    pub fn factor(self) -> u32 {
        match self {
            Accel::R8 => 8,
            Accel::R16 => 16,
            Accel::R24 => 24,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::validation(format!("acceleration index {i} out of range")))
    }
}

impl TryFrom<u32> for Accel {
    type Error = Error;
    fn try_from(r: u32) -> Result<Self> {
        match r {
            8 => Ok(Accel::R8),
            16 => Ok(Accel::R16),
            24 => Ok(Accel::R24),
            _ => Err(Error::validation(format!("acceleration must be 8, 16 or 24, got {r}"))),
        }
    }
}

impl From<Accel> for u32 {
    fn from(a: Accel) -> u32 {
        a.factor()
    }
}

impl fmt::Display for Accel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factor())
    }
}

impl std::str::FromStr for Accel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let r: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("invalid acceleration '{s}'")))?;
        Accel::try_from(r)
    }
}

/// Binary `[T, H, W]` sampling pattern. `acs` is a line count for Cartesian
/// trajectories and a square side for pseudo-radial.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub mask: Array3<u8>,
    pub trajectory: Trajectory,
    pub accel: Accel,
    pub acs: usize,
}

impl SamplingMask {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }

    pub fn empirical_accel(&self) -> f64 {
        empirical_accel(self.mask.view())
    }

    /// Restrict to a subset of frames.
    pub fn select_frames(&self, frames: &[usize]) -> SamplingMask {
        SamplingMask {
            mask: self.mask.select(Axis(0), frames),
            ..self.clone()
        }
    }

    /// Rows and columns of the ACS region, as half-open ranges.
    pub fn acs_region(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (_, h, w) = self.dims();
        acs_region(self.trajectory, self.acs, h, w)
    }
}

fn central_range(n: usize, len: usize) -> std::ops::Range<usize> {
    let start = (n / 2).saturating_sub(len / 2);
    start..(start + len).min(n)
}

fn acs_region(trajectory: Trajectory, acs: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    if trajectory.is_cartesian() {
        (central_range(h, acs), 0..w)
    } else {
        (central_range(h, acs), central_range(w, acs))
    }
}

/// Row budget per frame for Cartesian trajectories (ACS rows included).
pub fn cartesian_budget(h: usize, accel: Accel) -> usize {
    h.div_ceil(accel.factor() as usize)
}

/// Sampled-cell budget per frame for pseudo-radial (ACS cells included).
pub fn radial_budget(h: usize, w: usize, accel: Accel) -> usize {
    ((h * w) as f64 / accel.factor() as f64).round() as usize
}

/// Desk-scale ACS size: the nominal size (20 once `H >= 128`, otherwise 8),
/// capped at half of the sampling budget so the acceleration stays reachable.
pub fn default_acs(trajectory: Trajectory, accel: Accel, h: usize, w: usize) -> usize {
    let nominal = if h.min(w) >= 128 { 20 } else { 8 };
    if trajectory.is_cartesian() {
        nominal.min(cartesian_budget(h, accel) / 2)
    } else {
        let side = ((radial_budget(h, w, accel) / 2) as f64).sqrt().floor() as usize;
        nominal.min(side)
    }
}

/// Generates a seeded sampling mask.
///
/// * uniform: ACS rows plus evenly strided rows filling the remaining row
///   budget, identical in every frame. With `acs = 0` this is every R-th row.
/// * gaussian: ACS rows plus rows drawn without replacement with a Gaussian
///   density (sigma = H/6) around the k-space center, redrawn every frame.
/// * pseudo-radial: spokes through the center, evenly spaced within a frame
///   and rotated by the golden angle from frame to frame, rasterized to the
///   nearest cell, plus the central ACS square.
pub fn make_mask(
    trajectory: Trajectory,
    accel: Accel,
    t: usize,
    h: usize,
    w: usize,
    acs: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::validation(format!("mask dims must be positive, got {t}x{h}x{w}")));
    }
    let mut mask = Array3::<u8>::zeros((t, h, w));
    match trajectory {
        Trajectory::Uniform | Trajectory::Gaussian => {
            if acs > h {
                return Err(Error::validation(format!("acs {acs} exceeds {h} rows")));
            }
            let budget = cartesian_budget(h, accel);
            if budget < acs {
                return Err(Error::AccelerationInfeasible { budget, acs });
            }
            let acs_rows = central_range(h, acs);
            let free: Vec<usize> = (0..h).filter(|r| !acs_rows.contains(r)).collect();
            let extra = (budget - acs).min(free.len());
            let rows_per_frame: Vec<Vec<usize>> = if trajectory == Trajectory::Uniform {
                let rows: Vec<usize> = (0..extra).map(|k| free[k * free.len() / extra]).collect();
                vec![rows; t]
            } else {
                gaussian_rows(&free, extra, h, t, seed)?
            };
            for (f, rows) in rows_per_frame.iter().enumerate() {
                for &r in rows.iter().chain(acs_rows.clone().collect::<Vec<_>>().iter()) {
                    mask.slice_mut(s![f, r, ..]).fill(1);
                }
            }
        }
        Trajectory::PseudoRadial => {
            if acs > h.min(w) {
                return Err(Error::validation(format!("acs {acs} exceeds min({h}, {w})")));
            }
            let budget = radial_budget(h, w, accel);
            if budget < acs * acs {
                return Err(Error::AccelerationInfeasible { budget, acs: acs * acs });
            }
            for f in 0..t {
                let frame = radial_frame(h, w, acs, budget, f as f64 * GOLDEN_ANGLE);
                mask.index_axis_mut(Axis(0), f).assign(&frame);
            }
        }
    }
    Ok(SamplingMask {
        mask,
        trajectory,
        accel,
        acs,
    })
}

fn gaussian_rows(free: &[usize], extra: usize, h: usize, t: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (h / 2) as f64;
    let sigma = h as f64 / 6.0;
    let weighted: Vec<(usize, f64)> = free
        .iter()
        .map(|&r| {
            let d = r as f64 - center;
            (r, (-d * d / (2.0 * sigma * sigma)).exp().max(1e-12))
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng| -> Result<Vec<usize>> {
        let mut rows: Vec<usize> = weighted
            .choose_multiple_weighted(rng, extra, |item| item.1)
            .map_err(|e| Error::validation(format!("weighted row draw failed: {e}")))?
            .map(|item| item.0)
            .collect();
        rows.sort_unstable();
        Ok(rows)
    };
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        frames.push(draw(&mut rng)?);
    }
    // interleaving must actually vary the pattern; redraw the last frame in the
    // rare event that every frame came out the same
    if t > 1 && extra > 0 && extra < free.len() {
        let mut tries = 0;
        while frames.iter().all(|f| *f == frames[0]) && tries < 64 {
            frames[t - 1] = draw(&mut rng)?;
            tries += 1;
        }
    }
    Ok(frames)
}

fn rasterize_spokes(h: usize, w: usize, n_spokes: usize, start: f64, out: &mut ndarray::ArrayViewMut2<u8>) {
    let cy = (h / 2) as f64;
    let cx = (w / 2) as f64;
    let reach = ((h * h + w * w) as f64).sqrt() / 2.0 + 1.0;
    let steps = (reach * 2.0).ceil() as i64;
    for k in 0..n_spokes {
        let theta = start + k as f64 * PI / n_spokes as f64;
        let (sin, cos) = theta.sin_cos();
        for i in -steps..=steps {
            let r = i as f64 * 0.5;
            // f64::round is symmetric about zero, so each spoke is point-symmetric
            let dy = (r * sin).round();
            let dx = (r * cos).round();
            let y = cy + dy;
            let x = cx + dx;
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
}

fn radial_frame(h: usize, w: usize, acs: usize, budget: usize, start: f64) -> ndarray::Array2<u8> {
    let (rows, cols) = acs_region(Trajectory::PseudoRadial, acs, h, w);
    let build = |n: usize| {
        let mut frame = ndarray::Array2::<u8>::zeros((h, w));
        rasterize_spokes(h, w, n, start, &mut frame.view_mut());
        frame.slice_mut(s![rows.clone(), cols.clone()]).fill(1);
        frame
    };
    let count = |f: &ndarray::Array2<u8>| f.iter().filter(|&&v| v != 0).count();
    let mut best = build(1);
    let mut best_gap = count(&best).abs_diff(budget);
    let max_spokes = 2 * (h + w);
    for n in 2..=max_spokes {
        let frame = build(n);
        let c = count(&frame);
        let gap = c.abs_diff(budget);
        if gap < best_gap {
            best = frame;
            best_gap = gap;
        }
        if c >= budget {
            break;
        }
    }
    best
}

/// Zeroes k-space outside the ACS region and averages over frames,
/// giving `[C, H, W]`.
pub fn extract_acs(ksp: &Array4<Complex64>, mask: &SamplingMask) -> Result<Array3<Complex64>> {
    let (t, c, h, w) = ksp.dim();
    if mask.dims() != (t, h, w) {
        return Err(Error::Shape {
            expected: vec![t, h, w],
            actual: mask.mask.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(Error::validation("cannot average an empty sequence"));
    }
    let (rows, cols) = mask.acs_region();
    let mut out = Array3::<Complex64>::zeros((c, h, w));
    let mut region = out.slice_mut(s![.., rows.clone(), cols.clone()]);
    for f in 0..t {
        region += &ksp.slice(s![f, .., rows.clone(), cols.clone()]);
    }
    region.mapv_inplace(|v| v / t as f64);
    Ok(out)
}

/// Total entries divided by sampled entries.
pub fn empirical_accel(mask: ArrayView3<u8>) -> f64 {
    let sampled = mask.iter().filter(|&&v| v != 0).count();
    mask.len() as f64 / sampled as f64
}
