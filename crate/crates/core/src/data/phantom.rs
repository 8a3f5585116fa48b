//! Dynamic cardiac-like phantom with analytic ground truth.

use ndarray::{Array3, Array4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

use super::{to_complex32, Contrast, KSpaceCase, ScanMeta};
use crate::error::{Error, Result};
use crate::kspace::{self, SensitivityMaps};
use crate::sampling::{default_acs, make_mask};

/// Tissue intensities `[background body, myocardium, blood pool, static organs]`
/// for each contrast class.
pub fn contrast_intensities(contrast: Contrast) -> [f64; 4] {
    match contrast {
        Contrast::Cine => [0.25, 0.35, 1.00, 0.55],
        Contrast::PhaseContrast => [0.15, 0.20, 0.85, 0.30],
        Contrast::Tagging => [0.30, 0.60, 0.90, 0.45],
        Contrast::T1Map => [0.50, 0.70, 0.95, 0.40],
        Contrast::T2Map => [0.40, 0.45, 0.60, 0.90],
        Contrast::BlackBlood => [0.35, 0.80, 0.05, 0.60],
        Contrast::T1w => [0.60, 0.55, 0.30, 0.85],
        Contrast::T2w => [0.30, 0.50, 0.20, 1.00],
    }
}

/// Seeded geometry of one phantom; the contrast only selects intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    body: Ellipse,
    ventricle_center: (f64, f64),
    ventricle_radius: f64,
    wall: f64,
    beat_phase: f64,
    organs: Vec<Ellipse>,
    phase_ramp: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

impl PhantomSpec {
    /// Geometry in normalized coordinates (image spans [-1, 1]).
    pub fn random(rng: &mut impl Rng) -> Self {
        let body = Ellipse {
            cy: rng.random_range(-0.05..0.05),
            cx: rng.random_range(-0.05..0.05),
            ry: rng.random_range(0.70..0.85),
            rx: rng.random_range(0.75..0.90),
        };
        let ventricle_center = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        let organs = (0..3)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / 3.0 + rng.random_range(-0.4..0.4);
                Ellipse {
                    cy: body.cy + 0.55 * angle.sin(),
                    cx: body.cx + 0.55 * angle.cos(),
                    ry: rng.random_range(0.08..0.16),
                    rx: rng.random_range(0.08..0.16),
                }
            })
            .collect();
        PhantomSpec {
            body,
            ventricle_center,
            ventricle_radius: rng.random_range(0.18..0.26),
            wall: rng.random_range(0.07..0.11),
            beat_phase: rng.random_range(0.0..2.0 * PI),
            organs,
            phase_ramp: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        }
    }

    /// Complex image sequence `[T, H, W]`; the blood-pool radius oscillates
    /// sinusoidally over one cycle.
    pub fn render(&self, contrast: Contrast, t: usize, h: usize, w: usize) -> Array3<Complex64> {
        let [body_i, myo_i, blood_i, organ_i] = contrast_intensities(contrast);
        let mut out = Array3::<Complex64>::zeros((t, h, w));
        for f in 0..t {
            let beat = if t > 1 {
                (2.0 * PI * f as f64 / t as f64 + self.beat_phase).sin()
            } else {
                0.0
            };
            let r_blood = self.ventricle_radius * (1.0 + 0.2 * beat);
            let r_wall = r_blood + self.wall;
            for yi in 0..h {
                let y = 2.0 * (yi as f64 + 0.5) / h as f64 - 1.0;
                for xi in 0..w {
                    let x = 2.0 * (xi as f64 + 0.5) / w as f64 - 1.0;
                    if !self.body.contains(y, x) {
                        continue;
                    }
                    let dy = y - self.ventricle_center.0;
                    let dx = x - self.ventricle_center.1;
                    let r = (dy * dy + dx * dx).sqrt();
                    let mag = if r <= r_blood {
                        blood_i
                    } else if r <= r_wall {
                        myo_i
                    } else if self.organs.iter().any(|o| o.contains(y, x)) {
                        organ_i
                    } else {
                        body_i
                    };
                    let phase = 0.5 * PI * (self.phase_ramp.0 * y + self.phase_ramp.1 * x);
                    out[[f, yi, xi]] = Complex64::from_polar(mag, phase);
                }
            }
        }
        out
    }
}

/// Smooth Gaussian-bump coil profiles around the field of view, normalized so
/// that the per-pixel RSS is one.
pub(crate) fn coil_maps(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Result<SensitivityMaps> {
    let offset = rng.random_range(0.0..2.0 * PI);
    let mut maps = Array3::<Complex64>::zeros((c, h, w));
    let sigma = 0.9;
    for ci in 0..c {
        let angle = offset + 2.0 * PI * ci as f64 / c as f64;
        let (sy, sx) = (1.1 * angle.sin(), 1.1 * angle.cos());
        let coil_phase = rng.random_range(-PI..PI);
        for yi in 0..h {
            let y = 2.0 * (yi as f64 + 0.5) / h as f64 - 1.0;
            for xi in 0..w {
                let x = 2.0 * (xi as f64 + 0.5) / w as f64 - 1.0;
                let d2 = (y - sy).powi(2) + (x - sx).powi(2);
                let mag = if c == 1 { 1.0 } else { (-d2 / (2.0 * sigma * sigma)).exp() };
                let phase = coil_phase + 0.3 * (angle.cos() * y - angle.sin() * x);
                maps[[ci, yi, xi]] = Complex64::from_polar(mag, phase);
            }
        }
    }
    SensitivityMaps::normalized(maps)
}

/// Simulates one case: `ksp = fft2c(sens_expand(phantom)) + noise`, with a mask
/// drawn for the metadata's trajectory and acceleration. Static contrasts are
/// always generated with one frame.
///
/// `noise_std` is the standard deviation of the complex k-space noise
/// (`E|n|^2 = noise_std^2`).
#[allow(clippy::too_many_arguments)]
pub fn generate_phantom_case(
    id: &str,
    meta: &ScanMeta,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
    noise_std: f64,
) -> Result<KSpaceCase> {
    meta.validate()?;
    if t == 0 || c == 0 || h < 4 || w < 4 {
        return Err(Error::validation(format!(
            "invalid phantom dims T={t} C={c} H={h} W={w} (need T, C >= 1 and H, W >= 4)"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::validation(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let t = if meta.contrast.is_static() { 1 } else { t };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PhantomSpec::random(&mut rng);
    let sens = coil_maps(c, h, w, &mut rng)?;
    let img = spec.render(meta.contrast, t, h, w);
    let mut ksp = kspace::fft2c(&kspace::sens_expand(img.view(), &sens)?)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std / 2f64.sqrt()).expect("finite std");
        ksp.mapv_inplace(|v| v + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
    }
    let ksp = to_complex32(&ksp);
    let ksp64: Array4<Complex64> = ksp.mapv(|v| Complex64::new(v.re as f64, v.im as f64));
    let ground_truth = kspace::rss(kspace::ifft2c(&ksp64)?.view())?.mapv(|v| v as f32);

    let acs = default_acs(meta.trajectory, meta.accel, h, w);
    let mask = make_mask(meta.trajectory, meta.accel, t, h, w, acs, seed ^ 0x6d61_736b)?;

    Ok(KSpaceCase {
        id: id.to_string(),
        ksp,
        mask,
        meta: meta.clone(),
        ground_truth,
        static_expanded: false,
    })
}
