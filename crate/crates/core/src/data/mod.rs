//! Synthetic cases, case files, frame windowing and the balanced sampler.

mod io;
mod loader;
mod phantom;

pub use io::{load_case, load_dataset, save_case, CaseHeader};
pub use loader::{balanced_sampler, window_frames, BalancedSampler, TrainingWindow, WindowPolicy};
pub use phantom::{contrast_intensities, generate_phantom_case, PhantomSpec};

use ndarray::{Array3, Array4};
use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::kspace;
use crate::sampling::{Accel, SamplingMask, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    Cine,
    PhaseContrast,
    Tagging,
    T1Map,
    T2Map,
    BlackBlood,
    T1w,
    T2w,
}

impl Contrast {
    pub const ALL: [Contrast; 8] = [
        Contrast::Cine,
        Contrast::PhaseContrast,
        Contrast::Tagging,
        Contrast::T1Map,
        Contrast::T2Map,
        Contrast::BlackBlood,
        Contrast::T1w,
        Contrast::T2w,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::validation(format!("contrast index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Contrast::Cine => "cine",
            Contrast::PhaseContrast => "phase_contrast",
            Contrast::Tagging => "tagging",
            Contrast::T1Map => "t1_map",
            Contrast::T2Map => "t2_map",
            Contrast::BlackBlood => "black_blood",
            Contrast::T1w => "t1w",
            Contrast::T2w => "t2w",
        }
    }

    /// Contrasts acquired without a time dimension.
    pub fn is_static(self) -> bool {
        matches!(self, Contrast::BlackBlood | Contrast::T1w | Contrast::T2w)
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Contrast {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown contrast '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub vendor: String,
    pub scanner_model: String,
    pub field_strength: String,
    pub contrast: Contrast,
    pub trajectory: Trajectory,
    pub accel: Accel,
    pub center_id: String,
}

impl ScanMeta {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("vendor", &self.vendor),
            ("scanner_model", &self.scanner_model),
            ("field_strength", &self.field_strength),
            ("center_id", &self.center_id),
        ] {
            if value.trim().is_empty() {
                return Err(Error::validation(format!("meta field '{name}' is empty")));
            }
        }
        Ok(())
    }

    /// Label triple `(contrast, trajectory, accel)` as class indices.
    pub fn labels(&self) -> [usize; 3] {
        [self.contrast.index(), self.trajectory.index(), self.accel.index()]
    }
}

/// One fully sampled multi-coil acquisition with its undersampling mask.
///
/// `ksp` holds the full k-space; the measured data is `ksp * mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceCase {
    pub id: String,
    pub ksp: Array4<Complex32>,
    pub mask: SamplingMask,
    pub meta: ScanMeta,
    pub ground_truth: Array3<f32>,
    /// Set once a static (frame-less) acquisition has been declared a
    /// single-frame sequence.
    pub static_expanded: bool,
}

impl KSpaceCase {
    /// `(T, C, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.ksp.dim()
    }

    pub fn ksp_f64(&self) -> Array4<Complex64> {
        self.ksp.mapv(|v| Complex64::new(v.re as f64, v.im as f64))
    }

    pub fn ground_truth_f64(&self) -> Array3<f64> {
        self.ground_truth.mapv(|v| v as f64)
    }

    /// Checks the structural invariants of a case.
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.id.trim().is_empty() {
            return Err(Error::validation("case id is empty"));
        }
        let (t, _, h, w) = self.dims();
        if self.mask.dims() != (t, h, w) {
            return Err(Error::Shape {
                expected: vec![t, h, w],
                actual: self.mask.mask.shape().to_vec(),
            });
        }
        if self.ground_truth.dim() != (t, h, w) {
            return Err(Error::Shape {
                expected: vec![t, h, w],
                actual: self.ground_truth.shape().to_vec(),
            });
        }
        if self.mask.mask.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask entries must be 0 or 1"));
        }
        if self.mask.trajectory != self.meta.trajectory || self.mask.accel != self.meta.accel {
            return Err(Error::validation("mask labels disagree with scan metadata"));
        }
        let rss = kspace::rss(kspace::ifft2c(&self.ksp_f64())?.view())?;
        let peak = rss.iter().fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
        let worst = rss
            .iter()
            .zip(self.ground_truth.iter())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0f64, f64::max);
        if worst / peak > 1e-5 {
            return Err(Error::validation(format!(
                "ground truth deviates from RSS of k-space by {:.3e} (relative)",
                worst / peak
            )));
        }
        Ok(())
    }

    /// Sub-sequence of the given frames.
    pub fn select_frames(&self, frames: &[usize]) -> KSpaceCase {
        use ndarray::Axis;
        KSpaceCase {
            id: self.id.clone(),
            ksp: self.ksp.select(Axis(0), frames),
            mask: self.mask.select_frames(frames),
            meta: self.meta.clone(),
            ground_truth: self.ground_truth.select(Axis(0), frames),
            static_expanded: self.static_expanded,
        }
    }
}

/// Declares a frame-less acquisition a one-frame sequence. Data is not
/// duplicated; multi-frame cases pass through untouched.
pub fn expand_static(mut case: KSpaceCase) -> KSpaceCase {
    if case.dims().0 == 1 {
        case.static_expanded = true;
    }
    case
}

pub(crate) fn to_complex32(a: &Array4<Complex64>) -> Array4<Complex32> {
    a.mapv(|v| Complex32::new(v.re as f32, v.im as f32))
}
