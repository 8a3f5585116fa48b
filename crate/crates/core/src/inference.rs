//! Whole-sequence reconstruction and evaluation.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{window_frames, KSpaceCase, WindowPolicy};
use crate::error::{Error, Result};
use crate::kspace::zero_filled_recon;
use crate::nn::{Model, ModelInput};
use crate::objectives::{evaluate, MetricReport};

/// Order in which sliding-window targets are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetOrder {
    Forward,
    Reverse,
}

/// Reconstructs every frame of a case. Sequences of five or more frames use
/// one five-frame window per target frame; shorter ones are processed in a
/// single pass.
pub fn reconstruct_case(model: &Model, case: &KSpaceCase, order: TargetOrder) -> Result<Array3<f32>> {
    let (t, _, h, w) = case.dims();
    let mut out = Array3::<f32>::zeros((t, h, w));
    let mut windows = window_frames(t, WindowPolicy::Win5, 0);
    if order == TargetOrder::Reverse {
        windows.reverse();
    }
    for win in &windows {
        let input = ModelInput::from_case(case, &win.frames, &win.targets, None, model.encoder(), model.dtype())?;
        let frames = model.forward(&input)?.reconstruction(&input, 0)?;
        for (k, &f) in win.target_frames().iter().enumerate() {
            out.slice_mut(s![f, .., ..]).assign(&frames.slice(s![k, .., ..]));
        }
    }
    Ok(out)
}

/// Root-sum-of-squares image of the zero-filled measured k-space.
pub fn zero_filled_case(case: &KSpaceCase) -> Result<Array3<f32>> {
    Ok(zero_filled_recon(&case.ksp_f64(), case.mask.mask.view())?.mapv(|v| v as f32))
}

/// What produces the images being evaluated.
pub enum Reconstructor<'a> {
    Model(&'a Model),
    ZeroFilled,
    /// The reference images themselves (sanity check of the metric path).
    GroundTruth,
}

pub fn evaluate_cases(recon: &Reconstructor<'_>, cases: &[KSpaceCase], crop_fraction: f64) -> Result<MetricReport> {
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        let image = match recon {
            Reconstructor::Model(m) => reconstruct_case(m, case, TargetOrder::Forward)?,
            Reconstructor::ZeroFilled => zero_filled_case(case)?,
            Reconstructor::GroundTruth => case.ground_truth.clone(),
        };
        let metrics = evaluate(
            image.mapv(|v| v as f64).view(),
            case.ground_truth_f64().view(),
            crop_fraction,
        )?;
        entries.push((case.id.clone(), case.meta.clone(), metrics));
    }
    Ok(MetricReport::build(crop_fraction, &entries))
}

/// Header written next to a reconstruction payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconHeader {
    pub case_id: String,
    /// `[T, H, W]`
    pub shape: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
}

/// Writes `<dir>/meta` (JSON header) and `<dir>/recon.bin` (little-endian
/// float32 magnitudes, C order).
pub fn save_recon(case_id: &str, image: &Array3<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, h, w) = image.dim();
    let header = ReconHeader {
        case_id: case_id.to_string(),
        shape: [t, h, w],
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    let meta = dir.join("meta");
    std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = dir.join("recon.bin");
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn load_recon(dir: impl AsRef<Path>) -> Result<(ReconHeader, Array3<f32>)> {
    let dir = dir.as_ref();
    let meta = dir.join("meta");
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let header: ReconHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta.clone(),
        reason: e.to_string(),
    })?;
    let [t, h, w] = header.shape;
    let bin = dir.join("recon.bin");
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != t * h * w * 4 {
        return Err(Error::PayloadSize {
            file: bin,
            expected: t * h * w * 4,
            actual: bytes.len(),
        });
    }
    let vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let image = Array3::from_shape_vec((t, h, w), vals).expect("payload length checked");
    Ok((header, image))
}
