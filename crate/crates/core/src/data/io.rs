//! Case directory format.
//!
//! ```text
//! <case>/meta      UTF-8 JSON: scan metadata, shape, dtypes, mask labels
//! <case>/ksp.bin   interleaved little-endian f32 (re, im), C-order [T, C, H, W]
//! <case>/mask.bin  u8 [T, H, W]
//! <case>/gt.bin    little-endian f32 [T, H, W]
//! ```

use ndarray::{Array3, Array4};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::{Contrast, KSpaceCase, ScanMeta};
use crate::error::{Error, Result};
use crate::sampling::{Accel, SamplingMask, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseHeader {
    pub case_id: String,
    pub vendor: String,
    pub scanner_model: String,
    pub field_strength: String,
    pub contrast: Contrast,
    pub trajectory: Trajectory,
    pub accel: Accel,
    pub center_id: String,
    /// `[T, C, H, W]`
    pub shape: [usize; 4],
    pub ksp_dtype: String,
    pub mask_dtype: String,
    pub gt_dtype: String,
    pub acs: usize,
    pub static_expanded: bool,
}

impl CaseHeader {
    fn from_case(case: &KSpaceCase) -> Self {
        let (t, c, h, w) = case.dims();
        CaseHeader {
            case_id: case.id.clone(),
            vendor: case.meta.vendor.clone(),
            scanner_model: case.meta.scanner_model.clone(),
            field_strength: case.meta.field_strength.clone(),
            contrast: case.meta.contrast,
            trajectory: case.meta.trajectory,
            accel: case.meta.accel,
            center_id: case.meta.center_id.clone(),
            shape: [t, c, h, w],
            ksp_dtype: "complex64".into(),
            mask_dtype: "uint8".into(),
            gt_dtype: "float32".into(),
            acs: case.mask.acs,
            static_expanded: case.static_expanded,
        }
    }

    fn meta(&self) -> ScanMeta {
        ScanMeta {
            vendor: self.vendor.clone(),
            scanner_model: self.scanner_model.clone(),
            field_strength: self.field_strength.clone(),
            contrast: self.contrast,
            trajectory: self.trajectory,
            accel: self.accel,
            center_id: self.center_id.clone(),
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_case(case: &KSpaceCase, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    case.meta.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut header = serde_json::to_string_pretty(&CaseHeader::from_case(case))?;
    header.push('\n');
    write(&dir.join("meta"), header.as_bytes())?;

    let mut ksp = Vec::with_capacity(case.ksp.len() * 8);
    for v in case.ksp.iter() {
        ksp.extend_from_slice(&v.re.to_le_bytes());
        ksp.extend_from_slice(&v.im.to_le_bytes());
    }
    write(&dir.join("ksp.bin"), &ksp)?;
    write(&dir.join("mask.bin"), &case.mask.mask.iter().copied().collect::<Vec<u8>>())?;
    let gt: Vec<u8> = case.ground_truth.iter().flat_map(|v| v.to_le_bytes()).collect();
    write(&dir.join("gt.bin"), &gt)
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            file: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

pub fn load_case(dir: impl AsRef<Path>) -> Result<KSpaceCase> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let header: CaseHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    for (field, got, want) in [
        ("ksp_dtype", &header.ksp_dtype, "complex64"),
        ("mask_dtype", &header.mask_dtype, "uint8"),
        ("gt_dtype", &header.gt_dtype, "float32"),
    ] {
        if got != want {
            return Err(Error::Parse {
                path: meta_path.clone(),
                reason: format!("{field} must be {want}, found {got}"),
            });
        }
    }
    let [t, c, h, w] = header.shape;
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Parse {
            path: meta_path,
            reason: format!("degenerate shape {:?}", header.shape),
        });
    }

    let ksp_bytes = read_payload(&dir.join("ksp.bin"), t * c * h * w * 8)?;
    let vals: Vec<f32> = f32s(&ksp_bytes).collect();
    let ksp = Array4::from_shape_vec(
        (t, c, h, w),
        vals.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect(),
    )
    .expect("payload length checked");

    let mask_bytes = read_payload(&dir.join("mask.bin"), t * h * w)?;
    let mask = Array3::from_shape_vec((t, h, w), mask_bytes).expect("payload length checked");
    let gt_bytes = read_payload(&dir.join("gt.bin"), t * h * w * 4)?;
    let ground_truth = Array3::from_shape_vec((t, h, w), f32s(&gt_bytes).collect()).expect("payload length checked");

    let meta = header.meta();
    meta.validate()?;
    Ok(KSpaceCase {
        id: header.case_id.clone(),
        ksp,
        mask: SamplingMask {
            mask,
            trajectory: header.trajectory,
            accel: header.accel,
            acs: header.acs,
        },
        meta,
        ground_truth,
        static_expanded: header.static_expanded,
    })
}

/// Loads every case directory (any subdirectory holding a `meta` file)
/// under `root`, in lexicographic order of directory name.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<KSpaceCase>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("meta").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::validation(format!("no case directories found under {}", root.display())));
    }
    dirs.iter().map(load_case).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{expand_static, generate_phantom_case};

    fn sample(contrast: Contrast) -> KSpaceCase {
        let meta = ScanMeta {
            vendor: "Siemens".into(),
            scanner_model: "Vida".into(),
            field_strength: "3.0T".into(),
            contrast,
            trajectory: Trajectory::Gaussian,
            accel: Accel::R16,
            center_id: "C005".into(),
        };
        generate_phantom_case("case_x", &meta, 3, 2, 16, 16, 4, 0.01).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let case = sample(Contrast::Cine);
        save_case(&case, dir.path()).unwrap();
        assert_eq!(load_case(dir.path()).unwrap(), case);
    }

    #[test]
    fn static_flag_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let case = expand_static(sample(Contrast::T2w));
        assert!(case.static_expanded);
        save_case(&case, dir.path()).unwrap();
        assert!(load_case(dir.path()).unwrap().static_expanded);
    }

    #[test]
    fn truncated_meta_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        save_case(&sample(Contrast::Cine), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("meta")).unwrap();
        fs::write(dir.path().join("meta"), &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_case(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn payload_size_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        save_case(&sample(Contrast::Cine), dir.path()).unwrap();
        let p = dir.path().join("gt.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        let err = load_case(dir.path()).unwrap_err();
        match &err {
            Error::PayloadSize { expected, actual, .. } => {
                assert_eq!(*expected, 3 * 16 * 16 * 4);
                assert_eq!(*actual, 3 * 16 * 16 * 4 - 3);
            }
            other => panic!("unexpected {other}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("3072") && msg.contains("3069"), "{msg}");
    }
}
