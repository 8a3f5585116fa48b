use std::ffi::{CStr, CString};
use std::ptr;

use candle_core::DType;
use crunet_core::nn::{save_checkpoint, Model, ModelConfig};
use crunet_ffi::*;

fn last_error() -> String {
    let p = crunet_last_error();
    assert!(!p.is_null(), "no error message recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn simulated() -> *mut CrunetCase {
    let mut case = ptr::null_mut();
    let st = unsafe { crunet_case_simulate(0, 8, 3, 2, 32, 32, 4, &mut case) };
    assert_eq!(st, CrunetStatus::Ok);
    assert!(!case.is_null());
    case
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(crunet_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn simulated_case_reports_its_dimensions() {
    let case = simulated();
    let (mut t, mut c, mut h, mut w) = (0, 0, 0, 0);
    assert_eq!(unsafe { crunet_case_dims(case, &mut t, &mut c, &mut h, &mut w) }, CrunetStatus::Ok);
    assert_eq!((t, c, h, w), (3, 2, 32, 32));
    // null outputs are skipped
    let st = unsafe { crunet_case_dims(case, ptr::null_mut(), ptr::null_mut(), &mut h, ptr::null_mut()) };
    assert_eq!(st, CrunetStatus::Ok);
    assert!(crunet_last_error().is_null());
    unsafe { crunet_case_free(case) };
}

#[test]
fn model_round_trip_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let model = Model::new(ModelConfig::tiny(2, 4), DType::F32).unwrap();
    save_checkpoint(&model, 1, "ffi", &path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { crunet_model_load(cpath.as_ptr(), &mut handle) }, CrunetStatus::Ok);
    assert_eq!(unsafe { crunet_model_num_cascades(handle) }, 2);

    let case = simulated();
    let mut image = ptr::null_mut();
    assert_eq!(unsafe { crunet_reconstruct(handle, case, &mut image) }, CrunetStatus::Ok);
    let (mut t, mut h, mut w) = (0, 0, 0);
    assert_eq!(unsafe { crunet_image_dims(image, &mut t, &mut h, &mut w) }, CrunetStatus::Ok);
    assert_eq!((t, h, w), (3, 32, 32));
    let data = unsafe { std::slice::from_raw_parts(crunet_image_data(image), t * h * w) };
    assert!(data.iter().all(|v| v.is_finite() && *v >= 0.0));

    let (mut psnr, mut ssim, mut nmse) = (0.0, 0.0, 0.0);
    let st = unsafe { crunet_evaluate(image, case, 1.0, &mut psnr, &mut ssim, &mut nmse) };
    assert_eq!(st, CrunetStatus::Ok);
    assert!(psnr.is_finite() && ssim.is_finite() && nmse.is_finite());

    unsafe {
        crunet_image_free(image);
        crunet_case_free(case);
        crunet_model_free(handle);
    }
}

#[test]
fn zero_filled_matches_the_library() {
    let case = simulated();
    let mut image = ptr::null_mut();
    assert_eq!(unsafe { crunet_zero_filled(case, &mut image) }, CrunetStatus::Ok);
    let expected = crunet_core::inference::zero_filled_case(
        &crunet_core::data::generate_phantom_case(
            "ffi_case",
            &crunet_core::data::ScanMeta {
                vendor: "Siemens".into(),
                scanner_model: "Vida".into(),
                field_strength: "3.0T".into(),
                contrast: crunet_core::data::Contrast::Cine,
                trajectory: crunet_core::sampling::Trajectory::Uniform,
                accel: crunet_core::sampling::Accel::R8,
                center_id: "C001".into(),
            },
            3,
            2,
            32,
            32,
            4,
            0.0,
        )
        .unwrap(),
    )
    .unwrap();
    let got = unsafe { std::slice::from_raw_parts(crunet_image_data(image), expected.len()) };
    assert_eq!(got, expected.as_slice().unwrap());

    // aliasing keeps the zero-filled image away from the reference
    let (mut psnr, mut ssim, mut nmse) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { crunet_evaluate(image, case, 0.5, &mut psnr, &mut ssim, &mut nmse) }, CrunetStatus::Ok);
    assert!(nmse > 0.0 && ssim < 1.0);
    unsafe {
        crunet_image_free(image);
        crunet_case_free(case);
    }
}

#[test]
fn null_arguments_are_rejected() {
    let mut case = ptr::null_mut();
    assert_eq!(unsafe { crunet_case_load(ptr::null(), &mut case) }, CrunetStatus::NullArgument);
    assert!(last_error().contains("dir"));
    assert!(case.is_null());

    assert_eq!(unsafe { crunet_case_simulate(0, 8, 3, 2, 32, 32, 4, ptr::null_mut()) }, CrunetStatus::NullArgument);
    assert_eq!(unsafe { crunet_zero_filled(ptr::null(), ptr::null_mut()) }, CrunetStatus::NullArgument);
    assert_eq!(unsafe { crunet_model_num_cascades(ptr::null()) }, 0);
    assert!(unsafe { crunet_image_data(ptr::null()) }.is_null());
    unsafe {
        crunet_case_free(ptr::null_mut());
        crunet_model_free(ptr::null_mut());
        crunet_image_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut case = ptr::null_mut();
    assert_eq!(unsafe { crunet_case_simulate(0, 7, 3, 2, 32, 32, 4, &mut case) }, CrunetStatus::Validation);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { crunet_case_simulate(5, 8, 3, 2, 32, 32, 4, &mut case) }, CrunetStatus::Validation);
    assert!(case.is_null());

    let missing = CString::new("/nonexistent/crunet/case").unwrap();
    let st = unsafe { crunet_case_load(missing.as_ptr(), &mut case) };
    assert_eq!(st, CrunetStatus::Runtime, "{}", last_error());
    assert!(case.is_null());

    let mut model = ptr::null_mut();
    let st = unsafe { crunet_model_load(missing.as_ptr(), &mut model) };
    assert_eq!(st, CrunetStatus::Runtime, "{}", last_error());
    assert!(model.is_null());
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/crunet.h")).unwrap();
    assert!(header.contains("#ifndef CRUNET_H"));
    for name in [
        "crunet_last_error",
        "crunet_version",
        "crunet_case_load",
        "crunet_case_simulate",
        "crunet_case_dims",
        "crunet_case_free",
        "crunet_model_load",
        "crunet_model_num_cascades",
        "crunet_model_free",
        "crunet_reconstruct",
        "crunet_zero_filled",
        "crunet_image_dims",
        "crunet_image_data",
        "crunet_image_free",
        "crunet_evaluate",
        "CRUNET_STATUS_OK",
        "CRUNET_STATUS_VALIDATION",
        "typedef struct CrunetCase CrunetCase",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
