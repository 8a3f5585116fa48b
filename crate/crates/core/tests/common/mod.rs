//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

pub mod checks;

use candle_core::{DType, Tensor, Var};
use crunet_core::data::{generate_phantom_case, Contrast, KSpaceCase, ScanMeta};
use crunet_core::sampling::{Accel, Trajectory};

/// Candidate central-difference steps, smallest first. Small steps avoid
/// crossing ReLU kinks; larger ones are needed when the gradient is so small
/// that loss round-off would dominate the difference quotient.
pub const FD_STEPS: [f64; 4] = [1e-6, 1e-5, 1e-4, 1e-3];

/// Accepted round-off share of a finite-difference estimate.
const FD_NOISE: f64 = 1e-5;

pub fn meta(contrast: Contrast, trajectory: Trajectory, accel: Accel) -> ScanMeta {
    ScanMeta {
        vendor: "Siemens".into(),
        scanner_model: "Vida".into(),
        field_strength: "3.0T".into(),
        contrast,
        trajectory,
        accel,
        center_id: "C001".into(),
    }
}

/// Noiseless phantom case with the given geometry.
pub fn phantom(trajectory: Trajectory, accel: Accel, t: usize, coils: usize, hw: usize, seed: u64) -> KSpaceCase {
    generate_phantom_case("fixture", &meta(Contrast::Cine, trajectory, accel), t, coils, hw, hw, seed, 0.0).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn set_entry(var: &Var, index: usize, value: f64) {
    let mut v = flat(var.as_tensor());
    v[index] = value;
    let t = Tensor::from_vec(v, var.dims(), var.device()).unwrap().to_dtype(var.dtype()).unwrap();
    var.set(&t).unwrap();
}

/// `|a - b| / max(|a|, |b|, 1e-7)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn central_difference(var: &Var, idx: usize, loss: &impl Fn() -> Tensor) -> f64 {
    let x0 = flat(var.as_tensor())[idx];
    let at = |x: f64| {
        set_entry(var, idx, x);
        scalar(&loss())
    };
    let scale = at(x0).abs().max(1.0);
    let mut estimate = 0.0;
    for eps in FD_STEPS {
        estimate = (at(x0 + eps) - at(x0 - eps)) / (2.0 * eps);
        // a few ulps of the loss, amplified by the quotient
        let noise = 8.0 * f64::EPSILON * scale / eps;
        if noise <= FD_NOISE * estimate.abs() {
            break;
        }
    }
    set_entry(var, idx, x0);
    estimate
}

/// Compares the backward-pass gradient of `loss` with central differences at
/// the scalar entries `picks = (var position, flat index)`. Returns
/// `(analytic, numeric)` per pick.
pub fn gradient_pairs(vars: &[Var], picks: &[(usize, usize)], loss: impl Fn() -> Tensor) -> Vec<(f64, f64)> {
    let grads = loss().backward().unwrap();
    picks
        .iter()
        .map(|&(vi, idx)| {
            let var = &vars[vi];
            let analytic = grads.get(var.as_tensor()).map(|g| flat(g)[idx]).unwrap_or(0.0);
            (analytic, central_difference(var, idx, &loss))
        })
        .collect()
}

/// Worst pick as `(relative error, analytic, numeric, pick)`.
#[derive(Debug, Clone, Copy)]
pub struct WorstGradient {
    pub rel: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub pick: (usize, usize),
}

/// Largest relative error over the picks, with the offending entry.
pub fn max_gradient_error(vars: &[Var], picks: &[(usize, usize)], loss: impl Fn() -> Tensor) -> WorstGradient {
    let mut worst = WorstGradient {
        rel: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        pick: (0, 0),
    };
    for (&pick, (analytic, numeric)) in picks.iter().zip(gradient_pairs(vars, picks, loss)) {
        let rel = rel_err(analytic, numeric);
        if rel >= worst.rel {
            worst = WorstGradient { rel, analytic, numeric, pick };
        }
    }
    worst
}
