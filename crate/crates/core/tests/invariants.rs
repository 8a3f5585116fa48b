//! Property tests for the operator, sampling, data and schedule invariants.

use candle_core::DType;
use crunet_core::data::{generate_phantom_case, load_case, save_case, window_frames, BalancedSampler, Contrast, ScanMeta, WindowPolicy};
use crunet_core::kspace::{self, SensitivityMaps};
use crunet_core::nn::complex::{CTensor, Fourier};
use crunet_core::objectives::{nmse, psnr};
use crunet_core::sampling::{default_acs, empirical_accel, make_mask, Accel, Trajectory};
use crunet_core::training::{mix_seed, Schedule};
use ndarray::{Array3, Array4};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_complex<Sh: ndarray::ShapeBuilder>(shape: Sh, seed: u64) -> ndarray::Array<Complex64, Sh::Dim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ndarray::Array::from_shape_simple_fn(shape, || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn energy<D: ndarray::Dimension>(a: &ndarray::Array<Complex64, D>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

fn max_diff<D: ndarray::Dimension>(a: &ndarray::Array<Complex64, D>, b: &ndarray::Array<Complex64, D>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    prop::sample::select(Trajectory::ALL.to_vec())
}

fn accel() -> impl Strategy<Value = Accel> {
    prop::sample::select(Accel::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_round_trip_and_parseval(t in 1usize..3, c in 1usize..3, h in 2usize..12, w in 2usize..12, seed: u64) {
        let x = random_complex((t, c, h, w), seed);
        let k = kspace::fft2c(&x).unwrap();
        let back = kspace::ifft2c(&k).unwrap();
        prop_assert!(max_diff(&x, &back) < 1e-12);
        prop_assert!((energy(&k) - energy(&x)).abs() <= 1e-10 * energy(&x));
    }

    #[test]
    fn centered_transform_puts_dc_in_the_middle(h in 2usize..10, w in 2usize..10) {
        let x = Array4::from_elem((1, 1, h, w), Complex64::new(1.0, 0.0));
        let k = kspace::fft2c(&x).unwrap();
        let dc = k[[0, 0, h / 2, w / 2]];
        prop_assert!((dc.re - ((h * w) as f64).sqrt()).abs() < 1e-10);
        prop_assert!((energy(&k) - dc.norm_sqr()).abs() < 1e-9);
    }

    #[test]
    fn reduce_after_expand_is_identity(t in 1usize..3, c in 1usize..5, h in 2usize..10, w in 2usize..10, seed: u64) {
        let maps = SensitivityMaps::normalized(random_complex((c, h, w), seed ^ 1)).unwrap();
        prop_assert!(maps.normalization_error() < 1e-12);
        let img: Array3<Complex64> = random_complex((t, h, w), seed);
        let back = kspace::sens_reduce(kspace::sens_expand(img.view(), &maps).unwrap().view(), &maps).unwrap();
        prop_assert!(max_diff(&img, &back) < 1e-12);
    }

    #[test]
    fn expand_and_reduce_are_adjoint(c in 1usize..4, h in 2usize..8, w in 2usize..8, seed: u64) {
        let maps = SensitivityMaps::new(random_complex((c, h, w), seed ^ 7)).unwrap();
        let x: Array3<Complex64> = random_complex((1, h, w), seed);
        let y: Array4<Complex64> = random_complex((1, c, h, w), seed ^ 9);
        let ex = kspace::sens_expand(x.view(), &maps).unwrap();
        let ry = kspace::sens_reduce(y.view(), &maps).unwrap();
        let lhs: Complex64 = ex.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum();
        let rhs: Complex64 = x.iter().zip(ry.iter()).map(|(a, b)| a.conj() * b).sum();
        prop_assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn normalization_is_idempotent(c in 1usize..3, h in 2usize..10, w in 2usize..10, gain in 0.01f64..100.0, seed: u64) {
        let k = random_complex((2, c, h, w), seed).mapv(|z| z * gain);
        let (n1, s1) = kspace::normalize_case(&k).unwrap();
        let (n2, s2) = kspace::normalize_case(&n1).unwrap();
        prop_assert!((s2 - 1.0).abs() < 1e-12);
        prop_assert!(max_diff(&n1, &n2) < 1e-12);
        let peak = kspace::ifft2c(&n1).unwrap().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!((peak - 1.0).abs() < 1e-12);
        prop_assert!(s1 > 0.0);
    }

    #[test]
    fn matrix_transform_matches_the_fft(h in 2usize..10, w in 2usize..10, seed: u64) {
        let x: Array4<Complex64> = random_complex((1, 1, h, w), seed);
        let expect = kspace::fft2c(&x).unwrap();
        let f = Fourier::new(h, w, DType::F64).unwrap();
        let got = f.fft2c(&CTensor::from_ndarray(&x, DType::F64).unwrap()).unwrap().to_ndarray().unwrap();
        let got = got.into_dimensionality::<ndarray::Ix4>().unwrap();
        prop_assert!(max_diff(&expect, &got) < 1e-10);
        let back = f.ifft2c(&CTensor::from_ndarray(&expect, DType::F64).unwrap()).unwrap().to_ndarray().unwrap();
        prop_assert!(max_diff(&x, &back.into_dimensionality::<ndarray::Ix4>().unwrap()) < 1e-10);
    }

    #[test]
    fn masks_are_binary_and_cover_the_acs(traj in trajectory(), r in accel(), t in 1usize..5, seed: u64) {
        let (h, w) = (64, 64);
        let acs = default_acs(traj, r, h, w);
        let m = make_mask(traj, r, t, h, w, acs, seed).unwrap();
        prop_assert!(m.mask.iter().all(|&v| v <= 1));
        let (rows, cols) = m.acs_region();
        prop_assert_eq!(rows.len(), acs);
        for f in 0..t {
            for y in rows.clone() {
                for x in cols.clone() {
                    prop_assert_eq!(m.mask[[f, y, x]], 1);
                }
            }
        }
        let nominal = r.factor() as f64;
        let emp = empirical_accel(m.mask.view());
        prop_assert!((emp - nominal).abs() <= 0.15 * nominal, "R_emp {} vs {}", emp, nominal);
    }

    #[test]
    fn same_seed_same_mask(traj in trajectory(), r in accel(), seed: u64) {
        let acs = default_acs(traj, r, 32, 32);
        let a = make_mask(traj, r, 3, 32, 32, acs, seed).unwrap();
        let b = make_mask(traj, r, 3, 32, 32, acs, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn win5_targets_every_frame_once(t in 1usize..30) {
        let wins = window_frames(t, WindowPolicy::Win5, 0);
        let mut seen = vec![0usize; t];
        for win in &wins {
            prop_assert_eq!(win.frames.len(), t.min(5));
            prop_assert!(win.frames.windows(2).all(|p| p[1] == p[0] + 1));
            prop_assert!(*win.frames.last().unwrap() < t);
            for f in win.target_frames() {
                seen[f] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn clip12_is_contiguous(t in 1usize..40, seed: u64) {
        let wins = window_frames(t, WindowPolicy::Clip12, seed);
        prop_assert_eq!(wins.len(), 1);
        let w = &wins[0];
        prop_assert_eq!(w.frames.len(), t.min(12));
        prop_assert!(w.frames.windows(2).all(|p| p[1] == p[0] + 1));
        prop_assert_eq!(&w.targets, &(0..w.frames.len()).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_yields_exactly_the_budget(n_cases in 1usize..20, samples in 0usize..200, seed: u64) {
        let contrasts: Vec<Contrast> = (0..n_cases).map(|i| Contrast::ALL[(i * 7) % 3]).collect();
        let draws: Vec<usize> = BalancedSampler::new(&contrasts, samples, seed).collect();
        prop_assert_eq!(draws.len(), samples);
        prop_assert!(draws.iter().all(|&i| i < n_cases));
    }

    #[test]
    fn nmse_of_a_scaled_copy(a in 0.0f64..3.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gnd = Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(0.1..1.0));
        let rec = gnd.mapv(|v| v * a);
        let got = nmse(rec.view(), gnd.view()).unwrap();
        prop_assert!((got - (a - 1.0).powi(2)).abs() < 1e-12);
        if (a - 1.0).abs() > 1e-6 {
            prop_assert!(psnr(rec.view(), gnd.view()).unwrap().is_finite());
        }
    }

    #[test]
    fn cosine_schedule_stays_in_range(peak in 1e-5f64..1e-2, frac in 0.0f64..0.9, warm in 0.0f64..3.0, epochs in 1usize..6, per in 1usize..20) {
        let min_lr = peak * frac;
        let s = Schedule::CosineWarmup { peak, min_lr, warmup_epochs: warm };
        for e in 0..epochs {
            for i in 0..per {
                let lr = s.lr(e, i, per, epochs);
                prop_assert!(lr >= min_lr - 1e-15 && lr <= peak + 1e-15, "lr {} outside [{}, {}]", lr, min_lr, peak);
            }
        }
    }

    #[test]
    fn seed_mixing_separates_streams(seed: u64, a in 0u64..1000) {
        prop_assert_ne!(mix_seed(seed, a, 1), mix_seed(seed, a, 2));
        prop_assert_ne!(mix_seed(seed, a, 1), mix_seed(seed, a + 1, 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn case_files_round_trip(traj in trajectory(), r in accel(), t in 1usize..4, c in 1usize..3, seed: u64) {
        let meta = ScanMeta {
            vendor: "GE".into(),
            scanner_model: "SIGNA".into(),
            field_strength: "1.5T".into(),
            contrast: Contrast::Cine,
            trajectory: traj,
            accel: r,
            center_id: "C002".into(),
        };
        let case = generate_phantom_case("p", &meta, t, c, 32, 32, seed, 0.01).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        prop_assert_eq!(load_case(dir.path()).unwrap(), case);
    }
}
