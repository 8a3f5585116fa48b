//! Gradient-check scenarios, each returning its worst entry.

use candle_core::{DType, Device, Tensor, Var};
use crunet_core::data::Contrast;
use crunet_core::nn::{Builder, Model, ModelConfig, ModelInput, ParamStore};
use crunet_core::objectives::{cls_loss, rec_loss, ssim_tensor, total_loss, LossWeights};
use crunet_core::prompts::{Film, PoolIndices, PromptBlock};
use crunet_core::sampling::{Accel, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_gradient_error, meta, phantom, WorstGradient};

pub fn uniform_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn every_entry(vars: &[Var]) -> Vec<(usize, usize)> {
    vars.iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.elem_count()).map(move |j| (i, j)))
        .collect()
}

fn store_vars(store: &ParamStore) -> Vec<Var> {
    store.iter().map(|(_, v)| v.clone()).collect()
}

/// All generator parameters of a FiLM layer.
pub fn film() -> WorstGradient {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let film = Film::new(&mut Builder::new(&mut store, &mut rng), 4).unwrap();
    let vars = store_vars(&store);
    let features = uniform_tensor(&[2, 3, 4, 5, 5], 1);
    let prompt = uniform_tensor(&[2, 4], 2);
    let probe = uniform_tensor(&[2, 3, 4, 5, 5], 4);
    let loss = || {
        let (out, w, b) = film.forward(&features, &prompt).unwrap();
        let extra = (w.sqr().unwrap().sum_all().unwrap() + b.sum_all().unwrap()).unwrap();
        ((out * &probe).unwrap().sum_all().unwrap() + extra).unwrap()
    };
    max_gradient_error(&vars, &every_entry(&vars), loss)
}

/// Pool entries and mixing head of a prompt block, through both outputs.
pub fn prompt_block() -> WorstGradient {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let block = PromptBlock::new(&mut Builder::new(&mut store, &mut rng), 4, 3).unwrap();
    let vars = store_vars(&store);
    let metas = [
        meta(Contrast::Cine, Trajectory::Gaussian, Accel::R16),
        meta(Contrast::T1Map, Trajectory::Uniform, Accel::R8),
    ];
    let indices = PoolIndices::from_metas(metas.iter());
    let features = uniform_tensor(&[2, 3, 4, 6, 6], 6);
    let probe = uniform_tensor(&[2, 3, 4, 6, 6], 7);
    let probe_s = uniform_tensor(&[2, 4], 8);
    let loss = || {
        let (out, p_s) = block.forward(&features, &indices).unwrap();
        let a = (out * &probe).unwrap().sum_all().unwrap();
        (a + (p_s * &probe_s).unwrap().sum_all().unwrap()).unwrap()
    };
    max_gradient_error(&vars, &every_entry(&vars), loss)
}

/// `(SSIM, reconstruction loss)` with respect to every pixel of an 8×8,
/// two-frame reconstruction.
pub fn ssim_losses() -> (WorstGradient, WorstGradient) {
    let gnd = (uniform_tensor(&[1, 2, 8, 8], 9).abs().unwrap() + 0.1).unwrap();
    let noise = (uniform_tensor(&[1, 2, 8, 8], 10) * 0.2).unwrap();
    let rec = Var::from_tensor(&(&gnd + noise).unwrap()).unwrap();
    let vars = vec![rec.clone()];
    let picks = every_entry(&vars);
    let range = Tensor::new(&[1.3f64], &Device::Cpu).unwrap();
    let ssim = max_gradient_error(&vars, &picks, || ssim_tensor(rec.as_tensor(), &gnd, &range).unwrap());
    let weights = LossWeights::default();
    let rec_l = max_gradient_error(&vars, &picks, || rec_loss(rec.as_tensor(), &gnd, &weights).unwrap());
    (ssim, rec_l)
}

/// 20 randomly drawn scalars of a two-cascade, eight-channel model on a
/// 16×16, three-frame input, through the full training loss.
pub fn whole_model() -> WorstGradient {
    let model = Model::new(ModelConfig::tiny(2, 8), DType::F64).unwrap();
    let case = phantom(Trajectory::Uniform, Accel::R8, 3, 2, 16, 11);
    let frames = [0, 1, 2];
    let input = ModelInput::from_case(&case, &frames, &frames, None, model.encoder(), DType::F64).unwrap();
    let weights = LossWeights::default();
    let labels = input.label_tensors().unwrap();
    let target = input.output_target().unwrap().unwrap();
    let loss = || {
        let out = model.forward(&input).unwrap();
        let rec = rec_loss(&out.magnitude, &target, &weights).unwrap();
        let cls = cls_loss(&out.logits, &labels).unwrap();
        total_loss(&rec, &cls, &weights).unwrap()
    };
    let vars = model.vars();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let picks: Vec<(usize, usize)> = (0..20)
        .map(|_| {
            let vi = rng.random_range(0..vars.len());
            (vi, rng.random_range(0..vars[vi].elem_count()))
        })
        .collect();
    max_gradient_error(&vars, &picks, loss)
}
