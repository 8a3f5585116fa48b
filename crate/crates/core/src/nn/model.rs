//! The unrolled reconstruction model and its inputs.

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{s, Array3, Array4, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::complex::{data_consistency, sens_reduce, CTensor, Fourier};
use super::crunet::{CascadeFeatureStore, CrunetBlock, IterHiddens, PromptContext, LEVEL_DILATIONS};
use super::layers::{Linear, Mlp};
use super::params::{Builder, ParamStore};
use super::sme::Sme;
use crate::data::{Contrast, KSpaceCase};
use crate::error::{Error, Result};
use crate::kspace;
use crate::prompts::{encoder_by_name, render_prompts, PoolIndices, TextEncoder, POOL_SIZE};
use crate::sampling::{extract_acs, Accel, SamplingMask, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_cascades: usize,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub sme_channels: usize,
    pub text_encoder: String,
    pub text_dim: usize,
    pub pool_size: usize,
    pub num_contrasts: usize,
    pub num_trajectories: usize,
    pub num_accels: usize,
    pub dc_mode: String,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_cascades: 6,
            channels: 64,
            dilations: LEVEL_DILATIONS.to_vec(),
            sme_channels: 8,
            text_encoder: "stub".into(),
            text_dim: 64,
            pool_size: POOL_SIZE,
            num_contrasts: Contrast::ALL.len(),
            num_trajectories: Trajectory::ALL.len(),
            num_accels: Accel::ALL.len(),
            dc_mode: "hard".into(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast experiments.
    pub fn tiny(num_cascades: usize, channels: usize) -> Self {
        Self {
            num_cascades,
            channels,
            sme_channels: 4,
            pool_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::validation(format!("model.{field}: {msg}")));
        if self.num_cascades == 0 {
            return fail("num_cascades", "must be at least 1".into());
        }
        if self.channels == 0 {
            return fail("channels", "must be positive".into());
        }
        if self.sme_channels == 0 {
            return fail("sme_channels", "must be positive".into());
        }
        if self.text_dim == 0 {
            return fail("text_dim", "must be positive".into());
        }
        if self.pool_size == 0 {
            return fail("pool_size", "must be positive".into());
        }
        if self.dilations != LEVEL_DILATIONS {
            return fail("dilations", format!("only {LEVEL_DILATIONS:?} is supported, got {:?}", self.dilations));
        }
        for (field, got, want) in [
            ("num_contrasts", self.num_contrasts, Contrast::ALL.len()),
            ("num_trajectories", self.num_trajectories, Trajectory::ALL.len()),
            ("num_accels", self.num_accels, Accel::ALL.len()),
        ] {
            if got != want {
                return fail(field, format!("must be {want}, got {got}"));
            }
        }
        if self.dc_mode != "hard" {
            return fail("dc_mode", format!("only 'hard' is supported, got '{}'", self.dc_mode));
        }
        encoder_by_name(&self.text_encoder, self.text_dim)?;
        Ok(())
    }
}

/// Hidden width of every classifier MLP. Kept independent of the feature
/// width so narrow models do not end up with a handful of ReLUs that can
/// all be inactive.
pub const HEAD_HIDDEN: usize = 64;

/// Contrast, trajectory and acceleration classifiers over one prompt stream.
#[derive(Debug, Clone)]
pub struct Heads {
    pub contrast: Mlp,
    pub trajectory: Mlp,
    pub accel: Mlp,
    /// Width of one cascade's slice of the concatenated prompt vector.
    chunk: usize,
}

impl Heads {
    fn new(b: &mut Builder, din: usize, hidden: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            chunk: cfg.channels,
            contrast: Mlp::new(&mut b.sub("contrast"), din, hidden, cfg.num_contrasts)?,
            trajectory: Mlp::new(&mut b.sub("trajectory"), din, hidden, cfg.num_trajectories)?,
            accel: Mlp::new(&mut b.sub("accel"), din, hidden, cfg.num_accels)?,
        })
    }

    /// `x: [B, n·C]`. Each cascade's `C` entries are standardized on their
    /// own before the MLPs: prompt states sit on a large shared offset (FiLM
    /// weights start near one) and differ between scans only by small
    /// amounts. Per-slice statistics keep zero-weighted slices inert.
    fn forward(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let x = standardize_chunks(x, self.chunk)?;
        let x = &x;
        Ok([self.contrast.forward(x)?, self.trajectory.forward(x)?, self.accel.forward(x)?])
    }

    fn mlps_mut(&mut self) -> [(&'static str, &mut Mlp); 3] {
        [
            ("contrast", &mut self.contrast),
            ("trajectory", &mut self.trajectory),
            ("accel", &mut self.accel),
        ]
    }
}

/// Zero mean and unit variance over each consecutive group of `chunk`
/// entries of the last axis.
pub fn standardize_chunks(x: &Tensor, chunk: usize) -> Result<Tensor> {
    let (b, d) = x.dims2()?;
    if chunk == 0 || d % chunk != 0 {
        return Err(Error::validation(format!("cannot split {d} prompt entries into slices of {chunk}")));
    }
    let g = x.reshape((b, d / chunk, chunk))?;
    let centered = g.broadcast_sub(&g.mean_keepdim(D::Minus1)?)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let scaled = centered.broadcast_div(&(var + HEAD_NORM_EPS)?.sqrt()?)?;
    Ok(scaled.reshape((b, d))?)
}

const HEAD_NORM_EPS: f64 = 1e-10;

/// Everything the model consumes for one batch, already normalized.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// Measured (masked) k-space `[B,T,C,H,W]`.
    pub measured: CTensor,
    /// `[B,T,1,H,W]`, values in {0,1}.
    pub mask: Tensor,
    /// Zero-filled coil images `[B,T,C,H,W]`.
    pub zero_filled: CTensor,
    /// Time-averaged ACS coil images `[B,C,H,W]`.
    pub acs_image: CTensor,
    /// Normalized magnitude ground truth `[B,T,H,W]`, when known.
    pub target: Option<Tensor>,
    /// Frames returned by the model, as positions within the input window.
    pub output_frames: Vec<usize>,
    pub scale: Vec<f64>,
    pub scanner_text: Tensor,
    pub acquisition_text: Tensor,
    pub indices: PoolIndices,
    /// Class labels (contrast, trajectory, acceleration) per sample.
    pub labels: [Vec<u32>; 3],
}

impl ModelInput {
    /// Builds the input for `frames` of a case, undersampled with `mask`
    /// (the case's own mask when `None`). `output_frames` are positions
    /// within `frames`.
    pub fn from_case(
        case: &KSpaceCase,
        frames: &[usize],
        output_frames: &[usize],
        mask: Option<&SamplingMask>,
        encoder: &dyn TextEncoder,
        dtype: DType,
    ) -> Result<Self> {
        let (t, _, h, w) = case.dims();
        if frames.is_empty() || frames.iter().any(|&f| f >= t) {
            return Err(Error::validation(format!("frame selection {frames:?} out of range for {t} frames")));
        }
        if output_frames.is_empty() || output_frames.iter().any(|&p| p >= frames.len()) {
            return Err(Error::validation(format!("output positions {output_frames:?} out of range")));
        }
        let mask = mask.unwrap_or(&case.mask);
        if mask.dims() != (t, h, w) {
            return Err(Error::Shape {
                expected: vec![t, h, w],
                actual: {
                    let (a, b, c) = mask.dims();
                    vec![a, b, c]
                },
            });
        }
        let mask = mask.select_frames(frames);
        let full = case.ksp_f64().select(Axis(0), frames);
        let masked = kspace::apply_mask(&full, mask.mask.view())?;
        let (measured, scale) = kspace::normalize_case(&masked)?;
        let acs = extract_acs(&measured, &mask)?;
        if acs.iter().all(|z| z.norm() == 0.0) {
            return Err(Error::validation("ACS region carries no signal"));
        }
        let acs_image = kspace::ifft2c(&acs)?;
        let zero_filled = kspace::ifft2c(&measured)?;
        let gt = case.ground_truth_f64().select(Axis(0), frames).mapv(|v| v / scale);

        let prompts = render_prompts(&case.meta);
        let text = |s: &str| -> Result<Tensor> {
            let v = encoder.encode(s)?;
            Ok(Tensor::from_vec(v, (1, encoder.dim()), &Device::Cpu)?.to_dtype(dtype)?)
        };
        let mask_t = mask.mask.mapv(|v| v as f64);
        let n = frames.len();
        let labels = case.meta.labels();
        Ok(Self {
            measured: CTensor::from_ndarray(&measured.insert_axis(Axis(0)), dtype)?,
            mask: tensor_from(mask_t.into_shape_with_order((1, n, 1, h, w)).expect("mask shape").into_dyn(), dtype)?,
            zero_filled: CTensor::from_ndarray(&zero_filled.insert_axis(Axis(0)), dtype)?,
            acs_image: CTensor::from_ndarray(&acs_image.insert_axis(Axis(0)), dtype)?,
            target: Some(tensor_from(gt.insert_axis(Axis(0)).into_dyn(), dtype)?),
            output_frames: output_frames.to_vec(),
            scale: vec![scale],
            scanner_text: text(&prompts.scanner_text)?,
            acquisition_text: text(&prompts.acquisition_text)?,
            indices: PoolIndices::from_metas([&case.meta]),
            labels: [vec![labels[0] as u32], vec![labels[1] as u32], vec![labels[2] as u32]],
        })
    }

    pub fn batch_size(&self) -> usize {
        self.scale.len()
    }

    /// `(T, H, W)` of the input window.
    pub fn frame_dims(&self) -> Result<(usize, usize, usize)> {
        let (_, t, _, h, w) = self.measured.re.dims5()?;
        Ok((t, h, w))
    }

    /// Target frames `[B,T',H,W]` matching the model's output frames.
    pub fn output_target(&self) -> Result<Option<Tensor>> {
        match &self.target {
            Some(t) => Ok(Some(select_frames(t, &self.output_frames)?)),
            None => Ok(None),
        }
    }

    pub fn label_tensors(&self) -> Result<[Tensor; 3]> {
        let mk = |v: &Vec<u32>| Tensor::from_vec(v.clone(), v.len(), &Device::Cpu);
        Ok([mk(&self.labels[0])?, mk(&self.labels[1])?, mk(&self.labels[2])?])
    }
}

fn tensor_from(a: ndarray::ArrayD<f64>, dtype: DType) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
}

fn select_frames(x: &Tensor, frames: &[usize]) -> Result<Tensor> {
    let t = x.dims()[1];
    if frames.len() == t && frames.iter().enumerate().all(|(i, &f)| i == f) {
        return Ok(x.clone());
    }
    let idx = Tensor::from_vec(frames.iter().map(|&f| f as u32).collect::<Vec<_>>(), frames.len(), x.device())?;
    Ok(x.contiguous()?.index_select(&idx, 1)?)
}

pub struct ModelOutput {
    /// Final complex image `[B,T,H,W]` in normalized units.
    pub image: CTensor,
    /// Normalized magnitude of the output frames `[B,T',H,W]`.
    pub magnitude: Tensor,
    /// Class logits (contrast, trajectory, acceleration), averaged over the
    /// two prompt streams.
    pub logits: [Tensor; 3],
    /// Per-stream logits: index 0 from the undersampling prompts, 1 from the
    /// spatial prompts.
    pub stream_logits: [[Tensor; 3]; 2],
    /// `(p_u, p_s)` of every cascade, each `[B,C]`.
    pub prompt_states: Vec<(Tensor, Tensor)>,
    /// Image after each cascade's data consistency.
    pub cascade_images: Vec<CTensor>,
    pub maps: CTensor,
}

impl ModelOutput {
    /// De-normalized magnitude of the output frames of sample `b`.
    pub fn reconstruction(&self, input: &ModelInput, b: usize) -> Result<Array3<f32>> {
        let m = self.magnitude.get(b)?.to_dtype(DType::F64)?;
        let (t, h, w) = m.dims3()?;
        let v: Vec<f64> = m.flatten_all()?.to_vec1()?;
        let s = input.scale[b];
        Ok(Array3::from_shape_vec((t, h, w), v.into_iter().map(|x| (x * s) as f32).collect()).expect("shape"))
    }
}

/// Hook invoked before each cascade with its index and the feature store it
/// is about to read.
pub type StoreHook<'a> = &'a mut dyn FnMut(usize, &mut CascadeFeatureStore) -> Result<()>;

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub sme: Sme,
    pub refine_scanner: Mlp,
    pub refine_acquisition: Mlp,
    pub cascades: Vec<CrunetBlock>,
    pub heads_u: Heads,
    pub heads_s: Heads,
    encoder: Box<dyn TextEncoder>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl Model {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.channels;
        let mut b = Builder::new(&mut store, &mut rng);
        let sme = Sme::new(&mut b.sub("sme"), config.sme_channels)?;
        let refine_scanner = Mlp::new(&mut b.sub("refine_scanner"), config.text_dim, c, c)?;
        let refine_acquisition = Mlp::new(&mut b.sub("refine_acquisition"), config.text_dim, c, c)?;
        let mut cascades = Vec::with_capacity(config.num_cascades);
        for i in 0..config.num_cascades {
            cascades.push(CrunetBlock::new(&mut b.sub(format!("cascades.{i}")), c, i, config.pool_size)?);
        }
        let din = config.num_cascades * c;
        let heads_u = Heads::new(&mut b.sub("heads_u"), din, HEAD_HIDDEN, &config)?;
        let heads_s = Heads::new(&mut b.sub("heads_s"), din, HEAD_HIDDEN, &config)?;
        let encoder = encoder_by_name(&config.text_encoder, config.text_dim)?;
        Ok(Self {
            config,
            store,
            sme,
            refine_scanner,
            refine_acquisition,
            cascades,
            heads_u,
            heads_s,
            encoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> &dyn TextEncoder {
        self.encoder.as_ref()
    }

    pub fn num_cascades(&self) -> usize {
        self.cascades.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Appends `n_new` freshly initialized cascades and widens the
    /// classifier inputs with zero columns.
    pub fn grow_cascades(&mut self, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(Error::validation("grow_cascades needs at least one new cascade"));
        }
        let c = self.config.channels;
        let old = self.cascades.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut self.store, &mut rng);
        for i in old..old + n_new {
            self.cascades
                .push(CrunetBlock::new(&mut b.sub(format!("cascades.{i}")), c, i, self.config.pool_size)?);
        }
        let extra = n_new * c;
        for (stream, heads) in [("heads_u", &mut self.heads_u), ("heads_s", &mut self.heads_s)] {
            for (name, mlp) in heads.mlps_mut() {
                let w = mlp.l1.weight.as_tensor();
                let (rows, _) = w.dims2()?;
                let zeros = Tensor::zeros((rows, extra), w.dtype(), w.device())?;
                let widened = Var::from_tensor(&Tensor::cat(&[w, &zeros], 1)?)?;
                self.store.replace(&format!("{stream}.{name}.l1.weight"), widened.clone())?;
                mlp.l1 = Linear {
                    weight: widened,
                    bias: mlp.l1.bias.clone(),
                };
            }
        }
        self.config.num_cascades = old + n_new;
        Ok(())
    }

    pub fn forward(&self, input: &ModelInput) -> Result<ModelOutput> {
        self.forward_with_hook(input, None)
    }

    pub fn forward_with_hook(&self, input: &ModelInput, mut hook: Option<StoreHook<'_>>) -> Result<ModelOutput> {
        let (_, h, w) = input.frame_dims()?;
        let fourier = Fourier::new(h, w, self.dtype())?;
        let maps = self.sme.forward(&input.acs_image)?;
        let mut image = sens_reduce(&input.zero_filled, &maps)?;

        let prompts = PromptContext {
            scanner: self.refine_scanner.forward(&input.scanner_text)?,
            acquisition: self.refine_acquisition.forward(&input.acquisition_text)?,
            indices: input.indices.clone(),
        };
        let mut store = CascadeFeatureStore::new();
        let mut hiddens: Option<IterHiddens> = None;
        let mut prompt_states = Vec::with_capacity(self.cascades.len());
        let mut cascade_images = Vec::with_capacity(self.cascades.len());
        for (i, block) in self.cascades.iter().enumerate() {
            if let Some(hook) = hook.as_mut() {
                hook(i, &mut store)?;
            }
            let x2 = Tensor::stack(&[&image.re, &image.im], 2)?;
            let out = block.forward(&x2, &prompts, &store, hiddens.as_ref())?;
            let refined = CTensor::new(out.image.narrow(2, 0, 1)?.squeeze(2)?, out.image.narrow(2, 1, 1)?.squeeze(2)?)?;
            image = data_consistency(&fourier, &refined, &input.measured, &input.mask, &maps)?;
            store.push(out.features);
            hiddens = Some(out.hiddens);
            prompt_states.push((out.p_u, out.p_s));
            cascade_images.push(image.clone());
        }

        let pu: Vec<&Tensor> = prompt_states.iter().map(|(u, _)| u).collect();
        let ps: Vec<&Tensor> = prompt_states.iter().map(|(_, s)| s).collect();
        let lu = self.heads_u.forward(&Tensor::cat(&pu, 1)?)?;
        let ls = self.heads_s.forward(&Tensor::cat(&ps, 1)?)?;
        let logits = [
            ((&lu[0] + &ls[0])? * 0.5)?,
            ((&lu[1] + &ls[1])? * 0.5)?,
            ((&lu[2] + &ls[2])? * 0.5)?,
        ];
        let magnitude = select_frames(&image.abs()?, &input.output_frames)?;
        Ok(ModelOutput {
            image,
            magnitude,
            logits,
            stream_logits: [lu, ls],
            prompt_states,
            cascade_images,
            maps,
        })
    }

    /// Per-pixel coil maps estimated for an input, as a complex array.
    pub fn estimate_maps(&self, input: &ModelInput) -> Result<Array4<Complex64>> {
        let maps = self.sme.forward(&input.acs_image)?.to_ndarray()?;
        maps.into_dimensionality().map_err(|e| Error::validation(e.to_string()))
    }
}

/// Fully sampled reference image combined with the given maps: useful to
/// check the network against its own coil model.
pub fn fully_sampled_reference(ksp: &Array4<Complex64>, maps: &Array3<Complex64>) -> Result<Array3<f64>> {
    let coils = kspace::ifft2c(ksp)?;
    let (t, c, h, w) = coils.dim();
    let mut out = Array3::zeros((t, h, w));
    for f in 0..t {
        let mut acc = ndarray::Array2::<Complex64>::zeros((h, w));
        for k in 0..c {
            acc += &(&maps.slice(s![k, .., ..]).mapv(|z| z.conj()) * &coils.slice(s![f, k, .., ..]));
        }
        out.slice_mut(s![f, .., ..]).assign(&acc.mapv(|z| z.norm()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_are_standardized_independently() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0, 10.0, 10.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = standardize_chunks(&x, 3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let s = (1.5f64).sqrt();
        for (a, b) in y.iter().zip([-s, 0.0, s, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-9, "{y:?}");
        }
        assert!(standardize_chunks(&x, 4).is_err());
    }
}
