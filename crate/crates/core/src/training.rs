//! Optimizer, learning-rate schedules, stage plans and the training loops.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{window_frames, BalancedSampler, Contrast, KSpaceCase, WindowPolicy};
use crate::error::{Error, Result};
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::{Model, ModelInput};
use crate::objectives::{cls_loss, rec_loss, total_loss, LossWeights};
use crate::sampling::{default_acs, make_mask, Accel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, cfg: AdamWConfig) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, t: 0, cfg })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for ((var, m), v) in self.vars.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let decayed = (var.as_tensor() * (1.0 - lr * c.weight_decay))?;
            *m = ((&*m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }
}

/// Learning-rate schedules. Epochs and iterations are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `initial · factor^floor(epoch / every)`, floored at `min_lr`.
    StepDecay {
        initial: f64,
        factor: f64,
        every: usize,
        min_lr: f64,
    },
    /// Per-iteration linear warm-up from `min_lr` to `peak` over
    /// `warmup_epochs`, then cosine annealing to `min_lr` at the last
    /// iteration.
    CosineWarmup { peak: f64, min_lr: f64, warmup_epochs: f64 },
    /// Step decay without floor whose final epoch runs at `final_lr`.
    StepDecayFinal {
        initial: f64,
        factor: f64,
        every: usize,
        final_lr: f64,
    },
}

impl Schedule {
    pub fn lr(&self, epoch: usize, iter: usize, iters_per_epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::StepDecay {
                initial,
                factor,
                every,
                min_lr,
            } => step_decay(initial, factor, every, epoch).max(min_lr),
            Schedule::CosineWarmup {
                peak,
                min_lr,
                warmup_epochs,
            } => {
                let total = epochs * iters_per_epoch;
                let warm = warmup_steps(warmup_epochs, iters_per_epoch, total);
                let s = epoch * iters_per_epoch + iter;
                if s < warm {
                    min_lr + (peak - min_lr) * s as f64 / warm as f64
                } else if s == warm || total <= warm + 1 {
                    peak
                } else {
                    let progress = (s - warm) as f64 / (total - 1 - warm) as f64;
                    min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
            Schedule::StepDecayFinal {
                initial,
                factor,
                every,
                final_lr,
            } => {
                if epoch + 1 == epochs {
                    final_lr
                } else {
                    step_decay(initial, factor, every, epoch)
                }
            }
        }
    }

    fn validate(&self, ctx: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(format!("{ctx}.schedule: {m}")));
        match *self {
            Schedule::StepDecay {
                initial,
                factor,
                every,
                min_lr,
            } => {
                if !(initial > 0.0 && factor > 0.0 && min_lr >= 0.0) || every == 0 {
                    return bad("step decay needs initial > 0, factor > 0, every >= 1, min_lr >= 0");
                }
            }
            Schedule::CosineWarmup {
                peak,
                min_lr,
                warmup_epochs,
            } => {
                if !(peak > 0.0 && min_lr >= 0.0 && min_lr <= peak && warmup_epochs >= 0.0) {
                    return bad("cosine warm-up needs 0 <= min_lr <= peak and warmup_epochs >= 0");
                }
            }
            Schedule::StepDecayFinal {
                initial,
                factor,
                every,
                final_lr,
            } => {
                if !(initial > 0.0 && factor > 0.0 && final_lr >= 0.0) || every == 0 {
                    return bad("step decay needs initial > 0, factor > 0, every >= 1, final_lr >= 0");
                }
            }
        }
        Ok(())
    }

    fn scaled_warmup(&self, divisor: f64) -> Self {
        match self.clone() {
            Schedule::CosineWarmup {
                peak,
                min_lr,
                warmup_epochs,
            } => Schedule::CosineWarmup {
                peak,
                min_lr,
                warmup_epochs: warmup_epochs / divisor,
            },
            other => other,
        }
    }
}

fn step_decay(initial: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    initial * factor.powi((epoch / every) as i32)
}

/// Warm-up length in iterations, never covering the final iteration.
pub fn warmup_steps(warmup_epochs: f64, iters_per_epoch: usize, total: usize) -> usize {
    let w = (warmup_epochs * iters_per_epoch as f64).round() as usize;
    w.min(total.saturating_sub(1))
}

/// The first-stage schedule: 2e-4, ×0.9 every two epochs, floor 2e-5.
pub fn step_decay_schedule(epoch: usize) -> f64 {
    Schedule::StepDecay {
        initial: 2e-4,
        factor: 0.9,
        every: 2,
        min_lr: 2e-5,
    }
    .lr(epoch, 0, 1, usize::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelProb {
    pub accel: Accel,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub name: String,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    /// Acceleration draws; when empty each case keeps its stored mask.
    #[serde(default)]
    pub accel_probs: Vec<AccelProb>,
    pub cascade_target: usize,
    pub schedule: Schedule,
    pub window: WindowPolicy,
    /// Write a checkpoint after every epoch instead of only at the end.
    #[serde(default)]
    pub checkpoint_every_epoch: bool,
}

impl StepSpec {
    /// Label of the checkpoint written when the step finishes.
    pub fn final_checkpoint_label(&self) -> String {
        if self.checkpoint_every_epoch {
            format!("{}_epoch{}", self.name, self.epochs)
        } else {
            self.name.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub steps: Vec<StepSpec>,
}

fn probs(pairs: &[(Accel, f64)]) -> Vec<AccelProb> {
    pairs.iter().map(|&(accel, prob)| AccelProb { accel, prob }).collect()
}

impl StagePlan {
    /// Four-step curriculum at full budgets.
    pub fn curriculum() -> Self {
        let cosine = |peak: f64, min_lr: f64, warmup_epochs: f64| Schedule::CosineWarmup {
            peak,
            min_lr,
            warmup_epochs,
        };
        let third = 1.0 / 3.0;
        StagePlan {
            steps: vec![
                StepSpec {
                    name: "step1".into(),
                    epochs: 40,
                    samples_per_epoch: 6000,
                    accel_probs: probs(&[(Accel::R8, 1.0)]),
                    cascade_target: 6,
                    schedule: cosine(2e-4, 1e-5, 6.0),
                    window: WindowPolicy::Win5,
                    checkpoint_every_epoch: false,
                },
                StepSpec {
                    name: "step2".into(),
                    epochs: 40,
                    samples_per_epoch: 6000,
                    accel_probs: probs(&[(Accel::R8, 0.2), (Accel::R16, 0.8)]),
                    cascade_target: 10,
                    schedule: cosine(1e-4, 1e-5, 6.0),
                    window: WindowPolicy::Win5,
                    checkpoint_every_epoch: false,
                },
                StepSpec {
                    name: "step3".into(),
                    epochs: 32,
                    samples_per_epoch: 6000,
                    accel_probs: probs(&[(Accel::R8, 0.1), (Accel::R16, 0.1), (Accel::R24, 0.8)]),
                    cascade_target: 12,
                    schedule: cosine(5e-5, 1e-6, 5.0),
                    window: WindowPolicy::Win5,
                    checkpoint_every_epoch: false,
                },
                StepSpec {
                    name: "step4".into(),
                    epochs: 13,
                    samples_per_epoch: 16000,
                    accel_probs: probs(&[(Accel::R8, third), (Accel::R16, third), (Accel::R24, third)]),
                    cascade_target: 12,
                    schedule: Schedule::StepDecayFinal {
                        initial: 8e-5,
                        factor: 0.4,
                        every: 2,
                        final_lr: 1e-7,
                    },
                    window: WindowPolicy::Win5,
                    checkpoint_every_epoch: false,
                },
            ],
        }
    }

    /// First stage: flat training of the initial cascades on 12-frame clips.
    pub fn stage1() -> Self {
        StagePlan {
            steps: vec![StepSpec {
                name: "stage1".into(),
                epochs: 60,
                samples_per_epoch: 6000,
                accel_probs: Vec::new(),
                cascade_target: 6,
                schedule: Schedule::StepDecay {
                    initial: 2e-4,
                    factor: 0.9,
                    every: 2,
                    min_lr: 2e-5,
                },
                window: WindowPolicy::Clip12,
                checkpoint_every_epoch: false,
            }],
        }
    }

    /// Long-epoch fine-tune: few epochs with many iterations each.
    pub fn stage3(cascades: usize) -> Self {
        StagePlan {
            steps: vec![StepSpec {
                name: "stage3".into(),
                epochs: 4,
                samples_per_epoch: 90_000,
                accel_probs: Vec::new(),
                cascade_target: cascades,
                schedule: Schedule::StepDecay {
                    initial: 2e-5,
                    factor: 0.9,
                    every: 2,
                    min_lr: 2e-6,
                },
                window: WindowPolicy::Win5,
                checkpoint_every_epoch: true,
            }],
        }
    }

    /// Divides epochs and samples per epoch (rounding, at least one each)
    /// and scales warm-up lengths with the epochs.
    pub fn scaled(&self, epoch_divisor: f64, sample_divisor: f64) -> Self {
        let scale = |n: usize, d: f64| ((n as f64 / d).round() as usize).max(1);
        StagePlan {
            steps: self
                .steps
                .iter()
                .map(|s| StepSpec {
                    epochs: scale(s.epochs, epoch_divisor),
                    samples_per_epoch: scale(s.samples_per_epoch, sample_divisor),
                    schedule: s.schedule.scaled_warmup(epoch_divisor),
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Default desk budgets: epochs ÷ 10, samples ÷ 100.
    pub fn desk(&self) -> Self {
        self.scaled(10.0, 100.0)
    }

    pub fn validate(&self, initial_cascades: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::validation("plan.steps: at least one step is required"));
        }
        let mut prev = initial_cascades;
        for (i, s) in self.steps.iter().enumerate() {
            let ctx = format!("plan.steps[{i}]");
            if s.epochs == 0 || s.samples_per_epoch == 0 {
                return Err(Error::validation(format!("{ctx}: epochs and samples_per_epoch must be positive")));
            }
            if !s.accel_probs.is_empty() {
                let sum: f64 = s.accel_probs.iter().map(|p| p.prob).sum();
                if s.accel_probs.iter().any(|p| !(p.prob >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::validation(format!(
                        "{ctx}.accel_probs: probabilities must be >= 0 and sum to 1, got {sum}"
                    )));
                }
            }
            if s.cascade_target < prev {
                return Err(Error::validation(format!(
                    "{ctx}.cascade_target: {} is smaller than the preceding {prev} cascades",
                    s.cascade_target
                )));
            }
            s.schedule.validate(&ctx)?;
            prev = s.cascade_target;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_DATA: u64 = 1;
const STREAM_ACCEL: u64 = 2;
const STREAM_GROW: u64 = 3;

/// Draws one acceleration factor from the step's distribution.
pub fn draw_accel(probs: &[AccelProb], rng: &mut impl Rng) -> Accel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for p in probs {
        acc += p.prob;
        if u < acc {
            return p.accel;
        }
    }
    probs.last().expect("non-empty distribution").accel
}

/// The acceleration draws a step makes, in iteration order.
pub fn accel_draws(spec: &StepSpec, seed: u64, step_index: usize, n: usize) -> Vec<Accel> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step_index as u64, STREAM_ACCEL));
    (0..n).map(|_| draw_accel(&spec.accel_probs, &mut rng)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub seed: u64,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    /// Accepted for configuration compatibility; computation stays in the
    /// model's dtype.
    pub mixed_precision: bool,
}


#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_rec: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,epoch,lr,l_rec,l_cls,total";

    pub fn to_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.epoch, self.lr, self.l_rec, self.l_cls, self.total)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::validation(format!("malformed log line '{line}'"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: num(f[2])?,
            l_rec: num(f[3])?,
            l_cls: num(f[4])?,
            total: num(f[5])?,
        })
    }
}

/// Reads a loss log written by the training loop.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LogRow::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step_index: usize,
    pub name: String,
    pub cascades: usize,
    pub iterations: usize,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Where a training run writes its outputs.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log_path(&self, step_name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{step_name}.csv"))
    }

    pub fn draws_path(&self, step_name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{step_name}_draws.csv"))
    }

    pub fn checkpoint_path(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{label}.safetensors"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Result of one optimization iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLoss {
    pub l_rec: f64,
    pub l_cls: f64,
    pub total: f64,
}

/// Forward, backward and update on one input.
pub fn train_iteration(
    model: &Model,
    opt: &mut AdamW,
    input: &ModelInput,
    weights: &LossWeights,
    lr: f64,
) -> Result<IterLoss> {
    let out = model.forward(input)?;
    let target = input
        .output_target()?
        .ok_or_else(|| Error::validation("training input has no ground truth"))?;
    let l_rec = rec_loss(&out.magnitude, &target, weights)?;
    let l_cls = cls_loss(&out.logits, &input.label_tensors()?)?;
    let total = total_loss(&l_rec, &l_cls, weights)?;
    let grads = total.backward()?;
    opt.step(&grads, lr)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    Ok(IterLoss {
        l_rec: scalar(&l_rec)?,
        l_cls: scalar(&l_cls)?,
        total: scalar(&total)?,
    })
}

/// Runs one plan step: grows the model to the step's cascade count, then
/// trains with a fresh optimizer. All randomness derives from
/// `(seed, step_index)`, so a run resumed at a step boundary repeats the
/// same batches.
pub fn run_step(
    model: &mut Model,
    cases: &[KSpaceCase],
    spec: &StepSpec,
    step_index: usize,
    opts: &TrainOptions,
    layout: &RunLayout,
) -> Result<StepReport> {
    if cases.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let have = model.num_cascades();
    if spec.cascade_target < have {
        return Err(Error::validation(format!(
            "step '{}' targets {} cascades but the model already has {have}",
            spec.name, spec.cascade_target
        )));
    }
    if spec.cascade_target > have {
        model.grow_cascades(spec.cascade_target - have, mix_seed(opts.seed, step_index as u64, STREAM_GROW))?;
    }

    let mut data_rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, step_index as u64, STREAM_DATA));
    let mut accel_rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, step_index as u64, STREAM_ACCEL));
    let mut opt = AdamW::new(model.vars(), opts.optimizer)?;
    let contrasts: Vec<Contrast> = cases.iter().map(|c| c.meta.contrast).collect();

    let log_path = layout.log_path(&spec.name);
    let draws_path = layout.draws_path(&spec.name);
    let mut log = create(&log_path)?;
    write_line(&mut log, &log_path, LogRow::HEADER)?;
    let mut draws = create(&draws_path)?;
    write_line(&mut draws, &draws_path, "iteration,case_id,accel")?;

    let mut checkpoints = Vec::new();
    let mut global = 0usize;
    for epoch in 0..spec.epochs {
        let sampler = BalancedSampler::new(&contrasts, spec.samples_per_epoch, data_rng.next_u64());
        for (it, idx) in sampler.enumerate() {
            let lr = spec.schedule.lr(epoch, it, spec.samples_per_epoch, spec.epochs);
            let case = &cases[idx];
            let (t, _, h, w) = case.dims();
            let windows = window_frames(t, spec.window, data_rng.next_u64());
            let window = &windows[data_rng.random_range(0..windows.len())];
            let mask_seed = data_rng.next_u64();

            let mut sample = case.clone();
            if !spec.accel_probs.is_empty() {
                let accel = draw_accel(&spec.accel_probs, &mut accel_rng);
                let traj = case.meta.trajectory;
                sample.mask = make_mask(traj, accel, t, h, w, default_acs(traj, accel, h, w), mask_seed)?;
                sample.meta.accel = accel;
            }
            write_line(
                &mut draws,
                &draws_path,
                &format!("{global},{},{}", sample.id, sample.meta.accel.factor()),
            )?;
            let input = ModelInput::from_case(&sample, &window.frames, &window.targets, None, model.encoder(), model.dtype())?;
            let loss = train_iteration(model, &mut opt, &input, &opts.loss, lr)?;
            let row = LogRow {
                step: global,
                epoch,
                lr,
                l_rec: loss.l_rec,
                l_cls: loss.l_cls,
                total: loss.total,
            };
            write_line(&mut log, &log_path, &row.to_line())?;
            global += 1;
        }
        if spec.checkpoint_every_epoch {
            let label = format!("{}_epoch{}", spec.name, epoch + 1);
            let path = layout.checkpoint_path(&label);
            save_checkpoint(model, step_index + 1, &label, &path)?;
            checkpoints.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    draws.flush().map_err(|e| Error::io(&draws_path, e))?;
    if !spec.checkpoint_every_epoch {
        let path = layout.checkpoint_path(&spec.name);
        save_checkpoint(model, step_index + 1, &spec.name, &path)?;
        checkpoints.push(path);
    }
    Ok(StepReport {
        step_index,
        name: spec.name.clone(),
        cascades: model.num_cascades(),
        iterations: global,
        log: log_path,
        checkpoints,
    })
}

/// Checks that every mask a plan can produce keeps a calibration region,
/// so a run fails before writing anything rather than midway.
fn check_calibration(cases: &[KSpaceCase], steps: &[StepSpec]) -> Result<()> {
    for case in cases {
        let (_, _, h, w) = case.dims();
        for spec in steps {
            let acs_sizes: Vec<(Accel, usize)> = if spec.accel_probs.is_empty() {
                vec![(case.meta.accel, case.mask.acs)]
            } else {
                spec.accel_probs
                    .iter()
                    .filter(|p| p.prob > 0.0)
                    .map(|p| (p.accel, default_acs(case.meta.trajectory, p.accel, h, w)))
                    .collect()
            };
            if let Some((accel, _)) = acs_sizes.iter().find(|(_, acs)| *acs == 0) {
                return Err(Error::validation(format!(
                    "case '{}': a {h}x{w} {} mask at R={} leaves no calibration lines (step '{}'); use a larger matrix",
                    case.id,
                    case.meta.trajectory,
                    accel.factor(),
                    spec.name
                )));
            }
        }
    }
    Ok(())
}

/// Runs the plan's steps from `start_step` (zero-based) onwards.
pub fn run_plan(
    model: &mut Model,
    cases: &[KSpaceCase],
    plan: &StagePlan,
    start_step: usize,
    opts: &TrainOptions,
    layout: &RunLayout,
) -> Result<Vec<StepReport>> {
    if start_step > plan.steps.len() {
        return Err(Error::validation(format!(
            "cannot resume at step {start_step}: the plan has {} steps",
            plan.steps.len()
        )));
    }
    let remaining = StagePlan {
        steps: plan.steps[start_step..].to_vec(),
    };
    if !remaining.steps.is_empty() {
        remaining.validate(model.num_cascades())?;
    }
    opts.loss.validate()?;
    check_calibration(cases, &remaining.steps)?;
    let mut reports = Vec::new();
    for (i, spec) in plan.steps.iter().enumerate().skip(start_step) {
        reports.push(run_step(model, cases, spec, i, opts, layout)?);
    }
    Ok(reports)
}

/// Curriculum of four steps (6 → 10 → 12 → 12 cascades).
pub fn run_curriculum(
    model: &mut Model,
    cases: &[KSpaceCase],
    plan: &StagePlan,
    opts: &TrainOptions,
    layout: &RunLayout,
) -> Result<Vec<StepReport>> {
    run_plan(model, cases, plan, 0, opts, layout)
}

/// Single long-epoch fine-tune step with a checkpoint after each epoch.
pub fn run_stage3(
    model: &mut Model,
    cases: &[KSpaceCase],
    plan: &StagePlan,
    opts: &TrainOptions,
    layout: &RunLayout,
) -> Result<Vec<StepReport>> {
    run_plan(model, cases, plan, 0, opts, layout)
}

/// Renders a plan's closed-form learning rates for each iteration.
pub fn schedule_trace(spec: &StepSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.epochs * spec.samples_per_epoch);
    for e in 0..spec.epochs {
        for i in 0..spec.samples_per_epoch {
            out.push(spec.schedule.lr(e, i, spec.samples_per_epoch, spec.epochs));
        }
    }
    out
}

/// Human-readable one-line summary per step.
pub fn describe_reports(reports: &[StepReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(
            s,
            "{}: {} cascades, {} iterations, log {}",
            r.name,
            r.cascades,
            r.iterations,
            r.log.display()
        );
    }
    s
}
