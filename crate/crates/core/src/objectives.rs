//! Training losses on tensors and evaluation metrics on arrays.

use candle_core::{DType, Device, Tensor, D};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

use crate::data::ScanMeta;
use crate::error::{Error, Result};
use crate::kspace::center_crop;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.5,
            l2: 0.5,
            ssim: 1.0,
            cls: 0.025,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("ssim", self.ssim), ("cls", self.cls)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("loss.{name}: weight must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    g
}

/// `[n - 6, n]` matrix applying the taps as a valid correlation.
fn band_matrix(n: usize) -> Result<Array2<f64>> {
    if n < SSIM_WINDOW {
        return Err(Error::validation(format!("SSIM needs images of at least {SSIM_WINDOW} pixels per side, got {n}")));
    }
    let g = gaussian_taps();
    let m = n - SSIM_WINDOW + 1;
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        for (k, gk) in g.iter().enumerate() {
            out[[i, i + k]] = *gk;
        }
    }
    Ok(out)
}

fn band_tensor(n: usize, dtype: DType) -> Result<Tensor> {
    let m = band_matrix(n)?;
    let dims = m.dim();
    Ok(Tensor::from_vec(m.into_raw_vec_and_offset().0, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean SSIM of `x` against `y`, both `[B,T,H,W]`, with dynamic range
/// `range[b]` per sample. Averaged over frames, then over the batch.
pub fn ssim_tensor(x: &Tensor, y: &Tensor, range: &Tensor) -> Result<Tensor> {
    let (b, t, h, w) = x.dims4()?;
    let gh = band_tensor(h, x.dtype())?;
    let gw = band_tensor(w, x.dtype())?.t()?;
    let blur = |z: &Tensor| -> Result<Tensor> {
        Ok(gh.broadcast_matmul(&z.reshape((b * t, h, w))?)?.broadcast_matmul(&gw)?)
    };
    let mx = blur(x)?;
    let my = blur(y)?;
    let sxx = (blur(&x.sqr()?)? - mx.sqr()?)?;
    let syy = (blur(&y.sqr()?)? - my.sqr()?)?;
    let sxy = (blur(&(x * y)?)? - (&mx * &my)?)?;
    // per-sample constants broadcast over frames and pixels
    let r = range.reshape((b, 1, 1, 1))?.broadcast_as((b, t, 1, 1))?.reshape((b * t, 1, 1))?;
    let c1 = (r.sqr()? * (SSIM_K1 * SSIM_K1))?;
    let c2 = (r.sqr()? * (SSIM_K2 * SSIM_K2))?;
    let num = ((&mx * &my)? * 2.0)?
        .broadcast_add(&c1)?
        .mul(&(sxy * 2.0)?.broadcast_add(&c2)?)?;
    let den = (mx.sqr()? + my.sqr()?)?
        .broadcast_add(&c1)?
        .mul(&(sxx + syy)?.broadcast_add(&c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `λ_l1·mean|r−g| + λ_l2·mean(r−g)² + λ_ssim·(1 − SSIM(r, g))` for
/// magnitude images `[B,T,H,W]`; the SSIM range is the per-sample maximum
/// of `gnd`.
pub fn rec_loss(rec: &Tensor, gnd: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if rec.dims() != gnd.dims() {
        return Err(Error::Shape {
            expected: gnd.dims().to_vec(),
            actual: rec.dims().to_vec(),
        });
    }
    let (b, ..) = gnd.dims4()?;
    let diff = (rec - gnd)?;
    let l1 = diff.abs()?.mean_all()?;
    let l2 = diff.sqr()?.mean_all()?;
    let range = gnd.abs()?.reshape((b, ()))?.max(1)?.detach();
    let ssim = ssim_tensor(rec, gnd, &range)?;
    let total = ((l1 * w.l1)? + (l2 * w.l2)?)?;
    Ok((total + ((1.0 - ssim)? * w.ssim)?)?)
}

/// Mean cross-entropy of `logits [B,K]` against class indices `[B]`.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let picked = shifted.gather(&labels.to_dtype(DType::U32)?.unsqueeze(1)?, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

/// Sum of the contrast, trajectory and acceleration cross-entropies.
pub fn cls_loss(logits: &[Tensor; 3], labels: &[Tensor; 3]) -> Result<Tensor> {
    let mut total = cross_entropy(&logits[0], &labels[0])?;
    for i in 1..3 {
        total = (total + cross_entropy(&logits[i], &labels[i])?)?;
    }
    Ok(total)
}

pub fn total_loss(rec: &Tensor, cls: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((rec + (cls * w.cls)?)?)
}

fn check_same(rec: &ArrayView3<f64>, gnd: &ArrayView3<f64>) -> Result<()> {
    if rec.dim() != gnd.dim() {
        let (a, b, c) = gnd.dim();
        let (x, y, z) = rec.dim();
        return Err(Error::Shape {
            expected: vec![a, b, c],
            actual: vec![x, y, z],
        });
    }
    Ok(())
}

/// `20·log10(max(gnd)/RMSE)`; `+∞` when the images are identical.
pub fn psnr(rec: ArrayView3<f64>, gnd: ArrayView3<f64>) -> Result<f64> {
    check_same(&rec, &gnd)?;
    let mse = rec.iter().zip(gnd.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / gnd.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = gnd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// `‖rec − gnd‖² / ‖gnd‖²`.
pub fn nmse(rec: ArrayView3<f64>, gnd: ArrayView3<f64>) -> Result<f64> {
    check_same(&rec, &gnd)?;
    let energy: f64 = gnd.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::validation("NMSE is undefined for an all-zero reference"));
    }
    let err: f64 = rec.iter().zip(gnd.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / energy)
}

fn ssim_frame(x: ArrayView2<f64>, y: ArrayView2<f64>, range: f64, gh: &Array2<f64>, gw: &Array2<f64>) -> f64 {
    let blur = |z: &Array2<f64>| gh.dot(z).dot(&gw.t());
    let (x, y) = (x.to_owned(), y.to_owned());
    let mx = blur(&x);
    let my = blur(&y);
    let sxx = blur(&(&x * &x)) - &mx * &mx;
    let syy = blur(&(&y * &y)) - &my * &my;
    let sxy = blur(&(&x * &y)) - &mx * &my;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let num = (&mx * &my * 2.0 + c1) * (sxy * 2.0 + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    (num / den).mean().unwrap_or(0.0)
}

/// Frame-averaged SSIM with the dynamic range taken as `max|gnd|`.
pub fn ssim(rec: ArrayView3<f64>, gnd: ArrayView3<f64>) -> Result<f64> {
    check_same(&rec, &gnd)?;
    let (t, h, w) = gnd.dim();
    let gh = band_matrix(h)?;
    let gw = band_matrix(w)?;
    let range = gnd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let total: f64 = (0..t)
        .map(|f| ssim_frame(rec.slice(s![f, .., ..]), gnd.slice(s![f, .., ..]), range, &gh, &gw))
        .sum();
    Ok(total / t as f64)
}

fn crop_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// PSNR, SSIM and NMSE on the central `crop_fraction` of each axis.
pub fn evaluate(rec: ArrayView3<f64>, gnd: ArrayView3<f64>, crop_fraction: f64) -> Result<CaseMetrics> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::validation(format!("crop fraction must be in (0, 1], got {crop_fraction}")));
    }
    check_same(&rec, &gnd)?;
    let (_, h, w) = gnd.dim();
    let (ch, cw) = (crop_size(h, crop_fraction), crop_size(w, crop_fraction));
    let r: Array3<f64> = center_crop(&rec.to_owned(), ch, cw)?;
    let g: Array3<f64> = center_crop(&gnd.to_owned(), ch, cw)?;
    Ok(CaseMetrics {
        psnr: psnr(r.view(), g.view())?,
        ssim: ssim(r.view(), g.view())?,
        nmse: nmse(r.view(), g.view())?,
    })
}

/// Writes infinities as the string `"inf"`, which JSON numbers cannot hold.
fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_metric<'de, De: Deserializer<'de>>(d: De) -> std::result::Result<f64, De::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("invalid metric value '{s}'"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub count: usize,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl MetricRow {
    fn mean(rows: &[CaseMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        MetricRow {
            count: rows.len(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            nmse: rows.iter().map(|r| r.nmse).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub center_id: String,
    pub contrast: String,
    pub trajectory: String,
    pub accel: u32,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Per-case metrics plus means grouped by scan attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub crop_fraction: f64,
    pub cases: BTreeMap<String, CaseRow>,
    /// `group kind -> group value -> mean row`.
    pub groups: BTreeMap<String, BTreeMap<String, MetricRow>>,
    pub overall: MetricRow,
}

impl MetricReport {
    pub fn build(crop_fraction: f64, entries: &[(String, ScanMeta, CaseMetrics)]) -> Self {
        let mut cases = BTreeMap::new();
        let mut grouped: BTreeMap<String, BTreeMap<String, Vec<CaseMetrics>>> = BTreeMap::new();
        for (id, meta, m) in entries {
            cases.insert(
                id.clone(),
                CaseRow {
                    center_id: meta.center_id.clone(),
                    contrast: meta.contrast.name().into(),
                    trajectory: meta.trajectory.name().into(),
                    accel: meta.accel.factor(),
                    psnr: m.psnr,
                    ssim: m.ssim,
                    nmse: m.nmse,
                },
            );
            for (kind, value) in [
                ("center_id", meta.center_id.clone()),
                ("contrast", meta.contrast.name().to_string()),
                ("trajectory", meta.trajectory.name().to_string()),
                ("accel", meta.accel.factor().to_string()),
            ] {
                grouped.entry(kind.into()).or_default().entry(value).or_default().push(*m);
            }
        }
        let groups = grouped
            .into_iter()
            .map(|(k, g)| (k, g.into_iter().map(|(v, rows)| (v, MetricRow::mean(&rows))).collect()))
            .collect();
        let all: Vec<CaseMetrics> = entries.iter().map(|e| e.2).collect();
        MetricReport {
            crop_fraction,
            cases,
            groups,
            overall: MetricRow::mean(&all),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
