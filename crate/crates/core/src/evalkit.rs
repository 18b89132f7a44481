//! Image metrics, model statistics, score deltas and dataset reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, Error, Result};
use crate::model::{infer, DepthSource, Dsrnet};
use crate::nn::{Conv2d, ConvT2d, ParamStore, Profile};
use crate::resample::bicubic_resample;
use crate::scalar::Scalar;
use crate::synthgen::{SampleRecord, SCALE};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB; serialized as `"inf"` when infinite.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Psnr(v)),
            Repr::Str(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR `{s}`"))),
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else {
            match f.precision() {
                Some(p) => write!(f, "{:.*}", p, self.0),
                None => write!(f, "{}", self.0),
            }
        }
    }
}

fn same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric operands differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with peak 1.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Psnr> {
    same_dims(a, b)?;
    if a.is_empty() {
        return Err(shape_err!("empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(Psnr(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() }))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// ITU-R 601 luma of a 3-channel image, or the single channel as is.
fn luma<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = img.chw()?;
    let d = img.data();
    let n = h * w;
    let y = match c {
        1 => d.iter().map(|v| v.as_f64()).collect(),
        3 => (0..n)
            .map(|i| 0.299 * d[i].as_f64() + 0.587 * d[n + i].as_f64() + 0.114 * d[2 * n + i].as_f64())
            .collect(),
        _ => return Err(shape_err!("SSIM needs 1 or 3 channels, got {c}")),
    };
    Ok((y, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean local SSIM on luma with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, valid windows only.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_dims(a, b)?;
    let (x, h, w) = luma(a)?;
    let (y, _, _) = luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let k = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, h, w, &k);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let (mx, my) = (f(&x), f(&y));
    let (sxx, syy, sxy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Models that can walk their layers for a given input grid.
pub trait Profiled {
    fn layer_profile(&self, hw: (usize, usize)) -> Profile;
}

impl Profiled for Conv2d {
    fn layer_profile(&self, hw: (usize, usize)) -> Profile {
        let mut p = Profile::default();
        self.profile(&mut p, hw);
        p
    }
}

impl Profiled for ConvT2d {
    fn layer_profile(&self, hw: (usize, usize)) -> Profile {
        let mut p = Profile::default();
        self.profile(&mut p, hw);
        p
    }
}

impl Profiled for Dsrnet {
    fn layer_profile(&self, hw: (usize, usize)) -> Profile {
        self.profile(hw)
    }
}

/// LR input size at which FLOPs are reported.
pub const REFERENCE_LR: (usize, usize) = (128, 128);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: u64,
    pub macs: u64,
    pub input_hw: (usize, usize),
}

impl ModelStats {
    /// Multiply-accumulates in units of 1e9, the usual "FLOPs (G)" figure.
    pub fn flops_g(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

/// Parameter and multiply-accumulate counts over conv, transposed-conv and
/// linear layers. `registered` is the number of scalars the model's store
/// holds; any parameter the layer walk does not account for means a layer
/// type the counter does not know.
pub fn model_stats(model: &impl Profiled, registered: usize, hw: (usize, usize)) -> Result<ModelStats> {
    let prof = model.layer_profile(hw);
    let params = prof.params();
    if params != registered as u64 {
        return Err(Error::UnsupportedLayer(format!(
            "layer walk covers {params} parameters, model registers {registered}"
        )));
    }
    Ok(ModelStats {
        params,
        macs: prof.macs(),
        input_hw: hw,
    })
}

/// Differences between scores on downsampled, super-resolved and original
/// inputs: degradation, recovery and remaining gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub lr: f64,
    pub sr: f64,
    pub hr: f64,
}

/// `(lr - hr, sr - lr, hr - sr)`. The last term is taken as the negated sum
/// of the first two, so the three add to exactly zero in floating point.
pub fn delta_metrics(lr: f64, sr: f64, hr: f64) -> Deltas {
    let d_lr = lr - hr;
    let d_sr = sr - lr;
    Deltas {
        lr: d_lr,
        sr: d_sr,
        hr: -(d_lr + d_sr),
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl Deltas {
    /// Two-decimal rounding of each unrounded delta.
    pub fn rounded(&self) -> Deltas {
        Deltas {
            lr: round2(self.lr),
            sr: round2(self.sr),
            hr: round2(self.hr),
        }
    }

    pub fn sum(&self) -> f64 {
        self.lr + self.sr + self.hr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub sr_psnr: Psnr,
    pub sr_ssim: f64,
    pub bicubic_psnr: Psnr,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub sr_psnr: Psnr,
    pub sr_ssim: f64,
    pub bicubic_psnr: Psnr,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub git: Option<String>,
}

impl Provenance {
    pub fn current(seed: u64) -> Self {
        let git = std::process::Command::new("git")
            .args(["rev-parse", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .map(|s| s.trim().to_string());
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            git,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub samples: Vec<SampleScore>,
    pub mean: MeanScores,
    pub stats: ModelStats,
    pub config: serde_json::Value,
    pub provenance: Provenance,
}

/// Arithmetic mean; an infinite entry makes the mean infinite.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Clipped bicubic ×4 of the LR input.
pub fn bicubic_baseline(s: &SampleRecord) -> Result<Tensor<f32>> {
    bicubic_resample(&s.lr, Ratio::from_integer(SCALE as u32), true)
}

pub fn score_sample(id: &str, sr: &Tensor<f32>, bicubic: &Tensor<f32>, hr: &Tensor<f32>) -> Result<SampleScore> {
    Ok(SampleScore {
        id: id.to_string(),
        sr_psnr: psnr(sr, hr)?,
        sr_ssim: ssim(sr, hr)?,
        bicubic_psnr: psnr(bicubic, hr)?,
        bicubic_ssim: ssim(bicubic, hr)?,
    })
}

/// Builds a report from per-sample scores in the given order.
pub fn aggregate(
    method: &str,
    samples: Vec<SampleScore>,
    stats: ModelStats,
    config: serde_json::Value,
    provenance: Provenance,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let col = |f: fn(&SampleScore) -> f64| mean(&samples.iter().map(f).collect::<Vec<_>>());
    let mean = MeanScores {
        sr_psnr: Psnr(col(|s| s.sr_psnr.0)),
        sr_ssim: col(|s| s.sr_ssim),
        bicubic_psnr: Psnr(col(|s| s.bicubic_psnr.0)),
        bicubic_ssim: col(|s| s.bicubic_ssim),
    };
    Ok(EvalReport {
        method: method.to_string(),
        samples,
        mean,
        stats,
        config,
        provenance,
    })
}

/// Runs `net` over `samples` and scores it against the bicubic baseline.
pub fn evaluate_dataset(
    method: &str,
    net: &Dsrnet,
    store: &ParamStore<f32>,
    depth: DepthSource,
    samples: &[SampleRecord],
    config: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let sr = infer(net, store, s, depth)?;
        scores.push(score_sample(&s.sample_id, &sr, &bicubic_baseline(s)?, &s.hr)?);
    }
    let stats = model_stats(net, store.count(), REFERENCE_LR)?;
    aggregate(method, scores, stats, config, Provenance::current(seed))
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

impl EvalReport {
    /// Two rows, `bicubic` then the method, with two-decimal values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,PSNR,SSIM,FLOPs(G),Params(M)\n");
        let m = &self.mean;
        let _ = writeln!(s, "bicubic,{:.2},{:.2},{:.2},{:.2}", m.bicubic_psnr, m.bicubic_ssim, 0.0, 0.0);
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{:.2},{:.2}",
            self.method,
            m.sr_psnr,
            m.sr_ssim,
            self.stats.flops_g(),
            self.stats.params_m()
        );
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let j = dir.join(REPORT_JSON);
        fs::write(&j, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&j, e))?;
        let c = dir.join(REPORT_CSV);
        fs::write(&c, self.to_csv()).map_err(|e| Error::io(&c, e))
    }
}
