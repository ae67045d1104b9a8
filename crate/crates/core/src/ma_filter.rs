//! Adaptive linear motion-artifact separation.
//!
//! A bias-free 3 -> 3 convolution (`k1` taps) followed by a 3 -> 1 merge
//! (`k2` taps) maps the acceleration axes to an estimate of the artifact in
//! the PPG. The filter is fitted without labels by minimizing the distance
//! between the spectrum of its output and the spectrum of the PPG; whatever
//! the acceleration cannot explain is left as the cardiac estimate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kv::{read_f32le, write_f32le, KvDoc};
use crate::signal::fft_in_place;

pub const AXES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Mean squared modulus of the half-spectrum difference.
    #[default]
    MseFreq,
    /// Mean modulus of the half-spectrum difference.
    MaeFreq,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::MseFreq => "mse_freq",
            LossMode::MaeFreq => "mae_freq",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse_freq" | "mse" => Ok(LossMode::MseFreq),
            "mae_freq" | "mae" => Ok(LossMode::MaeFreq),
            _ => Err(Error::invalid(format!("unknown loss mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptHyperParams {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub k1: usize,
    pub k2: usize,
    /// Standard deviation of the normal kernel initialization.
    pub init_std: f64,
    /// Relative epoch-to-epoch loss change below which training stops.
    pub tol: f64,
    /// Consecutive epochs below `tol` required to stop.
    pub patience: usize,
}

impl Default for AdaptHyperParams {
    fn default() -> Self {
        AdaptHyperParams {
            lr: 1e-7,
            momentum: 1e-2,
            epochs: 500,
            loss_mode: LossMode::MseFreq,
            k1: 21,
            k2: 1,
            init_std: 1e-3,
            tol: 1e-6,
            patience: 5,
        }
    }
}

impl AdaptHyperParams {
    pub fn check(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.k1 % 2 == 0 || self.k2 % 2 == 0 {
            return Err(Error::invalid("kernel lengths must be odd"));
        }
        Ok(())
    }
}

/// Weights of the two-layer linear artifact filter. There are no bias
/// terms, so zero acceleration always maps to a zero artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct MixFilterModel {
    pub k1: usize,
    pub k2: usize,
    /// `layer1[(out * AXES + in) * k1 + tap]`.
    pub layer1: Vec<f64>,
    /// `layer2[in * k2 + tap]`.
    pub layer2: Vec<f64>,
    pub seed: u64,
    pub loss_mode: LossMode,
}

/// One stationary training segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptPair {
    pub acc: [Vec<f64>; AXES],
    pub ppg: Vec<f64>,
}

impl From<&SampleFrame> for AdaptPair {
    fn from(f: &SampleFrame) -> Self {
        AdaptPair { acc: f.acc.clone(), ppg: f.ppg.clone() }
    }
}

/// Centred ("same") cross-correlation, accumulated into `out`.
fn correlate_same_acc(x: &[f64], k: &[f64], out: &mut [f64]) {
    let n = x.len() as isize;
    let p = (k.len() / 2) as isize;
    for (j, &w) in k.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let shift = j as isize - p;
        let lo = (-shift).max(0);
        let hi = (n - shift).min(n);
        for t in lo..hi {
            out[t as usize] += w * x[(t + shift) as usize];
        }
    }
}

/// `sum_t a[t] * b[t + shift]` over valid indices.
fn lagged_dot(a: &[f64], b: &[f64], shift: isize) -> f64 {
    let n = a.len() as isize;
    let lo = (-shift).max(0);
    let hi = (n - shift).min(n);
    (lo..hi).map(|t| a[t as usize] * b[(t + shift) as usize]).sum()
}

struct Forward {
    hidden: [Vec<f64>; AXES],
    out: Vec<f64>,
}

impl MixFilterModel {
    pub fn zeros(k1: usize, k2: usize) -> Self {
        MixFilterModel {
            k1,
            k2,
            layer1: vec![0.0; AXES * AXES * k1],
            layer2: vec![0.0; AXES * k2],
            seed: 0,
            loss_mode: LossMode::MseFreq,
        }
    }

    /// Kernels drawn from `Normal(0, std)`.
    pub fn init(k1: usize, k2: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut m = Self::zeros(k1, k2);
        m.layer1.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        m.layer2.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        m.seed = seed;
        Ok(m)
    }

    pub fn kernel1(&self, out: usize, inp: usize) -> &[f64] {
        let o = (out * AXES + inp) * self.k1;
        &self.layer1[o..o + self.k1]
    }

    pub fn kernel2(&self, inp: usize) -> &[f64] {
        &self.layer2[inp * self.k2..(inp + 1) * self.k2]
    }

    fn check_input(&self, acc: &[Vec<f64>; AXES]) -> Result<usize> {
        let n = acc[0].len();
        if acc.iter().any(|a| a.len() != n) {
            return Err(Error::invalid("acceleration axes differ in length"));
        }
        if n < self.k1 + self.k2 {
            return Err(Error::invalid(format!(
                "{n} samples is shorter than k1 + k2 = {}",
                self.k1 + self.k2
            )));
        }
        Ok(n)
    }

    fn forward(&self, acc: &[Vec<f64>; AXES]) -> Forward {
        let n = acc[0].len();
        let hidden: [Vec<f64>; AXES] = std::array::from_fn(|o| {
            let mut h = vec![0.0; n];
            for (i, a) in acc.iter().enumerate() {
                correlate_same_acc(a, self.kernel1(o, i), &mut h);
            }
            h
        });
        let mut out = vec![0.0; n];
        for (i, h) in hidden.iter().enumerate() {
            correlate_same_acc(h, self.kernel2(i), &mut out);
        }
        Forward { hidden, out }
    }

    /// Gradients of the loss with respect to `layer1` and `layer2`, given
    /// the gradient with respect to the model output.
    fn backward(&self, acc: &[Vec<f64>; AXES], fwd: &Forward, g_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = g_out.len();
        let (p1, p2) = ((self.k1 / 2) as isize, (self.k2 / 2) as isize);
        let mut g2 = vec![0.0; self.layer2.len()];
        let mut g_hidden: [Vec<f64>; AXES] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..AXES {
            for j in 0..self.k2 {
                let shift = j as isize - p2;
                g2[i * self.k2 + j] = lagged_dot(g_out, &fwd.hidden[i], shift);
                let w = self.layer2[i * self.k2 + j];
                // hidden[s] feeds out[s - shift].
                let lo = shift.max(0);
                let hi = (n as isize + shift).min(n as isize);
                for s in lo..hi {
                    g_hidden[i][s as usize] += w * g_out[(s - shift) as usize];
                }
            }
        }
        let mut g1 = vec![0.0; self.layer1.len()];
        for o in 0..AXES {
            for (i, a) in acc.iter().enumerate() {
                for j in 0..self.k1 {
                    g1[(o * AXES + i) * self.k1 + j] = lagged_dot(&g_hidden[o], a, j as isize - p1);
                }
            }
        }
        (g1, g2)
    }
}

/// Artifact estimate `layer2 * (layer1 * acc)` with zero-padded "same"
/// convolutions, one value per input sample.
pub fn predict_artifact(m: &MixFilterModel, acc: &[Vec<f64>; AXES]) -> Result<Vec<f64>> {
    m.check_input(acc)?;
    Ok(m.forward(acc).out)
}

/// Loss between the half spectra of `pred` and `target`, together with its
/// gradient with respect to `pred`.
pub fn spectral_loss_grad(pred: &[f64], target: &[f64], mode: LossMode) -> (f64, Vec<f64>) {
    let n = pred.len();
    let mut d: Vec<Complex64> = pred.iter().zip(target).map(|(p, y)| Complex64::new(p - y, 0.0)).collect();
    fft_in_place(&mut d, false);
    let bins = n / 2 + 1;
    let kf = bins as f64;
    let mut g = vec![Complex64::new(0.0, 0.0); n];
    let loss = match mode {
        LossMode::MseFreq => {
            let mut acc = 0.0;
            for k in 0..bins {
                acc += d[k].norm_sqr();
                g[k] = d[k] * (2.0 / kf);
            }
            acc / kf
        }
        LossMode::MaeFreq => {
            let mut acc = 0.0;
            for k in 0..bins {
                let r = d[k].norm();
                acc += r;
                if r > 0.0 {
                    g[k] = d[k] / (r * kf);
                }
            }
            acc / kf
        }
    };
    fft_in_place(&mut g, true);
    (loss, g.iter().map(|c| c.re).collect())
}

pub fn adapt_loss(m: &MixFilterModel, acc: &[Vec<f64>; AXES], ppg: &[f64], mode: LossMode) -> Result<f64> {
    let n = m.check_input(acc)?;
    if ppg.len() != n {
        return Err(Error::invalid(format!("ppg has {} samples, acceleration {n}", ppg.len())));
    }
    Ok(spectral_loss_grad(&m.forward(acc).out, ppg, mode).0)
}

/// Loss and exact weight gradients for one segment.
pub fn adapt_loss_grad(
    m: &MixFilterModel,
    acc: &[Vec<f64>; AXES],
    ppg: &[f64],
    mode: LossMode,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = m.check_input(acc)?;
    if ppg.len() != n {
        return Err(Error::invalid(format!("ppg has {} samples, acceleration {n}", ppg.len())));
    }
    let fwd = m.forward(acc);
    let (loss, g_out) = spectral_loss_grad(&fwd.out, ppg, mode);
    let (g1, g2) = m.backward(acc, &fwd, &g_out);
    Ok((loss, g1, g2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTraining {
    pub model: MixFilterModel,
    /// Entry 0 is the loss at initialization; entry `e` the mean segment
    /// loss seen during epoch `e`.
    pub loss_trace: Vec<f64>,
}

/// Fits a filter on segments from one stationary context with momentum SGD,
/// one segment per step, visiting segments in the given order.
pub fn train_mix_filter(segments: &[AdaptPair], hp: &AdaptHyperParams, seed: u64) -> Result<FilterTraining> {
    hp.check()?;
    if segments.is_empty() {
        return Err(Error::invalid("no segments to fit the artifact filter on"));
    }
    let mut m = MixFilterModel::init(hp.k1, hp.k2, hp.init_std, seed)?;
    m.loss_mode = hp.loss_mode;
    for s in segments {
        adapt_loss(&m, &s.acc, &s.ppg, hp.loss_mode)?;
    }
    let initial = segments
        .iter()
        .map(|s| adapt_loss(&m, &s.acc, &s.ppg, hp.loss_mode))
        .sum::<Result<f64>>()?
        / segments.len() as f64;
    let mut trace = vec![initial];
    let mut v1 = vec![0.0; m.layer1.len()];
    let mut v2 = vec![0.0; m.layer2.len()];
    let mut calm = 0;
    for epoch in 1..=hp.epochs {
        let mut total = 0.0;
        for s in segments {
            let (loss, g1, g2) = adapt_loss_grad(&m, &s.acc, &s.ppg, hp.loss_mode)?;
            if !loss.is_finite() || g1.iter().chain(&g2).any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, lr: hp.lr, msg: "non-finite loss".into() });
            }
            total += loss;
            for ((w, v), g) in m.layer1.iter_mut().zip(&mut v1).zip(&g1) {
                *v = hp.momentum * *v - hp.lr * g;
                *w += *v;
            }
            for ((w, v), g) in m.layer2.iter_mut().zip(&mut v2).zip(&g2) {
                *v = hp.momentum * *v - hp.lr * g;
                *w += *v;
            }
        }
        let mean = total / segments.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, lr: hp.lr, msg: "non-finite loss".into() });
        }
        let prev = *trace.last().unwrap();
        trace.push(mean);
        let rel = (prev - mean).abs() / prev.abs().max(f64::MIN_POSITIVE);
        calm = if rel < hp.tol { calm + 1 } else { 0 };
        if calm >= hp.patience {
            break;
        }
    }
    Ok(FilterTraining { model: m, loss_trace: trace })
}

/// Subtracts the predicted artifact from the frame's PPG. Acceleration,
/// timestamps and labels are carried over untouched.
pub fn remove_artifacts(m: &MixFilterModel, frame: &SampleFrame) -> Result<SampleFrame> {
    let art = predict_artifact(m, &frame.acc)?;
    let mut out = frame.clone();
    out.ppg.iter_mut().zip(&art).for_each(|(p, a)| *p -= a);
    Ok(out)
}

const MODEL_HEADER: &str = "filter.txt";

pub fn save_filter(m: &MixFilterModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = KvDoc::new();
    doc.set("format_version", crate::ingest::FORMAT_VERSION);
    doc.set("k1", m.k1);
    doc.set("k2", m.k2);
    doc.set("seed", m.seed);
    doc.set("loss_mode", m.loss_mode);
    doc.write(&dir.join(MODEL_HEADER))?;
    write_f32le(&dir.join("layer1.f32"), &m.layer1)?;
    write_f32le(&dir.join("layer2.f32"), &m.layer2)
}

pub fn load_filter(dir: &Path) -> Result<MixFilterModel> {
    let hpath = dir.join(MODEL_HEADER);
    let doc = KvDoc::read(&hpath)?;
    let k1: usize = doc.parse_value("k1", &hpath)?.ok_or_else(|| Error::format(&hpath, "missing k1"))?;
    let k2: usize = doc.parse_value("k2", &hpath)?.ok_or_else(|| Error::format(&hpath, "missing k2"))?;
    if k1 % 2 == 0 || k2 % 2 == 0 {
        return Err(Error::format(&hpath, "kernel lengths must be odd"));
    }
    Ok(MixFilterModel {
        k1,
        k2,
        layer1: read_f32le(&dir.join("layer1.f32"), Some(AXES * AXES * k1))?,
        layer2: read_f32le(&dir.join("layer2.f32"), Some(AXES * k2))?,
        seed: doc.parse_or("seed", 0, &hpath)?,
        loss_mode: doc.get("loss_mode").unwrap_or("mse_freq").parse()?,
    })
}
