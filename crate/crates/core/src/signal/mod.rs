//! Deterministic DSP primitives shared by the rest of the pipeline.
//!
//! Everything here is a pure function of its inputs.

mod dft;
mod fir;
mod resample;
mod spectral;
mod window;

pub use dft::{dft_forward, dft_inverse, fft_in_place, Spectrum};
pub use fir::{apply_fir, apply_fir_slice, design_bandstop, design_lowpass, FirFilter, FirKind};
pub use resample::{resample, resample_slice};
pub use spectral::{band_power, dominant_frequency_bpm, spectral_peak, SpectralPeak, ZERO_PAD_FACTOR};
pub use window::{aligned_streams, window_stream, AlignedStreams, WindowConfig};
pub(crate) use window::frames_from_streams;

use crate::error::{Error, Result};

/// Analysis rate every channel is brought to before windowing.
pub const ANALYSIS_FS: f64 = 32.0;

/// A uniformly sampled sensor channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub samples: Vec<f64>,
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Time of the first sample in seconds.
    pub t0: f64,
    pub units: String,
}

impl Channel {
    pub fn new(samples: Vec<f64>, fs: f64, t0: f64) -> Result<Self> {
        let ch = Channel { samples, fs, t0, units: "au".to_string() };
        ch.check()?;
        Ok(ch)
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::invalid(format!("sampling rate must be > 0, got {}", self.fs)));
        }
        if !self.t0.is_finite() {
            return Err(Error::invalid("channel start time is not finite"));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Time just past the last sample.
    pub fn t_end(&self) -> f64 {
        self.t0 + self.duration()
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

#[cfg(test)]
pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }
}

/// Zero-mean, unit-variance copy of `x`. A constant input maps to zeros.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if sd < 1e-12 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - m) / sd).collect()
}

/// Pearson correlation of two equal-length sequences.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
