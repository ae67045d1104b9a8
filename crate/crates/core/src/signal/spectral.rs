use std::f64::consts::PI;

use num_complex::Complex64;

use super::{fft_in_place, mean};
use crate::error::{Error, Result};

/// Zero-padding factor used for spectral peak search.
pub const ZERO_PAD_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub bpm: f64,
    /// Magnitude of the strongest bin inside the search band.
    pub magnitude: f64,
    /// Magnitude of the strongest non-DC bin anywhere in the half spectrum.
    pub global_max: f64,
}

fn padded_magnitudes(x: &[f64], taper: bool) -> (Vec<f64>, usize) {
    let m = mean(x);
    let n = x.len();
    let nfft = n * ZERO_PAD_FACTOR;
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (t, v) in x.iter().enumerate() {
        let w = if taper { 0.5 - 0.5 * (2.0 * PI * t as f64 / n as f64).cos() } else { 1.0 };
        buf[t] = Complex64::new((v - m) * w, 0.0);
    }
    fft_in_place(&mut buf, false);
    (buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect(), nfft)
}

/// Strongest spectral component inside `band_bpm`, after mean removal and
/// 4x zero padding.
pub fn spectral_peak(x: &[f64], fs: f64, band_bpm: (f64, f64)) -> Result<SpectralPeak> {
    let (lo, hi) = band_bpm;
    if x.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    if !(0.0 < lo && lo < hi && hi <= fs / 2.0 * 60.0) {
        return Err(Error::invalid(format!(
            "band [{lo}, {hi}] BPM must lie within (0, {}]",
            fs / 2.0 * 60.0
        )));
    }
    let (mag, nfft) = padded_magnitudes(x, false);
    let bin_bpm = fs / nfft as f64 * 60.0;
    let global_max = mag[1..].iter().cloned().fold(0.0, f64::max);
    let k_lo = (lo / bin_bpm).ceil() as usize;
    let k_hi = ((hi / bin_bpm).floor() as usize).min(mag.len() - 1);
    let mut best: Option<(usize, f64)> = None;
    for (k, &m) in mag.iter().enumerate().take(k_hi + 1).skip(k_lo) {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((k, m));
        }
    }
    let (k, magnitude) = best.ok_or_else(|| Error::NoDominantPeak("band contains no bins".into()))?;
    if magnitude <= 1e-12 * x.len() as f64 {
        return Err(Error::NoDominantPeak("signal has no energy in band".into()));
    }
    Ok(SpectralPeak { bpm: k as f64 * bin_bpm, magnitude, global_max })
}

pub fn dominant_frequency_bpm(x: &[f64], fs: f64, band_bpm: (f64, f64)) -> Result<f64> {
    spectral_peak(x, fs, band_bpm).map(|p| p.bpm)
}

/// Hann-tapered, zero-padded power summed over bins inside
/// `[lo_bpm, hi_bpm]`.
pub fn band_power(x: &[f64], fs: f64, lo_bpm: f64, hi_bpm: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let (mag, nfft) = padded_magnitudes(x, true);
    let bin_bpm = fs / nfft as f64 * 60.0;
    mag.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * bin_bpm;
            f >= lo_bpm && f <= hi_bpm
        })
        .map(|(_, m)| m * m)
        .sum()
}
