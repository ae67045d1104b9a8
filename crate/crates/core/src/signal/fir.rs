use std::f64::consts::PI;

use super::Channel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FirKind {
    BandStop { f_lo: f64, f_hi: f64 },
    LowPass { cutoff: f64 },
}

/// Linear-phase FIR filter with an odd number of symmetric taps.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub fs: f64,
    pub kind: FirKind,
}

impl FirFilter {
    /// Real amplitude response at `f` Hz (the filter is symmetric, so the
    /// response about its centre tap is real).
    pub fn amplitude(&self, f: f64) -> f64 {
        amplitude_at(&self.taps, f / self.fs)
    }

    pub fn gain_db(&self, f: f64) -> f64 {
        20.0 * self.amplitude(f).abs().max(1e-300).log10()
    }

    /// Approximate Hamming transition width in Hz.
    pub fn transition_width(&self) -> f64 {
        3.3 * self.fs / self.taps.len() as f64
    }

    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let mut w: Vec<f64> = (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect();
    mirror(&mut w);
    w
}

/// Copies the first half onto the second so `h[i] == h[len - 1 - i]` bitwise.
fn mirror(h: &mut [f64]) {
    let len = h.len();
    for i in 0..len / 2 {
        h[len - 1 - i] = h[i];
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Amplitude response of a symmetric tap vector at normalized frequency
/// `nu` (cycles per sample).
fn amplitude_at(taps: &[f64], nu: f64) -> f64 {
    let m = (taps.len() - 1) as f64 / 2.0;
    taps.iter()
        .enumerate()
        .map(|(n, h)| h * (2.0 * PI * nu * (n as f64 - m)).cos())
        .sum()
}

fn check_taps(taps: usize) -> Result<()> {
    if taps < 3 || taps % 2 == 0 {
        return Err(Error::invalid(format!("tap count must be odd and >= 3, got {taps}")));
    }
    Ok(())
}

/// Hamming-windowed-sinc band-stop.
///
/// The windowed band-pass kernel is combined with the bare window so the
/// subtracted component has exactly unit gain at the band centre and zero
/// gain at DC. The resulting band-stop has a true null at the centre and
/// unit DC gain, even when the stop band is much narrower than the window's
/// main lobe.
pub fn design_bandstop(fs: f64, f_lo: f64, f_hi: f64, taps: usize) -> Result<FirFilter> {
    check_taps(taps)?;
    if !(fs > 0.0) {
        return Err(Error::invalid("sampling rate must be positive"));
    }
    if !(0.0 < f_lo && f_lo < f_hi && f_hi < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band-stop edges must satisfy 0 < {f_lo} < {f_hi} < {} (Nyquist)",
            fs / 2.0
        )));
    }
    let w = hamming(taps);
    let m = (taps - 1) as f64 / 2.0;
    let (lo, hi) = (f_lo / fs, f_hi / fs);
    let bp: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(n, wn)| {
            let k = n as f64 - m;
            wn * (2.0 * hi * sinc(2.0 * hi * k) - 2.0 * lo * sinc(2.0 * lo * k))
        })
        .collect();
    let centre = 0.5 * (lo + hi);
    // Solve a*BP(0) + b*W(0) = 0 and a*BP(c) + b*W(c) = 1.
    let (bp0, bpc) = (amplitude_at(&bp, 0.0), amplitude_at(&bp, centre));
    let (w0, wc) = (amplitude_at(&w, 0.0), amplitude_at(&w, centre));
    let det = bpc * w0 - bp0 * wc;
    if det.abs() < 1e-12 {
        return Err(Error::invalid("band-stop design is degenerate for this band"));
    }
    let a = w0 / det;
    let b = -bp0 / det;
    let mut h: Vec<f64> = bp.iter().zip(&w).map(|(p, wn)| -(a * p + b * wn)).collect();
    h[taps / 2] += 1.0;
    mirror(&mut h);
    Ok(FirFilter { taps: h, fs, kind: FirKind::BandStop { f_lo, f_hi } })
}

/// Hamming-windowed-sinc low-pass normalized to unit DC gain.
pub fn design_lowpass(fs: f64, cutoff: f64, taps: usize) -> Result<FirFilter> {
    check_taps(taps)?;
    if !(0.0 < cutoff && cutoff < fs / 2.0) {
        return Err(Error::invalid(format!("low-pass cutoff {cutoff} outside (0, {})", fs / 2.0)));
    }
    let w = hamming(taps);
    let m = (taps - 1) as f64 / 2.0;
    let fc = cutoff / fs;
    let mut h: Vec<f64> = w
        .iter()
        .enumerate()
        .map(|(n, wn)| wn * 2.0 * fc * sinc(2.0 * fc * (n as f64 - m)))
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    mirror(&mut h);
    Ok(FirFilter { taps: h, fs, kind: FirKind::LowPass { cutoff } })
}

/// Filters a raw sequence. Output has the input's length and is aligned with
/// it: the `(taps-1)/2` group delay is removed and samples outside the input
/// are treated as zero.
pub fn apply_fir_slice(x: &[f64], f: &FirFilter) -> Result<Vec<f64>> {
    let k = f.taps.len();
    if x.len() <= k {
        return Err(Error::invalid(format!(
            "input of {} samples is too short for a {k}-tap filter",
            x.len()
        )));
    }
    let half = (k / 2) as isize;
    let n = x.len() as isize;
    Ok((0..n)
        .map(|t| {
            let mut acc = 0.0;
            for (j, h) in f.taps.iter().enumerate() {
                let idx = t + j as isize - half;
                if idx >= 0 && idx < n {
                    acc += h * x[idx as usize];
                }
            }
            acc
        })
        .collect())
}

pub fn apply_fir(x: &Channel, f: &FirFilter) -> Result<Channel> {
    if (x.fs - f.fs).abs() > 1e-9 * x.fs {
        return Err(Error::invalid(format!(
            "filter designed for {} Hz applied to a {} Hz channel",
            f.fs, x.fs
        )));
    }
    Ok(Channel { samples: apply_fir_slice(&x.samples, f)?, ..x.clone() })
}
