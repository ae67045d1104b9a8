use num_complex::Complex64;

use super::{fft_in_place, Channel};
use crate::error::{Error, Result};

/// Fourier-domain resampling of a sequence to `n_out` samples.
///
/// Bins are copied between the spectra; the Nyquist bin of an even-length
/// spectrum is split on upsampling and folded on downsampling so that an
/// up/down round trip is exact.
pub fn resample_slice(x: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    if n_in == 0 || n_out == 0 {
        return vec![0.0; n_out];
    }
    if n_out == n_in {
        return x.to_vec();
    }
    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut spec, false);

    let n = n_in.min(n_out);
    let nyq = n / 2 + 1;
    let mut out = vec![Complex64::new(0.0, 0.0); n_out];
    out[..nyq].copy_from_slice(&spec[..nyq]);
    if n > 2 {
        let neg = n - nyq;
        out[n_out - neg..].copy_from_slice(&spec[n_in - neg..]);
    }
    if n % 2 == 0 {
        let h = n / 2;
        if n_out < n_in {
            out[h] += spec[n_in - h];
        } else {
            out[h] *= 0.5;
            out[n_out - h] = out[h];
        }
    }
    fft_in_place(&mut out, true);
    let scale = 1.0 / n_in as f64;
    out.iter().map(|c| c.re * scale).collect()
}

/// Brings a channel to `fs_out`, preserving its duration to within one sample.
pub fn resample(x: &Channel, fs_out: f64) -> Result<Channel> {
    if !(fs_out.is_finite() && fs_out > 0.0) {
        return Err(Error::invalid(format!("target sampling rate must be > 0, got {fs_out}")));
    }
    x.check()?;
    if fs_out == x.fs {
        return Ok(x.clone());
    }
    let n_out = (x.samples.len() as f64 * fs_out / x.fs).round() as usize;
    Ok(Channel { samples: resample_slice(&x.samples, n_out), fs: fs_out, t0: x.t0, units: x.units.clone() })
}
