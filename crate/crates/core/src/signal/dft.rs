use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized in-place DFT of any length. The inverse direction does not
/// divide by `n`.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    if buf.len() <= 1 {
        return;
    }
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        }
    });
    fft.process(buf);
}

/// Full complex spectrum of a real sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `bins[k] = sum_t x[t] exp(-2 pi i k t / n)`, all `n` bins.
    pub bins: Vec<Complex64>,
    /// Bin width. In cycles per sample unless set through [`Spectrum::with_fs`].
    pub df: f64,
    pub n: usize,
}

impl Spectrum {
    pub fn with_fs(mut self, fs: f64) -> Self {
        self.df = fs / self.n as f64;
        self
    }

    /// The `n/2 + 1` non-negative frequency bins of a real input.
    pub fn half(&self) -> &[Complex64] {
        &self.bins[..self.n / 2 + 1]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

pub fn dft_forward(x: &[f64]) -> Result<Spectrum> {
    if x.is_empty() {
        return Err(Error::invalid("dft of an empty sequence"));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    let n = x.len();
    Ok(Spectrum { bins: buf, df: 1.0 / n as f64, n })
}

/// Inverse transform, normalized by `1/n`, returning the real part.
pub fn dft_inverse(s: &Spectrum) -> Vec<f64> {
    let mut buf = s.bins.clone();
    fft_in_place(&mut buf, true);
    let scale = 1.0 / s.n as f64;
    buf.iter().map(|c| c.re * scale).collect()
}
