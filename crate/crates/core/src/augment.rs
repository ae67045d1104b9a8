//! Training-set construction: pulse-erased adversarial examples with random
//! labels, and doubled-rate examples extending the label range upward.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::SampleFrame;
use crate::kv::KvDoc;
use crate::nn::shuffle;
use crate::signal::{apply_fir_slice, design_bandstop, design_lowpass, dominant_frequency_bpm, Channel};

pub const ADVERSARIAL_TAPS: usize = 81;
/// Half-width of each stop band in BPM.
pub const STOP_HALF_WIDTH_BPM: f64 = 2.5;
/// Lowest allowed stop-band edge in Hz.
pub const MIN_STOP_EDGE_HZ: f64 = 0.1;
pub const LABEL_RANGE: (f64, f64) = (40.0, 300.0);
pub const DEFAULT_CLEAN_TOL_BPM: f64 = 5.0;
/// Band searched for the dominant frequency of a frame.
pub const SEARCH_BAND_BPM: (f64, f64) = (40.0, 300.0);
const LOWPASS_TAPS: usize = 81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Original,
    Adversarial,
    HighHr,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::Adversarial => "adversarial",
            Provenance::HighHr => "high_hr",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Provenance::Original),
            "adversarial" => Ok(Provenance::Adversarial),
            "high_hr" => Ok(Provenance::HighHr),
            _ => Err(Error::invalid(format!("unknown provenance `{s}`"))),
        }
    }
}

/// A training frame with its label and the frame one stride earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: SampleFrame,
    /// Input for the previous-frame branch; equal to `frame` for the first
    /// frame of a session.
    pub prev: SampleFrame,
    pub hr_label: f64,
    pub provenance: Provenance,
    /// Cleaned PPG of the whole session, used to filter and compress frames
    /// without edge effects.
    pub context: Option<Arc<Channel>>,
}

impl LabeledFrame {
    pub fn original(frame: SampleFrame, prev: SampleFrame, hr_label: f64) -> Self {
        LabeledFrame { frame, prev, hr_label, provenance: Provenance::Original, context: None }
    }
}

/// Labeled originals from consecutive session frames. Frames without a
/// label, or with a label outside the accepted range, are skipped.
pub fn labeled_frames(frames: &[SampleFrame], context: Option<Arc<Channel>>) -> Vec<LabeledFrame> {
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let Some(hr) = f.hr else { continue };
        if !(LABEL_RANGE.0..LABEL_RANGE.1).contains(&hr) {
            log::warn!("{} frame {}: label {hr} BPM outside the training range, skipped", f.subject_id, f.index);
            continue;
        }
        let prev = match i.checked_sub(1).map(|j| &frames[j]) {
            Some(p) if p.index + 1 == f.index => p.clone(),
            _ => f.clone(),
        };
        out.push(LabeledFrame { frame: f.clone(), prev, hr_label: hr, provenance: Provenance::Original, context: context.clone() });
    }
    out
}

/// Samples `[a, b)` of the context in frame coordinates, with up to `pad`
/// extra samples on each side. Returns the padded segment and the offset of
/// `a` inside it, or `None` if the context does not cover `[a, b)`.
fn context_segment(ctx: &Channel, frame: &SampleFrame, len: usize, pad: usize) -> Option<(Vec<f64>, usize)> {
    if (ctx.fs - frame.fs).abs() > 1e-9 {
        return None;
    }
    let start = ((frame.t0 - ctx.t0) * ctx.fs).round();
    if start < 0.0 {
        return None;
    }
    let a = start as usize;
    let b = a + len;
    if b > ctx.samples.len() {
        return None;
    }
    let lo = a.saturating_sub(pad);
    let hi = (b + pad).min(ctx.samples.len());
    Some((ctx.samples[lo..hi].to_vec(), a - lo))
}

/// Stop bands `[i*hr - 2.5, i*hr + 2.5]` BPM in Hz for `i = 1..=3`, skipping
/// bands that reach Nyquist.
pub fn adversarial_bands(hr_bpm: f64, fs: f64) -> Vec<(f64, f64)> {
    let nyq = fs / 2.0;
    let mut out = Vec::new();
    for i in 1..=3 {
        let c = i as f64 * hr_bpm;
        let mut lo = (c - STOP_HALF_WIDTH_BPM) / 60.0;
        let hi = (c + STOP_HALF_WIDTH_BPM) / 60.0;
        if hi >= nyq {
            continue;
        }
        if lo < MIN_STOP_EDGE_HZ {
            log::warn!("stop band around {c:.1} BPM clamped to start at {MIN_STOP_EDGE_HZ} Hz");
            lo = MIN_STOP_EDGE_HZ;
        }
        if lo < hi {
            out.push((lo, hi));
        }
    }
    out
}

fn bandstop_all(x: &[f64], bands: &[(f64, f64)], fs: f64) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    for &(lo, hi) in bands {
        let f = design_bandstop(fs, lo, hi, ADVERSARIAL_TAPS)?;
        y = apply_fir_slice(&y, &f)?;
    }
    Ok(y)
}

/// Applies the stop bands to one frame's PPG, through the context when it
/// covers the frame.
fn erase_frame(f: &SampleFrame, ctx: Option<&Channel>, bands: &[(f64, f64)]) -> Result<SampleFrame> {
    let n = f.len();
    let filtered = match ctx.and_then(|c| context_segment(c, f, n, 2 * ADVERSARIAL_TAPS)) {
        Some((seg, off)) if seg.len() > ADVERSARIAL_TAPS => bandstop_all(&seg, bands, f.fs)?[off..off + n].to_vec(),
        _ => bandstop_all(&f.ppg, bands, f.fs)?,
    };
    Ok(SampleFrame { ppg: filtered, ..f.clone() })
}

/// Removes pulse content at the labelled rate and its first two harmonics
/// from both frames and draws a new label from `Uniform[40, 300)`.
pub fn make_adversarial_example(lf: &LabeledFrame, rng: &mut impl Rng) -> Result<LabeledFrame> {
    if lf.provenance != Provenance::Original {
        return Err(Error::invalid(format!("adversarial input must be an original frame, got {}", lf.provenance)));
    }
    let bands = adversarial_bands(lf.hr_label, lf.frame.fs);
    let ctx = lf.context.as_deref();
    let frame = erase_frame(&lf.frame, ctx, &bands)?;
    let prev = if lf.prev == lf.frame { frame.clone() } else { erase_frame(&lf.prev, ctx, &bands)? };
    Ok(LabeledFrame {
        frame,
        prev,
        hr_label: rng.random_range(LABEL_RANGE.0..LABEL_RANGE.1),
        provenance: Provenance::Adversarial,
        context: None,
    })
}

/// One adversarial example for a uniformly drawn `fraction` of the
/// originals, in the originals' order.
pub fn build_adversarial_subset(ds: &[LabeledFrame], fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledFrame>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("adversarial fraction must lie in [0, 1], got {fraction}")));
    }
    let k = (ds.len() as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    shuffle(&mut idx, rng);
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep.iter().map(|&i| make_adversarial_example(&ds[i], rng)).collect()
}

/// Whether the frame's dominant frequency is within `tol_bpm` of its label.
pub fn is_clean_frame(lf: &LabeledFrame, tol_bpm: f64) -> bool {
    match dominant_frequency_bpm(&lf.frame.ppg, lf.frame.fs, SEARCH_BAND_BPM) {
        Ok(bpm) => (bpm - lf.hr_label).abs() <= tol_bpm,
        Err(_) => false,
    }
}

fn compress(src: &[f64], fs: f64) -> Result<Vec<f64>> {
    let lp = design_lowpass(fs, 0.45 * fs / 2.0, LOWPASS_TAPS)?;
    Ok(apply_fir_slice(src, &lp)?.into_iter().step_by(2).collect())
}

/// Doubles the pulse rate of a clean frame by decimating twice the frame's
/// duration of source signal. Returns `None` when the doubled label would
/// reach 300 BPM.
pub fn make_high_hr_sample(lf: &LabeledFrame) -> Result<Option<LabeledFrame>> {
    if 2.0 * lf.hr_label >= LABEL_RANGE.1 {
        return Ok(None);
    }
    let f = &lf.frame;
    let n = f.len();
    let from_context = lf.context.as_deref().and_then(|c| context_segment(c, f, 2 * n, LOWPASS_TAPS));
    let ppg = match from_context {
        Some((seg, off)) => {
            let lp = design_lowpass(f.fs, 0.45 * f.fs / 2.0, LOWPASS_TAPS)?;
            let y = apply_fir_slice(&seg, &lp)?;
            y[off..off + 2 * n].iter().step_by(2).copied().collect()
        }
        None => {
            let half = compress(&f.ppg, f.fs)?;
            half.iter().chain(&half).copied().take(n).collect()
        }
    };
    let frame = SampleFrame { ppg, ..f.clone() };
    Ok(Some(LabeledFrame {
        prev: frame.clone(),
        frame,
        hr_label: 2.0 * lf.hr_label,
        provenance: Provenance::HighHr,
        context: None,
    }))
}

/// Concatenates the three sets and shuffles them.
pub fn merge_training_sets(
    original: Vec<LabeledFrame>,
    high_hr: Vec<LabeledFrame>,
    adversarial: Vec<LabeledFrame>,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledFrame> {
    let mut all = original;
    all.extend(high_hr);
    all.extend(adversarial);
    shuffle(&mut all, rng);
    all
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Share of originals turned into adversarial examples; 0 disables them.
    pub adversarial_fraction: f64,
    pub high_hr: bool,
    pub clean_tol_bpm: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { adversarial_fraction: 0.5, high_hr: true, clean_tol_bpm: DEFAULT_CLEAN_TOL_BPM, seed: 0 }
    }
}

/// Counts and seeds of an augmented set.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSummary {
    pub counts: BTreeMap<Provenance, usize>,
    /// Originals that passed the clean-frame check.
    pub clean_originals: usize,
    pub config: AugmentConfig,
}

impl AugmentSummary {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("format_version", crate::ingest::FORMAT_VERSION);
        for p in [Provenance::Original, Provenance::HighHr, Provenance::Adversarial] {
            doc.set(format!("count.{p}"), self.counts.get(&p).copied().unwrap_or(0));
        }
        doc.set("clean_originals", self.clean_originals);
        doc.set("adversarial_fraction", self.config.adversarial_fraction);
        doc.set("high_hr", self.config.high_hr);
        doc.set("clean_tol_bpm", self.config.clean_tol_bpm);
        doc.set("seed", self.config.seed);
        doc
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }
}

/// Full augmentation of a set of originals: adversarial subset, high-rate
/// examples from clean frames, merged and shuffled.
pub fn augment_training_set(originals: Vec<LabeledFrame>, cfg: &AugmentConfig) -> Result<(Vec<LabeledFrame>, AugmentSummary)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adversarial = if cfg.adversarial_fraction > 0.0 {
        build_adversarial_subset(&originals, cfg.adversarial_fraction, &mut rng)?
    } else {
        Vec::new()
    };
    let mut clean = 0;
    let mut high = Vec::new();
    if cfg.high_hr {
        for lf in &originals {
            if is_clean_frame(lf, cfg.clean_tol_bpm) {
                clean += 1;
                if let Some(h) = make_high_hr_sample(lf)? {
                    high.push(h);
                }
            }
        }
    }
    let mut counts = BTreeMap::new();
    counts.insert(Provenance::Original, originals.len());
    counts.insert(Provenance::HighHr, high.len());
    counts.insert(Provenance::Adversarial, adversarial.len());
    let merged = merge_training_sets(originals, high, adversarial, &mut rng);
    Ok((merged, AugmentSummary { counts, clean_originals: clean, config: cfg.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::band_power;
    use std::f64::consts::PI;

    pub(crate) fn tone_frame(tones: &[(f64, f64)], t0: f64, n: usize) -> SampleFrame {
        let fs = 32.0;
        SampleFrame {
            subject_id: "s".into(),
            index: 0,
            t0,
            fs,
            ppg: (0..n)
                .map(|i| {
                    let t = t0 + i as f64 / fs;
                    tones.iter().map(|(bpm, a)| a * (2.0 * PI * bpm / 60.0 * t + 0.3).sin()).sum()
                })
                .collect(),
            acc: std::array::from_fn(|a| vec![a as f64; n]),
            hr: None,
            activity: None,
        }
    }

    fn lf(tones: &[(f64, f64)], hr: f64) -> LabeledFrame {
        let f = tone_frame(tones, 0.0, 256);
        LabeledFrame::original(f.clone(), f, hr)
    }

    #[test]
    fn fundamental_is_attenuated() {
        let x = lf(&[(75.0, 1.0)], 75.0);
        let y = make_adversarial_example(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = band_power(&x.frame.ppg, 32.0, 72.5, 77.5);
        let after = band_power(&y.frame.ppg, 32.0, 72.5, 77.5);
        assert!(10.0 * (after / before).log10() <= -20.0, "{before} {after}");
        assert_eq!(y.frame.acc, x.frame.acc);
        assert_eq!(y.frame.t0, x.frame.t0);
        assert_eq!(y.provenance, Provenance::Adversarial);
    }

    #[test]
    fn non_harmonic_tone_survives() {
        let x = lf(&[(45.0, 1.0)], 90.0);
        let y = make_adversarial_example(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = band_power(&x.frame.ppg, 32.0, 40.0, 50.0);
        let after = band_power(&y.frame.ppg, 32.0, 40.0, 50.0);
        assert!(10.0 * (after / before).log10() >= -3.0);
    }

    #[test]
    fn random_labels_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..100_000).map(|_| rng.random_range(LABEL_RANGE.0..LABEL_RANGE.1)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 170.0).abs() <= 2.0);
        assert!(draws.iter().all(|&d| (40.0..300.0).contains(&d)));
    }

    #[test]
    fn very_low_rate_is_clamped() {
        let bands = adversarial_bands(4.0, 32.0);
        assert_eq!(bands[0].0, MIN_STOP_EDGE_HZ);
        assert!(adversarial_bands(300.0, 4.0).len() < 3);
    }

    #[test]
    fn only_originals_can_be_erased() {
        let mut x = lf(&[(75.0, 1.0)], 75.0);
        x.provenance = Provenance::HighHr;
        assert!(make_adversarial_example(&x, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn subset_sizes_and_determinism() {
        let ds: Vec<LabeledFrame> = (0..100).map(|i| lf(&[(60.0 + i as f64, 1.0)], 60.0 + i as f64)).collect();
        let half = build_adversarial_subset(&ds, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(half.len(), 50);
        assert!(build_adversarial_subset(&ds, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().is_empty());
        let again = build_adversarial_subset(&ds, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(half, again);
    }

    #[test]
    fn clean_frame_check() {
        assert!(is_clean_frame(&lf(&[(80.0, 1.0)], 80.0), 5.0));
        assert!(!is_clean_frame(&lf(&[(80.0, 0.3), (110.0, 1.0)], 80.0), 5.0));
        assert!(is_clean_frame(&lf(&[(84.0, 1.0)], 80.0), 5.0));
        assert!(!is_clean_frame(&lf(&[], 80.0), 5.0));
    }

    #[test]
    fn high_rate_doubles_tone() {
        let x = lf(&[(75.0, 1.0)], 75.0);
        let y = make_high_hr_sample(&x).unwrap().unwrap();
        assert_eq!(y.frame.len(), 256);
        assert_eq!(y.frame.fs, 32.0);
        assert_eq!(y.hr_label, 150.0);
        let bpm = dominant_frequency_bpm(&y.frame.ppg, 32.0, (40.0, 300.0)).unwrap();
        assert!((bpm - 150.0).abs() <= 2.0, "{bpm}");
        assert!(make_high_hr_sample(&lf(&[(160.0, 1.0)], 160.0)).unwrap().is_none());
        assert!(make_high_hr_sample(&lf(&[(150.0, 1.0)], 150.0)).unwrap().is_none());
        assert!(make_high_hr_sample(&lf(&[(149.0, 1.0)], 149.0)).unwrap().is_some());
    }

    #[test]
    fn context_is_used_when_it_covers() {
        let long = tone_frame(&[(70.0, 1.0)], 0.0, 32 * 40);
        let ctx = Arc::new(Channel::new(long.ppg.clone(), 32.0, 0.0).unwrap());
        let f = tone_frame(&[(70.0, 1.0)], 10.0, 256);
        let mut x = LabeledFrame::original(f.clone(), f, 70.0);
        let tiled = make_high_hr_sample(&x).unwrap().unwrap();
        x.context = Some(ctx.clone());
        let y = make_high_hr_sample(&x).unwrap().unwrap();
        assert_ne!(y.frame.ppg, tiled.frame.ppg);
        // Compressed context is a 140 BPM tone sampled at 32 Hz.
        for (i, v) in y.frame.ppg.iter().enumerate() {
            let t = 10.0 + 2.0 * i as f64 / 32.0;
            let want = (2.0 * PI * 70.0 / 60.0 * t + 0.3).sin();
            assert!((v - want).abs() < 0.02, "{i}: {v} vs {want}");
        }
        let adv = make_adversarial_example(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(adv.frame.ppg.iter().map(|v| v * v).sum::<f64>() / 256.0 < 1e-3);
    }

    #[test]
    fn merge_counts_and_order() {
        let mk = |n: usize, p: Provenance| -> Vec<LabeledFrame> {
            (0..n)
                .map(|i| {
                    let mut x = lf(&[(70.0, 1.0)], 70.0 + i as f64);
                    x.provenance = p;
                    x
                })
                .collect()
        };
        let m = merge_training_sets(
            mk(100, Provenance::Original),
            mk(20, Provenance::HighHr),
            mk(50, Provenance::Adversarial),
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        assert_eq!(m.len(), 170);
        let count = |p| m.iter().filter(|x| x.provenance == p).count();
        assert_eq!((count(Provenance::Original), count(Provenance::HighHr), count(Provenance::Adversarial)), (100, 20, 50));
        let m2 = merge_training_sets(mk(100, Provenance::Original), vec![], vec![], &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(m2.len(), 100);
        let m3 = merge_training_sets(
            mk(100, Provenance::Original),
            mk(20, Provenance::HighHr),
            mk(50, Provenance::Adversarial),
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        assert_eq!(m, m3);
    }

    #[test]
    fn full_augmentation_summary() {
        let frames: Vec<SampleFrame> = (0..20)
            .map(|i| {
                let mut f = tone_frame(&[(90.0 + 5.0 * (i % 3) as f64, 1.0)], 2.0 * i as f64, 256);
                f.index = i;
                f.hr = Some(if i == 7 { 160.0 } else { 90.0 + 5.0 * (i % 3) as f64 });
                f
            })
            .collect();
        let originals = labeled_frames(&frames, None);
        assert_eq!(originals[3].prev, frames[2]);
        assert_eq!(originals[0].prev, frames[0]);
        let (set, summary) = augment_training_set(originals, &AugmentConfig { seed: 9, ..Default::default() }).unwrap();
        assert_eq!(summary.counts[&Provenance::Original], 20);
        assert_eq!(summary.counts[&Provenance::Adversarial], 10);
        // Frame 7 has a 160 BPM label on a 90-ish tone, so it is not clean.
        assert_eq!(summary.clean_originals, 19);
        assert_eq!(summary.counts[&Provenance::HighHr], 19);
        assert_eq!(set.len(), 49);
        assert!(set.iter().all(|x| (40.0..300.0).contains(&x.hr_label)));
        assert_eq!(summary.to_kv().get("count.high_hr"), Some("19"));
    }
}
