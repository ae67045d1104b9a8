//! Synthetic sessions with known ground truth.
//!
//! PPG is generated as a three-harmonic pulse following a piecewise-linear
//! heart-rate trajectory, plus a planted linear filter applied to the
//! acceleration axes, plus white noise. The generator keeps the separate
//! components so every downstream stage can be checked against them.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{write_session, ActivityInterval, HrPoint, SessionRecording, ACC_CHANNELS, PPG_CHANNEL};
use crate::kv::{write_f32le, KvDoc};
use crate::signal::{Channel, ANALYSIS_FS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub freq_hz: f64,
    pub amp: f64,
}

/// Sum of random sinusoids with frequencies drawn uniformly in
/// `[lo_hz, hi_hz]`, scaled to the given RMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandNoise {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AxisGen {
    pub tones: Vec<Tone>,
    pub band_noise: Option<BandNoise>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSegment {
    pub label: String,
    pub duration_s: f64,
    pub acc: [AxisGen; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub subject_id: String,
    pub fs: f64,
    /// Piecewise-linear heart-rate trajectory as `(time s, BPM)` nodes.
    pub hr_nodes: Vec<(f64, f64)>,
    pub bvp_amps: [f64; 3],
    /// Consecutive activity segments; the session lasts their total duration.
    pub segments: Vec<SynthSegment>,
    /// Centred mixing taps applied to each acceleration axis and summed.
    pub planted_mix: [Vec<f64>; 3],
    pub noise_std: f64,
    /// `(start s, end s)` spans in which the pulse amplitude is zero.
    pub erasures: Vec<(f64, f64)>,
}

/// Ground-truth components of a generated PPG channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub fs: f64,
    pub bvp: Vec<f64>,
    pub artifact: Vec<f64>,
    /// Everything in the stored PPG that is neither pulse nor artifact,
    /// including f32 storage rounding.
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub session: SessionRecording,
    pub truth: SynthTruth,
    pub spec: SynthSpec,
}

impl SynthSpec {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    pub fn hr_at(&self, t: f64) -> f64 {
        let n = &self.hr_nodes;
        if t <= n[0].0 {
            return n[0].1;
        }
        for w in n.windows(2) {
            if t <= w[1].0 {
                let (a, b) = (w[0], w[1]);
                if b.0 == a.0 {
                    return b.1;
                }
                return a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0);
            }
        }
        n[n.len() - 1].1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synth spec: {m}")));
        if !(self.fs > 0.0) {
            return bad(format!("fs must be > 0, got {}", self.fs));
        }
        if self.hr_nodes.is_empty() {
            return bad("hr trajectory needs at least one node".into());
        }
        if self.hr_nodes.iter().any(|(_, h)| !(40.0..300.0).contains(h)) {
            return bad("hr trajectory must stay within [40, 300) BPM".into());
        }
        if self.hr_nodes.windows(2).any(|w| w[1].0 < w[0].0) {
            return bad("hr nodes must be sorted by time".into());
        }
        if self.planted_mix.iter().any(|k| k.is_empty() || k.len() % 2 == 0) {
            return bad("planted mixing taps must have odd length >= 1".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0".into());
        }
        if self.segments.is_empty() || self.segments.iter().any(|s| !(s.duration_s > 0.0)) {
            return bad("need at least one segment with positive duration".into());
        }
        Ok(())
    }
}

fn correlate_same(x: &[f64], k: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let p = (k.len() / 2) as isize;
    (0..n)
        .map(|t| {
            k.iter()
                .enumerate()
                .map(|(j, w)| {
                    let i = t + j as isize - p;
                    if i >= 0 && i < n {
                        w * x[i as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Generates one session. Deterministic for a given spec and seed.
pub fn gen_session(spec: &SynthSpec, seed: u64) -> Result<SynthSession> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = spec.fs;
    let n = (spec.duration() * fs).round() as usize;

    // Acceleration, segment by segment.
    let mut acc: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    let mut start = 0.0;
    let mut activity_track = Vec::new();
    for seg in &spec.segments {
        let a = (start * fs).round() as usize;
        let b = (((start + seg.duration_s) * fs).round() as usize).min(n);
        for (axis, gen) in seg.acc.iter().enumerate() {
            let tones: Vec<(Tone, f64)> = gen.tones.iter().map(|t| (*t, rng.random_range(0.0..2.0 * PI))).collect();
            let noise: Vec<(f64, f64, f64)> = match gen.band_noise {
                Some(bn) if bn.rms > 0.0 => {
                    let m = 16;
                    let amp = bn.rms * (2.0 / m as f64).sqrt();
                    (0..m)
                        .map(|_| (rng.random_range(bn.lo_hz..=bn.hi_hz), amp, rng.random_range(0.0..2.0 * PI)))
                        .collect()
                }
                _ => Vec::new(),
            };
            for (i, v) in acc[axis][a..b].iter_mut().enumerate() {
                let t = i as f64 / fs;
                let mut s = gen.offset;
                for (tone, ph) in &tones {
                    s += tone.amp * (2.0 * PI * tone.freq_hz * t + ph).sin();
                }
                for (f, amp, ph) in &noise {
                    s += amp * (2.0 * PI * f * t + ph).sin();
                }
                *v = quantize(s);
            }
        }
        activity_track.push(ActivityInterval { start, end: start + seg.duration_s, label: seg.label.clone() });
        start += seg.duration_s;
    }

    // Pulse: harmonics of the integrated instantaneous frequency.
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let mut bvp = vec![0.0; n];
    let mut cycles = 0.0;
    let mut prev_hz = spec.hr_at(0.0) / 60.0;
    for (i, v) in bvp.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let hz = spec.hr_at(t) / 60.0;
        if i > 0 {
            cycles += 0.5 * (hz + prev_hz) / fs;
        }
        prev_hz = hz;
        let erased = spec.erasures.iter().any(|&(a, b)| t >= a && t < b);
        if !erased {
            *v = spec
                .bvp_amps
                .iter()
                .enumerate()
                .map(|(h, amp)| amp * (2.0 * PI * (h + 1) as f64 * cycles + phases[h]).sin())
                .sum();
        }
    }

    let mut artifact = vec![0.0; n];
    for (axis, taps) in spec.planted_mix.iter().enumerate() {
        for (o, v) in artifact.iter_mut().zip(correlate_same(&acc[axis], taps)) {
            *o += v;
        }
    }
    let normal = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let ppg: Vec<f64> = (0..n)
        .map(|i| {
            let e = if spec.noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            quantize(bvp[i] + artifact[i] + e)
        })
        .collect();
    let noise: Vec<f64> = (0..n).map(|i| ppg[i] - bvp[i] - artifact[i]).collect();

    let mut session = SessionRecording::new(spec.subject_id.clone());
    session.channels.insert(PPG_CHANNEL.into(), Channel::new(ppg, fs, 0.0)?.with_units("au"));
    for (axis, name) in ACC_CHANNELS.iter().enumerate() {
        let samples = std::mem::take(&mut acc[axis]);
        session.channels.insert((*name).into(), Channel::new(samples, fs, 0.0)?.with_units("1/64g"));
    }
    let duration = n as f64 / fs;
    let mut hr_track: Vec<HrPoint> = spec
        .hr_nodes
        .iter()
        .filter(|(t, _)| *t >= 0.0 && *t <= duration)
        .map(|&(t, bpm)| HrPoint { t, bpm })
        .collect();
    if hr_track.first().is_none_or(|p| p.t > 0.0) {
        hr_track.insert(0, HrPoint { t: 0.0, bpm: spec.hr_at(0.0) });
    }
    if hr_track.last().is_some_and(|p| p.t < duration) {
        hr_track.push(HrPoint { t: duration, bpm: spec.hr_at(duration) });
    }
    session.hr_track = hr_track;
    session.activity_track = activity_track;
    session.metadata.insert("generator".into(), "synth".into());
    session.metadata.insert("seed".into(), seed.to_string());
    Ok(SynthSession { session, truth: SynthTruth { fs, bvp, artifact, noise }, spec: spec.clone() })
}

/// Writes the session container plus `truth/bvp.f32`, `truth/artifact.f32`
/// and `truth/noise.f32`.
pub fn write_synth(s: &SynthSession, dir: &Path) -> Result<()> {
    write_session(&s.session, dir)?;
    let tdir = dir.join("truth");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    write_f32le(&tdir.join("bvp.f32"), &s.truth.bvp)?;
    write_f32le(&tdir.join("artifact.f32"), &s.truth.artifact)?;
    write_f32le(&tdir.join("noise.f32"), &s.truth.noise)
}

/// The benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Pulse only, negligible motion.
    Clean,
    /// Linear motion artifact at a frequency well away from the heart rate.
    MaOffband,
    /// Linear motion artifact close to the heart rate.
    MaOverlap,
    /// Off-band motion artifact with spans where the pulse is absent.
    MaErasure,
    /// Heart rate ramping from 60 to 180 BPM under moderate motion.
    HrRamp,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::Clean, Scenario::MaOffband, Scenario::MaOverlap, Scenario::MaErasure, Scenario::HrRamp];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::MaOffband => "ma_offband",
            Scenario::MaOverlap => "ma_overlap",
            Scenario::MaErasure => "ma_erasure",
            Scenario::HrRamp => "hr_ramp",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sc| sc.label() == s)
    }

    pub fn duration(self) -> f64 {
        match self {
            Scenario::HrRamp => 240.0,
            Scenario::MaErasure => 160.0,
            _ => 120.0,
        }
    }

    /// Motion frequency used for a given base heart rate.
    pub fn motion_hz(self, hr_bpm: f64) -> Option<f64> {
        match self {
            Scenario::Clean => None,
            Scenario::MaOffband | Scenario::MaErasure => Some((hr_bpm + 50.0) / 60.0),
            Scenario::MaOverlap => Some((hr_bpm + 12.0) / 60.0),
            Scenario::HrRamp => Some(0.55),
        }
    }
}

/// Acceleration amplitude of the dominant motion tone, in sensor units.
const MOTION_AMP: f64 = 24.0;

fn motion_axes(motion_hz: Option<f64>, rng: &mut ChaCha8Rng) -> [AxisGen; 3] {
    std::array::from_fn(|_| match motion_hz {
        None => AxisGen { band_noise: Some(BandNoise { lo_hz: 0.2, hi_hz: 6.0, rms: 0.05 }), ..Default::default() },
        Some(f) => AxisGen {
            tones: vec![
                Tone { freq_hz: f, amp: MOTION_AMP * rng.random_range(0.6..1.0) },
                Tone { freq_hz: 2.0 * f, amp: 0.3 * MOTION_AMP * rng.random_range(0.5..1.0) },
            ],
            band_noise: Some(BandNoise { lo_hz: 0.3, hi_hz: 5.0, rms: 4.0 }),
            offset: 0.0,
        },
    })
}

/// Planted mixing taps for one synthetic subject.
pub fn planted_filter(seed: u64, k_true: usize) -> [Vec<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, 0.06).unwrap();
    std::array::from_fn(|_| {
        let mut taps: Vec<f64> = (0..k_true).map(|_| normal.sample(&mut rng)).collect();
        // Keep a definite coupling at the centre tap.
        taps[k_true / 2] += if rng.random_bool(0.5) { 0.12 } else { -0.12 };
        taps
    })
}

/// Spec for a single-scenario session of `scenario.duration()` seconds.
pub fn scenario_spec(scenario: Scenario, subject_id: &str, base_hr: f64, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = scenario.duration();
    let (hr_nodes, erasures) = match scenario {
        Scenario::HrRamp => (vec![(0.0, 60.0), (d, 180.0)], Vec::new()),
        Scenario::MaErasure => (vec![(0.0, base_hr), (d, base_hr)], vec![(30.0, 70.0), (100.0, 140.0)]),
        _ => (vec![(0.0, base_hr), (d, base_hr)], Vec::new()),
    };
    SynthSpec {
        subject_id: subject_id.to_string(),
        fs: ANALYSIS_FS,
        hr_nodes,
        bvp_amps: [1.0, 0.4, 0.2],
        segments: vec![SynthSegment {
            label: scenario.label().to_string(),
            duration_s: d,
            acc: motion_axes(scenario.motion_hz(base_hr), &mut rng),
        }],
        planted_mix: planted_filter(seed, 9),
        noise_std: 0.1,
        erasures,
    }
}

/// Base heart rates of the four synthetic subjects.
pub const SUITE_BASE_HR: [f64; 4] = [72.0, 88.0, 64.0, 96.0];
/// Suite heart rates wander within this many BPM of each segment's level.
pub const SUITE_DRIFT_BPM: f64 = 8.0;
const SUITE_DRIFT_STEP_S: f64 = 20.0;

/// Spec of suite subject `idx` (0-based): the five scenarios back to back,
/// each wandering around its own heart-rate level, with one planted filter
/// per subject.
pub fn suite_subject_spec(idx: usize, seed: u64) -> SynthSpec {
    let subject_seed = seed.wrapping_mul(1000).wrapping_add(idx as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let base = SUITE_BASE_HR[idx % SUITE_BASE_HR.len()];
    let mut t = 0.0;
    let mut hr_nodes = Vec::new();
    let mut segments = Vec::new();
    let mut erasures = Vec::new();
    for (k, sc) in Scenario::ALL.into_iter().enumerate() {
        let d = sc.duration();
        let level = base + [0.0, 8.0, 16.0, 4.0, 0.0][k];
        match sc {
            Scenario::HrRamp => {
                hr_nodes.push((t, 60.0));
                hr_nodes.push((t + d, 180.0));
            }
            _ => {
                let steps = (d / SUITE_DRIFT_STEP_S).round() as usize;
                for j in 0..=steps {
                    let at = t + d * j as f64 / steps as f64;
                    hr_nodes.push((at, level + rng.random_range(-SUITE_DRIFT_BPM..=SUITE_DRIFT_BPM)));
                }
            }
        }
        if sc == Scenario::MaErasure {
            erasures.push((t + 30.0, t + 70.0));
            erasures.push((t + 100.0, t + 140.0));
        }
        segments.push(SynthSegment {
            label: sc.label().to_string(),
            duration_s: d,
            acc: motion_axes(sc.motion_hz(level), &mut rng),
        });
        t += d;
    }
    SynthSpec {
        subject_id: format!("S{}", idx + 1),
        fs: ANALYSIS_FS,
        hr_nodes,
        bvp_amps: [1.0, 0.4, 0.2],
        segments,
        planted_mix: planted_filter(subject_seed, 9),
        noise_std: 0.1,
        erasures,
    }
}

/// Four synthetic subjects, each running through all five scenarios.
pub fn gen_benchmark_suite(seed: u64) -> Result<Vec<SynthSession>> {
    (0..4).map(|i| gen_session(&suite_subject_spec(i, seed), seed.wrapping_mul(31).wrapping_add(i as u64))).collect()
}

// Text form used by the command line: flat `key = value` lines.

fn parse_list(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{x}`"))))
        .collect()
}

fn parse_axis(v: &str) -> Result<AxisGen> {
    let mut g = AxisGen::default();
    for part in v.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let f: Vec<&str> = part.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .ok_or_else(|| Error::invalid(format!("`{part}` is missing fields")))?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number in `{part}`")))
        };
        match f[0] {
            "tone" => g.tones.push(Tone { freq_hz: num(1)?, amp: num(2)? }),
            "noise" => g.band_noise = Some(BandNoise { lo_hz: num(1)?, hi_hz: num(2)?, rms: num(3)? }),
            "offset" => g.offset = num(1)?,
            other => return Err(Error::invalid(format!("unknown acceleration generator `{other}`"))),
        }
    }
    Ok(g)
}

fn render_axis(g: &AxisGen) -> String {
    let mut parts: Vec<String> = g.tones.iter().map(|t| format!("tone:{}:{}", t.freq_hz, t.amp)).collect();
    if let Some(n) = g.band_noise {
        parts.push(format!("noise:{}:{}:{}", n.lo_hz, n.hi_hz, n.rms));
    }
    if g.offset != 0.0 {
        parts.push(format!("offset:{}", g.offset));
    }
    parts.join(";")
}

impl SynthSpec {
    /// Explicit spec from a key-value document.
    ///
    /// ```text
    /// subject_id = S1
    /// fs = 32
    /// hr = 0:75, 120:75
    /// bvp_amps = 1, 0.4, 0.2
    /// noise_std = 0.1
    /// planted_mix.x = 0.05, 0.1, 0.05
    /// erasures = 30:50
    /// segment.0.label = walk
    /// segment.0.duration_s = 120
    /// segment.0.acc_x = tone:2.1:20;noise:0.3:5:4
    /// ```
    pub fn from_kv(doc: &KvDoc, origin: &Path) -> Result<Self> {
        let ctx = |e: Error| Error::format(origin, e.to_string());
        let subject_id = doc.require("subject_id", origin)?.to_string();
        let fs = doc.parse_or("fs", ANALYSIS_FS, origin)?;
        let hr_nodes = doc
            .require("hr", origin)?
            .split(',')
            .map(|p| {
                let (t, h) = p.trim().split_once(':').ok_or_else(|| Error::format(origin, format!("bad hr node `{p}`")))?;
                Ok((
                    t.trim().parse().map_err(|_| Error::format(origin, format!("bad time `{t}`")))?,
                    h.trim().parse().map_err(|_| Error::format(origin, format!("bad bpm `{h}`")))?,
                ))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let amps = parse_list(doc.get("bvp_amps").unwrap_or("1,0.4,0.2")).map_err(ctx)?;
        if amps.len() != 3 {
            return Err(Error::format(origin, "bvp_amps needs three values"));
        }
        let planted_mix: [Vec<f64>; 3] = {
            let mut out: [Vec<f64>; 3] = Default::default();
            for (i, axis) in ["x", "y", "z"].iter().enumerate() {
                out[i] = parse_list(doc.get(&format!("planted_mix.{axis}")).unwrap_or("0")).map_err(ctx)?;
            }
            out
        };
        let erasures = match doc.get("erasures") {
            None | Some("") => Vec::new(),
            Some(v) => v
                .split(',')
                .map(|p| {
                    let (a, b) =
                        p.trim().split_once(':').ok_or_else(|| Error::format(origin, format!("bad erasure `{p}`")))?;
                    Ok((
                        a.trim().parse().map_err(|_| Error::format(origin, format!("bad start `{a}`")))?,
                        b.trim().parse().map_err(|_| Error::format(origin, format!("bad end `{b}`")))?,
                    ))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?,
        };
        let mut segments = Vec::new();
        for i in 0.. {
            let Some(label) = doc.get(&format!("segment.{i}.label")) else { break };
            let duration_s: f64 = doc
                .parse_value(&format!("segment.{i}.duration_s"), origin)?
                .ok_or_else(|| Error::format(origin, format!("segment.{i}.duration_s missing")))?;
            let mut acc: [AxisGen; 3] = Default::default();
            for (a, name) in ACC_CHANNELS.iter().enumerate() {
                if let Some(v) = doc.get(&format!("segment.{i}.{name}")) {
                    acc[a] = parse_axis(v).map_err(ctx)?;
                }
            }
            segments.push(SynthSegment { label: label.to_string(), duration_s, acc });
        }
        let spec = SynthSpec {
            subject_id,
            fs,
            hr_nodes,
            bvp_amps: [amps[0], amps[1], amps[2]],
            segments,
            planted_mix,
            noise_std: doc.parse_or("noise_std", 0.0, origin)?,
            erasures,
        };
        spec.validate().map_err(ctx)?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvDoc {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut doc = KvDoc::new();
        doc.set("subject_id", &self.subject_id);
        doc.set("fs", self.fs);
        doc.set("hr", self.hr_nodes.iter().map(|(t, h)| format!("{t}:{h}")).collect::<Vec<_>>().join(","));
        doc.set("bvp_amps", join(&self.bvp_amps));
        doc.set("noise_std", self.noise_std);
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            doc.set(format!("planted_mix.{axis}"), join(&self.planted_mix[i]));
        }
        doc.set("erasures", self.erasures.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(","));
        for (i, seg) in self.segments.iter().enumerate() {
            doc.set(format!("segment.{i}.label"), &seg.label);
            doc.set(format!("segment.{i}.duration_s"), seg.duration_s);
            for (a, name) in ACC_CHANNELS.iter().enumerate() {
                doc.set(format!("segment.{i}.{name}"), render_axis(&seg.acc[a]));
            }
        }
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{band_power, correlation, dominant_frequency_bpm, window_stream, WindowConfig};

    fn single(bpm: f64, mix: bool, amps: [f64; 3], noise: f64) -> SynthSpec {
        let mut spec = scenario_spec(Scenario::MaOffband, "T", bpm, 3);
        spec.bvp_amps = amps;
        spec.noise_std = noise;
        if !mix {
            spec.planted_mix = [vec![0.0], vec![0.0], vec![0.0]];
        }
        spec
    }

    #[test]
    fn clean_tone_has_expected_peak() {
        let s = gen_session(&single(75.0, false, [1.0, 0.4, 0.2], 0.0), 1).unwrap();
        let ppg = &s.session.channels["ppg"].samples;
        let bpm = dominant_frequency_bpm(&ppg[320..576], 32.0, (40.0, 300.0)).unwrap();
        assert!((bpm - 75.0).abs() <= 1.0, "{bpm}");
    }

    #[test]
    fn mixing_only_is_pure_artifact() {
        let s = gen_session(&single(75.0, true, [0.0; 3], 0.0), 2).unwrap();
        let ppg = &s.session.channels["ppg"].samples;
        assert!(correlation(ppg, &s.truth.artifact) > 0.999_999);
    }

    #[test]
    fn decomposition_identity() {
        let s = gen_session(&scenario_spec(Scenario::MaErasure, "T", 80.0, 4), 4).unwrap();
        let ppg = &s.session.channels["ppg"].samples;
        for i in 0..ppg.len() {
            let bvp = ppg[i] - s.truth.artifact[i] - s.truth.noise[i];
            assert!((bvp - s.truth.bvp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn erasure_removes_pulse_power() {
        let s = gen_session(&scenario_spec(Scenario::MaErasure, "T", 80.0, 5), 5).unwrap();
        let ppg = &s.session.channels["ppg"].samples;
        let clean: Vec<f64> = ppg.iter().zip(&s.truth.artifact).map(|(p, a)| p - a).collect();
        let inside = &clean[40 * 32..48 * 32];
        let outside = &clean[0..8 * 32];
        let p_in = band_power(inside, 32.0, 77.5, 82.5);
        let p_out = band_power(outside, 32.0, 77.5, 82.5);
        let floor = band_power(inside, 32.0, 180.0, 185.0);
        assert!(p_in < 10.0 * floor.max(1e-9) && p_in < 1e-3 * p_out, "{p_in} {p_out} {floor}");
    }

    #[test]
    fn overlap_scenario_frequencies() {
        let s = gen_session(&scenario_spec(Scenario::MaOverlap, "T", 80.0, 6), 6).unwrap();
        let ppg = &s.session.channels["ppg"].samples;
        let w = 10 * 32..10 * 32 + 256;
        let raw = dominant_frequency_bpm(&ppg[w.clone()], 32.0, (40.0, 300.0)).unwrap();
        let bvp = dominant_frequency_bpm(&s.truth.bvp[w], 32.0, (40.0, 300.0)).unwrap();
        assert!((raw - 92.0).abs() <= 2.0, "raw {raw}");
        assert!((bvp - 80.0).abs() <= 2.0, "bvp {bvp}");
    }

    #[test]
    fn ramp_labels_increase() {
        let s = gen_session(&scenario_spec(Scenario::HrRamp, "T", 80.0, 7), 7).unwrap();
        let frames = window_stream(&s.session, &WindowConfig::default()).unwrap();
        let labels: Vec<f64> = frames.iter().map(|f| f.hr.unwrap()).collect();
        assert!(labels.windows(2).all(|w| w[1] > w[0]));
        for f in &frames {
            let expect = 60.0 + 120.0 * f.t_end() / 240.0;
            assert!((f.hr.unwrap() - expect).abs() <= 0.5);
        }
    }

    #[test]
    fn suite_is_stable() {
        let a = gen_benchmark_suite(11).unwrap();
        let b = gen_benchmark_suite(11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.session.subject_id, format!("S{}", i + 1));
            let labels = s.session.activity_labels();
            assert_eq!(labels, Scenario::ALL.iter().map(|x| x.label()).collect::<Vec<_>>());
            assert!(crate::validate_session(&s.session).is_empty());
        }
        assert_ne!(a[0].spec.planted_mix, a[1].spec.planted_mix);
    }

    #[test]
    fn kv_round_trip() {
        let spec = suite_subject_spec(1, 5);
        let back = SynthSpec::from_kv(&spec.to_kv(), Path::new("spec")).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn write_includes_truth() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_session(&scenario_spec(Scenario::Clean, "T", 70.0, 8), 8).unwrap();
        write_synth(&s, dir.path()).unwrap();
        let back = crate::load_session(dir.path()).unwrap();
        assert_eq!(back, s.session);
        let bvp = crate::kv::read_f32le(&dir.path().join("truth/bvp.f32"), Some(s.truth.bvp.len())).unwrap();
        assert!((bvp[100] - s.truth.bvp[100]).abs() < 1e-6);
    }
}
