//! CSV tables exchanged between subcommands, and the on-disk cache of an
//! augmented training set.

use std::path::Path;

use crate::augment::{AugmentSummary, LabeledFrame, Provenance};
use crate::error::{Error, Result};
use crate::eval::{classify_trust, Prediction};
use crate::frame::SampleFrame;
use crate::kv::{read_f32le, write_f32le, KvDoc};
use crate::nn::HrEstimate;

/// Frame times in the two tables must agree to this many seconds.
const TIME_MATCH_TOL_S: f64 = 1e-6;

pub const TRUTH_HEADER: [&str; 6] = ["index", "t_start_s", "t_s", "hr_bpm", "activity", "subject"];
pub const PREDICTION_HEADER: [&str; 5] = ["t_s", "mu_bpm", "sigma_bpm", "trust_prob", "keep"];

/// One window of a session with its label; `t_s` is the window end time.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub index: usize,
    pub t_start_s: f64,
    pub t_s: f64,
    pub hr_bpm: Option<f64>,
    pub activity: Option<String>,
    pub subject: String,
}

impl From<&SampleFrame> for TruthRow {
    fn from(f: &SampleFrame) -> Self {
        TruthRow {
            index: f.index,
            t_start_s: f.t0,
            t_s: f.t_end(),
            hr_bpm: f.hr,
            activity: f.activity.clone(),
            subject: f.subject_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub t_s: f64,
    pub mu_bpm: f64,
    pub sigma_bpm: f64,
    pub trust_prob: f64,
    pub keep: bool,
}

impl PredictionRow {
    pub fn new(est: &HrEstimate, thr: f64, cl: f64) -> Self {
        let d = classify_trust(est, thr, cl);
        PredictionRow { t_s: est.frame_time, mu_bpm: est.mu_hr, sigma_bpm: est.sigma_hr, trust_prob: d.trust_prob, keep: d.keep }
    }

    pub fn estimate(&self) -> HrEstimate {
        HrEstimate { mu_hr: self.mu_bpm, sigma_hr: self.sigma_bpm, frame_time: self.t_s }
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| Error::csv(path, e))
}

fn records(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| Error::csv(path, e))?;
    let got = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::format(path, format!("expected header `{}`, found `{}`", header.join(","), got.iter().collect::<Vec<_>>().join(","))));
    }
    r.records().map(|rec| rec.map_err(|e| Error::csv(path, e))).collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, format!("line {line}: bad `{name}` value {:?}", rec.get(i).unwrap_or(""))))
}

fn opt_str(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRUTH_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.t_start_s.to_string(),
            r.t_s.to_string(),
            r.hr_bpm.map_or_else(String::new, |v| v.to_string()),
            r.activity.clone().unwrap_or_default(),
            r.subject.clone(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    records(path, &TRUTH_HEADER)?
        .iter()
        .map(|rec| {
            let hr = &rec[3];
            Ok(TruthRow {
                index: field(path, rec, 0, "index")?,
                t_start_s: field(path, rec, 1, "t_start_s")?,
                t_s: field(path, rec, 2, "t_s")?,
                hr_bpm: if hr.is_empty() { None } else { Some(field(path, rec, 3, "hr_bpm")?) },
                activity: opt_str(&rec[4]),
                subject: rec[5].to_string(),
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(PREDICTION_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.t_s.to_string(),
            r.mu_bpm.to_string(),
            r.sigma_bpm.to_string(),
            r.trust_prob.to_string(),
            (r.keep as u8).to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    records(path, &PREDICTION_HEADER)?
        .iter()
        .map(|rec| {
            let keep: u8 = field(path, rec, 4, "keep")?;
            let row = PredictionRow {
                t_s: field(path, rec, 0, "t_s")?,
                mu_bpm: field(path, rec, 1, "mu_bpm")?,
                sigma_bpm: field(path, rec, 2, "sigma_bpm")?,
                trust_prob: field(path, rec, 3, "trust_prob")?,
                keep: keep != 0,
            };
            if !(row.sigma_bpm > 0.0) {
                return Err(Error::format(path, format!("non-positive sigma at t={}", row.t_s)));
            }
            Ok(row)
        })
        .collect()
}

/// Pairs prediction rows with truth rows by position. The tables must have
/// the same length and matching window times; unlabeled windows are left
/// out.
pub fn join_predictions(
    pred: &[PredictionRow],
    truth: &[TruthRow],
    pred_path: &Path,
    truth_path: &Path,
) -> Result<Vec<Prediction>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} has {} rows but {} has {}",
            pred_path.display(),
            pred.len(),
            truth_path.display(),
            truth.len()
        )));
    }
    let mut out = Vec::with_capacity(pred.len());
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if (p.t_s - t.t_s).abs() > TIME_MATCH_TOL_S {
            return Err(Error::invalid(format!(
                "row {}: {} is at t={} but {} is at t={}",
                i + 1,
                pred_path.display(),
                p.t_s,
                truth_path.display(),
                t.t_s
            )));
        }
        if let Some(y) = t.hr_bpm {
            out.push(Prediction { estimate: p.estimate(), truth: y, subject: t.subject.clone(), activity: t.activity.clone() });
        }
    }
    Ok(out)
}

const CACHE_HEADER: &str = "cache.txt";
const CACHE_FRAMES: &str = "frames.f32";
const CACHE_LABELS: &str = "labels.csv";
const LABEL_HEADER: [&str; 7] = ["index", "subject", "t_start_s", "hr_bpm", "provenance", "prev_t_start_s", "activity"];

/// Writes a training set: a header with the augmentation summary, the
/// `prev` and `frame` signals (PPG then three ACC axes each) as f32le, and a
/// label table.
pub fn write_training_cache(dir: &Path, set: &[LabeledFrame], summary: &AugmentSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let win = set.first().map_or(0, |lf| lf.frame.len());
    let fs = set.first().map_or(0.0, |lf| lf.frame.fs);
    let mut doc = summary.to_kv();
    doc.set("examples", set.len());
    doc.set("win_len", win);
    doc.set("fs", fs);
    doc.write(&dir.join(CACHE_HEADER))?;
    let mut data = Vec::with_capacity(set.len() * 8 * win);
    for lf in set {
        for f in [&lf.prev, &lf.frame] {
            if f.len() != win {
                return Err(Error::invalid("training frames differ in length"));
            }
            data.extend_from_slice(&f.ppg);
            f.acc.iter().for_each(|a| data.extend_from_slice(a));
        }
    }
    write_f32le(&dir.join(CACHE_FRAMES), &data)?;
    let path = dir.join(CACHE_LABELS);
    let mut w = writer(&path)?;
    w.write_record(LABEL_HEADER).map_err(|e| Error::csv(&path, e))?;
    for lf in set {
        w.write_record([
            lf.frame.index.to_string(),
            lf.frame.subject_id.clone(),
            lf.frame.t0.to_string(),
            lf.hr_label.to_string(),
            lf.provenance.to_string(),
            lf.prev.t0.to_string(),
            lf.frame.activity.clone().unwrap_or_default(),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads a cache written by [`write_training_cache`]. Signals come back at
/// f32 precision and without session context.
pub fn read_training_cache(dir: &Path) -> Result<Vec<LabeledFrame>> {
    let hpath = dir.join(CACHE_HEADER);
    let doc = KvDoc::read(&hpath)?;
    let n: usize = doc.require("examples", &hpath)?.parse().map_err(|_| Error::format(&hpath, "bad `examples`"))?;
    let win: usize = doc.require("win_len", &hpath)?.parse().map_err(|_| Error::format(&hpath, "bad `win_len`"))?;
    let fs: f64 = doc.require("fs", &hpath)?.parse().map_err(|_| Error::format(&hpath, "bad `fs`"))?;
    let data = read_f32le(&dir.join(CACHE_FRAMES), Some(n * 8 * win))?;
    let lpath = dir.join(CACHE_LABELS);
    let labels = records(&lpath, &LABEL_HEADER)?;
    if labels.len() != n {
        return Err(Error::format(&lpath, format!("{} rows, header says {n}", labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let index: usize = field(&lpath, rec, 0, "index")?;
            let subject = rec[1].to_string();
            let activity = opt_str(&rec[6]);
            let frame_at = |k: usize, t0: f64, idx: usize| {
                let base = (i * 2 + k) * 4 * win;
                let ch = |c: usize| data[base + c * win..base + (c + 1) * win].to_vec();
                SampleFrame {
                    subject_id: subject.clone(),
                    index: idx,
                    t0,
                    fs,
                    ppg: ch(0),
                    acc: [ch(1), ch(2), ch(3)],
                    hr: None,
                    activity: activity.clone(),
                }
            };
            let hr: f64 = field(&lpath, rec, 3, "hr_bpm")?;
            let t0: f64 = field(&lpath, rec, 2, "t_start_s")?;
            let prev_t0: f64 = field(&lpath, rec, 5, "prev_t_start_s")?;
            let provenance: Provenance = rec[4].parse().map_err(|e: Error| Error::format(&lpath, e.to_string()))?;
            let mut frame = frame_at(1, t0, index);
            frame.hr = Some(hr);
            let prev = frame_at(0, prev_t0, if prev_t0 < t0 { index.saturating_sub(1) } else { index });
            Ok(LabeledFrame { frame, prev, hr_label: hr, provenance, context: None })
        })
        .collect()
}
