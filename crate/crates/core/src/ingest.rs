//! On-disk session container.
//!
//! A session is a directory holding:
//!
//! * `manifest.txt`: `key = value` lines. Each channel is described by
//!   `channel.<name> = fs:<Hz>,count:<n>,dtype:f32le,units:<text>`
//!   (optionally followed by `,t0:<s>`).
//! * `<name>.f32`: raw little-endian f32 samples, no header.
//! * `hr.csv`: `t_s,hr_bpm`.
//! * `activity.csv`: `start_s,end_s,label`.
//!
//! `ppg_acc_shift_s` in the manifest is added to the start time of the
//! acceleration channels when loading.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{read_f32le, write_f32le, KvDoc};
use crate::signal::Channel;

pub const FORMAT_VERSION: u32 = 1;
pub const PPG_CHANNEL: &str = "ppg";
pub const ACC_CHANNELS: [&str; 3] = ["acc_x", "acc_y", "acc_z"];
pub const MAX_HR_BPM: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrPoint {
    pub t: f64,
    pub bpm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityInterval {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecording {
    pub subject_id: String,
    pub channels: BTreeMap<String, Channel>,
    pub hr_track: Vec<HrPoint>,
    pub activity_track: Vec<ActivityInterval>,
    pub metadata: BTreeMap<String, String>,
    /// PPG-to-acceleration alignment shift already applied to the
    /// acceleration start times.
    pub ppg_acc_shift_s: f64,
}

impl SessionRecording {
    pub fn new(subject_id: impl Into<String>) -> Self {
        SessionRecording {
            subject_id: subject_id.into(),
            channels: BTreeMap::new(),
            hr_track: Vec::new(),
            activity_track: Vec::new(),
            metadata: BTreeMap::new(),
            ppg_acc_shift_s: 0.0,
        }
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.get(name)
    }

    /// Linearly interpolated heart rate, held constant beyond the track ends.
    pub fn hr_at(&self, t: f64) -> Option<f64> {
        let tr = &self.hr_track;
        let first = tr.first()?;
        if t <= first.t {
            return Some(first.bpm);
        }
        let last = tr.last().unwrap();
        if t >= last.t {
            return Some(last.bpm);
        }
        let i = tr.partition_point(|p| p.t <= t);
        let (a, b) = (tr[i - 1], tr[i]);
        if b.t == a.t {
            return Some(b.bpm);
        }
        Some(a.bpm + (b.bpm - a.bpm) * (t - a.t) / (b.t - a.t))
    }

    /// Label of the activity interval that fully contains `[start, end]`.
    pub fn activity_containing(&self, start: f64, end: f64) -> Option<&str> {
        const EPS: f64 = 1e-9;
        self.activity_track
            .iter()
            .find(|a| a.start <= start + EPS && end <= a.end + EPS)
            .map(|a| a.label.as_str())
    }

    /// Distinct activity labels in order of first appearance.
    pub fn activity_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in &self.activity_track {
            if !out.contains(&a.label) {
                out.push(a.label.clone());
            }
        }
        out
    }
}

/// A broken invariant: the offending field and the rule it violates.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn valid_channel_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn validate_session(s: &SessionRecording) -> Vec<Violation> {
    let mut v = Vec::new();
    if s.subject_id.trim().is_empty() || s.subject_id.contains(['\n', '=']) {
        v.push(Violation::new("subject_id", "must be non-empty text without newlines or `=`"));
    }
    for name in std::iter::once(PPG_CHANNEL).chain(ACC_CHANNELS) {
        if !s.channels.contains_key(name) {
            v.push(Violation::new(format!("channels.{name}"), "required channel missing"));
        }
    }
    for (name, ch) in &s.channels {
        let field = format!("channels.{name}");
        if !valid_channel_name(name) {
            v.push(Violation::new(&field, "name must be ASCII alphanumeric or `_`"));
        }
        if !(ch.fs.is_finite() && ch.fs > 0.0) {
            v.push(Violation::new(format!("{field}.fs"), "sampling rate must be finite and > 0"));
        }
        if !ch.t0.is_finite() {
            v.push(Violation::new(format!("{field}.t0"), "start time must be finite"));
        }
        if ch.samples.iter().any(|x| !x.is_finite()) {
            v.push(Violation::new(format!("{field}.samples"), "samples must be finite"));
        }
        if ch.units.contains([',', '\n']) {
            v.push(Violation::new(format!("{field}.units"), "units must not contain `,` or newlines"));
        }
    }
    if s.hr_track.iter().any(|p| !(p.bpm > 0.0 && p.bpm <= MAX_HR_BPM)) {
        v.push(Violation::new("hr_track", "hr values must lie in (0, 300] BPM"));
    }
    if s.hr_track.iter().any(|p| !p.t.is_finite()) {
        v.push(Violation::new("hr_track", "times must be finite"));
    }
    let acts = &s.activity_track;
    if acts.iter().any(|a| !(a.start.is_finite() && a.end.is_finite() && a.start < a.end)) {
        v.push(Violation::new("activity_track", "each interval needs finite start < end"));
    }
    if acts.windows(2).any(|w| w[1].start < w[0].end) {
        v.push(Violation::new("activity_track", "intervals must be sorted and non-overlapping"));
    }
    if !s.ppg_acc_shift_s.is_finite() {
        v.push(Violation::new("ppg_acc_shift_s", "shift must be finite"));
    }
    v
}

fn check(s: &SessionRecording) -> Result<()> {
    let v = validate_session(s);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

struct ChannelEntry {
    fs: f64,
    count: usize,
    units: String,
    t0: f64,
}

fn parse_channel_line(name: &str, line: &str, origin: &Path) -> Result<ChannelEntry> {
    let mut fs = None;
    let mut count = None;
    let mut dtype = None;
    let mut units = String::from("au");
    let mut t0 = 0.0;
    let bad = |msg: String| Error::format(origin, format!("channel.{name}: {msg}"));
    for part in line.split(',') {
        let (k, v) = part.split_once(':').ok_or_else(|| bad(format!("malformed field `{part}`")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "fs" => fs = Some(v.parse::<f64>().map_err(|_| bad(format!("bad fs `{v}`")))?),
            "count" => count = Some(v.parse::<usize>().map_err(|_| bad(format!("bad count `{v}`")))?),
            "dtype" => dtype = Some(v.to_string()),
            "units" => units = v.to_string(),
            "t0" => t0 = v.parse::<f64>().map_err(|_| bad(format!("bad t0 `{v}`")))?,
            _ => return Err(bad(format!("unknown field `{k}`"))),
        }
    }
    match dtype.as_deref() {
        Some("f32le") => {}
        Some(other) => return Err(bad(format!("unsupported dtype `{other}`"))),
        None => return Err(bad("missing dtype".into())),
    }
    Ok(ChannelEntry {
        fs: fs.ok_or_else(|| bad("missing fs".into()))?,
        count: count.ok_or_else(|| bad("missing count".into()))?,
        units,
        t0,
    })
}

pub fn load_session(path: &Path) -> Result<SessionRecording> {
    let manifest_path = path.join("manifest.txt");
    let doc = KvDoc::read(&manifest_path)?;
    let version: u32 = doc
        .parse_value("format_version", &manifest_path)?
        .ok_or_else(|| Error::format(&manifest_path, "missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported format_version {version}")));
    }
    let mut s = SessionRecording::new(doc.require("subject_id", &manifest_path)?);
    s.ppg_acc_shift_s = doc.parse_or("ppg_acc_shift_s", 0.0, &manifest_path)?;
    for (k, v) in doc.with_prefix("meta.") {
        s.metadata.insert(k.to_string(), v.to_string());
    }
    for (name, line) in doc.with_prefix("channel.") {
        if !valid_channel_name(name) {
            return Err(Error::format(&manifest_path, format!("invalid channel name `{name}`")));
        }
        let e = parse_channel_line(name, line, &manifest_path)?;
        let samples = read_f32le(&path.join(format!("{name}.f32")), Some(e.count))?;
        let mut t0 = e.t0;
        if ACC_CHANNELS.contains(&name) {
            t0 += s.ppg_acc_shift_s;
        }
        s.channels.insert(name.to_string(), Channel { samples, fs: e.fs, t0, units: e.units });
    }
    for name in std::iter::once(PPG_CHANNEL).chain(ACC_CHANNELS) {
        if !s.channels.contains_key(name) {
            return Err(Error::format(&manifest_path, format!("required channel `{name}` missing")));
        }
    }

    let hr_path = path.join("hr.csv");
    if hr_path.exists() {
        let mut rdr = csv::Reader::from_path(&hr_path).map_err(|e| Error::csv(&hr_path, e))?;
        for rec in rdr.deserialize::<(f64, f64)>() {
            let (t, bpm) = rec.map_err(|e| Error::csv(&hr_path, e))?;
            s.hr_track.push(HrPoint { t, bpm });
        }
    }
    let act_path = path.join("activity.csv");
    if act_path.exists() {
        let mut rdr = csv::Reader::from_path(&act_path).map_err(|e| Error::csv(&act_path, e))?;
        for rec in rdr.deserialize::<(f64, f64, String)>() {
            let (start, end, label) = rec.map_err(|e| Error::csv(&act_path, e))?;
            s.activity_track.push(ActivityInterval { start, end, label });
        }
    }
    check(&s)?;
    Ok(s)
}

/// Loads `root` if it is a session directory, otherwise every immediate
/// subdirectory that holds a manifest, in name order.
pub fn load_sessions_under(root: &Path) -> Result<Vec<SessionRecording>> {
    if root.join("manifest.txt").is_file() {
        return Ok(vec![load_session(root)?]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("manifest.txt").is_file() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(Error::format(root, "no session directories found"));
    }
    dirs.sort();
    dirs.iter().map(|d| load_session(d)).collect()
}

pub fn write_session(s: &SessionRecording, path: &Path) -> Result<()> {
    check(s)?;
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut doc = KvDoc::new();
    doc.set("format_version", FORMAT_VERSION);
    doc.set("subject_id", &s.subject_id);
    doc.set("ppg_acc_shift_s", s.ppg_acc_shift_s);
    for (k, v) in &s.metadata {
        doc.set(format!("meta.{k}"), v);
    }
    for (name, ch) in &s.channels {
        let mut t0 = ch.t0;
        if ACC_CHANNELS.contains(&name.as_str()) {
            t0 -= s.ppg_acc_shift_s;
        }
        let mut line = format!("fs:{},count:{},dtype:f32le,units:{}", ch.fs, ch.samples.len(), ch.units);
        if t0 != 0.0 {
            line.push_str(&format!(",t0:{t0}"));
        }
        doc.set(format!("channel.{name}"), line);
        write_f32le(&path.join(format!("{name}.f32")), &ch.samples)?;
    }
    doc.write(&path.join("manifest.txt"))?;

    let hr_path = path.join("hr.csv");
    let mut w = csv::Writer::from_path(&hr_path).map_err(|e| Error::csv(&hr_path, e))?;
    w.write_record(["t_s", "hr_bpm"]).map_err(|e| Error::csv(&hr_path, e))?;
    for p in &s.hr_track {
        w.write_record([p.t.to_string(), p.bpm.to_string()]).map_err(|e| Error::csv(&hr_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&hr_path, e))?;

    let act_path = path.join("activity.csv");
    let mut w = csv::Writer::from_path(&act_path).map_err(|e| Error::csv(&act_path, e))?;
    w.write_record(["start_s", "end_s", "label"]).map_err(|e| Error::csv(&act_path, e))?;
    for a in &s.activity_track {
        w.write_record([a.start.to_string(), a.end.to_string(), a.label.clone()])
            .map_err(|e| Error::csv(&act_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&act_path, e))?;
    Ok(())
}
