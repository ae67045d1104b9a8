//! End-to-end training and evaluation of one cross-validation fold.
//!
//! Stages: `adapt` (per-activity artifact filters and stream cleaning),
//! `window`, `augment`, `train` and `evaluate`. Errors carry the name of the
//! stage that produced them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::augment::{augment_training_set, labeled_frames, AugmentConfig, AugmentSummary, LabeledFrame};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, Fold, MetricsReport, Prediction, DEFAULT_CL, DEFAULT_THR_BPM};
use crate::frame::SampleFrame;
use crate::ingest::SessionRecording;
use crate::kv::KvDoc;
use crate::ma_filter::{predict_artifact, train_mix_filter, AdaptHyperParams, AdaptPair, FilterTraining, MixFilterModel};
use crate::nn::{train_network, Example, HeadKind, HrEstimate, HrNetworkParams, NetConfig, NetInput, OutputScale, TrainConfig, TrainLog};
use crate::signal::{aligned_streams, frames_from_streams, AlignedStreams, Channel, WindowConfig};

/// Context name used when a session has no activity track.
pub const WHOLE_SESSION: &str = "session";

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub adaptive: bool,
    pub probabilistic: bool,
    pub guided: bool,
    pub high_hr: bool,
    pub attention: bool,
}

impl Variant {
    /// Adaptive filtering and attention with a point estimate.
    pub const POINT: Variant = Variant { adaptive: true, probabilistic: false, guided: false, high_hr: false, attention: true };
    /// As [`Variant::POINT`] with the Gaussian head.
    pub const PROB: Variant = Variant { adaptive: true, probabilistic: true, guided: false, high_hr: false, attention: true };
    /// Everything on.
    pub const KID_PPG: Variant = Variant { adaptive: true, probabilistic: true, guided: true, high_hr: true, attention: true };

    pub fn name(&self) -> String {
        match *self {
            Variant::POINT => "point".into(),
            Variant::PROB => "prob".into(),
            Variant::KID_PPG => "kid-ppg".into(),
            v => format!(
                "custom(adaptive={},probabilistic={},guided={},high_hr={},attention={})",
                v.adaptive, v.probabilistic, v.guided, v.high_hr, v.attention
            ),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Variant::POINT),
            "prob" => Ok(Variant::PROB),
            "kid-ppg" | "kidppg" => Ok(Variant::KID_PPG),
            _ => Err(Error::invalid(format!("unknown variant `{s}` (expected point, prob or kid-ppg)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub window: WindowConfig,
    pub adapt: AdaptHyperParams,
    /// Backbone settings; attention, head and input channels follow the
    /// variant.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub adversarial_fraction: f64,
    pub clean_tol_bpm: f64,
    pub thr_bpm: f64,
    pub cl: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::KID_PPG,
            window: WindowConfig::default(),
            adapt: AdaptHyperParams::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            adversarial_fraction: 0.5,
            clean_tol_bpm: crate::augment::DEFAULT_CLEAN_TOL_BPM,
            thr_bpm: DEFAULT_THR_BPM,
            cl: DEFAULT_CL,
            seed: 0,
        }
    }
}

/// 64-bit FNV-1a over the base seed and the given parts.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    base.to_le_bytes().into_iter().for_each(&mut eat);
    for p in parts {
        p.bytes().for_each(&mut eat);
        eat(0xff);
    }
    h
}

impl PipelineConfig {
    /// Network configuration after applying the variant switches.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            n: self.window.win_len(),
            in_channels: if self.variant.adaptive { 1 } else { 4 },
            attention: self.variant.attention,
            head: if self.variant.probabilistic { HeadKind::Gaussian } else { HeadKind::Point },
            ..self.net.clone()
        }
    }

    pub fn eval_mode(&self) -> EvalMode {
        if self.variant.probabilistic {
            EvalMode::Probabilistic
        } else {
            EvalMode::Point
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            adversarial_fraction: if self.variant.guided { self.adversarial_fraction } else { 0.0 },
            high_hr: self.variant.high_hr,
            clean_tol_bpm: self.clean_tol_bpm,
            seed: derive_seed(self.seed, &["augment"]),
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let v = &self.variant;
        let mut doc = KvDoc::new();
        doc.set("variant", v.name());
        doc.set("adaptive", v.adaptive);
        doc.set("probabilistic", v.probabilistic);
        doc.set("guided", v.guided);
        doc.set("high_hr", v.high_hr);
        doc.set("attention", v.attention);
        doc.set("window.fs", self.window.fs);
        doc.set("window.win_s", self.window.win_s);
        doc.set("window.stride_s", self.window.stride_s);
        let a = &self.adapt;
        doc.set("adapt.lr", a.lr);
        doc.set("adapt.momentum", a.momentum);
        doc.set("adapt.epochs", a.epochs);
        doc.set("adapt.loss_mode", a.loss_mode);
        doc.set("adapt.k1", a.k1);
        doc.set("adapt.k2", a.k2);
        doc.set("adapt.init_std", a.init_std);
        doc.set("adapt.tol", a.tol);
        doc.set("adapt.patience", a.patience);
        let mut net = KvDoc::new();
        self.net.write_kv(&mut net);
        for (k, val) in net.entries() {
            doc.set(format!("net.{k}"), val);
        }
        let t = &self.train;
        doc.set("train.lr", t.adam.lr);
        doc.set("train.beta1", t.adam.beta1);
        doc.set("train.beta2", t.adam.beta2);
        doc.set("train.eps", t.adam.eps);
        doc.set("train.batch_size", t.batch_size);
        doc.set("train.epochs", t.epochs);
        doc.set("train.val_fraction", t.val_fraction);
        doc.set("train.patience", t.patience);
        doc.set("augment.adversarial_fraction", self.adversarial_fraction);
        doc.set("augment.clean_tol_bpm", self.clean_tol_bpm);
        doc.set("thr_bpm", self.thr_bpm);
        doc.set("cl", self.cl);
        doc.set("seed", self.seed);
        doc
    }

    /// Reads a configuration; absent keys keep their defaults. `variant`
    /// selects a preset, and the individual switches override it.
    pub fn from_kv(doc: &KvDoc, origin: &Path) -> Result<Self> {
        let d = PipelineConfig::default();
        let mut variant = match doc.get("variant") {
            Some(v) if !v.starts_with("custom") => v.parse().map_err(|e: Error| Error::format(origin, e.to_string()))?,
            _ => d.variant,
        };
        variant.adaptive = doc.parse_or("adaptive", variant.adaptive, origin)?;
        variant.probabilistic = doc.parse_or("probabilistic", variant.probabilistic, origin)?;
        variant.guided = doc.parse_or("guided", variant.guided, origin)?;
        variant.high_hr = doc.parse_or("high_hr", variant.high_hr, origin)?;
        variant.attention = doc.parse_or("attention", variant.attention, origin)?;
        let mut net_doc = KvDoc::new();
        for (k, v) in doc.with_prefix("net.") {
            net_doc.set(k, v);
        }
        let loss_mode = match doc.get("adapt.loss_mode") {
            None => d.adapt.loss_mode,
            Some(v) => v.parse().map_err(|e: Error| Error::format(origin, e.to_string()))?,
        };
        let cfg = PipelineConfig {
            variant,
            window: WindowConfig {
                fs: doc.parse_or("window.fs", d.window.fs, origin)?,
                win_s: doc.parse_or("window.win_s", d.window.win_s, origin)?,
                stride_s: doc.parse_or("window.stride_s", d.window.stride_s, origin)?,
            },
            adapt: AdaptHyperParams {
                lr: doc.parse_or("adapt.lr", d.adapt.lr, origin)?,
                momentum: doc.parse_or("adapt.momentum", d.adapt.momentum, origin)?,
                epochs: doc.parse_or("adapt.epochs", d.adapt.epochs, origin)?,
                loss_mode,
                k1: doc.parse_or("adapt.k1", d.adapt.k1, origin)?,
                k2: doc.parse_or("adapt.k2", d.adapt.k2, origin)?,
                init_std: doc.parse_or("adapt.init_std", d.adapt.init_std, origin)?,
                tol: doc.parse_or("adapt.tol", d.adapt.tol, origin)?,
                patience: doc.parse_or("adapt.patience", d.adapt.patience, origin)?,
            },
            net: NetConfig::from_kv(&net_doc, origin)?,
            train: TrainConfig {
                adam: crate::nn::AdamParams {
                    lr: doc.parse_or("train.lr", d.train.adam.lr, origin)?,
                    beta1: doc.parse_or("train.beta1", d.train.adam.beta1, origin)?,
                    beta2: doc.parse_or("train.beta2", d.train.adam.beta2, origin)?,
                    eps: doc.parse_or("train.eps", d.train.adam.eps, origin)?,
                },
                batch_size: doc.parse_or("train.batch_size", d.train.batch_size, origin)?,
                epochs: doc.parse_or("train.epochs", d.train.epochs, origin)?,
                val_fraction: doc.parse_or("train.val_fraction", d.train.val_fraction, origin)?,
                patience: doc.parse_or("train.patience", d.train.patience, origin)?,
                seed: d.train.seed,
            },
            adversarial_fraction: doc.parse_or("augment.adversarial_fraction", d.adversarial_fraction, origin)?,
            clean_tol_bpm: doc.parse_or("augment.clean_tol_bpm", d.clean_tol_bpm, origin)?,
            thr_bpm: doc.parse_or("thr_bpm", d.thr_bpm, origin)?,
            cl: doc.parse_or("cl", d.cl, origin)?,
            seed: doc.parse_or("seed", d.seed, origin)?,
        };
        cfg.window.check().map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.adapt.check().map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.net_config().check().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg)
    }
}

/// A session after artifact removal, cut into frames.
#[derive(Debug, Clone)]
pub struct CleanedSession {
    pub subject_id: String,
    /// Cleaned PPG at the analysis rate, starting at the common start time.
    pub ppg: Arc<Channel>,
    pub frames: Vec<SampleFrame>,
    /// Filter fits by activity label; empty when adaptive filtering is off.
    pub filters: BTreeMap<String, FilterTraining>,
}

/// Fits one artifact filter per activity label on the frames that lie fully
/// inside that activity. Sessions without an activity track get one filter
/// for the whole recording.
pub fn fit_session_filters(
    s: &SessionRecording,
    streams: &AlignedStreams,
    window: &WindowConfig,
    hp: &AdaptHyperParams,
    seed: u64,
) -> Result<BTreeMap<String, FilterTraining>> {
    let frames = frames_from_streams(s, streams, window);
    let contexts: Vec<String> =
        if s.activity_track.is_empty() { vec![WHOLE_SESSION.to_string()] } else { s.activity_labels() };
    let fits: Vec<Option<(String, FilterTraining)>> = contexts
        .par_iter()
        .map(|label| {
            let pairs: Vec<AdaptPair> = frames
                .iter()
                .filter(|f| label == WHOLE_SESSION && s.activity_track.is_empty() || f.activity.as_deref() == Some(label))
                .map(AdaptPair::from)
                .collect();
            if pairs.is_empty() {
                log::warn!("{}: no complete window inside `{label}`, no filter fitted", s.subject_id);
                return Ok(None);
            }
            let fit = train_mix_filter(&pairs, hp, derive_seed(seed, &[&s.subject_id, label]))?;
            log::debug!(
                "{} {label}: filter loss {:.4e} -> {:.4e} in {} epochs",
                s.subject_id,
                fit.loss_trace[0],
                fit.loss_trace.last().unwrap(),
                fit.loss_trace.len() - 1
            );
            Ok(Some((label.clone(), fit)))
        })
        .collect::<Result<_>>()?;
    Ok(fits.into_iter().flatten().collect())
}

/// Label of the filter that applies at time `t`: the activity containing
/// `t`, otherwise the nearest earlier activity with a filter, otherwise the
/// first later one.
fn filter_label_at<'a>(s: &'a SessionRecording, filters: &BTreeMap<String, MixFilterModel>, t: f64) -> Option<&'a str> {
    if s.activity_track.is_empty() {
        return filters.contains_key(WHOLE_SESSION).then_some(WHOLE_SESSION);
    }
    let has = |l: &str| filters.contains_key(l);
    if let Some(a) = s.activity_track.iter().find(|a| a.start <= t && t < a.end && has(&a.label)) {
        return Some(&a.label);
    }
    s.activity_track
        .iter()
        .rev()
        .find(|a| a.end <= t && has(&a.label))
        .or_else(|| s.activity_track.iter().find(|a| a.start > t && has(&a.label)))
        .map(|a| a.label.as_str())
}

/// Subtracts the artifact predicted by the applicable filter from every
/// sample of the aligned PPG stream. A lone filter named [`WHOLE_SESSION`]
/// applies everywhere.
pub fn clean_streams(
    s: &SessionRecording,
    streams: &AlignedStreams,
    filters: &BTreeMap<String, MixFilterModel>,
) -> Result<Vec<f64>> {
    let mut artifacts: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (label, m) in filters {
        artifacts.insert(label, predict_artifact(m, &streams.acc)?);
    }
    let whole = artifacts.get(WHOLE_SESSION).filter(|_| s.activity_track.is_empty() || artifacts.len() == 1);
    Ok(streams
        .ppg
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let art = match whole {
                Some(a) => Some(a[i]),
                None => filter_label_at(s, filters, streams.time_of(i)).map(|l| artifacts[l][i]),
            };
            p - art.unwrap_or(0.0)
        })
        .collect())
}

/// Aligns, optionally cleans and windows one session.
pub fn prepare_session(s: &SessionRecording, cfg: &PipelineConfig) -> Result<CleanedSession> {
    let mut streams = aligned_streams(s, cfg.window.fs).map_err(|e| e.in_stage("window"))?;
    let filters = if cfg.variant.adaptive {
        let fits = fit_session_filters(s, &streams, &cfg.window, &cfg.adapt, cfg.seed).map_err(|e| e.in_stage("adapt"))?;
        let models: BTreeMap<String, MixFilterModel> = fits.iter().map(|(k, v)| (k.clone(), v.model.clone())).collect();
        streams.ppg = clean_streams(s, &streams, &models).map_err(|e| e.in_stage("adapt"))?;
        fits
    } else {
        BTreeMap::new()
    };
    let frames = frames_from_streams(s, &streams, &cfg.window);
    let ppg = Channel::new(streams.ppg, streams.fs, streams.t0).map_err(|e| e.in_stage("adapt"))?;
    Ok(CleanedSession { subject_id: s.subject_id.clone(), ppg: Arc::new(ppg), frames, filters })
}

pub fn prepare_sessions(sessions: &[SessionRecording], cfg: &PipelineConfig) -> Result<Vec<CleanedSession>> {
    sessions.iter().map(|s| prepare_session(s, cfg)).collect()
}

/// A copy of the session whose PPG is replaced by the cleaned stream and
/// whose acceleration is resampled to the same rate and span.
pub fn cleaned_recording(s: &SessionRecording, streams: &AlignedStreams, cleaned_ppg: Vec<f64>) -> Result<SessionRecording> {
    let mut out = s.clone();
    let units = |name: &str| s.channels.get(name).map(|c| c.units.clone()).unwrap_or_default();
    out.channels.insert(
        crate::ingest::PPG_CHANNEL.into(),
        Channel::new(cleaned_ppg, streams.fs, streams.t0)?.with_units(units(crate::ingest::PPG_CHANNEL)),
    );
    for (i, name) in crate::ingest::ACC_CHANNELS.iter().enumerate() {
        out.channels.insert((*name).into(), Channel::new(streams.acc[i].clone(), streams.fs, streams.t0)?.with_units(units(name)));
    }
    out.ppg_acc_shift_s = 0.0;
    out.metadata.insert("cleaned".into(), "true".into());
    Ok(out)
}

/// Labeled, optionally augmented training frames from the given sessions.
pub fn training_set(sessions: &[&CleanedSession], cfg: &PipelineConfig) -> Result<(Vec<LabeledFrame>, AugmentSummary)> {
    let mut originals = Vec::new();
    for s in sessions {
        originals.extend(labeled_frames(&s.frames, Some(s.ppg.clone())));
    }
    if originals.is_empty() {
        return Err(Error::invalid("no labeled training windows").in_stage("augment"));
    }
    augment_training_set(originals, &cfg.augment_config()).map_err(|e| e.in_stage("augment"))
}

pub fn examples(set: &[LabeledFrame], in_channels: usize) -> Result<Vec<Example>> {
    set.iter()
        .map(|lf| Ok(Example { input: NetInput::from_frames(&lf.prev, &lf.frame, in_channels)?, y: lf.hr_label }))
        .collect()
}

/// Initializes and trains the estimator on a labeled set.
pub fn fit_network(set: &[LabeledFrame], cfg: &PipelineConfig) -> Result<(HrNetworkParams, TrainLog)> {
    let net_cfg = cfg.net_config();
    let run = || -> Result<(HrNetworkParams, TrainLog)> {
        let mut params = HrNetworkParams::init(net_cfg.clone(), derive_seed(cfg.seed, &["net"]))?;
        let data = examples(set, net_cfg.in_channels)?;
        params.output = OutputScale::from_labels(&data.iter().map(|e| e.y).collect::<Vec<_>>());
        let tc = TrainConfig { seed: derive_seed(cfg.seed, &["train"]), ..cfg.train.clone() };
        let log = train_network(&mut params, &data, &tc)?;
        Ok((params, log))
    };
    run().map_err(|e| e.in_stage("train"))
}

/// Estimates for every frame of a session; each frame attends to the one
/// before it, and the first frame to itself.
pub fn predict_frames(model: &HrNetworkParams, frames: &[SampleFrame]) -> Result<Vec<HrEstimate>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let prev = match i.checked_sub(1).map(|j| &frames[j]) {
                Some(p) if p.index + 1 == f.index => p,
                _ => f,
            };
            crate::nn::forward_kidppg(model, prev, f)
        })
        .collect()
}

/// Pairs estimates with frame labels; unlabeled frames are skipped.
pub fn predictions(frames: &[SampleFrame], est: &[HrEstimate]) -> Vec<Prediction> {
    frames
        .iter()
        .zip(est)
        .filter_map(|(f, e)| {
            f.hr.map(|y| Prediction { estimate: *e, truth: y, subject: f.subject_id.clone(), activity: f.activity.clone() })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub fold: Fold,
    pub model: HrNetworkParams,
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub train_log: TrainLog,
    pub augment: AugmentSummary,
}

impl PipelineOutcome {
    pub fn run_log(&self, cfg: &PipelineConfig) -> KvDoc {
        let mut doc = run_log(cfg, &self.train_log, &self.augment);
        doc.set("fold.test", &self.fold.test);
        doc.set("fold.train", self.fold.train.join(","));
        doc
    }
}

/// Run log: configuration snapshot, derived seeds, the counts of the
/// augmented set and the selected epoch.
pub fn run_log(cfg: &PipelineConfig, train: &TrainLog, augment: &AugmentSummary) -> KvDoc {
    let mut doc = cfg.to_kv();
    doc.set("seed.net", derive_seed(cfg.seed, &["net"]));
    doc.set("seed.train", derive_seed(cfg.seed, &["train"]));
    doc.set("seed.augment", augment.config.seed);
    for (k, v) in augment.to_kv().entries() {
        if k.starts_with("count.") {
            doc.set(format!("augment.{k}"), v);
        }
    }
    doc.set("train.best_epoch", train.best_epoch);
    doc
}

/// Writes `epoch,train_loss,val_loss` rows.
pub fn write_loss_trace(log: &TrainLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(|e| Error::csv(path, e))?;
    for (i, (t, v)) in log.train_loss.iter().zip(&log.val_loss).enumerate() {
        w.write_record([(i + 1).to_string(), t.to_string(), v.to_string()]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on the fold's training subjects and evaluates on its test
/// subject, given sessions that were already cleaned.
pub fn train_fold(cleaned: &[CleanedSession], fold: &Fold, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let find = |id: &str| {
        cleaned
            .iter()
            .find(|c| c.subject_id == id)
            .ok_or_else(|| Error::invalid(format!("no session for subject `{id}`")).in_stage("window"))
    };
    let train: Vec<&CleanedSession> = fold.train.iter().map(|id| find(id)).collect::<Result<_>>()?;
    let test = find(&fold.test)?;
    let (set, augment) = training_set(&train, cfg)?;
    log::info!("fold {}: {} training examples {:?}", fold.test, set.len(), augment.counts);
    let (model, train_log) = fit_network(&set, cfg)?;
    let est = predict_frames(&model, &test.frames).map_err(|e| e.in_stage("evaluate"))?;
    let preds = predictions(&test.frames, &est);
    let report = evaluate(&preds, cfg.thr_bpm, cfg.cl, cfg.eval_mode()).map_err(|e| e.in_stage("evaluate"))?;
    Ok(PipelineOutcome { fold: fold.clone(), model, report, predictions: preds, train_log, augment })
}

/// Cleans every session, then trains and evaluates one fold.
pub fn train_pipeline(sessions: &[SessionRecording], fold: &Fold, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let wanted: Vec<&SessionRecording> =
        sessions.iter().filter(|s| s.subject_id == fold.test || fold.train.contains(&s.subject_id)).collect();
    let cleaned = wanted.iter().map(|s| prepare_session(s, cfg)).collect::<Result<Vec<_>>>()?;
    train_fold(&cleaned, fold, cfg)
}

/// Runs every leave-one-subject-out fold. Sessions are cleaned once and
/// folds run in parallel; outcomes are in subject order.
pub fn run_loso(sessions: &[SessionRecording], cfg: &PipelineConfig) -> Result<Vec<PipelineOutcome>> {
    let folds = crate::eval::loso_folds(sessions).map_err(|e| e.in_stage("window"))?;
    let cleaned = prepare_sessions(sessions, cfg)?;
    folds.par_iter().map(|f| train_fold(&cleaned, f, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::tests::constant_session;
    use crate::ingest::ActivityInterval;
    use crate::signal::rms;
    use crate::synth::{gen_session, scenario_spec, Scenario};

    #[test]
    fn presets_parse() {
        assert_eq!("kid-ppg".parse::<Variant>().unwrap(), Variant::KID_PPG);
        assert_eq!("point".parse::<Variant>().unwrap().probabilistic, false);
        assert!("nope".parse::<Variant>().is_err());
        assert_eq!(Variant::PROB.to_string(), "prob");
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = PipelineConfig { seed: 77, ..Default::default() };
        cfg.variant.high_hr = false;
        cfg.net.hidden = 0;
        cfg.adapt.epochs = 12;
        let back = PipelineConfig::from_kv(&cfg.to_kv(), Path::new("cfg")).unwrap();
        assert_eq!(back, cfg);
        let bad = KvDoc::parse("net.heads = 5\n", Path::new("cfg")).unwrap();
        assert!(PipelineConfig::from_kv(&bad, Path::new("cfg")).is_err());
    }

    #[test]
    fn variant_drives_network() {
        let cfg = PipelineConfig { variant: Variant { adaptive: false, ..Variant::POINT }, ..Default::default() };
        let n = cfg.net_config();
        assert_eq!(n.in_channels, 4);
        assert_eq!(n.head, HeadKind::Point);
        assert_eq!(cfg.eval_mode(), EvalMode::Point);
        assert_eq!(cfg.augment_config().adversarial_fraction, 0.0);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
        assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(1, &["ab"]));
        assert_ne!(derive_seed(1, &["a"]), derive_seed(2, &["a"]));
    }

    #[test]
    fn transitions_use_preceding_filter() {
        let mut s = constant_session(60.0, 32.0);
        s.activity_track = vec![
            ActivityInterval { start: 0.0, end: 20.0, label: "a".into() },
            ActivityInterval { start: 25.0, end: 40.0, label: "b".into() },
            ActivityInterval { start: 45.0, end: 60.0, label: "c".into() },
        ];
        let mut filters = BTreeMap::new();
        filters.insert("a".to_string(), MixFilterModel::zeros(3, 1));
        filters.insert("b".to_string(), MixFilterModel::zeros(3, 1));
        assert_eq!(filter_label_at(&s, &filters, 10.0), Some("a"));
        assert_eq!(filter_label_at(&s, &filters, 22.0), Some("a"));
        assert_eq!(filter_label_at(&s, &filters, 30.0), Some("b"));
        assert_eq!(filter_label_at(&s, &filters, 50.0), Some("b"));
        filters.remove("a");
        assert_eq!(filter_label_at(&s, &filters, 5.0), Some("b"));
    }

    #[test]
    fn cleaning_removes_planted_artifact() {
        let syn = gen_session(&scenario_spec(Scenario::MaOffband, "T", 75.0, 3), 3).unwrap();
        let cfg = PipelineConfig::default();
        let c = prepare_session(&syn.session, &cfg).unwrap();
        assert_eq!(c.filters.len(), 1);
        let resid: Vec<f64> = c.ppg.samples.iter().zip(&syn.truth.bvp).map(|(a, b)| a - b).collect();
        assert!(rms(&resid[64..resid.len() - 64]) < 0.2 * rms(&syn.truth.artifact), "{}", rms(&resid));
        assert_eq!(c.frames.len(), 57);
    }

    #[test]
    fn stage_names_surface() {
        let s = constant_session(20.0, 32.0);
        let mut cfg = PipelineConfig::default();
        cfg.adapt.lr = -1.0;
        let err = prepare_session(&s, &cfg).unwrap_err();
        assert_eq!(err.stage(), Some("adapt"));
        let fold = Fold { train: vec!["missing".into()], test: s.subject_id.clone() };
        let cfg = PipelineConfig { variant: Variant { adaptive: false, ..Variant::KID_PPG }, ..Default::default() };
        let err = train_pipeline(&[s], &fold, &cfg).unwrap_err();
        assert_eq!(err.stage(), Some("window"));
    }
}
