use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{anyhow, bail, Context, Result};
use kidppg::augment::augment_training_set;
use kidppg::eval::{evaluate as score, render_table, EvalMode, Fold, MetricsReport, Prediction};
use kidppg::kv::KvDoc;
use kidppg::ma_filter::{load_filter, save_filter, train_mix_filter, AdaptPair, FilterTraining, MixFilterModel};
use kidppg::nn::{load_network, save_network, HeadKind};
use kidppg::pipeline::{self as pl, PipelineConfig, PipelineOutcome};
use kidppg::records::{self, PredictionRow, TruthRow};
use kidppg::signal::{aligned_streams, window_stream, WindowConfig};
use kidppg::synth::{gen_benchmark_suite, gen_session, scenario_spec, write_synth, Scenario, SynthSpec};
use kidppg::{load_session, write_session, SessionRecording};

use crate::{ensure_dir, ModeArg, VariantArg, WindowArgs};

const CONFIG_FILE: &str = "config.txt";
const PREDICTIONS: &str = "predictions.csv";
const TRUTH: &str = "truth.csv";
const REPORT: &str = "report.csv";

/// Config file (or defaults), then the variant preset, seed and window
/// flags on top.
pub fn load_config(path: Option<&Path>, variant: Option<VariantArg>, seed: Option<u64>, win: &WindowArgs) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_kv(&KvDoc::read(p)?, p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = variant {
        cfg.variant = v.variant();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    apply_window(&mut cfg.window, win)?;
    Ok(cfg)
}

fn apply_window(w: &mut WindowConfig, args: &WindowArgs) -> Result<()> {
    if let Some(v) = args.win {
        w.win_s = v;
    }
    if let Some(v) = args.stride {
        w.stride_s = v;
    }
    w.check()?;
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<SessionRecording>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(kidppg::ingest::load_sessions_under(p)?);
    }
    Ok(out)
}

pub fn synth(
    spec: Option<&Path>,
    scenario: Option<&str>,
    suite: bool,
    subject: &str,
    hr: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if suite {
        for s in gen_benchmark_suite(seed)? {
            write_synth(&s, &out.join(&s.session.subject_id))?;
        }
        return Ok(());
    }
    let spec = match (spec, scenario) {
        (Some(p), _) => SynthSpec::from_kv(&KvDoc::read(p)?, p)?,
        (None, Some(name)) => {
            let sc = Scenario::from_label(name).ok_or_else(|| {
                let all: Vec<&str> = Scenario::ALL.iter().map(|s| s.label()).collect();
                anyhow!("unknown scenario `{name}` (expected one of {})", all.join(", "))
            })?;
            scenario_spec(sc, subject, hr, seed)
        }
        (None, None) => bail!("one of --spec, --scenario or --suite is required"),
    };
    write_synth(&gen_session(&spec, seed)?, out)?;
    Ok(())
}

pub fn windows(session: &Path, win: &WindowArgs, out: &Path) -> Result<()> {
    let mut cfg = WindowConfig::default();
    apply_window(&mut cfg, win)?;
    let s = load_session(session)?;
    let frames = window_stream(&s, &cfg)?;
    records::write_truth(out, &frames.iter().map(TruthRow::from).collect::<Vec<_>>())?;
    Ok(())
}

fn write_filter(fit: &FilterTraining, dir: &Path) -> Result<()> {
    save_filter(&fit.model, dir)?;
    let path = dir.join("loss_trace.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| path.display().to_string())?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in fit.loss_trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_filter(session: &Path, activity: Option<&str>, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let s = load_session(session)?;
    let streams = aligned_streams(&s, cfg.window.fs)?;
    match activity {
        Some(label) => {
            let frames = window_stream(&s, &cfg.window)?;
            let pairs: Vec<AdaptPair> =
                frames.iter().filter(|f| f.activity.as_deref() == Some(label)).map(AdaptPair::from).collect();
            if pairs.is_empty() {
                return Err(kidppg::Error::InvalidArgument(format!("no complete window inside activity `{label}` of {}", session.display()))
                    .in_stage("adapt")
                    .into());
            }
            let fit = train_mix_filter(&pairs, &cfg.adapt, pl::derive_seed(cfg.seed, &[&s.subject_id, label]))
                .map_err(|e| e.in_stage("adapt"))?;
            write_filter(&fit, out)
        }
        None => {
            let fits = pl::fit_session_filters(&s, &streams, &cfg.window, &cfg.adapt, cfg.seed).map_err(|e| e.in_stage("adapt"))?;
            for (label, fit) in &fits {
                write_filter(fit, &out.join(label))?;
            }
            Ok(())
        }
    }
}

fn load_filters(dir: &Path) -> Result<BTreeMap<String, MixFilterModel>> {
    let mut filters = BTreeMap::new();
    if dir.join("filter.txt").is_file() {
        filters.insert(pl::WHOLE_SESSION.to_string(), load_filter(dir)?);
        return Ok(filters);
    }
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.join("filter.txt").is_file() {
            let label = p.file_name().and_then(|n| n.to_str()).ok_or_else(|| anyhow!("bad filter directory {}", p.display()))?;
            filters.insert(label.to_string(), load_filter(&p)?);
        }
    }
    if filters.is_empty() {
        bail!("{} holds no filter", dir.display());
    }
    Ok(filters)
}

pub fn clean(session: &Path, filter: &Path, out: &Path) -> Result<()> {
    let s = load_session(session)?;
    let filters = load_filters(filter)?;
    let streams = aligned_streams(&s, kidppg::signal::ANALYSIS_FS)?;
    let cleaned = pl::clean_streams(&s, &streams, &filters).map_err(|e| e.in_stage("adapt"))?;
    write_session(&pl::cleaned_recording(&s, &streams, cleaned)?, out)?;
    Ok(())
}

pub fn augment(input: &[PathBuf], cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let sessions = load_all(input)?;
    let mut plain = cfg.clone();
    plain.variant.adaptive = false;
    let prepared = pl::prepare_sessions(&sessions, &plain)?;
    let mut originals = Vec::new();
    for c in &prepared {
        originals.extend(kidppg::augment::labeled_frames(&c.frames, Some(c.ppg.clone())));
    }
    let (set, summary) = augment_training_set(originals, &cfg.augment_config()).map_err(|e| e.in_stage("augment"))?;
    records::write_training_cache(out, &set, &summary)?;
    log::info!("{} examples: {:?}", set.len(), summary.counts);
    Ok(())
}

pub fn train(data: &[PathBuf], cache: Option<&Path>, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let (set, summary) = match cache {
        Some(dir) => {
            let set = records::read_training_cache(dir)?;
            let hpath = dir.join("cache.txt");
            let doc = KvDoc::read(&hpath)?;
            let d = cfg.augment_config();
            let config = kidppg::augment::AugmentConfig {
                adversarial_fraction: doc.parse_or("adversarial_fraction", d.adversarial_fraction, &hpath)?,
                high_hr: doc.parse_or("high_hr", d.high_hr, &hpath)?,
                clean_tol_bpm: doc.parse_or("clean_tol_bpm", d.clean_tol_bpm, &hpath)?,
                seed: doc.parse_or("seed", d.seed, &hpath)?,
            };
            let mut counts = BTreeMap::new();
            for lf in &set {
                *counts.entry(lf.provenance).or_default() += 1;
            }
            let clean_originals = doc.parse_or("clean_originals", 0, &hpath)?;
            (set, kidppg::augment::AugmentSummary { counts, clean_originals, config })
        }
        None => {
            let sessions = load_all(data)?;
            let cleaned = pl::prepare_sessions(&sessions, cfg)?;
            let refs: Vec<&pl::CleanedSession> = cleaned.iter().collect();
            pl::training_set(&refs, cfg)?
        }
    };
    if let Some(lf) = set.first() {
        if lf.frame.len() != cfg.window.win_len() {
            bail!("training windows have {} samples but the configuration expects {}", lf.frame.len(), cfg.window.win_len());
        }
    }
    let (model, log) = pl::fit_network(&set, cfg)?;
    ensure_dir(out)?;
    save_network(&model, out)?;
    cfg.to_kv().write(&out.join(CONFIG_FILE))?;
    pl::run_log(cfg, &log, &summary).write(&out.join("run_log.txt"))?;
    pl::write_loss_trace(&log, &out.join("loss_trace.csv"))?;
    summary.write(&out.join("augment.txt"))?;
    Ok(())
}

pub fn infer(
    model_dir: &Path,
    session: &Path,
    no_adapt: bool,
    thr: Option<f64>,
    cl: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let model = load_network(model_dir)?;
    let cfg_path = model_dir.join(CONFIG_FILE);
    let mut cfg = if cfg_path.is_file() {
        PipelineConfig::from_kv(&KvDoc::read(&cfg_path)?, &cfg_path)?
    } else {
        let mut c = PipelineConfig::default();
        c.variant.adaptive = model.config.in_channels == 1;
        c.variant.probabilistic = model.config.head == HeadKind::Gaussian;
        c
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if model.config.n != cfg.window.win_len() {
        bail!("model expects {}-sample windows, configuration gives {}", model.config.n, cfg.window.win_len());
    }
    cfg.variant.adaptive = model.config.in_channels == 1 && !no_adapt;
    let s = load_session(session)?;
    let prepared = pl::prepare_session(&s, &cfg)?;
    let est = pl::predict_frames(&model, &prepared.frames).map_err(|e| e.in_stage("infer"))?;
    let (thr, cl) = (thr.unwrap_or(cfg.thr_bpm), cl.unwrap_or(cfg.cl));
    let rows: Vec<PredictionRow> = est.iter().map(|e| PredictionRow::new(e, thr, cl)).collect();
    records::write_predictions(out, &rows)?;
    Ok(())
}

fn mode_of(m: ModeArg) -> EvalMode {
    match m {
        ModeArg::Prob => EvalMode::Probabilistic,
        ModeArg::Point => EvalMode::Point,
    }
}

fn joined(pred: &Path, truth: &Path) -> Result<Vec<Prediction>> {
    let p = records::read_predictions(pred)?;
    let t = records::read_truth(truth)?;
    Ok(records::join_predictions(&p, &t, pred, truth).map_err(|e| e.in_stage("evaluate"))?)
}

pub fn evaluate(pred: &Path, truth: &Path, thr: f64, cl: f64, mode: ModeArg, out: &Path) -> Result<()> {
    let preds = joined(pred, truth)?;
    let report = score(&preds, thr, cl, mode_of(mode)).map_err(|e| e.in_stage("evaluate"))?;
    report.write_csv(out)?;
    let name = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    print!("{}", render_table(&[(name, &report)]));
    Ok(())
}

fn write_fold(o: &PipelineOutcome, cleaned_frames: &[kidppg::SampleFrame], cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let est: Vec<PredictionRow> = pl::predict_frames(&o.model, cleaned_frames)?
        .iter()
        .map(|e| PredictionRow::new(e, cfg.thr_bpm, cfg.cl))
        .collect();
    records::write_predictions(&dir.join(PREDICTIONS), &est)?;
    records::write_truth(&dir.join(TRUTH), &cleaned_frames.iter().map(TruthRow::from).collect::<Vec<_>>())?;
    o.report.write_csv(&dir.join(REPORT))?;
    o.run_log(cfg).write(&dir.join("run_log.txt"))?;
    pl::write_loss_trace(&o.train_log, &dir.join("loss_trace.csv"))?;
    save_network(&o.model, &dir.join("model"))?;
    cfg.to_kv().write(&dir.join("model").join(CONFIG_FILE))?;
    Ok(())
}

fn run_fold_in_process(sessions: &[SessionRecording], fold: &Fold, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let cleaned = pl::prepare_sessions(sessions, cfg)?;
    let o = pl::train_fold(&cleaned, fold, cfg)?;
    let test = cleaned.iter().find(|c| c.subject_id == fold.test).expect("fold subject was cleaned");
    write_fold(&o, &test.frames, cfg, &out.join(&fold.test))
}

fn spawn_fold(data: &Path, config: &Path, subject: &str, out: &Path) -> Result<Child> {
    let exe = std::env::current_exe()?;
    Command::new(exe)
        .arg("loso")
        .arg("--data")
        .arg(data)
        .arg("--config")
        .arg(config)
        .arg("--fold")
        .arg(subject)
        .arg("--out")
        .arg(out)
        .spawn()
        .with_context(|| format!("starting fold {subject}"))
}

pub fn loso(data: &Path, cfg: &PipelineConfig, jobs: usize, only: Option<&str>, out: &Path) -> Result<()> {
    let sessions = kidppg::ingest::load_sessions_under(data)?;
    let folds = kidppg::eval::loso_folds(&sessions).map_err(|e| e.in_stage("window"))?;
    ensure_dir(out)?;
    if let Some(subject) = only {
        let fold = folds.iter().find(|f| f.test == subject).ok_or_else(|| anyhow!("no subject `{subject}` under {}", data.display()))?;
        return run_fold_in_process(&sessions, fold, cfg, out);
    }
    let cfg_path = out.join(CONFIG_FILE);
    cfg.to_kv().write(&cfg_path)?;
    if jobs <= 1 {
        let cleaned = pl::prepare_sessions(&sessions, cfg)?;
        for fold in &folds {
            let o = pl::train_fold(&cleaned, fold, cfg)?;
            let test = cleaned.iter().find(|c| c.subject_id == fold.test).expect("fold subject was cleaned");
            write_fold(&o, &test.frames, cfg, &out.join(&fold.test))?;
        }
    } else {
        let mut pending: Vec<&Fold> = folds.iter().rev().collect();
        let mut running: Vec<(String, Child)> = Vec::new();
        let mut failed = Vec::new();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < jobs {
                let Some(f) = pending.pop() else { break };
                running.push((f.test.clone(), spawn_fold(data, &cfg_path, &f.test, out)?));
            }
            let (subject, mut child) = running.remove(0);
            if !child.wait()?.success() {
                failed.push(subject);
            }
        }
        if !failed.is_empty() {
            return Err(kidppg::Error::InvalidArgument(format!("folds failed: {}", failed.join(", "))).in_stage("train").into());
        }
    }
    let dirs: Vec<PathBuf> = folds.iter().map(|f| out.join(&f.test)).collect();
    let (preds, truth) = concat_runs(&dirs)?;
    records::write_predictions(&out.join(PREDICTIONS), &preds)?;
    records::write_truth(&out.join(TRUTH), &truth)?;
    let joined = records::join_predictions(&preds, &truth, &out.join(PREDICTIONS), &out.join(TRUTH))?;
    let report = score(&joined, cfg.thr_bpm, cfg.cl, cfg.eval_mode()).map_err(|e| e.in_stage("evaluate"))?;
    report.write_csv(&out.join(REPORT))?;
    let table = render_table(&[(&cfg.variant.name(), &report)]);
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn concat_runs(dirs: &[PathBuf]) -> Result<(Vec<PredictionRow>, Vec<TruthRow>)> {
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for d in dirs {
        p.extend(records::read_predictions(&d.join(PREDICTIONS))?);
        t.extend(records::read_truth(&d.join(TRUTH))?);
    }
    Ok((p, t))
}

/// Retention and kept-window MAE as the confidence level sweeps.
const CL_GRID: [f64; 19] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub fn report(runs: &[PathBuf], thr: Option<f64>, cl: Option<f64>, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    for dir in runs {
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg = if cfg_path.is_file() {
            PipelineConfig::from_kv(&KvDoc::read(&cfg_path)?, &cfg_path)?
        } else {
            PipelineConfig::default()
        };
        let (thr, cl) = (thr.unwrap_or(cfg.thr_bpm), cl.unwrap_or(cfg.cl));
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
        let preds = joined(&dir.join(PREDICTIONS), &dir.join(TRUTH))?;
        let report = score(&preds, thr, cl, cfg.eval_mode()).map_err(|e| e.in_stage("evaluate"))?;

        let wpath = out.join(format!("{name}_windows.csv"));
        let mut w = csv::Writer::from_path(&wpath).with_context(|| wpath.display().to_string())?;
        w.write_record(["t_s", "subject", "activity", "hr_bpm", "mu_bpm", "sigma_bpm", "abs_err", "trust_prob", "keep"])?;
        for p in &preds {
            let d = kidppg::eval::classify_trust(&p.estimate, thr, cl);
            w.write_record([
                p.estimate.frame_time.to_string(),
                p.subject.clone(),
                p.activity.clone().unwrap_or_default(),
                p.truth.to_string(),
                p.estimate.mu_hr.to_string(),
                p.estimate.sigma_hr.to_string(),
                (p.estimate.mu_hr - p.truth).abs().to_string(),
                d.trust_prob.to_string(),
                (d.keep as u8).to_string(),
            ])?;
        }
        w.flush()?;

        if cfg.eval_mode() == EvalMode::Probabilistic {
            let rpath = out.join(format!("{name}_retention.csv"));
            let mut w = csv::Writer::from_path(&rpath).with_context(|| rpath.display().to_string())?;
            w.write_record(["cl", "retention_pct", "mae_bpm"])?;
            for c in CL_GRID {
                let r = score(&preds, thr, c, EvalMode::Probabilistic)?;
                w.write_record([c.to_string(), r.overall.retention_pct.to_string(), r.overall.mae.map_or_else(String::new, |m| m.to_string())])?;
            }
            w.flush()?;
        }
        report.write_csv(&out.join(format!("{name}_report.csv")))?;
        reports.push((name, report));
    }
    let refs: Vec<(&str, &MetricsReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let table = render_table(&refs);
    std::fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
