//! Trust classification, error metrics and leave-one-subject-out folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::SessionRecording;
use crate::nn::{gaussian_nll, HrEstimate};

pub const DEFAULT_THR_BPM: f64 = 10.0;
pub const DEFAULT_CL: f64 = 0.5;

/// Probability mass of the estimate's Gaussian within `thr` of its mean.
pub fn trust_probability(est: &HrEstimate, thr: f64) -> f64 {
    libm::erf(thr / (est.sigma_hr * std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustDecision {
    pub estimate: HrEstimate,
    pub trust_prob: f64,
    pub keep: bool,
    pub thr_bpm: f64,
    pub cl: f64,
}

/// Keeps the estimate iff its trust probability is at least `cl`.
pub fn classify_trust(est: &HrEstimate, thr: f64, cl: f64) -> TrustDecision {
    let p = trust_probability(est, thr);
    TrustDecision { estimate: *est, trust_prob: p, keep: p >= cl, thr_bpm: thr, cl }
}

/// One estimate with its ground truth and grouping keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub estimate: HrEstimate,
    pub truth: f64,
    pub subject: String,
    pub activity: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Trust filtering, NLL and classifier scores.
    #[default]
    Probabilistic,
    /// Mean only: every sample is kept and no likelihood is reported.
    Point,
}

/// Confusion counts of the error classifier. A positive is a sample whose
/// absolute error is at least the threshold; a predicted positive is a
/// dropped sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub n: usize,
    pub kept: usize,
    /// `None` when every sample was dropped.
    pub mae: Option<f64>,
    pub sd_ae: Option<f64>,
    pub mean_nll: Option<f64>,
    pub retention_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub confusion: Option<Confusion>,
    /// Reported as 1 with `no_positives` set when there are no positives.
    pub tpr: Option<f64>,
    pub f1: Option<f64>,
    pub no_positives: bool,
    pub per_subject: BTreeMap<String, GroupMetrics>,
    pub per_activity: BTreeMap<String, GroupMetrics>,
    pub thr_bpm: f64,
    pub cl: f64,
    pub mode: EvalMode,
}

/// Sum after sorting, so the result does not depend on sample order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn group(preds: &[&Prediction], keep: &[bool], mode: EvalMode) -> GroupMetrics {
    let n = preds.len();
    let errs: Vec<f64> =
        preds.iter().zip(keep).filter(|(_, &k)| k).map(|(p, _)| (p.estimate.mu_hr - p.truth).abs()).collect();
    let kept = errs.len();
    let (mae, sd_ae) = if kept == 0 {
        (None, None)
    } else {
        let m = ordered_sum(errs.clone()) / kept as f64;
        let var = ordered_sum(errs.iter().map(|e| (e - m).powi(2)).collect()) / kept as f64;
        (Some(m), Some(var.sqrt()))
    };
    let mean_nll = match mode {
        EvalMode::Probabilistic if n > 0 => {
            Some(ordered_sum(preds.iter().map(|p| gaussian_nll(&p.estimate, p.truth)).collect()) / n as f64)
        }
        _ => None,
    };
    let retention_pct = if n == 0 { 0.0 } else { 100.0 * kept as f64 / n as f64 };
    GroupMetrics { n, kept, mae, sd_ae, mean_nll, retention_pct }
}

/// Metrics over all predictions plus per-subject and per-activity
/// breakdowns. Samples without an activity are only counted overall.
pub fn evaluate(preds: &[Prediction], thr: f64, cl: f64, mode: EvalMode) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    if !(thr > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {thr}")));
    }
    let keep: Vec<bool> = match mode {
        EvalMode::Probabilistic => preds.iter().map(|p| classify_trust(&p.estimate, thr, cl).keep).collect(),
        EvalMode::Point => vec![true; preds.len()],
    };
    let all: Vec<&Prediction> = preds.iter().collect();
    let overall = group(&all, &keep, mode);

    let (confusion, tpr, f1, no_positives) = match mode {
        EvalMode::Point => (None, None, None, false),
        EvalMode::Probabilistic => {
            let mut c = Confusion::default();
            for (p, &k) in preds.iter().zip(&keep) {
                let positive = (p.estimate.mu_hr - p.truth).abs() >= thr;
                match (positive, !k) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (true, false) => c.fn_ += 1,
                }
            }
            let no_pos = c.tp + c.fn_ == 0;
            let tpr = if no_pos { 1.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
            let denom = 2 * c.tp + c.fp + c.fn_;
            let f1 = if c.tp == 0 {
                if denom == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                2.0 * c.tp as f64 / denom as f64
            };
            (Some(c), Some(tpr), Some(f1), no_pos)
        }
    };

    let breakdown = |key: &dyn Fn(&Prediction) -> Option<String>| {
        let mut groups: BTreeMap<String, (Vec<&Prediction>, Vec<bool>)> = BTreeMap::new();
        for (p, &k) in preds.iter().zip(&keep) {
            if let Some(name) = key(p) {
                let e = groups.entry(name).or_default();
                e.0.push(p);
                e.1.push(k);
            }
        }
        groups.into_iter().map(|(k, (ps, ks))| (k, group(&ps, &ks, mode))).collect::<BTreeMap<_, _>>()
    };
    Ok(MetricsReport {
        overall,
        confusion,
        tpr,
        f1,
        no_positives,
        per_subject: breakdown(&|p| Some(p.subject.clone())),
        per_activity: breakdown(&|p| p.activity.clone()),
        thr_bpm: thr,
        cl,
        mode,
    })
}

fn push_group(rows: &mut Vec<(String, String, String)>, scope: &str, g: &GroupMetrics) {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    rows.push(("n".into(), scope.into(), g.n.to_string()));
    rows.push(("kept".into(), scope.into(), g.kept.to_string()));
    rows.push(("mae".into(), scope.into(), opt(g.mae)));
    rows.push(("sd_ae".into(), scope.into(), opt(g.sd_ae)));
    if g.mean_nll.is_some() {
        rows.push(("mean_nll".into(), scope.into(), opt(g.mean_nll)));
    }
    rows.push(("retention_pct".into(), scope.into(), format!("{}", g.retention_pct)));
}

impl MetricsReport {
    /// `(metric, scope, value)` rows. Absent values are empty strings.
    pub fn rows(&self) -> Vec<(String, String, String)> {
        let mut rows = Vec::new();
        push_group(&mut rows, "all", &self.overall);
        if let Some(c) = self.confusion {
            for (name, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
                rows.push((name.into(), "all".into(), v.to_string()));
            }
        }
        if let (Some(tpr), Some(f1)) = (self.tpr, self.f1) {
            rows.push(("tpr".into(), "all".into(), format!("{tpr}")));
            rows.push(("f1".into(), "all".into(), format!("{f1}")));
            rows.push(("no_positives".into(), "all".into(), (self.no_positives as u8).to_string()));
        }
        rows.push(("thr_bpm".into(), "all".into(), format!("{}", self.thr_bpm)));
        rows.push(("cl".into(), "all".into(), format!("{}", self.cl)));
        for (s, g) in &self.per_subject {
            push_group(&mut rows, &format!("subject:{s}"), g);
        }
        for (a, g) in &self.per_activity {
            push_group(&mut rows, &format!("activity:{a}"), g);
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["metric", "scope", "value"]).map_err(|e| Error::csv(path, e))?;
        for (m, s, v) in self.rows() {
            w.write_record([m, s, v]).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Plain-text table: one column per subject with `MAE (SD)`, a retention
/// row for probabilistic reports, and the average over subjects.
pub fn render_table(reports: &[(&str, &MetricsReport)]) -> String {
    let fmt = |g: &GroupMetrics| match (g.mae, g.sd_ae) {
        (Some(m), Some(s)) => format!("{m:.2} ({s:.2})"),
        _ => "-".to_string(),
    };
    let mut subjects = BTreeSet::new();
    for (_, r) in reports {
        subjects.extend(r.per_subject.keys().cloned());
    }
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "");
    for s in &subjects {
        let _ = write!(out, "{s:>16}");
    }
    let _ = writeln!(out, "{:>16}", "Avg");
    for (name, r) in reports {
        let _ = write!(out, "{name:<14}");
        let mut maes = Vec::new();
        for s in &subjects {
            let cell = r.per_subject.get(s).map_or_else(|| "".to_string(), |g| {
                if let Some(m) = g.mae {
                    maes.push(m);
                }
                fmt(g)
            });
            let _ = write!(out, "{cell:>16}");
        }
        let avg = if maes.is_empty() { "-".to_string() } else { format!("{:.2}", maes.iter().sum::<f64>() / maes.len() as f64) };
        let _ = writeln!(out, "{avg:>16}");
        if r.mode == EvalMode::Probabilistic {
            let _ = write!(out, "{:<14}", "  retention %");
            let mut rets = Vec::new();
            for s in &subjects {
                let cell = r.per_subject.get(s).map_or_else(String::new, |g| {
                    rets.push(g.retention_pct);
                    format!("{:.2}", g.retention_pct)
                });
                let _ = write!(out, "{cell:>16}");
            }
            let avg = if rets.is_empty() { 0.0 } else { rets.iter().sum::<f64>() / rets.len() as f64 };
            let _ = writeln!(out, "{avg:>16.2}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: String,
}

/// One fold per subject, in input order.
pub fn loso_folds(sessions: &[SessionRecording]) -> Result<Vec<Fold>> {
    let ids: Vec<&str> = sessions.iter().map(|s| s.subject_id.as_str()).collect();
    loso_folds_for(&ids)
}

pub fn loso_folds_for(ids: &[&str]) -> Result<Vec<Fold>> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return Err(Error::invalid(format!("duplicate subject id `{id}`")));
        }
    }
    if ids.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 subjects for cross-validation, got {}", ids.len())));
    }
    Ok(ids
        .iter()
        .map(|test| Fold {
            train: ids.iter().filter(|s| *s != test).map(|s| s.to_string()).collect(),
            test: test.to_string(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(mu: f64, sigma: f64) -> HrEstimate {
        HrEstimate { mu_hr: mu, sigma_hr: sigma, frame_time: 0.0 }
    }

    fn pred(mu: f64, sigma: f64, y: f64, s: &str, a: Option<&str>) -> Prediction {
        Prediction { estimate: est(mu, sigma), truth: y, subject: s.into(), activity: a.map(str::to_string) }
    }

    #[test]
    fn trust_examples() {
        assert!(trust_probability(&est(0.0, 1e-3), 10.0) >= 1.0 - 1e-12);
        assert!((trust_probability(&est(0.0, 10.0), 10.0) - 0.682_689_492_137_086).abs() < 1e-9);
        assert!((trust_probability(&est(0.0, 1000.0), 10.0) - 0.00798).abs() < 1e-5);
        assert!(classify_trust(&est(0.0, 10.0), 10.0, 0.5).keep);
        let d = classify_trust(&est(0.0, 30.0), 10.0, 0.5);
        assert!(!d.keep && (d.trust_prob - 0.2611).abs() < 1e-4);
    }

    #[test]
    fn boundary_is_kept() {
        let e = est(0.0, 10.0);
        let p = trust_probability(&e, 10.0);
        assert!(classify_trust(&e, 10.0, p).keep);
    }

    #[test]
    fn two_sample_example() {
        let preds = vec![pred(70.0, 1.0, 70.0, "a", None), pred(90.0, 1000.0, 70.0, "a", None)];
        let r = evaluate(&preds, 10.0, 0.5, EvalMode::Probabilistic).unwrap();
        assert_eq!(r.overall.mae, Some(0.0));
        assert_eq!(r.overall.retention_pct, 50.0);
        assert_eq!(r.tpr, Some(1.0));
        assert_eq!(r.f1, Some(1.0));
        assert_eq!(r.confusion, Some(Confusion { tp: 1, fp: 0, tn: 1, fn_: 0 }));
    }

    #[test]
    fn all_confident_and_exact() {
        let preds: Vec<Prediction> = (0..5).map(|i| pred(60.0 + i as f64, 1e-3, 60.0 + i as f64, "a", None)).collect();
        let r = evaluate(&preds, 10.0, 0.5, EvalMode::Probabilistic).unwrap();
        assert_eq!(r.overall.retention_pct, 100.0);
        assert_eq!(r.overall.mae, Some(0.0));
        assert!(r.no_positives);
        assert_eq!(r.tpr, Some(1.0));
    }

    #[test]
    fn all_dropped_has_no_mae() {
        let preds = vec![pred(70.0, 500.0, 71.0, "a", Some("sit"))];
        let r = evaluate(&preds, 10.0, 0.5, EvalMode::Probabilistic).unwrap();
        assert_eq!(r.overall.mae, None);
        assert_eq!(r.overall.retention_pct, 0.0);
        assert!(r.overall.mean_nll.is_some());
        assert_eq!(r.per_activity["sit"].mae, None);
    }

    #[test]
    fn point_mode_keeps_everything() {
        let preds = vec![pred(70.0, 500.0, 71.0, "a", None), pred(70.0, 500.0, 90.0, "b", None)];
        let r = evaluate(&preds, 10.0, 0.5, EvalMode::Point).unwrap();
        assert_eq!(r.overall.retention_pct, 100.0);
        assert_eq!(r.overall.mean_nll, None);
        assert_eq!(r.tpr, None);
        assert_eq!(r.overall.mae, Some(10.5));
        assert!(!r.rows().iter().any(|(m, _, _)| m == "mean_nll" || m == "tpr"));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(evaluate(&[], 10.0, 0.5, EvalMode::Probabilistic).is_err());
    }

    #[test]
    fn breakdowns() {
        let preds = vec![
            pred(70.0, 1.0, 72.0, "s1", Some("walk")),
            pred(80.0, 1.0, 80.0, "s1", Some("sit")),
            pred(90.0, 1.0, 96.0, "s2", Some("walk")),
            pred(90.0, 1.0, 96.0, "s2", None),
        ];
        let r = evaluate(&preds, 10.0, 0.5, EvalMode::Probabilistic).unwrap();
        assert_eq!(r.per_subject["s1"].mae, Some(1.0));
        assert_eq!(r.per_subject["s2"].mae, Some(6.0));
        assert_eq!(r.per_activity["walk"].mae, Some(4.0));
        assert_eq!(r.per_activity["walk"].n, 2);
        assert_eq!(r.overall.n, 4);
        let t = render_table(&[("kid-ppg", &r)]);
        assert!(t.contains("1.00 (1.00)") && t.contains("retention"));
    }

    #[test]
    fn csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let preds = vec![pred(70.0, 1.0, 72.0, "s1", Some("walk"))];
        let r = evaluate(&preds, 10.0, 0.5, EvalMode::Probabilistic).unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("metric,scope,value\n"));
        assert!(text.contains("mae,all,2\n"));
        assert!(text.contains("mae,subject:s1,2\n"));
    }

    #[test]
    fn folds() {
        let ids: Vec<String> = (1..=15).map(|i| format!("S{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let f = loso_folds_for(&refs).unwrap();
        assert_eq!(f.len(), 15);
        let tests: BTreeSet<&str> = f.iter().map(|x| x.test.as_str()).collect();
        assert_eq!(tests.len(), 15);
        assert!(f.iter().all(|x| x.train.len() == 14 && !x.train.contains(&x.test)));
        let two = loso_folds_for(&["a", "b"]).unwrap();
        assert_eq!(two[0].train, vec!["b".to_string()]);
        assert!(loso_folds_for(&["a", "a"]).is_err());
        assert!(loso_folds_for(&["a"]).is_err());
    }
}
