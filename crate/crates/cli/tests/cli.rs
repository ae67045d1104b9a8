use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "variant = kid-ppg
adapt.epochs = 10
net.channels = 4,8
net.hidden = 8
train.epochs = 2
";

fn kidppg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kidppg")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = kidppg(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.txt"), SMALL).unwrap();
    dir
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn version_reports_format() {
    let dir = setup();
    let v = ok(&["--version"], dir.path());
    assert!(v.contains("format_version 1"), "{v}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(kidppg(&["synth", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(kidppg(&["nope"], dir.path()).status.code(), Some(2));
    assert_eq!(kidppg(&["synth", "--out", "x"], dir.path()).status.code(), Some(2));
}

#[test]
fn synth_train_infer_evaluate_round_trip() {
    let dir = setup();
    let d = dir.path();
    ok(&["synth", "--scenario", "clean", "--seed", "3", "--out", "a"], d);
    ok(&["synth", "--scenario", "clean", "--seed", "3", "--out", "b"], d);
    assert_eq!(snapshot(&d.join("a")).into_values().collect::<Vec<_>>(), snapshot(&d.join("b")).into_values().collect::<Vec<_>>());

    ok(&["windows", "--session", "a", "--out", "truth.csv"], d);
    ok(&["train", "--data", "a", "--config", "small.txt", "--out", "model"], d);
    for f in ["model.txt", "weights.f32", "config.txt", "run_log.txt", "loss_trace.csv", "augment.txt"] {
        assert!(d.join("model").join(f).is_file(), "missing {f}");
    }
    ok(&["infer", "--model", "model", "--session", "a", "--out", "p1.csv"], d);
    ok(&["infer", "--model", "model", "--session", "a", "--out", "p2.csv"], d);
    let p1 = std::fs::read_to_string(d.join("p1.csv")).unwrap();
    assert_eq!(p1, std::fs::read_to_string(d.join("p2.csv")).unwrap());
    assert!(p1.starts_with("t_s,mu_bpm,sigma_bpm,trust_prob,keep\n"));
    let table = ok(&["evaluate", "--pred", "p1.csv", "--truth", "truth.csv", "--out", "report.csv"], d);
    assert!(table.contains("retention"));
    let report = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,scope,value\n"));
    assert!(report.contains("\nn,all,57\n"), "{report}");
}

#[test]
fn evaluate_length_mismatch_names_files() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("pred.csv"), "t_s,mu_bpm,sigma_bpm,trust_prob,keep\n8,70,2,0.99,1\n").unwrap();
    std::fs::write(
        d.join("truth.csv"),
        "index,t_start_s,t_s,hr_bpm,activity,subject\n0,0,8,70,,S1\n1,2,10,71,,S1\n",
    )
    .unwrap();
    let out = kidppg(&["evaluate", "--pred", "pred.csv", "--truth", "truth.csv", "--out", "r.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pred.csv") && err.contains("truth.csv"), "{err}");
    assert!(err.contains("[evaluate]"), "{err}");
}

#[test]
fn failures_name_the_stage() {
    let dir = setup();
    let d = dir.path();
    ok(&["synth", "--scenario", "clean", "--out", "a"], d);
    let out = kidppg(&["train-filter", "--session", "a", "--activity", "swimming", "--out", "f"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[adapt]"));
    let out = kidppg(&["windows", "--session", "missing", "--out", "t.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[windows]"));
}

#[test]
fn filter_clean_augment_train_chain() {
    let dir = setup();
    let d = dir.path();
    ok(&["synth", "--scenario", "ma_offband", "--seed", "2", "--out", "s"], d);
    let before = snapshot(&d.join("s"));
    ok(&["train-filter", "--session", "s", "--config", "small.txt", "--out", "filters"], d);
    assert!(d.join("filters/ma_offband/filter.txt").is_file());
    ok(&["train-filter", "--session", "s", "--activity", "ma_offband", "--config", "small.txt", "--out", "one"], d);
    assert_eq!(
        std::fs::read(d.join("one/layer1.f32")).unwrap(),
        std::fs::read(d.join("filters/ma_offband/layer1.f32")).unwrap()
    );
    ok(&["clean", "--session", "s", "--filter", "filters", "--out", "c"], d);
    ok(&["clean", "--session", "s", "--filter", "one", "--out", "c1"], d);
    assert_eq!(std::fs::read(d.join("c/ppg.f32")).unwrap(), std::fs::read(d.join("c1/ppg.f32")).unwrap());
    assert_eq!(snapshot(&d.join("s")), before);

    ok(&["augment", "--in", "c", "--high-hr", "--seed", "4", "--config", "small.txt", "--out", "cache"], d);
    let header = std::fs::read_to_string(d.join("cache/cache.txt")).unwrap();
    assert!(header.contains("count.adversarial = ") && header.contains("count.high_hr = "), "{header}");
    ok(&["train", "--cache", "cache", "--config", "small.txt", "--out", "m"], d);
    ok(&["infer", "--model", "m", "--session", "c", "--no-adapt", "--out", "p.csv"], d);
    assert_eq!(std::fs::read_to_string(d.join("p.csv")).unwrap().lines().count(), 58);
}

#[test]
fn loso_emits_fold_reports_and_aggregate() {
    let dir = setup();
    let d = dir.path();
    ok(&["synth", "--suite", "--seed", "1", "--out", "suite"], d);
    ok(&["loso", "--data", "suite", "--config", "small.txt", "--seed", "5", "--jobs", "2", "--out", "par"], d);
    for s in ["S1", "S2", "S3", "S4"] {
        for f in ["report.csv", "predictions.csv", "truth.csv", "run_log.txt", "loss_trace.csv"] {
            assert!(d.join("par").join(s).join(f).is_file(), "{s}/{f}");
        }
    }
    assert!(d.join("par/report.csv").is_file());
    let table = std::fs::read_to_string(d.join("par/table.txt")).unwrap();
    assert!(table.contains("S4") && table.contains("Avg"), "{table}");

    ok(&["loso", "--data", "suite", "--config", "small.txt", "--seed", "5", "--out", "seq"], d);
    for f in ["report.csv", "predictions.csv", "truth.csv", "S3/predictions.csv"] {
        assert_eq!(std::fs::read(d.join("par").join(f)).unwrap(), std::fs::read(d.join("seq").join(f)).unwrap(), "{f}");
    }

    ok(&["report", "--run", "par", "--out", "rep"], d);
    for f in ["table.txt", "par_windows.csv", "par_retention.csv", "par_report.csv"] {
        assert!(d.join("rep").join(f).is_file(), "{f}");
    }
}
