use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reppath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reppath")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    simulate_n(dir, "12", extra)
}

fn simulate_n(dir: &Path, requests: &str, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--workload", "mixed", "--requests", requests, "--out", out];
    args.extend_from_slice(extra);
    reppath(&args)
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(simulate(&a, &["--seed", "4"]).status.success());
    assert!(simulate(&b, &["--seed", "4"]).status.success());
    assert!(simulate(&c, &["--seed", "5"]).status.success());
    for f in ["trace.reptrace", "truth.txt", "manifest.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs for the same seed");
    }
    assert_ne!(fs::read(a.join("trace.reptrace")).unwrap(), fs::read(c.join("trace.reptrace")).unwrap());
}

#[test]
fn bad_input_exits_with_validation_status() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.toml");
    fs::write(&spec, "name = \"x\"\ncomponents = []\n").unwrap();
    let o = reppath(&["simulate", "--workload", spec.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = simulate(tmp.path(), &["--fault", "crash:nobody:3"]);
    assert_eq!(o.status.code(), Some(2));

    let o = reppath(&["link", "--trace", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_detect_clean_and_faulty() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s);
    assert!(simulate_n(&p("train"), "60", &["--seed", "1"]).status.success());
    let o = reppath(&[
        "train",
        "--trace",
        p("train/trace.reptrace").to_str().unwrap(),
        "--variant",
        "FSA-10",
        "--out",
        p("models").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p("models/lookup.full.fsa").exists());
    assert!(p("models/batch.core.fsa").exists());

    let models = p("models");
    let detect = |trace: &Path| reppath(&["detect", "--fsa-dir", models.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);

    assert!(simulate(&p("clean"), &["--seed", "2"]).status.success());
    let o = detect(&p("clean/trace.reptrace"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    assert!(simulate(&p("bad"), &["--seed", "2", "--fault", "crash:store:4"]).status.success());
    let o = detect(&p("bad/trace.reptrace"));
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("functional_"), "{}", stdout(&o));
}

#[test]
fn link_and_overhead_report() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(simulate(tmp.path(), &[]).status.success());
    let trace = tmp.path().join("trace.reptrace");
    let o = reppath(&["link", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!stdout(&o).is_empty());
    let o = reppath(&["overhead", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("frontend"), "{text}");
    assert!(text.contains('%'), "{text}");
}

#[test]
fn evaluate_without_faulty_runs_has_no_recall() {
    let o = reppath(&[
        "evaluate",
        "--workload",
        "mixed",
        "--train-runs",
        "3",
        "--clean-runs",
        "2",
        "--faulty-runs",
        "0",
        "--variants",
        "eFSA,FSA-3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("FSA-3"), "{text}");
    assert!(text.contains("n/a"), "{text}");
}
