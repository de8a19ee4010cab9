use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], runs_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgepure")).args(args).env("BRIDGEPURE_RUNS_DIR", runs_dir).output().expect("binary runs")
}

fn ok(args: &[&str], runs_dir: &Path) -> String {
    let out = bin(args, runs_dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY: &str = r#"{
  "name": "tiny",
  "seed": 4,
  "dataset": { "kind": "synthetic", "size": 12, "classes": 3 },
  "splits": { "protect": 30, "reference": 15, "test": 15 },
  "protection": { "kind": "CLASSWISE_LINF", "epsilon": "8/255" },
  "leakage": { "n": 10 },
  "bridge": { "steps": 10, "batch_size": 4, "architecture": { "kind": "mlp", "hidden": 16, "depth": 1 } },
  "sampler": { "steps": 4 },
  "eval": { "classifier": { "arch": { "kind": "linear" }, "epochs": 1 } }
}
"#;

#[test]
fn step_by_step_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s).display().to_string();
    let r = tmp.path();
    ok(&["gen-data", "--out", &d("clean"), "--size", "12", "--classes", "3", "--count", "24", "--seed", "1"], r);
    ok(&["gen-data", "--out", &d("ref"), "--size", "12", "--classes", "3", "--count", "12", "--seed", "2"], r);
    ok(&["protect", "--spec", "classwise-linf", "--epsilon", "8/255", "--in", &d("clean"), "--out", &d("prot")], r);
    ok(
        &[
            "harvest",
            "--spec",
            "classwise-linf",
            "--epsilon",
            "8/255",
            "--reference",
            &d("ref"),
            "--n",
            "8",
            "--out",
            &d("pairs"),
        ],
        r,
    );
    ok(&["train", "--pairs", &d("pairs"), "--out", &d("model.bpck"), "--steps", "10", "--batch-size", "4", "--hidden", "16"], r);
    for (out, seed) in [("p1", "1"), ("p2", "2")] {
        ok(&["purify", "--model", &d("model.bpck"), "--in", &d("prot"), "--out", &d(out), "--steps", "4", "--seed", seed], r);
    }
    let (p1, p2) = (tree(&tmp.path().join("p1")), tree(&tmp.path().join("p2")));
    assert!(!p1.is_empty());
    assert_eq!(p1, p2, "s = 0 purification must not depend on the seed");

    let stdout = ok(&["evaluate", "--reference", &d("clean"), "--candidate", &d("prot"), "--json", &d("fid.json")], r);
    assert!(stdout.contains("PSNR"));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("fid.json")).unwrap()).unwrap();
    assert!(v["fidelity"]["psnr"]["mean"].as_f64().unwrap() > 28.0);
}

#[test]
fn fraction_flags_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s).display().to_string();
    ok(&["gen-data", "--out", &d("clean"), "--size", "8", "--classes", "2", "--count", "4"], tmp.path());
    let bad =
        bin(&["protect", "--spec", "classwise-linf", "--epsilon", "8/0", "--in", &d("clean"), "--out", &d("x")], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let runs = tmp.path().join("runs");
    let stdout = ok(&["experiment", "--config", cfg.to_str().unwrap(), "--dry-run"], &runs);
    assert!(stdout.contains("pending") && stdout.contains("purify-"), "{stdout}");
    assert!(!runs.exists());
}

#[test]
fn bad_config_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, TINY.replace(r#""sampler": { "steps": 4 }"#, r#""sampler": { "steps": 4, "s": 3 }"#)).unwrap();
    let out = bin(&["experiment", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 9"), "{err}");

    fs::write(&cfg, TINY.replace(r#""seed": 4"#, r#""sede": 4"#)).unwrap();
    let out = bin(&["experiment", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn experiment_is_cached_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["experiment", "--config", cfg, "--out", a.to_str().unwrap(), "-q"], tmp.path());
    for f in ["config.json", "report.json", "stages.json", "plots/accuracy.svg"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(!a.join(".lock").exists());
    let first = fs::read(a.join("report.json")).unwrap();

    let again = ok(&["experiment", "--config", cfg, "--out", a.to_str().unwrap(), "--dry-run"], tmp.path());
    assert!(!again.contains("pending"), "{again}");
    ok(&["experiment", "--config", cfg, "--out", a.to_str().unwrap(), "-q"], tmp.path());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), first);

    ok(&["experiment", "--config", cfg, "--out", b.to_str().unwrap(), "-q"], tmp.path());
    assert_eq!(fs::read(b.join("report.json")).unwrap(), first);

    let summary = ok(&["report", "--run", a.to_str().unwrap()], tmp.path());
    assert!(summary.contains("best over grid"), "{summary}");
}

#[test]
fn default_run_dir_honours_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let runs = tmp.path().join("runs");
    let stdout = ok(&["experiment", "--config", cfg.to_str().unwrap(), "--dry-run"], &runs);
    assert!(stdout.contains(&runs.join("tiny-").display().to_string()), "{stdout}");
}

#[test]
fn failed_run_leaves_a_failure_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("missing.json");
    let missing = tmp.path().join("no-such-folder");
    let text = TINY.replace(
        r#"{ "kind": "synthetic", "size": 12, "classes": 3 }"#,
        &format!(r#"{{ "kind": "folder", "path": {:?}, "classes": 3 }}"#, missing.display().to_string()),
    );
    fs::write(&cfg, text).unwrap();
    let run = tmp.path().join("run");
    let out = bin(&["experiment", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "-q"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let failure: serde_json::Value = serde_json::from_slice(&fs::read(run.join("failure.json")).unwrap()).unwrap();
    assert!(failure["error"].as_str().is_some());
    assert!(!run.join("report.json").exists());
    assert!(!run.join(".lock").exists());
}
