use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attrcloak"));
    c.env_remove("ATTRCLOAK_SEED");
    c
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/smoke.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn overlap_exits_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = run(&["gen-data", "--out", &format!("{out}/data"), "--subjects", "3", "--images-per-subject", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["train-attr", "--data", &format!("{out}/data"), "--out", &format!("{out}/attr"), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "attack",
        "--data",
        &format!("{out}/data"),
        "--model",
        &format!("{out}/attr"),
        "--out",
        &format!("{out}/a"),
        "--suppress",
        "gender",
        "--preserve",
        "gender",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(line["error"]["kind"], "usage");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["attack", "--out", "x", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("attr");
    let o = run(&["train-attr", "--data", "/nonexistent/data", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let line: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert!(line["error"]["message"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn resolved_config_reflects_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let o = bin()
        .args(["gen-data", "--out", out.to_str().unwrap(), "--subjects", "2", "--images-per-subject", "2"])
        .env("ATTRCLOAK_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value = serde_json::from_slice(&read(&out.join("config.resolved.json"))).unwrap();
    assert_eq!(resolved["seed"], 99);
    assert_eq!(resolved["data"]["subjects"], 2);
    assert_eq!(resolved["data"]["seed"], 99);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn smoke_experiment_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&[
            "run-experiment",
            "--config",
            smoke_config().to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let listing = files(&a);
    assert_eq!(listing, files(&b));
    for f in ["config.resolved.json", "report/report.json", "attack/results.json", "data/manifest.json"] {
        assert!(listing.contains(&PathBuf::from(f)), "missing {f}");
    }
    for f in &listing {
        assert!(read(&a.join(f)) == read(&b.join(f)), "{} differs", f.display());
    }

    // A second run in place reuses every stage and rewrites the same bytes.
    let before = read(&a.join("report/report.json"));
    let o = run(&["run-experiment", "--config", smoke_config().to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(before, read(&a.join("report/report.json")));
}

#[test]
fn report_command_renders_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let o = run(&[
        "run-experiment",
        "--config",
        smoke_config().to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--iters",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value = serde_json::from_slice(&read(&run_dir.join("config.resolved.json"))).unwrap();
    assert_eq!(resolved["attack"]["iterations"], 5);

    let rendered = tmp.path().join("rendered");
    let o = run(&[
        "report",
        "--from",
        run_dir.join("report").to_str().unwrap(),
        "--out",
        rendered.to_str().unwrap(),
        "--no-svg",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listing = files(&rendered);
    assert!(listing.iter().any(|p| p.extension().is_some_and(|e| e == "csv")));
    assert!(!listing.iter().any(|p| p.extension().is_some_and(|e| e == "svg")));
    let cmc = String::from_utf8(read(&rendered.join("cmc_white_box_original.csv"))).unwrap();
    assert!(cmc.starts_with("rank,rate\n"));
}
