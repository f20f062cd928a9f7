use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctxseg_core::config::RunConfig;

const TINY: &str = r#"
seed = 3

[phantom]
extent = [8, 8, 8]
edema_radius = [1.5, 2.5]

[dataset]
cases = 4
validation = 1

[model.backbone]
channels = [2, 4, 8]

[train]
epochs = 1
"#;

fn ctxseg(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctxseg"));
    cmd.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("CTXSEG_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fail(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind}: ")), "{err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    s(&p).to_string()
}

#[test]
fn help_lists_exactly_the_config_keys() {
    let help = ok(&ctxseg(&["--help"], &[]));
    let flags: BTreeSet<String> = help
        .split_whitespace()
        .filter_map(|w| w.strip_prefix("--"))
        .filter(|w| !matches!(*w, "help" | "config"))
        .map(str::to_string)
        .collect();
    let keys: BTreeSet<String> = RunConfig::default().keys().into_iter().map(|(k, _)| k).collect();
    assert_eq!(flags, keys);
    for (k, v) in RunConfig::default().keys() {
        assert!(help.contains(&format!("[default: {v}]")), "{k}");
    }
    assert!(keys.contains("seed") && keys.contains("threads"));
}

#[test]
fn gen_writes_requested_cases_deterministically() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    for name in ["a", "b"] {
        ok(&ctxseg(&["gen", "--config", &cfg, "--out", s(&d.path().join(name))], &[]));
    }
    let manifest = fs::read_to_string(d.path().join("a/cases.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    for id in manifest.lines() {
        for f in fs::read_dir(d.path().join("a").join(id)).unwrap() {
            let f = f.unwrap().path();
            let twin = d.path().join("b").join(id).join(f.file_name().unwrap());
            assert_eq!(fs::read(&f).unwrap(), fs::read(twin).unwrap(), "{}", f.display());
        }
    }
}

#[test]
fn flags_beat_environment_beats_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let out = d.path().join("env");
    ok(&ctxseg(&["gen", "--config", &cfg, "--out", s(&out)], &[("CTXSEG_DATASET__CASES", "2")]));
    assert_eq!(fs::read_to_string(out.join("cases.txt")).unwrap().lines().count(), 2);
    let out = d.path().join("flag");
    ok(&ctxseg(
        &["gen", "--config", &cfg, "--dataset.cases", "1", "--out", s(&out)],
        &[("CTXSEG_DATASET__CASES", "2")],
    ));
    assert_eq!(fs::read_to_string(out.join("cases.txt")).unwrap().lines().count(), 1);
}

#[test]
fn eval_and_render_on_background_phantoms() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let data = d.path().join("data");
    ok(&ctxseg(&["gen", "--config", &cfg, "--phantom.tumors", "0", "--out", s(&data)], &[]));
    let csv = d.path().join("m.csv");
    ok(&ctxseg(&["eval", "--pred", s(&data), "--truth", s(&data), "--out", s(&csv)], &[]));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 3);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")));
    let img = d.path().join("s.ppm");
    ok(&ctxseg(&["render", "--input", s(&data.join("case_000")), "--axis", "2", "--slice", "3", "--out", s(&img)], &[]));
    let bytes = fs::read(&img).unwrap();
    let header = b"P6\n8 8\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 0));
}

#[test]
fn train_infer_eval_sweep() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let data = d.path().join("data");
    let manifest = data.join("cases.txt");
    ok(&ctxseg(&["gen", "--config", &cfg, "--out", s(&data)], &[]));
    let run = d.path().join("run");
    ok(&ctxseg(&["train", "--config", &cfg, "--data", s(&manifest), "--out", s(&run)], &[]));
    for f in ["config.toml", "train_log.jsonl", "summary.json", "best/checkpoint.json", "last/checkpoint.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let pred = d.path().join("pred");
    ok(&ctxseg(&["infer", "--checkpoint", s(&run.join("best")), "--input", s(&manifest), "--out", s(&pred)], &[]));
    ok(&ctxseg(&["render", "--input", s(&pred.join("case_002")), "--class", "0", "--slice", "0", "--out", s(&d.path().join("p.pgm"))], &[]));
    assert!(fs::read(d.path().join("p.pgm")).unwrap().starts_with(b"P5\n8 8\n255\n"));
    let csv = d.path().join("m.csv");
    ok(&ctxseg(&["eval", "--pred", s(&pred), "--truth", s(&data), "--out", s(&csv)], &[]));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 4 * 3);

    let sweep = d.path().join("sweep");
    let out = ok(&ctxseg(
        &["sweep", "--config", &cfg, "--sweep.iterations", "[1, 5]", "--data", s(&manifest), "--out", s(&sweep)],
        &[],
    ));
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(sweep.join("trajectories.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    fail(&ctxseg(&["gen"], &[]), 1, "usage");
    fail(&ctxseg(&["bogus"], &[]), 1, "usage");
    fail(&ctxseg(&["gen", "--out", s(d.path()), "--train.nope", "1"], &[]), 1, "usage");
    fail(&ctxseg(&["gen", "--out", s(d.path()), "--train.lr", "-1"], &[]), 1, "config");
    fail(&ctxseg(&["gen", "--out", s(d.path())], &[("CTXSEG_TRAIN__EPOCHS", "x")]), 1, "config");
    let missing = d.path().join("missing.txt");
    fail(&ctxseg(&["train", "--data", s(&missing), "--out", s(d.path())], &[]), 2, "io");
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    fail(&ctxseg(&["gen", "--config", s(&bad), "--out", s(d.path())], &[]), 1, "config");
    fs::create_dir(d.path().join("empty")).unwrap();
    let empty = d.path().join("empty");
    fail(&ctxseg(&["eval", "--pred", s(&empty), "--truth", s(&empty), "--out", s(&d.path().join("m.csv"))], &[]), 2, "input");
}

#[test]
fn diverging_training_exits_numeric() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    let data = d.path().join("data");
    ok(&ctxseg(&["gen", "--config", &cfg, "--out", s(&data)], &[]));
    let out = ctxseg(
        &["train", "--config", &cfg, "--train.lr", "1e300", "--train.epochs", "3", "--data", s(&data.join("cases.txt")), "--out", s(&d.path().join("run"))],
        &[],
    );
    fail(&out, 3, "numeric");
}
