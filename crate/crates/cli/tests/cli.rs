use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use takevla::datastore::load_dataset;

const TINY: &str = r#"
seed = 7
rounds = 1

[pretrain]
episodes = 6

[pretrain.sft]
epochs = 2
samples_per_epoch = 512

[collect]
episodes_per_round = 6

[sft]
epochs = 1
samples_per_epoch = 256

[rft]
epochs = 1
max_steps = 3

[eval]
seeds = [0]
"#;

fn takevla(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_takevla"))
        .current_dir(dir)
        .env_remove("TAKEVLA_CONFIG")
        .env_remove("TAKEVLA_SEED")
        .env_remove("TAKEVLA_KL")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn one_round_equals_the_stage_commands() {
    let dir = setup();
    let out = takevla(dir.path(), &["--config", "tiny.toml", "--out", "a", "round"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for stage in ["pretrain", "collect", "sft", "dream", "eval"] {
        let out = takevla(dir.path(), &["--config", "tiny.toml", "--out", "b", stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert!(x.1 == y.1, "{} differs", x.0);
    }
}

#[test]
fn rerunning_a_round_never_overwrites() {
    let dir = setup();
    assert!(takevla(dir.path(), &["--config", "tiny.toml", "--out", "a", "round"]).status.success());
    let before = files(&dir.path().join("a"));
    let again = takevla(dir.path(), &["--config", "tiny.toml", "--out", "a", "round"]);
    assert!(!again.status.success());
    assert_eq!(before, files(&dir.path().join("a")));
}

#[test]
fn exit_codes() {
    let dir = setup();
    assert_eq!(takevla(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(takevla(dir.path(), &["--config", "nope.toml", "config"]).status.code(), Some(1));
    assert_eq!(takevla(dir.path(), &["--rounds", "0", "config"]).status.code(), Some(1));
    let missing = takevla(dir.path(), &["--out", "empty", "sft"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("policy.ckpt"));
}

#[test]
fn flag_beats_env_beats_file() {
    let dir = setup();
    let get = |extra_env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_takevla"));
        cmd.current_dir(dir.path()).env("TAKEVLA_CONFIG", "tiny.toml").env_remove("TAKEVLA_SEED");
        if let Some(v) = extra_env {
            cmd.env("TAKEVLA_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        let out = cmd.arg("config").output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        text.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    assert_eq!(get(None, None), "seed = 7");
    assert_eq!(get(Some("11"), None), "seed = 11");
    assert_eq!(get(Some("11"), Some("13")), "seed = 13");
}

#[test]
fn ablation_flags_shape_the_dataset() {
    let dir = setup();
    let base = ["--config", "tiny.toml"];
    assert!(takevla(dir.path(), &[&base[..], &["--out", "p", "pretrain"]].concat()).status.success());
    let pretrain = dir.path().join("p/pretrain");
    let shared = format!("pretrain_dir = {:?}\n", pretrain.display().to_string());
    fs::write(dir.path().join("shared.toml"), shared + TINY).unwrap();

    let out = takevla(dir.path(), &["--config", "shared.toml", "--out", "nopre", "--no-pretakeover", "collect"]);
    assert!(out.status.success());
    let recs = load_dataset(&dir.path().join("nopre/round-1/dataset.bin")).unwrap();
    assert!(recs.iter().all(|r| r.mask == 0));

    let out = takevla(dir.path(), &["--config", "shared.toml", "--out", "notk", "--no-takeover-data", "collect"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn compare_prints_a_delta_table() {
    let dir = setup();
    assert!(takevla(dir.path(), &["--config", "tiny.toml", "--out", "a", "round"]).status.success());
    let out = takevla(dir.path(), &["compare", "a/round-1", "a/round-1/eval.json"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("DS") && text.contains("+0.000"));
    let via_eval = takevla(dir.path(), &["eval", "--compare", "a/round-1", "a/round-1"]);
    assert_eq!(via_eval.stdout, text.into_bytes());
}
