use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 9] = [
    "prepare",
    "pretrain",
    "train-baseline",
    "train-expert",
    "filter",
    "evaluate",
    "trace",
    "export-dashboard",
    "grad-check",
];

/// A small architecture so the pipeline finishes in seconds.
const SMALL: &str = r#"{"d_model": 16, "num_heads": 2, "codebook_size": 16, "ffn_hidden": 32, "epochs": 1}"#;

fn intuition(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intuition"))
        .current_dir(dir)
        .env_remove("INTUITION_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = intuition(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn header(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().next().unwrap_or_default().to_string()
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("small.json"), SMALL).unwrap();
    let cfg = ["--config", "small.json"];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(&cfg).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["prepare", "--samples", "120"]);
    run(&["pretrain"]);
    let baseline: serde_json::Value = serde_json::from_str(&run(&["train-baseline"])).unwrap();
    assert_eq!(baseline["phase"], 1);
    assert_eq!(baseline["epoch_accuracy"].as_array().unwrap().len(), 2);
    let summary: serde_json::Value = serde_json::from_str(&run(&["filter"])).unwrap();
    assert_eq!(summary["considered"], 108);
    run(&["train-expert"]);
    run(&["export-dashboard"]);
}

#[test]
fn every_subcommand_help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let help = ok(dir.path(), &[sub, "--help"]);
        // Join wrapped descriptions onto their flag line.
        let mut entries: Vec<String> = Vec::new();
        for line in help.lines() {
            let t = line.trim_start();
            if t.starts_with("--") || t.starts_with("-h") {
                entries.push(t.to_string());
            } else if let Some(last) = entries.last_mut().filter(|_| !t.is_empty()) {
                last.push(' ');
                last.push_str(t);
            }
        }
        for entry in entries.iter().filter(|e| e.starts_with("--")) {
            let takes_value = entry.split_whitespace().nth(1).is_some_and(|w| w.starts_with('<'));
            let optional = ["--config", "--text", "--data"].iter().any(|f| entry.starts_with(f));
            assert!(
                !takes_value || optional || entry.contains("[default:"),
                "{sub}: no default shown in {entry:?}"
            );
        }
        assert!(help.contains("--seed") && help.contains("INTUITION_SEED"), "{sub}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(intuition(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(intuition(dir.path(), &["filter", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(intuition(dir.path(), &["evaluate", "--phase", "7"]).status.code(), Some(2));
    let missing = intuition(dir.path(), &["filter", "--workdir", "absent"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error: cannot access"));
}

#[test]
fn seed_precedence_is_default_file_env_flag() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"seed": 7, "workdir": "w"}"#).unwrap();
    let base = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_intuition"));
        cmd.current_dir(dir.path()).env_remove("INTUITION_SEED").args(extra);
        if let Some(v) = env {
            cmd.env("INTUITION_SEED", v);
        }
        header(&cmd.output().unwrap())
    };
    assert!(base(&["filter"], None).contains("seed 42 | workdir run"));
    assert!(base(&["filter", "--config", "c.json"], None).contains("seed 7 | workdir w"));
    assert!(base(&["filter", "--config", "c.json"], Some("9")).contains("seed 9 | workdir w"));
    assert!(base(&["filter", "--config", "c.json", "--seed", "11"], Some("9")).contains("seed 11"));

    std::fs::write(dir.path().join("bad.json"), r#"{"sede": 7}"#).unwrap();
    assert_eq!(intuition(dir.path(), &["filter", "--config", "bad.json"]).status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["grad-check"])).unwrap();
    assert!(report["primitives"].as_array().unwrap().len() >= 20);
    assert!(report["model"]["checked"].as_u64().unwrap() > 0);
}

#[test]
fn pipeline_end_to_end_and_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(fb[name] == *bytes, "{name} differs between runs");
    }
    for name in [
        "experience_db_generated.json",
        "model_config.json",
        "purity_report.json",
        "reward_distribution.csv",
        "gate_distribution.csv",
        "symbol_label_distribution.csv",
    ] {
        assert!(fa.contains_key(&format!("run/dashboard/{name}")), "dashboard lacks {name}");
    }

    let dir = a.path();
    let eval: serde_json::Value = serde_json::from_str(&ok(
        dir,
        &["evaluate", "--config", "small.json", "--theta", "0.7", "--sample-size", "5"],
    ))
    .unwrap();
    assert_eq!(eval["n"], 5);
    assert_eq!(eval["theta"], 0.7);

    let text = ok(dir, &["trace", "--text", "the team won the final match"]);
    for step in 1..=5 {
        assert!(text.contains(&format!("[Step {step}: ")), "step {step} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&ok(dir, &["trace", "--json", "--replay", "--text", "stocks fell"])).unwrap();
    assert_eq!(json["replayed"], true);
    assert_eq!(json["thought_chain"].as_array().unwrap().len(), 2);
}
