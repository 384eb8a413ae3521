use std::path::Path;
use std::process::{Command, Output};

fn makd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_makd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = makd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
seed = 7

[synthetic]
num_classes = 4
num_attributes = 3
feature_dim = 6
train_per_class = 8
test_per_class = 5

[questions]
candidates = 12
select = 3

[model]
hidden_dims = [8]

[train]
epochs = 3
lr_milestones = [2]
batch_size = 8
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bench.toml"), SMALL).unwrap();
    dir
}

#[test]
fn synth_writes_dataset_and_config() {
    let dir = setup();
    let p = dir.path();
    let stdout = ok(p, &["synth", "--config", "bench.toml", "--seed", "7", "--out", "data"]);
    assert!(stdout.contains("52 images of 4 classes"), "{stdout}");
    for f in ["manifest.json", "features.bin", "config.toml"] {
        assert!(p.join("data").join(f).exists(), "{f}");
    }
    let config = std::fs::read_to_string(p.join("data/config.toml")).unwrap();
    assert!(config.starts_with("# digest "));
    assert!(config.contains("seed = 7"));
}

#[test]
fn pipeline_train_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["synth", "--config", "bench.toml", "--out", "data"]);
    ok(
        p,
        &[
            "gen-questions",
            "--config",
            "bench.toml",
            "--data",
            "data",
            "--out",
            "q/all.txt",
        ],
    );
    ok(
        p,
        &[
            "select",
            "--config",
            "bench.toml",
            "--questions",
            "q/all.txt",
            "--out",
            "q/top.txt",
        ],
    );
    ok(
        p,
        &[
            "oracle-annotate",
            "--config",
            "bench.toml",
            "--data",
            "data",
            "--questions",
            "q/top.txt",
            "--store",
            "store.json",
        ],
    );
    assert!(p.join("store.json.config.toml").exists());
    for run in ["a", "b"] {
        ok(
            p,
            &[
                "train",
                "--config",
                "bench.toml",
                "--data",
                "data",
                "--store",
                "store.json",
                "--out",
                run,
            ],
        );
    }
    let a = std::fs::read(p.join("a/model.ckpt")).unwrap();
    let b = std::fs::read(p.join("b/model.ckpt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(p.join("a/epochs.tsv")).unwrap(),
        std::fs::read(p.join("b/epochs.tsv")).unwrap()
    );
    assert_eq!(
        std::fs::read(p.join("a/config.toml")).unwrap(),
        std::fs::read(p.join("b/config.toml")).unwrap()
    );

    ok(
        p,
        &[
            "train",
            "--config",
            "bench.toml",
            "--data",
            "data",
            "--alpha",
            "0",
            "--out",
            "base",
        ],
    );
    let eval = ok(
        p,
        &[
            "eval",
            "--data",
            "data",
            "--checkpoint",
            "a/model.ckpt",
            "--store",
            "store.json",
        ],
    );
    assert!(eval.starts_with("metric\tvalue\naccuracy\t"));
    assert!(eval.contains("aspect_mad\t"));
    ok(
        p,
        &[
            "export",
            "--data",
            "data",
            "--checkpoint",
            "a/model.ckpt",
            "--store",
            "store.json",
            "--out",
            "export.tsv",
        ],
    );
    let export = std::fs::read_to_string(p.join("export.tsv")).unwrap();
    assert_eq!(export.lines().count(), 1 + 4 * 5 * 3);
}

#[test]
fn missing_store_is_a_runtime_error() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["synth", "--config", "bench.toml", "--out", "data"]);
    let out = makd(p, &["train", "--config", "bench.toml", "--data", "data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--store"));
}

#[test]
fn ablate_fraction_axis_writes_gap_table() {
    let dir = setup();
    let p = dir.path();
    ok(
        p,
        &[
            "ablate",
            "--config",
            "bench.toml",
            "--set",
            "plan.defaults.q=3",
            "--axis",
            "fraction=0.4,0.6,0.8,1.0",
            "--seeds",
            "0,1",
            "--out",
            "abl",
        ],
    );
    let table = std::fs::read_to_string(p.join("abl/fraction_gap.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "fraction\talpha\tq\tbase\tours\tgap");
    assert_eq!(lines.len(), 5);
    assert!(p.join("abl/config.toml").exists());
    let summary = std::fs::read(p.join("abl/summary.tsv")).unwrap();

    ok(
        p,
        &[
            "ablate",
            "--config",
            "bench.toml",
            "--set",
            "plan.defaults.q=3",
            "--axis",
            "fraction=0.4,0.6,0.8,1.0",
            "--seeds",
            "0,1",
            "--out",
            "abl2",
        ],
    );
    assert_eq!(summary, std::fs::read(p.join("abl2/summary.tsv")).unwrap());
}

#[test]
fn ablate_exit_status_reflects_failures() {
    let dir = setup();
    let p = dir.path();
    let out = makd(
        p,
        &[
            "ablate",
            "--config",
            "bench.toml",
            "--set",
            "plan.defaults.q=3",
            "--axis",
            "targets=endpoint",
            "--seeds",
            "0",
            "--out",
            "abl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(p.join("abl/runs.tsv").exists());
}

#[test]
fn usage_errors() {
    let dir = setup();
    for args in [&["bogus"][..], &["train", "--nope"], &["synth"]] {
        let out = makd(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let help = ok(dir.path(), &["train", "--help"]);
    for flag in [
        "--data", "--store", "--out", "--alpha", "--epochs", "--config", "--set", "--seed",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
}
