use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seeds = [3]
variants = ["baseline", "ari-all"]

[model]
layers = 1
hidden = 8
heads = 2
ffn_hidden = 16
max_len = 32

[train]
steps = 6
batch_size = 8
eval_interval = 3

[data]
classes = 2
shots = 4
test_per_class = 4

[retrieval]
k = 2

[sweep]
axis = "k"
values = ["1", "2"]

[flops]
k_values = [0, 1, 4]
"#;

fn refusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(dir: &Path) -> String {
    let config = dir.join("tiny.conf");
    fs::write(&config, TINY).unwrap();
    config.to_str().unwrap().to_owned()
}

fn ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn every_verb_succeeds_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for verb in [
        "gen-task",
        "build-store",
        "train",
        "eval",
        "search",
        "flops-report",
        "sweep",
    ] {
        let o = refusion(&[verb, "--config", &config, "--out", out]);
        ok(&o);
    }
    let root = Path::new(out);
    for file in [
        "config.conf",
        "results.json",
        "results.csv",
        "sweep.csv",
        "flops_curve.csv",
        "eval.json",
    ] {
        assert!(root.join(file).is_file(), "missing {file}");
    }
    let seed = root.join("ari-all").join("seed-3");
    for file in ["metrics_log.jsonl", "metrics.json", "arch.txt", "checkpoint.rfck"] {
        assert!(seed.join(file).is_file(), "missing {}", seed.join(file).display());
    }
}

#[test]
fn overrides_replace_seed_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = dir.path().join("run");
    let o = refusion(&[
        "train",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--mode",
        "concat",
        "--k",
        "1",
    ]);
    ok(&o);
    let echo = fs::read_to_string(out.join("config.conf")).unwrap();
    assert!(echo.contains("seeds = [9]"), "{echo}");
    assert!(echo.contains("retrieval.k = 1"), "{echo}");
    assert!(out.join("concat").join("seed-9").is_dir());
    assert!(!out.join("baseline").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "train.steps = \"many\"\n").unwrap();
    assert_eq!(
        refusion(&["train", "--config", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );

    fs::write(&bad, "data.classes = 1\n").unwrap();
    assert_eq!(
        refusion(&["gen-task", "--config", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );

    let missing = dir.path().join("absent.conf");
    assert_eq!(
        refusion(&["search", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn missing_seed_checkpoint_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    ok(&refusion(&[
        "train", "--config", &config, "--out", out, "--mode", "baseline",
    ]));

    let two_seeds = TINY.replace("seeds = [3]", "seeds = [3, 4]");
    let config2 = dir.path().join("two.conf");
    fs::write(&config2, two_seeds).unwrap();
    let o = refusion(&[
        "eval",
        "--config",
        config2.to_str().unwrap(),
        "--out",
        out,
        "--mode",
        "baseline",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stdout));
}
