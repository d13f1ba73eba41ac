//! End-to-end tests of the `easycore` binary: exit codes, manifests, flag
//! overrides, and the analyze dispatch.

use std::path::Path;
use std::process::{Command, Output};

fn easycore(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_easycore"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
seed = 21
out_dir = "out"

[model]
input_dim = 2
hidden_dim = 8
num_blocks = 1
num_classes = 2

[train]
mode = "standard"
epochs = 6
batch_size = 128
initial_lr = 0.005
momentum = 0.9
weight_decay = 5e-4
record_aign = true
aign_trajectory = true
score_split = "train"

[train.scheduler]
kind = "multistep"
milestones = [5]
gamma = 0.1

[attack]
epsilon = 1.0
steps = 3
split = "test"

[select]
method = "easycore"
fraction = 0.5
"#,
    )
    .expect("config written");
    path
}

#[test]
fn full_cli_pipeline_succeeds_with_manifests() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());

    let score = easycore(
        &["score", "--config", "exp.toml", "--out-dir", "score", "--verify"],
        dir.path(),
    );
    assert!(
        score.status.success(),
        "score failed: {}",
        String::from_utf8_lossy(&score.stderr)
    );
    assert!(dir.path().join("score/scores.csv").exists());
    let stdout = String::from_utf8_lossy(&score.stdout);
    assert!(stdout.contains("verify: manifest digests match"), "{stdout}");

    let select = easycore(
        &[
            "select",
            "--config",
            "exp.toml",
            "--out-dir",
            "select",
            "--scores",
            "score/scores.csv",
        ],
        dir.path(),
    );
    assert!(select.status.success());
    let selection = std::fs::read_to_string(dir.path().join("select/selection.csv")).unwrap();
    assert!(selection.starts_with("rank,id\n"));
    assert_eq!(selection.lines().count(), 601); // header + floor(0.5 * 1200)

    let train = easycore(
        &[
            "train",
            "--config",
            "exp.toml",
            "--out-dir",
            "train",
            "--selection",
            "select/selection.csv",
        ],
        dir.path(),
    );
    assert!(train.status.success());
    assert!(dir.path().join("train/model.ezc").exists());

    let attack = easycore(
        &[
            "attack",
            "--config",
            "exp.toml",
            "--out-dir",
            "attack",
            "--checkpoint",
            "train/model.ezc",
        ],
        dir.path(),
    );
    assert!(attack.status.success());
    let summary = std::fs::read_to_string(dir.path().join("attack/summary.csv")).unwrap();
    assert!(summary.starts_with("clean_accuracy,adversarial_accuracy\n"));

    for (kind, extra) in [
        ("boundary", vec!["--checkpoint", "train/model.ezc", "--raster", "24"]),
        ("kappa", vec!["--checkpoint", "train/model.ezc"]),
        (
            "curve",
            vec![
                "--scores",
                "score/scores.csv",
                "--attack-csv",
                "attack2/attack.csv",
                "--bins",
                "5",
            ],
        ),
        ("lemma1", vec!["--checkpoint", "train/model.ezc", "--lemma1-count", "3"]),
        ("histogram", vec!["--scores", "score/scores.csv", "--svg"]),
        ("project2d", vec!["--checkpoint", "train/model.ezc"]),
    ] {
        if kind == "curve" {
            // The curve joins train-split scores with a train-split attack.
            let out = easycore(
                &[
                    "attack",
                    "--config",
                    "exp.toml",
                    "--out-dir",
                    "attack2",
                    "--checkpoint",
                    "train/model.ezc",
                ],
                dir.path(),
            );
            // Attack the train split so ids match the train score file.
            assert!(out.status.success());
            let config = dir.path().join("exp_train_split.toml");
            let text = std::fs::read_to_string(dir.path().join("exp.toml"))
                .unwrap()
                .replace("split = \"test\"", "split = \"train\"");
            std::fs::write(&config, text).unwrap();
            let out = easycore(
                &[
                    "attack",
                    "--config",
                    "exp_train_split.toml",
                    "--out-dir",
                    "attack2",
                    "--checkpoint",
                    "train/model.ezc",
                ],
                dir.path(),
            );
            assert!(out.status.success());
        }
        let mut args = vec![
            "analyze",
            "--config",
            "exp.toml",
            "--out-dir",
            "analysis",
            "--kind",
            kind,
        ];
        args.extend(extra.iter());
        let out = easycore(&args, dir.path());
        assert!(
            out.status.success(),
            "analyze {kind} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(dir.path().join("analysis/boundary.csv").exists());
    assert!(dir.path().join("analysis/kappa.csv").exists());
    assert!(dir.path().join("analysis/curve.csv").exists());
    assert!(dir.path().join("analysis/lemma1.csv").exists());
    assert!(dir.path().join("analysis/histogram.csv").exists());
    assert!(dir.path().join("analysis/histogram.svg").exists());
    assert!(dir.path().join("analysis/projection.csv").exists());
    assert!(dir.path().join("analysis/centroids.csv").exists());
}

#[test]
fn validation_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\n[model]\nhidden_dim = 0\n").unwrap();
    let out = easycore(&["score", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("hidden_dim"), "{stderr}");

    // Unknown flags are usage errors, also exit code 2.
    let out = easycore(&["score", "--config", "bad.toml", "--nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = easycore(
        &[
            "attack",
            "--config",
            "exp.toml",
            "--checkpoint",
            "missing.ezc",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn missing_attack_epsilon_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let text = std::fs::read_to_string(dir.path().join("exp.toml"))
        .unwrap()
        .replace("epsilon = 1.0", "");
    std::fs::write(dir.path().join("exp.toml"), text).unwrap();
    let train = easycore(&["train", "--config", "exp.toml", "--out-dir", "t"], dir.path());
    assert!(train.status.success());
    let out = easycore(
        &["attack", "--config", "exp.toml", "--checkpoint", "t/model.ezc"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn seed_override_changes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    for (seed, out_dir) in [("21", "a"), ("21", "b"), ("22", "c")] {
        let out = easycore(
            &[
                "score", "--config", "exp.toml", "--out-dir", out_dir, "--seed", seed,
                "--epochs", "2",
            ],
            dir.path(),
        );
        assert!(out.status.success());
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("scores.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn stale_upstream_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = easycore(
        &["score", "--config", "exp.toml", "--out-dir", "s", "--epochs", "2"],
        dir.path(),
    );
    assert!(out.status.success());
    // Tamper with the scores after the manifest recorded them.
    let scores = dir.path().join("s/scores.csv");
    let mut text = std::fs::read_to_string(&scores).unwrap();
    text.push_str("999,0,1.0,1.0\n");
    std::fs::write(&scores, text).unwrap();
    let out = easycore(
        &[
            "select",
            "--config",
            "exp.toml",
            "--out-dir",
            "sel",
            "--scores",
            "s/scores.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stale"), "{stderr}");
}
