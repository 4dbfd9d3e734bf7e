use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn visionaid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visionaid")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

/// A tiny two-model run over 32 synthetic images: warm-up 6 steps, then one
/// model every 4 steps, snapshots every 4 steps.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let data = dir.join("data.vafd");
    if !data.exists() {
        ok(&visionaid(&["synth-data", "--out", data.to_str().unwrap(), "--n", "32", "--seed", "5"]));
    }
    let text = format!(
        r#"
[data]
path = "data.vafd"

[generator]
latent_dim = 8
base_channels = 8

[discriminator]
base_channels = 4

[bank]
head_width = 8

[selection]
k_max = 2
max_samples = 32
epochs = 20

[schedule]
warmup_steps = 6
intervals = [4, 4]

[optimizer]
batch_size = 4

[metrics]
every = 4
n_gen = 32
kid = {{ subset_size = 16, n_subsets = 4 }}
divergence_factor = 1e9

[run]
seed = 9
log_every = 1
out_dir = "run"
{extra}
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_with_usage() {
    let out = visionaid(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("k_max = 2", "k_max = -1");
    std::fs::write(&cfg, text).unwrap();
    let out = visionaid(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("selection.k_max"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn rank_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let report = tmp.path().join("ranking.jsonl");
    ok(&visionaid(&["rank", "--config", cfg.to_str().unwrap(), "--out", report.to_str().unwrap()]));
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&report).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // four candidates; the metric network is never ranked
    assert_eq!(lines.len(), 4);
    for l in &lines {
        assert_ne!(l["model_id"], "fid_metric");
        for key in ["val_accuracy", "train_accuracy", "val_objective", "val_accuracy_std"] {
            assert!(l[key].is_number(), "{key} missing in {l}");
        }
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dst = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dst);
        } else {
            std::fs::copy(entry.path(), dst).unwrap();
        }
    }
}

#[test]
fn interrupted_run_resumes_without_duplicate_events() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    ok(&visionaid(&["train", "--config", cfg.to_str().unwrap()]));
    let full = tmp.path().join("run");
    let events = std::fs::read(full.join("events.jsonl")).unwrap();
    let metrics = std::fs::read(full.join("metrics.jsonl")).unwrap();

    // fake an interruption after step 8: later checkpoints never written and a
    // half-written event at the end of the log
    let cut = tmp.path().join("cut");
    copy_dir(&full, &cut);
    for later in ["step_00000012", "step_00000014"] {
        std::fs::remove_dir_all(cut.join("checkpoints").join(later)).unwrap();
    }
    let text = String::from_utf8(events.clone()).unwrap();
    let keep = text.find("{\"step\":10,").unwrap();
    std::fs::write(cut.join("events.jsonl"), format!("{}{{\"step\":10,\"ki", &text[..keep])).unwrap();
    std::fs::write(cut.join("metrics.jsonl"), "").unwrap();

    let ckpt = cut.join("checkpoints").join("step_00000008");
    ok(&visionaid(&["train", "--config", cfg.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]));
    assert_eq!(std::fs::read(cut.join("events.jsonl")).unwrap(), events);
    assert_eq!(std::fs::read(cut.join("metrics.jsonl")).unwrap(), metrics);
    assert!(!cut.join(".lock").exists());

    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "add_model").count(), 2);
    assert_eq!(kinds.last().map(String::as_str), Some("run_end"));
}

#[test]
fn locked_run_directory_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    std::fs::create_dir_all(tmp.path().join("run")).unwrap();
    std::fs::write(tmp.path().join("run/.lock"), "1").unwrap();
    let out = visionaid(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn eval_and_feature_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    ok(&visionaid(&["train", "--config", cfg.to_str().unwrap()]));
    let ckpt = tmp.path().join("run/checkpoints/step_00000004");
    let out = visionaid(&["eval", "--ckpt", ckpt.to_str().unwrap()]);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["step"], 4);
    assert!(report["fid"].as_f64().unwrap() >= 0.0);

    let feats = tmp.path().join("feats.vafd");
    let data = tmp.path().join("data.vafd");
    ok(&visionaid(&[
        "dump-features",
        "--model",
        "pix_pool",
        "--images",
        data.to_str().unwrap(),
        "--out",
        feats.to_str().unwrap(),
    ]));
    let bytes = std::fs::read(&feats).unwrap();
    assert_eq!(&bytes[..4], b"VAFD");
    // header: magic, version, dtype, rank, then the shape
    let rank = u16::from_le_bytes([bytes[8], bytes[9]]);
    assert_eq!(rank, 2);
    let rows = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    assert_eq!((rows, cols), (32, 3 * 8 * 8));
    assert_eq!(bytes.len(), 26 + 4 * 32 * 192);

    let samples = tmp.path().join("samples");
    ok(&visionaid(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--out", samples.to_str().unwrap(), "--n", "3"]));
    assert_eq!(std::fs::read_dir(samples).unwrap().count(), 3);
}
