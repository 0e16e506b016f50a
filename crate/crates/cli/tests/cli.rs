use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4
run_dir = "run"

[synth]
num_utterances = 5
frames_min = 10
frames_max = 12
video_height = 4
video_width = 4
seed = 2

[data]
dir = "data"
eval_utterances = 2
noise_bank_size = 2

[features]
d_feat = 8
conv_channels = 2

[encoder]
num_layers = 2
d_model = 16
ffn_dim = 24
num_heads = 2
num_clusters = 4

[distill]
ema_n = 10

[train]
batch_size = 2
total_updates = 6
checkpoint_every = 3

[cluster]
k = 4

[finetune]
total_updates = 4
freeze_steps = 2
batch_size = 2
"#;

fn av2vec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_av2vec"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = av2vec(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), format!("{extra}\n{TINY}")).unwrap();
    ok(dir.path(), &["--config", "cfg.toml", "gen-data"]);
    dir
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("run/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_writes_manifest_and_respects_force() {
    let dir = setup("");
    let d = dir.path();
    let manifest = fs::read_to_string(d.join("data/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    let refused = av2vec(d, &["--config", "cfg.toml", "gen-data"]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));

    fs::write(d.join("data/stale.bin"), b"x").unwrap();
    ok(d, &["--config", "cfg.toml", "--force", "gen-data"]);
    assert!(!d.join("data/stale.bin").exists());
    assert_eq!(fs::read_to_string(d.join("data/manifest.txt")).unwrap(), manifest);
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nbatch_sise = 3\n").unwrap();
    let out = av2vec(dir.path(), &["--config", "bad.toml", "gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
}

#[test]
fn full_pipeline_in_both_modes() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "pretrain"]);
    let m = metrics(d);
    assert_eq!(m.len(), 6);
    for r in &m {
        assert!(r.get("loss_reg").is_some());
        assert!(r.get("loss_mlm").is_none());
    }
    for f in ["config.snapshot", "checkpoints/last.av2c", "checkpoints/step-000003.av2c"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    // A second run into the same directory needs --force or --resume.
    assert!(!av2vec(d, &["--config", "cfg.toml", "pretrain"]).status.success());

    let out = ok(d, &["--config", "cfg.toml", "cluster"]);
    assert!(out.contains("final objective"));
    let targets = fs::read_dir(d.join("data/targets")).unwrap().count();
    assert_eq!(targets, 5);
    let centroids = fs::read(d.join("run/checkpoints/cluster.av2k")).unwrap();
    ok(d, &["--config", "cfg.toml", "--force", "cluster"]);
    assert_eq!(fs::read(d.join("run/checkpoints/cluster.av2k")).unwrap(), centroids);

    // MLM pretraining in a separate run directory, reading the cluster targets.
    let mut cfg = fs::read_to_string(d.join("cfg.toml")).unwrap();
    cfg.insert_str(0, "mode = \"av2vec-mlm\"\n");
    fs::write(d.join("mlm.toml"), cfg).unwrap();
    ok(d, &["--config", "mlm.toml", "--run-dir", "mlm", "pretrain"]);
    let lines = fs::read_to_string(d.join("mlm/metrics.jsonl")).unwrap();
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["loss_reg"].as_f64().unwrap().is_finite());
        assert!(v["loss_mlm"].as_f64().unwrap().is_finite());
    }

    ok(d, &["--config", "cfg.toml", "finetune"]);
    assert!(d.join("run/checkpoints/probe.av2c").exists());
    let table = ok(d, &["--config", "cfg.toml", "eval"]);
    assert!(table.contains("video-only"));
    let csv = fs::read_to_string(d.join("run/reports/accuracy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(csv.lines().next().unwrap(), "condition,snr_db,frame_accuracy,n_frames");
    assert_eq!(rows.len(), 18);
    let video: Vec<&str> =
        rows.iter().filter(|r| r.starts_with("video-only,")).map(|r| r.splitn(3, ',').nth(2).unwrap()).collect();
    assert_eq!(video.len(), 6);
    assert!(video.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn mlm_without_targets_points_at_cluster() {
    let dir = setup("mode = \"av2vec-mlm\"");
    let out = av2vec(dir.path(), &["--config", "cfg.toml", "pretrain"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("av2vec cluster"));
}

#[test]
fn resume_continues_step_numbering() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "pretrain"]);
    let straight = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    ok(d, &["--config", "cfg.toml", "--resume", "run/checkpoints/step-000003.av2c", "pretrain"]);
    let resumed = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(resumed, straight);
    let steps: Vec<u64> = metrics(d).iter().map(|v| v["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn cluster_rejects_k_above_frame_count() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "pretrain"]);
    let cfg = fs::read_to_string(d.join("cfg.toml")).unwrap().replace("k = 4", "k = 1000");
    fs::write(d.join("bigk.toml"), cfg).unwrap();
    let out = av2vec(d, &["--config", "bigk.toml", "cluster"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds"));
}

#[test]
fn missing_checkpoints_fail() {
    let dir = setup("");
    let d = dir.path();
    assert!(!av2vec(d, &["--config", "cfg.toml", "eval", "--checkpoint", "nope.av2c"]).status.success());
    assert!(!av2vec(d, &["--config", "cfg.toml", "finetune"]).status.success());
    assert!(!av2vec(d, &["--config", "cfg.toml", "cluster"]).status.success());
}

#[test]
fn subcommand_help_lists_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, keys) in [
        ("gen-data", &["synth.num_utterances", "data.dir"][..]),
        ("pretrain", &["mode", "train.peak_lr", "distill.teacher_dropout_mode", "corruption.p_noise"][..]),
        ("cluster", &["cluster.k", "cluster.layer"][..]),
        ("finetune", &["finetune.freeze_steps"][..]),
        ("eval", &["encoder.d_model"][..]),
    ] {
        let help = ok(dir.path(), &[cmd, "--help"]);
        for k in keys {
            assert!(help.contains(&format!("{k} = ")), "{cmd} --help lacks {k}");
        }
    }
}
