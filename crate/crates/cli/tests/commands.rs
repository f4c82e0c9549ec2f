//! End-to-end runs of the subcommands on a small synthetic config.

use std::fs;
use std::path::Path;
use std::process::Command;

use mhkd::nn::Network;
use mhkd::train::evaluate;
use mhkd_cli::checkpoint::Checkpoint;
use mhkd_cli::commands::{cmd_distill, cmd_eval, cmd_report, cmd_train_teacher, Manifest, RunContext};
use mhkd_cli::config::{preset, ExperimentConfig};
use mhkd_cli::metrics::Table;

const SMALL: &str = r#"
name = "small"
seeds = [3, 4]
output_dir = "unused"
teacher = "tiny-t"
student = "tiny-s"

[dataset]
kind = "synthetic"
num_classes = 3
train_per_class = 6
test_per_class = 4
difficulty = 0.3
seed = 1

[distill]
temperature = 4.0
alpha = 0.9
beta = 0.5
head_units = [1, 3]

[head]
conv_channels = 4
fc_hidden = 8

[optim]
lr = 0.05
lr_milestones = [1]
epochs = 2
batch_size = 8

[runtime]
eval_batch_size = 16
verbose = false
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(SMALL, "small.toml").unwrap()
}

fn run_teacher(out: &Path) -> RunContext {
    let ctx = RunContext::new(small(), None, Some(out.to_path_buf()));
    let data = ctx.cfg.dataset.load().unwrap();
    cmd_train_teacher(&ctx, &data).unwrap();
    ctx
}

#[test]
fn missing_required_field_is_named_by_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    fs::write(&path, SMALL.replace("epochs = 2", "")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mhkd"))
        .args(["train-teacher", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epochs"), "{stderr}");
    assert!(stderr.contains("broken.toml"), "{stderr}");
}

#[test]
fn teacher_run_writes_metrics_manifest_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = run_teacher(dir.path());
    let t = ctx.teacher_dir();
    for f in ["metrics.csv", "manifest.toml", "teacher.ckpt", "teacher-best.ckpt"] {
        assert!(t.join(f).is_file(), "{f} missing");
    }
    let table = Table::read(&t.join("metrics.csv")).unwrap();
    assert_eq!(table.header, ["epoch", "lr", "train_loss", "l_kd", "test_acc"]);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.column("lr").unwrap(), [0.05, 0.05 * 0.1]);

    // Defaulted hyperparameters are written out explicitly.
    let text = fs::read_to_string(t.join("manifest.toml")).unwrap();
    let manifest: Manifest = toml::from_str(&text).unwrap();
    assert_eq!(manifest.seeds, [3, 4]);
    assert_eq!(manifest.config.optim.momentum, 0.9);
    assert_eq!(manifest.config.optim.weight_decay, 5e-4);
    assert_eq!(manifest.config.distill.kd_alpha, 0.9);
    assert_eq!(manifest.config.head.num_conv, 2);
    assert_eq!(manifest.engine.bn_eps, 1e-5);
    for key in ["momentum", "weight_decay", "lr_gamma", "kd_alpha", "bn_momentum", "hflip_prob"] {
        assert!(text.contains(key), "{key} not in manifest");
    }
    // The manifest alone reproduces the config.
    assert_eq!(manifest.config, ctx.cfg.resolved().unwrap());
}

#[test]
fn checkpoints_round_trip_and_evaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = run_teacher(dir.path());
    let path = ctx.teacher_dir().join("teacher.ckpt");
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let again = dir.path().join("again.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);

    let (_, test) = ctx.cfg.dataset.load().unwrap();
    let net: Network<f32> = ck.to_network().unwrap();
    let reloaded = Checkpoint::load(&again).unwrap().to_network().unwrap();
    assert!(net.bit_eq(&reloaded));
    assert_eq!(evaluate(&net, &test, 16).unwrap(), evaluate(&reloaded, &test, 16).unwrap());
    assert_eq!(cmd_eval(&path, &test, None, 16).unwrap().accuracy, ck.meta.test_acc);
}

#[test]
fn distill_writes_every_variant_and_heads_strip_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = run_teacher(dir.path());
    let teacher_ckpt = ctx.teacher_dir().join("teacher.ckpt");
    let data = ctx.cfg.dataset.load().unwrap();
    let summary = cmd_distill(&ctx, &teacher_ckpt, &data).unwrap();
    let labels: Vec<&str> = summary.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["MHKD", "KD", "Student (CE)"]);
    assert!(summary.rows.iter().all(|r| r.accuracies.len() == 2 && r.seeds == [3, 4]));
    let md = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(md.contains("| Method | seed 3 | seed 4 | mean (std) |"), "{md}");
    assert!(dir.path().join("summary.json").is_file());

    let seed_dir = ctx.distill_dir().join("mhkd").join("seed-3");
    let m = Table::read(&seed_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        m.header,
        ["epoch", "lr", "train_loss", "l_kd", "l_ohkd_head1", "l_ohkd_head2", "head1_acc", "head2_acc", "test_acc"]
    );
    assert_eq!(m.rows.len(), 2);
    assert!(seed_dir.join("steps.csv").is_file());

    // Removing the heads leaves the deployed student unchanged.
    let ck = Checkpoint::load(&seed_dir.join("student.ckpt")).unwrap();
    assert!(ck.heads.is_some());
    let stripped = ck.without_extras();
    assert!(stripped.heads.is_none() && stripped.state.is_none());
    let (a, b) = (ck.to_network().unwrap(), stripped.to_network().unwrap());
    assert!(a.bit_eq(&b));
    let images = data.1.batch::<f32>(&(0..data.1.len()).collect::<Vec<_>>()).images;
    assert_eq!(a.predict(&images).unwrap(), b.predict(&images).unwrap());

    let report = cmd_eval(&seed_dir.join("student.ckpt"), &data.1, Some(&teacher_ckpt), 16).unwrap();
    assert_eq!(report.params, 24_458 - 7 * 65);
    assert_eq!(report.reference_params, Some(289_194 - 7 * 129));
    let expected = 100.0 * (1.0 - report.params as f64 / report.reference_params.unwrap() as f64);
    assert_eq!(report.compression, Some(expected));

    let out = cmd_report(dir.path()).unwrap();
    assert!(out.svgs.iter().any(|p| p.ends_with("mhkd/seed-3/l_ohkd.svg")));
    assert!(out.svgs.iter().all(|p| fs::read_to_string(p).unwrap().starts_with("<svg")));
    let md = fs::read_to_string(out.markdown).unwrap();
    assert!(md.contains("| distill/mhkd |"), "{md}");
}

#[test]
fn report_rejects_a_directory_without_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_report(dir.path()).unwrap_err().to_string();
    assert!(err.contains("no metrics.csv"), "{err}");
}

#[test]
fn presets_resolve_and_svhn_refuses_to_load() {
    for name in ["tiny-pair-synth", "tiny-pair-cifar10", "paper-cifar100", "paper-svhn"] {
        let cfg = ExperimentConfig::load(name).unwrap();
        assert_eq!(cfg.name, name);
        assert!(preset(name).is_some());
    }
    let svhn = ExperimentConfig::load("paper-svhn").unwrap();
    assert!(svhn.dataset.load().unwrap_err().to_string().contains("SVHN"));
}
