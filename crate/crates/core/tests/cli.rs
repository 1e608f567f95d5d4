use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixflow::cli::manifest::RunManifest;
use mixflow::net::Checkpoint;
use mixflow::training::{TrainConfig, TrainVariant};

const TINY: [&str; 4] = ["--set", "layer_dims=[2,16,16,1]", "--set", "batch_size=64"];

fn mixflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixflow")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = mixflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Every listed data file is byte-identical between two run directories.
fn assert_same_outputs(a: &Path, b: &Path) {
    let ma = manifest(a);
    let mb = manifest(b);
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.config_hash, mb.config_hash);
    assert!(!ma.outputs.is_empty());
    for name in &ma.outputs {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

fn train_tiny(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--out-dir", s(dir), "--set", "iterations=20", "--set", "log_every=5"];
    args.extend(TINY);
    args.extend(extra);
    run_ok(&args);
    dir.join("checkpoint.json")
}

#[test]
fn shipped_toy_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let std_cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(root.join("toy_standard.json")).unwrap()).unwrap();
    assert_eq!(std_cfg, TrainConfig { snapshots: vec![20_000], ..TrainConfig::toy_standard() });
    let mix: TrainConfig = serde_json::from_str(&fs::read_to_string(root.join("toy_mixflow.json")).unwrap()).unwrap();
    assert_eq!(mix.variant, TrainVariant::MixFlow);
    assert_eq!(mix.iterations, 6_000);
    assert_eq!(mix.effective_t_distribution(), TrainConfig::toy_mixflow().effective_t_distribution());
    let toy: mixflow::cli::toy::ToyConfig = serde_json::from_str(&fs::read_to_string(root.join("toy.json")).unwrap()).unwrap();
    assert_eq!(toy, mixflow::cli::toy::ToyConfig::default());
}

#[test]
fn train_is_deterministic_and_manifest_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_tiny(&a, &[]);
    train_tiny(&b, &[]);
    assert_same_outputs(&a, &b);
    let m = manifest(&a);
    assert_eq!(m.command, "train");
    assert_eq!(m.config["iterations"], 20);
    for o in &m.outputs {
        assert!(a.join(o).exists());
    }
    let ckpt = Checkpoint::load(&a.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.iteration, 20);
    assert_eq!(fs::read_to_string(a.join("loss.csv")).unwrap().lines().count(), 5);

    let c = tmp.path().join("c");
    train_tiny(&c, &["--seed", "1"]);
    assert_ne!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn resume_with_mixflow_continues_iteration_count() {
    let tmp = tempfile::tempdir().unwrap();
    let head = tmp.path().join("head");
    train_tiny(&head, &["--set", "snapshots=[10]"]);
    assert!(head.join("snapshot_10.json").exists());
    let tail = tmp.path().join("tail");
    let snapshot = head.join("snapshot_10.json");
    let mut args = vec![
        "train", "--out-dir", s(&tail), "--resume", s(&snapshot),
        "--set", "variant=mixflow", "--set", "iterations=10",
    ];
    args.extend(TINY);
    run_ok(&args);
    let ckpt = Checkpoint::load(&tail.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.iteration, 20);
    assert_eq!(ckpt.train_variant, TrainVariant::MixFlow);
    assert_eq!(manifest(&tail).inputs.len(), 1);
}

#[test]
fn malformed_config_exits_2_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{ \"iterations\": 10, ").unwrap();
    let out_dir = tmp.path().join("never");
    let out = mixflow(&["train", "--config", s(&cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    fs::write(&cfg, r#"{"iterations": 10, "unexpected_key": 1}"#).unwrap();
    assert_eq!(mixflow(&["train", "--config", s(&cfg), "--out-dir", s(&out_dir)]).status.code(), Some(2));
    assert_eq!(mixflow(&["train", "--out-dir", s(&out_dir), "--set", "gamma=2", "--set", "variant=mixflow"]).status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn numeric_failure_exits_3_and_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("blowup");
    let mut args = vec!["train", "--out-dir", s(&dir), "--set", "iterations=5", "--set", "data.means=[-1e200,1e200]"];
    args.extend(TINY);
    let out = mixflow(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = Checkpoint::load(&dir.join("checkpoint_last_good.json")).unwrap();
    assert_eq!(ckpt.iteration, 0);
    assert!(!dir.join("manifest.json").exists());
}

#[test]
fn sample_is_deterministic_across_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(&tmp.path().join("model"), &[]);
    for method in [
        vec!["--method", "euler", "--steps", "5", "--trajectory"],
        vec!["--method", "heun", "--steps", "50"],
        vec!["--method", "sde", "--steps", "20", "--diffusion", "0.5"],
        vec!["--method", "epsilon_scaled_euler", "--steps", "5"],
    ] {
        let (a, b) = (tmp.path().join("sa"), tmp.path().join("sb"));
        for (dir, threads) in [(&a, "1"), (&b, "2")] {
            let mut args = vec!["sample", "--checkpoint", s(&ckpt), "--out-dir", s(dir), "--n", "2500", "--threads", threads];
            args.extend(&method);
            run_ok(&args);
        }
        assert_same_outputs(&a, &b);
        let samples = fs::read_to_string(a.join("samples.csv")).unwrap();
        assert_eq!(samples.lines().count(), 2501);
        assert!(a.join("sampler.json").exists());
        fs::remove_dir_all(&a).unwrap();
        fs::remove_dir_all(&b).unwrap();
    }
    let dir = tmp.path().join("traj");
    run_ok(&["sample", "--checkpoint", s(&ckpt), "--out-dir", s(&dir), "--n", "3", "--trajectory"]);
    let traj = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("path_id,t,x_0\n0,0,"));
    assert_eq!(traj.lines().count(), 1 + 3 * 6);
    let bad = mixflow(&["sample", "--checkpoint", s(&ckpt), "--out-dir", s(&dir), "--method", "rk4"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn slowflow_command() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(&tmp.path().join("model"), &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run_ok(&["slowflow", "--checkpoint", s(&ckpt), "--out-dir", s(dir), "--population", "100"]);
    }
    assert_same_outputs(&a, &b);
    let csv = fs::read_to_string(a.join("slowflow.csv")).unwrap();
    assert!(csv.starts_with("t,min_m,max_m,median_m,mean_m,clamped_fraction\n0.05,"));
    assert_eq!(csv.lines().count(), 52);
    assert_eq!(manifest(&a).config["steps"], 50);
    let empty = mixflow(&["slowflow", "--checkpoint", s(&ckpt), "--out-dir", s(&tmp.path().join("e")), "--population", "0"]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn grad_check_command() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("g");
    let ok = run_ok(&["grad-check", "--dims", "2,32,32,1", "--coords", "0", "--out-dir", s(&dir)]);
    let again = run_ok(&["grad-check", "--dims", "2,32,32,1", "--coords", "0", "--out-dir", s(&dir)]);
    assert_eq!(ok.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("max relative error"));
    let bad = mixflow(&["grad-check", "--dims", "2,32,32,1", "--corrupt", "--out-dir", s(&dir)]);
    assert_eq!(bad.status.code(), Some(1));
}

fn tiny_toy(dir: &Path, cache: &Path, command: &str) {
    run_ok(&[
        command, "--out-dir", s(dir), "--cache-dir", s(cache),
        "--set", "layer_dims=[2,16,16,1]", "--set", "batch_size=64", "--set", "iterations=40",
        "--set", "branch_at=30", "--set", "samples=800", "--set", "slowflow_population=60",
    ]);
}

#[test]
fn toy_reproduce_caches_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_toy(&a, &cache, "toy-reproduce");
    let cached: Vec<_> = fs::read_dir(&cache).unwrap().collect();
    assert_eq!(cached.len(), 6);
    tiny_toy(&b, &cache, "toy-reproduce");
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 6);
    assert_same_outputs(&a, &b);
    let m = manifest(&a);
    for t in ["0.2", "0.4", "0.6", "0.8", "1.0"] {
        for tag in ["standard", "mixflow", "gt"] {
            assert!(m.outputs.contains(&format!("density_{tag}_t{t}.csv")));
        }
    }
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(a.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[4]["l1_mixflow_vs_gt"].is_number() && rows[4]["l1_standard_vs_gt"].is_number());

    // Fresh cache gives the same downstream outputs.
    let c = tmp.path().join("c");
    tiny_toy(&c, &tmp.path().join("cache2"), "toy-reproduce");
    assert_same_outputs(&a, &c);
}

#[test]
fn compare_baselines_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_toy(&a, &cache, "compare-baselines");
    tiny_toy(&b, &cache, "compare-baselines");
    assert_same_outputs(&a, &b);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(a.join("baselines.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[4]["l1_epsilon_scaling_vs_gt"].is_number());
    assert!(rows[4]["l1_input_perturbation_vs_gt"].is_number());
}
