use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_safeswarm");

const TINY: &str = r#"
label = "tiny"
obstacle_count = 1
eval_episodes = 2

[world]
drones = 2

[episode]
horizon = 80

[train]
iterations = 2
rollout_steps = 160
epochs = 2
minibatches = 2
hidden = [8]
checkpoint_every = 1
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SAFESWARM_SEED")
        .output()
        .expect("spawn binary")
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn train_and_eval(cfg: &Path, out: &Path, seed: &str) {
    let o = run(&["train", "--config", s(cfg), "--seed", seed, "--out", s(&out.join("train"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("train/final.ckpt");
    let o = run(&[
        "eval", "--config", s(cfg), "--seed", seed, "--checkpoint", s(&ckpt), "--out", s(&out.join("eval")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).expect("stderr is one JSON line")
}

#[test]
fn missing_config_is_an_io_error() {
    let o = run(&["train", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"], "io");
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "obstacle_count = 42\n").unwrap();
    let o = run(&["train", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "config");
    let o = run(&["train", "--config", s(&write_config(dir.path())), "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, "not a checkpoint\n").unwrap();
    let o = run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(stderr_json(&o)["error"], "checkpoint");
}

#[test]
fn train_eval_outputs_exist_and_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_and_eval(&cfg, &a, "5");
    train_and_eval(&cfg, &b, "5");
    for f in [
        "train/final.ckpt",
        "train/checkpoint_iter_000001.ckpt",
        "train/checkpoint_iter_000002.ckpt",
        "train/stats.csv",
        "train/reward_curve.csv",
        "train/value_loss_curve.csv",
        "train/run_manifest.toml",
        "eval/report.json",
        "eval/trajectories/episode_0000.csv",
        "eval/trajectories/episode_0001.csv",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let curve = std::fs::read_to_string(a.join("train/reward_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_changes_manifest_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let hash = |seed: &str| {
        let out = dir.path().join(format!("s{seed}"));
        let o = run(&["train", "--config", s(&cfg), "--seed", seed, "--iterations", "1", "--out", s(&out)]);
        assert!(o.status.success());
        let manifest: toml::Table = toml::from_str(&std::fs::read_to_string(out.join("run_manifest.toml")).unwrap()).unwrap();
        manifest["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash("1"), hash("2"));
}

#[test]
fn seed_env_var_is_last_resort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let out = dir.path().join(format!("e{}", extra.len() + env.map_or(0, str::len)));
        let mut cmd = Command::new(BIN);
        cmd.args(["train", "--config", s(&cfg), "--iterations", "1", "--out", s(&out)]).args(extra);
        match env {
            Some(v) => cmd.env("SAFESWARM_SEED", v),
            None => cmd.env_remove("SAFESWARM_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        let manifest: toml::Table = toml::from_str(&std::fs::read_to_string(out.join("run_manifest.toml")).unwrap()).unwrap();
        manifest["seed"].as_integer().unwrap()
    };
    assert_eq!(seed_of(&[], None), 0);
    assert_eq!(seed_of(&[], Some("17")), 17);
    assert_eq!(seed_of(&["--seed", "3"], Some("17")), 3);
}

#[test]
fn compare_identical_reports_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    train_and_eval(&cfg, dir.path(), "1");
    let report = dir.path().join("eval/report.json");
    let o = run(&["compare", s(&report), s(&report), "--out", s(dir.path())]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    let delta = table.lines().last().unwrap();
    assert!(delta.starts_with("| delta"));
    assert!(delta.contains("| +0.00 |") && delta.ends_with("| +0 |"), "{delta}");
    assert!(!delta.contains("+0.01") && !delta.contains("-0.0"));
    assert_eq!(std::fs::read_to_string(dir.path().join("comparison.md")).unwrap(), table);
}

#[test]
fn replay_writes_golden_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    train_and_eval(&cfg, dir.path(), "2");
    let o = run(&[
        "replay", "--config", s(&cfg), "--seed", "2", "--checkpoint", s(&dir.path().join("train/final.ckpt")),
        "--episode", "1", "--out", s(&dir.path().join("replay")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let replay = std::fs::read_to_string(dir.path().join("replay/replay_episode_0001.csv")).unwrap();
    assert_eq!(
        replay.lines().next().unwrap(),
        "t,drone_id,px,py,pz,vx,vy,vz,ax_nom,ay_nom,az_nom,ax_f,ay_f,az_f,r_enc,r_pen,r_edge,r_vel,r_total,status"
    );
    let eval = std::fs::read_to_string(dir.path().join("eval/trajectories/episode_0001.csv")).unwrap();
    assert_eq!(replay, eval);
}
