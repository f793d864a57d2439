use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slvbot(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slvbot"))
        .arg("--runs")
        .arg(runs)
        .args(args)
        .output()
        .expect("spawning slvbot")
}

fn last_line(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(stdout.lines().last().expect("no stdout").trim())
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(slvbot(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(slvbot(dir.path(), &["--preset", "tiny", "--config", "x.toml", "gen-data"]).status.code(), Some(1));
    assert_eq!(slvbot(dir.path(), &["--preset", "huge", "gen-data"]).status.code(), Some(1));
    assert_eq!(slvbot(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "preset = \"tiny\"\n[train]\nlearning_rate = 0.1\n").unwrap();
    let out = slvbot(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!dir.path().join("0000-gen-data").exists());
}

#[test]
fn unconverged_language_model_is_not_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, "preset = \"tiny\"\n[pretrain]\nepochs = 1\nmax_excess_nats = 0.001\n").unwrap();
    let out = slvbot(dir.path(), &["--config", cfg.to_str().unwrap(), "pretrain-lm"]);
    assert_eq!(out.status.code(), Some(2));
    let run = dir.path().join("0000-pretrain-lm");
    assert!(run.join("pretrain_report.json").exists());
    assert!(!run.join("lm.ckpt").exists());
}

#[test]
fn gen_data_writes_one_episode_per_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = slvbot(dir.path(), &["--preset", "tiny", "gen-data", "--tasks", "lift,stack", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = last_line(&out);
    assert_eq!(run, dir.path().join("0000-gen-data"));
    let (manifest, episodes) = slv_core::data::load(&run).unwrap();
    assert_eq!(manifest.episodes, episodes.len());
    assert_eq!(manifest.config.data.seed, 5);
    assert!(episodes.iter().all(|e| e.task != slv_core::sim::Task::Roll));
    let counts = &manifest.config.data.episodes;
    assert_eq!(episodes.len(), counts.lift + counts.stack);
}
