//! End-to-end checks of the `minenav` binary: exit codes, file outputs,
//! and the train / resume / eval / render pipeline on a desk-scale run.

use std::path::Path;
use std::process::{Command, Output};

fn minenav(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minenav"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A config small enough that a full run takes well under a second.
fn tiny_config(out_dir: &str, extra: &str) -> String {
    format!(
        "env.variant = short_corridor\n\
         env.step_limit = 60\n\
         uav.horizon = 8\n\
         ugv.horizon = 8\n\
         uav.minibatch_size = 16\n\
         ugv.minibatch_size = 16\n\
         uav.epochs = 2\n\
         ugv.epochs = 2\n\
         uav.hidden = 16\n\
         ugv.hidden = 16\n\
         uav.feature_dim = 8\n\
         ugv.feature_dim = 8\n\
         train.num_instances = 2\n\
         train.icm_minibatch = 16\n\
         train.stage1_max_steps = 64\n\
         train.stage2_max_steps = 32\n\
         train.seed = 11\n\
         train.out_dir = {out_dir}\n\
         {extra}"
    )
}

#[test]
fn print_defaults_reparses_to_the_same_text() {
    let dir = tempfile::tempdir().unwrap();
    let out = minenav(&["config", "--print-defaults"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    let cfg = minenav::config::parse_config(&text, &[]).unwrap();
    assert_eq!(cfg.canonical_text(), text);
    assert_eq!(cfg, minenav::config::RunConfig::default());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--bogus-flag"][..],
        &["eval"][..],
        &["config"][..],
        &["render", "--input", "x.csv", "--mode", "sideways", "--out", "x.svg"][..],
    ] {
        let out = minenav(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "args {args:?}: {}", stderr(&out));
    }
}

#[test]
fn config_typos_fail_with_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "uav.lamda = 0.9\n").unwrap();
    let out = minenav(&["train", "--config", "bad.conf"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("uav.lambda"), "got {msg}");
    assert!(msg.lines().count() == 1, "diagnostic should be one line: {msg}");
}

#[test]
fn simultaneous_training_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", "")).unwrap();
    let out = minenav(
        &["train", "--config", "t.conf", "--simultaneous-baseline"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("run");
    for name in ["config.txt", "metrics.log", "checkpoint_final.mnckpt"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.log")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), minenav::trainer::METRICS_HEADER);
    assert!(stdout(&out).contains("done stage=done"));
}

#[test]
fn staged_run_passes_a_trivial_gate_and_records_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "gate.window_steps = 16\n\
                 gate.threshold = -1000000000\n\
                 gate.required_consecutive = 1\n";
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", extra)).unwrap();
    let out = minenav(&["train", "--config", "t.conf"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.log")).unwrap();
    assert!(metrics.lines().any(|l| l.contains(",1,uav,")), "no stage-1 rows");
    assert!(metrics.lines().any(|l| l.contains(",2,ugv,")), "no stage-2 ugv rows");
}

#[test]
fn gate_timeout_exits_nonzero_and_leaves_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "gate.window_steps = 16\n\
                 gate.threshold = 1000000000\n\
                 gate.required_consecutive = 1\n";
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", extra)).unwrap();
    let out = minenav(&["train", "--config", "t.conf"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gate"), "got {}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("run/gate_report.txt")).unwrap();
    assert!(report.contains("gate_timeout step=64"), "got {report}");
    // the timed-out state is still checkpointed for inspection
    assert!(dir.path().join("run/checkpoint_final.mnckpt").exists());
}

#[test]
fn resume_after_completion_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", "")).unwrap();
    let out = minenav(
        &["train", "--config", "t.conf", "--simultaneous-baseline"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = minenav(
        &["resume", "--checkpoint", "run/checkpoint_final.mnckpt"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("already complete"));
}

#[test]
fn eval_and_render_consume_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", "")).unwrap();
    let out = minenav(
        &["train", "--config", "t.conf", "--simultaneous-baseline"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let out = minenav(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint_final.mnckpt",
            "--episodes",
            "4",
            "--workers",
            "2",
            "--out",
            "evalout",
            "--trajectories",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("success rate"), "got {}", stdout(&out));
    assert!(dir.path().join("evalout/metrics.txt").exists());
    let traj = std::fs::read_dir(dir.path().join("evalout"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .expect("one trajectory csv saved");

    let out = minenav(
        &[
            "render",
            "--input",
            traj.to_str().unwrap(),
            "--mode",
            "trajectory",
            "--variant",
            "short_corridor",
            "--out",
            "traj.svg",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let svg = std::fs::read_to_string(dir.path().join("traj.svg")).unwrap();
    assert!(svg.starts_with("<?xml"), "svg should be standalone");
    assert_eq!(svg.matches("<polyline").count(), 2, "one path per agent");

    let out = minenav(
        &["render", "--input", "run/metrics.log", "--mode", "curves", "--out", "curves.svg"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let svg = std::fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert!(svg.contains("<svg"));
    assert!(svg.contains("uav") && svg.contains("ugv"));
}

#[test]
fn eval_on_a_different_variant_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", "")).unwrap();
    let out = minenav(
        &["train", "--config", "t.conf", "--simultaneous-baseline"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = minenav(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint_final.mnckpt",
            "--episodes",
            "2",
            "--variant",
            "short_fork",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let out = minenav(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint_final.mnckpt",
            "--episodes",
            "2",
            "--variant",
            "mars_base",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "unknown variant is a usage error");
}

#[test]
fn no_icm_flag_lands_in_the_recorded_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.conf"), tiny_config("run", "")).unwrap();
    let out = minenav(
        &["train", "--config", "t.conf", "--simultaneous-baseline", "--no-icm"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let recorded = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(recorded.contains("uav.curiosity_strength = 0\n"), "got {recorded}");
    assert!(recorded.contains("ugv.curiosity_strength = 0\n"), "got {recorded}");
}
