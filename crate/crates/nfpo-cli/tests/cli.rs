//! End-to-end tests of the command-line surface, driving the real binary.

use std::process::{Command, Output};

fn nfpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--set",
        "env.num_envs=4",
        "--set",
        "ppo.step_len=8",
        "--set",
        "run.total_steps=96",
        "--set",
        "policy.hidden=[16]",
        "--set",
        "critic.hidden=[16]",
        "--set",
        "policy.layers=3",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn train_happy_path_produces_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();
    let result = nfpo(&tiny_train_args(out_str, &["--seed", "1"]));
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    for file in ["config.snapshot", "metrics.jsonl", "summary.json"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    assert!(out.join("checkpoints/ckpt_final.bin").exists());
    // Metrics rows are well-formed JSONL with every field present.
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for field in [
        "update",
        "env_steps",
        "lr",
        "loss_pi",
        "loss_v",
        "entropy",
        "approx_kl",
        "mean_logdet",
        "max_logdet",
        "saturation",
        "ep_return_mean",
        "ep_len_mean",
        "instability_flag",
    ] {
        assert!(first.get(field).is_some(), "metrics row missing {field}");
    }
}

#[test]
fn set_override_is_recorded_in_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();
    let result = nfpo(&tiny_train_args(out_str, &["--set", "ppo.norm_mode=no_s"]));
    assert!(result.status.success());
    let snapshot = std::fs::read_to_string(out.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("norm_mode = \"no_s\""), "{snapshot}");
}

#[test]
fn invalid_override_names_the_failing_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let result = nfpo(&tiny_train_args(
        out.to_str().unwrap(),
        &["--set", "ppo.l=-1"],
    ));
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("ppo.l"), "stderr: {stderr}");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let result = nfpo(&tiny_train_args(
        out.to_str().unwrap(),
        &["--set", "ppo.unknown_knob=3"],
    ));
    assert!(!result.status.success());
}

#[test]
fn occupied_output_dir_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "data").unwrap();
    let result = nfpo(&tiny_train_args(out.to_str().unwrap(), &[]));
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("not empty"), "stderr: {stderr}");
}

#[test]
fn config_file_plus_eval_and_export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("two_goal.toml");
    std::fs::write(
        &cfg_path,
        "[env]\nnum_envs = 4\n[ppo]\nstep_len = 8\n[run]\ntotal_steps = 96\n[policy]\nhidden = [16]\nlayers = 3\n[critic]\nhidden = [16]\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let result = nfpo(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    let ckpt = out.join("checkpoints/ckpt_final.bin");
    let eval_out = dir.path().join("evalout");
    let result = nfpo(&[
        "eval",
        ckpt.to_str().unwrap(),
        "--episodes",
        "4",
        "--temperature",
        "0",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let csv = eval_out.join("eval/trajectories.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("episode,t,x,y,ax,ay,reward,goal_id"));
    assert!(eval_out.join("eval/report.json").exists());

    let json_path = dir.path().join("export.json");
    let result = nfpo(&[
        "export",
        ckpt.to_str().unwrap(),
        "--out",
        json_path.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(doc["format_version"], 1);
    assert!(doc["params"].as_array().unwrap().len() > 10);
}

#[test]
fn sweep_produces_run_dirs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let result = nfpo(&[
        "sweep",
        "--set",
        "env.num_envs=4",
        "--set",
        "ppo.step_len=8",
        "--set",
        "run.total_steps=96",
        "--set",
        "policy.hidden=[16]",
        "--set",
        "critic.hidden=[16]",
        "--set",
        "policy.layers=3",
        "--axis",
        "ppo.l",
        "--values",
        "0.1,0.5",
        "--seed",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    for run in ["0_1_s1", "0_1_s2", "0_5_s1", "0_5_s2"] {
        assert!(out.join(run).join("summary.json").exists(), "missing {run}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("value,seed,final_return,instability"));
    assert_eq!(summary.lines().count(), 5);
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("ci95"), "stdout: {stdout}");
}

#[test]
fn sweep_rejects_empty_values() {
    let dir = tempfile::tempdir().unwrap();
    let result = nfpo(&[
        "sweep",
        "--axis",
        "ppo.l",
        "--values",
        "",
        "--out",
        dir.path().join("s").to_str().unwrap(),
    ]);
    assert!(!result.status.success());
}

#[test]
fn norm_mode_variant_sweep_runs_all_four() {
    // The four-variant comparison at desk scale; budgets kept tiny.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("modes");
    let result = nfpo(&[
        "sweep",
        "--set",
        "env.num_envs=4",
        "--set",
        "ppo.step_len=8",
        "--set",
        "run.total_steps=96",
        "--set",
        "policy.hidden=[16]",
        "--set",
        "critic.hidden=[16]",
        "--set",
        "policy.layers=3",
        "--axis",
        "ppo.norm_mode",
        "--values",
        "none,clip,tanh,no_s",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    for run in ["none_s1", "clip_s1", "tanh_s1", "no_s_s1"] {
        let snapshot = out.join(run).join("config.snapshot");
        assert!(snapshot.exists(), "missing {run}");
    }
}

#[test]
fn probe_flag_streams_gradient_factor_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let result = nfpo(&tiny_train_args(
        out.to_str().unwrap(),
        &["--set", "telemetry.probe=true", "--set", "telemetry.probe_samples=8"],
    ));
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let probe = std::fs::read_to_string(out.join("probe.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(probe.lines().next().unwrap()).unwrap();
    let layers = first["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for layer in layers {
        assert!(layer["exp_g"]["p95"].is_number());
        assert!(layer["g_prime"]["mean"].is_number());
        assert!(layer["grad_norm"]["max"].is_number());
    }
}

/// The oracle suite passes on a fresh checkout and reports the bijectivity
/// error it observed.
#[test]
fn verify_command_passes() {
    let result = nfpo(&["verify"]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let text = String::from_utf8_lossy(&result.stdout);
    assert!(text.contains("all 7 checks passed"), "{text}");
    assert!(text.contains("bijectivity max roundtrip error"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn help_documents_the_stable_flag_surface() {
    for (sub, flags) in [
        ("train", vec!["--config", "--set", "--seed", "--out"]),
        ("eval", vec!["--episodes", "--temperature", "--out", "--set"]),
        (
            "sweep",
            vec!["--axis", "--values", "--seed", "--parallel", "--out"],
        ),
        ("export", vec!["--out"]),
    ] {
        let result = nfpo(&[sub, "--help"]);
        assert!(result.status.success());
        let text = String::from_utf8_lossy(&result.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help missing {flag}");
        }
    }
}

#[test]
fn parallel_sweep_spawns_independent_processes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("psweep");
    let result = nfpo(&[
        "sweep",
        "--set",
        "env.num_envs=4",
        "--set",
        "ppo.step_len=8",
        "--set",
        "run.total_steps=96",
        "--set",
        "policy.hidden=[16]",
        "--set",
        "critic.hidden=[16]",
        "--set",
        "policy.layers=3",
        "--axis",
        "ppo.l",
        "--values",
        "0.25,0.75",
        "--parallel",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(out.join("0_25_s1/summary.json").exists());
    assert!(out.join("0_75_s1/summary.json").exists());
}

/// Identical seeds produce identical metrics, and the written snapshot is
/// sufficient to reproduce the run bit-exactly.
#[test]
fn identical_seeds_reproduce_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let result = nfpo(&tiny_train_args(out.to_str().unwrap(), &["--seed", "9"]));
        assert!(result.status.success());
    }
    let ma = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let mb = std::fs::read_to_string(b.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
    // And the snapshot reproduces the run a third time.
    let c = dir.path().join("c");
    let result = nfpo(&[
        "train",
        "--config",
        a.join("config.snapshot").to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let mc = std::fs::read_to_string(c.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, mc);
}
