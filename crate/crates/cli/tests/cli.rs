use std::path::{Path, PathBuf};

use invedit_cli::{run_command, RunConfig};
use invedit_core::image_io::write_png;
use invedit_core::synth_data::{make_split, render_scene};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["invedit"];
    argv.extend_from_slice(args);
    run_command(&argv)
}

fn scene_png(dir: &Path) -> PathBuf {
    let data = make_split(3, 1, 1).unwrap();
    let path = dir.join("input.png");
    write_png(&path, &render_scene(&data.test[0]).image).unwrap();
    path
}

fn write_config(dir: &Path, body: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
    path
}

fn analytic_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        serde_json::json!({
            "schedule": { "num_inference_steps": 10 },
            "model": { "kind": "analytic", "mean": 0.0, "s": 1.0 },
            "policy": { "kind": "naive_ddim" },
        }),
    )
}

fn read_json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&["edit", "--help"]), 0);
}

#[test]
fn parse_errors_exit_one() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["reconstruct", "--t0", "many"]), 1);
}

#[test]
fn missing_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["reconstruct", "--config", dir.path().join("nope.json").to_str().unwrap()]), 1);
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "steps": 10 }));
    assert!(RunConfig::load(&cfg).is_err());
    assert_eq!(run(&["invert", "--config", cfg.to_str().unwrap()]), 1);
}

#[test]
fn invalid_policy_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = analytic_config(dir.path());
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["reconstruct", "--config", c, "--output", o, "--policy", "tic", "--t0", "11"]), 1);
    assert_eq!(run(&["reconstruct", "--config", c, "--output", o, "--policy", "sideways"]), 1);
    assert_eq!(run(&["reconstruct", "--config", c, "--output", o, "--threshold", "1.5"]), 1);
    assert_eq!(run(&["edit", "--config", c, "--output", o, "--cfg-scale", "-1"]), 1);
}

#[test]
fn reconstruct_without_image_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = analytic_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(
        run(&["reconstruct", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]),
        1
    );
}

#[test]
fn analytic_reconstruct_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = analytic_config(dir.path());
    let img = scene_png(dir.path());
    let out = dir.path().join("naive");
    let args = [
        "reconstruct",
        "--config",
        cfg.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ];
    assert_eq!(run(&args), 0);
    let metrics = read_json(out.join("metrics.json"));
    assert_eq!(metrics["policy"], "naive_ddim");
    assert!(metrics["psnr_db"].as_f64().unwrap().is_finite());
    assert!(out.join("reconstruction.png").exists());

    let resolved: RunConfig = serde_json::from_value(read_json(out.join("resolved_config.json"))).unwrap();
    assert_eq!(resolved.schedule.num_inference_steps, 10);
    assert_eq!(resolved.image.as_deref(), Some(img.as_path()));

    let replay = dir.path().join("replay");
    let mut args = args.to_vec();
    args[6] = replay.to_str().unwrap();
    args.extend_from_slice(&["--policy", "replay"]);
    assert_eq!(run(&args), 0);
    let m = read_json(replay.join("metrics.json"));
    assert_eq!(m["policy"], "replay");
    assert!(m["psnr_db"].as_f64().unwrap() >= 60.0);
}

#[test]
fn analytic_error_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = analytic_config(dir.path());
    let img = scene_png(dir.path());
    let out = dir.path().join("trace");
    assert_eq!(
        run(&[
            "analyze-error",
            "--config",
            cfg.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]),
        0
    );
    let trace = read_json(out.join("trace.json"));
    assert_eq!(trace["steps"].as_array().unwrap().len(), 10);
}

/// Trains a deliberately tiny model, then drives every command against it.
#[test]
fn end_to_end_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let base = serde_json::json!({
        "schedule": { "num_inference_steps": 6 },
        "model": { "kind": "checkpoint", "path": run_dir.join("model") },
        "policy": { "kind": "tic", "t0": 2, "l0": 4 },
        "data": { "seed": 5, "n_train": 4, "n_test": 3 },
        "train": {
            "model": { "widths": [8, 8, 16], "heads": 2, "groups": 4, "text_width": 16, "time_features": 8 },
            "options": { "epochs": 1, "batch_size": 2 }
        },
        "output_dir": run_dir,
    });
    // `train` writes the codec; later commands load it.
    let train_cfg = dir.path().join("train.json");
    std::fs::write(&train_cfg, serde_json::to_vec(&base).unwrap()).unwrap();
    let mut used = base.clone();
    used["codec"] = serde_json::json!({ "path": run_dir.join("codec") });
    let cfg = write_config(dir.path(), used);
    let c = cfg.to_str().unwrap();

    assert_eq!(run(&["train", "--config", train_cfg.to_str().unwrap()]), 0);
    for f in ["model", "codec", "data", "train_report.json", "resolved_config.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let report = read_json(run_dir.join("train_report.json"));
    assert!(report["final_loss"].as_f64().unwrap().is_finite());

    let img = scene_png(dir.path());
    let i = img.to_str().unwrap();

    let inv = dir.path().join("inv");
    assert_eq!(run(&["invert", "--config", c, "--image", i, "--output", inv.to_str().unwrap()]), 0);
    assert!(inv.join("inversion").join("manifest.json").exists());

    let rec = dir.path().join("rec");
    assert_eq!(
        run(&["reconstruct", "--config", c, "--image", i, "--output", rec.to_str().unwrap()]),
        0
    );
    assert_eq!(read_json(rec.join("metrics.json"))["policy"], "tic");

    let ed = dir.path().join("edit");
    let e = ed.to_str().unwrap();
    assert_eq!(
        run(&["edit", "--config", c, "--image", i, "--output", e, "--prompt", "disc right top small bright"]),
        0
    );
    assert!(ed.join("edited.png").exists());
    assert_eq!(run(&["edit", "--config", c, "--image", i, "--output", e]), 1);
    assert_eq!(
        run(&["edit", "--config", c, "--image", i, "--output", e, "--prompt", "hexagon left"]),
        1
    );

    let masked = dir.path().join("masked");
    assert_eq!(
        run(&[
            "edit",
            "--config",
            c,
            "--image",
            i,
            "--output",
            masked.to_str().unwrap(),
            "--prompt",
            "square left bottom large dark",
            "--policy",
            "mask_guided",
            "--mask-tokens",
            "0",
            "--layout",
        ]),
        0
    );
    assert!(masked.join("mask.png").exists());

    let ev = dir.path().join("eval");
    assert_eq!(
        run(&["eval", "--config", c, "--output", ev.to_str().unwrap(), "--policies", "naive,tic,replay", "--limit", "2"]),
        0
    );
    let summary = read_json(ev.join("eval.json"));
    let policies = summary["policies"].as_array().unwrap();
    assert_eq!(policies.len(), 3);
    assert_eq!(policies[0]["images"].as_array().unwrap().len(), 2);
    assert!(summary["ceiling_chain_holds"].is_boolean());

    // Worker count changes the schedule, never the numbers.
    let ev2 = dir.path().join("eval2");
    std::env::set_var(invedit_cli::THREADS_ENV, "2");
    assert_eq!(
        run(&["eval", "--config", c, "--output", ev2.to_str().unwrap(), "--policies", "naive,tic,replay", "--limit", "2"]),
        0
    );
    std::env::remove_var(invedit_cli::THREADS_ENV);
    let again = read_json(ev2.join("eval.json"));
    for (a, b) in policies.iter().zip(again["policies"].as_array().unwrap()) {
        assert_eq!(a["mean_psnr_db"], b["mean_psnr_db"]);
    }
}
