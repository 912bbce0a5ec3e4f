use std::path::Path;
use std::process::{Command, Output};

fn vidfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidfuse")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set=data.clips=2",
    "--set=data.frames=14",
    "--set=data.height=32",
    "--set=data.width=32",
    "--set=train.height=32",
    "--set=train.width=32",
    "--set=train.k=2",
    "--set=train.l=4",
    "--set=train.holdout=4",
    "--set=train.batch=1",
    "--set=train.channels=4",
    "--set=train.disc_widths=[4,4,4]",
    "--set=train.temporal_ranges=[3]",
    "--set=train.iters_pretrain=3",
    "--set=train.iters_full=2",
];

fn run(sub: &[&str], out: &Path) -> Output {
    let mut args: Vec<&str> = sub.to_vec();
    args.extend_from_slice(TINY);
    let out = out.to_str().unwrap();
    args.extend_from_slice(&["--out", out]);
    vidfuse(&args)
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let o = vidfuse(&["transfer", "--data", "d"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(vidfuse(&["fly"]).status.code(), Some(1));
    assert_eq!(vidfuse(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_override_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = vidfuse(&["synth-data", "--set", "train.k=0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let ds = data.to_str().unwrap();
    assert!(run(&["synth-data"], &data).status.success());
    assert!(data.join("manifest.json").exists() && data.join("run_manifest.json").exists());

    let again = run(&["synth-data"], &data);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    assert!(run(&["synth-data", "--force"], &data).status.success());

    let base = d.join("base");
    let o = run(&["train-baseline", "--data", ds], &base);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = d.join("full");
    let o = run(&["train-full", "--data", ds, "--baseline", base.to_str().unwrap()], &full);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["latest.safetensors", "best.safetensors", "loss_log.csv", "run_manifest.json"] {
        assert!(full.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(full.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train-full");
    assert_eq!(manifest["config"]["train"]["k"], 2);
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let second = manifest["clips"][1]["clip_id"].as_str().unwrap().to_string();
    let fs = full.to_str().unwrap();
    let wrong = run(&["transfer", "--checkpoint", fs, "--data", ds, "--sources", "0,1,2"], &d.join("t0"));
    assert_eq!(wrong.status.code(), Some(2));
    assert!(stderr(&wrong).contains("K=2"), "{}", stderr(&wrong));

    let t = d.join("t");
    let o = run(&["transfer", "--checkpoint", fs, "--data", ds, "--target-clip", &second, "--dump-attention", "--dump-intermediates"], &t);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t.join("frames/00013.png").exists());
    assert!(t.join("intermediates/mask_00000.png").exists());
    assert!(t.join("attention/fg_00000_k1.png").exists());
    assert!(t.join("tensors.safetensors").exists());

    let bg = d.join("bg");
    let o = run(&["bg-substitute", "--checkpoint", fs, "--data", ds, "--background-clip", &second], &bg);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(bg.join("masks/00000.png").exists());

    let ev = d.join("ev");
    let o = run(&["evaluate", "--run", fs, "--data", ds, "--mode", "cross_video"], &ev);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "cross_video");
    assert!(report.get("psnr_mean").is_none() && report.get("vfid").is_none());

    let ev = d.join("ev2");
    let o = run(&["evaluate", "--run", fs, "--data", ds], &ev);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["psnr_mean"].as_f64().unwrap().is_finite());
    assert_eq!(report["psnr_per_clip"].as_array().unwrap().len(), 2);
}
