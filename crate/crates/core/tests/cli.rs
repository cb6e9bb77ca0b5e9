use std::path::Path;
use std::process::{Command, Output};

use geoplan::runtime::{Checkpoint, EvalReport, RunConfig};

fn geoplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoplan"))
        .args(args)
        .output()
        .expect("spawn geoplan")
}

fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::desk_default();
    cfg.world = geoplan::envs::TreeWorldConfig::new(2, 4, 0.05, 3);
    cfg.data.num_traj = 400;
    cfg.sft.optimizer.warmup_steps = 5;
    cfg.sft.optimizer.constant_steps = 30;
    cfg.sft.optimizer.decay_steps = 5;
    cfg.grl.optimizer.warmup_steps = 2;
    cfg.grl.optimizer.constant_steps = 10;
    cfg.grl.optimizer.decay_steps = 2;
    cfg.eval.horizons = vec![2];
    cfg.eval.pairs = 6;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn print_config_round_trips() {
    let out = geoplan(&["print-config", "--seed", "17"]);
    assert!(out.status.success());
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg.seed, 17);
    cfg.validate().unwrap();
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk_default();
    cfg.model.latent_dim = 0;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let out = geoplan(&[
        "gen-data",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&path, b"{ not json").unwrap();
    let out = geoplan(&["gen-data", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = geoplan(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = dir.path().to_str().unwrap();
    let data = format!("{o}/dataset.jsonl");
    let sft = format!("{o}/sft_checkpoint.json");
    let grl = format!("{o}/grl_checkpoint.json");
    let steps: [Vec<&str>; 7] = [
        vec!["gen-data"],
        vec!["train-sft", "--data", &data],
        vec!["train-grl", "--data", &data, "--checkpoint", &sft],
        vec!["eval", "--checkpoint", &grl],
        vec![
            "plan",
            "--checkpoint",
            &grl,
            "--start",
            "0",
            "--goal",
            "3",
            "--horizon",
            "2",
        ],
        vec!["sweep-energy", "--checkpoint", &grl],
        vec!["delta-hyp", "--checkpoint", &grl],
    ];
    for step in &steps {
        let mut args = step.clone();
        args.extend(["--config", &cfg, "--out", o]);
        let out = geoplan(&args);
        assert!(
            out.status.success(),
            "{}: {}",
            step[0],
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let lines = std::fs::read_to_string(&data).unwrap();
    assert_eq!(lines.lines().count(), 400);

    let reports: Vec<EvalReport> =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].horizon, 2);
    assert!((0.0..=1.0).contains(&reports[0].sr));

    let ck = Checkpoint::load(Path::new(&grl)).unwrap();
    assert_eq!(ck.latent_dim, 32);

    let plan: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["goal"], 3);
    assert_eq!(plan["oracle"].as_array().unwrap().len(), 2);

    let csv = std::fs::read_to_string(dir.path().join("landscape.csv")).unwrap();
    assert!(csv.starts_with("dx,dy,energy\n"));
    assert_eq!(csv.lines().count(), 1 + 41 * 41);

    let delta = std::fs::read_to_string(dir.path().join("delta.csv")).unwrap();
    assert!(delta.lines().count() > 1);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("grl_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["checkpoint_hash"].as_str().unwrap(), ck.hash());
}
