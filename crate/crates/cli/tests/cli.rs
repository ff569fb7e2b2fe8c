use std::path::Path;
use std::process::Command;

fn dcbf(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dcbf"))
        .args(["--seed", "3", "--out"])
        .arg(dir)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "schema_version = 1\n\
         [dataset]\nepisodes = 2\nsteps_per_episode = 15\n\
         [train]\nepochs = 1\n\
         [eval]\nepisodes = 3\n[eval.rollout]\nmax_steps = 30\n",
    )
    .unwrap();
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenario_obstacle.toml");

    dcbf(d, &["gen-data"]);
    let csv = std::fs::read_to_string(d.join("dataset.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("episode,step,obs_0,"));
    assert!(header.ends_with("label_a,label_omega,mask_bits"));
    assert_eq!(csv.lines().count(), 1 + 2 * 15);

    dcbf(d, &["train", "--data", d.join("dataset.csv").to_str().unwrap()]);
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["schema_version"], 1);
    let loss = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,batch,total_loss,"));

    let model = d.join("model.json");
    let model = model.to_str().unwrap();
    dcbf(d, &["rollout", "--model", model, "--scenario", scenario.to_str().unwrap(), "--mode", "exact"]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(d.join("rollout.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["schema_version"], 1);
    assert!(lines.len() > 2);
    for key in ["state", "control", "barriers", "penalties"] {
        assert!(lines[1].get(key).is_some(), "missing {key}");
    }

    dcbf(d, &["eval", "--model", model, "--distribution", "obstacle", "--mode", "estimated"]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["episodes"], 3);

    dcbf(d, &["sweep-noise", "--model", model, "--channel", "dobs", "--sigmas", "0,1.5", "--episodes", "2"]);
    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "sigma,crash_rate,n");
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("1.5,") && rows[2].ends_with(",2"));
}

#[test]
fn rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "schema_version = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dcbf"))
        .arg("--config")
        .arg(d.join("run.toml"))
        .arg("--out")
        .arg(d)
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}
