use std::path::Path;
use std::process::{Command, Output};

fn topomap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topomap"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = topomap(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_model(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "d.tsph",
            "--classes",
            "3",
            "--freq",
            "12",
            "--frames",
            "12",
            "--per-class",
            "10",
            "--seed",
            "2",
        ],
    );
    ok(
        dir,
        &[
            "train", "--data", "d.tsph", "--out", "m.tckp", "--lambda", "0.5", "--grid", "3x3,3x3", "--epochs", "2",
            "--quiet",
        ],
    );
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let out = topomap(dir.path(), &["synth", "--out", "d.tsph", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
    let out = topomap(dir.path(), &["train", "--data", "x", "--out", "y", "--grid", "8by8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.tsph"), b"not a dataset").unwrap();
    let out = topomap(dir.path(), &["train", "--data", "junk.tsph", "--out", "m.tckp"]);
    assert_eq!(out.status.code(), Some(3));
    let out = topomap(dir.path(), &["eval", "--model", "missing.tckp", "--data", "junk.tsph"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--out",
            "d.tsph",
            "--classes",
            "3",
            "--freq",
            "12",
            "--frames",
            "12",
            "--per-class",
            "10",
        ],
    );
    let out = topomap(
        dir.path(),
        &[
            "train", "--data", "d.tsph", "--out", "m.tckp", "--grid", "3x3,3x3", "--lr", "1e200", "--quiet",
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("m.tckp").exists());
}

#[test]
fn single_group_profile_renders_white() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    let mut csv = String::from("sample_index,group_name\n");
    for i in 0..30 {
        csv.push_str(&format!("{i},everyone\n"));
    }
    std::fs::write(d.join("groups.csv"), csv).unwrap();
    ok(
        d,
        &[
            "nap",
            "--model",
            "m.tckp",
            "--data",
            "d.tsph",
            "--layer",
            "1",
            "--groups",
            "groups.csv",
            "--out-dir",
            "nap",
        ],
    );
    ok(
        d,
        &[
            "render",
            "--nap",
            "nap",
            "--group",
            "everyone",
            "--layer",
            "1",
            "--smooth",
            "--out",
            "map.ppm",
            "--cell-px",
            "2",
        ],
    );
    let ppm = std::fs::read(d.join("map.ppm")).unwrap();
    let header = b"P6\n6 6\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    assert_eq!(ppm.len(), header.len() + 3 * 36);
    assert!(ppm[header.len()..].iter().all(|&b| b == 255));
    assert!(d.join("map.ppm.run.json").exists());
    assert!(d.join("nap/run.json").exists());

    // GradNAP needs class-pure groups.
    let out = topomap(
        d,
        &[
            "nap",
            "--model",
            "m.tckp",
            "--data",
            "d.tsph",
            "--mode",
            "gradnap",
            "--groups",
            "groups.csv",
            "--out-dir",
            "g",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn region_and_single_filter_dream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    ok(d, &["nap", "--model", "m.tckp", "--data", "d.tsph", "--out-dir", "nap"]);
    let out = ok(d, &["region", "--nap", "nap", "--group", "P1", "--layer", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 9);
    assert_eq!(report["filters"].as_array().unwrap().len(), 9);

    let out = topomap(d, &["region", "--nap", "nap", "--group", "P1", "--layer", "0"]);
    assert_eq!(out.status.code(), Some(2));

    ok(
        d,
        &[
            "dream",
            "--model",
            "m.tckp",
            "--layer",
            "0",
            "--filter",
            "4",
            "--frames",
            "10",
            "--steps",
            "8",
            "--out-dir",
            "dr",
        ],
    );
    let pgm = std::fs::read(d.join("dr/filter_4.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n10 12\n255\n"));
    let csv = std::fs::read_to_string(d.join("dr/filter_4.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 * 10);
    let results: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("dr/results.json")).unwrap()).unwrap();
    assert_eq!(results["results"][0]["trajectory"].as_array().unwrap().len(), 9);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("dr/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "dream");
    assert_eq!(manifest["config"]["dream_config"]["steps"], 8);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_tiny_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--scale", "tiny"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("total_loss") && text.contains("dream_objective"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn default_pipeline_reaches_ninety_percent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "d.tsph"]);
    ok(
        d,
        &[
            "train", "--data", "d.tsph", "--out", "m.tckp", "--lambda", "0", "--quiet",
        ],
    );
    let out = ok(d, &["eval", "--model", "m.tckp", "--data", "d.tsph"]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.9, "{acc}");
    assert_eq!(metrics["dataset_matches_training"], true);
    assert_eq!(metrics["layers"].as_array().unwrap().len(), 2);
}
