use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bic_testkit::{generate, SyntheticCity};

fn bic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bic"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SV_API_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(city: &SyntheticCity, out: &Path) -> std::path::PathBuf {
    let path = city.root.join("bic.toml");
    let toml = format!(
        r#"seed = 0

[paths]
osm = "{}"
out_dir = "{}"

[fetch]
replay_dir = "{}"
retry = {{ attempts = 2, initial_backoff_ms = 1 }}

[classifier]
labels_dir = "{}"
"#,
        city.osm.display(),
        out.display(),
        city.replay_dir.display(),
        city.labels_dir.display()
    );
    fs::write(&path, toml).unwrap();
    path
}

#[test]
fn run_all_then_stage_commands() {
    let fixture = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let city = generate(fixture.path()).unwrap();
    let config = write_config(&city, out.path());
    let config = config.to_str().unwrap();
    let out_dir = out.path().to_str().unwrap();

    let o = bic(&["run", "--all", "--config", config]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for stage in ["ingest", "fetch", "filter", "classify", "fuse", "eval", "map"] {
        assert!(text.contains(&format!("{stage}: done")), "{text}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(out.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"], 1.0);

    // the manifest snapshot stands in for --config
    let digest = fs::read(out.path().join("predictions.jsonl")).unwrap();
    let o = bic(&["fuse", "--out", out_dir]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("fuse: up to date"));
    assert_eq!(fs::read(out.path().join("predictions.jsonl")).unwrap(), digest);

    let o = bic(&["fuse", "--out", out_dir, "--force"]);
    assert!(stdout(&o).contains("fuse: done"));
    assert_eq!(fs::read(out.path().join("predictions.jsonl")).unwrap(), digest);

    let o = bic(&["eval", "--out", out_dir, "--sample-n", "5", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(out.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["counts"]["evaluated"], 5);
    assert_eq!(metrics["seed"], 9);
}

#[test]
fn out_of_order_stage_fails() {
    let out = tempfile::tempdir().unwrap();
    let o = bic(&["fetch", "--out", out.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("needs `ingest`"), "{err}");
}

#[test]
fn ingest_needs_an_extract() {
    let out = tempfile::tempdir().unwrap();
    let o = bic(&["ingest", "--out", out.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--osm"));
}

#[test]
fn ingest_with_bbox_keeps_a_subset() {
    let fixture = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let city = generate(fixture.path()).unwrap();
    let first = &city.plan.buildings[0].centroid;
    let bbox = format!("{},{},{},{}", first.0 - 0.0005, first.1 - 0.0005, first.0 + 0.0005, first.1 + 0.0005);
    let o = bic(&[
        "ingest",
        "--osm",
        city.osm.to_str().unwrap(),
        "--bbox",
        &bbox,
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = fs::read_to_string(out.path().join("buildings.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
}

#[test]
fn bad_bbox_is_rejected_by_the_parser() {
    let o = bic(&["ingest", "--osm", "x.osm", "--bbox", "1,2,3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("four values"));
}
