use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geostory::cli::BUNDLE_FILES;
use geostory::harness::{porto_fixture_path, write_synthetic_kaggle};
use geostory::ingest::{parse_dataset, Schema};

const STORY: &str = include_str!("golden/story1_markup.txt");
const CENTRAL: &str = "Most rides end on [[POI: Avenida dos Aliados]]. Many others stop at \
[[POI: São Bento Station]] or climb to [[POI: Clérigos Tower]].";

fn geostory(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geostory"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(dir: &Path, rows: usize, bad: usize) -> PathBuf {
    let p = dir.join("trips.csv");
    write_synthetic_kaggle(fs::File::create(&p).unwrap(), rows, bad, 2024).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_reports_the_same_counts_as_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 1000, 40);
    let out = geostory(&["ingest", s(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let ds = parse_dataset(fs::File::open(&data).unwrap(), Schema::KagglePorto, "x").unwrap();
    let text = stdout(&out);
    assert!(text.contains(&format!("trajectories: {}\n", ds.trajectories.len())), "{text}");
    assert!(text.contains(&format!("skipped_rows: {}\n", ds.skipped_rows)));
    assert_eq!(ds.trajectories.len() + ds.skipped_rows, 1000);
}

#[test]
fn ingest_point_list() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("walk.csv");
    fs::write(&p, "lon,lat\n-8.611,41.146\n-8.612,41.147\n-8.613,41.148\n").unwrap();
    let out = geostory(&["ingest", s(&p), "--schema", "point_list"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("trajectories: 1\n"));
    assert!(stdout(&out).contains("points: 3\n"));
}

#[test]
fn missing_dataset_names_the_path() {
    let out = geostory(&["ingest", "/no/such/trips.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/no/such/trips.csv"), "{}", stderr(&out));
}

#[test]
fn unknown_schema_is_a_config_error() {
    let out = geostory(&["ingest", "whatever.csv", "--schema", "gpx"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn heatmap_writes_grid_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 500, 0);
    let out_dir = dir.path().join("heat");
    let out = geostory(&["--output-dir", s(&out_dir), "heatmap", s(&data), "--cell-size", "250", "--hotspot-k", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["grid.csv", "grid.json", "hotspots.json", "summary.txt"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let hotspots: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("hotspots.json")).unwrap()).unwrap();
    assert_eq!(hotspots.as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(out_dir.join("summary.txt")).unwrap(), stdout(&out));
}

#[test]
fn offline_story_run_writes_a_full_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 1000, 0);
    let out_dir = dir.path().join("bundle");
    let out = geostory(&[
        "--offline",
        "--output-dir",
        s(&out_dir),
        "story",
        "--dataset",
        s(&data),
        "--mode",
        "heatmap",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in BUNDLE_FILES {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"], "pass");
    assert!(stdout(&out).contains("attempts: 1\n"));
}

#[test]
fn single_trajectory_story_draws_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 200, 0);
    let out_dir = dir.path().join("bundle");
    let out = geostory(&[
        "--offline",
        "--output-dir",
        s(&out_dir),
        "story",
        "--dataset",
        s(&data),
        "--mode",
        "single_trajectory",
        "--schema",
        "kaggle_porto",
        "--selection",
        "longest_by_length",
        "--min-pois",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let map = fs::read_to_string(out_dir.join("map.geojson")).unwrap();
    assert!(map.contains("\"LineString\""));
}

#[test]
fn hallucinating_backend_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 1000, 0);
    let script = dir.path().join("script.json");
    let bad = "The night ends at [[POI: Castelo do Queijo]].";
    fs::write(&script, serde_json::to_string(&vec![bad; 5]).unwrap()).unwrap();
    let out_dir = dir.path().join("bundle");
    let out = geostory(&[
        "--offline",
        "--output-dir",
        s(&out_dir),
        "story",
        "--dataset",
        s(&data),
        "--backend",
        "scripted",
        "--script",
        s(&script),
        "--min-pois",
        "1",
        "--max-retries",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    assert!(stderr(&out).contains("after 2 attempts"), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"], "fail");
    assert!(out_dir.join("trace.json").is_file());
    assert!(!out_dir.join("map.geojson").exists());
}

#[test]
fn unknown_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 50, 0);
    let out = geostory(&["--offline", "story", "--dataset", s(&data), "--backend", "oracle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown backend"));
}

#[test]
fn config_file_rejects_unknown_keys_and_secrets() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "mode = \"heatmap\"\ncolour = \"red\"\n").unwrap();
    assert_eq!(geostory(&["--config", s(&bad), "story"]).status.code(), Some(2));
    fs::write(&bad, "api_key = \"abc\"\n").unwrap();
    assert_eq!(geostory(&["--config", s(&bad), "story"]).status.code(), Some(2));
}

fn validate(dir: &Path, story: &str) -> Output {
    let data = dataset(dir, 1000, 0);
    let p = dir.join("story.txt");
    fs::write(&p, story).unwrap();
    let out_dir = dir.join("out");
    geostory(&[
        "--offline",
        "--output-dir",
        s(&out_dir),
        "validate",
        s(&p),
        "--dataset",
        s(&data),
        "--fixture",
        s(&porto_fixture_path()),
        "--min-pois",
        "3",
    ])
}

#[test]
fn validate_accepts_a_grounded_story() {
    let dir = tempfile::tempdir().unwrap();
    let out = validate(dir.path(), CENTRAL);
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    assert!(dir.path().join("out/report.json").is_file());
}

#[test]
fn validate_names_an_injected_far_poi() {
    let dir = tempfile::tempdir().unwrap();
    let story = format!("{CENTRAL} A last call at [[POI: Castelo do Queijo]].");
    let out = validate(dir.path(), &story);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("flagged POIs: Castelo do Queijo"), "{}", stderr(&out));
}

#[test]
fn validate_rejects_empty_and_broken_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = validate(dir.path(), "  \n");
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("empty"));
    let out = validate(dir.path(), "Start at [[POI: Ribeira district");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn map_command_numbers_the_story_pois() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("story.txt");
    fs::write(&p, STORY).unwrap();
    let out_dir = dir.path().join("map");
    let out = geostory(&["--offline", "--output-dir", s(&out_dir), "map", s(&p)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("1. Avenida dos Aliados\n"));
    assert!(text.contains("18. Foz do Douro\n"));
    assert!(text.ends_with("markers: 15\n"));
    assert_eq!(
        fs::read_to_string(out_dir.join("map.geojson")).unwrap(),
        include_str!("golden/porto_map.geojson")
    );
    assert!(fs::read_to_string(out_dir.join("map.html")).unwrap().contains("leaflet"));
}
