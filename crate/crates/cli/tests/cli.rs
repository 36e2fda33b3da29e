use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_flowlab");

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn flowlab(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FLOWLAB_OUT")
        .output()
        .expect("binary runs")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn write_manifest(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("m.toml");
    std::fs::write(&p, text).unwrap();
    p
}

const ZERO_FIELDS: &str = r#"
schema = 1
name = "zero"

[fields]
dim = 2
d = 2
explicit = [[], [], []]

[noise]
seed = 1
dt = 0.1

[clt_measure]
measure = { kind = "grid", side = 12 }
t = 1.0
realizations = 2
"#;

#[test]
fn single_section_writes_report_and_curve() {
    let out = tempfile::tempdir().unwrap();
    let o = flowlab(&[
        "energy",
        "--manifest",
        data("tiny.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1), "{o:?}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("energy.json")).unwrap()).unwrap();
    assert_eq!(json["header"]["experiment"], "energy");
    assert_eq!(json["header"]["seed"], 42);
    assert_eq!(json["header"]["manifest_sha256"].as_str().unwrap().len(), 64);
    assert!(json["verdict"].is_string());
    let csv = std::fs::read_to_string(out.path().join("energy_energy.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# flowlab"));
    assert_eq!(lines.next().unwrap(), "t,mean,se");
    assert_eq!(lines.count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = data("tiny.toml");
    for (dir, jobs) in [(&a, "1"), (&b, "3")] {
        let o = flowlab(&["suite", "--manifest", m.to_str().unwrap(), "--jobs", jobs, "--out", dir.path().to_str().unwrap()]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{o:?}");
    }
    let fa = read_dir_sorted(a.path());
    assert!(fa.iter().any(|(n, _)| n == "summary.csv"));
    assert_eq!(fa, read_dir_sorted(b.path()));
}

#[test]
fn seed_override_changes_output_and_is_recorded() {
    let a = tempfile::tempdir().unwrap();
    let m = data("tiny.toml");
    flowlab(&["energy", "--manifest", m.to_str().unwrap(), "--seed-override", "7", "--out", a.path().to_str().unwrap()]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("energy.json")).unwrap()).unwrap();
    assert_eq!(json["header"]["seed"], 7);
    assert_eq!(json["header"]["seed_override"], true);
}

#[test]
fn environment_sets_output_directory() {
    let a = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["energy", "--manifest", data("tiny.toml").to_str().unwrap()])
        .env("FLOWLAB_OUT", a.path())
        .output()
        .unwrap();
    assert!(matches!(o.status.code(), Some(0 | 1)), "{o:?}");
    assert!(a.path().join("energy.json").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(data("tiny.toml")).unwrap().replace("[noise]", "[noise]\nhorizon = 3");
    let m = write_manifest(dir.path(), &text);
    let o = flowlab(&["energy", "--manifest", m.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}

#[test]
fn missing_section_and_bad_usage_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), ZERO_FIELDS);
    let o = flowlab(&["mixing", "--manifest", m.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(flowlab(&["lyapunov"]).status.code(), Some(2));
    assert_eq!(flowlab(&["no-such-command"]).status.code(), Some(2));
    let o = flowlab(&["energy", "--manifest", "/nonexistent/m.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn budget_gate_rejects_large_runs() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(data("tiny.toml")).unwrap().replace("[noise]", "[run]\nbudget = 10.0\n\n[noise]");
    let m = write_manifest(dir.path(), &text);
    let o = flowlab(&["energy", "--manifest", m.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn zero_fields_measure_clt_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), ZERO_FIELDS);
    let o = flowlab(&["clt-measure", "--manifest", m.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("clt-measure.json")).unwrap()).unwrap();
    assert_eq!(json["verdict"], "degenerate");
    assert!(json["checks"][0]["message"].as_str().unwrap().starts_with("point mass"));
}

#[test]
fn field_file_resolves_relative_to_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let set = flowlab::fields::make_field_set(&flowlab::fields::FieldSetSpec::random(2, 3, 1, 42, true)).unwrap();
    flowlab::fields::write_field_set(&set, &dir.path().join("set.txt")).unwrap();
    let text = std::fs::read_to_string(data("tiny.toml")).unwrap();
    let start = text.find("[fields]").unwrap();
    let end = text.find("[noise]").unwrap();
    let text = format!("{}[fields]\nfile = \"set.txt\"\n\n{}", &text[..start], &text[end..]);
    let m = write_manifest(dir.path(), &text);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    flowlab(&["energy", "--manifest", m.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    flowlab(&["energy", "--manifest", data("tiny.toml").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    let ea: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("energy.json")).unwrap()).unwrap();
    let eb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("energy.json")).unwrap()).unwrap();
    assert_eq!(ea["details"], eb["details"]);
}

#[test]
fn bundled_manifest_is_selectable_by_name() {
    let m = flowlab_cli::load(Path::new("demo-2d")).unwrap();
    assert_eq!(m.manifest.name, "demo-2d");
    assert_eq!(m.manifest.noise.seed, 42);
}
