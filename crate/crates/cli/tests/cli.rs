use std::path::PathBuf;
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn dcgrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcgrid")).args(args).output().expect("binary runs")
}

fn with_u_ref(u_ref: f64) -> tempfile::NamedTempFile {
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data("paper_table1.json")).unwrap()).unwrap();
    doc["control"]["u_ref"] = u_ref.into();
    let file = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(file.path(), doc.to_string()).unwrap();
    file
}

#[test]
fn analyze_certifies_case1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let run = dcgrid(&["analyze", data("paper_table1.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["outcome"], "certified-stable");
    assert_eq!(report["existence"]["verdict"], "certified-exists");
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("outcome: certified-stable"));
    assert!(text.contains(&format!("tau2: {}", report["existence"]["tau2"])));
    assert!(text.contains(&format!("b0: {}", report["stability"]["b0"])));
}

#[test]
fn analyze_exit_codes() {
    let low = with_u_ref(50.0);
    assert_eq!(dcgrid(&["analyze", low.path().to_str().unwrap()]).status.code(), Some(3));
    let band = with_u_ref(89.6);
    assert_eq!(dcgrid(&["analyze", band.path().to_str().unwrap()]).status.code(), Some(2));

    let empty = tempfile::NamedTempFile::new().unwrap();
    let run = dcgrid(&["analyze", empty.path().to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(64));

    let bad = tempfile::NamedTempFile::new().unwrap();
    let doc = std::fs::read_to_string(data("paper_table1.json")).unwrap().replacen("\"r\": 1", "\"r\": -1", 1);
    std::fs::write(bad.path(), doc).unwrap();
    let run = dcgrid(&["analyze", bad.path().to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&run.stderr).contains("lines[0].r"));

    assert_eq!(dcgrid(&["analyze", "/nonexistent/spec.json"]).status.code(), Some(64));
}

#[test]
fn analyze_is_deterministic() {
    let band = with_u_ref(89.6);
    let a = dcgrid(&["analyze", band.path().to_str().unwrap()]);
    let b = dcgrid(&["analyze", band.path().to_str().unwrap(), "--seed", "0"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn simulate_writes_trace_and_reports_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("case7.csv");
    let run = dcgrid(&["simulate", data("case7.json").to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(10));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,u_5,u_6,u_7,u_8,u_9,u_10,us_1,us_2,us_3,us_4,il_1,il_2,il_3,il_4"
    );
    assert!(text.contains("# event t=0.05 set-loads"));
    assert!(text.lines().last().unwrap().starts_with("# termination collapsed"));
}

#[test]
fn simulate_rejects_bad_scenario() {
    let bad = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(bad.path(), std::fs::read_to_string(data("paper_table1.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    let run = dcgrid(&["simulate", bad.path().to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(64));
}

#[test]
fn sweep_bisects_reference_voltage() {
    let run = dcgrid(&[
        "sweep",
        data("paper_table1.json").to_str().unwrap(),
        "--param", "uref", "--min", "89", "--max", "90", "--bisect", "0.01", "--jobs", "2",
    ]);
    assert_eq!(run.status.code(), Some(0));
    let text = String::from_utf8(run.stdout).unwrap();
    let boundary = text.lines().find(|l| l.starts_with("# boundary")).expect("boundary line");
    let nums: Vec<f64> = boundary
        .split_whitespace()
        .filter_map(|w| w.split('=').nth(1))
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(nums[0] > 89.28 && nums[1] <= 89.64, "{boundary}");
    let values: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn sweep_damping_on_case5() {
    let run = dcgrid(&[
        "sweep",
        data("case5.json").to_str().unwrap(),
        "--param", "b", "--min", "1e-4", "--max", "1", "--bisect", "1e-4",
    ]);
    assert_eq!(run.status.code(), Some(0));
    let text = String::from_utf8(run.stdout).unwrap();
    let boundary = text.lines().find(|l| l.starts_with("# boundary")).expect("boundary line");
    let lower: f64 = boundary.split_whitespace().nth(2).unwrap()[6..].parse().unwrap();
    assert!(lower >= 0.062 * 0.95, "{boundary}");
}

#[test]
fn sweep_single_point() {
    let run = dcgrid(&[
        "sweep",
        data("paper_table1.json").to_str().unwrap(),
        "--param", "load", "--min", "1", "--max", "1", "--points", "4",
    ]);
    assert_eq!(run.status.code(), Some(0));
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
}
