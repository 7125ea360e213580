use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qnetlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnetlab"))
        .args(args)
        .env_remove("QNETLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn run_to(dir: &Path, name: &str, args: &[&str]) -> (PathBuf, String) {
    let out = dir.join(name);
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--out", out.to_str().unwrap()]);
    let result = qnetlab(&full);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    (out, text)
}

#[test]
fn sweep_writes_one_row_per_n_and_z() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--pattern", "triangle", "--n-list", "128,256", "--z-min", "-1.6", "--z-max", "-0.4", "--z-step",
        "0.1", "--trials", "200", "--seed", "7",
    ];
    let (out, text) = run_to(dir.path(), "sweep.csv", &args);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,z,p,trials,hits,fraction"));
    assert_eq!(lines.count(), 26);
    assert!(!text.contains('\r'));
    let manifest = std::fs::read_to_string(out.with_file_name("sweep.csv.manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(json["command"], "sweep");
    assert_eq!(json["config"]["seed"], 7);
}

#[test]
fn invalid_arguments_exit_with_two() {
    for args in [
        &["sweep", "--pattern", "triangle", "--n-list", "64", "--z-min", "-1", "--z-max", "-2", "--z-step", "0.1"][..],
        &["sweep", "--pattern", "nonsense", "--n-list", "64", "--z-min", "-2", "--z-max", "-1", "--z-step", "0.1"],
        &["noise", "--target", "edge", "--eps", "1.5"],
        &["protocol", "--target", "edge", "--mode", "sideways"],
        &["pm-dist", "--z", "-1.5"],
    ] {
        let result = qnetlab(args);
        assert_eq!(result.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn exact_edge_protocol_reaches_unit_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let (_, text) = run_to(dir.path(), "edge.json", &["protocol", "--target", "edge", "--mode", "exact", "--seed", "1"]);
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!((json["final_fidelity"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((json["p_F"].as_f64().unwrap() - 1.0 / 750.0).abs() < 1e-12);
    assert_eq!(json["steps"].as_array().unwrap().len(), 4);
}

#[test]
fn noisy_edge_reports_cubic_weight() {
    let dir = tempfile::tempdir().unwrap();
    let (_, text) = run_to(dir.path(), "noise.json", &["noise", "--target", "edge", "--eps", "0.2", "--mode", "exact"]);
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let positions: Vec<usize> = ["eps", "x_theory", "x_measured", "retry_budget", "pruned_mass"]
        .iter()
        .map(|k| text.find(&format!("\"{k}\":")).unwrap())
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    assert!((json["x_measured"].as_f64().unwrap() - 0.512).abs() < 1e-9);
}

#[test]
fn pm_dist_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (_, text) =
        run_to(dir.path(), "pm.csv", &["pm-dist", "--n", "1000", "--z", "-1.5", "--trials", "20", "--seed", "2"]);
    assert_eq!(text.lines().next(), Some("m,count_mean,count_std,expected_exact,expected_asymptotic"));
    assert!(text.lines().count() > 1);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["protocol", "--target", "edge", "--mode", "sampled", "--runs", "100", "--seed", "9", "--format", "csv"];
    let (_, one) = run_to(dir.path(), "a.csv", &[&args[..], &["--threads", "1"]].concat());
    let (_, four) = run_to(dir.path(), "b.csv", &[&args[..], &["--threads", "4"]].concat());
    assert_eq!(one, four);
    assert_eq!(one.lines().count(), 101);
}
