use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tuplesgd"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .env_remove("TUPLESGD_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn result_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .rev()
        .find(|l| l.starts_with("RESULT "))
        .unwrap_or_else(|| panic!("no RESULT line in {}", stdout(o)))
        .to_string()
}

fn gen_system(dir: &Path, m: &str, n: &str) {
    let o = run(&["gen", "--m", m, "--n", n, "--seed", "1", "--out", "sys"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_writes_interchange_files() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--m", "100", "--n", "10", "--seed", "1", "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(result_line(&o).starts_with("RESULT gen status=ok"));
    let a = fs::read_to_string(tmp.path().join("d/A.txt")).unwrap();
    assert_eq!(a.lines().count(), 101);
    assert!(a.starts_with("100 10\n"));
    assert!(tmp.path().join("d/y.txt").exists());
    assert!(tmp.path().join("d/xstar.txt").exists());
    let manifest = fs::read_to_string(tmp.path().join("d/manifest.json")).unwrap();
    assert!(manifest.contains("\"invocation\""));

    run(&["gen", "--m", "100", "--n", "10", "--seed", "1", "--out", "e"], tmp.path());
    for f in ["A.txt", "y.txt", "xstar.txt"] {
        assert_eq!(
            fs::read(tmp.path().join("d").join(f)).unwrap(),
            fs::read(tmp.path().join("e").join(f)).unwrap()
        );
    }
}

#[test]
fn gen_rejects_zero_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen", "--m", "0", "--n", "3", "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--m"));
    assert!(result_line(&o).contains("status=fail"));
    let o = run(&["gen", "--m", "abc", "--n", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["gen", "--m", "5", "--n", "2"])
        .current_dir(tmp.path())
        .env("TUPLESGD_OUT", "results")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("results/gen/A.txt").exists());
}

#[test]
fn complete_tuple_run_matches_sgd_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    gen_system(tmp.path(), "200", "10");
    let common = ["--system", "sys", "--alpha", "0.01", "--iters", "2000", "--seed", "7"];
    let mut a = vec!["solve", "--method", "tuple-msgd", "--p", "1", "--ell", "5", "--out", "t"];
    a.extend(common);
    let mut b = vec!["solve", "--method", "sgd", "--out", "s"];
    b.extend(common);
    assert!(run(&a, tmp.path()).status.success());
    let o = run(&b, tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("final error"));
    assert_eq!(
        fs::read(tmp.path().join("t/trace.csv")).unwrap(),
        fs::read(tmp.path().join("s/trace.csv")).unwrap()
    );
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("t/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["solver"]["method"], "tuple-msgd");
}

#[test]
fn solve_rejects_non_dividing_ell() {
    let tmp = tempfile::tempdir().unwrap();
    gen_system(tmp.path(), "50", "30");
    let o = run(
        &["solve", "--system", "sys", "--method", "tuple-msgd", "--ell", "7", "--p", "0.5", "--alpha", "0.01", "--iters", "10"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ell must divide n"));
}

#[test]
fn inverse_schedule_records_mu_and_radius() {
    let tmp = tempfile::tempdir().unwrap();
    gen_system(tmp.path(), "100", "5");
    let o = run(
        &["solve", "--system", "sys", "--method", "tuple-msgd", "--ell", "5", "--p", "0.7", "--schedule", "inv-mu-k", "--iters", "500", "--out", "r"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r/config.json")).unwrap()).unwrap();
    let mu = cfg["mu"].as_f64().unwrap();
    let radius = cfg["radius"].as_f64().unwrap();
    assert!(mu > 0.0 && radius > 0.0);
    assert_eq!(cfg["solver"]["schedule"]["mu"].as_f64().unwrap(), mu);
    assert_eq!(cfg["solver"]["projection"]["radius"].as_f64().unwrap(), radius);
}

#[test]
fn solve_with_fixed_mask_file() {
    let tmp = tempfile::tempdir().unwrap();
    gen_system(tmp.path(), "4", "2");
    fs::write(tmp.path().join("mask.txt"), "4 2\n1 1\n0 0\n1 1\n1 1\n").unwrap();
    let o = run(
        &["solve", "--system", "sys", "--method", "msgd", "--p", "0.75", "--mask", "mask.txt", "--alpha", "0.01", "--iters", "20", "--out", "f"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = fs::read_to_string(tmp.path().join("f/config.json")).unwrap();
    assert!(cfg.contains("\"fixed\""));
}

#[test]
fn solve_file_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--system", "missing", "--method", "sgd", "--alpha", "0.1", "--iters", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["solve", "--system", "missing", "--method", "newton", "--alpha", "0.1", "--iters", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_bias_suite_reports_zero_for_unit_tuples() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["check", "--suite", "bias", "--ell", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let json_end = text.rfind("}\n").unwrap() + 1;
    let doc: serde_json::Value = serde_json::from_str(&text[..json_end]).unwrap();
    assert_eq!(doc["pass"], true);
    for c in doc["report"]["checks"].as_array().unwrap() {
        assert!(c["max_deviation"].as_f64().unwrap() < 1e-14);
    }
}

#[test]
fn check_unbiased_suite_passes_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["check", "--suite", "unbiased", "--out", "rep"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(result_line(&o).contains("failed=0"));
    let report = fs::read_to_string(tmp.path().join("rep/report.json")).unwrap();
    assert!(report.contains("unbiased ell=4 p=0.9"));
}

#[test]
fn check_bound_suite_ratio_at_most_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["check", "--suite", "bound", "--mc-samples", "2000", "--bound-points", "4"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let line = result_line(&o);
    let dev: f64 = line
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("max_deviation="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dev <= 1.0);
}

#[test]
fn check_over_budget_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["check", "--n", "40", "--ell", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("budget"));
    let o = run(&["check", "--suite", "everything"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_fig2_mini_ranks_tuple_first() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--preset", "fig2-mini", "--out", "b", "--workers", "2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = result_line(&o);
    assert!(line.contains("best_ell2_p0.6=tuple-msgd"), "{line}");
    assert!(line.contains("best_ell15_p0.6=tuple-msgd"), "{line}");
    let dir = tmp.path().join("b/fig2-mini");
    assert!(dir.join("spec.json").exists());
    assert!(dir.join("tuple-msgd_ell15_p0.6/rep19.csv").exists());
}

#[test]
fn bench_fig1_grid_and_rerun_checksums() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["bench", "--preset", "fig1-mini", "--replications", "2", "--out", "a"];
    assert!(run(&args, tmp.path()).status.success());
    let dir = tmp.path().join("a/fig1-mini");
    let means = fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("mean.csv").exists())
        .count();
    assert_eq!(means, 6);
    let m1: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(run(&args, tmp.path()).status.success());
    let m2: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m1["checksums"], m2["checksums"]);
    assert_eq!(m1["invocation"], m2["invocation"]);
}

#[test]
fn bench_spec_file_and_unknown_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = r#"{"name": "custom", "m": 60, "n": 4, "seed": 3,
        "models": [{"ell": 2, "p": 0.7}], "methods": ["msgd", "knn"],
        "schedule": {"kind": "fixed", "alpha": 0.01}, "iterations": 100, "replications": 2}"#;
    fs::write(tmp.path().join("spec.json"), spec).unwrap();
    let o = run(&["bench", "--spec", "spec.json", "--out", "o"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("o/custom/manifest.json")).unwrap();
    assert!(manifest.contains("spec.json"));
    assert!(tmp.path().join("o/custom/knn_ell2_p0.7/mean.csv").exists());

    assert_eq!(run(&["bench", "--preset", "fig9"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["bench"], tmp.path()).status.code(), Some(1));
}

fn sensor_fixture(dir: &Path, windows: &str) {
    let o = run(&["gen", "--cgm-windows", windows, "--seed", "2", "--out", "cg"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn cgm_pipeline_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    sensor_fixture(tmp.path(), "60");
    let o = run(
        &["cgm", "--input", "cg/sensors.csv", "--schema", "cg/schema.json", "--readings", "5", "--window-seconds", "300", "--missing-frac", "0.4", "--out", "c"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let c = fs::read_to_string(tmp.path().join("c/C.txt")).unwrap();
    assert!(c.starts_with("60 10\n"));
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("c/provenance.json")).unwrap()).unwrap();
    let frac = prov["realized_missing_fraction"].as_f64().unwrap();
    assert!((frac - 0.4).abs() <= 1.0 / 300.0 + 1e-12);
    for f in ["g.txt", "ghat.txt", "xstar.txt", "mask.txt", "traces/fixed_tuple-msgd.csv", "traces/resample_sgd.csv"] {
        assert!(tmp.path().join("c").join(f).exists(), "{f}");
    }
}

#[test]
fn cgm_without_missingness_makes_solvers_agree() {
    let tmp = tempfile::tempdir().unwrap();
    sensor_fixture(tmp.path(), "30");
    let o = run(
        &["cgm", "--input", "cg/sensors.csv", "--schema", "cg/schema.json", "--missing-frac", "0", "--out", "c"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mask = fs::read_to_string(tmp.path().join("c/mask.txt")).unwrap();
    assert!(!mask.lines().skip(1).any(|l| l.contains('0')));
    for mode in ["fixed", "resample"] {
        let read = |m: &str| fs::read(tmp.path().join(format!("c/traces/{mode}_{m}.csv"))).unwrap();
        assert_eq!(read("sgd"), read("msgd"));
        assert_eq!(read("sgd"), read("tuple-msgd"));
    }
}

#[test]
fn cgm_missing_schema_column_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    sensor_fixture(tmp.path(), "5");
    fs::write(
        tmp.path().join("bad.json"),
        r#"{"timestamp": "timestamp", "features": ["feature_1", "ecg_amplitude"], "noise": "noise", "glucose": "glucose"}"#,
    )
    .unwrap();
    let o = run(&["cgm", "--input", "cg/sensors.csv", "--schema", "bad.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ecg_amplitude"));
    let o = run(&["cgm", "--input", "nowhere.csv", "--schema", "bad.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
