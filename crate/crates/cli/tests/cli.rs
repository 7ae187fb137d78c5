use std::path::Path;
use std::process::{Command, Output};

fn mksd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mksd")).args(args).output().expect("spawn mksd")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn sample_then_test_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.csv");
    let data = data.to_str().unwrap();
    let o = mksd(&["sample", "--manifold", "so3", "--model", "exptrace:2", "--n", "80", "--seed", "3", "--output", data]);
    assert!(o.status.success());
    let body = std::fs::read_to_string(data).unwrap();
    assert!(body.starts_with("# run_spec: {"));
    assert_eq!(body.lines().filter(|l| !l.starts_with('#')).count(), 80);

    let args = ["test", "--manifold", "so3", "--model", "uniform", "--kernel", "exptrace:1", "--input", data, "--bootstrap", "200"];
    let a = json(&mksd(&args));
    let b = json(&mksd(&args));
    assert_eq!(a, b, "same seed, same output");
    assert_eq!(a["reject"], true);
    assert_eq!(a["run_spec"]["command"], "test");
    assert_eq!(a["n_tested"], 80);
    assert!(a.get("null_samples").is_none());

    let mut dump = args.to_vec();
    dump.push("--dump-null");
    assert_eq!(json(&mksd(&dump))["null_samples"].as_array().unwrap().len(), 200);
}

#[test]
fn auto_kernel_tests_on_the_held_out_half() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..60).map(|i| format!("{}\n", (i as f64 * 0.37).sin() * 2.0)).collect();
    let f = write(dir.path(), "c.csv", &rows);
    let v = json(&mksd(&["test", "--manifold", "circle", "--model", "vm:1,0", "--input", &f, "--bootstrap", "100"]));
    assert_eq!(v["n_tested"], 30);
    assert!(v["selection_ratio"].is_number());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "g.csv", "0.1\n0.2\n0.3\n");
    let bad = write(dir.path(), "b.csv", "0.1\nzz\n");
    let rot = write(dir.path(), "r.csv", "1,0.01,0,0,1,0,0,0,1\n");
    let code = |args: &[&str]| mksd(args).status.code().unwrap();

    assert_eq!(code(&["test", "--manifold", "circle", "--model", "bogus", "--input", &good]), 2);
    assert_eq!(code(&["test", "--manifold", "circle", "--model", "vm:1,0", "--input", &good, "--alpha", "1.5"]), 2);
    assert_eq!(code(&["test", "--manifold", "nowhere", "--model", "uniform", "--input", &good]), 2);
    assert_eq!(code(&["efficiency", "--kappa-range", "1:2:0"]), 2);
    assert_eq!(code(&["test", "--manifold", "circle", "--model", "vm:1,0", "--kernel", "vm:1", "--input", &bad]), 3);
    assert_eq!(code(&["test", "--manifold", "so3", "--model", "uniform", "--kernel", "exptrace:1", "--input", &rot]), 3);
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&["test", "--manifold", "circle", "--model", "uniform", "--input", missing.to_str().unwrap()]), 3);
    assert_eq!(code(&["efficiency", "--kappas", "1", "--grid", "8"]), 2);
    assert_eq!(code(&["efficiency", "--kappas", "20000", "--grid", "256"]), 4);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn parse_error_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "b.csv", "# c\ntheta\n0.1\n0.2,0.3\n");
    let o = mksd(&["test", "--manifold", "circle", "--model", "uniform", "--kernel", "vm:1", "--input", &bad]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
}

#[test]
fn efficiency_and_power_sim_csv() {
    let o = mksd(&["efficiency", "--kappas", "1,2", "--grid", "256"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = s.lines().collect();
    assert!(lines[0].starts_with("# run_spec: "));
    assert_eq!(lines[1], "kappa,e12,e01,numerator_ratio,denominator_ratio");
    assert_eq!(lines.len(), 4);

    let o = mksd(&[
        "power-sim", "--manifold", "circle", "--model", "uniform", "--alt", "vm:{},0", "--sweep", "kappa=0.5,3",
        "--reps", "10", "--n", "50", "--bootstrap", "100",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = String::from_utf8(o.stdout).unwrap();
    let last = s.lines().last().unwrap();
    assert_eq!(last, "kappa,3.0,1.0,0.0");

    let o = mksd(&["power-sim", "--manifold", "circle", "--model", "uniform", "--alt", "uniform", "--sweep", "kappa=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn criticize_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t.csv");
    let data = data.to_str().unwrap();
    assert!(mksd(&["sample", "--manifold", "torus2", "--model", "bvm:1,1,0,0,0.5", "--n", "120", "--output", data]).status.success());
    let prefix = dir.path().join("out");
    let v = json(&mksd(&[
        "criticize", "--model", "bvm:1,1,0,0,0.5", "--input", data, "--J", "3", "--bootstrap", "100", "--grid", "8",
        "--output", prefix.to_str().unwrap(),
    ]));
    assert_eq!(v["locations"].as_array().unwrap().len(), 3);
    let objs: Vec<f64> = v["objectives"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(objs.windows(2).all(|w| w[0] >= w[1]));
    let grid = std::fs::read_to_string(dir.path().join("out_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2 + 64);
    assert!(dir.path().join("out_locations.csv").exists());
    assert!(dir.path().join("out_objectives.csv").exists());

    let v = json(&mksd(&[
        "criticize", "--model", "bvm:1,1,0,0,0", "--input", data, "--kernel", "auto", "--J", "2", "--bootstrap", "100",
        "--grid", "0",
    ]));
    assert_eq!(v["locations"].as_array().unwrap().len(), 2);
    assert!(v["p_value"].as_f64().unwrap() <= 1.0);
}
