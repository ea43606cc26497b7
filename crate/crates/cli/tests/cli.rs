use std::path::{Path, PathBuf};
use std::process::Command as Process;

use persidskii::pmsm::Table;
use persidskii_cli::formats::{fmt_f64, read_json, read_table_csv, write_table_csv};
use persidskii_cli::plot::{emit_plot, PlotSpec};
use persidskii_cli::{execute, CliError, Command};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_persidskii"))
}

const SCALAR: &str = r#"
schema_version = 1

[system]
a = [[-1.0]]
b = [[1.0]]
c = [[1.0]]
d = [[1.0]]
tau = 0.5
nonlinearities = [{ kind = "tanh", scale = 1.0 }]

[certify]
gamma = 3.0

[region]
sigmas = [0.5, 1.0]
gammas = [1.5, 3.0, 10.0]
tau_hi = 10.0
tol = 1e-3
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn certify_scalar_writes_a_feasible_certificate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SCALAR);
    let out = execute(Command::Certify, &cfg, Some(&tmp.path().join("o")), None).unwrap();
    assert_eq!(out.exit_code(), 0);
    let cert = read_json(&tmp.path().join("o/certificate.json")).unwrap();
    assert_eq!(cert["status"], "feasible");
    let manifest = read_json(&tmp.path().join("o/manifest.json")).unwrap();
    assert_eq!(manifest["command"], "certify");
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn binary_certifies_and_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SCALAR);
    let o = bin().args(["certify"]).arg(&cfg).arg("-o").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn bad_control_period_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "schema_version = 1\n[experiment]\nscenario = \"observer_comparison\"\ndt_sim = 1e-4\ndt_control = 2.5e-4\n";
    let cfg = write(tmp.path(), "bad.toml", text);
    let err = execute(Command::ValidateConfig, &cfg, None, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("dt_control_multiple_of_dt_sim"), "{err}");
    let o = bin().arg("validate-config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt_control_multiple_of_dt_sim"));
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write(tmp.path(), "u.toml", "schema_version = 1\nbogus = 3\n");
    assert!(matches!(execute(Command::ValidateConfig, &unknown, None, None), Err(CliError::Config(_))));
    let version = write(tmp.path(), "v.toml", "schema_version = 7\n");
    assert_eq!(execute(Command::ValidateConfig, &version, None, None).unwrap_err().exit_code(), 2);
    let missing = execute(Command::Certify, &tmp.path().join("nope.toml"), None, None).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    let no_system = write(tmp.path(), "n.toml", "schema_version = 1\n[certify]\ngamma = 1.0\n");
    assert!(execute(Command::ValidateConfig, &no_system, None, None).unwrap_err().to_string().contains("certify_needs_system"));
    let ok = execute(Command::ValidateConfig, &configs().join("scalar_benchmark.toml"), None, None).unwrap();
    assert_eq!(ok.exit_code(), 0);
}

#[test]
fn unknown_subcommand_exits_two() {
    let o = bin().args(["frobnicate", "x.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run-experiment"));
}

#[test]
fn infeasible_certification_is_a_domain_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &SCALAR.replace("a = [[-1.0]]", "a = [[1.0]]"));
    let out = execute(Command::Certify, &cfg, Some(tmp.path()), None).unwrap();
    assert_eq!(out.exit_code(), 1);
    assert_eq!(read_json(&tmp.path().join("certificate.json")).unwrap()["status"], "infeasible");
}

#[test]
fn runs_are_deterministic_and_leave_the_config_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SCALAR);
    let before = std::fs::read(&cfg).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    execute(Command::Region, &cfg, Some(&a), None).unwrap();
    execute(Command::Region, &cfg, Some(&b), None).unwrap();
    assert_eq!(std::fs::read(&cfg).unwrap(), before);
    assert_eq!(std::fs::read(a.join("region.csv")).unwrap(), std::fs::read(b.join("region.csv")).unwrap());
    // the echoed config reproduces the run
    let c = tmp.path().join("c");
    execute(Command::Region, &a.join("config.toml"), Some(&c), None).unwrap();
    assert_eq!(std::fs::read(a.join("region.csv")).unwrap(), std::fs::read(c.join("region.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("config.toml")).unwrap(), std::fs::read(c.join("config.toml")).unwrap());
}

#[test]
fn region_csv_is_monotone_and_labelled() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SCALAR);
    execute(Command::Region, &cfg, Some(tmp.path()), None).unwrap();
    let text = std::fs::read_to_string(tmp.path().join("region.csv")).unwrap();
    assert!(text.starts_with("sigma,gamma,tau_boundary_s,status"));
    assert!(text.contains(",bounded"));
    let t = read_table_csv(&tmp.path().join("region.csv"), "region").unwrap();
    let (sig, tau) = (t.column("sigma").unwrap(), t.column("tau_boundary_s").unwrap());
    for i in 1..sig.len() {
        if sig[i] == sig[i - 1] && tau[i].is_finite() && tau[i - 1].is_finite() {
            assert!(tau[i] >= tau[i - 1] - 1e-3);
        }
    }
    assert!(tmp.path().join("region.svg").exists());
}

#[test]
fn csv_round_trips_every_value() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = Table::new("t", &["t", "x"]);
    for v in [1.0 / 3.0, 1e-300, -2.5e300, 0.1 + 0.2, f64::MIN_POSITIVE, 5e-324, f64::MAX] {
        t.push(vec![v, -v]);
    }
    t.push(vec![f64::INFINITY, f64::NEG_INFINITY]);
    let p = tmp.path().join("t.csv");
    write_table_csv(&t, &p).unwrap();
    let r = read_table_csv(&p, "t").unwrap();
    assert_eq!(r, t);
    let mut nan = Table::new("n", &["a"]);
    nan.push(vec![f64::NAN]);
    write_table_csv(&nan, &p).unwrap();
    assert!(read_table_csv(&p, "n").unwrap().rows[0][0].is_nan());
    assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
}

#[test]
fn region_status_labels_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = Table::new("region", &["sigma", "gamma", "tau_boundary_s", "status"]);
    for code in 0..4 {
        t.push(vec![1.0, code as f64 + 1.0, 0.5, code as f64]);
    }
    let p = tmp.path().join("r.csv");
    write_table_csv(&t, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    for label in ["bounded", "beyond_range", "infeasible_at_zero", "inconclusive"] {
        assert!(text.contains(label));
    }
    assert_eq!(read_table_csv(&p, "region").unwrap(), t);
}

#[test]
fn malformed_csv_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "bad.csv", "t,x\n0,1\n1,abc\n");
    assert!(matches!(read_table_csv(&p, "bad"), Err(CliError::Format(_))));
}

#[test]
fn plots_reject_empty_tables_and_missing_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p.svg");
    let empty = Table::new("e", &["t", "y"]);
    assert!(matches!(emit_plot(&empty, &PlotSpec::line("e", "t", &["y"]), &out), Err(CliError::PlotSpec(_))));
    let mut t = Table::new("t", &["t", "y"]);
    t.push(vec![0.0, 1.0]);
    t.push(vec![1.0, 2.0]);
    assert!(matches!(emit_plot(&t, &PlotSpec::line("t", "t", &["z"]), &out), Err(CliError::PlotSpec(_))));
    assert!(matches!(emit_plot(&t, &PlotSpec::line("t", "s", &["y"]), &out), Err(CliError::PlotSpec(_))));
    emit_plot(&t, &PlotSpec::line("t", "t", &["y"]), &out).unwrap();
    assert!(std::fs::read_to_string(&out).unwrap().contains("<svg"));
}

#[test]
fn identify_recovers_a_generated_linear_system() {
    let tmp = tempfile::tempdir().unwrap();
    let a = [[0.9, 0.1], [-0.05, 0.85]];
    let d = [0.1, 0.2];
    let mut csv = String::from("t,x1,x2,u1\n");
    let mut x = [1.0f64, -0.5];
    for k in 0..200 {
        let u = (0.37 * k as f64).sin();
        csv.push_str(&format!("{},{},{},{}\n", fmt_f64(0.01 * k as f64), fmt_f64(x[0]), fmt_f64(x[1]), fmt_f64(u)));
        x = [a[0][0] * x[0] + a[0][1] * x[1] + d[0] * u, a[1][0] * x[0] + a[1][1] * x[1] + d[1] * u];
    }
    write(tmp.path(), "data.csv", &csv);
    let cfg = write(
        tmp.path(),
        "id.toml",
        "schema_version = 1\n[identify]\ndata = \"data.csv\"\ndictionary = \"identity\"\ngamma = 1000.0\n",
    );
    let out = execute(Command::Identify, &cfg, Some(&tmp.path().join("o")), None).unwrap();
    assert_eq!(out.exit_code(), 0);
    let m = read_json(&tmp.path().join("o/model_unconstrained.json")).unwrap();
    let ak: Vec<f64> = m["a_k"]["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (got, want) in ak.iter().zip([0.9, 0.1, -0.05, 0.85]) {
        assert!((got - want).abs() < 1e-8, "{ak:?}");
    }
    let model = read_json(&tmp.path().join("o/model.json")).unwrap();
    assert_eq!(model["report"]["feasible"], true);
    assert!(model["report"]["rmse_constrained"].as_f64().unwrap() >= model["report"]["rmse_unconstrained"].as_f64().unwrap());
}

#[test]
fn observer_synthesis_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = execute(Command::ObserverSynth, &configs().join("observer_linear.toml"), Some(tmp.path()), None).unwrap();
    assert_eq!(out.exit_code(), 0);
    let v = read_json(&tmp.path().join("observer.json")).unwrap();
    assert!(v["gamma_hinf"].as_f64().unwrap() > 0.0);
}

#[test]
fn seed_flag_changes_and_fixes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("observer_comparison_quick.toml");
    let run = |dir: &str, seed: u64| {
        let p = tmp.path().join(dir);
        execute(Command::RunExperiment, &cfg, Some(&p), Some(seed)).unwrap();
        p
    };
    let (a, b, c) = (run("a", 3), run("b", 3), run("c", 5));
    let read = |p: &Path, s: u64| std::fs::read(p.join(format!("observer_seed{s}.csv"))).unwrap();
    assert_eq!(read(&a, 3), read(&b, 3));
    assert!(!c.join("observer_seed3.csv").exists());
    assert_ne!(read(&a, 3), read(&c, 5));
    let m = read_json(&tmp.path().join("a/manifest.json")).unwrap();
    assert_eq!(m["seed"], 3);
}
