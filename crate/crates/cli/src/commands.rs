//! Subcommand implementations. Each writes its outputs into the run
//! directory and reports them; the manifest is written by [`execute`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use persidskii::certify::{certify_iss_with, certify_min_gamma, region_sweep, tau_max_bisection_with, BoundaryStatus, CertifyOutcome};
use persidskii::koopman::{edmd_unconstrained, identify_constrained, snapshots};
use persidskii::observer::synthesize_gain_with;
use persidskii::pmsm::{run_experiment, ExperimentConfig, ExperimentReport, Scenario, Table};
use serde_json::{json, Map, Value};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::formats::{certificate_json, matrix_json, model_json, read_training_csv, write_json, write_table_csv, FORMAT_VERSION};
use crate::plot::{emit_plot, PlotKind, PlotSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Certify,
    TauMax,
    Region,
    ObserverSynth,
    Identify,
    RunExperiment,
    ValidateConfig,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::TauMax => "tau-max",
            Command::Region => "region",
            Command::ObserverSynth => "observer-synth",
            Command::Identify => "identify",
            Command::RunExperiment => "run-experiment",
            Command::ValidateConfig => "validate-config",
        }
    }
}

/// Result of a command that ran to completion. `domain_failure` is set when
/// the computation finished but did not establish what was asked for.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Value,
    pub domain_failure: Option<String>,
    pub timings: Vec<(String, f64)>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.domain_failure.is_some())
    }
}

struct Run<'a> {
    cfg: &'a Config,
    dir: &'a Path,
    out: Outcome,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.out.files.push(p.clone());
        p
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<()> {
        let p = self.path(name);
        write_json(v, &p)
    }

    fn table(&mut self, t: &Table) -> Result<()> {
        let p = self.path(&format!("{}.csv", t.name));
        write_table_csv(t, &p)
    }

    /// Best effort: a failed plot is logged, never fatal.
    fn plot(&mut self, t: &Table, spec: &PlotSpec, name: &str) {
        let p = self.dir.join(name);
        match emit_plot(t, spec, &p) {
            Ok(()) => self.out.files.push(p),
            Err(e) => log::warn!("plot {name} skipped: {e}"),
        }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let v = f();
        self.out.timings.push((stage.into(), t.elapsed().as_secs_f64()));
        v
    }
}

/// Loads and validates the config, runs `cmd` into `output_dir` and writes
/// the manifest. The input config file is only read.
pub fn execute(cmd: Command, config_path: &Path, output_dir: Option<&Path>, seed: Option<u64>) -> Result<Outcome> {
    let start = Instant::now();
    let mut cfg = Config::load(config_path)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    if let Some(id) = cfg.identify.as_mut() {
        id.data = std::path::absolute(&id.data).map_err(CliError::io(&id.data))?;
    }
    cfg.validate()?;
    if cmd == Command::ValidateConfig {
        return Ok(Outcome { summary: json!({ "valid": true }), ..Outcome::default() });
    }
    let dir = output_dir.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let mut run = Run { cfg: &cfg, dir: &dir, out: Outcome::default() };
    match cmd {
        Command::Certify => certify(&mut run)?,
        Command::TauMax => tau_max(&mut run)?,
        Command::Region => region(&mut run)?,
        Command::ObserverSynth => observer_synth(&mut run)?,
        Command::Identify => identify(&mut run)?,
        Command::RunExperiment => experiment(&mut run)?,
        Command::ValidateConfig => unreachable!(),
    }
    let mut out = run.out;
    out.timings.push(("total".into(), start.elapsed().as_secs_f64()));
    let echo = cfg.to_toml()?;
    let echo_path = dir.join("config.toml");
    std::fs::write(&echo_path, &echo).map_err(CliError::io(&echo_path))?;
    out.files.push(echo_path);
    let manifest = json!({
        "format_version": FORMAT_VERSION,
        "command": cmd.as_str(),
        "config_path": config_path.display().to_string(),
        "config": echo,
        "seed": cfg.seed,
        "versions": { "persidskii-core": persidskii::VERSION, "persidskii-cli": env!("CARGO_PKG_VERSION") },
        "timings_s": out.timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<Map<_, _>>(),
        "outputs": out.files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "status": if out.domain_failure.is_some() { "domain_error" } else { "ok" },
        "message": out.domain_failure,
    });
    write_json(&manifest, &dir.join("manifest.json"))?;
    out.files.push(dir.join("manifest.json"));
    Ok(out)
}

fn outcome_json(o: &CertifyOutcome) -> Value {
    match o {
        CertifyOutcome::Certified(c) => {
            let mut v = certificate_json(c);
            v["status"] = json!("feasible");
            v
        }
        CertifyOutcome::Infeasible { margin } => json!({ "format_version": FORMAT_VERSION, "status": "infeasible", "margin": margin }),
        CertifyOutcome::Inconclusive { margin } => json!({ "format_version": FORMAT_VERSION, "status": "inconclusive", "margin": margin }),
    }
}

fn certify(run: &mut Run) -> Result<()> {
    let sys = run.cfg.system()?;
    let opts = run.cfg.certify_options()?;
    let spec = run.cfg.certify.clone().unwrap_or(crate::config::CertifySpec { gamma: None, tau: None });
    let tau = spec.tau.unwrap_or(sys.tau);
    let outcome = run.timed("certify", || match spec.gamma {
        Some(g) => certify_iss_with(&sys, g, tau, &opts),
        None => certify_min_gamma(&sys, tau, &opts),
    })?;
    let v = outcome_json(&outcome);
    run.json("certificate.json", &v)?;
    if !outcome.is_certified() {
        run.out.domain_failure = Some(format!("not certified at tau = {tau}: {}", v["status"].as_str().unwrap_or("")));
    }
    run.out.summary = v;
    Ok(())
}

fn tau_max(run: &mut Run) -> Result<()> {
    let sys = run.cfg.system()?;
    let opts = run.cfg.certify_options()?;
    let t = run.cfg.tau_max.clone().ok_or_else(|| CliError::Config("tau-max needs a [tau_max] section".into()))?;
    let res = run.timed("bisection", || tau_max_bisection_with(&sys, t.gamma, t.tau_lo, t.tau_hi, t.tol, &opts));
    let v = match res {
        Ok(r) => json!({
            "format_version": FORMAT_VERSION,
            "status": "bounded",
            "tau_max": r.tau_max,
            "bracket": [r.bracket.0, r.bracket.1],
            "evaluations": r.evaluations,
            "rescanned": r.rescanned,
            "gamma": t.gamma,
            "tol": t.tol,
        }),
        Err(persidskii::Error::Bracket(m)) => {
            run.out.domain_failure = Some(m.clone());
            json!({ "format_version": FORMAT_VERSION, "status": "bracket_error", "message": m, "gamma": t.gamma })
        }
        Err(e) => return Err(e.into()),
    };
    run.json("tau_max.json", &v)?;
    run.out.summary = v;
    Ok(())
}

/// Code of a boundary status in numeric tables, see [`crate::formats::status_label`].
pub fn status_code(s: BoundaryStatus) -> f64 {
    match s {
        BoundaryStatus::Bounded => 0.0,
        BoundaryStatus::BeyondRange => 1.0,
        BoundaryStatus::InfeasibleAtZero => 2.0,
        BoundaryStatus::Inconclusive => 3.0,
    }
}

fn region(run: &mut Run) -> Result<()> {
    let r = run.cfg.region.clone().ok_or_else(|| CliError::Config("region needs a [region] section".into()))?;
    let family = run.cfg.region_family()?;
    let opts = run.cfg.certify_options()?;
    let regions = run.timed("sweep", || region_sweep(&family, &r.sigmas, &r.gammas, r.tau_hi, r.tol, &opts))?;
    let mut table = Table::new("region", &["sigma", "gamma", "tau_boundary_s", "status"]);
    for reg in &regions {
        for p in &reg.points {
            table.push(vec![reg.sigma, p.gamma, p.tau_boundary.unwrap_or(f64::NAN), status_code(p.status)]);
        }
    }
    run.table(&table)?;
    run.plot(&table, &region_plot(), "region.svg");
    run.out.summary = json!({ "points": table.rows.len() });
    Ok(())
}

fn region_plot() -> PlotSpec {
    PlotSpec {
        title: "feasibility boundary".into(),
        x: "gamma".into(),
        ys: vec!["tau_boundary_s".into()],
        group_by: Some("sigma".into()),
        kind: PlotKind::Line,
    }
}

fn observer_synth(run: &mut Run) -> Result<()> {
    let sys = run.cfg.system()?;
    let o = run.cfg.observer.clone().ok_or_else(|| CliError::Config("observer-synth needs an [observer] section".into()))?;
    let meas = o.measurement()?;
    let solver = run.cfg.certify_options()?.solver;
    let res = run.timed("synthesis", || synthesize_gain_with(&sys, &meas, (o.gamma_lo, o.gamma_hi), o.tol, &solver));
    let v = match res {
        Ok(g) => json!({
            "format_version": FORMAT_VERSION,
            "status": "feasible",
            "gain": matrix_json(&g.l),
            "gamma_hinf": g.gamma_hinf,
            "certificate": certificate_json(&g.certificate),
        }),
        Err(persidskii::Error::Bracket(m)) => {
            run.out.domain_failure = Some(m.clone());
            json!({ "format_version": FORMAT_VERSION, "status": "infeasible", "message": m })
        }
        Err(e) => return Err(e.into()),
    };
    run.json("observer.json", &v)?;
    run.out.summary = v;
    Ok(())
}

fn identify(run: &mut Run) -> Result<()> {
    let spec = run.cfg.identify.clone().ok_or_else(|| CliError::Config("identify needs an [identify] section".into()))?;
    let data = read_training_csv(&spec.data)?;
    let n = data.states[0].len();
    let dict = spec.dictionary(n)?;
    let channels = spec.channels()?;
    let icfg = spec.identify_config(run.cfg.certify_options()?)?;
    let snaps = snapshots(&data.states, &data.inputs)?;
    let edmd = run.timed("edmd", || edmd_unconstrained(&dict, &snaps, &channels, data.dt))?;
    let id = run.timed("constrained", || identify_constrained(&dict, &snaps, &channels, data.dt, &icfg))?;
    run.json("model_unconstrained.json", &model_json(&edmd.model, &dict, None))?;
    let v = model_json(&id.model, &dict, Some(&id));
    run.json("model.json", &v)?;
    if !id.report.feasible {
        run.out.domain_failure = Some("constrained identification found no certified model".into());
    }
    run.out.summary = v["report"].clone();
    Ok(())
}

/// Scenario config after the seed override.
pub fn experiment_config(cfg: &Config) -> Result<ExperimentConfig> {
    let e = cfg.experiment.as_ref().ok_or_else(|| CliError::Config("run-experiment needs an [experiment] section".into()))?;
    let c = e.build(cfg.seed)?;
    c.validate()?;
    Ok(c)
}

pub fn summary_json(rep: &ExperimentReport) -> Value {
    let metrics: Map<String, Value> = rep.metrics.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let metadata: Map<String, Value> = rep.metadata.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let sources: Vec<Value> = rep
        .rmse_sources
        .iter()
        .map(|s| json!({ "key": s.key, "table": format!("{}.csv", s.table), "estimate": s.estimate, "truth": s.truth, "t0": s.t0, "t1": s.t1 }))
        .collect();
    json!({
        "format_version": FORMAT_VERSION,
        "scenario": rep.scenario.as_str(),
        "metadata": metadata,
        "metrics": metrics,
        "rmse_sources": sources,
    })
}

fn experiment(run: &mut Run) -> Result<()> {
    let cfg = experiment_config(run.cfg)?;
    let plots = run.cfg.experiment.as_ref().and_then(|e| e.plots).unwrap_or(true);
    let rep = run.timed("scenario", || run_experiment(&cfg))?;
    for t in &rep.tables {
        run.table(t)?;
    }
    let summary = summary_json(&rep);
    run.json("summary.json", &summary)?;
    if plots {
        experiment_plots(run, &rep, &cfg);
    }
    run.out.summary = summary;
    Ok(())
}

fn experiment_plots(run: &mut Run, rep: &ExperimentReport, cfg: &ExperimentConfig) {
    let omegas: Vec<String> = cfg.controllers.iter().map(|k| format!("omega_{}", k.as_str())).collect();
    match rep.scenario {
        Scenario::ObserverComparison => {
            if let Some(t) = rep.tables.first() {
                let spec = PlotSpec::line("rotor speed estimates", "t", &["true_3", "est_persidskii_3", "est_ekf_3"]);
                run.plot(t, &spec, "observer.svg");
            }
        }
        Scenario::TrackingComparison => {
            if let Some(t) = rep.tables.first() {
                let mut ys = vec!["omega_ref"];
                ys.extend(omegas.iter().map(String::as_str));
                run.plot(t, &PlotSpec::line("speed tracking", "t", &ys), "tracking.svg");
            }
        }
        Scenario::DelaySweep => {
            if let Some(t) = rep.table("delay_sweep") {
                let cols: Vec<String> = cfg.controllers.iter().map(|k| format!("rmse_{}", k.as_str())).collect();
                let ys: Vec<&str> = cols.iter().map(String::as_str).collect();
                let spec = PlotSpec { kind: PlotKind::Line, ..PlotSpec::line("speed RMSE against loop delay", "tau", &ys) };
                run.plot(&t.clone(), &spec, "delay_sweep.svg");
            }
        }
        Scenario::RegionSweep => {
            if let Some(t) = rep.table("region") {
                run.plot(&t.clone(), &region_plot(), "region.svg");
            }
        }
    }
}
