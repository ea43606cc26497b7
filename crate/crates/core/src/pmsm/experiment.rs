//! Experiment harness: observer comparison, tracking comparison, delay
//! sweep and feasibility-region sweep on the simulated machine.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use super::sim::*;
use super::{estimator_model, foc_bandwidths, holding_point, rpm_to_rad, voltage_drive, FocController, FocGains, LoadProfile, PmsmParams};
use crate::certify::{region_sweep, tau_max_bisection_with, BoundaryStatus, CertifyOptions};
use crate::error::{Error, Result};
use crate::koopman::{edmd_unconstrained, identify_constrained, snapshots, Dictionary, EdmdFit, IdentifyConfig, Identified, PhiChannel, Snapshot};
use crate::model::{HistoryBuffer, NonlinearityKind};
use crate::mppi::{CostWeights, MppiConfig};
use crate::observer::{ekf_step, observer_step, synthesize_gain, EkfConfig, MeasurementModel, ObserverGain};
use crate::stats::{rmse, rmse_window, window_indices, NoiseSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    ObserverComparison,
    TrackingComparison,
    DelaySweep,
    RegionSweep,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::ObserverComparison => "observer_comparison",
            Scenario::TrackingComparison => "tracking_comparison",
            Scenario::DelaySweep => "delay_sweep",
            Scenario::RegionSweep => "region_sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "observer_comparison" => Scenario::ObserverComparison,
            "tracking_comparison" => Scenario::TrackingComparison,
            "delay_sweep" => Scenario::DelaySweep,
            "region_sweep" => Scenario::RegionSweep,
            _ => return Err(Error::Config(format!("unknown scenario '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Foc,
    /// MPPI over the unconstrained EDMD fit.
    EdmdMppi,
    /// MPPI over the stability-constrained fit.
    IcodeMppi,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Foc => "foc",
            ControllerKind::EdmdMppi => "edmd_mppi",
            ControllerKind::IcodeMppi => "icode_mppi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "foc" => ControllerKind::Foc,
            "edmd_mppi" => ControllerKind::EdmdMppi,
            "icode_mppi" => ControllerKind::IcodeMppi,
            _ => return Err(Error::Config(format!("unknown controller '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Persidskii,
    Ekf,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Persidskii => "persidskii",
            EstimatorKind::Ekf => "ekf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "persidskii" => EstimatorKind::Persidskii,
            "ekf" => EstimatorKind::Ekf,
            _ => return Err(Error::Config(format!("unknown estimator '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverSettings {
    pub speed_rpm: f64,
    pub step_time: f64,
    pub step_torque: f64,
    pub t_end: f64,
    /// RMSE window length after the step (s).
    pub window: f64,
    /// Sensor noise variance on each measured current (A²).
    pub noise_var: f64,
    /// Relative initial error on ω_m.
    pub omega_init_error: f64,
    /// Relative band for the recovery time.
    pub band: f64,
    pub ekf_process_diag: [f64; 3],
    pub gamma_bracket: (f64, f64),
    pub bisect_tol: f64,
    pub n_seeds: usize,
}

impl Default for ObserverSettings {
    fn default() -> Self {
        ObserverSettings {
            speed_rpm: 1000.0,
            step_time: 1.0,
            step_torque: 2.0,
            t_end: 3.0,
            window: 2.0,
            noise_var: 0.05,
            omega_init_error: 0.2,
            band: 0.02,
            ekf_process_diag: [1e-2, 1e-2, 1e-1],
            gamma_bracket: (0.1, 10.0),
            bisect_tol: 1e-3,
            n_seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiSettings {
    pub rollouts: usize,
    pub horizon: f64,
    pub lambda_temp: f64,
    /// Exploration noise as a fraction of the voltage limit.
    pub noise_frac: f64,
    /// Weights on the normalized speed error, d-current and voltages.
    pub q_speed: f64,
    pub q_id: f64,
    pub r_u: f64,
    pub divergence_bound: f64,
}

impl Default for MppiSettings {
    fn default() -> Self {
        MppiSettings {
            rollouts: 256,
            horizon: 0.02,
            lambda_temp: 10.0,
            noise_frac: 0.1,
            q_speed: 1e5,
            q_id: 1e4,
            r_u: 1.0,
            divergence_bound: 1e3,
        }
    }
}

/// Open-loop excitation for identification: log-chirp voltages with PRBS
/// voltage dither and a PRBS load, sampled at `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationConfig {
    pub duration: f64,
    pub dt: f64,
    pub uq_offset: f64,
    pub uq_amp: f64,
    pub ud_amp: f64,
    pub dither: f64,
    pub f0: f64,
    pub f1: f64,
    pub load_max: f64,
    pub prbs_period: f64,
    pub seed: u64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        ExcitationConfig {
            duration: 50.0,
            dt: 1e-3,
            uq_offset: 55.0,
            uq_amp: 35.0,
            ud_amp: 15.0,
            dither: 5.0,
            f0: 0.1,
            f1: 20.0,
            load_max: 2.0,
            prbs_period: 0.25,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationSettings {
    pub degree: u32,
    pub excitation: ExcitationConfig,
    pub identify: IdentifyConfig,
}

impl Default for IdentificationSettings {
    fn default() -> Self {
        IdentificationSettings { degree: 2, excitation: ExcitationConfig::default(), identify: IdentifyConfig { gamma: 1e4, ..IdentifyConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSettings {
    pub t_end: f64,
    /// Start of the RMSE window (s).
    pub rmse_from: f64,
    pub load: LoadProfile,
    pub n_seeds: usize,
}

impl Default for TrackingSettings {
    fn default() -> Self {
        TrackingSettings { t_end: 4.0, rmse_from: 0.5, load: LoadProfile::default(), n_seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub tau_grid: Vec<f64>,
    /// RMSE above this multiple of the first grid point counts as unstable.
    pub divergence_factor: f64,
    pub certified_loop: CertifiedLoop,
    pub gamma: f64,
    pub tau_hi: f64,
    pub tau_tol: f64,
    pub onset_t_end: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            tau_grid: vec![5e-3, 8e-3, 11e-3, 14e-3, 17e-3, 20e-3],
            divergence_factor: 10.0,
            certified_loop: CertifiedLoop::default(),
            gamma: 1e4,
            tau_hi: 0.05,
            tau_tol: 1e-5,
            onset_t_end: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSettings {
    pub gain_ratios: Vec<f64>,
    pub gammas: Vec<f64>,
    pub tau_hi: f64,
    pub tau_tol: f64,
}

impl Default for RegionSettings {
    fn default() -> Self {
        RegionSettings { gain_ratios: vec![1.3, 1.6, 2.0], gammas: vec![2e3, 5e3, 1e4], tau_hi: 0.05, tau_tol: 1e-5 }
    }
}

/// Everything a scenario run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub params: PmsmParams,
    pub dt_sim: f64,
    pub dt_control: f64,
    pub tau_injected: f64,
    pub delay_mode: DelayMode,
    pub noise_seed: u64,
    pub reference: SpeedReference,
    /// Upper current-loop bandwidth of the FOC baseline (Hz).
    pub foc_current_hz: f64,
    pub controllers: Vec<ControllerKind>,
    pub estimators: Vec<EstimatorKind>,
    pub observer: ObserverSettings,
    pub mppi: MppiSettings,
    pub identification: IdentificationSettings,
    pub tracking: TrackingSettings,
    pub sweep: SweepSettings,
    pub region: RegionSettings,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        ExperimentConfig {
            scenario,
            params: PmsmParams::default(),
            dt_sim: 1e-4,
            dt_control: 1e-3,
            tau_injected: 5e-3,
            delay_mode: DelayMode::Transport,
            noise_seed: 0,
            reference: SpeedReference::default(),
            foc_current_hz: 500.0,
            controllers: vec![ControllerKind::Foc, ControllerKind::EdmdMppi, ControllerKind::IcodeMppi],
            estimators: vec![EstimatorKind::Persidskii, EstimatorKind::Ekf],
            observer: ObserverSettings::default(),
            mppi: MppiSettings::default(),
            identification: IdentificationSettings::default(),
            tracking: TrackingSettings::default(),
            sweep: SweepSettings::default(),
            region: RegionSettings::default(),
        }
    }

    /// Checks every invariant; errors name the violated rule.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        control_ratio(self.dt_sim, self.dt_control)?;
        let multiple = |tau: f64, name: &str| -> Result<()> {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("{name}: delay must be non-negative, got {tau}")));
            }
            let r = tau / self.dt_control;
            if (r - libm::round(r)).abs() > 1e-9 * r.max(1.0) {
                return Err(Error::Config(format!("{name}_multiple_of_dt_control: {tau} is not a multiple of dt_control")));
            }
            Ok(())
        };
        multiple(self.tau_injected, "tau_injected")?;
        for &t in &self.sweep.tau_grid {
            multiple(t, "tau_grid")?;
        }
        if self.sweep.tau_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("tau_grid_ascending: the delay grid must be strictly ascending".into()));
        }
        self.reference.validate()?;
        self.tracking.load.validate(self.params.rated_torque)?;
        let o = &self.observer;
        if !(o.noise_var >= 0.0) || !(o.window > 0.0) || !(o.t_end >= o.step_time + o.window) || o.n_seeds == 0 {
            return Err(Error::Config("observer_window: need noise_var ≥ 0, n_seeds ≥ 1 and t_end ≥ step_time + window".into()));
        }
        if !(0.0..=self.params.rated_torque).contains(&o.step_torque) {
            return Err(Error::Config("observer_step_torque: load step outside the brake range".into()));
        }
        if self.tracking.n_seeds == 0 || !(self.tracking.t_end > self.tracking.rmse_from) {
            return Err(Error::Config("tracking_window: need n_seeds ≥ 1 and t_end > rmse_from".into()));
        }
        let e = &self.identification.excitation;
        control_ratio(self.dt_sim, e.dt)?;
        if !(e.duration > 10.0 * e.dt && e.prbs_period > 0.0 && e.f1 > e.f0 && e.f0 > 0.0) {
            return Err(Error::Config("excitation: need duration ≫ dt, prbs_period > 0 and 0 < f0 < f1".into()));
        }
        let m = &self.mppi;
        if m.rollouts == 0 || !(m.horizon >= self.dt_control) || !(m.lambda_temp > 0.0) || !(m.noise_frac > 0.0) {
            return Err(Error::Config("mppi: need rollouts ≥ 1, horizon ≥ dt_control, lambda and noise positive".into()));
        }
        if self.region.gammas.windows(2).any(|w| w[1] <= w[0]) || self.region.gammas.is_empty() {
            return Err(Error::Config("region_gammas_ascending: the γ grid must be non-empty and ascending".into()));
        }
        Ok(())
    }
}

/// A numeric table; the authoritative output of every scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name).ok_or_else(|| Error::Config(format!("table {} has no column {name}", self.name)))?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// How a reported RMSE is recomputed from a table: RMSE of `estimate`
/// against `truth` (or zero when `truth` is `None`) over `t0 ≤ t ≤ t1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseSource {
    pub key: String,
    pub table: String,
    pub estimate: String,
    pub truth: Option<String>,
    pub t0: f64,
    pub t1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub tables: Vec<Table>,
    /// Scalar results in insertion order.
    pub metrics: Vec<(String, f64)>,
    pub rmse_sources: Vec<RmseSource>,
    pub metadata: Vec<(String, String)>,
}

impl ExperimentReport {
    fn new(scenario: Scenario, cfg: &ExperimentConfig) -> Self {
        let p = &cfg.params;
        let metadata = vec![
            ("scenario".into(), scenario.as_str().into()),
            ("crate_version".into(), env!("CARGO_PKG_VERSION").into()),
            (
                "params".into(),
                format!(
                    "R_s={} L_s={} psi_f={} p={} J={} B_f={} rated_speed_rpm={} u_max={} i_max={}",
                    p.r_s, p.l_s, p.psi_f, p.p_pairs, p.j, p.b_f, p.rated_speed_rpm, p.u_max, p.i_max
                ),
            ),
            ("dt_sim".into(), format!("{}", cfg.dt_sim)),
            ("dt_control".into(), format!("{}", cfg.dt_control)),
            ("tau_injected".into(), format!("{}", cfg.tau_injected)),
            ("delay_mode".into(), cfg.delay_mode.as_str().into()),
            ("noise_seed".into(), format!("{}", cfg.noise_seed)),
        ];
        ExperimentReport { scenario, tables: vec![], metrics: vec![], rmse_sources: vec![], metadata }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn meta(&mut self, key: &str, value: String) {
        self.metadata.push((key.into(), value));
    }

    /// Computes an RMSE from a stored table, records it and its source.
    fn add_rmse(&mut self, src: RmseSource) -> Result<f64> {
        let v = recompute_rmse(self, &src)?;
        self.metrics.push((src.key.clone(), v));
        self.rmse_sources.push(src);
        Ok(v)
    }
}

/// RMSE named by `src` recomputed from the report's tables. Rows with a
/// non-finite estimate inside the window give `+∞` (divergent run).
pub fn recompute_rmse(report: &ExperimentReport, src: &RmseSource) -> Result<f64> {
    let table = report.table(&src.table).ok_or_else(|| Error::Config(format!("no table {}", src.table)))?;
    recompute_rmse_from(table, src)
}

pub fn recompute_rmse_from(table: &Table, src: &RmseSource) -> Result<f64> {
    let t = table.column("t")?;
    let est = table.column(&src.estimate)?;
    let truth = match &src.truth {
        Some(c) => table.column(c)?,
        None => vec![0.0; t.len()],
    };
    let r = window_indices(&t, src.t0, src.t1);
    if est[r.clone()].iter().any(|v| !v.is_finite()) {
        return Ok(f64::INFINITY);
    }
    rmse_window(&t, &est, &truth, src.t0, src.t1)
}

fn seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// FOC baseline tuned for the nominal injected delay.
pub fn foc_gains(cfg: &ExperimentConfig) -> Result<FocGains> {
    FocGains::delay_tuned(&cfg.params, cfg.tau_injected, cfg.foc_current_hz)
}

fn foc_at(cfg: &ExperimentConfig, x0: &DVector<f64>, u0: &DVector<f64>) -> Result<FocController> {
    let mut foc = FocController::new(foc_gains(cfg)?, cfg.params, cfg.dt_control)?;
    foc.preload(x0, u0);
    Ok(foc)
}

/// Load unit of the observer synthesis (N·m per unit of disturbance).
pub const OBSERVER_LOAD_UNIT: f64 = 1e-3;

/// The speed-loop estimation setup shared by both estimators.
pub struct ObserverSetup {
    pub model: crate::model::PersidskiiSystem,
    pub meas: MeasurementModel,
    pub gain: ObserverGain,
    pub ekf: EkfConfig,
}

pub fn observer_setup(cfg: &ExperimentConfig) -> Result<ObserverSetup> {
    let p = &cfg.params;
    let o = &cfg.observer;
    // load channel in mN·m keeps γ near unity for the strictness margin
    let model = estimator_model(p, p.omega_e_max())?;
    let scaled = model.with_d(&model.d * OBSERVER_LOAD_UNIT);
    let std = libm::sqrt(o.noise_var);
    let meas = MeasurementModel::new(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), vec![std, std])?;
    let mut gain = synthesize_gain(&scaled, &meas, o.gamma_bracket, o.bisect_tol)?;
    gain.gamma_hinf /= OBSERVER_LOAD_UNIT;
    let w0 = rpm_to_rad(o.speed_rpm);
    let var_r = o.noise_var.max(1e-12);
    let ekf = EkfConfig {
        process_cov: DMatrix::from_diagonal(&DVector::from_column_slice(&o.ekf_process_diag)),
        measurement_cov: DMatrix::identity(2, 2) * var_r,
        initial_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![var_r, var_r, { let s0 = o.omega_init_error * w0; (s0 * s0).max(1e-6) }])),
    };
    Ok(ObserverSetup { model, meas, gain, ekf })
}

/// First time after `t_event` from which the estimate stays within
/// `band·|truth|` until `t_end`; the window length if never.
fn recovery_time(t: &[f64], est: &[f64], truth: &[f64], t_event: f64, t_end: f64, band: f64) -> f64 {
    crate::stats::settling_time(t, est, truth, t_event, t_end, band).unwrap_or(t_end - t_event)
}

/// Plant, FOC and both estimators co-simulated for one noise seed. The
/// currents are sampled and both estimators stepped every simulation step;
/// FOC acts on the true state every control period. Rows are logged at the
/// control rate.
fn observer_run(cfg: &ExperimentConfig, setup: &ObserverSetup, seed: u64) -> Result<Table> {
    let p = &cfg.params;
    let o = &cfg.observer;
    let w0 = rpm_to_rad(o.speed_rpm);
    let (x0, u0) = holding_point(p, w0, 0.0);
    let load = LoadProfile::Step { time: o.step_time, magnitude: o.step_torque };
    let ratio = control_ratio(cfg.dt_sim, cfg.dt_control)?;
    let h = cfg.dt_sim;
    let mut foc = foc_at(cfg, &x0, &u0)?;
    let mut x0_est = x0.clone();
    x0_est[2] *= 1.0 - o.omega_init_error;
    let window = setup.model.tau + h;
    let mut hist_p = HistoryBuffer::constant(x0_est.clone(), 0.0, h, window);
    let mut hist_e = HistoryBuffer::constant(x0_est.clone(), 0.0, h, window);
    let mut cov = setup.ekf.initial_cov.clone();
    let mut noise = NoiseSource::new(seed);
    let n_ctrl = libm::round(o.t_end / cfg.dt_control) as usize;
    let mut line = DelayLine::new(cfg.delay_mode, cfg.tau_injected, h, &u0);
    let mut x = x0.clone();
    let (mut xp, mut xe) = (x0_est.clone(), x0_est);
    let mut y = setup.meas.measure(&x, &mut noise);
    let mut table = Table::new(
        &format!("observer_seed{seed}"),
        &["t", "true_1", "true_2", "true_3", "est_persidskii_1", "est_persidskii_2", "est_persidskii_3", "est_ekf_1", "est_ekf_2", "est_ekf_3"],
    );
    let mut cmd = u0.clone();
    for k in 0..=n_ctrl * ratio {
        let t = k as f64 * h;
        if k % ratio == 0 {
            table.push(vec![t, x[0], x[1], x[2], xp[0], xp[1], xp[2], xe[0], xe[1], xe[2]]);
            if k == n_ctrl * ratio {
                break;
            }
            cmd = foc.step(&x, w0)?.0;
        }
        let u = line.advance(&cmd, h);
        x = plant_rk4(p, &x, &u, &load, t, h)?;
        // the brake torque is commanded, so both estimators know it
        let drive = voltage_drive(p, &u) + &setup.model.d * load.at(t);
        let y_next = setup.meas.measure(&x, &mut noise);
        xp = observer_step(&setup.gain, &setup.model, &setup.meas, &mut hist_p, &y, &drive, h)?;
        let (m, c) = ekf_step(&setup.ekf, &setup.model, &setup.meas, &mut hist_e, &cov, &y_next, &drive, h)?;
        xe = m;
        cov = c;
        y = y_next;
    }
    Ok(table)
}

/// Speed-estimation comparison after a load step, one table per seed.
pub fn run_observer_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let setup = observer_setup(cfg)?;
    run_observer_with(cfg, &setup)
}

pub fn run_observer_with(cfg: &ExperimentConfig, setup: &ObserverSetup) -> Result<ExperimentReport> {
    let o = &cfg.observer;
    let mut rep = ExperimentReport::new(Scenario::ObserverComparison, cfg);
    rep.meta("observer_gain", format!("{:?}", setup.gain.l.as_slice()));
    rep.meta("observer_gamma", format!("{}", setup.gain.gamma_hinf));
    rep.meta("ekf_process_cov_diag", format!("{:?}", o.ekf_process_diag));
    rep.meta("ekf_measurement_cov", format!("{}", o.noise_var));
    let (t0, t1) = (o.step_time, o.step_time + o.window);
    let mut summary = Table::new("observer_summary", &["seed", "rmse_persidskii", "rmse_ekf", "recovery_persidskii", "recovery_ekf"]);
    let (mut wins_rmse, mut wins_rec) = (0.0, 0.0);
    for seed in seeds(cfg.noise_seed, o.n_seeds) {
        let table = observer_run(cfg, setup, seed)?;
        let name = table.name.clone();
        let t = table.column("t")?;
        let truth = table.column("true_3")?;
        let rec: Vec<f64> = ["est_persidskii_3", "est_ekf_3"]
            .iter()
            .map(|c| Ok(recovery_time(&t, &table.column(c)?, &truth, t0, t1, o.band)))
            .collect::<Result<_>>()?;
        rep.tables.push(table);
        let mut r = [0.0; 2];
        for (i, est) in ["persidskii", "ekf"].iter().enumerate() {
            r[i] = rep.add_rmse(RmseSource {
                key: format!("rmse_speed.{est}.seed{seed}"),
                table: name.clone(),
                estimate: format!("est_{est}_3"),
                truth: Some("true_3".into()),
                t0,
                t1,
            })?;
            rep.metrics.push((format!("recovery.{est}.seed{seed}"), rec[i]));
        }
        if r[0] < r[1] {
            wins_rmse += 1.0;
        }
        if rec[0] < rec[1] {
            wins_rec += 1.0;
        }
        summary.push(vec![seed as f64, r[0], r[1], rec[0], rec[1]]);
    }
    rep.metrics.push(("wins_rmse".into(), wins_rmse));
    rep.metrics.push(("wins_recovery".into(), wins_rec));
    rep.metrics.push(("seeds".into(), o.n_seeds as f64));
    rep.tables.push(summary);
    Ok(rep)
}

/// Model coordinates: centered on the holding point at the excitation's
/// mean speed.
pub fn excitation_normalization(params: &PmsmParams, exc: &ExcitationConfig) -> Normalization {
    Normalization::centered(params, exc.uq_offset / (params.p_pairs * params.psi_f))
}

/// Identification data: normalized states and inputs sampled at `exc.dt`.
pub fn excitation_data(params: &PmsmParams, exc: &ExcitationConfig, dt_sim: f64) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let ratio = control_ratio(dt_sim, exc.dt)?;
    let norm = excitation_normalization(params, exc);
    let n = libm::round(exc.duration / exc.dt) as usize;
    let mut noise = NoiseSource::new(exc.seed);
    let w_start = exc.uq_offset / (params.p_pairs * params.psi_f);
    let (mut x, _) = holding_point(params, w_start, 0.0);
    let k_rate = libm::log(exc.f1 / exc.f0) / exc.duration;
    let phase = |t: f64| 2.0 * core::f64::consts::PI * exc.f0 * (libm::exp(k_rate * t) - 1.0) / k_rate;
    let per_prbs = (libm::round(exc.prbs_period / exc.dt) as usize).max(1);
    let mut load_level = 0.0;
    let mut dither = [0.0; 2];
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * exc.dt;
        if k % per_prbs == 0 {
            load_level = if noise.uniform() < 0.5 { 0.0 } else { exc.load_max };
            for d in &mut dither {
                *d = if noise.uniform() < 0.5 { -exc.dither } else { exc.dither };
            }
        }
        let ph = phase(t);
        let u = DVector::from_vec(vec![
            exc.ud_amp * libm::sin(1.37 * ph + 0.5) + dither[0],
            exc.uq_offset + exc.uq_amp * libm::sin(ph) + dither[1],
        ]);
        states.push(norm.state(&x));
        inputs.push(norm.input(&u));
        let load = LoadProfile::Step { time: f64::NEG_INFINITY, magnitude: load_level };
        for i in 0..ratio {
            x = plant_rk4(params, &x, &u, &load, t + i as f64 * dt_sim, dt_sim)?;
        }
    }
    states.push(norm.state(&x));
    Ok((states, inputs))
}

/// Both identified models with their dictionary and scaling.
pub struct PmsmModels {
    pub degree: u32,
    pub dict: Dictionary,
    pub norm: Normalization,
    pub channels: Vec<PhiChannel>,
    pub edmd: EdmdFit,
    pub icode: Identified,
    pub n_snapshots: usize,
}

/// Lifted nonlinearity channels of the identified models: the two
/// cross-coupling products, scheduled by the normalized speed over the
/// operating box.
pub fn identification_channels(_params: &PmsmParams) -> Vec<PhiChannel> {
    vec![PhiChannel { coordinate: 2, kind: NonlinearityKind::Tanh { scale: 1.0 } }]
}

pub fn identify_pmsm(cfg: &ExperimentConfig) -> Result<PmsmModels> {
    let id = &cfg.identification;
    let norm = excitation_normalization(&cfg.params, &id.excitation);
    let (states, inputs) = excitation_data(&cfg.params, &id.excitation, cfg.dt_sim)?;
    let data: Vec<Snapshot> = snapshots(&states, &inputs)?;
    let dict = Dictionary::polynomial(3, id.degree);
    let channels = identification_channels(&cfg.params);
    let dt = id.excitation.dt;
    let edmd = edmd_unconstrained(&dict, &data, &channels, dt)?;
    let icode = identify_constrained(&dict, &data, &channels, dt, &id.identify)?;
    Ok(PmsmModels { degree: id.degree, dict, norm, channels, edmd, icode, n_snapshots: data.len() })
}

fn mppi_config(cfg: &ExperimentConfig, norm: &Normalization, seed: u64) -> MppiConfig {
    let m = &cfg.mppi;
    let (u_min, u_max) = norm.input_bounds(cfg.params.u_max);
    MppiConfig {
        rollouts: m.rollouts,
        horizon: m.horizon,
        dt: cfg.dt_control,
        lambda_temp: m.lambda_temp,
        noise_std: vec![m.noise_frac; 2],
        seed,
        u_min,
        u_max,
        divergence_bound: m.divergence_bound,
    }
}

fn mppi_weights_of(cfg: &ExperimentConfig) -> CostWeights {
    let m = &cfg.mppi;
    CostWeights {
        q_cost: DMatrix::from_diagonal(&DVector::from_vec(vec![m.q_id, 0.0, m.q_speed])),
        r_cost: DMatrix::identity(2, 2) * m.r_u,
    }
}

/// Closes one loop with `tau` of actual delay. Controllers are designed for
/// the nominal `cfg.tau_injected`, so extra sweep delay is unmodelled.
pub fn run_controller(
    cfg: &ExperimentConfig,
    models: Option<&PmsmModels>,
    kind: ControllerKind,
    tau: f64,
    seed: u64,
    t_end: f64,
    load: &LoadProfile,
) -> Result<LoopRun> {
    let p = &cfg.params;
    let w0 = cfg.reference.at(0.0);
    let (x0, u0) = holding_point(p, w0, load.at(0.0));
    let loop_cfg = LoopConfig {
        dt_sim: cfg.dt_sim,
        dt_control: cfg.dt_control,
        tau,
        delay_mode: cfg.delay_mode,
        t_end,
        x0: x0.clone(),
        u0: u0.clone(),
        load: load.clone(),
        reference: cfg.reference,
        speed_guard: 10.0 * rpm_to_rad(p.rated_speed_rpm),
    };
    match kind {
        ControllerKind::Foc => {
            let mut foc = foc_at(cfg, &x0, &u0)?;
            run_loop(p, &mut foc, &loop_cfg)
        }
        ControllerKind::EdmdMppi | ControllerKind::IcodeMppi => {
            let m = models.ok_or_else(|| Error::Config("MPPI controllers need identified models".into()))?;
            let model = if kind == ControllerKind::EdmdMppi { m.edmd.model.clone() } else { m.icode.model.clone() };
            let mut c = MppiSpeedController::new(kind.as_str(), model, m.dict.clone(), mppi_config(cfg, &m.norm, seed), mppi_weights_of(cfg), m.norm, cfg.tau_injected, &u0)?;
            run_loop(p, &mut c, &loop_cfg)
        }
    }
}

fn identification_metrics(rep: &mut ExperimentReport, m: &PmsmModels) {
    let r = &m.icode.report;
    rep.metrics.push(("identification.rmse_unconstrained".into(), r.rmse_unconstrained));
    rep.metrics.push(("identification.rmse_constrained".into(), r.rmse_constrained));
    rep.metrics.push(("identification.lmi_margin".into(), r.lmi_margin));
    rep.metrics.push(("identification.eps_strict".into(), r.eps_strict));
    rep.metrics.push(("identification.feasible".into(), f64::from(u8::from(r.feasible))));
    if let Some(c) = &m.icode.certificate {
        rep.metrics.push(("identification.gamma".into(), c.gamma));
    }
    rep.meta("identification_snapshots", format!("{}", m.n_snapshots));
    rep.meta("identification_dictionary", format!("monomials up to degree {} ({} observables)", m.degree, m.dict.n_g()));
}

/// Speed-tracking comparison on the reference profile at the nominal delay.
pub fn run_tracking_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let needs_model = cfg.controllers.iter().any(|c| *c != ControllerKind::Foc);
    let models = if needs_model { Some(identify_pmsm(cfg)?) } else { None };
    run_tracking_with(cfg, models.as_ref())
}

fn series_table(name: &str, runs: &[(ControllerKind, LoopRun)], t_end: f64, dt: f64) -> Table {
    let mut cols: Vec<String> = vec!["t".into(), "omega_ref".into()];
    for (k, _) in runs {
        cols.push(format!("omega_{}", k.as_str()));
        cols.push(format!("id_{}", k.as_str()));
        cols.push(format!("iq_{}", k.as_str()));
    }
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new(name, &col_refs);
    let n = libm::round(t_end / dt) as usize + 1;
    let reference = runs.first().map(|(_, r)| r);
    for i in 0..n {
        let t = i as f64 * dt;
        let wref = reference.and_then(|r| r.speed_ref.get(i).copied()).unwrap_or(f64::NAN);
        let mut row = vec![t, wref];
        for (_, r) in runs {
            match r.states.get(i) {
                Some(x) => row.extend_from_slice(&[x[2], x[0], x[1]]),
                None => row.extend_from_slice(&[f64::NAN; 3]),
            }
        }
        table.push(row);
    }
    table
}

pub fn run_tracking_with(cfg: &ExperimentConfig, models: Option<&PmsmModels>) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(Scenario::TrackingComparison, cfg);
    let tr = &cfg.tracking;
    let gains = foc_gains(cfg)?;
    let (bw_i, bw_w) = foc_bandwidths(&cfg.params, &gains)?;
    rep.meta("foc_gains", format!("kp_i={} ki_i={} kp_w={} ki_w={}", gains.kp_i, gains.ki_i, gains.kp_w, gains.ki_w));
    rep.meta("foc_bandwidth_hz", format!("current={bw_i} speed={bw_w}"));
    if let Some(m) = models {
        identification_metrics(&mut rep, m);
    }
    let mut summary_cols = vec!["seed".to_string()];
    for k in &cfg.controllers {
        summary_cols.push(format!("rmse_speed_{}", k.as_str()));
        summary_cols.push(format!("rmse_id_{}", k.as_str()));
    }
    let refs: Vec<&str> = summary_cols.iter().map(|s| s.as_str()).collect();
    let mut summary = Table::new("tracking_summary", &refs);
    for seed in seeds(cfg.noise_seed, tr.n_seeds) {
        let mut runs = Vec::new();
        for &k in &cfg.controllers {
            runs.push((k, run_controller(cfg, models, k, cfg.tau_injected, seed, tr.t_end, &tr.load)?));
        }
        let name = format!("tracking_seed{seed}");
        rep.tables.push(series_table(&name, &runs, tr.t_end, cfg.dt_control));
        let mut row = vec![seed as f64];
        for (k, _) in &runs {
            let c = k.as_str();
            let rs = rep.add_rmse(RmseSource {
                key: format!("rmse_speed.{c}.seed{seed}"),
                table: name.clone(),
                estimate: format!("omega_{c}"),
                truth: Some("omega_ref".into()),
                t0: tr.rmse_from,
                t1: tr.t_end,
            })?;
            let ri = rep.add_rmse(RmseSource {
                key: format!("rmse_id.{c}.seed{seed}"),
                table: name.clone(),
                estimate: format!("id_{c}"),
                truth: None,
                t0: tr.rmse_from,
                t1: tr.t_end,
            })?;
            row.push(rs);
            row.push(ri);
        }
        summary.push(row);
    }
    rep.tables.push(summary);
    Ok(rep)
}

/// Certified standstill loop: LMI delay bound against the simulated onset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetComparison {
    pub tau_max_lmi: f64,
    pub tau_empirical: f64,
    pub relative_gap: f64,
}

pub fn certified_loop_comparison(cfg: &ExperimentConfig) -> Result<OnsetComparison> {
    let s = &cfg.sweep;
    let lp = s.certified_loop;
    let sys = lp.system(&cfg.params, 0.0)?;
    let lmi = tau_max_bisection_with(&sys, s.gamma, 0.0, s.tau_hi, s.tau_tol, &CertifyOptions::default())?;
    let emp = lp.empirical_onset(&cfg.params, s.tau_tol.max(1e-4), s.tau_hi, s.tau_tol, s.onset_t_end)?;
    Ok(OnsetComparison { tau_max_lmi: lmi.tau_max, tau_empirical: emp, relative_gap: (emp - lmi.tau_max).abs() / lmi.tau_max })
}

/// RMSE-vs-delay sweep per controller plus the certified-loop comparison.
pub fn run_delay_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let needs_model = cfg.controllers.iter().any(|c| *c != ControllerKind::Foc);
    let models = if needs_model { Some(identify_pmsm(cfg)?) } else { None };
    run_delay_sweep_with(cfg, models.as_ref())
}

pub fn run_delay_sweep_with(cfg: &ExperimentConfig, models: Option<&PmsmModels>) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(Scenario::DelaySweep, cfg);
    let s = &cfg.sweep;
    let tr = &cfg.tracking;
    if let Some(m) = models {
        identification_metrics(&mut rep, m);
    }
    let mut cols = vec!["tau".to_string()];
    for k in &cfg.controllers {
        cols.push(format!("rmse_{}", k.as_str()));
        cols.push(format!("unstable_{}", k.as_str()));
    }
    let refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut sweep = Table::new("delay_sweep", &refs);
    let mut nominal: Vec<Option<f64>> = vec![None; cfg.controllers.len()];
    let mut onset: Vec<Option<f64>> = vec![None; cfg.controllers.len()];
    for &tau in &s.tau_grid {
        let mut runs = Vec::new();
        for &k in &cfg.controllers {
            runs.push((k, run_controller(cfg, models, k, tau, cfg.noise_seed, tr.t_end, &tr.load)?));
        }
        let name = format!("sweep_tau{}us", libm::round(tau * 1e6) as u64);
        rep.tables.push(series_table(&name, &runs, tr.t_end, cfg.dt_control));
        let mut row = vec![tau];
        for (i, (k, _)) in runs.iter().enumerate() {
            let c = k.as_str();
            let r = rep.add_rmse(RmseSource {
                key: format!("rmse_speed.{c}.tau{}us", libm::round(tau * 1e6) as u64),
                table: name.clone(),
                estimate: format!("omega_{c}"),
                truth: Some("omega_ref".into()),
                t0: tr.rmse_from,
                t1: tr.t_end,
            })?;
            let base = *nominal[i].get_or_insert(r);
            let unstable = !r.is_finite() || r > s.divergence_factor * base;
            if unstable && onset[i].is_none() {
                onset[i] = Some(tau);
            }
            row.push(r);
            row.push(f64::from(u8::from(unstable)));
        }
        sweep.push(row);
    }
    for (i, k) in cfg.controllers.iter().enumerate() {
        // beyond the grid when no point was unstable
        rep.metrics.push((format!("onset.{}", k.as_str()), onset[i].unwrap_or(f64::INFINITY)));
    }
    rep.tables.push(sweep);
    let cmp = certified_loop_comparison(cfg)?;
    let mut cl = Table::new("certified_loop", &["gain_ratio", "gamma", "tau_max_lmi", "tau_empirical", "relative_gap"]);
    cl.push(vec![s.certified_loop.gain_ratio, s.gamma, cmp.tau_max_lmi, cmp.tau_empirical, cmp.relative_gap]);
    rep.tables.push(cl);
    rep.metrics.push(("certified_loop.tau_max_lmi".into(), cmp.tau_max_lmi));
    rep.metrics.push(("certified_loop.tau_empirical".into(), cmp.tau_empirical));
    rep.metrics.push(("certified_loop.relative_gap".into(), cmp.relative_gap));
    Ok(rep)
}

/// `(τ, γ)` feasibility boundary of the certified loop for several gains.
pub fn run_region_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let r = &cfg.region;
    let mut rep = ExperimentReport::new(Scenario::RegionSweep, cfg);
    let base = cfg.sweep.certified_loop;
    let params = cfg.params;
    let family = |ratio: f64| CertifiedLoop { gain_ratio: ratio, ..base }.system(&params, 0.0);
    let regions = region_sweep(&family, &r.gain_ratios, &r.gammas, r.tau_hi, r.tau_tol, &CertifyOptions::default())?;
    let mut table = Table::new("region", &["sigma", "gamma", "tau_boundary_s", "status"]);
    for reg in &regions {
        for p in &reg.points {
            let code = match p.status {
                BoundaryStatus::Bounded => 0.0,
                BoundaryStatus::BeyondRange => 1.0,
                BoundaryStatus::InfeasibleAtZero => 2.0,
                BoundaryStatus::Inconclusive => 3.0,
            };
            table.push(vec![reg.sigma, p.gamma, p.tau_boundary.unwrap_or(f64::NAN), code]);
        }
    }
    rep.meta("status_codes", "0=bounded 1=beyond_range 2=infeasible_at_zero 3=inconclusive".into());
    rep.tables.push(table);
    Ok(rep)
}

/// Dispatches on the configured scenario.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.scenario {
        Scenario::ObserverComparison => run_observer_experiment(cfg),
        Scenario::TrackingComparison => run_tracking_experiment(cfg),
        Scenario::DelaySweep => run_delay_sweep(cfg),
        Scenario::RegionSweep => run_region_sweep(cfg),
    }
}

/// Whether `v` is non-decreasing (`+∞` allowed).
pub fn is_non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

/// Speed RMSE of a run against its own reference from `t0` on.
pub fn run_speed_rmse(run: &LoopRun, t0: f64) -> Result<f64> {
    if run.diverged_at.is_some() {
        return Ok(f64::INFINITY);
    }
    let r = window_indices(&run.times, t0, f64::INFINITY);
    let w: Vec<f64> = run.states[r.clone()].iter().map(|x| x[2]).collect();
    rmse(&w, &run.speed_ref[r])
}
