//! Declarative TOML configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use persidskii::certify::{CertifyOptions, PsiForm};
use persidskii::koopman::{Dictionary, IdentifyConfig, Observable, PhiChannel};
use persidskii::lmi::SolverConfig;
use persidskii::model::{NonlinearityKind, PersidskiiSystem, SectorNonlinearity};
use persidskii::pmsm::{
    ControllerKind, DelayMode, EstimatorKind, ExperimentConfig, LoadProfile, PmsmParams, Scenario, SpeedReference,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    /// Overrides every seed of the run when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lmi: Option<LmiSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<TauMaxSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identify: Option<IdentifySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LmiSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable_bound: Option<f64>,
}

/// `ẋ = A x − B φ(C x(t−τ)) + D w`, matrices as lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<Vec<f64>>,
    #[serde(default)]
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Vec<Vec<f64>>,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub nonlinearities: Vec<NonlinearitySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearitySpec {
    Saturation {
        limit: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    Tanh {
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    DeadZone {
        width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    Linear {
        slope: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    Scheduled {
        companion: usize,
        gain: f64,
        lower: f64,
        upper: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    /// Fixed L₂ gain; the smallest certifiable gain is searched when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Delay to certify; defaults to the system delay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauMaxSpec {
    pub gamma: f64,
    #[serde(default)]
    pub tau_lo: f64,
    pub tau_hi: f64,
    #[serde(default = "default_tau_tol")]
    pub tol: f64,
}

fn default_tau_tol() -> f64 {
    persidskii::certify::DEFAULT_TAU_TOL
}

/// Sweep over the sector bound: every channel of `[system]` is rescaled to
/// slope `σ` (tanh or linear channels only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub sigmas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub tau_hi: f64,
    #[serde(default = "default_tau_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSpec {
    pub h: Vec<Vec<f64>>,
    pub noise_std: Vec<f64>,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    #[serde(default = "default_gamma_tol")]
    pub tol: f64,
}

fn default_gamma_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySpec {
    /// CSV `t,x1..xn,u1..um`; relative paths resolve against the config file.
    pub data: PathBuf,
    #[serde(default = "default_dictionary")]
    pub dictionary: String,
    #[serde(default = "default_degree")]
    pub degree: u32,
    pub gamma: f64,
    #[serde(default = "default_alternations")]
    pub max_alternations: usize,
    #[serde(default = "default_conv_tol")]
    pub conv_tol: f64,
    #[serde(default)]
    pub rbf: Vec<RbfSpec>,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
}

fn default_dictionary() -> String {
    "polynomial".into()
}

fn default_degree() -> u32 {
    1
}

fn default_alternations() -> usize {
    IdentifyConfig::default().max_alternations
}

fn default_conv_tol() -> f64 {
    IdentifyConfig::default().conv_tol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfSpec {
    pub center: Vec<f64>,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub coordinate: usize,
    pub nonlinearity: NonlinearitySpec,
}

/// PMSM scenario with optional overrides of the built-in defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_sim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_control: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_injected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foc_current_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controllers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plots: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mppi: Option<MppiSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification: Option<IdentificationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionScenarioSpec>,
}

macro_rules! overrides {
    ($(#[$m:meta])* $name:ident { $($field:ident: $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }
    };
}

overrides!(ParamsSpec {
    r_s: f64, l_s: f64, psi_f: f64, p_pairs: f64, j: f64, b_f: f64,
    rated_speed_rpm: f64, rated_torque: f64, rated_power: f64, u_max: f64, i_max: f64,
});

overrides!(
    /// `constant` uses `base_rpm` only.
    ReferenceSpec { kind: String, base_rpm: f64, amp_rpm: f64, freq_hz: f64, step_rpm: f64, step_time: f64 }
);

overrides!(ObserverScenarioSpec {
    speed_rpm: f64, step_time: f64, step_torque: f64, t_end: f64, window: f64, noise_var: f64,
    omega_init_error: f64, band: f64, gamma_lo: f64, gamma_hi: f64, bisect_tol: f64, n_seeds: usize,
});

overrides!(MppiSpec {
    rollouts: usize, horizon: f64, lambda: f64, noise_frac: f64, q_speed: f64, q_id: f64, r_u: f64,
});

overrides!(IdentificationSpec {
    degree: u32, gamma: f64, max_alternations: usize, duration: f64, excitation_seed: u64,
});

overrides!(TrackingSpec { t_end: f64, rmse_from: f64, n_seeds: usize, load_step_time: f64, load_step_torque: f64 });

overrides!(SweepSpec {
    tau_grid: Vec<f64>, divergence_factor: f64, gain_ratio: f64, gamma: f64, tau_hi: f64, tau_tol: f64,
});

overrides!(RegionScenarioSpec { gain_ratios: Vec<f64>, gammas: Vec<f64>, tau_hi: f64, tau_tol: f64 });

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(format!("schema: {}", e.message())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Config::parse(&text)?;
        if let Some(id) = cfg.identify.as_mut() {
            if id.data.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                id.data = base.join(&id.data);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Format(format!("config echo: {e}")))
    }

    /// Every section present is converted and checked against its invariants.
    pub fn validate(&self) -> Result<()> {
        self.certify_options()?;
        if let Some(s) = &self.system {
            s.build()?;
        }
        let need_system = |what: &str| -> Result<()> {
            if self.system.is_none() {
                return Err(CliError::Config(format!("{what}_needs_system: [{what}] requires a [system] section")));
            }
            Ok(())
        };
        if let Some(t) = &self.tau_max {
            need_system("tau_max")?;
            if !(t.tau_hi > t.tau_lo && t.tau_lo >= 0.0 && t.tol > 0.0 && t.gamma > 0.0) {
                return Err(CliError::Config("tau_max_bracket: need 0 ≤ tau_lo < tau_hi, tol > 0, gamma > 0".into()));
            }
        }
        if self.certify.is_some() {
            need_system("certify")?;
        }
        if let Some(r) = &self.region {
            need_system("region")?;
            self.region_family()?(1.0)?;
            if r.sigmas.is_empty() || r.sigmas.iter().any(|s| !(*s > 0.0)) {
                return Err(CliError::Config("region_sigmas: need at least one positive sigma".into()));
            }
            if r.gammas.is_empty() || r.gammas.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CliError::Config("region_gammas_ascending: the gamma grid must be non-empty and ascending".into()));
            }
        }
        if let Some(o) = &self.observer {
            need_system("observer")?;
            o.measurement()?;
        }
        if let Some(i) = &self.identify {
            if !matches!(i.dictionary.as_str(), "identity" | "polynomial") {
                return Err(CliError::Config(format!("identify.dictionary: unknown kind {:?} (identity, polynomial)", i.dictionary)));
            }
            i.channels()?;
            i.identify_config(CertifyOptions::default())?;
        }
        if let Some(e) = &self.experiment {
            e.build(self.seed)?.validate()?;
        }
        Ok(())
    }

    pub fn certify_options(&self) -> Result<CertifyOptions> {
        let mut opts = CertifyOptions::default();
        if let Some(l) = &self.lmi {
            if let Some(f) = &l.form {
                opts.form = parse_form(f)?;
            }
            let s: &mut SolverConfig = &mut opts.solver;
            if let Some(v) = l.strict_scale {
                s.strict_scale = v;
            }
            if let Some(v) = l.max_iterations {
                s.max_iterations = v;
            }
            if let Some(v) = l.variable_bound {
                s.variable_bound = v;
            }
        }
        Ok(opts)
    }

    pub fn system(&self) -> Result<PersidskiiSystem> {
        self.system.as_ref().ok_or_else(|| CliError::Config("missing [system] section".into()))?.build()
    }

    /// `σ ↦` the configured system with every channel rescaled to slope `σ`.
    pub fn region_family(&self) -> Result<impl Fn(f64) -> persidskii::Result<PersidskiiSystem>> {
        let base = self.system()?;
        for nl in &base.nonlinearities {
            if !matches!(nl.kind, NonlinearityKind::Tanh { .. } | NonlinearityKind::Linear { .. }) {
                return Err(CliError::Config("region_family: sigma sweeps need tanh or linear channels".into()));
            }
        }
        Ok(move |sigma: f64| {
            let mut sys = base.clone();
            for nl in &mut sys.nonlinearities {
                nl.kind = match nl.kind {
                    NonlinearityKind::Tanh { .. } => NonlinearityKind::Tanh { scale: sigma },
                    _ => NonlinearityKind::Linear { slope: sigma },
                };
                nl.sigma = sigma;
            }
            Ok(sys)
        })
    }
}

pub fn parse_form(s: &str) -> Result<PsiForm> {
    match s {
        "printed" => Ok(PsiForm::Printed),
        "completed" => Ok(PsiForm::Completed),
        "wirtinger" => Ok(PsiForm::Wirtinger),
        _ => Err(CliError::Config(format!("lmi.form: unknown form {s:?} (printed, completed, wirtinger)"))),
    }
}

/// Row-major matrix with `rows` rows; an empty list gives a `rows × 0` or
/// `0 × cols` matrix as dictated by the caller.
pub fn matrix(name: &str, rows: &[Vec<f64>], shape: (Option<usize>, Option<usize>)) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return match shape {
            (Some(r), _) => Ok(DMatrix::zeros(r, 0)),
            (None, Some(c)) => Ok(DMatrix::zeros(0, c)),
            _ => Err(CliError::Config(format!("{name}: matrix is empty"))),
        };
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!("{name}: rows differ in length")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("{name}: non-finite entry")));
    }
    let m = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    if shape.0.is_some_and(|r| r != m.nrows()) || shape.1.is_some_and(|c| c != m.ncols()) {
        return Err(CliError::Config(format!("{name}: expected shape {:?}, found {}x{}", shape, m.nrows(), m.ncols())));
    }
    Ok(m)
}

impl NonlinearitySpec {
    pub fn build(&self) -> Result<SectorNonlinearity> {
        let (kind, natural, sigma) = match *self {
            NonlinearitySpec::Saturation { limit, sigma } => (NonlinearityKind::Saturation { limit }, 1.0, sigma),
            NonlinearitySpec::Tanh { scale, sigma } => (NonlinearityKind::Tanh { scale }, scale, sigma),
            NonlinearitySpec::DeadZone { width, sigma } => (NonlinearityKind::DeadZone { width }, 1.0, sigma),
            NonlinearitySpec::Linear { slope, sigma } => (NonlinearityKind::Linear { slope }, slope.abs(), sigma),
            NonlinearitySpec::Scheduled { companion, gain, lower, upper, sigma } => {
                (NonlinearityKind::Scheduled { companion, gain, lower, upper }, gain * (upper - lower), sigma)
            }
        };
        SectorNonlinearity::new(kind, sigma.unwrap_or(natural)).map_err(|e| CliError::Config(format!("nonlinearity: {e}")))
    }

    pub fn from_core(nl: &SectorNonlinearity) -> Option<Self> {
        let sigma = Some(nl.sigma);
        Some(match nl.kind {
            NonlinearityKind::Saturation { limit } => NonlinearitySpec::Saturation { limit, sigma },
            NonlinearityKind::Tanh { scale } => NonlinearitySpec::Tanh { scale, sigma },
            NonlinearityKind::DeadZone { width } => NonlinearitySpec::DeadZone { width, sigma },
            NonlinearityKind::Linear { slope } => NonlinearitySpec::Linear { slope, sigma },
            NonlinearityKind::Scheduled { companion, gain, lower, upper } => {
                NonlinearitySpec::Scheduled { companion, gain, lower, upper, sigma }
            }
            _ => return None,
        })
    }
}

impl SystemSpec {
    pub fn build(&self) -> Result<PersidskiiSystem> {
        let a = matrix("system.a", &self.a, (None, None))?;
        let n = a.nrows();
        let k = self.nonlinearities.len();
        let b = matrix("system.b", &self.b, (Some(n), (k == 0).then_some(0).or(Some(k))))?;
        let c = matrix("system.c", &self.c, ((k == 0).then_some(0).or(Some(k)), Some(n)))?;
        let d = matrix("system.d", &self.d, (Some(n), None))?;
        let nls = self.nonlinearities.iter().map(|s| s.build()).collect::<Result<Vec<_>>>()?;
        PersidskiiSystem::new(a, b, c, d, self.tau, nls).map_err(|e| CliError::Config(format!("system: {e}")))
    }

    pub fn from_core(sys: &PersidskiiSystem) -> Option<Self> {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Some(SystemSpec {
            a: rows(&sys.a),
            b: rows(&sys.b),
            c: rows(&sys.c),
            d: rows(&sys.d),
            tau: sys.tau,
            nonlinearities: sys.nonlinearities.iter().map(NonlinearitySpec::from_core).collect::<Option<_>>()?,
        })
    }
}

impl ObserverSpec {
    pub fn measurement(&self) -> Result<persidskii::observer::MeasurementModel> {
        let h = matrix("observer.h", &self.h, (None, None))?;
        if !(self.gamma_lo > 0.0 && self.gamma_hi > self.gamma_lo && self.tol > 0.0) {
            return Err(CliError::Config("observer_gamma_bracket: need 0 < gamma_lo < gamma_hi and tol > 0".into()));
        }
        persidskii::observer::MeasurementModel::new(h, self.noise_std.clone()).map_err(|e| CliError::Config(format!("observer: {e}")))
    }
}

impl IdentifySpec {
    pub fn dictionary(&self, n: usize) -> Result<Dictionary> {
        let mut dict = match self.dictionary.as_str() {
            "identity" => Dictionary::identity(n),
            "polynomial" => Dictionary::polynomial(n, self.degree),
            other => return Err(CliError::Config(format!("identify.dictionary: unknown kind {other:?} (identity, polynomial)"))),
        };
        for r in &self.rbf {
            if r.center.len() != n {
                return Err(CliError::Config(format!("identify.rbf: center has {} entries, state has {n}", r.center.len())));
            }
            dict = dict.with_rbf(r.center.clone(), r.width).map_err(|e| CliError::Config(format!("identify.rbf: {e}")))?;
        }
        Ok(dict)
    }

    pub fn channels(&self) -> Result<Vec<PhiChannel>> {
        self.channels.iter().map(|c| Ok(PhiChannel { coordinate: c.coordinate, kind: c.nonlinearity.build()?.kind })).collect()
    }

    pub fn identify_config(&self, opts: CertifyOptions) -> Result<IdentifyConfig> {
        if !(self.gamma > 0.0) || self.max_alternations == 0 {
            return Err(CliError::Config("identify: need gamma > 0 and max_alternations ≥ 1".into()));
        }
        Ok(IdentifyConfig { max_alternations: self.max_alternations, conv_tol: self.conv_tol, gamma: self.gamma, certify: opts })
    }
}

/// Descriptor of a dictionary entry for the model file.
pub fn observable_descriptor(o: &Observable) -> serde_json::Value {
    use serde_json::json;
    match o {
        Observable::State(i) => json!({ "kind": "state", "index": i }),
        Observable::Monomial(e) => json!({ "kind": "monomial", "exponents": e }),
        Observable::Rbf { center, width } => json!({ "kind": "rbf", "center": center, "width": width }),
        Observable::Sin { coord, freq } => json!({ "kind": "sin", "coord": coord, "freq": freq }),
        Observable::Cos { coord, freq } => json!({ "kind": "cos", "coord": coord, "freq": freq }),
    }
}

pub fn parse_scenario(s: &str) -> Result<Scenario> {
    Scenario::parse(s).map_err(|e| CliError::Config(format!("experiment.scenario: {e}")))
}

impl ExperimentSpec {
    pub fn build(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::new(parse_scenario(&self.scenario)?);
        macro_rules! set {
            ($src:expr => $($dst:expr, $field:ident);* $(;)?) => {
                if let Some(s) = &$src {
                    $(if let Some(v) = s.$field.clone() { $dst = v; })*
                }
            };
        }
        if let Some(v) = self.dt_sim {
            cfg.dt_sim = v;
        }
        if let Some(v) = self.dt_control {
            cfg.dt_control = v;
        }
        if let Some(v) = self.tau_injected {
            cfg.tau_injected = v;
        }
        if let Some(v) = self.foc_current_hz {
            cfg.foc_current_hz = v;
        }
        if let Some(m) = &self.delay_mode {
            cfg.delay_mode = match m.as_str() {
                "transport" => DelayMode::Transport,
                "pade" => DelayMode::Pade,
                _ => return Err(CliError::Config(format!("experiment.delay_mode: unknown mode {m:?} (transport, pade)"))),
            };
        }
        if let Some(cs) = &self.controllers {
            cfg.controllers = cs
                .iter()
                .map(|c| ControllerKind::parse(c).map_err(|e| CliError::Config(format!("experiment.controllers: {e}"))))
                .collect::<Result<_>>()?;
        }
        if let Some(es) = &self.estimators {
            cfg.estimators = es
                .iter()
                .map(|e| EstimatorKind::parse(e).map_err(|err| CliError::Config(format!("experiment.estimators: {err}"))))
                .collect::<Result<_>>()?;
        }
        let p: &mut PmsmParams = &mut cfg.params;
        set!(self.params =>
            p.r_s, r_s; p.l_s, l_s; p.psi_f, psi_f; p.p_pairs, p_pairs; p.j, j; p.b_f, b_f;
            p.rated_speed_rpm, rated_speed_rpm; p.rated_torque, rated_torque; p.rated_power, rated_power;
            p.u_max, u_max; p.i_max, i_max);
        if let Some(r) = &self.reference {
            let base = r.base_rpm.unwrap_or(1000.0);
            cfg.reference = match r.kind.as_deref().unwrap_or("sine_step") {
                "constant" => SpeedReference::Constant { rpm: base },
                "sine_step" => {
                    let SpeedReference::SineStep { amp_rpm, freq_hz, step_rpm, step_time, .. } = SpeedReference::default() else {
                        unreachable!()
                    };
                    SpeedReference::SineStep {
                        base_rpm: base,
                        amp_rpm: r.amp_rpm.unwrap_or(amp_rpm),
                        freq_hz: r.freq_hz.unwrap_or(freq_hz),
                        step_rpm: r.step_rpm.unwrap_or(step_rpm),
                        step_time: r.step_time.unwrap_or(step_time),
                    }
                }
                k => return Err(CliError::Config(format!("experiment.reference.kind: unknown kind {k:?} (constant, sine_step)"))),
            };
        }
        let o = &mut cfg.observer;
        set!(self.observer =>
            o.speed_rpm, speed_rpm; o.step_time, step_time; o.step_torque, step_torque; o.t_end, t_end;
            o.window, window; o.noise_var, noise_var; o.omega_init_error, omega_init_error; o.band, band;
            o.gamma_bracket.0, gamma_lo; o.gamma_bracket.1, gamma_hi; o.bisect_tol, bisect_tol; o.n_seeds, n_seeds);
        let m = &mut cfg.mppi;
        set!(self.mppi =>
            m.rollouts, rollouts; m.horizon, horizon; m.lambda_temp, lambda; m.noise_frac, noise_frac;
            m.q_speed, q_speed; m.q_id, q_id; m.r_u, r_u);
        let id = &mut cfg.identification;
        set!(self.identification =>
            id.degree, degree; id.identify.gamma, gamma; id.identify.max_alternations, max_alternations;
            id.excitation.duration, duration; id.excitation.seed, excitation_seed);
        let tr = &mut cfg.tracking;
        set!(self.tracking => tr.t_end, t_end; tr.rmse_from, rmse_from; tr.n_seeds, n_seeds);
        if let Some(t) = &self.tracking {
            if let (Some(time), Some(magnitude)) = (t.load_step_time, t.load_step_torque) {
                tr.load = LoadProfile::Step { time, magnitude };
            }
        }
        let sw = &mut cfg.sweep;
        set!(self.sweep =>
            sw.tau_grid, tau_grid; sw.divergence_factor, divergence_factor; sw.certified_loop.gain_ratio, gain_ratio;
            sw.gamma, gamma; sw.tau_hi, tau_hi; sw.tau_tol, tau_tol);
        let rg = &mut cfg.region;
        set!(self.region => rg.gain_ratios, gain_ratios; rg.gammas, gammas; rg.tau_hi, tau_hi; rg.tau_tol, tau_tol);
        if let Some(s) = seed {
            cfg.noise_seed = s;
            cfg.identification.excitation.seed = s;
        }
        Ok(cfg)
    }
}
