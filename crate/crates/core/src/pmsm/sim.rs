//! Closed-loop simulation of the machine with an injected loop delay.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use super::{pmsm_rhs, rpm_to_rad, to_persidskii_with, CastMode, FocController, LoadProfile, PmsmParams};
use crate::error::{dim_err, Error, Result};
use crate::koopman::{Dictionary, LiftedModel};
use crate::model::{rk4_step, HistoryBuffer, PersidskiiSystem, SectorNonlinearity};
use crate::mppi::{CostWeights, MppiConfig, MppiController};

/// Speed reference (rpm descriptors, evaluated in rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeedReference {
    Constant { rpm: f64 },
    /// `base + amp·sin(2πf t)`, plus `step` from `step_time` on.
    SineStep { base_rpm: f64, amp_rpm: f64, freq_hz: f64, step_rpm: f64, step_time: f64 },
}

impl Default for SpeedReference {
    fn default() -> Self {
        SpeedReference::SineStep { base_rpm: 1000.0, amp_rpm: 400.0, freq_hz: 1.0, step_rpm: 200.0, step_time: 2.0 }
    }
}

impl SpeedReference {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            SpeedReference::Constant { rpm } => rpm_to_rad(rpm),
            SpeedReference::SineStep { base_rpm, amp_rpm, freq_hz, step_rpm, step_time } => {
                let step = if t >= step_time { step_rpm } else { 0.0 };
                rpm_to_rad(base_rpm + amp_rpm * libm::sin(2.0 * core::f64::consts::PI * freq_hz * t) + step)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SpeedReference::Constant { rpm } => rpm.is_finite(),
            SpeedReference::SineStep { base_rpm, amp_rpm, freq_hz, step_rpm, step_time } => {
                [base_rpm, amp_rpm, freq_hz, step_rpm, step_time].iter().all(|v| v.is_finite()) && freq_hz >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("reference descriptor has non-finite entries".into()))
        }
    }
}

/// Realization of the injected loop delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelayMode {
    /// Exact transport delay of the applied voltages.
    #[default]
    Transport,
    /// First-order Padé approximant `(1 − sτ/2)/(1 + sτ/2)` per channel.
    Pade,
}

impl DelayMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DelayMode::Transport => "transport",
            DelayMode::Pade => "pade",
        }
    }
}

/// A sampled speed controller issuing voltage commands.
pub trait SpeedController {
    fn name(&self) -> String;
    /// Command for the state measured at the control instant `t`.
    fn command(&mut self, t: f64, x: &DVector<f64>, reference: &SpeedReference) -> Result<DVector<f64>>;
}

impl SpeedController for FocController {
    fn name(&self) -> String {
        "foc".into()
    }

    fn command(&mut self, t: f64, x: &DVector<f64>, reference: &SpeedReference) -> Result<DVector<f64>> {
        Ok(self.step(x, reference.at(t))?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub dt_sim: f64,
    pub dt_control: f64,
    pub tau: f64,
    pub delay_mode: DelayMode,
    pub t_end: f64,
    pub x0: DVector<f64>,
    /// Voltage applied before the first command arrives.
    pub u0: DVector<f64>,
    pub load: LoadProfile,
    pub reference: SpeedReference,
    /// |ω_m| above this counts as divergence (rad/s).
    pub speed_guard: f64,
}

/// Steps of `dt_sim` per `dt_control`, with the integer-multiple check.
pub fn control_ratio(dt_sim: f64, dt_control: f64) -> Result<usize> {
    if !(dt_sim > 0.0 && dt_control > 0.0 && dt_sim.is_finite() && dt_control.is_finite()) {
        return Err(Error::Config("dt_sim and dt_control must be positive".into()));
    }
    let r = dt_control / dt_sim;
    let k = libm::round(r);
    if k < 1.0 || (r - k).abs() > 1e-9 * k {
        return Err(Error::Config(format!("dt_control_multiple_of_dt_sim: dt_control = {dt_control} is not an integer multiple of dt_sim = {dt_sim}")));
    }
    Ok(k as usize)
}

/// Samples at the control instants.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopRun {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Voltage reaching the machine at each control instant.
    pub applied: Vec<DVector<f64>>,
    pub speed_ref: Vec<f64>,
    /// Time of the first guard violation, if any.
    pub diverged_at: Option<f64>,
}

/// Voltage holding the steady state at speed `wm` with `i_d = 0` against `t_load`.
pub fn holding_point(params: &PmsmParams, wm: f64, t_load: f64) -> (DVector<f64>, DVector<f64>) {
    let iq = (params.b_f * wm + t_load) / params.torque_constant();
    let we = params.p_pairs * wm;
    let x = DVector::from_vec(vec![0.0, iq, wm]);
    let u = DVector::from_vec(vec![-we * params.l_s * iq, params.r_s * iq + we * params.psi_f]);
    (x, u)
}

pub fn plant_rk4(params: &PmsmParams, x: &DVector<f64>, u: &DVector<f64>, load: &LoadProfile, t: f64, h: f64) -> Result<DVector<f64>> {
    let k1 = pmsm_rhs(params, x, u, load.at(t))?;
    let k2 = pmsm_rhs(params, &(x + &k1 * (0.5 * h)), u, load.at(t + 0.5 * h))?;
    let k3 = pmsm_rhs(params, &(x + &k2 * (0.5 * h)), u, load.at(t + 0.5 * h))?;
    let k4 = pmsm_rhs(params, &(x + &k3 * h), u, load.at(t + h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Channel delay between the issued and the applied voltage.
pub struct DelayLine {
    mode: DelayMode,
    queue: VecDeque<DVector<f64>>,
    pade: DVector<f64>,
    tau: f64,
}

impl DelayLine {
    pub fn new(mode: DelayMode, tau: f64, dt_sim: f64, u0: &DVector<f64>) -> Self {
        let steps = libm::round(tau / dt_sim) as usize;
        DelayLine { mode, queue: core::iter::repeat(u0.clone()).take(steps).collect(), pade: u0.clone(), tau }
    }

    /// Applied voltage over the next step of length `h` given the command.
    pub fn advance(&mut self, cmd: &DVector<f64>, h: f64) -> DVector<f64> {
        match self.mode {
            DelayMode::Transport => {
                self.queue.push_back(cmd.clone());
                self.queue.pop_front().expect("queue holds the pushed command")
            }
            DelayMode::Pade => {
                if self.tau <= 0.0 {
                    return cmd.clone();
                }
                // z' = (2/τ)(u − z), output 2z − u, z evaluated mid-step
                let decay = |dt: f64| libm::exp(-2.0 * dt / self.tau);
                let z_mid = cmd + (&self.pade - cmd) * decay(0.5 * h);
                self.pade = cmd + (&self.pade - cmd) * decay(h);
                z_mid * 2.0 - cmd
            }
        }
    }
}

/// Simulates the machine under `ctrl` with the configured loop delay.
/// Divergence ends the run early and is reported, not raised.
pub fn run_loop(params: &PmsmParams, ctrl: &mut dyn SpeedController, cfg: &LoopConfig) -> Result<LoopRun> {
    let ratio = control_ratio(cfg.dt_sim, cfg.dt_control)?;
    if cfg.x0.len() != 3 || cfg.u0.len() != 2 {
        return Err(dim_err("loop initial state/voltage"));
    }
    if !(cfg.tau >= 0.0 && cfg.t_end > 0.0) {
        return Err(Error::Config("loop needs tau ≥ 0 and t_end > 0".into()));
    }
    let n_ctrl = libm::round(cfg.t_end / cfg.dt_control) as usize;
    let mut line = DelayLine::new(cfg.delay_mode, cfg.tau, cfg.dt_sim, &cfg.u0);
    let mut x = cfg.x0.clone();
    let mut last_applied = cfg.u0.clone();
    let mut run = LoopRun { times: vec![], states: vec![], applied: vec![], speed_ref: vec![], diverged_at: None };
    for k in 0..=n_ctrl {
        let t = k as f64 * cfg.dt_control;
        run.times.push(t);
        run.states.push(x.clone());
        run.speed_ref.push(cfg.reference.at(t));
        if !x.iter().all(|v| v.is_finite()) || x[2].abs() > cfg.speed_guard {
            run.applied.push(last_applied);
            run.diverged_at = Some(t);
            break;
        }
        if k == n_ctrl {
            run.applied.push(last_applied);
            break;
        }
        let cmd = match ctrl.command(t, &x, &cfg.reference) {
            Ok(c) => c,
            Err(Error::Divergence { .. } | Error::NoValidRollout | Error::Numeric(_)) => {
                run.applied.push(last_applied);
                run.diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        for i in 0..ratio {
            let ts = t + i as f64 * cfg.dt_sim;
            let u = line.advance(&cmd, cfg.dt_sim);
            if i == 0 {
                run.applied.push(u.clone());
            }
            x = match plant_rk4(params, &x, &u, &cfg.load, ts, cfg.dt_sim) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => DVector::from_element(3, f64::NAN),
                Err(e) => return Err(e),
            };
            last_applied = u;
        }
    }
    Ok(run)
}

/// Affine scaling between machine units and model coordinates:
/// `x_n = (x − x_op) / x_scale`, likewise for the voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub x: [f64; 3],
    pub u: [f64; 2],
    pub x_op: [f64; 3],
    pub u_op: [f64; 2],
}

impl Normalization {
    /// Limits as scales, origin at zero.
    pub fn from_params(params: &PmsmParams) -> Self {
        let w = rpm_to_rad(params.rated_speed_rpm);
        Normalization { x: [params.i_max, params.i_max, w], u: [params.u_max, params.u_max], x_op: [0.0; 3], u_op: [0.0; 2] }
    }

    /// Limits as scales, origin at the no-load holding point at `wm` (rad/s).
    pub fn centered(params: &PmsmParams, wm: f64) -> Self {
        let (x, u) = holding_point(params, wm, 0.0);
        Normalization { x_op: [x[0], x[1], x[2]], u_op: [u[0], u[1]], ..Self::from_params(params) }
    }

    pub fn state(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(3, |i, _| (x[i] - self.x_op[i]) / self.x[i])
    }

    pub fn input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(2, |i, _| (u[i] - self.u_op[i]) / self.u[i])
    }

    pub fn input_back(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(2, |i, _| u[i] * self.u[i] + self.u_op[i])
    }

    /// Normalized image of the voltage box `±limit`.
    pub fn input_bounds(&self, limit: f64) -> (Vec<f64>, Vec<f64>) {
        let lo = (0..2).map(|i| (-limit - self.u_op[i]) / self.u[i]).collect();
        let hi = (0..2).map(|i| (limit - self.u_op[i]) / self.u[i]).collect();
        (lo, hi)
    }
}

pub struct MppiSpeedController {
    pub label: String,
    pub inner: MppiController,
    pub norm: Normalization,
    dt: f64,
    dead_steps: usize,
}

impl MppiSpeedController {
    pub fn new(
        label: &str,
        model: LiftedModel,
        dict: Dictionary,
        cfg: MppiConfig,
        weights: CostWeights,
        norm: Normalization,
        tau: f64,
        u_hold: &DVector<f64>,
    ) -> Result<Self> {
        let dt = cfg.dt;
        let dead_steps = libm::round(tau / dt) as usize;
        let mut inner = MppiController::new(model, dict, cfg, weights, dead_steps)?;
        inner.set_nominal(&norm.input(u_hold));
        Ok(MppiSpeedController { label: label.into(), inner, norm, dt, dead_steps })
    }
}

impl SpeedController for MppiSpeedController {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn command(&mut self, t: f64, x: &DVector<f64>, reference: &SpeedReference) -> Result<DVector<f64>> {
        let steps = self.inner.nominal().len();
        let refs: Vec<DVector<f64>> = (1..=self.dead_steps + steps)
            .map(|j| self.norm.state(&DVector::from_vec(vec![0.0, 0.0, reference.at(t + j as f64 * self.dt)])))
            .collect();
        let step = self.inner.control_step(&self.norm.state(x), &refs)?;
        Ok(self.norm.input_back(&step.u))
    }
}

/// Standstill current loop `u_dq = −K·sat(i_dq(t − τ))` with `K = gain_ratio·R_s`.
/// Its Persidskii form keeps the linear machine part at standstill (the
/// products `ω_e·i` are of second order there) and carries the load
/// torque as the disturbance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifiedLoop {
    pub gain_ratio: f64,
    /// Current limit of the saturation (A).
    pub current_limit: f64,
}

impl Default for CertifiedLoop {
    fn default() -> Self {
        CertifiedLoop { gain_ratio: 1.3, current_limit: 10.0 }
    }
}

impl CertifiedLoop {
    pub fn gain(&self, params: &PmsmParams) -> f64 {
        self.gain_ratio * params.r_s
    }

    pub fn system(&self, params: &PmsmParams, tau: f64) -> Result<PersidskiiSystem> {
        if !(self.gain_ratio > 0.0 && self.current_limit > 0.0) {
            return Err(Error::Config("certified loop needs positive gain ratio and current limit".into()));
        }
        let lin = to_persidskii_with(params, params.omega_e_max(), tau, CastMode::BoundedDisturbance)?;
        let kl = self.gain(params) / params.l_s;
        let b = DMatrix::from_row_slice(3, 2, &[kl, 0.0, 0.0, kl, 0.0, 0.0]);
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let d = lin.d.columns(2, 1).into_owned();
        PersidskiiSystem::new(lin.a.clone(), b, c, d, tau, vec![SectorNonlinearity::saturation(self.current_limit); 2])
    }

    /// Simulates the nonlinear machine under the delayed loop from a
    /// constant history `x0`, returning the state norm at every step.
    pub fn simulate(&self, params: &PmsmParams, tau: f64, x0: &DVector<f64>, t_end: f64, dt: f64) -> Result<Vec<f64>> {
        if x0.len() != 3 || !(dt > 0.0) || (tau > 0.0 && tau < dt * (1.0 - 1e-9)) {
            return Err(Error::Config("certified-loop simulation needs a 3-state history and dt ≤ tau".into()));
        }
        let k = self.gain(params);
        let lim = self.current_limit;
        let x0c = x0.clone();
        let mut hist = HistoryBuffer::new(Box::new(move |_| x0c.clone()), 0.0, dt, tau + dt);
        let steps = libm::round(t_end / dt) as usize;
        let mut norms = Vec::with_capacity(steps + 1);
        norms.push(x0.norm());
        let p = *params;
        for _ in 0..steps {
            let xn = rk4_step(&mut hist, tau, dt, &|_, x, xd| {
                let u = DVector::from_vec(vec![-k * xd[0].clamp(-lim, lim), -k * xd[1].clamp(-lim, lim)]);
                pmsm_rhs(&p, x, &u, 0.0)
            })?;
            let nrm = xn.norm();
            if !(nrm <= crate::model::BLOWUP_GUARD) {
                norms.push(f64::INFINITY);
                break;
            }
            norms.push(nrm);
            hist.push(xn);
        }
        Ok(norms)
    }

    /// Whether the simulated loop decays: the peak over the final fifth of
    /// the run is below the peak over the fifth centred at 50%.
    pub fn decays(&self, params: &PmsmParams, tau: f64, t_end: f64) -> Result<bool> {
        let x0 = DVector::from_vec(vec![0.05, 0.05, 0.0]);
        let mut dt = 1e-4f64;
        if tau > 0.0 {
            dt = tau / libm::ceil(tau / dt.min(tau / 20.0));
        }
        let norms = self.simulate(params, tau, &x0, t_end, dt)?;
        let k = norms.len();
        if norms.last().is_some_and(|v| !v.is_finite()) {
            return Ok(false);
        }
        let peak = |a: usize, b: usize| norms[a..b].iter().copied().fold(0.0, f64::max);
        Ok(peak(k * 8 / 10, k) < peak(k * 4 / 10, k * 6 / 10))
    }

    /// Empirical instability onset by bisection on [`Self::decays`].
    pub fn empirical_onset(&self, params: &PmsmParams, tau_lo: f64, tau_hi: f64, tol: f64, t_end: f64) -> Result<f64> {
        if !self.decays(params, tau_lo, t_end)? || self.decays(params, tau_hi, t_end)? {
            return Err(Error::Bracket(format!("loop onset not bracketed by [{tau_lo}, {tau_hi}]")));
        }
        let (mut lo, mut hi) = (tau_lo, tau_hi);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.decays(params, mid, t_end)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}
