//! Simulated PMSM testbench: dq-frame machine model, its Persidskii cast,
//! a field-oriented controller and the experiment harness.

mod experiment;
mod sim;

pub use experiment::*;
pub use sim::*;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::model::{NonlinearityKind, PersidskiiSystem, SectorNonlinearity};

/// Machine parameters. `j` and `b_f` are assumed values for a 1.5 kW
/// surface-mount machine; the remaining electrical values are the testbench's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmsmParams {
    /// Stator resistance (Ω).
    pub r_s: f64,
    /// Stator inductance (H).
    pub l_s: f64,
    /// Flux linkage (Wb).
    pub psi_f: f64,
    pub p_pairs: f64,
    /// Rotor inertia (kg·m²).
    pub j: f64,
    /// Viscous friction (N·m·s).
    pub b_f: f64,
    pub rated_speed_rpm: f64,
    pub rated_torque: f64,
    pub rated_power: f64,
    /// Per-axis voltage limit (V).
    pub u_max: f64,
    /// Current limit of the speed loop (A).
    pub i_max: f64,
}

impl Default for PmsmParams {
    fn default() -> Self {
        PmsmParams {
            r_s: 0.82,
            l_s: 5.2e-3,
            psi_f: 0.175,
            p_pairs: 3.0,
            j: 3e-3,
            b_f: 1e-3,
            rated_speed_rpm: 1500.0,
            rated_torque: 9.5,
            rated_power: 1500.0,
            u_max: 200.0,
            i_max: 15.0,
        }
    }
}

/// rpm to mechanical rad/s.
pub fn rpm_to_rad(rpm: f64) -> f64 {
    rpm * core::f64::consts::PI / 30.0
}

pub fn rad_to_rpm(w: f64) -> f64 {
    w * 30.0 / core::f64::consts::PI
}

impl PmsmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("r_s", self.r_s),
            ("l_s", self.l_s),
            ("psi_f", self.psi_f),
            ("p_pairs", self.p_pairs),
            ("j", self.j),
            ("b_f", self.b_f),
            ("rated_speed_rpm", self.rated_speed_rpm),
            ("rated_torque", self.rated_torque),
            ("rated_power", self.rated_power),
            ("u_max", self.u_max),
            ("i_max", self.i_max),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("params.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Torque per q-axis ampere, `1.5·p·ψ_f`.
    pub fn torque_constant(&self) -> f64 {
        1.5 * self.p_pairs * self.psi_f
    }

    /// Electrical speed bound of the operating box: rated speed with a 10% margin.
    pub fn omega_e_max(&self) -> f64 {
        1.1 * self.p_pairs * rpm_to_rad(self.rated_speed_rpm)
    }

    /// Stored energy `¾L_s(i_d² + i_q²) + ½Jω_m²`; the 3/2 matches the
    /// amplitude-invariant torque constant.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        0.75 * self.l_s * (x[0] * x[0] + x[1] * x[1]) + 0.5 * self.j * x[2] * x[2]
    }
}

fn check_state(x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != 3 || u.len() != 2 {
        return Err(dim_err("PMSM state has length 3 and input length 2"));
    }
    Ok(())
}

/// dq-frame dynamics of `x = (i_d, i_q, ω_m)` under `u = (u_d, u_q)` and load `t_load`.
pub fn pmsm_rhs(params: &PmsmParams, x: &DVector<f64>, u: &DVector<f64>, t_load: f64) -> Result<DVector<f64>> {
    check_state(x, u)?;
    let PmsmParams { r_s, l_s, psi_f, p_pairs, j, b_f, .. } = *params;
    let (id, iq, wm) = (x[0], x[1], x[2]);
    let we = p_pairs * wm;
    let dx = DVector::from_vec(vec![
        (-r_s * id + we * l_s * iq + u[0]) / l_s,
        (-r_s * iq - we * l_s * id - we * psi_f + u[1]) / l_s,
        (params.torque_constant() * iq - b_f * wm - t_load) / j,
    ]);
    if !dx.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("PMSM derivative".into()));
    }
    Ok(dx)
}

/// How the cross-coupling products `ω_e·i_q`, `ω_e·i_d` enter the cast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CastMode {
    /// Two scheduled sector channels on `i_q`, `i_d` whose companion factor
    /// is the speed clamped to the operating box.
    #[default]
    Scheduled,
    /// Products moved to two extra disturbance inputs bounded on the box.
    BoundedDisturbance,
}

impl CastMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CastMode::Scheduled => "scheduled",
            CastMode::BoundedDisturbance => "bounded_disturbance",
        }
    }
}

/// Persidskii cast of the machine with disturbance `w = (u_d, u_q, T_L)`
/// (and, in bounded-disturbance mode, the two coupling products).
///
/// Scheduled mode uses the loop transformation
/// `p·ω_m·s = 2L_s·φ(s) − ω_{e,max}·s`,
/// `φ(s) = p/(2L_s)·(clamp(ω_m, ±ω_{e,max}/p) + ω_{e,max}/p)·s`,
/// whose sector is `[0, ω_{e,max}/L_s]`; the shift `∓ω_{e,max}` is absorbed in `A`.
pub fn to_persidskii(params: &PmsmParams, omega_e_max: f64, tau: f64) -> Result<PersidskiiSystem> {
    to_persidskii_with(params, omega_e_max, tau, CastMode::Scheduled)
}

pub fn to_persidskii_with(params: &PmsmParams, omega_e_max: f64, tau: f64, mode: CastMode) -> Result<PersidskiiSystem> {
    params.validate()?;
    if !(omega_e_max > 0.0 && omega_e_max.is_finite()) {
        return Err(Error::Config(format!("omega_e_max must be positive, got {omega_e_max}")));
    }
    let PmsmParams { r_s, l_s, psi_f, p_pairs, j, b_f, .. } = *params;
    let a_r = r_s / l_s;
    let kt = params.torque_constant();
    let mut a = DMatrix::from_row_slice(3, 3, &[-a_r, 0.0, 0.0, 0.0, -a_r, -p_pairs * psi_f / l_s, 0.0, kt / j, -b_f / j]);
    let du = DMatrix::from_row_slice(3, 3, &[1.0 / l_s, 0.0, 0.0, 0.0, 1.0 / l_s, 0.0, 0.0, 0.0, -1.0 / j]);
    match mode {
        CastMode::Scheduled => {
            a[(0, 1)] -= omega_e_max;
            a[(1, 0)] += omega_e_max;
            let wm_max = omega_e_max / p_pairs;
            let nl = SectorNonlinearity::new(
                NonlinearityKind::Scheduled { companion: 2, gain: p_pairs / (2.0 * l_s), lower: -wm_max, upper: wm_max },
                omega_e_max / l_s,
            )?;
            let b = DMatrix::from_row_slice(3, 2, &[-2.0 * l_s, 0.0, 0.0, 2.0 * l_s, 0.0, 0.0]);
            let c = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
            PersidskiiSystem::new(a, b, c, du, tau, vec![nl; 2])
        }
        CastMode::BoundedDisturbance => {
            let mut d = DMatrix::zeros(3, 5);
            d.view_mut((0, 0), (3, 3)).copy_from(&du);
            d[(0, 3)] = 1.0;
            d[(1, 4)] = 1.0;
            PersidskiiSystem::new(a, DMatrix::zeros(3, 0), DMatrix::zeros(0, 3), d, tau, vec![])
        }
    }
}

/// Disturbance vector of the cast at state `x`.
pub fn cast_input(mode: CastMode, params: &PmsmParams, x: &DVector<f64>, u: &DVector<f64>, t_load: f64) -> Result<DVector<f64>> {
    check_state(x, u)?;
    Ok(match mode {
        CastMode::Scheduled => DVector::from_vec(vec![u[0], u[1], t_load]),
        CastMode::BoundedDisturbance => {
            let we = params.p_pairs * x[2];
            DVector::from_vec(vec![u[0], u[1], t_load, we * x[1], -we * x[0]])
        }
    })
}

/// Estimator model: the scheduled cast with the load torque as the only
/// unknown input; voltages enter through [`voltage_drive`].
pub fn estimator_model(params: &PmsmParams, omega_e_max: f64) -> Result<PersidskiiSystem> {
    let sys = to_persidskii(params, omega_e_max, 0.0)?;
    let d = sys.d.columns(2, 1).into_owned();
    Ok(sys.with_d(d))
}

/// Known input term `(u_d/L_s, u_q/L_s, 0)` of the estimator model.
pub fn voltage_drive(params: &PmsmParams, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![u[0] / params.l_s, u[1] / params.l_s, 0.0])
}

/// Load torque profile (N·m).
#[derive(Debug, Clone, PartialEq)]
pub enum LoadProfile {
    Step { time: f64, magnitude: f64 },
    Sinusoid { amp: f64, freq: f64, phase: f64 },
    Composite(Vec<LoadProfile>),
}

impl Default for LoadProfile {
    fn default() -> Self {
        LoadProfile::Composite(vec![])
    }
}

impl LoadProfile {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            LoadProfile::Step { time, magnitude } => {
                if t >= *time {
                    *magnitude
                } else {
                    0.0
                }
            }
            LoadProfile::Sinusoid { amp, freq, phase } => amp * libm::sin(2.0 * core::f64::consts::PI * freq * t + phase),
            LoadProfile::Composite(parts) => parts.iter().map(|p| p.at(t)).sum(),
        }
    }

    /// Magnitudes must stay within the brake range `[0, rated_torque]`.
    pub fn validate(&self, rated_torque: f64) -> Result<()> {
        let ok = |v: f64| v.is_finite() && (0.0..=rated_torque).contains(&v);
        match self {
            LoadProfile::Step { time, magnitude } => {
                if !time.is_finite() || !ok(*magnitude) {
                    return Err(Error::Config(format!("load step {magnitude} N·m outside [0, {rated_torque}]")));
                }
            }
            LoadProfile::Sinusoid { amp, freq, phase } => {
                if !ok(amp.abs()) || !freq.is_finite() || !phase.is_finite() {
                    return Err(Error::Config(format!("load sinusoid amplitude {amp} N·m outside the brake range")));
                }
            }
            LoadProfile::Composite(parts) => {
                for p in parts {
                    p.validate(rated_torque)?;
                }
            }
        }
        Ok(())
    }
}

/// Cascaded PI gains: speed loop `(kp_w, ki_w)` producing the q-current
/// reference, current loops `(kp_i, ki_i)` producing voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocGains {
    pub kp_i: f64,
    pub ki_i: f64,
    pub kp_w: f64,
    pub ki_w: f64,
    pub i_max: f64,
    pub u_max: f64,
    /// Cross-coupling and back-EMF feedforward in the current loops.
    pub decoupling: bool,
}

impl FocGains {
    /// Pole placement: the current PI cancels the electrical pole, giving a
    /// first-order current loop at `current_hz`; the speed PI has its zero a
    /// decade below crossover and is scaled so that the closed-loop speed
    /// bandwidth equals `speed_hz`.
    pub fn from_bandwidths(params: &PmsmParams, current_hz: f64, speed_hz: f64) -> Result<Self> {
        params.validate()?;
        if !(current_hz > 0.0 && speed_hz > 0.0 && current_hz.is_finite() && speed_hz.is_finite()) {
            return Err(Error::Config("FOC bandwidths must be positive".into()));
        }
        let wc = 2.0 * core::f64::consts::PI * current_hz;
        let ws = 2.0 * core::f64::consts::PI * speed_hz;
        let kp_w = params.j * ws / params.torque_constant();
        let mut g = FocGains {
            kp_i: params.l_s * wc,
            ki_i: params.r_s * wc,
            kp_w,
            ki_w: kp_w * ws / 10.0,
            i_max: params.i_max,
            u_max: params.u_max,
            decoupling: true,
        };
        let scaled = |s: f64| FocGains { kp_w: s * kp_w, ki_w: s * s * kp_w * ws / 10.0, ..g };
        let (mut lo, mut hi) = (0.05, 1.0);
        if foc_bandwidths(params, &scaled(hi))?.1 > speed_hz {
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if foc_bandwidths(params, &scaled(mid))?.1 > speed_hz {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            g = scaled(0.5 * (lo + hi));
        }
        Ok(g)
    }

    /// Current crossover limited to a 45° phase margin under the loop delay
    /// `tau` (at most `current_hz`), speed loop a decade slower, decoupling
    /// feedforward only without delay.
    pub fn delay_tuned(params: &PmsmParams, tau: f64, current_hz: f64) -> Result<Self> {
        let mut hz = current_hz;
        if tau > 0.0 {
            hz = hz.min(1.0 / (8.0 * tau));
        }
        let mut g = Self::from_bandwidths(params, hz, hz / 10.0)?;
        // feedforward from a stale measurement destabilizes at high speed
        g.decoupling = tau <= 0.0;
        Ok(g)
    }
}

/// Stateful cascaded PI controller with decoupling feedforward and
/// conditional-integration anti-windup.
#[derive(Debug, Clone, PartialEq)]
pub struct FocController {
    pub gains: FocGains,
    pub params: PmsmParams,
    pub dt: f64,
    z_d: f64,
    z_q: f64,
    z_w: f64,
}

impl FocController {
    pub fn new(gains: FocGains, params: PmsmParams, dt: f64) -> Result<Self> {
        let g = [gains.kp_i, gains.ki_i, gains.kp_w, gains.ki_w, gains.i_max, gains.u_max];
        if g.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(dt > 0.0) {
            return Err(Error::Config("FOC gains must be non-negative and dt positive".into()));
        }
        Ok(FocController { gains, params, dt, z_d: 0.0, z_q: 0.0, z_w: 0.0 })
    }

    pub fn reset(&mut self) {
        self.z_d = 0.0;
        self.z_q = 0.0;
        self.z_w = 0.0;
    }

    /// Preloads the integrators so that the steady state `x` under the
    /// holding voltage `u` is an equilibrium of the controller.
    pub fn preload(&mut self, x: &DVector<f64>, u: &DVector<f64>) {
        let PmsmParams { l_s, psi_f, p_pairs, .. } = self.params;
        let we = if self.gains.decoupling { p_pairs * x[2] } else { 0.0 };
        self.z_w = x[1];
        self.z_d = u[0] + we * l_s * x[1];
        self.z_q = u[1] - we * (l_s * x[0] + psi_f);
    }

    /// `(u, i_q reference)` for the measured state and the speed reference (rad/s).
    pub fn step(&mut self, x: &DVector<f64>, speed_ref: f64) -> Result<(DVector<f64>, f64)> {
        if x.len() != 3 {
            return Err(dim_err("FOC expects a state of length 3"));
        }
        let g = self.gains;
        let PmsmParams { l_s, psi_f, p_pairs, .. } = self.params;
        let (id, iq, wm) = (x[0], x[1], x[2]);
        let e_w = speed_ref - wm;
        let iq_raw = g.kp_w * e_w + self.z_w;
        let iq_ref = iq_raw.clamp(-g.i_max, g.i_max);
        if iq_raw == iq_ref || iq_raw.signum() != e_w.signum() {
            self.z_w += g.ki_w * e_w * self.dt;
        }
        let we = if g.decoupling { p_pairs * wm } else { 0.0 };
        let (e_d, e_q) = (-id, iq_ref - iq);
        let vd = g.kp_i * e_d + self.z_d - we * l_s * iq;
        let vq = g.kp_i * e_q + self.z_q + we * (l_s * id + psi_f);
        let (ud, uq) = (vd.clamp(-g.u_max, g.u_max), vq.clamp(-g.u_max, g.u_max));
        if ud == vd || vd.signum() != e_d.signum() {
            self.z_d += g.ki_i * e_d * self.dt;
        }
        if uq == vq || vq.signum() != e_q.signum() {
            self.z_q += g.ki_i * e_q * self.dt;
        }
        let u = DVector::from_vec(vec![ud, uq]);
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("FOC output".into()));
        }
        Ok((u, iq_ref))
    }
}

/// Closed-loop bandwidths (Hz) of the linearized cascade at standstill
/// without delay: the q-current loop (`i_q_ref → i_q`) and the speed loop
/// (`ω_ref → ω_m`), each the first −3 dB crossing.
pub fn foc_bandwidths(params: &PmsmParams, gains: &FocGains) -> Result<(f64, f64)> {
    let PmsmParams { r_s, l_s, j, b_f, .. } = *params;
    let kt = params.torque_constant();
    // inner loop, states (i_q, z_q), input i_q_ref
    let a_i = DMatrix::from_row_slice(2, 2, &[-(r_s + gains.kp_i) / l_s, 1.0 / l_s, -gains.ki_i, 0.0]);
    let b_i = DMatrix::from_row_slice(2, 1, &[gains.kp_i / l_s, gains.ki_i]);
    let c_i = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    // cascade, states (i_q, z_q, ω, z_w), input ω_ref; back-EMF cancelled by feedforward
    let (kp, ki) = (gains.kp_w, gains.ki_w);
    let a_s = DMatrix::from_row_slice(
        4,
        4,
        &[
            -(r_s + gains.kp_i) / l_s, 1.0 / l_s, -gains.kp_i * kp / l_s, gains.kp_i / l_s,
            -gains.ki_i, 0.0, -gains.ki_i * kp, gains.ki_i,
            kt / j, 0.0, -b_f / j, 0.0,
            0.0, 0.0, -ki, 0.0,
        ],
    );
    let b_s = DMatrix::from_row_slice(4, 1, &[gains.kp_i * kp / l_s, gains.ki_i * kp, 0.0, ki]);
    let c_s = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]);
    Ok((bandwidth_hz(&a_i, &b_i, &c_i)?, bandwidth_hz(&a_s, &b_s, &c_s)?))
}

fn freq_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, w: f64) -> Result<f64> {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, k| Complex::new(-a[(i, k)], if i == k { w } else { 0.0 }));
    let rhs = DMatrix::from_fn(n, 1, |i, _| Complex::new(b[(i, 0)], 0.0));
    let x = m.lu().solve(&rhs).ok_or_else(|| Error::Numeric("singular frequency response".into()))?;
    let mut y = Complex::new(0.0, 0.0);
    for i in 0..n {
        y += x[(i, 0)] * c[(0, i)];
    }
    Ok(libm::hypot(y.re, y.im))
}

fn bandwidth_hz(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let g0 = freq_gain(a, b, c, 0.0)?;
    let target = g0 / core::f64::consts::SQRT_2;
    let mut lo = 1e-3;
    let mut hi = lo;
    while freq_gain(a, b, c, hi)? >= target {
        lo = hi;
        hi *= 1.25;
        if hi > 1e8 {
            return Err(Error::Numeric("no −3 dB crossing below 1e8 rad/s".into()));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if freq_gain(a, b, c, mid)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi) / (2.0 * core::f64::consts::PI))
}
