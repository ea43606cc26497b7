//! Structured Persidskii observer with H∞ gain synthesis, and a
//! continuous-discrete EKF baseline.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::certify::{assemble, IssCertificate, PsiForm, TAU_SWITCH};
use crate::error::{dim_err, Error, Result};
use crate::lmi::{solve_feasibility, AffineLmi, SolverConfig, VarTag};
use crate::model::{rk4_step, HistoryBuffer, PersidskiiSystem, Trajectory, BLOWUP_GUARD};
use crate::stats::{component, rmse_window, NoiseSource};

/// `y = H x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub h: DMatrix<f64>,
    pub noise_std: Vec<f64>,
}

impl MeasurementModel {
    pub fn new(h: DMatrix<f64>, noise_std: Vec<f64>) -> Result<Self> {
        if h.nrows() == 0 {
            return Err(dim_err("measurement model needs at least one output"));
        }
        if noise_std.len() != h.nrows() {
            return Err(dim_err("one noise level per output required"));
        }
        if !h.iter().all(|v| v.is_finite()) || noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Numeric("measurement model".into()));
        }
        Ok(MeasurementModel { h, noise_std })
    }

    pub fn p(&self) -> usize {
        self.h.nrows()
    }

    pub fn measure(&self, x: &DVector<f64>, noise: &mut NoiseSource) -> DVector<f64> {
        &self.h * x + noise.vector(&self.noise_std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGain {
    pub l: DMatrix<f64>,
    pub gamma_hinf: f64,
    /// Certificate of the error system `A − LH` (completed form, Λ = 0).
    pub certificate: IssCertificate,
}

/// The error system `ė = (A − LH) e − B Δφ + D w`.
pub fn error_system(sys: &PersidskiiSystem, meas: &MeasurementModel, l: &DMatrix<f64>) -> PersidskiiSystem {
    sys.with_a(&sys.a - l * &meas.h)
}

struct SynLayout {
    n: usize,
    p: usize,
    k: usize,
    delayed: bool,
}

impl SynLayout {
    fn tri(&self) -> usize {
        if self.delayed {
            self.n * (self.n + 1) / 2
        } else {
            0
        }
    }
    fn off_y(&self) -> usize {
        self.n
    }
    fn off_q(&self) -> usize {
        self.n + self.n * self.p
    }
    fn off_s(&self) -> usize {
        self.off_q() + self.tri()
    }
    fn off_t(&self) -> usize {
        self.off_s() + self.tri()
    }
    fn n_mult(&self) -> usize {
        if self.delayed {
            2 * self.k
        } else {
            self.k
        }
    }
    fn n_vars(&self) -> usize {
        self.off_t() + self.n_mult()
    }
    fn tags(&self) -> Vec<VarTag> {
        let mut t = vec![VarTag::DiagP; self.n];
        t.extend(core::iter::repeat(VarTag::GainEntry).take(self.n * self.p));
        t.extend(core::iter::repeat(VarTag::QEntry).take(self.tri()));
        t.extend(core::iter::repeat(VarTag::SEntry).take(self.tri()));
        t.extend(core::iter::repeat(VarTag::Multiplier).take(self.n_mult()));
        t
    }
    fn sym(&self, x: &[f64], off: usize) -> DMatrix<f64> {
        let n = self.n;
        if !self.delayed {
            return DMatrix::identity(n, n);
        }
        let mut m = DMatrix::zeros(n, n);
        let mut idx = off;
        for i in 0..n {
            for j in i..n {
                m[(i, j)] = x[idx];
                m[(j, i)] = x[idx];
                idx += 1;
            }
        }
        m
    }
    fn p(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&x[..self.n]))
    }
    fn y(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.p, &x[self.off_y()..self.off_y() + self.n * self.p])
    }
    fn mult(&self, x: &[f64], which: usize) -> DVector<f64> {
        let o = self.off_t() + which * self.k;
        DVector::from_column_slice(&x[o..o + self.k])
    }
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, blk: &DMatrix<f64>) {
    m.view_mut((r, c), blk.shape()).copy_from(blk);
    if r != c {
        m.view_mut((c, r), (blk.ncols(), blk.nrows())).copy_from(&blk.transpose());
    }
}

/// Synthesis matrix, affine in `(P, Y = PL, Q, S, T)`. With delay, the
/// `τ EᵀSE` term is bounded through `−P S⁻¹ P ⪯ S − 2P` and a Schur
/// complement over `P E = [PA − YH, −PB, 0, PD, 0]`.
fn synthesis_matrix(sys: &PersidskiiSystem, meas: &MeasurementModel, lay: &SynLayout, x: &[f64], gamma_sq: f64, tau: f64) -> DMatrix<f64> {
    let (n, k, m) = (sys.n(), sys.k(), sys.m());
    let (a, b, c, d, h) = (&sys.a, &sys.b, &sys.c, &sys.d, &meas.h);
    let p = lay.p(x);
    let r = DMatrix::from_diagonal(&DVector::from_iterator(k, sys.nonlinearities.iter().map(|nl| 1.0 / nl.sigma)));
    let pa = &p * a - lay.y(x) * h;
    let he = &pa + pa.transpose();
    if !lay.delayed {
        let t = DMatrix::from_diagonal(&lay.mult(x, 0));
        let mut psi = DMatrix::zeros(n + k + m, n + k + m);
        put(&mut psi, 0, 0, &(he + DMatrix::identity(n, n)));
        put(&mut psi, 0, n, &(-(&p * b) + c.transpose() * &t));
        put(&mut psi, 0, n + k, &(&p * d));
        put(&mut psi, n, n, &(-2.0 * &t * &r));
        put(&mut psi, n + k, n + k, &(-gamma_sq * DMatrix::identity(m, m)));
        return psi;
    }
    let q = lay.sym(x, lay.off_q());
    let s = lay.sym(x, lay.off_s());
    let t1 = DMatrix::from_diagonal(&lay.mult(x, 0));
    let t2 = DMatrix::from_diagonal(&lay.mult(x, 1));
    let s_tau = &s / tau;
    let dim = n + k + n + m + k;
    let (ix, ip, id, iw, ic) = (0, n, n + k, n + k + n, n + k + n + m);
    let mut psi = DMatrix::zeros(dim + n, dim + n);
    put(&mut psi, ix, ix, &(he + DMatrix::identity(n, n) + &q - &s_tau));
    put(&mut psi, ix, ip, &(-(&p * b)));
    put(&mut psi, ix, id, &s_tau);
    put(&mut psi, ix, iw, &(&p * d));
    put(&mut psi, ix, ic, &(c.transpose() * &t2));
    put(&mut psi, ip, ip, &(-2.0 * &t1 * &r));
    put(&mut psi, ip, id, &(&t1 * c));
    put(&mut psi, id, id, &(-&q - &s_tau));
    put(&mut psi, iw, iw, &(-gamma_sq * DMatrix::identity(m, m)));
    put(&mut psi, ic, ic, &(-2.0 * &t2 * &r));
    let st = libm::sqrt(tau);
    let mut pe = DMatrix::zeros(n, dim);
    pe.view_mut((0, ix), (n, n)).copy_from(&pa);
    pe.view_mut((0, ip), (n, k)).copy_from(&(-(&p * b)));
    pe.view_mut((0, iw), (n, m)).copy_from(&(&p * d));
    put(&mut psi, dim, 0, &(pe * st));
    put(&mut psi, dim, dim, &(s - 2.0 * p));
    psi
}

/// Solves the synthesis LMI at fixed γ²; returns the gain and its certificate.
fn synthesize_at(sys: &PersidskiiSystem, meas: &MeasurementModel, gamma_sq: f64, solver: &SolverConfig) -> Result<Option<ObserverGain>> {
    let tau = sys.tau;
    let lay = SynLayout { n: sys.n(), p: meas.p(), k: sys.k(), delayed: tau > TAU_SWITCH };
    let mut lmi = AffineLmi::new(lay.tags());
    lmi.push_affine_map(|x| synthesis_matrix(sys, meas, &lay, x, gamma_sq, tau))?;
    for i in 0..lay.n {
        lmi.push_positivity(i)?;
    }
    if lay.delayed {
        for off in [lay.off_q(), lay.off_s()] {
            lmi.push_affine_map(|x| -lay.sym(x, off))?;
        }
    }
    for i in lay.off_t()..lay.n_vars() {
        lmi.push_positivity(i)?;
    }
    let res = solve_feasibility(&lmi, None, solver)?;
    if !res.is_feasible() {
        return Ok(None);
    }
    let Some(x) = res.witness else { return Ok(None) };
    let eps = res.strictness;
    let p = lay.p(&x);
    if (0..lay.n).any(|i| p[(i, i)] <= eps) {
        return Err(Error::Structure("recovered P is singular".into()));
    }
    let p_inv = DMatrix::from_diagonal(&DVector::from_iterator(lay.n, (0..lay.n).map(|i| 1.0 / p[(i, i)])));
    let l = &p_inv * lay.y(&x);
    let k = lay.k;
    let (t_delayed, t_current) = (lay.mult(&x, 0), if lay.delayed { lay.mult(&x, 1) } else { DVector::zeros(k) });
    let mut cert = IssCertificate {
        p,
        q: lay.sym(&x, lay.off_q()),
        s: lay.sym(&x, lay.off_s()),
        lambda: DMatrix::zeros(k, k),
        t_delayed,
        t_current,
        p12: DMatrix::zeros(lay.n, lay.n),
        p22: DMatrix::zeros(lay.n, lay.n),
        gamma: libm::sqrt(gamma_sq),
        tau,
        margin: 0.0,
        overall_margin: res.margin,
        eps_strict: eps,
        form: PsiForm::Completed,
    };
    let err_sys = error_system(sys, meas, &l);
    cert.margin = assemble(PsiForm::Completed, &err_sys, &cert.vars(), gamma_sq, tau)?.max_eigenvalue()?;
    if cert.margin > -eps {
        return Err(Error::Numeric(format!("error-system re-check failed with margin {}", cert.margin)));
    }
    Ok(Some(ObserverGain { l, gamma_hinf: cert.gamma, certificate: cert }))
}

/// Smallest certified H∞ level by bisection on γ² within `gamma_bracket`.
pub fn synthesize_gain(sys: &PersidskiiSystem, meas: &MeasurementModel, gamma_bracket: (f64, f64), bisect_tol: f64) -> Result<ObserverGain> {
    synthesize_gain_with(sys, meas, gamma_bracket, bisect_tol, &SolverConfig::default())
}

pub fn synthesize_gain_with(
    sys: &PersidskiiSystem,
    meas: &MeasurementModel,
    gamma_bracket: (f64, f64),
    bisect_tol: f64,
    solver: &SolverConfig,
) -> Result<ObserverGain> {
    if meas.h.ncols() != sys.n() {
        return Err(dim_err("H must have one column per state"));
    }
    let (lo, hi) = gamma_bracket;
    if !(lo > 0.0 && hi > lo && bisect_tol > 0.0) {
        return Err(Error::Bracket(format!("invalid gamma bracket [{lo}, {hi}]")));
    }
    let Some(mut best) = synthesize_at(sys, meas, hi * hi, solver)? else {
        return Err(Error::Bracket(format!("observer synthesis infeasible at gamma_hi = {hi}")));
    };
    if let Some(g) = synthesize_at(sys, meas, lo * lo, solver)? {
        return Ok(g);
    }
    let (mut lo2, mut hi2) = (lo * lo, hi * hi);
    while libm::sqrt(hi2) - libm::sqrt(lo2) > bisect_tol {
        let mid = 0.5 * (lo2 + hi2);
        match synthesize_at(sys, meas, mid, solver)? {
            Some(g) => {
                best = g;
                hi2 = mid;
            }
            None => lo2 = mid,
        }
    }
    Ok(best)
}

/// Drift `A x − B φ(C x_d) + u` of an estimator model with known input term `u`.
fn model_drift(sys: &PersidskiiSystem, x: &DVector<f64>, xd: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let mut dx = &sys.a * x + u;
    if sys.k() > 0 {
        dx -= &sys.b * sys.phi(xd)?;
    }
    Ok(dx)
}

fn guard(x: DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if x.norm() <= BLOWUP_GUARD {
        Ok(x)
    } else {
        Err(Error::Divergence { last_valid_time: t, guard: BLOWUP_GUARD })
    }
}

/// One RK4 step of `x̂' = A x̂ − B φ(C x̂(t−τ)) + u + L (y − H x̂)` with the
/// innovation held over the step. `u` is the known input term (length n).
/// Pushes the new estimate into `x_hat_history` and returns it.
pub fn observer_step(
    gain: &ObserverGain,
    sys: &PersidskiiSystem,
    meas: &MeasurementModel,
    x_hat_history: &mut HistoryBuffer,
    y_now: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let x0 = x_hat_history.latest().clone();
    if y_now.len() != meas.p() || u.len() != sys.n() || x0.len() != sys.n() {
        return Err(dim_err("observer_step dimensions"));
    }
    let drive = u + &gain.l * (y_now - &meas.h * &x0);
    let xn = rk4_step(x_hat_history, sys.tau, dt, &|_, x, xd| model_drift(sys, x, xd, &drive))?;
    let t = x_hat_history.t_now();
    let xn = guard(xn, t)?;
    x_hat_history.push(xn.clone());
    Ok(xn)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfConfig {
    /// Continuous process-noise intensity.
    pub process_cov: DMatrix<f64>,
    /// Per-sample measurement covariance.
    pub measurement_cov: DMatrix<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl EkfConfig {
    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        let psd = |m: &DMatrix<f64>, strict: bool| -> bool {
            let e = nalgebra::SymmetricEigen::new(m.clone()).eigenvalues;
            e.iter().all(|v| if strict { *v > 0.0 } else { *v >= -1e-12 })
        };
        if self.process_cov.shape() != (n, n) || self.initial_cov.shape() != (n, n) || self.measurement_cov.shape() != (p, p) {
            return Err(dim_err("EKF covariance dimensions"));
        }
        if !psd(&self.process_cov, false) || !psd(&self.measurement_cov, true) || !psd(&self.initial_cov, true) {
            return Err(Error::Numeric("EKF covariances must be PSD / PD".into()));
        }
        Ok(())
    }
}

/// Jacobian of the estimator model drift at `x` (delayed argument taken at `x`).
pub fn model_jacobian(sys: &PersidskiiSystem, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut j = sys.a.clone();
    if sys.k() > 0 {
        j -= &sys.b * sys.phi_jacobian(x)?;
    }
    Ok(j)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Continuous-discrete EKF step: RK4 mean and first-order covariance propagation
/// over `dt`, then the Kalman update with `y_now` (the sample at the end of
/// the step). The mean history is advanced in place.
pub fn ekf_step(
    cfg: &EkfConfig,
    sys: &PersidskiiSystem,
    meas: &MeasurementModel,
    mean_history: &mut HistoryBuffer,
    cov: &DMatrix<f64>,
    y_now: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = sys.n();
    let x0 = mean_history.latest().clone();
    if y_now.len() != meas.p() || u.len() != n || x0.len() != n || cov.shape() != (n, n) {
        return Err(dim_err("ekf_step dimensions"));
    }
    let jac = model_jacobian(sys, &x0)?;
    let xp = rk4_step(mean_history, sys.tau, dt, &|_, x, xd| model_drift(sys, x, xd, u))?;
    // Euler transition Φ = I + J dt; Φ P Φᵀ keeps the prediction PSD
    let phi = DMatrix::identity(n, n) + &jac * dt;
    let mut pp = &phi * cov * phi.transpose() + &cfg.process_cov * dt;
    symmetrize(&mut pp);
    let h = &meas.h;
    let s = h * &pp * h.transpose() + &cfg.measurement_cov;
    let s_inv = s.clone().cholesky().ok_or_else(|| Error::Numeric("innovation covariance is not positive definite".into()))?.inverse();
    let k = &pp * h.transpose() * s_inv;
    let x = &xp + &k * (y_now - h * &xp);
    let ikh = DMatrix::identity(n, n) - &k * h;
    let mut p = &ikh * &pp * ikh.transpose() + &k * &cfg.measurement_cov * k.transpose();
    symmetrize(&mut p);
    let t = mean_history.t_now();
    let x = guard(x, t)?;
    // the history keeps the corrected mean
    mean_history.push(x.clone());
    Ok((x, p))
}

pub enum Estimator<'a> {
    Persidskii(&'a ObserverGain),
    Ekf(&'a EkfConfig),
}

/// Plant/estimator co-simulation inputs. The plant is `plant` driven by the
/// unknown disturbance `w(t)` plus the known input term `u(t, x)`; the
/// estimator sees `model` and `u` only.
pub struct EstimationScenario<'a> {
    pub plant: &'a PersidskiiSystem,
    pub model: &'a PersidskiiSystem,
    pub meas: &'a MeasurementModel,
    pub x0_true: DVector<f64>,
    pub x0_est: DVector<f64>,
    pub w: &'a dyn Fn(f64) -> DVector<f64>,
    pub u: &'a dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
    pub t_end: f64,
    pub dt: f64,
    /// RMSE window `[t0, t1]`.
    pub window: (f64, f64),
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRun {
    pub truth: Trajectory,
    pub estimate: Trajectory,
    pub rmse: Vec<f64>,
}

pub fn estimation_experiment(sc: &EstimationScenario<'_>, est: &Estimator<'_>) -> Result<EstimationRun> {
    let n = sc.plant.n();
    if sc.model.n() != n || sc.x0_true.len() != n || sc.x0_est.len() != n {
        return Err(dim_err("estimation scenario dimensions"));
    }
    let dt = sc.dt;
    let steps = libm::round(sc.t_end / dt) as usize;
    let x0t = sc.x0_true.clone();
    let x0e = sc.x0_est.clone();
    let mut plant_hist = HistoryBuffer::new(Box::new(move |_| x0t.clone()), 0.0, dt, sc.plant.tau + dt);
    let mut est_hist = HistoryBuffer::new(Box::new(move |_| x0e.clone()), 0.0, dt, sc.model.tau + dt);
    let mut cov = match est {
        Estimator::Ekf(cfg) => {
            cfg.validate(n, sc.meas.p())?;
            cfg.initial_cov.clone()
        }
        Estimator::Persidskii(_) => DMatrix::zeros(n, n),
    };
    let mut noise = NoiseSource::new(sc.noise_seed);
    let mut times = vec![0.0];
    let mut truth = vec![sc.x0_true.clone()];
    let mut estimate = vec![sc.x0_est.clone()];
    let mut y = sc.meas.measure(&sc.x0_true, &mut noise);
    for i in 0..steps {
        let t = i as f64 * dt;
        let x = plant_hist.latest().clone();
        let u = (sc.u)(t, &x);
        let xn = rk4_step(&mut plant_hist, sc.plant.tau, dt, &|c, xs, xd| {
            Ok(crate::model::rhs(sc.plant, xs, xd, &(sc.w)(t + c * dt))? + &u)
        })?;
        let xn = guard(xn, t)?;
        plant_hist.push(xn.clone());
        let y_next = sc.meas.measure(&xn, &mut noise);
        let xe = match est {
            Estimator::Persidskii(g) => observer_step(g, sc.model, sc.meas, &mut est_hist, &y, &u, dt)?,
            Estimator::Ekf(cfg) => {
                let (xe, p) = ekf_step(cfg, sc.model, sc.meas, &mut est_hist, &cov, &y_next, &u, dt)?;
                cov = p;
                xe
            }
        };
        y = y_next;
        times.push((i + 1) as f64 * dt);
        truth.push(xn);
        estimate.push(xe);
    }
    let mut rmse = Vec::with_capacity(n);
    for j in 0..n {
        rmse.push(rmse_window(&times, &component(&estimate, j), &component(&truth, j), sc.window.0, sc.window.1)?);
    }
    Ok(EstimationRun {
        truth: Trajectory { times: times.clone(), states: truth, inputs: None },
        estimate: Trajectory { times, states: estimate, inputs: None },
        rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{certify_iss, certify_min_gamma, CertifyOptions};
    use crate::model::{rhs, NonlinearityKind, SectorNonlinearity};
    use approx::assert_abs_diff_eq;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(tau: f64) -> PersidskiiSystem {
        PersidskiiSystem::new(m1(-1.0), m1(1.0), m1(1.0), m1(1.0), tau, vec![SectorNonlinearity::tanh(1.0)]).unwrap()
    }

    fn planar(tau: f64) -> PersidskiiSystem {
        PersidskiiSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            tau,
            vec![SectorNonlinearity::tanh(1.0)],
        )
        .unwrap()
    }

    fn open_loop_gamma(sys: &PersidskiiSystem) -> f64 {
        certify_min_gamma(sys, sys.tau, &CertifyOptions::default()).unwrap().certificate().unwrap().gamma
    }

    #[test]
    fn measurement_model_checks() {
        assert!(MeasurementModel::new(DMatrix::zeros(0, 2), vec![]).is_err());
        assert!(MeasurementModel::new(DMatrix::zeros(1, 2), vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn feedback_does_not_hurt() {
        for tau in [0.0, 0.2] {
            let sys = scalar(tau);
            let meas = MeasurementModel::new(m1(1.0), vec![0.0]).unwrap();
            let g = synthesize_gain(&sys, &meas, (0.05, 20.0), 1e-3).unwrap();
            assert!(g.gamma_hinf <= open_loop_gamma(&sys) + 1e-3, "tau {tau}: {} vs {}", g.gamma_hinf, open_loop_gamma(&sys));
            assert!(g.certificate.margin <= -g.certificate.eps_strict);
        }
    }

    #[test]
    fn no_measurement_degenerates_to_plant_certificate() {
        let sys = scalar(0.0);
        let meas = MeasurementModel::new(m1(0.0), vec![0.0]).unwrap();
        let tol = 1e-3;
        let g = synthesize_gain(&sys, &meas, (0.05, 20.0), tol).unwrap();
        assert_abs_diff_eq!(g.gamma_hinf, open_loop_gamma(&sys), epsilon = 2.0 * tol);
    }

    #[test]
    fn feasible_lower_end_returns_immediately() {
        let sys = scalar(0.0);
        let meas = MeasurementModel::new(m1(1.0), vec![0.0]).unwrap();
        let g = synthesize_gain(&sys, &meas, (5.0, 10.0), 1e-3).unwrap();
        assert_eq!(g.gamma_hinf, 5.0);
        let unstable = sys.with_a(m1(3.0));
        let blind = MeasurementModel::new(m1(0.0), vec![0.0]).unwrap();
        assert!(matches!(synthesize_gain(&unstable, &blind, (1.0, 10.0), 1e-3), Err(Error::Bracket(_))));
    }

    #[test]
    fn bisection_result_is_tight() {
        let sys = planar(0.1);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let tol = 1e-3;
        let g = synthesize_gain(&sys, &meas, (0.01, 50.0), tol).unwrap();
        let below = g.gamma_hinf - 2.0 * tol;
        assert!(synthesize_at(&sys, &meas, below * below, &SolverConfig::default()).unwrap().is_none());
        // the certificate carries over to the closed error system
        let err = error_system(&sys, &meas, &g.l);
        assert!(certify_iss(&err, g.gamma_hinf * 1.01, 0.1).unwrap().is_certified());
    }

    fn zero_gain(n: usize, p: usize) -> ObserverGain {
        ObserverGain {
            l: DMatrix::zeros(n, p),
            gamma_hinf: 1.0,
            certificate: IssCertificate {
                p: DMatrix::identity(n, n),
                q: DMatrix::identity(n, n),
                s: DMatrix::identity(n, n),
                lambda: DMatrix::zeros(1, 1),
                t_delayed: DVector::zeros(1),
                t_current: DVector::zeros(1),
                p12: DMatrix::zeros(n, n),
                p22: DMatrix::zeros(n, n),
                gamma: 1.0,
                tau: 0.0,
                margin: -1.0,
                overall_margin: -1.0,
                eps_strict: 1e-8,
                form: PsiForm::Completed,
            },
        }
    }

    #[test]
    fn zero_gain_matches_open_loop_step() {
        let sys = planar(0.0);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let x0 = DVector::from_vec(vec![0.7, -0.3]);
        let dt = 1e-2;
        let mut hist = HistoryBuffer::constant(x0.clone(), 0.0, dt, dt);
        let xo = observer_step(&zero_gain(2, 1), &sys, &meas, &mut hist, &DVector::from_element(1, 5.0), &DVector::zeros(2), dt).unwrap();
        let tr = crate::model::simulate(&sys, Box::new(move |_| x0.clone()), &|_| DVector::zeros(1), dt, dt).unwrap();
        assert!((xo - tr.final_state()).norm() < 1e-15);
    }

    #[test]
    fn scalar_affine_step_by_hand() {
        // x̂' = −x̂ + l(y − x̂) = −(1 + l)x̂ + l·y with B = 0: RK4 of an affine ODE.
        let sys = PersidskiiSystem::new(m1(-1.0), DMatrix::zeros(1, 0), DMatrix::zeros(0, 1), m1(1.0), 0.0, vec![]).unwrap();
        let meas = MeasurementModel::new(m1(1.0), vec![0.0]).unwrap();
        let mut g = zero_gain(1, 1);
        g.l = m1(2.0);
        let (x0, y, dt) = (0.5, 1.5, 0.1);
        let mut hist = HistoryBuffer::constant(DVector::from_element(1, x0), 0.0, dt, dt);
        let xo = observer_step(&g, &sys, &meas, &mut hist, &DVector::from_element(1, y), &DVector::zeros(1), dt).unwrap()[0];
        let drive = 2.0 * (y - x0);
        let f = |x: f64| -x + drive;
        let k1 = f(x0);
        let k2 = f(x0 + 0.5 * dt * k1);
        let k3 = f(x0 + 0.5 * dt * k2);
        let k4 = f(x0 + dt * k3);
        assert_abs_diff_eq!(xo, x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), epsilon = 1e-12);
    }

    #[test]
    fn exact_state_gives_zero_innovation() {
        let sys = planar(0.0);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let mut g = zero_gain(2, 1);
        g.l = DMatrix::from_row_slice(2, 1, &[3.0, 1.0]);
        let x0 = DVector::from_vec(vec![0.2, 0.4]);
        let y = &meas.h * &x0;
        let mut hist = HistoryBuffer::constant(x0.clone(), 0.0, 1e-2, 1e-2);
        let xo = observer_step(&g, &sys, &meas, &mut hist, &y, &DVector::zeros(2), 1e-2).unwrap();
        let tr = crate::model::simulate(&sys, Box::new(move |_| x0.clone()), &|_| DVector::zeros(1), 1e-2, 1e-2).unwrap();
        assert!((xo - tr.final_state()).norm() < 1e-15);
    }

    #[test]
    fn error_converges_with_synthesized_gain() {
        let sys = planar(0.1);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let g = synthesize_gain(&sys, &meas, (0.01, 50.0), 1e-2).unwrap();
        let sc = EstimationScenario {
            plant: &sys,
            model: &sys,
            meas: &meas,
            x0_true: DVector::from_vec(vec![1.0, 0.0]),
            x0_est: DVector::from_vec(vec![-1.0, 1.0]),
            w: &|_| DVector::zeros(1),
            u: &|_, _| DVector::zeros(2),
            t_end: 30.0,
            dt: 1e-2,
            window: (0.0, 30.0),
            noise_seed: 0,
        };
        let run = estimation_experiment(&sc, &Estimator::Persidskii(&g)).unwrap();
        let e0 = (&sc.x0_true - &sc.x0_est).norm();
        let ef = (run.truth.final_state() - run.estimate.final_state()).norm();
        assert!(ef <= 1e-3 * e0, "final error {ef}");
    }

    #[test]
    fn error_system_equivalence_per_step() {
        // ė = (A − LH)e − B[φ(Cx) − φ(Cx̂)] with e and the two states moved by RK4.
        let sys = planar(0.0);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let g = synthesize_gain(&sys, &meas, (0.01, 50.0), 1e-2).unwrap();
        let dt = 1e-3;
        let mut x = DVector::from_vec(vec![1.0, 0.5]);
        let mut xh = DVector::from_vec(vec![0.0, 0.0]);
        let w = DVector::from_element(1, 0.3);
        for _ in 0..200 {
            let e = &x - &xh;
            let drive = &g.l * (&meas.h * &e);
            let fp = |x: &DVector<f64>| rhs(&sys, x, x, &w).unwrap();
            let fo = |x: &DVector<f64>| model_drift(&sys, x, x, &drive).unwrap();
            let (p1, o1) = (fp(&x), fo(&xh));
            let (xp2, xo2) = (&x + &p1 * (0.5 * dt), &xh + &o1 * (0.5 * dt));
            let (p2, o2) = (fp(&xp2), fo(&xo2));
            let (xp3, xo3) = (&x + &p2 * (0.5 * dt), &xh + &o2 * (0.5 * dt));
            let (p3, o3) = (fp(&xp3), fo(&xo3));
            let (xp4, xo4) = (&x + &p3 * dt, &xh + &o3 * dt);
            let (p4, o4) = (fp(&xp4), fo(&xo4));
            // error-system stages from the same stage pairs
            let es = |xs: &DVector<f64>, os: &DVector<f64>, e_hold: &DVector<f64>| {
                let dphi = sys.phi(xs).unwrap() - sys.phi(os).unwrap();
                &sys.a * (xs - os) - &g.l * (&meas.h * e_hold) - &sys.b * dphi + &sys.d * &w
            };
            let k = [es(&x, &xh, &e), es(&xp2, &xo2, &e), es(&xp3, &xo3, &e), es(&xp4, &xo4, &e)];
            let e_next = &e + (&k[0] + &k[1] * 2.0 + &k[2] * 2.0 + &k[3]) * (dt / 6.0);
            x = &x + (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (dt / 6.0);
            xh = &xh + (o1 + o2 * 2.0 + o3 * 2.0 + o4) * (dt / 6.0);
            assert!((&e_next - (&x - &xh)).norm() < 1e-8);
        }
    }

    #[test]
    fn ekf_matches_riccati_fixed_point() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.4]);
        let sys = PersidskiiSystem::new(a.clone(), DMatrix::zeros(2, 0), DMatrix::zeros(0, 2), DMatrix::zeros(2, 1), 0.0, vec![]).unwrap();
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let cfg = EkfConfig {
            process_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.1])),
            measurement_cov: m1(0.05),
            initial_cov: DMatrix::identity(2, 2),
        };
        let dt = 1e-2;
        let x_true0 = DVector::from_vec(vec![1.0, 0.0]);
        let truth = crate::model::simulate(&sys, Box::new(move |_| x_true0.clone()), &|_| DVector::zeros(1), 40.0, dt).unwrap();
        let mut hist = HistoryBuffer::constant(DVector::zeros(2), 0.0, dt, dt);
        let mut cov = cfg.initial_cov.clone();
        let mut x = DVector::zeros(2);
        for i in 1..truth.len() {
            let y = &meas.h * &truth.states[i];
            let (xn, pn) = ekf_step(&cfg, &sys, &meas, &mut hist, &cov, &y, &DVector::zeros(2), dt).unwrap();
            assert_eq!(pn, pn.transpose());
            x = xn;
            cov = pn;
        }
        assert!((&x - truth.final_state()).norm() < 1e-6);
        // discrete Riccati iteration oracle in the non-Joseph form
        let h = &meas.h;
        let phi = DMatrix::identity(2, 2) + &a * dt;
        let mut p = cfg.initial_cov.clone();
        for _ in 0..20000 {
            let pm = &phi * &p * phi.transpose() + &cfg.process_cov * dt;
            let s = (h * &pm * h.transpose())[(0, 0)] + 0.05;
            p = &pm - &pm * h.transpose() * h * &pm / s;
        }
        assert!((&cov - &p).norm() < 1e-4, "{cov} vs {p}");
    }

    #[test]
    fn huge_measurement_noise_makes_update_a_no_op() {
        let sys = planar(0.0);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let cfg = EkfConfig { process_cov: DMatrix::zeros(2, 2), measurement_cov: m1(1e12), initial_cov: DMatrix::identity(2, 2) };
        let dt = 1e-2;
        let x0 = DVector::from_vec(vec![0.3, 0.1]);
        let mut h1 = HistoryBuffer::constant(x0.clone(), 0.0, dt, dt);
        let (x, _) = ekf_step(&cfg, &sys, &meas, &mut h1, &cfg.initial_cov, &DVector::from_element(1, 100.0), &DVector::zeros(2), dt).unwrap();
        let mut h2 = HistoryBuffer::constant(x0.clone(), 0.0, dt, dt);
        let xp = rk4_step(&mut h2, 0.0, dt, &|_, x, xd| model_drift(&sys, x, xd, &DVector::zeros(2))).unwrap();
        assert!((&x - &xp).norm() <= 1e-6 * xp.norm());
    }

    #[test]
    fn noise_free_exact_start_has_zero_error() {
        let sys = planar(0.0);
        let meas = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![0.0]).unwrap();
        let g = synthesize_gain(&sys, &meas, (0.01, 50.0), 1e-2).unwrap();
        let x0 = DVector::from_vec(vec![0.5, -0.5]);
        let sc = EstimationScenario {
            plant: &sys,
            model: &sys,
            meas: &meas,
            x0_true: x0.clone(),
            x0_est: x0,
            w: &|_| DVector::zeros(1),
            u: &|t, _| DVector::from_vec(vec![0.0, libm::sin(t)]),
            t_end: 5.0,
            dt: 1e-3,
            window: (0.0, 5.0),
            noise_seed: 3,
        };
        let run = estimation_experiment(&sc, &Estimator::Persidskii(&g)).unwrap();
        assert!(run.rmse.iter().all(|r| *r <= 1e-6), "{:?}", run.rmse);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = PersidskiiSystem::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 1),
            0.0,
            vec![SectorNonlinearity { kind: NonlinearityKind::Scheduled { companion: 1, gain: 2.0, lower: -5.0, upper: 5.0 }, sigma: 20.0 }],
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.4, 1.3]);
        let j = model_jacobian(&sys, &x).unwrap();
        let f = |x: &DVector<f64>| model_drift(&sys, x, x, &DVector::zeros(2)).unwrap();
        for c in 0..2 {
            let mut e = DVector::zeros(2);
            e[c] = 1e-6;
            let fd = (f(&(&x + &e)) - f(&(&x - &e))) / 2e-6;
            for r in 0..2 {
                assert_abs_diff_eq!(j[(r, c)], fd[r], epsilon = 1e-6);
            }
        }
    }
}
