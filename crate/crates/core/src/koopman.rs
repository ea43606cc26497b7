//! Dictionary lifting, least-squares EDMD with structured sector channels,
//! and stability-constrained identification.
//!
//! The lifted model is `g⁺ = A_K g + B_K Φ(C_K g) + D_K u`. Certification
//! works on the Euler surrogate `ġ = (A_K − I)/dt · g − (−B_K/dt) Φ(C_K g) +
//! D_K/dt · u`, a Persidskii system without delay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::certify::{assemble, certify_iss_with, certify_min_gamma, CertifyOptions, CertifyOutcome, IssCertificate};
use crate::error::{dim_err, Error, Result};
use crate::model::{NonlinearityKind, PersidskiiSystem, SectorNonlinearity};

#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    /// Raw coordinate `x_i`.
    State(usize),
    /// `Π x_i^{e_i}`.
    Monomial(Vec<u32>),
    /// `exp(−|x − c|² / (2 w²))`.
    Rbf { center: Vec<f64>, width: f64 },
    Sin { coord: usize, freq: f64 },
    Cos { coord: usize, freq: f64 },
}

impl Observable {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            Observable::State(i) => x[*i],
            Observable::Monomial(e) => e.iter().zip(x).map(|(&p, &v)| libm::pow(v, p as f64)).product(),
            Observable::Rbf { center, width } => {
                if !(*width > 0.0) {
                    return Err(Error::Config(format!("RBF width must be positive, got {width}")));
                }
                let d2: f64 = center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
                libm::exp(-d2 / (2.0 * width * width))
            }
            Observable::Sin { coord, freq } => libm::sin(freq * x[*coord]),
            Observable::Cos { coord, freq } => libm::cos(freq * x[*coord]),
        })
    }

    fn check(&self, n: usize) -> Result<()> {
        let ok = match self {
            Observable::State(i) | Observable::Sin { coord: i, .. } | Observable::Cos { coord: i, .. } => *i < n,
            Observable::Monomial(e) => e.len() == n,
            Observable::Rbf { center, width } => {
                if !(*width > 0.0) {
                    return Err(Error::Config(format!("RBF width must be positive, got {width}")));
                }
                center.len() == n
            }
        };
        if ok {
            Ok(())
        } else {
            Err(dim_err(format!("observable {self:?} does not fit a state of dimension {n}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub n: usize,
    pub observables: Vec<Observable>,
}

/// Exponent vectors of total degree `d` in graded lexicographic order.
fn exponents(n: usize, d: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return vec![vec![d]];
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for mut rest in exponents(n - 1, d - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl Dictionary {
    pub fn new(n: usize, observables: Vec<Observable>) -> Result<Self> {
        for o in &observables {
            o.check(n)?;
        }
        let d = Dictionary { n, observables };
        if d.n_g() < n {
            return Err(dim_err("dictionary must have at least n observables"));
        }
        Ok(d)
    }

    pub fn identity(n: usize) -> Self {
        Dictionary { n, observables: (0..n).map(Observable::State).collect() }
    }

    /// Raw coordinates followed by all monomials of degree `2..=degree`.
    pub fn polynomial(n: usize, degree: u32) -> Self {
        let mut d = Self::identity(n);
        for deg in 2..=degree {
            d.observables.extend(exponents(n, deg).into_iter().map(Observable::Monomial));
        }
        d
    }

    pub fn with_rbf(mut self, center: Vec<f64>, width: f64) -> Result<Self> {
        let o = Observable::Rbf { center, width };
        o.check(self.n)?;
        self.observables.push(o);
        Ok(self)
    }

    pub fn n_g(&self) -> usize {
        self.observables.len()
    }

    /// True when the first `n` observables are the raw coordinates in order.
    pub fn includes_state(&self) -> bool {
        self.n_g() >= self.n && (0..self.n).all(|i| self.observables[i] == Observable::State(i))
    }

    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(dim_err(format!("lift expects a state of length {}, got {}", self.n, x.len())));
        }
        let mut g = DVector::zeros(self.n_g());
        for (i, o) in self.observables.iter().enumerate() {
            g[i] = o.eval(x.as_slice())?;
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("lifted vector".into()));
        }
        Ok(g)
    }
}

/// Nonlinearity acting on one lifted coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiChannel {
    pub coordinate: usize,
    pub kind: NonlinearityKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedModel {
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    /// Unit row selectors.
    pub c_k: DMatrix<f64>,
    pub d_k: DMatrix<f64>,
    pub dt: f64,
    pub phi: Vec<SectorNonlinearity>,
}

impl LiftedModel {
    pub fn n_g(&self) -> usize {
        self.a_k.nrows()
    }

    pub fn m_u(&self) -> usize {
        self.d_k.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (ng, k) = (self.n_g(), self.phi.len());
        if self.a_k.ncols() != ng || self.b_k.shape() != (ng, k) || self.c_k.shape() != (k, ng) || self.d_k.nrows() != ng {
            return Err(dim_err("lifted model matrices are inconsistent"));
        }
        for r in 0..k {
            let row = self.c_k.row(r);
            if row.iter().filter(|v| **v == 1.0).count() != 1 || row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Structure(format!("C_K row {r} is not a unit selector")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("sampling period must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    fn phi_vec(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        let s = &self.c_k * g;
        let mut out = DVector::zeros(self.phi.len());
        for (i, nl) in self.phi.iter().enumerate() {
            out[i] = nl.eval(s[i], g.as_slice())?;
        }
        Ok(out)
    }

    /// One step of the lifted model.
    pub fn step(&self, g: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut next = &self.a_k * g + &self.d_k * u;
        if !self.phi.is_empty() {
            next += &self.b_k * self.phi_vec(g)?;
        }
        Ok(next)
    }

    /// Euler surrogate as a delay-free Persidskii system.
    pub fn surrogate(&self) -> Result<PersidskiiSystem> {
        self.validate()?;
        let ng = self.n_g();
        let a = (&self.a_k - DMatrix::identity(ng, ng)) / self.dt;
        let d = if self.m_u() == 0 { DMatrix::zeros(ng, 1) } else { &self.d_k / self.dt };
        PersidskiiSystem::new(a, -&self.b_k / self.dt, self.c_k.clone(), d, 0.0, self.phi.clone())
    }
}

/// One transition `(x_k, u_k, x_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// Consecutive transitions from a sampled series.
pub fn snapshots(states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<Vec<Snapshot>> {
    if states.len() < 2 || inputs.len() + 1 < states.len() {
        return Err(dim_err("need one input per transition"));
    }
    Ok((0..states.len() - 1).map(|i| Snapshot { x: states[i].clone(), u: inputs[i].clone(), x_next: states[i + 1].clone() }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdFit {
    pub model: LiftedModel,
    pub rmse: f64,
    /// Set when the regressor was rank-deficient and the ridge solve was used.
    pub regularized: bool,
}

const RIDGE: f64 = 1e-10;

struct Regression {
    /// Normal matrix `Σ z zᵀ` and cross term `Σ y zᵀ`.
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    /// `Σ |y|²`, for residuals without revisiting the data.
    yy: f64,
    count: usize,
    ng: usize,
}

impl Regression {
    fn residual_sq(&self, theta: &DMatrix<f64>) -> f64 {
        let quad = (theta * &self.gram * theta.transpose()).trace();
        let lin = (theta * self.cross.transpose()).trace();
        (self.yy - 2.0 * lin + quad).max(0.0)
    }

    fn rmse(&self, theta: &DMatrix<f64>) -> f64 {
        libm::sqrt(self.residual_sq(theta) / (self.count * self.ng) as f64)
    }
}

fn selector(ng: usize, channels: &[PhiChannel]) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::zeros(channels.len(), ng);
    for (r, ch) in channels.iter().enumerate() {
        if ch.coordinate >= ng {
            return Err(dim_err(format!("channel coordinate {} is outside the dictionary", ch.coordinate)));
        }
        c[(r, ch.coordinate)] = 1.0;
    }
    Ok(c)
}

/// Sector bound of each channel on the data: 1.1 · sup φ(s)/s over the
/// sampled arguments, at least the slope at the origin.
fn data_sectors(channels: &[PhiChannel], lifted: &[DVector<f64>]) -> Result<Vec<SectorNonlinearity>> {
    let mut out = Vec::with_capacity(channels.len());
    for ch in channels {
        let probe = SectorNonlinearity { kind: ch.kind.clone(), sigma: f64::INFINITY };
        let mut slope: f64 = 0.0;
        for g in lifted {
            let s = g[ch.coordinate];
            if s.abs() > 1e-12 {
                slope = slope.max(probe.eval(s, g.as_slice())? / s);
            }
            slope = slope.max(probe.derivative(0.0, g.as_slice())?);
        }
        out.push(SectorNonlinearity { kind: ch.kind.clone(), sigma: 1.1 * slope.max(1e-12) });
    }
    Ok(out)
}

struct Prepared {
    reg: Regression,
    c_k: DMatrix<f64>,
    phi: Vec<SectorNonlinearity>,
    m_u: usize,
}

fn prepare(dict: &Dictionary, data: &[Snapshot], channels: &[PhiChannel]) -> Result<Prepared> {
    let ng = dict.n_g();
    let kp = channels.len();
    let m_u = data.first().map_or(0, |s| s.u.len());
    if data.len() < ng + kp + m_u {
        return Err(Error::Config(format!("need at least {} samples, got {}", ng + kp + m_u, data.len())));
    }
    if data.iter().any(|s| s.u.len() != m_u) {
        return Err(dim_err("inputs of varying length"));
    }
    let c_k = selector(ng, channels)?;
    let lifted: Vec<DVector<f64>> = data.iter().map(|s| dict.lift(&s.x)).collect::<Result<_>>()?;
    let phi = data_sectors(channels, &lifted)?;
    let dz = ng + kp + m_u;
    let mut gram = DMatrix::zeros(dz, dz);
    let mut cross = DMatrix::zeros(ng, dz);
    let mut yy = 0.0;
    let mut z = DVector::zeros(dz);
    for (s, g) in data.iter().zip(&lifted) {
        let y = dict.lift(&s.x_next)?;
        z.rows_mut(0, ng).copy_from(g);
        let sel = &c_k * g;
        for (i, nl) in phi.iter().enumerate() {
            z[ng + i] = nl.eval(sel[i], g.as_slice())?;
        }
        z.rows_mut(ng + kp, m_u).copy_from(&s.u);
        gram.ger(1.0, &z, &z, 1.0);
        cross.ger(1.0, &y, &z, 1.0);
        yy += y.norm_squared();
    }
    Ok(Prepared { reg: Regression { gram, cross, yy, count: data.len(), ng }, c_k, phi, m_u })
}

/// Least-squares solution of `Θ G = H`, with column equilibration; falls back
/// to a ridge solve when `G` is numerically singular.
fn solve_normal(gram: &DMatrix<f64>, cross: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let d = gram.nrows();
    let scale = DVector::from_iterator(d, (0..d).map(|i| {
        let v = gram[(i, i)];
        if v > 0.0 {
            1.0 / libm::sqrt(v)
        } else {
            1.0
        }
    }));
    let ds = DMatrix::from_diagonal(&scale);
    let gs = &ds * gram * &ds;
    let eig = nalgebra::SymmetricEigen::new(gs.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e.abs())));
    let singular = !(lo > 1e-13 * hi.max(1e-300)) || gram.diagonal().iter().any(|v| *v <= 0.0);
    let g = if singular { gram + DMatrix::identity(d, d) * RIDGE } else { gs };
    let rhs = if singular { cross.clone() } else { cross * &ds };
    let theta_t = g.cholesky().map(|c| c.solve(&rhs.transpose())).unwrap_or_else(|| DMatrix::zeros(d, cross.nrows()));
    let theta = if singular { theta_t.transpose() } else { theta_t.transpose() * &ds };
    (theta, singular)
}

fn split(theta: &DMatrix<f64>, ng: usize, kp: usize, m_u: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (theta.columns(0, ng).into_owned(), theta.columns(ng, kp).into_owned(), theta.columns(ng + kp, m_u).into_owned())
}

fn assemble_model(theta: &DMatrix<f64>, prep: &Prepared, dt: f64) -> LiftedModel {
    let ng = prep.reg.ng;
    let (a_k, b_k, d_k) = split(theta, ng, prep.phi.len(), prep.m_u);
    LiftedModel { a_k, b_k, c_k: prep.c_k.clone(), d_k, dt, phi: prep.phi.clone() }
}

/// Unconstrained EDMD with fixed selectors `C_K` and channel nonlinearities.
pub fn edmd_unconstrained(dict: &Dictionary, data: &[Snapshot], channels: &[PhiChannel], dt: f64) -> Result<EdmdFit> {
    let prep = prepare(dict, data, channels)?;
    let (theta, regularized) = solve_normal(&prep.reg.gram, &prep.reg.cross);
    let rmse = prep.reg.rmse(&theta);
    let model = assemble_model(&theta, &prep, dt);
    model.validate()?;
    Ok(EdmdFit { model, rmse, regularized })
}

/// One-step prediction RMSE in lifted space over samples and coordinates.
pub fn prediction_rmse(model: &LiftedModel, dict: &Dictionary, data: &[Snapshot]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Coverage("empty data set".into()));
    }
    let mut acc = 0.0;
    for s in data {
        let g = dict.lift(&s.x)?;
        let r = dict.lift(&s.x_next)? - model.step(&g, &s.u)?;
        acc += r.norm_squared();
    }
    Ok(libm::sqrt(acc / (data.len() * model.n_g()) as f64))
}

/// Certifies the Euler surrogate at zero delay. With `gamma = None` the
/// smallest certifiable γ is sought.
pub fn certify_lifted(model: &LiftedModel, gamma: Option<f64>, opts: &CertifyOptions) -> Result<CertifyOutcome> {
    let sys = model.surrogate()?;
    match gamma {
        Some(g) => certify_iss_with(&sys, g, 0.0, opts),
        None => certify_min_gamma(&sys, 0.0, opts),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyConfig {
    pub max_alternations: usize,
    /// Relative residual change that stops the alternation.
    pub conv_tol: f64,
    /// L₂ level at which the surrogate is certified.
    pub gamma: f64,
    pub certify: CertifyOptions,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig { max_alternations: 100, conv_tol: 1e-8, gamma: 1e3, certify: CertifyOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationReport {
    pub rmse_unconstrained: f64,
    pub rmse_constrained: f64,
    /// Largest eigenvalue of Ψ at the returned model (fresh certification).
    pub lmi_margin: f64,
    pub eps_strict: f64,
    pub iterations: usize,
    pub converged: bool,
    /// False when no certified iterate was found; the model is then the
    /// unconstrained fit.
    pub feasible: bool,
    /// Constrained RMSE of every accepted iterate.
    pub rmse_history: Vec<f64>,
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identified {
    pub model: LiftedModel,
    pub report: IdentificationReport,
    pub certificate: Option<IssCertificate>,
}

fn certify_theta(theta: &DMatrix<f64>, prep: &Prepared, dt: f64, cfg: &IdentifyConfig) -> Result<Option<IssCertificate>> {
    let model = assemble_model(theta, prep, dt);
    Ok(certify_lifted(&model, Some(cfg.gamma), &cfg.certify)?.certificate().cloned())
}

/// Largest Ψ eigenvalue of `theta` with the certificate variables frozen.
fn frozen_margin(theta: &DMatrix<f64>, prep: &Prepared, dt: f64, cert: &IssCertificate) -> Result<f64> {
    let sys = assemble_model(theta, prep, dt).surrogate()?;
    assemble(cert.form, &sys, &cert.vars(), cert.gamma * cert.gamma, 0.0)?.max_eigenvalue()
}

/// Feasible starting point: the fit with its surrogate spectrum shifted by
/// −β (A_K − β·dt·I), smallest certified β found by bisection.
fn shifted_start(theta_ls: &DMatrix<f64>, prep: &Prepared, dt: f64, cfg: &IdentifyConfig) -> Result<Option<(DMatrix<f64>, IssCertificate)>> {
    let ng = prep.reg.ng;
    let shift = |beta: f64| {
        let mut t = theta_ls.clone();
        for i in 0..ng {
            t[(i, i)] -= beta * dt;
        }
        t
    };
    let mut hi = 1e-3 / dt;
    let mut found = None;
    for _ in 0..40 {
        let t = shift(hi);
        if let Some(c) = certify_theta(&t, prep, dt, cfg)? {
            found = Some((hi, t, c));
            break;
        }
        hi *= 2.0;
    }
    let Some((mut hi, mut best_t, mut best_c)) = found else { return Ok(None) };
    let mut lo = 0.0;
    for _ in 0..30 {
        if hi - lo <= 1e-6 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let t = shift(mid);
        match certify_theta(&t, prep, dt, cfg)? {
            Some(c) => {
                hi = mid;
                best_t = t;
                best_c = c;
            }
            None => lo = mid,
        }
    }
    Ok(Some((best_t, best_c)))
}

/// Coordinate passes per regression step.
const ENTRY_SWEEPS: usize = 3;

/// Largest `a ∈ [0, 1]` (bisection) keeping `theta + a·dir` certified by the
/// frozen witness.
fn frozen_step(theta: &DMatrix<f64>, dir: &DMatrix<f64>, prep: &Prepared, dt: f64, cert: &IssCertificate) -> Result<f64> {
    let eps = cert.eps_strict;
    let ok = |a: f64| -> Result<bool> { Ok(frozen_margin(&(theta + dir * a), prep, dt, cert)? <= -eps) };
    if ok(1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Residual descent inside the frozen-witness feasible set: a step toward
/// the least-squares fit, then per-row steps (the residual separates over
/// rows), then exact coordinate steps. Each move is clipped to the set, and
/// the residual is convex, so no move increases it.
fn frozen_descent(theta: &DMatrix<f64>, theta_ls: &DMatrix<f64>, prep: &Prepared, dt: f64, cert: &IssCertificate, sweeps: usize) -> Result<DMatrix<f64>> {
    let mut th = theta.clone();
    let dir = theta_ls - &th;
    let a = frozen_step(&th, &dir, prep, dt, cert)?;
    th += &dir * a;
    if a == 1.0 {
        return Ok(th);
    }
    let (rows, cols) = th.shape();
    for i in 0..rows {
        let mut d = DMatrix::zeros(rows, cols);
        d.row_mut(i).copy_from(&(theta_ls.row(i) - th.row(i)));
        let a = frozen_step(&th, &d, prep, dt, cert)?;
        th += &d * a;
    }
    let gram = &prep.reg.gram;
    for _ in 0..sweeps {
        for i in 0..rows {
            for j in 0..cols {
                if gram[(j, j)] <= 0.0 {
                    continue;
                }
                // exact minimizer of the residual along entry (i, j)
                let grad = (th.row(i) * gram.column(j))[(0, 0)] - prep.reg.cross[(i, j)];
                let step = -grad / gram[(j, j)];
                if step == 0.0 || !step.is_finite() {
                    continue;
                }
                let mut d = DMatrix::zeros(rows, cols);
                d[(i, j)] = step;
                let a = frozen_step(&th, &d, prep, dt, cert)?;
                th[(i, j)] += step * a;
            }
        }
    }
    Ok(th)
}

/// Alternating stability-constrained identification. Step (ii) certifies
/// the current iterate (max-margin witness); step (i) keeps that witness
/// fixed, so Ψ is affine in (A_K, B_K, D_K), and descends the residual
/// inside `Ψ ⪯ −ε_strict I` (see `frozen_descent`); every accepted step is
/// non-increasing in the residual.
pub fn identify_constrained(dict: &Dictionary, data: &[Snapshot], channels: &[PhiChannel], dt: f64, cfg: &IdentifyConfig) -> Result<Identified> {
    let prep = prepare(dict, data, channels)?;
    let (theta_ls, regularized) = solve_normal(&prep.reg.gram, &prep.reg.cross);
    let rmse_u = prep.reg.rmse(&theta_ls);
    let unconstrained = assemble_model(&theta_ls, &prep, dt);
    unconstrained.validate()?;
    let report = |rmse_c: f64, margin: f64, eps: f64, iterations: usize, converged: bool, feasible: bool, hist: Vec<f64>| IdentificationReport {
        rmse_unconstrained: rmse_u,
        rmse_constrained: rmse_c,
        lmi_margin: margin,
        eps_strict: eps,
        iterations,
        converged,
        feasible,
        rmse_history: hist,
        regularized,
    };
    if let Some(c) = certify_theta(&theta_ls, &prep, dt, cfg)? {
        return Ok(Identified {
            model: unconstrained,
            report: report(rmse_u, c.margin, c.eps_strict, 0, true, true, vec![rmse_u]),
            certificate: Some(c),
        });
    }
    let Some((mut theta, mut cert)) = shifted_start(&theta_ls, &prep, dt, cfg)? else {
        return Ok(Identified { model: unconstrained, report: report(rmse_u, f64::NAN, f64::NAN, 0, false, false, vec![]), certificate: None });
    };
    let mut res = prep.reg.residual_sq(&theta);
    let mut hist = vec![prep.reg.rmse(&theta)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_alternations {
        iterations += 1;
        // (i) regression step with the certificate frozen
        let cand = frozen_descent(&theta, &theta_ls, &prep, dt, &cert, ENTRY_SWEEPS)?;
        let full = (&cand - &theta_ls).abs().max() == 0.0;
        // (ii) Gram step: re-certify; keeps the iterate only if certified afresh
        let Some(c) = certify_theta(&cand, &prep, dt, cfg)? else { break };
        let new_res = prep.reg.residual_sq(&cand);
        let change = (res - new_res).abs() / res.max(1e-300);
        if new_res <= res {
            theta = cand;
            cert = c;
            res = new_res;
            hist.push(prep.reg.rmse(&theta));
        }
        if full || change < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    let model = assemble_model(&theta, &prep, dt);
    let rmse_c = prep.reg.rmse(&theta).max(rmse_u);
    Ok(Identified { model, report: report(rmse_c, cert.margin, cert.eps_strict, iterations, converged, true, hist), certificate: Some(cert) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::FeasibilityStatus;
    use crate::stats::NoiseSource;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn linear_data(a: &DMatrix<f64>, d: &DMatrix<f64>, count: usize, seed: u64) -> Vec<Snapshot> {
        let mut noise = NoiseSource::new(seed);
        let n = a.nrows();
        let mut x = DVector::from_iterator(n, (0..n).map(|_| noise.standard()));
        let mut out = Vec::new();
        for _ in 0..count {
            let u = DVector::from_iterator(d.ncols(), (0..d.ncols()).map(|_| noise.standard()));
            let xn = a * &x + d * &u;
            out.push(Snapshot { x: x.clone(), u, x_next: xn.clone() });
            // restart occasionally to keep the data well spread
            x = if xn.norm() > 10.0 { DVector::from_iterator(n, (0..n).map(|_| noise.standard())) } else { xn };
        }
        out
    }

    #[test]
    fn lift_examples() {
        assert_eq!(Dictionary::identity(2).lift(&v(&[1.0, -2.0])).unwrap(), v(&[1.0, -2.0]));
        let d = Dictionary::polynomial(2, 2);
        assert_eq!(d.lift(&v(&[1.0, 2.0])).unwrap(), v(&[1.0, 2.0, 1.0, 2.0, 4.0]));
        assert!(d.includes_state());
        let r = Dictionary::identity(1).with_rbf(vec![0.0], 1.0).unwrap();
        assert_eq!(r.lift(&v(&[0.0])).unwrap()[1], 1.0);
        assert!(matches!(Dictionary::identity(1).with_rbf(vec![0.0], 0.0), Err(Error::Config(_))));
        assert!(d.lift(&v(&[1.0])).is_err());
    }

    #[test]
    fn exact_linear_recovery() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let data = linear_data(&a, &DMatrix::zeros(2, 0), 200, 1);
        let fit = edmd_unconstrained(&Dictionary::identity(2), &data, &[], 0.01).unwrap();
        assert!((&fit.model.a_k - &a).abs().max() < 1e-8);
        assert!(!fit.regularized);
    }

    #[test]
    fn zero_data_is_regularized() {
        let data: Vec<Snapshot> = (0..10).map(|_| Snapshot { x: v(&[0.0, 0.0]), u: v(&[0.0]), x_next: v(&[0.0, 0.0]) }).collect();
        let fit = edmd_unconstrained(&Dictionary::identity(2), &data, &[], 0.01).unwrap();
        assert!(fit.regularized);
        assert_eq!(fit.model.a_k.abs().max(), 0.0);
        assert_eq!(fit.model.d_k.abs().max(), 0.0);
    }

    #[test]
    fn self_consistent_recovery_with_channel_and_input() {
        let id = Dictionary::identity(2);
        let ch = [PhiChannel { coordinate: 0, kind: NonlinearityKind::Tanh { scale: 1.0 } }];
        let truth = LiftedModel {
            a_k: DMatrix::from_row_slice(2, 2, &[0.7, 0.1, -0.2, 0.6]),
            b_k: DMatrix::from_row_slice(2, 1, &[0.3, -0.5]),
            c_k: selector(2, &ch).unwrap(),
            d_k: DMatrix::from_row_slice(2, 1, &[0.2, 1.0]),
            dt: 0.01,
            phi: vec![SectorNonlinearity::tanh(1.0)],
        };
        let mut noise = NoiseSource::new(4);
        let data: Vec<Snapshot> = (0..200)
            .map(|_| {
                let x = v(&[2.0 * noise.standard(), noise.standard()]);
                let u = v(&[noise.standard()]);
                let x_next = truth.step(&x, &u).unwrap();
                Snapshot { x, u, x_next }
            })
            .collect();
        let fit = edmd_unconstrained(&id, &data, &ch, 0.01).unwrap();
        assert!((&fit.model.a_k - &truth.a_k).abs().max() < 1e-8);
        assert!((&fit.model.b_k - &truth.b_k).abs().max() < 1e-8);
        assert!((&fit.model.d_k - &truth.d_k).abs().max() < 1e-8);
        assert!(prediction_rmse(&fit.model, &id, &data).unwrap() < 1e-10);
        assert!(fit.model.phi[0].sigma >= 1.0);
    }

    #[test]
    fn certify_lifted_examples() {
        let mk = |a: f64| LiftedModel {
            a_k: DMatrix::identity(2, 2) * a,
            b_k: DMatrix::zeros(2, 0),
            c_k: DMatrix::zeros(0, 2),
            d_k: DMatrix::zeros(2, 0),
            dt: 1.0,
            phi: vec![],
        };
        let opts = CertifyOptions::default();
        assert_eq!(certify_lifted(&mk(1.0), Some(10.0), &opts).unwrap().status(), FeasibilityStatus::Infeasible);
        assert!(certify_lifted(&mk(0.5), Some(10.0), &opts).unwrap().is_certified());
    }

    #[test]
    fn prediction_rmse_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let data = linear_data(&a, &DMatrix::zeros(2, 0), 50, 2);
        let id = Dictionary::identity(2);
        let fit = edmd_unconstrained(&id, &data, &[], 0.01).unwrap();
        assert!(prediction_rmse(&fit.model, &id, &data).unwrap() < 1e-10);
        let mut zero = fit.model.clone();
        zero.a_k.fill(0.0);
        let rms = libm::sqrt(data.iter().map(|s| s.x_next.norm_squared()).sum::<f64>() / (2 * data.len()) as f64);
        assert_abs_diff_eq!(prediction_rmse(&zero, &id, &data).unwrap(), rms, epsilon = 1e-12);
        let mut last = 0.0;
        for delta in [1e-3, 2e-3, 4e-3] {
            let mut m = fit.model.clone();
            m.a_k[(0, 1)] += delta;
            let r = prediction_rmse(&m, &id, &data).unwrap();
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn constraint_inactive_for_certified_data() {
        let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.02, -0.02, 0.9]);
        let d = DMatrix::from_row_slice(2, 1, &[0.01, 0.02]);
        let dt = 0.01;
        let truth = LiftedModel { a_k: a.clone(), b_k: DMatrix::zeros(2, 0), c_k: DMatrix::zeros(0, 2), d_k: d.clone(), dt, phi: vec![] };
        assert!(certify_lifted(&truth, Some(1e3), &CertifyOptions::default()).unwrap().is_certified());
        let mut data = linear_data(&a, &d, 300, 3);
        let mut noise = NoiseSource::new(9);
        for s in &mut data {
            s.x_next += noise.vector(&[1e-3, 1e-3]);
        }
        let out = identify_constrained(&Dictionary::identity(2), &data, &[], dt, &IdentifyConfig::default()).unwrap();
        assert!(out.report.feasible && out.report.converged);
        assert!((out.report.rmse_constrained - out.report.rmse_unconstrained).abs() <= 1e-6);
    }

    #[test]
    fn constraint_active_for_unstable_data() {
        let a = DMatrix::from_row_slice(2, 2, &[1.02, 0.05, 0.0, 0.97]);
        let dt = 0.01;
        let data = linear_data(&a, &DMatrix::zeros(2, 0), 300, 5);
        let id = Dictionary::identity(2);
        let fit = edmd_unconstrained(&id, &data, &[], dt).unwrap();
        assert!(!certify_lifted(&fit.model, Some(1e3), &CertifyOptions::default()).unwrap().is_certified());
        let out = identify_constrained(&id, &data, &[], dt, &IdentifyConfig::default()).unwrap();
        assert!(out.report.feasible);
        assert!(out.report.lmi_margin <= -out.report.eps_strict);
        assert!(out.report.rmse_constrained > out.report.rmse_unconstrained);
        // fresh certification, independent of the alternation
        let fresh = certify_lifted(&out.model, Some(1e3), &CertifyOptions::default()).unwrap();
        let c = fresh.certificate().expect("re-certifies");
        assert!(c.margin <= -c.eps_strict);
        assert!(out.report.rmse_history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert_abs_diff_eq!(prediction_rmse(&out.model, &id, &data).unwrap(), out.report.rmse_constrained, epsilon = 1e-9);
    }

    #[test]
    fn zero_alternations_returns_projection() {
        let a = DMatrix::from_row_slice(2, 2, &[1.02, 0.05, 0.0, 0.97]);
        let data = linear_data(&a, &DMatrix::zeros(2, 0), 100, 6);
        let cfg = IdentifyConfig { max_alternations: 0, ..Default::default() };
        let out = identify_constrained(&Dictionary::identity(2), &data, &[], 0.01, &cfg).unwrap();
        assert_eq!(out.report.iterations, 0);
        assert!(out.report.feasible);
        assert!(certify_lifted(&out.model, Some(1e3), &CertifyOptions::default()).unwrap().is_certified());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn constrained_never_beats_unconstrained(a11 in 0.8f64..1.05, a12 in -0.1f64..0.1, a22 in 0.8f64..1.05, seed in 0u64..1000) {
            let a = DMatrix::from_row_slice(2, 2, &[a11, a12, 0.0, a22]);
            let data = linear_data(&a, &DMatrix::zeros(2, 0), 60, seed);
            let cfg = IdentifyConfig { max_alternations: 10, ..Default::default() };
            let out = identify_constrained(&Dictionary::identity(2), &data, &[], 0.01, &cfg).unwrap();
            prop_assert!(out.report.rmse_constrained >= out.report.rmse_unconstrained - 1e-12);
            if out.report.feasible {
                let c = certify_lifted(&out.model, Some(1e3), &CertifyOptions::default()).unwrap();
                prop_assert!(c.is_certified());
            }
        }

        #[test]
        fn lifted_prediction_projects_to_raw_state(x0 in -2.0f64..2.0, x1 in -2.0f64..2.0) {
            let dict = Dictionary::polynomial(2, 3);
            let g = dict.lift(&v(&[x0, x1])).unwrap();
            prop_assert_eq!(g[0], x0);
            prop_assert_eq!(g[1], x1);
            prop_assert_eq!(g.len(), 2 + 3 + 4);
        }
    }
}
