//! Delay-dependent ISS certification of Persidskii systems by LMI feasibility,
//! maximal-delay bisection and (τ, γ) feasibility regions.
//!
//! Two assemblies are provided. [`PsiForm::Printed`] is the block matrix over
//! `[x, φ, x(t−τ), w]`; it pairs `φ(Cx(t−τ))` with the Persidskii integral
//! term as if both used the same argument and omits the `τ ẋᵀSẋ` part of the
//! double-integral derivative, so it does not depend on `τ` in an essential
//! way. [`PsiForm::Completed`] keeps both nonlinearity vectors, `φ(Cx(t−τ))`
//! and `φ(Cx(t))`, each with its own sector multiplier, and adds the
//! `τ EᵀSE` term with `E = [A, −B, 0, D, 0]`. It also carries the output
//! term `xᵀx`, without which Ψ is homogeneous in the decision variables and
//! every γ > 0 is certifiable as soon as one is. Certificates derived from
//! the completed form imply `V̇ ≤ −|x|² + γ²|w|²` for the functional evaluated
//! by [`evaluate_lkf`], hence an L₂ gain from `w` to `x` of at most γ.
//! [`PsiForm::Wirtinger`] (the default) extends the completed form with the
//! Wirtinger integral inequality in place of Jensen's and augments the
//! quadratic term to `[x; z]ᵀ𝒫[x; z]` with `z = ∫_{t−τ}^t x`, which makes
//! the delay bound markedly less conservative.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::lmi::{solve_feasibility, AffineLmi, FeasibilityStatus, SolverConfig, SymMatrix, VarTag};
use crate::model::{PersidskiiSystem, SectorNonlinearity, Trajectory};

/// Below this delay the delay-free assembly is used.
pub const TAU_SWITCH: f64 = 1e-9;
/// Default bisection tolerance on the delay (1e−3 ms).
pub const DEFAULT_TAU_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PsiForm {
    Printed,
    Completed,
    #[default]
    Wirtinger,
}

impl PsiForm {
    pub fn as_str(self) -> &'static str {
        match self {
            PsiForm::Printed => "printed",
            PsiForm::Completed => "completed",
            PsiForm::Wirtinger => "wirtinger",
        }
    }
}

/// Decision matrices of the functional and its sector multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct LkfVars {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    /// Multiplier of the delayed sector inequality (completed form only).
    pub t_delayed: DVector<f64>,
    /// Multiplier of the current sector inequality (completed form only).
    pub t_current: DVector<f64>,
    /// Cross term with `z = ∫_{t−τ}^t x` (Wirtinger form only).
    pub p12: DMatrix<f64>,
    pub p22: DMatrix<f64>,
}

impl LkfVars {
    /// Printed-form variables; multipliers are zero.
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, s: DMatrix<f64>, lambda: DMatrix<f64>) -> Self {
        let k = lambda.nrows();
        let n = p.nrows();
        LkfVars {
            p,
            q,
            s,
            lambda,
            t_delayed: DVector::zeros(k),
            t_current: DVector::zeros(k),
            p12: DMatrix::zeros(n, n),
            p22: DMatrix::zeros(n, n),
        }
    }

    pub fn with_augmentation(mut self, p12: DMatrix<f64>, p22: DMatrix<f64>) -> Self {
        self.p12 = p12;
        self.p22 = p22;
        self
    }

    pub fn with_multipliers(mut self, t_delayed: DVector<f64>, t_current: DVector<f64>) -> Self {
        self.t_delayed = t_delayed;
        self.t_current = t_current;
        self
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.is_square() && (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

fn check_vars(sys: &PersidskiiSystem, v: &LkfVars, completed: bool) -> Result<()> {
    let (n, k) = (sys.n(), sys.k());
    let sq = |m: &DMatrix<f64>, d: usize| m.nrows() == d && m.ncols() == d;
    if !sq(&v.p, n) || !sq(&v.q, n) || !sq(&v.s, n) || !sq(&v.lambda, k) || !sq(&v.p12, n) || !sq(&v.p22, n) {
        return Err(dim_err("LKF variables do not match the system dimensions"));
    }
    if completed && (v.t_delayed.len() != k || v.t_current.len() != k) {
        return Err(dim_err("sector multipliers must have one entry per nonlinearity"));
    }
    if !is_diagonal(&v.p) {
        return Err(Error::Structure("P must be diagonal".into()));
    }
    if !is_diagonal(&v.lambda) {
        return Err(Error::Structure("Lambda must be diagonal".into()));
    }
    Ok(())
}

/// Writes `blk` at `(r, c)` and its transpose at `(c, r)`.
fn put(m: &mut DMatrix<f64>, r: usize, c: usize, blk: &DMatrix<f64>) {
    m.view_mut((r, c), blk.shape()).copy_from(blk);
    if r != c {
        m.view_mut((c, r), (blk.ncols(), blk.nrows())).copy_from(&blk.transpose());
    }
}

fn he(m: &DMatrix<f64>) -> DMatrix<f64> {
    m + m.transpose()
}

fn sector_matrix(sys: &PersidskiiSystem) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(sys.k(), sys.nonlinearities.iter().map(|nl| 1.0 / nl.sigma)))
}

/// The printed block matrix over `[x, φ, x(t−τ), w]`.
pub fn assemble_psi(sys: &PersidskiiSystem, vars: &LkfVars, gamma_sq: f64, tau: f64) -> Result<SymMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau = {tau}: the zero-delay case goes through assemble_psi_delay_free")));
    }
    check_vars(sys, vars, false)?;
    let (n, k, m) = (sys.n(), sys.k(), sys.m());
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let (p, lam) = (&vars.p, &vars.lambda);
    let s_tau = &vars.s / tau;
    let mut psi = DMatrix::zeros(n + k + n + m, n + k + n + m);
    let (ix, ip, id, iw) = (0, n, n + k, n + k + n);
    put(&mut psi, ix, ix, &(he(&(p * a)) + &vars.q - &s_tau));
    put(&mut psi, ix, ip, &(-(p * b) + a.transpose() * c.transpose() * lam));
    put(&mut psi, ix, id, &s_tau);
    put(&mut psi, ix, iw, &(p * d));
    put(&mut psi, ip, ip, &(-2.0 * lam - sector_matrix(sys)));
    put(&mut psi, id, id, &(-&vars.q - &s_tau));
    put(&mut psi, iw, iw, &(-gamma_sq * DMatrix::identity(m, m)));
    SymMatrix::symmetrize(&psi)
}

/// The printed zero-delay block matrix over `[x, φ, w]`.
pub fn assemble_psi_delay_free(sys: &PersidskiiSystem, vars: &LkfVars, gamma_sq: f64) -> Result<SymMatrix> {
    check_vars(sys, vars, false)?;
    let (n, k, m) = (sys.n(), sys.k(), sys.m());
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let (p, lam) = (&vars.p, &vars.lambda);
    let mut psi = DMatrix::zeros(n + k + m, n + k + m);
    put(&mut psi, 0, 0, &he(&(p * a)));
    put(&mut psi, 0, n, &(-(p * b) + a.transpose() * c.transpose() * lam));
    put(&mut psi, 0, n + k, &(p * d));
    put(&mut psi, n, n, &(-2.0 * lam - sector_matrix(sys)));
    put(&mut psi, n + k, n + k, &(-gamma_sq * DMatrix::identity(m, m)));
    SymMatrix::symmetrize(&psi)
}

/// Completed block matrix over `[x, φ(Cx(t−τ)), x(t−τ), w, φ(Cx(t))]`, output term included.
pub fn assemble_psi_completed(sys: &PersidskiiSystem, vars: &LkfVars, gamma_sq: f64, tau: f64) -> Result<SymMatrix> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau = {tau}: the zero-delay case goes through the delay-free assembly")));
    }
    check_vars(sys, vars, true)?;
    let (n, k, m) = (sys.n(), sys.k(), sys.m());
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let (p, lam, s) = (&vars.p, &vars.lambda, &vars.s);
    let r = sector_matrix(sys);
    let t1 = DMatrix::from_diagonal(&vars.t_delayed);
    let t2 = DMatrix::from_diagonal(&vars.t_current);
    let s_tau = s / tau;
    let dim = n + k + n + m + k;
    let (ix, ip, id, iw, ic) = (0, n, n + k, n + k + n, n + k + n + m);
    let at = a.transpose();
    let bt = b.transpose();
    let ctl = c.transpose() * lam;
    let mut psi = DMatrix::zeros(dim, dim);
    put(&mut psi, ix, ix, &(he(&(p * a)) + DMatrix::identity(n, n) + &vars.q - &s_tau + tau * &at * s * a));
    put(&mut psi, ix, ip, &(-(p * b) - tau * &at * s * b));
    put(&mut psi, ix, id, &s_tau);
    put(&mut psi, ix, iw, &(p * d + tau * &at * s * d));
    put(&mut psi, ix, ic, &(&at * &ctl + c.transpose() * &t2));
    put(&mut psi, ip, ip, &(-2.0 * &t1 * &r + tau * &bt * s * b));
    put(&mut psi, ip, id, &(&t1 * c));
    put(&mut psi, ip, iw, &(-tau * &bt * s * d));
    put(&mut psi, ip, ic, &(-&bt * &ctl));
    put(&mut psi, id, id, &(-&vars.q - &s_tau));
    put(&mut psi, iw, iw, &(-gamma_sq * DMatrix::identity(m, m) + tau * d.transpose() * s * d));
    put(&mut psi, iw, ic, &(d.transpose() * &ctl));
    put(&mut psi, ic, ic, &(-2.0 * &t2 * &r));
    SymMatrix::symmetrize(&psi)
}

/// Completed zero-delay block matrix over `[x, φ(Cx), w]` with multiplier `t_delayed`.
pub fn assemble_psi_completed_delay_free(sys: &PersidskiiSystem, vars: &LkfVars, gamma_sq: f64) -> Result<SymMatrix> {
    check_vars(sys, vars, true)?;
    let (n, k, m) = (sys.n(), sys.k(), sys.m());
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let (p, lam) = (&vars.p, &vars.lambda);
    let t = DMatrix::from_diagonal(&vars.t_delayed);
    let lcb = lam * c * b;
    let mut psi = DMatrix::zeros(n + k + m, n + k + m);
    put(&mut psi, 0, 0, &(he(&(p * a)) + DMatrix::identity(n, n)));
    put(&mut psi, 0, n, &(-(p * b) + a.transpose() * c.transpose() * lam + c.transpose() * &t));
    put(&mut psi, 0, n + k, &(p * d));
    put(&mut psi, n, n, &(-2.0 * &t * sector_matrix(sys) - he(&lcb)));
    put(&mut psi, n, n + k, &(lam * c * d));
    put(&mut psi, n + k, n + k, &(-gamma_sq * DMatrix::identity(m, m)));
    SymMatrix::symmetrize(&psi)
}

/// Wirtinger block matrix over `[x, φ(Cx(t−τ)), x(t−τ), w, φ(Cx(t)), v]`
/// with `v = τ⁻¹∫_{t−τ}^t x`: the completed matrix plus the augmented
/// quadratic term and the extra `3/τ·ϑᵀSϑ`, `ϑ = x + x(t−τ) − 2v`.
pub fn assemble_psi_wirtinger(sys: &PersidskiiSystem, vars: &LkfVars, gamma_sq: f64, tau: f64) -> Result<SymMatrix> {
    let base = assemble_psi_completed(sys, vars, gamma_sq, tau)?;
    let (n, k, m) = (sys.n(), sys.k(), sys.m());
    let dim0 = base.dim();
    let dim = dim0 + n;
    let (ix, ip, id, iw, iv) = (0, n, n + k, n + k + n, dim0);
    let mut psi = DMatrix::zeros(dim, dim);
    psi.view_mut((0, 0), (dim0, dim0)).copy_from(base.as_matrix());
    let sel = |off: usize| {
        let mut e = DMatrix::<f64>::zeros(n, dim);
        e.view_mut((0, off), (n, n)).fill_with_identity();
        e
    };
    let (ex, ed, ev) = (sel(ix), sel(id), sel(iv));
    let mut e = DMatrix::<f64>::zeros(n, dim);
    e.view_mut((0, ix), (n, n)).copy_from(&sys.a);
    e.view_mut((0, ip), (n, k)).copy_from(&(-&sys.b));
    e.view_mut((0, iw), (n, m)).copy_from(&sys.d);
    let o0 = &ex - &ed;
    let o1: DMatrix<f64> = &ex + &ed - &ev * 2.0;
    let extra = -3.0 / tau * o1.transpose() * &vars.s * &o1
        + tau * he(&(e.transpose() * &vars.p12 * &ev))
        + he(&(ex.transpose() * &vars.p12 * &o0))
        + tau * he(&(ev.transpose() * &vars.p22 * &o0));
    psi += extra;
    SymMatrix::symmetrize(&psi)
}

/// Dispatches on form and delay (τ ≤ [`TAU_SWITCH`] uses the delay-free variant).
pub fn assemble(form: PsiForm, sys: &PersidskiiSystem, vars: &LkfVars, gamma_sq: f64, tau: f64) -> Result<SymMatrix> {
    let delay_free = tau <= TAU_SWITCH;
    match (form, delay_free) {
        (PsiForm::Printed, true) => assemble_psi_delay_free(sys, vars, gamma_sq),
        (PsiForm::Printed, false) => assemble_psi(sys, vars, gamma_sq, tau),
        (PsiForm::Completed | PsiForm::Wirtinger, true) => assemble_psi_completed_delay_free(sys, vars, gamma_sq),
        (PsiForm::Completed, false) => assemble_psi_completed(sys, vars, gamma_sq, tau),
        (PsiForm::Wirtinger, false) => assemble_psi_wirtinger(sys, vars, gamma_sq, tau),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssCertificate {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub t_delayed: DVector<f64>,
    pub t_current: DVector<f64>,
    pub p12: DMatrix<f64>,
    pub p22: DMatrix<f64>,
    pub gamma: f64,
    pub tau: f64,
    /// Largest eigenvalue of Ψ at the witness.
    pub margin: f64,
    /// Largest eigenvalue over Ψ and all positivity blocks.
    pub overall_margin: f64,
    pub eps_strict: f64,
    pub form: PsiForm,
}

impl IssCertificate {
    pub fn vars(&self) -> LkfVars {
        LkfVars {
            p: self.p.clone(),
            q: self.q.clone(),
            s: self.s.clone(),
            lambda: self.lambda.clone(),
            t_delayed: self.t_delayed.clone(),
            t_current: self.t_current.clone(),
            p12: self.p12.clone(),
            p22: self.p22.clone(),
        }
    }

    /// Re-assembles Ψ at the witness and returns its largest eigenvalue.
    pub fn reverify(&self, sys: &PersidskiiSystem) -> Result<f64> {
        assemble(self.form, sys, &self.vars(), self.gamma * self.gamma, self.tau)?.max_eigenvalue()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CertifyOutcome {
    Certified(alloc::boxed::Box<IssCertificate>),
    Infeasible { margin: f64 },
    Inconclusive { margin: f64 },
}

impl CertifyOutcome {
    pub fn status(&self) -> FeasibilityStatus {
        match self {
            CertifyOutcome::Certified(_) => FeasibilityStatus::Feasible,
            CertifyOutcome::Infeasible { .. } => FeasibilityStatus::Infeasible,
            CertifyOutcome::Inconclusive { .. } => FeasibilityStatus::Inconclusive,
        }
    }

    pub fn is_certified(&self) -> bool {
        matches!(self, CertifyOutcome::Certified(_))
    }

    pub fn certificate(&self) -> Option<&IssCertificate> {
        match self {
            CertifyOutcome::Certified(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CertifyOptions {
    pub form: PsiForm,
    pub solver: SolverConfig,
}

/// Offsets of the decision variables in the flattened vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    k: usize,
    delay_free: bool,
    form: PsiForm,
    gamma_free: bool,
}

impl Layout {
    fn tri(&self) -> usize {
        if self.delay_free {
            0
        } else {
            self.n * (self.n + 1) / 2
        }
    }
    fn n_mult(&self) -> usize {
        match (self.form, self.delay_free) {
            (PsiForm::Printed, _) => 0,
            (PsiForm::Completed | PsiForm::Wirtinger, true) => self.k,
            (PsiForm::Completed | PsiForm::Wirtinger, false) => 2 * self.k,
        }
    }
    fn augmented(&self) -> bool {
        self.form == PsiForm::Wirtinger && !self.delay_free
    }
    fn n_aug(&self) -> usize {
        if self.augmented() {
            self.n * self.n + self.n * (self.n + 1) / 2
        } else {
            0
        }
    }
    fn off_p12(&self) -> usize {
        self.n + 2 * self.tri()
    }
    fn off_p22(&self) -> usize {
        self.off_p12() + self.n * self.n
    }
    fn off_q(&self) -> usize {
        self.n
    }
    fn off_s(&self) -> usize {
        self.n + self.tri()
    }
    fn off_l(&self) -> usize {
        self.n + 2 * self.tri() + self.n_aug()
    }
    fn off_t(&self) -> usize {
        self.off_l() + self.k
    }
    fn off_g(&self) -> usize {
        self.off_t() + self.n_mult()
    }
    fn n_vars(&self) -> usize {
        self.off_g() + usize::from(self.gamma_free)
    }

    fn tags(&self) -> Vec<VarTag> {
        let mut t = vec![VarTag::DiagP; self.n];
        t.extend(core::iter::repeat(VarTag::QEntry).take(self.tri()));
        t.extend(core::iter::repeat(VarTag::SEntry).take(self.tri()));
        t.extend(core::iter::repeat(VarTag::AugEntry).take(self.n_aug()));
        t.extend(core::iter::repeat(VarTag::Lambda).take(self.k));
        t.extend(core::iter::repeat(VarTag::Multiplier).take(self.n_mult()));
        if self.gamma_free {
            t.push(VarTag::GammaSq);
        }
        t
    }

    fn sym(&self, x: &[f64], off: usize) -> DMatrix<f64> {
        if self.delay_free {
            return DMatrix::identity(self.n, self.n);
        }
        self.sym_raw(x, off)
    }

    fn sym_raw(&self, x: &[f64], off: usize) -> DMatrix<f64> {
        let n = self.n;
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

    fn unpack(&self, x: &[f64]) -> LkfVars {
        let (n, k) = (self.n, self.k);
        let p = DMatrix::from_diagonal(&DVector::from_column_slice(&x[..n]));
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&x[self.off_l()..self.off_l() + k]));
        let (t1, t2) = match (self.form, self.delay_free) {
            (PsiForm::Printed, _) => (DVector::zeros(k), DVector::zeros(k)),
            (PsiForm::Completed | PsiForm::Wirtinger, true) => (DVector::from_column_slice(&x[self.off_t()..self.off_t() + k]), DVector::zeros(k)),
            (PsiForm::Completed | PsiForm::Wirtinger, false) => (
                DVector::from_column_slice(&x[self.off_t()..self.off_t() + k]),
                DVector::from_column_slice(&x[self.off_t() + k..self.off_t() + 2 * k]),
            ),
        };
        let (p12, p22) = if self.augmented() {
            let o = self.off_p12();
            (DMatrix::from_column_slice(n, n, &x[o..o + n * n]), self.sym_raw(x, self.off_p22()))
        } else {
            (DMatrix::zeros(n, n), DMatrix::zeros(n, n))
        };
        LkfVars { p, q: self.sym(x, self.off_q()), s: self.sym(x, self.off_s()), lambda, t_delayed: t1, t_current: t2, p12, p22 }
    }
}

fn build_lmi(sys: &PersidskiiSystem, gamma_sq: Option<f64>, tau: f64, form: PsiForm) -> Result<(AffineLmi, Layout)> {
    let lay = Layout { n: sys.n(), k: sys.k(), delay_free: tau <= TAU_SWITCH, form, gamma_free: gamma_sq.is_none() };
    let mut lmi = AffineLmi::new(lay.tags());
    // γ² enters only through the −γ²I block, so a free γ² is handled by
    // assembling at γ² = 0 and adding −x_γ I on the disturbance rows.
    let zero = vec![0.0; lay.n_vars()];
    assemble(form, sys, &lay.unpack(&zero), gamma_sq.unwrap_or(0.0), tau)?;
    lmi.push_affine_map(|x| {
        let g = gamma_sq.unwrap_or_else(|| x[lay.off_g()]);
        assemble(form, sys, &lay.unpack(x), g, tau).expect("validated above").into_inner()
    })?;
    for i in 0..lay.n {
        lmi.push_positivity(i)?;
    }
    if !lay.delay_free {
        for off in [lay.off_q(), lay.off_s()] {
            lmi.push_affine_map(|x| -lay.sym(x, off))?;
        }
    }
    if lay.augmented() {
        let n = lay.n;
        lmi.push_affine_map(|x| {
            let v = lay.unpack(x);
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            put(&mut m, 0, 0, &v.p);
            put(&mut m, 0, n, &v.p12);
            put(&mut m, n, n, &v.p22);
            -m
        })?;
    }
    for i in lay.off_l()..lay.off_g() {
        lmi.push_positivity(i)?;
    }
    if lay.gamma_free {
        lmi.push_positivity(lay.off_g())?;
    }
    Ok((lmi, lay))
}

fn to_outcome(
    sys: &PersidskiiSystem,
    lmi: &AffineLmi,
    lay: &Layout,
    res: crate::lmi::FeasibilityResult,
    gamma_sq: Option<f64>,
    tau: f64,
) -> Result<CertifyOutcome> {
    match res.status {
        FeasibilityStatus::Infeasible => Ok(CertifyOutcome::Infeasible { margin: res.margin }),
        FeasibilityStatus::Inconclusive => Ok(CertifyOutcome::Inconclusive { margin: res.margin }),
        FeasibilityStatus::Feasible => {
            let x = res.witness.ok_or_else(|| Error::Numeric("feasible result without witness".into()))?;
            let v = lay.unpack(&x);
            let g2 = gamma_sq.unwrap_or_else(|| x[lay.off_g()]);
            let psi = assemble(lay.form, sys, &v, g2, tau)?;
            Ok(CertifyOutcome::Certified(alloc::boxed::Box::new(IssCertificate {
                p: v.p,
                q: v.q,
                s: v.s,
                lambda: v.lambda,
                t_delayed: v.t_delayed,
                t_current: v.t_current,
                p12: v.p12,
                p22: v.p22,
                gamma: libm::sqrt(g2),
                tau,
                margin: psi.max_eigenvalue()?,
                overall_margin: lmi.margin(&x)?,
                eps_strict: res.strictness,
                form: lay.form,
            })))
        }
    }
}

/// Certifies ISS with L₂-gain `gamma` at delay `tau` using the completed form.
pub fn certify_iss(sys: &PersidskiiSystem, gamma: f64, tau: f64) -> Result<CertifyOutcome> {
    certify_iss_with(sys, gamma, tau, &CertifyOptions::default())
}

pub fn certify_iss_with(sys: &PersidskiiSystem, gamma: f64, tau: f64, opts: &CertifyOptions) -> Result<CertifyOutcome> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be non-negative, got {tau}")));
    }
    let g2 = gamma * gamma;
    // The congruence diag(I, I/γ) on the disturbance rows (D → D/γ, γ → 1)
    // keeps γ² out of the constant term, so ε_strict does not grow with γ.
    // For γ ≥ 1 the original Ψ is at least as negative as the solved one.
    // The printed form is solved as written.
    let scaled = (gamma > 1.0 && opts.form != PsiForm::Printed).then(|| PersidskiiSystem { d: &sys.d / gamma, ..sys.clone() });
    let (solve_sys, solve_g2) = scaled.as_ref().map_or((sys, g2), |s| (s, 1.0));
    let (lmi, lay) = build_lmi(solve_sys, Some(solve_g2), tau, opts.form)?;
    let res = solve_feasibility(&lmi, None, &opts.solver)?;
    to_outcome(sys, &lmi, &lay, res, Some(g2), tau)
}

/// Smallest certifiable γ at delay `tau` (γ² as a decision variable).
pub fn certify_min_gamma(sys: &PersidskiiSystem, tau: f64, opts: &CertifyOptions) -> Result<CertifyOutcome> {
    let (lmi, lay) = build_lmi(sys, None, tau, opts.form)?;
    let mut c = vec![0.0; lay.n_vars()];
    c[lay.off_g()] = 1.0;
    let res = solve_feasibility(&lmi, Some(&c), &opts.solver)?;
    to_outcome(sys, &lmi, &lay, res, None, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauMax {
    pub tau_max: f64,
    /// Final bracket `[feasible, not certified]`.
    pub bracket: (f64, f64),
    pub evaluations: usize,
    /// Set when the monotonicity guard failed and a dense scan was used.
    pub rescanned: bool,
}

fn certified_at(sys: &PersidskiiSystem, gamma: f64, tau: f64, opts: &CertifyOptions, evals: &mut usize) -> Result<bool> {
    *evals += 1;
    // Inconclusive points count as not certified.
    Ok(certify_iss_with(&sys.with_tau(tau), gamma, tau, opts)?.is_certified())
}

fn bisect(sys: &PersidskiiSystem, gamma: f64, mut lo: f64, mut hi: f64, tol: f64, opts: &CertifyOptions, evals: &mut usize) -> Result<(f64, f64)> {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if certified_at(sys, gamma, mid, opts, evals)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, hi))
}

/// Bisection for the largest certifiable delay in `[tau_lo, tau_hi]`.
pub fn tau_max_bisection(sys: &PersidskiiSystem, gamma: f64, tau_lo: f64, tau_hi: f64, tol: f64) -> Result<TauMax> {
    tau_max_bisection_with(sys, gamma, tau_lo, tau_hi, tol, &CertifyOptions::default())
}

pub fn tau_max_bisection_with(
    sys: &PersidskiiSystem,
    gamma: f64,
    tau_lo: f64,
    tau_hi: f64,
    tol: f64,
    opts: &CertifyOptions,
) -> Result<TauMax> {
    if !(tol > 0.0) || !(tau_hi > tau_lo) || tau_lo < 0.0 {
        return Err(Error::Bracket(format!("invalid bracket [{tau_lo}, {tau_hi}] with tol {tol}")));
    }
    let mut evals = 0;
    if !certified_at(sys, gamma, tau_lo, opts, &mut evals)? {
        return Err(Error::Bracket(format!("not certified at tau_lo = {tau_lo}")));
    }
    if certified_at(sys, gamma, tau_hi, opts, &mut evals)? {
        return Err(Error::Bracket(format!("still certified at tau_hi = {tau_hi}")));
    }
    let (lo, hi) = bisect(sys, gamma, tau_lo, tau_hi, tol, opts, &mut evals)?;
    let tau_max = 0.5 * (lo + hi);
    let below = tau_max - tol;
    let above = tau_max + tol;
    let guard_ok = (below < tau_lo || certified_at(sys, gamma, below, opts, &mut evals)?)
        && (above > tau_hi || !certified_at(sys, gamma, above, opts, &mut evals)?);
    if guard_ok {
        return Ok(TauMax { tau_max, bracket: (lo, hi), evaluations: evals, rescanned: false });
    }
    // Non-monotone feasibility: locate the first uncertified grid point.
    const SCAN: usize = 64;
    let mut prev = tau_lo;
    for i in 1..=SCAN {
        let t = tau_lo + (tau_hi - tau_lo) * (i as f64) / (SCAN as f64);
        if !certified_at(sys, gamma, t, opts, &mut evals)? {
            let (lo, hi) = bisect(sys, gamma, prev, t, tol, opts, &mut evals)?;
            return Ok(TauMax { tau_max: 0.5 * (lo + hi), bracket: (lo, hi), evaluations: evals, rescanned: true });
        }
        prev = t;
    }
    Err(Error::Bracket("dense scan found no uncertified delay".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryStatus {
    Bounded,
    /// Not certifiable even without delay.
    InfeasibleAtZero,
    /// Certified over the whole searched range.
    BeyondRange,
    Inconclusive,
}

impl BoundaryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryStatus::Bounded => "bounded",
            BoundaryStatus::InfeasibleAtZero => "infeasible_at_zero",
            BoundaryStatus::BeyondRange => "beyond_range",
            BoundaryStatus::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionPoint {
    pub gamma: f64,
    /// Boundary delay; `None` unless the status is `Bounded` or `BeyondRange`
    /// (which reports the searched upper limit).
    pub tau_boundary: Option<f64>,
    pub status: BoundaryStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityRegion {
    pub sigma: f64,
    pub points: Vec<RegionPoint>,
    pub resolution: f64,
}

impl FeasibilityRegion {
    /// `(τ, γ)` pairs of the bounded boundary, τ ascending.
    pub fn boundary_pairs(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.status == BoundaryStatus::Bounded)
            .filter_map(|p| p.tau_boundary.map(|t| (t, p.gamma)))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Boundary delay for every `(σ, γ)` pair; `family(σ)` builds the system.
pub fn region_sweep(
    family: &dyn Fn(f64) -> Result<PersidskiiSystem>,
    sigma_list: &[f64],
    gamma_grid: &[f64],
    tau_hi: f64,
    tau_tol: f64,
    opts: &CertifyOptions,
) -> Result<Vec<FeasibilityRegion>> {
    if gamma_grid.is_empty() {
        return Err(Error::Config("gamma grid is empty".into()));
    }
    if gamma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("gamma grid must be strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(sigma_list.len());
    for &sigma in sigma_list {
        let sys = family(sigma)?;
        let mut points = Vec::with_capacity(gamma_grid.len());
        for &gamma in gamma_grid {
            let at_zero = certify_iss_with(&sys.with_tau(0.0), gamma, 0.0, opts)?;
            let point = match at_zero {
                CertifyOutcome::Inconclusive { .. } => RegionPoint { gamma, tau_boundary: None, status: BoundaryStatus::Inconclusive },
                CertifyOutcome::Infeasible { .. } => RegionPoint { gamma, tau_boundary: None, status: BoundaryStatus::InfeasibleAtZero },
                CertifyOutcome::Certified(_) => match tau_max_bisection_with(&sys, gamma, 0.0, tau_hi, tau_tol, opts) {
                    Ok(r) => RegionPoint { gamma, tau_boundary: Some(r.tau_max), status: BoundaryStatus::Bounded },
                    Err(Error::Bracket(_)) if certify_iss_with(&sys.with_tau(tau_hi), gamma, tau_hi, opts)?.is_certified() => {
                        RegionPoint { gamma, tau_boundary: Some(tau_hi), status: BoundaryStatus::BeyondRange }
                    }
                    Err(Error::Bracket(_)) => RegionPoint { gamma, tau_boundary: None, status: BoundaryStatus::Inconclusive },
                    Err(e) => return Err(e),
                },
            };
            points.push(point);
        }
        out.push(FeasibilityRegion { sigma, points, resolution: tau_tol });
    }
    Ok(out)
}

/// Adaptive Simpson quadrature.
fn adaptive_simpson(f: &dyn Fn(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn rec(f: &dyn Fn(f64) -> Result<f64>, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> Result<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm)?, f(rm)?);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return Ok(left + right + diff / 15.0);
        }
        Ok(rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)? + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    if a == b {
        return Ok(0.0);
    }
    let (fa, fb, fm) = (f(a)?, f(b)?, f(0.5 * (a + b))?);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `∫₀^s φ(r) dr` with the state context `x` for scheduled kinds.
pub fn sector_integral(nl: &SectorNonlinearity, s: f64, x: &[f64]) -> Result<f64> {
    adaptive_simpson(&|r| nl.eval(r, x), 0.0, s, 1e-10)
}

fn quad(x: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// `V₁ + V₂` at the state `x`.
fn lkf_static(sys: &PersidskiiSystem, cert: &IssCertificate, x: &DVector<f64>) -> Result<f64> {
    let mut v = quad(x, &cert.p);
    let s = &sys.c * x;
    for (i, nl) in sys.nonlinearities.iter().enumerate() {
        let l = cert.lambda[(i, i)];
        if l != 0.0 {
            v += 2.0 * l * sector_integral(nl, s[i], x.as_slice())?;
        }
    }
    Ok(v)
}

/// `2xᵀP₁₂z + zᵀP₂₂z`.
fn augmentation(cert: &IssCertificate, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
    2.0 * (x.transpose() * &cert.p12 * z)[(0, 0)] + quad(z, &cert.p22)
}

fn fd_derivatives(times: &[f64], states: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = states.len();
    if n < 2 {
        return states.iter().map(|x| DVector::zeros(x.len())).collect();
    }
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            (&states[b] - &states[a]) / (times[b] - times[a])
        })
        .collect()
}

/// Value of the Lyapunov–Krasovskii functional at the end `t` of `segment`:
/// `xᵀPx + 2Σλᵢ∫₀^{cᵢᵀx}φᵢ + ∫_{t−τ}^t xᵀQx + ∫_{−τ}^0∫_{t+θ}^t ẋᵀSẋ`,
/// plus `2xᵀP₁₂z + zᵀP₂₂z` with `z = ∫_{t−τ}^t x` for the Wirtinger form.
/// `ẋ` is reconstructed by finite differences on the samples inside the window.
pub fn evaluate_lkf(sys: &PersidskiiSystem, cert: &IssCertificate, segment: &Trajectory) -> Result<f64> {
    segment.validate()?;
    if segment.is_empty() {
        return Err(Error::Coverage("empty history segment".into()));
    }
    let t = *segment.times.last().expect("non-empty");
    let x_t = segment.final_state();
    if x_t.len() != sys.n() {
        return Err(dim_err("segment state dimension differs from the system"));
    }
    let tau = cert.tau;
    let mut v = lkf_static(sys, cert, x_t)?;
    if tau <= TAU_SWITCH {
        return Ok(v);
    }
    let t0 = t - tau;
    let slack = 1e-9 * (1.0 + t.abs());
    if segment.times[0] > t0 + slack {
        return Err(Error::Coverage(format!("segment starts at {} but the window needs {t0}", segment.times[0])));
    }
    let j = segment.times.iter().position(|&s| s >= t0 - slack).expect("window end is in the segment");
    let mut times: Vec<f64> = segment.times[j..].to_vec();
    let mut states: Vec<DVector<f64>> = segment.states[j..].to_vec();
    if times[0] > t0 + slack {
        let (ta, tb) = (segment.times[j - 1], segment.times[j]);
        let th = (t0 - ta) / (tb - ta);
        let xi = &segment.states[j - 1] * (1.0 - th) + &segment.states[j] * th;
        times.insert(0, t0);
        states.insert(0, xi);
    }
    let dx = fd_derivatives(&times, &states);
    let mut v3 = 0.0;
    let mut v4 = 0.0;
    let mut z = DVector::zeros(sys.n());
    for i in 1..times.len() {
        let h = times[i] - times[i - 1];
        z += (&states[i - 1] + &states[i]) * (0.5 * h);
        v3 += 0.5 * h * (quad(&states[i - 1], &cert.q) + quad(&states[i], &cert.q));
        let w0 = times[i - 1] - t0;
        let w1 = times[i] - t0;
        v4 += 0.5 * h * (w0 * quad(&dx[i - 1], &cert.s) + w1 * quad(&dx[i], &cert.s));
    }
    v += v3 + v4 + augmentation(cert, x_t, &z);
    Ok(v)
}

/// Prepends the initial function sampled on the trajectory grid over `[−τ, 0)`.
pub fn with_history(traj: &Trajectory, history: &dyn Fn(f64) -> DVector<f64>, tau: f64) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Err(Error::Coverage("trajectory needs at least two samples".into()));
    }
    let dt = traj.times[1] - traj.times[0];
    let pre = libm::ceil(tau / dt - 1e-9) as usize;
    let t_first = traj.times[0];
    let mut times = Vec::with_capacity(pre + traj.len());
    let mut states = Vec::with_capacity(pre + traj.len());
    for i in (1..=pre).rev() {
        let s = t_first - (i as f64) * dt;
        times.push(s);
        states.push(history(s));
    }
    times.extend_from_slice(&traj.times);
    states.extend_from_slice(&traj.states);
    Ok(Trajectory { times, states, inputs: None })
}

/// Functional values at every sample of `ext` whose window is covered; same
/// quadrature as [`evaluate_lkf`] but with global finite differences and
/// running sums. Returns `(t, V)` pairs.
pub fn lkf_series(sys: &PersidskiiSystem, cert: &IssCertificate, ext: &Trajectory) -> Result<Vec<(f64, f64)>> {
    ext.validate()?;
    let n_pts = ext.len();
    if n_pts < 2 {
        return Err(Error::Coverage("trajectory too short".into()));
    }
    let dt = ext.times[1] - ext.times[0];
    let tau = cert.tau;
    let w = if tau <= TAU_SWITCH { 0 } else { libm::round(tau / dt) as usize };
    if w > 0 && ((w as f64) * dt - tau).abs() > 1e-9 * tau.max(dt) {
        return Err(Error::Config("lkf_series needs tau to be a multiple of the step".into()));
    }
    let dx = fd_derivatives(&ext.times, &ext.states);
    let g: Vec<f64> = ext.states.iter().map(|x| quad(x, &cert.q)).collect();
    let h: Vec<f64> = dx.iter().map(|d| quad(d, &cert.s)).collect();
    // Running trapezoid sums of g, h and i·h (index-weighted for V₄).
    let mut cg = vec![0.0; n_pts];
    let mut ch = vec![0.0; n_pts];
    let mut cih = vec![0.0; n_pts];
    let mut cz = vec![DVector::zeros(sys.n()); n_pts];
    for i in 1..n_pts {
        cz[i] = &cz[i - 1] + (&ext.states[i - 1] + &ext.states[i]) * (0.5 * dt);
        cg[i] = cg[i - 1] + 0.5 * dt * (g[i - 1] + g[i]);
        ch[i] = ch[i - 1] + 0.5 * dt * (h[i - 1] + h[i]);
        cih[i] = cih[i - 1] + 0.5 * dt * (((i - 1) as f64) * h[i - 1] + (i as f64) * h[i]);
    }
    let mut out = Vec::with_capacity(n_pts - w);
    for i in w..n_pts {
        let mut v = lkf_static(sys, cert, &ext.states[i])?;
        if w > 0 {
            let j = i - w;
            v += cg[i] - cg[j];
            // ∫ (s − t₀) h ds with s − t₀ = (idx − j)·dt
            v += dt * ((cih[i] - cih[j]) - (j as f64) * (ch[i] - ch[j]));
            v += augmentation(cert, &ext.states[i], &(&cz[i] - &cz[j]));
        }
        out.push((ext.times[i], v));
    }
    Ok(out)
}
