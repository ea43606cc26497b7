//! Log-barrier interior-point method for small dense affine LMIs.
//!
//! Phase one maximizes the feasibility margin: minimize `t` subject to
//! `F_b(x) ⪯ t·I` for every block, inside the box `|xᵢ| ≤ R`. When a linear
//! objective is supplied, phase two minimizes it over `F_b(x) ⪯ -ε₂·I`
//! starting from the phase-one witness.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{AffineLmi, FeasibilityResult, FeasibilityStatus, VarTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// `ε_strict = strict_scale · (1 + ‖F₀‖_F)`.
    pub strict_scale: f64,
    pub eig_tol: f64,
    /// Relative optimality tolerance of the objective phase.
    pub obj_tol: f64,
    /// Cap on Newton iterations of each phase.
    pub max_iterations: usize,
    /// Box radius `R` on every decision variable.
    pub variable_bound: f64,
    /// Relative duality-gap tolerance of the margin phase.
    pub gap_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            strict_scale: 1e-8,
            eig_tol: 1e-10,
            obj_tol: 1e-6,
            max_iterations: 500,
            variable_bound: 1e4,
            gap_tol: 1e-9,
        }
    }
}

/// Barrier of `a·I - F_b(x) ≻ 0` over all blocks plus the variable box, where
/// `a` is the trailing variable `t` in phase one and the constant `shift`
/// otherwise.
struct Barrier<'a> {
    lmi: &'a AffineLmi,
    bound: f64,
    with_t: bool,
    shift: f64,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl<'a> Barrier<'a> {
    fn nz(&self) -> usize {
        self.lmi.n_vars() + usize::from(self.with_t)
    }

    fn barrier_param(&self) -> f64 {
        let d: usize = self.lmi.blocks().iter().map(|b| b.dim()).sum();
        (d + 2 * self.lmi.n_vars()) as f64
    }

    fn level(&self, z: &[f64]) -> f64 {
        if self.with_t {
            z[self.lmi.n_vars()]
        } else {
            self.shift
        }
    }

    fn factor_block(&self, b: usize, z: &[f64]) -> Option<Cholesky<f64, Dyn>> {
        let n = self.lmi.n_vars();
        let blk = &self.lmi.blocks()[b];
        let mut zm = blk.evaluate(&z[..n]).into_inner();
        zm.neg_mut();
        let a = self.level(z);
        for i in 0..zm.nrows() {
            zm[(i, i)] += a;
        }
        if !zm.iter().all(|v| v.is_finite()) {
            return None;
        }
        Cholesky::new(zm)
    }

    fn box_ok(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() < self.bound)
    }

    fn value(&self, z: &[f64]) -> Option<f64> {
        let n = self.lmi.n_vars();
        if !self.box_ok(&z[..n]) {
            return None;
        }
        let r2 = self.bound * self.bound;
        let mut v = 0.0;
        for b in 0..self.lmi.blocks().len() {
            let ch = self.factor_block(b, z)?;
            let l = ch.l_dirty();
            for i in 0..l.nrows() {
                v -= 2.0 * libm::log(l[(i, i)]);
            }
        }
        for x in &z[..n] {
            v -= libm::log(r2 - x * x);
        }
        Some(v)
    }

    fn eval(&self, z: &[f64]) -> Option<Eval> {
        let n = self.lmi.n_vars();
        let nz = self.nz();
        let value = self.value(z)?;
        let mut grad = DVector::zeros(nz);
        let mut hess = DMatrix::zeros(nz, nz);
        for (b, blk) in self.lmi.blocks().iter().enumerate() {
            let ch = self.factor_block(b, z)?;
            let l = ch.l();
            // W_j = L⁻¹ E_j L⁻ᵀ with E_j = ∂Z/∂z_j (= -F_j, or I for t).
            let mut ws: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(blk.coefficient_terms.len() + 1);
            for (j, f) in &blk.coefficient_terms {
                let mut e = f.as_matrix().clone();
                e.neg_mut();
                ws.push((*j, congruence(&l, &e)));
            }
            if self.with_t {
                let e = DMatrix::identity(blk.dim(), blk.dim());
                ws.push((n, congruence(&l, &e)));
            }
            for (a, (ja, wa)) in ws.iter().enumerate() {
                grad[*ja] -= wa.trace();
                for (jb, wb) in ws.iter().skip(a) {
                    let h = wa.dot(wb);
                    hess[(*ja, *jb)] += h;
                    if ja != jb {
                        hess[(*jb, *ja)] += h;
                    }
                }
            }
        }
        let r2 = self.bound * self.bound;
        for i in 0..n {
            let x = z[i];
            let s = r2 - x * x;
            grad[i] += 2.0 * x / s;
            hess[(i, i)] += 2.0 * (r2 + x * x) / (s * s);
        }
        Some(Eval { value, grad, hess })
    }
}

fn congruence(l: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    let x = l.solve_lower_triangular(e).expect("cholesky factor is nonsingular");
    let mut w = l.solve_lower_triangular(&x.transpose()).expect("cholesky factor is nonsingular");
    // exact symmetry keeps the Hessian symmetric
    let d = w.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (w[(i, j)] + w[(j, i)]);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

fn newton_direction(hess: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = (0..hess.nrows()).map(|i| hess[(i, i)].abs()).fold(0.0_f64, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(h) {
            let d = ch.solve(rhs);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

enum Centering {
    Centered,
    IterationCap,
    Failed,
}

/// Minimizes `μ·cᵀz + barrier(z)` by damped Newton steps from a strictly
/// feasible `z`. `c` has length `nz`.
fn center(bar: &Barrier<'_>, c: &DVector<f64>, mu: f64, z: &mut Vec<f64>, iters: &mut usize, cap: usize) -> Centering {
    loop {
        if *iters >= cap {
            return Centering::IterationCap;
        }
        let Some(ev) = bar.eval(z) else { return Centering::Failed };
        let g = c * mu + &ev.grad;
        let Some(dir) = newton_direction(&ev.hess, &(-&g)) else { return Centering::Failed };
        *iters += 1;
        let slope = g.dot(&dir);
        let decrement = -slope;
        if decrement <= 1e-10 {
            return Centering::Centered;
        }
        let f0 = mu * c.dot(&DVector::from_column_slice(z)) + ev.value;
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-14 {
            let trial: Vec<f64> = z.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(v) = bar.value(&trial) {
                let ft = mu * c.dot(&DVector::from_column_slice(&trial)) + v;
                if ft <= f0 + 0.25 * alpha * slope {
                    *z = trial;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved || alpha < 1e-8 {
            // no progress at machine precision: as centered as it gets
            return Centering::Centered;
        }
        if decrement < 1e-8 {
            return Centering::Centered;
        }
    }
}

/// Searches for `x` with `L(x) ⪯ -ε_strict·I`. With an objective `c`, the
/// returned witness also approximately minimizes `cᵀx` over that set.
pub fn solve_feasibility(lmi: &AffineLmi, objective: Option<&[f64]>, cfg: &SolverConfig) -> Result<FeasibilityResult> {
    let n = lmi.n_vars();
    if lmi.structure_tags().len() != n {
        return Err(Error::Structure("structure tags do not match n_vars".into()));
    }
    if let Some(c) = objective {
        if c.len() != n {
            return Err(Error::Dimension(alloc::format!("objective length {} != n_vars {}", c.len(), n)));
        }
    }
    for b in lmi.blocks() {
        if !b.constant_term.is_finite() || b.coefficient_terms.iter().any(|(_, f)| !f.is_finite()) {
            return Err(Error::Numeric("LMI data".into()));
        }
    }
    let eps = lmi.strictness_gap(cfg.strict_scale);

    if lmi.blocks().is_empty() {
        let witness = vec![0.0; n];
        return Ok(FeasibilityResult {
            status: FeasibilityStatus::Feasible,
            objective_value: objective.map(|_| 0.0),
            witness: Some(witness),
            margin: f64::NEG_INFINITY,
            strictness: eps,
            solver_iterations: 0,
        });
    }

    if n == 0 {
        let margin = lmi.margin(&[])?;
        let feasible = margin <= -eps;
        return Ok(FeasibilityResult {
            status: if feasible { FeasibilityStatus::Feasible } else { FeasibilityStatus::Infeasible },
            witness: feasible.then(Vec::new),
            margin,
            strictness: eps,
            solver_iterations: 0,
            objective_value: objective.map(|_| 0.0),
        });
    }

    // Phase one: maximal margin.
    let bar = Barrier { lmi, bound: cfg.variable_bound, with_t: true, shift: 0.0 };
    let m = bar.barrier_param();
    let x0 = vec![0.0; n];
    let t0 = lmi.margin(&x0)?;
    let mut z = x0;
    z.push(t0 + 1.0 + 0.1 * t0.abs());
    let mut c1 = DVector::zeros(n + 1);
    c1[n] = 1.0;
    let mut mu = 1.0 / (1.0 + t0.abs());
    let mut iters = 0usize;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut phase_one_done = false;
    let mut proven_infeasible = false;
    let mut capped = false;

    for _ in 0..200 {
        match center(&bar, &c1, mu, &mut z, &mut iters, cfg.max_iterations) {
            Centering::Centered => {}
            Centering::IterationCap => {
                capped = true;
            }
            Centering::Failed => {}
        }
        let x = &z[..n];
        let marg = lmi.margin(x)?;
        if best.as_ref().map_or(true, |(_, bm)| marg < *bm) {
            best = Some((x.to_vec(), marg));
        }
        if capped {
            break;
        }
        // With an objective, any clearly strict point is a good enough start.
        if objective.is_some() && marg <= -10.0 * eps {
            break;
        }
        let t = z[n];
        let gap = m / mu;
        if t - gap > -eps {
            proven_infeasible = true;
            break;
        }
        if gap <= cfg.gap_tol * (1.0 + t.abs()) {
            phase_one_done = true;
            break;
        }
        mu *= 10.0;
    }

    let (wit, marg) = best.expect("at least one centering pass");
    let feasible = marg <= -eps;
    if !feasible {
        let status = if proven_infeasible || phase_one_done { FeasibilityStatus::Infeasible } else { FeasibilityStatus::Inconclusive };
        return Ok(FeasibilityResult {
            status,
            witness: None,
            margin: marg,
            strictness: eps,
            solver_iterations: iters,
            objective_value: None,
        });
    }
    check_tags(lmi, &wit)?;

    let Some(c) = objective else {
        return Ok(FeasibilityResult {
            status: FeasibilityStatus::Feasible,
            witness: Some(wit),
            margin: marg,
            strictness: eps,
            solver_iterations: iters,
            objective_value: None,
        });
    };

    // Phase two: minimize cᵀx over F(x) ⪯ -ε₂ I.
    let eps2 = (2.0 * eps).min(0.5 * (eps + marg.abs()));
    let bar2 = Barrier { lmi, bound: cfg.variable_bound, with_t: false, shift: -eps2 };
    let m2 = bar2.barrier_param();
    let cv = DVector::from_column_slice(c);
    let mut x = wit.clone();
    let obj0 = cv.dot(&DVector::from_column_slice(&x));
    let mut mu = 1.0 / (1.0 + obj0.abs());
    let mut best_obj = (wit, obj0, marg);
    let mut iters2 = 0usize;
    for _ in 0..200 {
        let state = center(&bar2, &cv, mu, &mut x, &mut iters2, cfg.max_iterations);
        let xm = lmi.margin(&x)?;
        let obj = cv.dot(&DVector::from_column_slice(&x));
        if xm <= -eps && obj <= best_obj.1 {
            best_obj = (x.clone(), obj, xm);
        }
        if matches!(state, Centering::IterationCap | Centering::Failed) {
            break;
        }
        if m2 / mu <= cfg.obj_tol * (1.0 + obj.abs()) {
            break;
        }
        mu *= 10.0;
    }
    check_tags(lmi, &best_obj.0)?;
    Ok(FeasibilityResult {
        status: FeasibilityStatus::Feasible,
        witness: Some(best_obj.0),
        margin: best_obj.2,
        strictness: eps,
        solver_iterations: iters + iters2,
        objective_value: Some(best_obj.1),
    })
}

fn check_tags(lmi: &AffineLmi, x: &[f64]) -> Result<()> {
    for (i, tag) in lmi.structure_tags().iter().enumerate() {
        if tag.requires_positive() && x[i] <= 0.0 {
            return Err(Error::Structure(alloc::format!("variable {} tagged {:?} is not positive in the witness", i, VarTag::DiagP)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::SymMatrix;

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    fn diag_block(lmi: &mut AffineLmi, c: &[f64], coeffs: &[(usize, &[f64])]) {
        let terms = coeffs.iter().map(|(i, d)| (*i, SymMatrix::from_diagonal(d))).collect();
        lmi.push_block(SymMatrix::from_diagonal(c), terms).unwrap();
    }

    #[test]
    fn interval_lmi_is_feasible_inside_unit_interval() {
        // diag(x - 1, -x) ≺ 0  ⇔  0 < x < 1
        let mut lmi = AffineLmi::with_vars(1);
        diag_block(&mut lmi, &[-1.0, 0.0], &[(0, &[1.0, -1.0])]);
        let r = solve_feasibility(&lmi, None, &cfg()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Feasible);
        let x = r.witness.unwrap()[0];
        assert!(x > 0.0 && x < 1.0, "{x}");
        assert!((x - 0.5).abs() < 1e-6);
        assert!((r.margin + 0.5).abs() < 1e-6);
    }

    #[test]
    fn contradictory_side_constraint_is_infeasible() {
        // x·I + I ≺ 0 needs x < -1, the side block -x ≺ 0 needs x > 0
        let mut lmi = AffineLmi::with_vars(1);
        diag_block(&mut lmi, &[1.0, 1.0], &[(0, &[1.0, 1.0])]);
        lmi.push_positivity(0).unwrap();
        let r = solve_feasibility(&lmi, None, &cfg()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Infeasible);
        assert!(r.witness.is_none());
    }

    #[test]
    fn constant_negative_definite_has_unit_margin() {
        let mut lmi = AffineLmi::with_vars(0);
        lmi.push_block(SymMatrix::from_diagonal(&[-1.0, -1.0, -1.0]), alloc::vec![]).unwrap();
        let r = solve_feasibility(&lmi, None, &cfg()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Feasible);
        assert!((r.margin + 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_drives_witness_to_boundary() {
        // minimize x s.t. diag(x - 1, -x) ≺ 0 → x → 0⁺
        let mut lmi = AffineLmi::with_vars(1);
        diag_block(&mut lmi, &[-1.0, 0.0], &[(0, &[1.0, -1.0])]);
        let r = solve_feasibility(&lmi, Some(&[1.0]), &cfg()).unwrap();
        assert!(r.is_feasible());
        let x = r.witness.unwrap()[0];
        assert!(x > 0.0 && x < 1e-5, "{x}");
        assert!(r.margin <= -r.strictness);
    }

    #[test]
    fn positive_definite_variable_block() {
        // Lyapunov inequality AᵀX + XA ≺ 0, X ≻ 0 for a stable 2x2 A
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let mut lmi = AffineLmi::with_vars(3);
        let sym = |x: &[f64]| DMatrix::from_row_slice(2, 2, &[x[0], x[1], x[1], x[2]]);
        lmi.push_affine_map(|x| {
            let xm = sym(x);
            a.transpose() * &xm + &xm * &a
        })
        .unwrap();
        lmi.push_affine_map(|x| -sym(x)).unwrap();
        let r = solve_feasibility(&lmi, None, &cfg()).unwrap();
        assert!(r.is_feasible());
        let w = r.witness.unwrap();
        let xm = sym(&w);
        let lyap = SymMatrix::symmetrize(&(a.transpose() * &xm + &xm * &a)).unwrap();
        assert!(lyap.max_eigenvalue().unwrap() < 0.0);
        assert!(SymMatrix::symmetrize(&xm).unwrap().min_eigenvalue().unwrap() > 0.0);
    }

    #[test]
    fn unstable_lyapunov_is_infeasible() {
        let mut lmi = AffineLmi::with_vars(1);
        // 2·p·a with a = +1, and p > 0
        diag_block(&mut lmi, &[0.0], &[(0, &[2.0])]);
        lmi.push_positivity(0).unwrap();
        let r = solve_feasibility(&lmi, None, &cfg()).unwrap();
        assert_eq!(r.status, FeasibilityStatus::Infeasible);
    }

    #[test]
    fn deterministic_across_calls() {
        let mut lmi = AffineLmi::with_vars(2);
        lmi.push_affine_map(|x| DMatrix::from_row_slice(2, 2, &[x[0] - 2.0, x[1] + 0.3, x[1] + 0.3, -x[0] - 0.5 * x[1]]))
            .unwrap();
        let a = solve_feasibility(&lmi, None, &cfg()).unwrap();
        let b = solve_feasibility(&lmi, None, &cfg()).unwrap();
        assert_eq!(a.status, b.status);
        for (u, v) in a.witness.unwrap().iter().zip(b.witness.unwrap().iter()) {
            assert!((u - v).abs() <= 1e-10);
        }
    }
}
