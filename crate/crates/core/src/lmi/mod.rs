//! Affine linear matrix inequalities and their feasibility.
//!
//! An [`AffineLmi`] is a list of symmetric blocks `F₀ + Σ xᵢ Fᵢ` that share one
//! decision vector `x`. The problem is feasible when every block can be made
//! negative definite with the gap `ε_strict` enforced; see [`solve_feasibility`].

mod solver;

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{dim_err, Error, Result};

pub use solver::{solve_feasibility, SolverConfig};

/// Dense symmetric matrix. Symmetry holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// `(M + Mᵀ)/2`.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(dim_err(format!("symmetrize needs a square matrix, got {}x{}", m.nrows(), m.ncols())));
        }
        if m.nrows() == 0 {
            return Err(dim_err("symmetric matrix must have dim >= 1"));
        }
        let n = m.nrows();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = m[(i, i)];
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(SymMatrix(out))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        SymMatrix(DMatrix::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 }))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        if !self.is_finite() {
            return Err(Error::Numeric("symmetric eigenproblem input".into()));
        }
        let eig = SymmetricEigen::try_new(self.0.clone(), 1e-15, 0)
            .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(ev)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        min_eigenvalue(self)
    }

    pub fn max_eigenvalue(&self) -> Result<f64> {
        Ok(*self.eigenvalues()?.last().unwrap())
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    Ok(m.eigenvalues()?[0])
}

/// Role of a decision variable, kept so certificates can be rebuilt from a witness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarTag {
    /// Diagonal entry of the Lyapunov matrix `P`; must be strictly positive.
    DiagP,
    QEntry,
    SEntry,
    /// Entry of the augmentation blocks `P₁₂`, `P₂₂` of the Wirtinger functional.
    AugEntry,
    Lambda,
    /// Sector S-procedure multiplier.
    Multiplier,
    /// Entry of the change of variables `Y = P L` in observer synthesis.
    GainEntry,
    GammaSq,
    Free,
}

impl VarTag {
    /// Tags whose witness value must be strictly positive.
    pub fn requires_positive(self) -> bool {
        matches!(self, VarTag::DiagP)
    }
}

/// One symmetric block `F₀ + Σ xᵢ Fᵢ`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub constant_term: SymMatrix,
    pub coefficient_terms: Vec<(usize, SymMatrix)>,
}

impl LmiBlock {
    pub fn dim(&self) -> usize {
        self.constant_term.dim()
    }

    pub fn evaluate(&self, x: &[f64]) -> SymMatrix {
        let mut m = self.constant_term.as_matrix().clone();
        for (idx, f) in &self.coefficient_terms {
            if x[*idx] != 0.0 {
                m += f.as_matrix() * x[*idx];
            }
        }
        SymMatrix(m)
    }
}

/// Block-diagonal affine LMI `L(x) ≺ 0` over `n_vars` scalar variables.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    n_vars: usize,
    blocks: Vec<LmiBlock>,
    structure_tags: Vec<VarTag>,
}

impl AffineLmi {
    pub fn new(structure_tags: Vec<VarTag>) -> Self {
        AffineLmi { n_vars: structure_tags.len(), blocks: Vec::new(), structure_tags }
    }

    /// LMI over `n_vars` untagged variables.
    pub fn with_vars(n_vars: usize) -> Self {
        Self::new(alloc::vec![VarTag::Free; n_vars])
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn blocks(&self) -> &[LmiBlock] {
        &self.blocks
    }

    pub fn structure_tags(&self) -> &[VarTag] {
        &self.structure_tags
    }

    /// Adds a block given its constant term and coefficient matrices.
    pub fn push_block(&mut self, constant_term: SymMatrix, coefficient_terms: Vec<(usize, SymMatrix)>) -> Result<()> {
        let d = constant_term.dim();
        for (idx, f) in &coefficient_terms {
            if *idx >= self.n_vars {
                return Err(dim_err(format!("coefficient index {} out of range for {} variables", idx, self.n_vars)));
            }
            if f.dim() != d {
                return Err(dim_err(format!("coefficient matrix dim {} differs from constant dim {}", f.dim(), d)));
            }
        }
        self.blocks.push(LmiBlock { constant_term, coefficient_terms });
        Ok(())
    }

    /// Flattens an affine matrix map into a block by probing it at the origin
    /// and at every unit vector. Zero coefficient matrices are dropped.
    pub fn push_affine_map<F>(&mut self, map: F) -> Result<()>
    where
        F: Fn(&[f64]) -> DMatrix<f64>,
    {
        let mut x = alloc::vec![0.0; self.n_vars];
        let f0 = map(&x);
        let constant = SymMatrix::symmetrize(&f0)?;
        let mut coeffs = Vec::new();
        for i in 0..self.n_vars {
            x[i] = 1.0;
            let fi = map(&x) - &f0;
            x[i] = 0.0;
            let fi = SymMatrix::symmetrize(&fi)?;
            if !fi.is_zero() {
                coeffs.push((i, fi));
            }
        }
        self.push_block(constant, coeffs)
    }

    /// Adds the 1×1 block `-x_var ≺ 0`.
    pub fn push_positivity(&mut self, var: usize) -> Result<()> {
        self.push_block(SymMatrix::zeros(1), alloc::vec![(var, SymMatrix::from_diagonal(&[-1.0]))])
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<SymMatrix>> {
        if x.len() != self.n_vars {
            return Err(dim_err(format!("witness length {} != n_vars {}", x.len(), self.n_vars)));
        }
        Ok(self.blocks.iter().map(|b| b.evaluate(x)).collect())
    }

    /// Largest eigenvalue of `L(x)` over all blocks.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for b in self.evaluate(x)? {
            worst = worst.max(b.max_eigenvalue()?);
        }
        Ok(worst)
    }

    /// Frobenius norm of the stacked constant terms.
    pub fn constant_norm(&self) -> f64 {
        libm::sqrt(self.blocks.iter().map(|b| b.constant_term.as_matrix().norm_squared()).sum::<f64>())
    }

    /// Strictness gap `ε_strict = scale · (1 + ‖F₀‖_F)`.
    pub fn strictness_gap(&self, scale: f64) -> f64 {
        scale * (1.0 + self.constant_norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityStatus {
    Feasible,
    Infeasible,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct FeasibilityResult {
    pub status: FeasibilityStatus,
    pub witness: Option<Vec<f64>>,
    /// Largest eigenvalue of `L(x*)` at the final iterate (negative when feasible).
    pub margin: f64,
    /// The gap `ε_strict` the witness was checked against.
    pub strictness: f64,
    pub solver_iterations: usize,
    pub objective_value: Option<f64>,
}

impl FeasibilityResult {
    pub fn is_feasible(&self) -> bool {
        self.status == FeasibilityStatus::Feasible
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn symmetrize_examples() {
        let s = SymMatrix::symmetrize(&m(2, &[1.0, 2.0, 0.0, 1.0])).unwrap();
        assert_eq!(s.as_matrix(), &m(2, &[1.0, 1.0, 1.0, 1.0]));
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(SymMatrix::symmetrize(&i3).unwrap().as_matrix(), &i3);
        let skew = SymMatrix::symmetrize(&m(2, &[0.0, 4.0, -4.0, 0.0])).unwrap();
        assert!(skew.is_zero());
    }

    #[test]
    fn symmetrize_rejects_non_square() {
        let r = SymMatrix::symmetrize(&DMatrix::zeros(2, 3));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert_abs_diff_eq!(SymMatrix::identity(2).min_eigenvalue().unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(SymMatrix::from_diagonal(&[3.0, -5.0]).min_eigenvalue().unwrap(), -5.0, epsilon = 1e-12);
        // characteristic polynomial (2-λ)² - 1 has roots 1 and 3
        let s = SymMatrix::symmetrize(&m(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_abs_diff_eq!(s.min_eigenvalue().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn min_eigenvalue_rejects_nan() {
        let s = SymMatrix::symmetrize(&m(2, &[f64::NAN, 0.0, 0.0, 1.0])).unwrap();
        assert!(matches!(s.min_eigenvalue(), Err(Error::Numeric(_))));
    }

    #[test]
    fn affine_map_flattening_recovers_coefficients() {
        let mut lmi = AffineLmi::with_vars(2);
        lmi.push_affine_map(|x| m(2, &[x[0] - 1.0, x[1], x[1], -x[0]])).unwrap();
        let b = &lmi.blocks()[0];
        assert_eq!(b.constant_term.as_matrix(), &m(2, &[-1.0, 0.0, 0.0, 0.0]));
        assert_eq!(b.coefficient_terms.len(), 2);
        let val = b.evaluate(&[0.3, 2.0]);
        assert_eq!(val.as_matrix(), &m(2, &[-0.7, 2.0, 2.0, -0.3]));
    }

    #[test]
    fn push_block_checks_dims_and_indices() {
        let mut lmi = AffineLmi::with_vars(1);
        assert!(lmi.push_block(SymMatrix::zeros(2), vec![(1, SymMatrix::zeros(2))]).is_err());
        assert!(lmi.push_block(SymMatrix::zeros(2), vec![(0, SymMatrix::zeros(3))]).is_err());
    }
}
