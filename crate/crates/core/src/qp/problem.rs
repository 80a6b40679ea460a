use nalgebra::{DMatrix, DVector};

use super::QpError;

/// Relative asymmetry accepted (and then averaged away) in the Hessian.
const SYMMETRY_TOL: f64 = 1e-12;
/// Negative eigenvalues above `-PSD_TOL * ||P||` count as assembly noise.
pub(crate) const PSD_TOL: f64 = 1e-9;

/// Dense convex quadratic program
///
/// ```text
///     minimize    1/2 z' P z + q' z
///     subject to  A_eq z  = b_eq
///                 A_in z <= b_in
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    eq_matrix: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    ineq_matrix: DMatrix<f64>,
    ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions, symmetrizes `P` and rejects Hessians that are not
    /// positive semidefinite within tolerance.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        eq_matrix: DMatrix<f64>,
        eq_rhs: DVector<f64>,
        ineq_matrix: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = linear.len();
        let check = |what: &'static str, got: (usize, usize), expected: (usize, usize)| {
            if got == expected {
                Ok(())
            } else {
                Err(QpError::Dimension {
                    what,
                    expected,
                    got,
                })
            }
        };
        check("hessian", hessian.shape(), (n, n))?;
        check("equality matrix", eq_matrix.shape(), (eq_matrix.nrows(), n))?;
        check("equality rhs", (eq_rhs.len(), 1), (eq_matrix.nrows(), 1))?;
        check(
            "inequality matrix",
            ineq_matrix.shape(),
            (ineq_matrix.nrows(), n),
        )?;
        check(
            "inequality rhs",
            (ineq_rhs.len(), 1),
            (ineq_matrix.nrows(), 1),
        )?;

        let all_finite = hessian.iter().all(|v| v.is_finite())
            && linear.iter().all(|v| v.is_finite())
            && eq_matrix.iter().all(|v| v.is_finite())
            && eq_rhs.iter().all(|v| v.is_finite())
            && ineq_matrix.iter().all(|v| v.is_finite())
            && ineq_rhs.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(QpError::NonFinite);
        }

        let scale = hessian.amax().max(1.0);
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(QpError::NotSymmetric { asymmetry: asym });
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let hessian = repair_psd(hessian)?;

        Ok(Self {
            hessian,
            linear,
            eq_matrix,
            eq_rhs,
            ineq_matrix,
            ineq_rhs,
        })
    }

    /// Problem with no constraints.
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self, QpError> {
        let n = linear.len();
        Self::new(
            hessian,
            linear,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn num_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &DVector<f64> {
        &self.eq_rhs
    }

    pub fn ineq_matrix(&self) -> &DMatrix<f64> {
        &self.ineq_matrix
    }

    pub fn ineq_rhs(&self) -> &DVector<f64> {
        &self.ineq_rhs
    }

    /// `1/2 z' P z + q' z`
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Returns a copy with the objective multiplied by `factor`.
    pub fn scaled_objective(&self, factor: f64) -> Result<Self, QpError> {
        Self::new(
            &self.hessian * factor,
            &self.linear * factor,
            self.eq_matrix.clone(),
            self.eq_rhs.clone(),
            self.ineq_matrix.clone(),
            self.ineq_rhs.clone(),
        )
    }

    /// Returns a copy with extra inequality rows appended.
    pub fn with_extra_inequalities(
        &self,
        rows: &DMatrix<f64>,
        rhs: &DVector<f64>,
    ) -> Result<Self, QpError> {
        let m = self.num_ineq();
        let n = self.num_vars();
        let mut a = DMatrix::zeros(m + rows.nrows(), n);
        a.view_mut((0, 0), (m, n)).copy_from(&self.ineq_matrix);
        a.view_mut((m, 0), (rows.nrows(), n)).copy_from(rows);
        let mut b = DVector::zeros(m + rhs.len());
        b.rows_mut(0, m).copy_from(&self.ineq_rhs);
        b.rows_mut(m, rhs.len()).copy_from(rhs);
        Self::new(
            self.hessian.clone(),
            self.linear.clone(),
            self.eq_matrix.clone(),
            self.eq_rhs.clone(),
            a,
            b,
        )
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == 0.0))
}

/// Clamps negative noise on diagonal Hessians and rejects anything clearly
/// indefinite. Dense Hessians within tolerance are accepted as-is; the solver
/// regularizes its reduced systems by more than the admitted noise.
fn repair_psd(mut p: DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let n = p.nrows();
    if n == 0 {
        return Ok(p);
    }
    let norm = p
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let tau = PSD_TOL * norm.max(f64::MIN_POSITIVE);

    if is_diagonal(&p) {
        for i in 0..n {
            let d = p[(i, i)];
            if d < -tau {
                return Err(QpError::NotPsd { min_eigenvalue: d });
            }
            if d < 0.0 {
                p[(i, i)] = 0.0;
            }
        }
        return Ok(p);
    }

    let shifted = &p + DMatrix::identity(n, n) * tau;
    if shifted.cholesky().is_some() {
        return Ok(p);
    }
    let min_eigenvalue = p.clone().symmetric_eigenvalues().min();
    Err(QpError::NotPsd { min_eigenvalue })
}
