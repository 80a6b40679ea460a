//! Dense convex quadratic programming.
//!
//! Problems are small and dense (a few hundred variables), so everything is
//! done with `nalgebra` dense factorizations: the equality constraints are
//! eliminated through a pivoted null-space basis, the remaining
//! inequality-constrained problem is solved by a primal-dual interior point
//! method, and the result is polished on its active set.

mod elimination;
mod problem;
mod residuals;
mod solver;

use nalgebra::DVector;
use thiserror::Error;

pub use problem::QpProblem;
pub use residuals::{kkt_residuals, ResidualReport};
pub use solver::{solve_qp, solve_qp_warm, SolverOptions, WarmStart};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    Dimension {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("problem data contains non-finite entries")]
    NonFinite,
    #[error("hessian is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("hessian is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max-iterations",
        }
    }
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Farkas multipliers: `A_in' l + A_eq' y = 0`, `l >= 0` and
/// `b_in' l + b_eq' y < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityCertificate {
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Present when `status == Infeasible`.
    pub certificate: Option<InfeasibilityCertificate>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    fn failed(
        problem: &QpProblem,
        status: QpStatus,
        iterations: usize,
        certificate: Option<InfeasibilityCertificate>,
    ) -> Self {
        Self {
            primal: DVector::zeros(problem.num_vars()),
            eq_duals: DVector::zeros(problem.num_eq()),
            ineq_duals: DVector::zeros(problem.num_ineq()),
            objective: f64::NAN,
            status,
            iterations,
            certificate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn unconstrained_minimum_is_origin() {
        let qp =
            QpProblem::unconstrained(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3)).unwrap();
        let sol = solve_qp(&qp, &opts());
        assert!(sol.is_optimal());
        assert_eq!(sol.primal, DVector::zeros(3));
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn evenly_amortized_sum_constraint() {
        // min sum u_k^2 s.t. sum u_k = 1: every u_k = 1/10, objective 1/10
        let n = 10;
        let qp = QpProblem::new(
            DMatrix::identity(n, n) * 2.0,
            DVector::zeros(n),
            DMatrix::from_element(1, n, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp(&qp, &opts());
        assert!(sol.is_optimal());
        for u in sol.primal.iter() {
            assert!((u - 0.1).abs() < 1e-12);
        }
        assert!((sol.objective - 0.1).abs() < 1e-12);
        // hand Lagrange point: 2 u - y... => y = -0.2
        assert!((sol.eq_duals[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn inequality_version_matches_lagrange_point() {
        // min sum u_k^2 s.t. sum u_k >= 1
        let n = 10;
        let qp = QpProblem::new(
            DMatrix::identity(n, n) * 2.0,
            DVector::zeros(n),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::from_element(1, n, -1.0),
            DVector::from_element(1, -1.0),
        )
        .unwrap();
        let sol = solve_qp(&qp, &opts());
        assert!(sol.is_optimal());
        assert!((sol.primal[0] - 0.1).abs() < 1e-10);
        assert!((sol.ineq_duals[0] - 0.2).abs() < 1e-9);
        let r = kkt_residuals(&qp, &sol).unwrap();
        assert!(r.within(1e-8), "{r:?}");
    }

    #[test]
    fn perturbed_primal_breaks_stationarity() {
        let n = 4;
        let qp = QpProblem::new(
            DMatrix::identity(n, n) * 2.0,
            DVector::from_element(n, 1.0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::from_element(1, n, -1.0),
            DVector::from_element(1, -1.0),
        )
        .unwrap();
        let mut sol = solve_qp(&qp, &opts());
        assert!(kkt_residuals(&qp, &sol).unwrap().within(1e-8));
        sol.primal[0] += 0.1;
        let r = kkt_residuals(&qp, &sol).unwrap();
        assert!(r.stationarity > 1e-3);
    }

    #[test]
    fn kkt_residuals_reject_wrong_dimensions() {
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let mut sol = solve_qp(&qp, &opts());
        sol.primal = DVector::zeros(3);
        assert!(matches!(
            kkt_residuals(&qp, &sol),
            Err(QpError::Dimension { .. })
        ));
    }

    #[test]
    fn detects_infeasible_inequalities() {
        // z <= -1 and -z <= -1
        let qp = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        )
        .unwrap();
        let sol = solve_qp(&qp, &opts());
        assert_eq!(sol.status, QpStatus::Infeasible);
        let cert = sol.certificate.expect("certificate");
        let l = &cert.ineq_multipliers;
        assert!(l.min() >= 0.0);
        assert!(qp.ineq_matrix().tr_mul(l).amax() < 1e-8);
        assert!(qp.ineq_rhs().dot(l) < 0.0);
    }

    #[test]
    fn detects_inconsistent_equalities() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp(&qp, &opts());
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert!(sol.certificate.is_some());
    }

    #[test]
    fn lp_with_zero_hessian() {
        // min -z1 - z2 s.t. z1 + z2 <= 1, z >= 0 ; optimum -1 on an edge
        let qp = QpProblem::new(
            DMatrix::zeros(2, 2),
            DVector::from_vec(vec![-1.0, -1.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
        )
        .unwrap();
        let sol = solve_qp(&qp, &opts());
        assert!(sol.is_optimal(), "{:?}", sol.status);
        assert!((sol.objective + 1.0).abs() < 1e-9);
        assert!(kkt_residuals(&qp, &sol).unwrap().within(1e-8));
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let n = 5;
        let qp = QpProblem::new(
            DMatrix::identity(n, n) * 2.0,
            DVector::from_fn(n, |i, _| i as f64 - 2.0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::identity(n, n),
            DVector::from_element(n, 0.5),
        )
        .unwrap();
        let cold = solve_qp(&qp, &opts());
        let warm = WarmStart {
            primal: cold.primal.clone(),
            ineq_duals: cold.ineq_duals.clone(),
        };
        let hot = solve_qp_warm(&qp, &opts(), Some(&warm));
        assert!(hot.is_optimal());
        assert!((&hot.primal - &cold.primal).amax() < 1e-9);
    }
}
