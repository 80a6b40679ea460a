use nalgebra::DVector;

use super::{QpError, QpProblem, QpSolution};

/// Infinity-norm KKT residuals of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualReport {
    /// `||P z + q + A_eq' y + A_in' lambda||`
    pub stationarity: f64,
    /// `||A_eq z - b_eq||`
    pub primal_eq: f64,
    /// `||max(A_in z - b_in, 0)||`
    pub primal_ineq: f64,
    /// `max_i |lambda_i (b_in - A_in z)_i|`
    pub complementarity: f64,
    /// `||max(-lambda, 0)||`
    pub dual_infeasibility: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }

    pub fn within(&self, tolerance: f64) -> bool {
        self.max() <= tolerance
    }
}

pub(crate) fn evaluate(
    problem: &QpProblem,
    z: &DVector<f64>,
    y: &DVector<f64>,
    lambda: &DVector<f64>,
) -> ResidualReport {
    let grad = problem.hessian() * z
        + problem.linear()
        + problem.eq_matrix().tr_mul(y)
        + problem.ineq_matrix().tr_mul(lambda);
    let eq = problem.eq_matrix() * z - problem.eq_rhs();
    let slack = problem.ineq_rhs() - problem.ineq_matrix() * z;
    let inf = |v: &DVector<f64>| v.amax();

    ResidualReport {
        stationarity: inf(&grad),
        primal_eq: inf(&eq),
        primal_ineq: slack.iter().fold(0.0, |acc: f64, &s| acc.max(-s)),
        complementarity: slack
            .iter()
            .zip(lambda.iter())
            .fold(0.0, |acc: f64, (&s, &l)| acc.max((s * l).abs())),
        dual_infeasibility: lambda.iter().fold(0.0, |acc: f64, &l| acc.max(-l)),
    }
}

/// KKT residuals of `solution` for `problem`.
pub fn kkt_residuals(
    problem: &QpProblem,
    solution: &QpSolution,
) -> Result<ResidualReport, QpError> {
    let n = problem.num_vars();
    let dims = [
        ("primal", solution.primal.len(), n),
        ("equality duals", solution.eq_duals.len(), problem.num_eq()),
        (
            "inequality duals",
            solution.ineq_duals.len(),
            problem.num_ineq(),
        ),
    ];
    for (what, got, expected) in dims {
        if got != expected {
            return Err(QpError::Dimension {
                what,
                expected: (expected, 1),
                got: (got, 1),
            });
        }
    }
    Ok(evaluate(
        problem,
        &solution.primal,
        &solution.eq_duals,
        &solution.ineq_duals,
    ))
}
