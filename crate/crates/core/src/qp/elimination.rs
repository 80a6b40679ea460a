//! Null-space elimination of the equality constraints.
//!
//! Gaussian elimination with complete pivoting picks an independent row set
//! and a nonsingular block of basic columns. Every feasible point is then
//! `z = z_p + Z w` with `w` the nonbasic variables. For MPC problems with the
//! states kept as variables the basic columns are (mostly) the states, so this
//! is condensing done generically.

use nalgebra::{DMatrix, DVector};

use crate::qp::{InfeasibilityCertificate, QpProblem};

pub(crate) struct EqualityReduction {
    /// Row indices of an independent subset of the equality rows.
    rows: Vec<usize>,
    basic: Vec<usize>,
    nonbasic: Vec<usize>,
    /// `A_R[:, B] = L U_B` in pivot order, kept for the equality multipliers.
    lower: DMatrix<f64>,
    upper: DMatrix<f64>,
    pub particular: DVector<f64>,
    /// `n x (n - rank)` basis of the null space of `A_eq`.
    pub basis: DMatrix<f64>,
}

pub(crate) enum Reduction {
    Consistent(EqualityReduction),
    Inconsistent(InfeasibilityCertificate),
}

struct Pivoting {
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Transformed rhs for the rows left after elimination.
    leftover: Vec<(usize, f64)>,
    transform: Option<DMatrix<f64>>,
    /// Eliminated rows in pivot order, with their rhs.
    u: DMatrix<f64>,
    u_rhs: DVector<f64>,
    /// Multipliers `(pivot step, factor)` applied to each original row.
    multipliers: Vec<Vec<(usize, f64)>>,
}

fn complete_pivoting(a: &DMatrix<f64>, b: &DVector<f64>, track: bool) -> Pivoting {
    let (p, n) = a.shape();
    let mut work = a.clone();
    let mut rhs = b.clone();
    let mut transform = track.then(|| DMatrix::<f64>::identity(p, p));
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let rank_tol = 1e-12 * scale * (p.max(n) as f64);

    let mut row_used = vec![false; p];
    let mut col_used = vec![false; n];
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut multipliers = vec![Vec::new(); p];

    // largest remaining magnitude per column; only the columns touched by a
    // pivot row change, so the search stays cheap on sparse rows
    let col_max = |work: &DMatrix<f64>, row_used: &[bool], j: usize| {
        (0..p)
            .filter(|&i| !row_used[i])
            .map(|i| (work[(i, j)].abs(), i))
            .fold(
                (0.0, usize::MAX),
                |best, c| {
                    if c.0 > best.0 {
                        c
                    } else {
                        best
                    }
                },
            )
    };
    let mut cmax: Vec<(f64, usize)> = (0..n).map(|j| col_max(&work, &row_used, j)).collect();

    for _ in 0..p.min(n) {
        let Some((pc, &(pivot, pr))) = cmax
            .iter()
            .enumerate()
            .filter(|(j, _)| !col_used[*j])
            .max_by(|x, y| x.1 .0.total_cmp(&y.1 .0).then(y.0.cmp(&x.0)))
        else {
            break;
        };
        if pivot <= rank_tol {
            break;
        }
        row_used[pr] = true;
        col_used[pc] = true;
        rows.push(pr);
        cols.push(pc);
        let support: Vec<usize> = (0..n).filter(|&j| work[(pr, j)] != 0.0).collect();
        let pivot_row: Vec<f64> = support.iter().map(|&j| work[(pr, j)]).collect();
        let pivot_val = work[(pr, pc)];
        for i in (0..p).filter(|&i| !row_used[i]) {
            let factor = work[(i, pc)] / pivot_val;
            if factor == 0.0 {
                continue;
            }
            multipliers[i].push((rows.len() - 1, factor));
            for (&j, &v) in support.iter().zip(&pivot_row) {
                work[(i, j)] -= factor * v;
            }
            rhs[i] -= factor * rhs[pr];
            if let Some(t) = transform.as_mut() {
                let trow = t.row(pr).clone_owned();
                for j in 0..p {
                    t[(i, j)] -= factor * trow[j];
                }
            }
        }
        for &j in &support {
            if !col_used[j] {
                cmax[j] = col_max(&work, &row_used, j);
            }
        }
    }
    let leftover = (0..p)
        .filter(|&i| !row_used[i])
        .map(|i| (i, rhs[i]))
        .collect();
    let u = DMatrix::from_fn(rows.len(), n, |t, j| work[(rows[t], j)]);
    let u_rhs = DVector::from_fn(rows.len(), |t, _| rhs[rows[t]]);
    Pivoting {
        rows,
        cols,
        leftover,
        transform,
        u,
        u_rhs,
        multipliers,
    }
}

pub(crate) fn reduce(problem: &QpProblem) -> Reduction {
    let a = problem.eq_matrix();
    let b = problem.eq_rhs();
    let n = problem.num_vars();
    let p = a.nrows();

    if p == 0 {
        return Reduction::Consistent(EqualityReduction {
            rows: vec![],
            basic: vec![],
            nonbasic: (0..n).collect(),
            lower: DMatrix::zeros(0, 0),
            upper: DMatrix::zeros(0, 0),
            particular: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
        });
    }

    let piv = complete_pivoting(a, b, false);
    let b_scale = b.amax().max(1.0);
    let consistency_tol = 1e-10 * b_scale;
    if piv.leftover.iter().any(|&(_, r)| r.abs() > consistency_tol) {
        let piv = complete_pivoting(a, b, true);
        let t = piv.transform.expect("tracked");
        let &(row, residual) = piv
            .leftover
            .iter()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .expect("inconsistent row");
        // t.row(row) combines the equalities into 0 = residual.
        let mut eq = t.row(row).transpose();
        eq *= -residual.signum() / eq.amax().max(f64::MIN_POSITIVE);
        return Reduction::Inconsistent(InfeasibilityCertificate {
            eq_multipliers: eq,
            ineq_multipliers: DVector::zeros(problem.num_ineq()),
        });
    }

    let rows = piv.rows;
    let basic = piv.cols;
    let r = basic.len();
    let mut is_basic = vec![false; n];
    for &j in &basic {
        is_basic[j] = true;
    }
    let nonbasic: Vec<usize> = (0..n).filter(|&j| !is_basic[j]).collect();

    // row t of U is zero in the basic columns of earlier pivots
    let upper = DMatrix::from_fn(r, r, |t, k| piv.u[(t, basic[k])]);
    let mut rhs = DMatrix::zeros(r, 1 + nonbasic.len());
    rhs.column_mut(0).copy_from(&piv.u_rhs);
    for (k, &j) in nonbasic.iter().enumerate() {
        for t in 0..r {
            rhs[(t, k + 1)] = -piv.u[(t, j)];
        }
    }
    let sol = upper
        .solve_upper_triangular(&rhs)
        .expect("pivots are nonzero");

    let mut particular = DVector::zeros(n);
    let mut basis = DMatrix::zeros(n, nonbasic.len());
    for (t, &j) in basic.iter().enumerate() {
        particular[j] = sol[(t, 0)];
        for k in 0..nonbasic.len() {
            basis[(j, k)] = sol[(t, k + 1)];
        }
    }
    for (k, &j) in nonbasic.iter().enumerate() {
        basis[(j, k)] = 1.0;
    }

    let mut lower = DMatrix::identity(r, r);
    for (t, &row) in rows.iter().enumerate() {
        for &(step, f) in &piv.multipliers[row] {
            lower[(t, step)] = f;
        }
    }

    Reduction::Consistent(EqualityReduction {
        rows,
        basic,
        nonbasic,
        lower,
        upper,
        particular,
        basis,
    })
}

impl EqualityReduction {
    #[cfg(test)]
    pub fn reduced_dim(&self) -> usize {
        self.nonbasic.len()
    }

    /// Equality multipliers making the basic components of the Lagrangian
    /// gradient vanish, given the gradient `P z + q + A_in' lambda`.
    pub fn equality_duals(&self, gradient: &DVector<f64>, num_eq: usize) -> DVector<f64> {
        let mut y = DVector::zeros(num_eq);
        if self.basic.is_empty() {
            return y;
        }
        // A_B' y_R = U_B' L' y_R = -g_B
        let g_b = DVector::from_fn(self.basic.len(), |i, _| -gradient[self.basic[i]]);
        let sol = self
            .upper
            .tr_solve_upper_triangular(&g_b)
            .and_then(|v| self.lower.tr_solve_lower_triangular(&v));
        if let Some(sol) = sol {
            for (i, &row) in self.rows.iter().enumerate() {
                y[row] = sol[i];
            }
        }
        y
    }

    pub fn expand(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.basis * w
    }

    /// Nonbasic coordinates of a full-space point.
    pub fn restrict(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nonbasic.len(), |k, _| z[self.nonbasic[k]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_sum_constraint() {
        let qp = QpProblem::new(
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(0, 3),
            DVector::zeros(0),
        )
        .unwrap();
        let Reduction::Consistent(red) = reduce(&qp) else {
            panic!("consistent")
        };
        assert_eq!(red.reduced_dim(), 2);
        let a = qp.eq_matrix();
        assert!((a * &red.basis).amax() < 1e-15);
        assert!(((a * &red.particular)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let Reduction::Consistent(red) = reduce(&qp) else {
            panic!("consistent")
        };
        assert_eq!(red.reduced_dim(), 1);
    }

    #[test]
    fn inconsistent_rows_give_certificate() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 3.0]);
        let qp = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            a.clone(),
            b.clone(),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let Reduction::Inconsistent(cert) = reduce(&qp) else {
            panic!("inconsistent")
        };
        let y = &cert.eq_multipliers;
        assert!((a.transpose() * y).amax() < 1e-12);
        assert!(b.dot(y) < 0.0);
    }
}
