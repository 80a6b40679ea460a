//! Random problem generators and independent oracles shared by the
//! integration suites.

#![allow(dead_code)]

use cmpc::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Strictly convex QP with `m` inequalities and `p` equalities, feasible by
/// construction around a random point. Some inequalities are tight there.
pub fn random_qp(seed: u64, n: usize, m: usize, p: usize) -> QpProblem {
    let mut r = rng(seed);
    let l = uniform(&mut r, n, n);
    let hessian = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let linear = DVector::from_iterator(n, (0..n).map(|_| r.random_range(-2.0..2.0)));
    let z_feas = DVector::from_iterator(n, (0..n).map(|_| r.random_range(-1.0..1.0)));
    let a_in = uniform(&mut r, m, n);
    let slack = DVector::from_iterator(
        m,
        (0..m).map(|_| {
            if r.random_bool(0.3) {
                0.0
            } else {
                r.random_range(0.0..1.0)
            }
        }),
    );
    let b_in = &a_in * &z_feas + slack;
    let a_eq = uniform(&mut r, p, n);
    let b_eq = &a_eq * &z_feas;
    QpProblem::new(hessian, linear, a_eq, b_eq, a_in, b_in).unwrap()
}

/// Minimizes over every active set: each subset of inequalities is held at
/// equality together with the equalities, the resulting KKT system solved,
/// and the best feasible candidate kept. Exact for strictly convex problems.
pub fn brute_force_objective(problem: &QpProblem) -> Option<f64> {
    let n = problem.num_vars();
    let m = problem.num_ineq();
    let p = problem.num_eq();
    let (a_in, b_in) = (problem.ineq_matrix(), problem.ineq_rhs());
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = p + active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(problem.hessian());
        rhs.rows_mut(0, n).copy_from(&(-problem.linear()));
        let mut put = |row: usize, a: DVector<f64>, b: f64| {
            for j in 0..n {
                kkt[(n + row, j)] = a[j];
                kkt[(j, n + row)] = a[j];
            }
            rhs[n + row] = b;
        };
        for i in 0..p {
            put(
                i,
                problem.eq_matrix().row(i).transpose(),
                problem.eq_rhs()[i],
            );
        }
        for (j, &i) in active.iter().enumerate() {
            put(p + j, a_in.row(i).transpose(), b_in[i]);
        }
        let svd = kkt.clone().svd(true, true);
        if svd.singular_values.min() < 1e-10 * svd.singular_values.max() {
            continue;
        }
        let Ok(sol) = svd.solve(&rhs, 1e-14) else {
            continue;
        };
        let z = sol.rows(0, n).clone_owned();
        let viol = (a_in * &z - b_in).max();
        let eq_viol = if p > 0 {
            (problem.eq_matrix() * &z - problem.eq_rhs()).amax()
        } else {
            0.0
        };
        if (m > 0 && viol > 1e-9) || eq_viol > 1e-9 {
            continue;
        }
        let obj = problem.objective(&z);
        if best.is_none_or(|b| obj < b) {
            best = Some(obj);
        }
    }
    best
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let rows = f(x).len();
    let mut j = DMatrix::zeros(rows, x.len());
    for c in 0..x.len() {
        let step = h * x[c].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += step;
        xm[c] -= step;
        let (fp, fm) = (f(&xp), f(&xm));
        for r in 0..rows {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
    j
}
