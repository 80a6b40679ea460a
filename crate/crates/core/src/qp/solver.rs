//! Mehrotra predictor-corrector interior point on the equality-reduced
//! problem, followed by an active-set polish that recovers a vertex-accurate
//! KKT point.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::elimination::{self, EqualityReduction, Reduction};
use super::residuals::{self, ResidualReport};
use super::{InfeasibilityCertificate, QpProblem, QpSolution, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Infinity-norm bound on every KKT residual for an `Optimal` report.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Attempt an active-set refinement once the barrier parameter is small.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            polish: true,
        }
    }
}

/// Primal/dual seed for a solve, typically the previous control iteration's
/// solution shifted by one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub primal: DVector<f64>,
    pub ineq_duals: DVector<f64>,
}

pub fn solve_qp(problem: &QpProblem, options: &SolverOptions) -> QpSolution {
    solve_qp_warm(problem, options, None)
}

pub fn solve_qp_warm(
    problem: &QpProblem,
    options: &SolverOptions,
    warm: Option<&WarmStart>,
) -> QpSolution {
    let reduction = match elimination::reduce(problem) {
        Reduction::Consistent(r) => r,
        Reduction::Inconsistent(cert) => {
            return QpSolution::failed(problem, QpStatus::Infeasible, 0, Some(cert));
        }
    };
    let mut solver = Solver::new(problem, reduction, *options);
    solver.run(warm)
}

/// Tiny components left over from round-off are snapped to zero when doing so
/// keeps every residual within tolerance.
const SNAP: f64 = 1e-14;
const DIRECTION_REFINEMENT: usize = 2;
const POLISH_MU: f64 = 1e-6;
const POLISH_ROUNDS: usize = 3;
const POLISH_REFINEMENT: usize = 5;
const STEP_FRACTION: f64 = 0.99;

struct Solver<'a> {
    problem: &'a QpProblem,
    red: EqualityReduction,
    opts: SolverOptions,
    h: DMatrix<f64>,
    g: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

struct Candidate {
    z: DVector<f64>,
    y: DVector<f64>,
    lambda: DVector<f64>,
    report: ResidualReport,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a QpProblem, red: EqualityReduction, opts: SolverOptions) -> Self {
        let basis = &red.basis;
        let pz = sparse_mul(problem.hessian(), basis);
        let h = basis.tr_mul(&pz);
        let h = (&h + h.transpose()) * 0.5;
        let g = basis.tr_mul(&(problem.hessian() * &red.particular + problem.linear()));
        let a = sparse_mul(problem.ineq_matrix(), basis);
        let b = problem.ineq_rhs() - problem.ineq_matrix() * &red.particular;
        Self {
            problem,
            red,
            opts,
            h,
            g,
            a,
            b,
        }
    }

    fn tol(&self) -> f64 {
        self.opts.tolerance
    }

    fn candidate(&self, w: &DVector<f64>, lambda: &DVector<f64>) -> Candidate {
        let z = self.red.expand(w);
        let grad = self.problem.hessian() * &z
            + self.problem.linear()
            + self.problem.ineq_matrix().tr_mul(lambda);
        let y = self.red.equality_duals(&grad, self.problem.num_eq());
        let report = residuals::evaluate(self.problem, &z, &y, lambda);
        Candidate {
            z,
            y,
            lambda: lambda.clone(),
            report,
        }
    }

    fn finish(&self, mut c: Candidate, iterations: usize) -> QpSolution {
        let scale = c.z.amax().max(1.0);
        let snapped_z = c.z.map(|v| if v.abs() <= SNAP * scale { 0.0 } else { v });
        let lscale = c.lambda.amax().max(1.0);
        let snapped_l = c
            .lambda
            .map(|v| if v.abs() <= SNAP * lscale { 0.0 } else { v });
        let report = residuals::evaluate(self.problem, &snapped_z, &c.y, &snapped_l);
        if report.within(self.tol()) {
            c.z = snapped_z;
            c.lambda = snapped_l;
            c.report = report;
        }
        QpSolution {
            objective: self.problem.objective(&c.z),
            primal: c.z,
            eq_duals: c.y,
            ineq_duals: c.lambda,
            status: QpStatus::Optimal,
            iterations,
            certificate: None,
        }
    }

    fn failure(
        &self,
        status: QpStatus,
        iterations: usize,
        w: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> QpSolution {
        match w {
            Some((w, lambda)) => {
                let c = self.candidate(w, lambda);
                QpSolution {
                    objective: self.problem.objective(&c.z),
                    primal: c.z,
                    eq_duals: c.y,
                    ineq_duals: c.lambda,
                    status,
                    iterations,
                    certificate: None,
                }
            }
            None => QpSolution::failed(self.problem, status, iterations, None),
        }
    }

    fn run(&mut self, warm: Option<&WarmStart>) -> QpSolution {
        let r = self.h.nrows();
        let m = self.a.nrows();
        if m == 0 {
            return self.solve_unconstrained(warm);
        }
        if r == 0 {
            return self.solve_fixed_point();
        }

        let (mut w, mut s, mut lambda) = self.initial_point(warm);
        let mut stalls = 0;
        let mut polished = false;
        let tol = self.tol();

        for it in 0..self.opts.max_iterations {
            let rd = &self.h * &w + &self.g + self.a.tr_mul(&lambda);
            let rp = &self.a * &w + &s - &self.b;
            let comp = s.component_mul(&lambda);
            let mu = comp.sum() / m as f64;

            if rd.amax() <= 0.1 * tol && rp.amax() <= 0.1 * tol && comp.amax() <= 0.1 * tol {
                let c = self.candidate(&w, &lambda);
                if c.report.within(tol) {
                    return self.finish(c, it);
                }
            }

            if self.opts.polish && mu < POLISH_MU && !polished {
                polished = true;
                if let Some((pw, pl)) = self.polish(&w, &s, &lambda) {
                    let c = self.candidate(&pw, &pl);
                    if c.report.within(tol) {
                        return self.finish(c, it);
                    }
                }
            }

            if let Some(cert) = self.infeasibility_certificate(&lambda) {
                return QpSolution::failed(self.problem, QpStatus::Infeasible, it, Some(cert));
            }

            let d = lambda.component_div(&s);
            let Some(kkt) = NewtonSystem::factor(&self.h, &self.a, &d) else {
                return self.failure(QpStatus::MaxIterations, it, Some((&w, &lambda)));
            };

            // predictor
            let (_, ds_a, dl_a) = kkt.direction(&self.h, &self.a, &rd, &rp, &comp, &s, &lambda, &d);
            let alpha_aff = max_step(&s, &ds_a).min(max_step(&lambda, &dl_a)).min(1.0);
            let mu_aff = (&s + &ds_a * alpha_aff).dot(&(&lambda + &dl_a * alpha_aff)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // corrector
            let rc = &comp + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * mu);
            let (dw, ds, dl) = kkt.direction(&self.h, &self.a, &rd, &rp, &rc, &s, &lambda, &d);
            let alpha_max = max_step(&s, &ds).min(max_step(&lambda, &dl));
            let alpha = (STEP_FRACTION * alpha_max).min(1.0);

            if alpha < 1e-12 {
                stalls += 1;
                if stalls >= 5 {
                    return self.failure(QpStatus::MaxIterations, it, Some((&w, &lambda)));
                }
            } else {
                stalls = 0;
            }

            w += &dw * alpha;
            s += &ds * alpha;
            lambda += &dl * alpha;
            // keep strictly interior against round-off
            s.apply(|v| *v = v.max(1e-300));
            lambda.apply(|v| *v = v.max(1e-300));
        }

        if self.opts.polish {
            if let Some((pw, pl)) = self.polish(&w, &s, &lambda) {
                let c = self.candidate(&pw, &pl);
                if c.report.within(tol) {
                    return self.finish(c, self.opts.max_iterations);
                }
            }
        }
        self.failure(
            QpStatus::MaxIterations,
            self.opts.max_iterations,
            Some((&w, &lambda)),
        )
    }

    fn initial_point(
        &self,
        warm: Option<&WarmStart>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let m = self.a.nrows();
        let floor = 1e-2;
        if let Some(ws) = warm {
            if ws.primal.len() == self.problem.num_vars() && ws.ineq_duals.len() == m {
                let w = self.red.restrict(&ws.primal);
                let s = (&self.b - &self.a * &w).map(|v| v.max(floor));
                let lambda = ws.ineq_duals.map(|v| v.max(floor));
                return (w, s, lambda);
            }
        }

        // primal: min f(w) + |s|^2 / 2 with A w + s = b;
        // dual: min |H w|^2 / 2 + |lambda|^2 / 2 with H w + A' lambda = -g
        let normal = &self.h + self.a.tr_mul(&self.a);
        let (w, w_dual) = match SpdFactor::new(&normal) {
            Some(f) => (
                f.solve_refined(&normal, &(-&self.g + self.a.tr_mul(&self.b)), 2),
                f.solve_refined(&normal, &(-&self.g), 2),
            ),
            None => (
                DVector::zeros(self.h.nrows()),
                DVector::zeros(self.h.nrows()),
            ),
        };
        let mut s = &self.b - &self.a * &w;
        let mut lambda = &self.a * &w_dual;
        s.add_scalar_mut((-1.5 * s.min()).max(0.0));
        lambda.add_scalar_mut((-1.5 * lambda.min()).max(0.0));
        let sl = s.dot(&lambda);
        let (ss, ls) = (s.sum(), lambda.sum());
        if sl > 0.0 && ss > 0.0 && ls > 0.0 {
            s.add_scalar_mut(0.5 * sl / ls);
            lambda.add_scalar_mut(0.5 * sl / ss);
        }
        s.apply(|v| *v = v.max(floor));
        lambda.apply(|v| *v = v.max(floor));
        (w, s, lambda)
    }

    fn infeasibility_certificate(&self, lambda: &DVector<f64>) -> Option<InfeasibilityCertificate> {
        let big = lambda.amax();
        if big < 1e6 {
            return None;
        }
        let lhat = lambda / big;
        let atl = self.a.tr_mul(&lhat);
        let gap = self.b.dot(&lhat);
        let a_scale = self.a.amax().max(1.0);
        if atl.amax() > 1e-9 * a_scale || gap > -1e-8 {
            return None;
        }
        let grad = self.problem.ineq_matrix().tr_mul(&lhat);
        let eq = self.red.equality_duals(&grad, self.problem.num_eq());
        Some(InfeasibilityCertificate {
            eq_multipliers: eq,
            ineq_multipliers: lhat,
        })
    }

    /// Solves the equality-constrained problem on a guessed active set,
    /// refining from the interior-point iterate so directions of zero
    /// curvature keep their current values. The guess is corrected a few
    /// times by adding violated rows and dropping negative multipliers.
    fn polish(
        &self,
        w: &DVector<f64>,
        s: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let m = s.len();
        let tol = self.tol();
        let mut active: Vec<bool> = (0..m).map(|i| lambda[i] > s[i]).collect();
        for _ in 0..POLISH_ROUNDS {
            let (pw, pl) = self.solve_active(&active, w, lambda)?;
            let slack = &self.b - &self.a * &pw;
            let mut changed = false;
            for i in 0..m {
                if active[i] && pl[i] < -tol {
                    active[i] = false;
                    changed = true;
                } else if !active[i] && slack[i] < -tol {
                    active[i] = true;
                    changed = true;
                }
            }
            if !changed {
                return Some((pw, pl.map(|v| v.max(0.0))));
            }
        }
        None
    }

    fn solve_active(
        &self,
        mask: &[bool],
        w: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let r = self.h.nrows();
        let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let k = active.len();
        let dim = r + k;

        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (r, r)).copy_from(&self.h);
        for (row, &i) in active.iter().enumerate() {
            for j in 0..r {
                let v = self.a[(i, j)];
                kkt[(r + row, j)] = v;
                kkt[(j, r + row)] = v;
            }
        }
        let scale = self.h.amax().max(self.a.amax()).max(1.0);
        let delta = 1e-9 * scale;
        let mut reg = kkt.clone();
        for i in 0..r {
            reg[(i, i)] += delta;
        }
        for i in r..dim {
            reg[(i, i)] -= delta;
        }
        let lu = reg.lu();

        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, r).copy_from(&(-&self.g));
        for (row, &i) in active.iter().enumerate() {
            rhs[r + row] = self.b[i];
        }
        let mut x = DVector::zeros(dim);
        x.rows_mut(0, r).copy_from(w);
        for (row, &i) in active.iter().enumerate() {
            x[r + row] = lambda[i];
        }
        let rhs_scale = rhs.amax().max(1.0);
        for _ in 0..POLISH_REFINEMENT {
            let res = &rhs - &kkt * &x;
            if res.amax() <= 1e-15 * rhs_scale {
                break;
            }
            let dx = lu.solve(&res)?;
            if !dx.iter().all(|v| v.is_finite()) {
                return None;
            }
            x += dx;
        }

        let pw = x.rows(0, r).clone_owned();
        let mut pl = DVector::zeros(mask.len());
        for (row, &i) in active.iter().enumerate() {
            pl[i] = x[r + row];
        }
        Some((pw, pl))
    }

    fn solve_unconstrained(&self, warm: Option<&WarmStart>) -> QpSolution {
        let r = self.h.nrows();
        let lambda = DVector::zeros(0);
        let start = warm
            .filter(|ws| ws.primal.len() == self.problem.num_vars())
            .map(|ws| self.red.restrict(&ws.primal))
            .unwrap_or_else(|| DVector::zeros(r));
        if r == 0 {
            let c = self.candidate(&start, &lambda);
            return if c.report.within(self.tol()) {
                self.finish(c, 0)
            } else {
                self.failure(QpStatus::MaxIterations, 0, Some((&start, &lambda)))
            };
        }
        let Some(f) = SpdFactor::new(&self.h) else {
            return self.failure(QpStatus::MaxIterations, 0, Some((&start, &lambda)));
        };
        let mut w = start;
        let mut iterations = 0;
        for _ in 0..30 {
            iterations += 1;
            let res = -&self.g - &self.h * &w;
            if res.amax() <= 1e-15 * self.g.amax().max(1.0) {
                break;
            }
            w += f.solve(&res);
        }
        let c = self.candidate(&w, &lambda);
        if c.report.within(self.tol()) {
            self.finish(c, iterations)
        } else {
            self.failure(QpStatus::MaxIterations, iterations, Some((&w, &lambda)))
        }
    }

    /// Every variable is pinned by the equalities; only feasibility remains.
    fn solve_fixed_point(&self) -> QpSolution {
        let w = DVector::zeros(0);
        let m = self.a.nrows();
        let lambda = DVector::zeros(m);
        if let Some((i, _)) = self.b.iter().enumerate().find(|(_, &v)| v < -self.tol()) {
            let mut lhat = DVector::zeros(m);
            lhat[i] = 1.0;
            let grad = self.problem.ineq_matrix().tr_mul(&lhat);
            let eq = self.red.equality_duals(&grad, self.problem.num_eq());
            return QpSolution::failed(
                self.problem,
                QpStatus::Infeasible,
                0,
                Some(InfeasibilityCertificate {
                    eq_multipliers: eq,
                    ineq_multipliers: lhat,
                }),
            );
        }
        let c = self.candidate(&w, &lambda);
        if c.report.within(self.tol()) {
            self.finish(c, 0)
        } else {
            self.failure(QpStatus::MaxIterations, 0, Some((&w, &lambda)))
        }
    }
}

/// `a * b` skipping the zeros of `a`.
fn sparse_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for k in 0..a.ncols() {
        for i in 0..a.nrows() {
            let v = a[(i, k)];
            if v != 0.0 {
                for j in 0..b.ncols() {
                    out[(i, j)] += v * b[(k, j)];
                }
            }
        }
    }
    out
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky of the unit-diagonal scaling `S M S`, with a shift added only
/// when the plain factorization fails.
struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
}

impl SpdFactor {
    fn new(m: &DMatrix<f64>) -> Option<Self> {
        let n = m.nrows();
        let floor = 1e-300_f64.max(1e-30 * m.amax());
        let scale = DVector::from_iterator(n, (0..n).map(|i| 1.0 / m[(i, i)].max(floor).sqrt()));
        let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
        if let Some(chol) = scaled.clone().cholesky() {
            return Some(Self { chol, scale });
        }
        let mut reg = 1e-14;
        for _ in 0..7 {
            let mut shifted = scaled.clone();
            for i in 0..n {
                shifted[(i, i)] += reg;
            }
            if let Some(chol) = shifted.cholesky() {
                return Some(Self { chol, scale });
            }
            reg *= 100.0;
        }
        None
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self.chol.solve(&rhs.component_mul(&self.scale));
        y.component_mul(&self.scale)
    }

    fn solve_refined(&self, m: &DMatrix<f64>, rhs: &DVector<f64>, steps: usize) -> DVector<f64> {
        let mut x = self.solve(rhs);
        for _ in 0..steps {
            let res = rhs - m * &x;
            x += self.solve(&res);
        }
        x
    }
}

/// Normal-equations form of the Newton step, `(H + A' D A) dw = rhs`.
struct NewtonSystem {
    m: DMatrix<f64>,
    factor: SpdFactor,
}

impl NewtonSystem {
    fn factor(h: &DMatrix<f64>, a: &DMatrix<f64>, d: &DVector<f64>) -> Option<Self> {
        let mut scaled_t = a.transpose();
        for (i, mut col) in scaled_t.column_iter_mut().enumerate() {
            col *= d[i].sqrt();
        }
        let m = h + &scaled_t * scaled_t.transpose();
        let factor = SpdFactor::new(&m)?;
        Some(Self { m, factor })
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        h: &DMatrix<f64>,
        a: &DMatrix<f64>,
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        rc: &DVector<f64>,
        s: &DVector<f64>,
        lambda: &DVector<f64>,
        d: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (mut dw, mut ds, mut dl) = self.condensed(a, rd, rp, rc, s, lambda, d);
        // refine against the unreduced system; the condensed matrix loses
        // accuracy once some λ/s are extreme
        for _ in 0..DIRECTION_REFINEMENT {
            let e1 = -(rd + h * &dw + a.tr_mul(&dl));
            let e2 = -(rp + a * &dw + &ds);
            let e3 = -(rc + lambda.component_mul(&ds) + s.component_mul(&dl));
            let (cw, cs, cl) = self.condensed(a, &-e1, &-e2, &-e3, s, lambda, d);
            dw += cw;
            ds += cs;
            dl += cl;
        }
        (dw, ds, dl)
    }

    #[allow(clippy::too_many_arguments)]
    fn condensed(
        &self,
        a: &DMatrix<f64>,
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        rc: &DVector<f64>,
        s: &DVector<f64>,
        lambda: &DVector<f64>,
        d: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let rc_over_s = rc.component_div(s);
        let inner = d.component_mul(rp) - &rc_over_s;
        let rhs = -rd - a.tr_mul(&inner);
        let dw = self.factor.solve_refined(&self.m, &rhs, 1);
        let dl = d.component_mul(&(a * &dw + rp)) - rc_over_s;
        let ds = -(rc + s.component_mul(&dl)).component_div(lambda);
        (dw, ds, dl)
    }
}
