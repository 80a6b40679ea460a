//! Assembly of the dual-horizon contingency MPC quadratic program.
//!
//! Decision vector layout:
//!
//! ```text
//! [ u_0 | u^n_1 .. u^n_{N-1} | u^c_1 .. u^c_{N-1} | x^n_1 .. x^n_N | x^c_1 .. x^c_N | sigma ]
//! ```
//!
//! The first input is a single variable referenced by both horizons, so the
//! coupling `u^n_0 = u^c_0` holds by construction. States stay in the decision
//! vector and are tied together by explicit dynamics rows. One slack per stage
//! is created if any row of either horizon at that stage is slack-relaxed.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{QpError, QpProblem, QpSolution, QpStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error("contingency probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("horizon lengths differ: nominal {nominal}, contingency {contingency}")]
    HorizonMismatch { nominal: usize, contingency: usize },
    #[error("horizon must have at least one stage")]
    EmptyHorizon,
    #[error("{what} at stage {stage}: expected {expected:?}, got {got:?}")]
    Dimension {
        what: &'static str,
        stage: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{what} at stage {stage} contains non-finite entries")]
    NonFinite { what: &'static str, stage: usize },
    #[error("negative slack weight {weight} at stage {stage}")]
    NegativeSlackWeight { stage: usize, weight: f64 },
    #[error("terminal stage {stage} constraint references an input that does not exist")]
    TerminalInput { stage: usize },
    #[error("stage 0 references the previous input but none was supplied")]
    MissingPreviousInput,
    #[error("stage 0 constraint references a state before the horizon")]
    PreviousStateAtStart,
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("solution status is {0}, refusing to decode")]
    NotOptimal(QpStatus),
    #[error("solution has {got} variables, index map expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("shared first input differs between horizons")]
    SharedInputMismatch,
}

/// One stage of `x_{k+1} = A x_k + B u_k + B_next u_{k+1} + C`.
///
/// `b_next` is only present for first-order-hold stages, where the input is
/// interpolated between `u_k` and `u_{k+1}` across the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStageModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub b_next: Option<DMatrix<f64>>,
}

impl AffineStageModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Self {
        Self {
            a,
            b,
            c,
            b_next: None,
        }
    }

    pub fn first_order_hold(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        b_next: DMatrix<f64>,
        c: DVector<f64>,
    ) -> Self {
        Self {
            a,
            b,
            c,
            b_next: Some(b_next),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn propagate(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        u_next: &DVector<f64>,
    ) -> DVector<f64> {
        let mut next = &self.a * x + &self.b * u + &self.c;
        if let Some(bn) = &self.b_next {
            next += bn * u_next;
        }
        next
    }
}

/// Per-stage weights: `x'Qx + u'Ru + (u - u_prev)' R_rate (u - u_prev)`,
/// plus a linear penalty on the stage slack.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_rate: Option<DMatrix<f64>>,
    pub slack_weight: f64,
}

impl StageCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self {
            q,
            r,
            r_rate: None,
            slack_weight: 0.0,
        }
    }

    pub fn zero(n: usize, m: usize) -> Self {
        Self::new(DMatrix::zeros(n, n), DMatrix::zeros(m, m))
    }

    pub fn with_rate(mut self, r_rate: DMatrix<f64>) -> Self {
        self.r_rate = Some(r_rate);
        self
    }

    pub fn with_slack_weight(mut self, w: f64) -> Self {
        self.slack_weight = w;
        self
    }
}

/// Rows `G x_k + H u_k + H_prev u_{k-1} <= b`, where rows flagged in `slack`
/// become `... - sigma_k <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeStageConstraint {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_prev: Option<DMatrix<f64>>,
    /// Coefficients on `x_{k-1}`; not allowed at stage 0.
    pub g_prev: Option<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub slack: Vec<bool>,
}

impl PolytopeStageConstraint {
    pub fn new(g: DMatrix<f64>, h: DMatrix<f64>, b: DVector<f64>) -> Self {
        let rows = b.len();
        Self {
            g,
            h,
            h_prev: None,
            g_prev: None,
            b,
            slack: vec![false; rows],
        }
    }

    pub fn empty(n: usize, m: usize) -> Self {
        Self::new(
            DMatrix::zeros(0, n),
            DMatrix::zeros(0, m),
            DVector::zeros(0),
        )
    }

    pub fn with_prev(mut self, h_prev: DMatrix<f64>) -> Self {
        self.h_prev = Some(h_prev);
        self
    }

    pub fn with_prev_state(mut self, g_prev: DMatrix<f64>) -> Self {
        self.g_prev = Some(g_prev);
        self
    }

    pub fn with_slack(mut self, flags: Vec<bool>) -> Self {
        self.slack = flags;
        self
    }

    pub fn rows(&self) -> usize {
        self.b.len()
    }

    pub fn has_slack(&self) -> bool {
        self.slack.iter().any(|&s| s)
    }

    /// Concatenates the rows of `self` and `other`.
    pub fn stack(&self, other: &Self) -> Self {
        let n = self.g.ncols();
        let m = self.h.ncols();
        let (r1, r2) = (self.rows(), other.rows());
        let vstack = |top: &DMatrix<f64>, bottom: &DMatrix<f64>, cols: usize| {
            let mut out = DMatrix::zeros(r1 + r2, cols);
            out.view_mut((0, 0), (r1, cols)).copy_from(top);
            out.view_mut((r1, 0), (r2, cols)).copy_from(bottom);
            out
        };
        let zeros_1 = DMatrix::zeros(r1, m);
        let zeros_2 = DMatrix::zeros(r2, m);
        let h_prev = match (&self.h_prev, &other.h_prev) {
            (None, None) => None,
            (a, b) => Some(vstack(
                a.as_ref().unwrap_or(&zeros_1),
                b.as_ref().unwrap_or(&zeros_2),
                m,
            )),
        };
        let g_prev = match (&self.g_prev, &other.g_prev) {
            (None, None) => None,
            (a, b) => Some(vstack(
                a.as_ref().unwrap_or(&DMatrix::zeros(r1, n)),
                b.as_ref().unwrap_or(&DMatrix::zeros(r2, n)),
                n,
            )),
        };
        let mut b = DVector::zeros(r1 + r2);
        b.rows_mut(0, r1).copy_from(&self.b);
        b.rows_mut(r1, r2).copy_from(&other.b);
        Self {
            g: vstack(&self.g, &other.g, n),
            h: vstack(&self.h, &other.h, m),
            h_prev,
            g_prev,
            b,
            slack: self
                .slack
                .iter()
                .chain(other.slack.iter())
                .copied()
                .collect(),
        }
    }
}

/// Models for stages `0..N`, costs and constraints for stages `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSpec {
    pub models: Vec<AffineStageModel>,
    pub costs: Vec<StageCost>,
    pub constraints: Vec<PolytopeStageConstraint>,
}

impl HorizonSpec {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtvCmpcSpec {
    pub x0: DVector<f64>,
    pub nominal: HorizonSpec,
    pub contingency: HorizonSpec,
    /// `P^c`; the nominal horizon is weighted by `1 - P^c`.
    pub contingency_probability: f64,
    /// `u_{-1}`, referenced by stage-0 rate costs and `h_prev` rows.
    pub previous_input: Option<DVector<f64>>,
}

impl LtvCmpcSpec {
    pub fn horizon(&self) -> usize {
        self.nominal.len()
    }
}

/// Decoded solution of a (contingency) MPC problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub nominal_states: Vec<DVector<f64>>,
    pub contingency_states: Vec<DVector<f64>>,
    pub nominal_inputs: Vec<DVector<f64>>,
    pub contingency_inputs: Vec<DVector<f64>>,
    pub shared_input: DVector<f64>,
    /// One entry per stage `0..=N`; zero where the stage has no slack.
    pub slack: Vec<f64>,
    pub objective: f64,
    /// Built by [`build_deterministic_mpc`]; the contingency fields mirror the
    /// nominal ones.
    pub single_horizon: bool,
}

impl TrajectoryPair {
    pub fn max_slack(&self) -> f64 {
        self.slack.iter().copied().fold(0.0, f64::max)
    }

    /// Largest deviation from the stage dynamics of `horizon`.
    pub fn dynamics_residual(&self, nominal: &HorizonSpec, contingency: &HorizonSpec) -> f64 {
        let mut worst: f64 = 0.0;
        let sets = [
            (nominal, &self.nominal_states, &self.nominal_inputs),
            (
                contingency,
                &self.contingency_states,
                &self.contingency_inputs,
            ),
        ];
        for (spec, xs, us) in sets {
            let n = spec.len();
            for k in 0..n {
                let u_next = if k + 1 < n { &us[k + 1] } else { &us[k] };
                let pred = spec.models[k].propagate(&xs[k], &us[k], u_next);
                worst = worst.max((&xs[k + 1] - pred).amax());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Nominal,
    Contingency,
}

/// Where each trajectory quantity lives in the QP decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    n: usize,
    m: usize,
    horizon: usize,
    num_vars: usize,
    x0: DVector<f64>,
    /// Per horizon, start offset of `u_k` for `k = 0..N` (k = 0 is shared).
    inputs: [Vec<usize>; 2],
    /// Per horizon, start offset of `x_k` for `k = 1..=N` (index k - 1).
    states: [Vec<usize>; 2],
    slack: Vec<Option<usize>>,
    objective_offset: f64,
    single_horizon: bool,
}

impl IndexMap {
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    fn h(which: Horizon) -> usize {
        match which {
            Horizon::Nominal => 0,
            Horizon::Contingency => 1,
        }
    }

    pub fn input_offset(&self, which: Horizon, k: usize) -> usize {
        self.inputs[Self::h(which)][k]
    }

    /// Offset of `x_k`, `k >= 1`; `x_0` is data, not a variable.
    pub fn state_offset(&self, which: Horizon, k: usize) -> Option<usize> {
        k.checked_sub(1).map(|i| self.states[Self::h(which)][i])
    }

    pub fn slack_offset(&self, k: usize) -> Option<usize> {
        self.slack[k]
    }

    /// Constant part of the objective not represented in the QP.
    pub fn objective_offset(&self) -> f64 {
        self.objective_offset
    }

    pub fn is_single_horizon(&self) -> bool {
        self.single_horizon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmpcProblem {
    pub qp: QpProblem,
    pub index: IndexMap,
}

// -------------------------------------------------------------------------
// assembly

#[derive(Debug, Clone, Default)]
struct Expr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Expr {
    fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    fn constant(c: f64) -> Self {
        Self {
            terms: vec![],
            constant: c,
        }
    }

    fn sub(mut self, other: &Expr) -> Self {
        self.terms.extend(other.terms.iter().map(|&(i, c)| (i, -c)));
        self.constant -= other.constant;
        self
    }
}

struct Assembler {
    p: DMatrix<f64>,
    q: DVector<f64>,
    constant: f64,
    eq_rows: Vec<(Vec<(usize, f64)>, f64)>,
    in_rows: Vec<(Vec<(usize, f64)>, f64)>,
}

impl Assembler {
    fn new(num_vars: usize) -> Self {
        Self {
            p: DMatrix::zeros(num_vars, num_vars),
            q: DVector::zeros(num_vars),
            constant: 0.0,
            eq_rows: vec![],
            in_rows: vec![],
        }
    }

    /// Adds `scale * e' W e` to the objective.
    fn quadratic(&mut self, scale: f64, e: &[Expr], w: &DMatrix<f64>) {
        if scale == 0.0 {
            return;
        }
        for i in 0..e.len() {
            for j in 0..e.len() {
                let wij = scale * w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                let (ei, ej) = (&e[i], &e[j]);
                for &(a, ca) in &ei.terms {
                    for &(b, cb) in &ej.terms {
                        self.p[(a, b)] += 2.0 * wij * ca * cb;
                    }
                    self.q[a] += wij * ca * ej.constant;
                }
                for &(b, cb) in &ej.terms {
                    self.q[b] += wij * ei.constant * cb;
                }
                self.constant += wij * ei.constant * ej.constant;
            }
        }
    }

    /// Row `sum coeff * expr <= rhs` (or `= rhs`).
    fn row(&mut self, parts: &[(f64, &Expr)], rhs: f64, equality: bool) {
        let mut terms = Vec::new();
        let mut rhs = rhs;
        for &(coeff, e) in parts {
            if coeff == 0.0 {
                continue;
            }
            terms.extend(e.terms.iter().map(|&(i, c)| (i, coeff * c)));
            rhs -= coeff * e.constant;
        }
        if equality {
            self.eq_rows.push((terms, rhs));
        } else {
            self.in_rows.push((terms, rhs));
        }
    }

    fn finish(self, num_vars: usize) -> Result<(QpProblem, f64), QpError> {
        let dense = |rows: &[(Vec<(usize, f64)>, f64)]| {
            let mut a = DMatrix::zeros(rows.len(), num_vars);
            let mut b = DVector::zeros(rows.len());
            for (r, (terms, rhs)) in rows.iter().enumerate() {
                for &(i, c) in terms {
                    a[(r, i)] += c;
                }
                b[r] = *rhs;
            }
            (a, b)
        };
        let (a_eq, b_eq) = dense(&self.eq_rows);
        let (a_in, b_in) = dense(&self.in_rows);
        let qp = QpProblem::new(self.p, self.q, a_eq, b_eq, a_in, b_in)?;
        Ok((qp, self.constant))
    }
}

fn check_shape(
    what: &'static str,
    stage: usize,
    got: (usize, usize),
    expected: (usize, usize),
) -> Result<(), BuildError> {
    if got == expected {
        Ok(())
    } else {
        Err(BuildError::Dimension {
            what,
            stage,
            expected,
            got,
        })
    }
}

fn finite(what: &'static str, stage: usize, m: &DMatrix<f64>) -> Result<(), BuildError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BuildError::NonFinite { what, stage })
    }
}

fn validate_horizon(h: &HorizonSpec, n: usize, m: usize) -> Result<(), BuildError> {
    let len = h.len();
    if len == 0 {
        return Err(BuildError::EmptyHorizon);
    }
    check_shape("model count", 0, (h.models.len(), 1), (len, 1))?;
    check_shape("cost count", 0, (h.costs.len(), 1), (len + 1, 1))?;
    check_shape(
        "constraint count",
        0,
        (h.constraints.len(), 1),
        (len + 1, 1),
    )?;
    for (k, md) in h.models.iter().enumerate() {
        check_shape("A", k, md.a.shape(), (n, n))?;
        check_shape("B", k, md.b.shape(), (n, m))?;
        check_shape("C", k, (md.c.len(), 1), (n, 1))?;
        finite("A", k, &md.a)?;
        finite("B", k, &md.b)?;
        if md.c.iter().any(|v| !v.is_finite()) {
            return Err(BuildError::NonFinite {
                what: "C",
                stage: k,
            });
        }
        if let Some(bn) = &md.b_next {
            check_shape("B_next", k, bn.shape(), (n, m))?;
            finite("B_next", k, bn)?;
        }
    }
    for (k, c) in h.costs.iter().enumerate() {
        check_shape("Q", k, c.q.shape(), (n, n))?;
        check_shape("R", k, c.r.shape(), (m, m))?;
        if let Some(rr) = &c.r_rate {
            check_shape("R_rate", k, rr.shape(), (m, m))?;
        }
        if c.slack_weight < 0.0 || !c.slack_weight.is_finite() {
            return Err(BuildError::NegativeSlackWeight {
                stage: k,
                weight: c.slack_weight,
            });
        }
    }
    for (k, c) in h.constraints.iter().enumerate() {
        let rows = c.rows();
        check_shape("G", k, c.g.shape(), (rows, n))?;
        check_shape("H", k, c.h.shape(), (rows, m))?;
        check_shape("slack flags", k, (c.slack.len(), 1), (rows, 1))?;
        if let Some(hp) = &c.h_prev {
            check_shape("H_prev", k, hp.shape(), (rows, m))?;
        }
        if let Some(gp) = &c.g_prev {
            check_shape("G_prev", k, gp.shape(), (rows, n))?;
            if k == 0 && gp.iter().any(|&v| v != 0.0) {
                return Err(BuildError::PreviousStateAtStart);
            }
        }
        if k == len && c.h.iter().any(|&v| v != 0.0) {
            return Err(BuildError::TerminalInput { stage: k });
        }
    }
    Ok(())
}

struct Layout {
    n: usize,
    m: usize,
    len: usize,
    inputs: [Vec<usize>; 2],
    states: [Vec<usize>; 2],
    slack: Vec<Option<usize>>,
    num_vars: usize,
}

fn layout(n: usize, m: usize, len: usize, horizons: usize, slack_stages: &[bool]) -> Layout {
    let mut next = 0;
    let mut alloc = |size: usize| {
        let at = next;
        next += size;
        at
    };
    let shared = alloc(m);
    let mut inputs = [vec![shared], vec![shared]];
    for h in 0..horizons {
        for _ in 1..len {
            inputs[h].push(alloc(m));
        }
    }
    let mut states = [vec![], vec![]];
    for h in 0..horizons {
        for _ in 1..=len {
            states[h].push(alloc(n));
        }
    }
    if horizons == 1 {
        inputs[1] = inputs[0].clone();
        states[1] = states[0].clone();
    }
    let slack = slack_stages.iter().map(|&s| s.then(|| alloc(1))).collect();
    Layout {
        n,
        m,
        len,
        inputs,
        states,
        slack,
        num_vars: next,
    }
}

impl Layout {
    fn state(&self, h: usize, k: usize, x0: &DVector<f64>) -> Vec<Expr> {
        (0..self.n)
            .map(|i| {
                if k == 0 {
                    Expr::constant(x0[i])
                } else {
                    Expr::var(self.states[h][k - 1] + i)
                }
            })
            .collect()
    }

    fn input(&self, h: usize, k: usize) -> Vec<Expr> {
        (0..self.m)
            .map(|j| Expr::var(self.inputs[h][k] + j))
            .collect()
    }
}

struct HorizonRef<'a> {
    spec: &'a HorizonSpec,
    weight: f64,
}

fn assemble(
    x0: &DVector<f64>,
    horizons: &[HorizonRef<'_>],
    previous_input: Option<&DVector<f64>>,
) -> Result<CmpcProblem, BuildError> {
    let first = horizons[0].spec;
    let n = x0.len();
    let m = first.models[0].input_dim();
    let len = first.len();
    for h in horizons {
        validate_horizon(h.spec, n, m)?;
    }
    if let Some(prev) = previous_input {
        check_shape("previous input", 0, (prev.len(), 1), (m, 1))?;
    }

    let slack_stages: Vec<bool> = (0..=len)
        .map(|k| horizons.iter().any(|h| h.spec.constraints[k].has_slack()))
        .collect();
    let lay = layout(n, m, len, horizons.len(), &slack_stages);
    let mut asm = Assembler::new(lay.num_vars);
    let prev_expr = |j: usize| previous_input.map(|p| Expr::constant(p[j]));

    for (hi, h) in horizons.iter().enumerate() {
        let spec = h.spec;
        // objective
        for k in 0..=len {
            let cost = &spec.costs[k];
            asm.quadratic(h.weight, &lay.state(hi, k, x0), &cost.q);
            if k == len {
                continue;
            }
            let u = lay.input(hi, k);
            asm.quadratic(h.weight, &u, &cost.r);
            if let Some(rr) = &cost.r_rate {
                let prev: Option<Vec<Expr>> = if k == 0 {
                    (0..m).map(prev_expr).collect()
                } else {
                    Some(lay.input(hi, k - 1))
                };
                if let Some(prev) = prev {
                    let v: Vec<Expr> = u.iter().zip(&prev).map(|(a, b)| a.clone().sub(b)).collect();
                    asm.quadratic(h.weight, &v, rr);
                }
            }
        }

        // dynamics: x_{k+1} - A x_k - B u_k - B_next u_{k+1} = C
        for k in 0..len {
            let md = &spec.models[k];
            let xk = lay.state(hi, k, x0);
            let xn = lay.state(hi, k + 1, x0);
            let uk = lay.input(hi, k);
            let last = k + 1 == len;
            let un = if last {
                uk.clone()
            } else {
                lay.input(hi, k + 1)
            };
            for i in 0..n {
                let mut parts: Vec<(f64, &Expr)> = vec![(1.0, &xn[i])];
                for j in 0..n {
                    parts.push((-md.a[(i, j)], &xk[j]));
                }
                for j in 0..m {
                    parts.push((-md.b[(i, j)], &uk[j]));
                    if let Some(bn) = &md.b_next {
                        // the final stage holds its input, folding B_next into B
                        parts.push((-bn[(i, j)], &un[j]));
                    }
                }
                asm.row(&parts, md.c[i], true);
            }
        }

        // polytope rows
        for k in 0..=len {
            let c = &spec.constraints[k];
            if c.rows() == 0 {
                continue;
            }
            let xk = lay.state(hi, k, x0);
            let uk = (k < len).then(|| lay.input(hi, k));
            let uprev: Option<Vec<Expr>> = if k == 0 {
                (0..m).map(prev_expr).collect()
            } else {
                Some(lay.input(hi, k - 1))
            };
            let xprev = (k > 0 && c.g_prev.is_some()).then(|| lay.state(hi, k - 1, x0));
            let sigma = lay.slack[k].map(Expr::var);
            for r in 0..c.rows() {
                let mut parts: Vec<(f64, &Expr)> = Vec::new();
                for j in 0..n {
                    parts.push((c.g[(r, j)], &xk[j]));
                }
                if let Some(uk) = &uk {
                    for j in 0..m {
                        parts.push((c.h[(r, j)], &uk[j]));
                    }
                }
                if let Some(hp) = &c.h_prev {
                    if hp.row(r).iter().any(|&v| v != 0.0) {
                        let Some(up) = &uprev else {
                            return Err(BuildError::MissingPreviousInput);
                        };
                        for j in 0..m {
                            parts.push((hp[(r, j)], &up[j]));
                        }
                    }
                }
                if let (Some(gp), Some(xp)) = (&c.g_prev, &xprev) {
                    for j in 0..n {
                        parts.push((gp[(r, j)], &xp[j]));
                    }
                }
                if c.slack[r] {
                    parts.push((-1.0, sigma.as_ref().expect("slack allocated")));
                }
                asm.row(&parts, c.b[r], false);
            }
        }
    }

    for k in 0..=len {
        if let Some(s) = lay.slack[k] {
            let w = horizons
                .iter()
                .map(|h| h.spec.costs[k].slack_weight)
                .fold(0.0, f64::max);
            asm.q[s] += w;
            asm.row(&[(-1.0, &Expr::var(s))], 0.0, false);
        }
    }

    let num_vars = lay.num_vars;
    let (qp, constant) = asm.finish(num_vars)?;
    let index = IndexMap {
        n,
        m,
        horizon: lay.len,
        num_vars,
        x0: x0.clone(),
        inputs: lay.inputs,
        states: lay.states,
        slack: lay.slack,
        objective_offset: constant,
        single_horizon: horizons.len() == 1,
    };
    Ok(CmpcProblem { qp, index })
}

/// Builds the coupled nominal/contingency QP.
pub fn build_cmpc(spec: &LtvCmpcSpec) -> Result<CmpcProblem, BuildError> {
    let pc = spec.contingency_probability;
    if !(0.0..=1.0).contains(&pc) {
        return Err(BuildError::ProbabilityOutOfRange(pc));
    }
    if spec.nominal.len() != spec.contingency.len() {
        return Err(BuildError::HorizonMismatch {
            nominal: spec.nominal.len(),
            contingency: spec.contingency.len(),
        });
    }
    if spec.nominal.is_empty() {
        return Err(BuildError::EmptyHorizon);
    }
    assemble(
        &spec.x0,
        &[
            HorizonRef {
                spec: &spec.nominal,
                weight: 1.0 - pc,
            },
            HorizonRef {
                spec: &spec.contingency,
                weight: pc,
            },
        ],
        spec.previous_input.as_ref(),
    )
}

/// Single-horizon MPC: the `P^c = 0` case with a contingency horizon that
/// carries nothing, so it is simply left out of the decision vector.
pub fn build_deterministic_mpc(
    x0: &DVector<f64>,
    horizon: &HorizonSpec,
    previous_input: Option<&DVector<f64>>,
) -> Result<CmpcProblem, BuildError> {
    if horizon.is_empty() {
        return Err(BuildError::EmptyHorizon);
    }
    assemble(
        x0,
        &[HorizonRef {
            spec: horizon,
            weight: 1.0,
        }],
        previous_input,
    )
}

static DECODE_AUDITS: AtomicU64 = AtomicU64::new(0);
static DECODE_AUDIT_FAILURES: AtomicU64 = AtomicU64::new(0);

/// `(decodes audited, audits that found u^n_0 != u^c_0)` since process start.
pub fn shared_input_audit() -> (u64, u64) {
    (
        DECODE_AUDITS.load(Ordering::Relaxed),
        DECODE_AUDIT_FAILURES.load(Ordering::Relaxed),
    )
}

pub fn decode(solution: &QpSolution, index: &IndexMap) -> Result<TrajectoryPair, DecodeError> {
    if solution.status != QpStatus::Optimal {
        return Err(DecodeError::NotOptimal(solution.status));
    }
    let z = &solution.primal;
    if z.len() != index.num_vars {
        return Err(DecodeError::Dimension {
            expected: index.num_vars,
            got: z.len(),
        });
    }
    let seg = |at: usize, len: usize| z.rows(at, len).clone_owned();
    let (n, m, len) = (index.n, index.m, index.horizon);

    let horizon = |h: usize| {
        let mut xs = vec![index.x0.clone()];
        xs.extend(index.states[h].iter().map(|&at| seg(at, n)));
        let us: Vec<DVector<f64>> = index.inputs[h].iter().map(|&at| seg(at, m)).collect();
        (xs, us)
    };
    let (nominal_states, nominal_inputs) = horizon(0);
    let (contingency_states, contingency_inputs) = horizon(1);

    DECODE_AUDITS.fetch_add(1, Ordering::Relaxed);
    let same_slot = index.inputs[0][0] == index.inputs[1][0];
    let same_bits = nominal_inputs[0]
        .iter()
        .zip(contingency_inputs[0].iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_slot || !same_bits {
        DECODE_AUDIT_FAILURES.fetch_add(1, Ordering::Relaxed);
        return Err(DecodeError::SharedInputMismatch);
    }

    let slack = (0..=len)
        .map(|k| index.slack[k].map_or(0.0, |i| z[i]))
        .collect();
    Ok(TrajectoryPair {
        shared_input: nominal_inputs[0].clone(),
        nominal_states,
        contingency_states,
        nominal_inputs,
        contingency_inputs,
        slack,
        objective: solution.objective + index.objective_offset,
        single_horizon: index.single_horizon,
    })
}

/// Recomputes the contingency objective directly from decoded trajectories:
/// `P^n * J^n + P^c * J^c + sum_k W_k sigma_k`.
pub fn evaluate_objective(spec: &LtvCmpcSpec, pair: &TrajectoryPair) -> f64 {
    let pc = spec.contingency_probability;
    let jn = horizon_cost(
        &spec.nominal,
        &pair.nominal_states,
        &pair.nominal_inputs,
        spec.previous_input.as_ref(),
    );
    let jc = horizon_cost(
        &spec.contingency,
        &pair.contingency_states,
        &pair.contingency_inputs,
        spec.previous_input.as_ref(),
    );
    let slack: f64 = pair
        .slack
        .iter()
        .enumerate()
        .map(|(k, s)| {
            s * spec.nominal.costs[k]
                .slack_weight
                .max(spec.contingency.costs[k].slack_weight)
        })
        .sum();
    (1.0 - pc) * jn + pc * jc + slack
}

/// Quadratic stage-cost sum of one horizon (no slack term).
pub fn horizon_cost(
    spec: &HorizonSpec,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    previous_input: Option<&DVector<f64>>,
) -> f64 {
    let len = spec.len();
    let mut total = 0.0;
    for k in 0..=len {
        let c = &spec.costs[k];
        total += xs[k].dot(&(&c.q * &xs[k]));
        if k == len {
            continue;
        }
        total += us[k].dot(&(&c.r * &us[k]));
        if let Some(rr) = &c.r_rate {
            let prev = if k == 0 {
                previous_input
            } else {
                Some(&us[k - 1])
            };
            if let Some(prev) = prev {
                let v = &us[k] - prev;
                total += v.dot(&(rr * &v));
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_qp, SolverOptions};

    fn integrator_horizon(len: usize, target: Option<f64>) -> HorizonSpec {
        let one = || DMatrix::from_element(1, 1, 1.0);
        let models = (0..len)
            .map(|_| AffineStageModel::new(one(), one(), DVector::zeros(1)))
            .collect();
        let costs = (0..=len)
            .map(|_| StageCost::new(DMatrix::zeros(1, 1), one()))
            .collect();
        let mut constraints: Vec<_> = (0..=len)
            .map(|_| PolytopeStageConstraint::empty(1, 1))
            .collect();
        if let Some(t) = target {
            constraints[len] = PolytopeStageConstraint::new(
                DMatrix::from_element(1, 1, -1.0),
                DMatrix::zeros(1, 1),
                DVector::from_element(1, -t),
            );
        }
        HorizonSpec {
            models,
            costs,
            constraints,
        }
    }

    fn solve_pair(p: &CmpcProblem) -> TrajectoryPair {
        let sol = solve_qp(&p.qp, &SolverOptions::default());
        decode(&sol, &p.index).expect("optimal")
    }

    #[test]
    fn probability_range_is_checked() {
        let h = integrator_horizon(3, Some(1.0));
        let spec = LtvCmpcSpec {
            x0: DVector::zeros(1),
            nominal: h.clone(),
            contingency: h,
            contingency_probability: 1.3,
            previous_input: None,
        };
        assert_eq!(
            build_cmpc(&spec).unwrap_err(),
            BuildError::ProbabilityOutOfRange(1.3)
        );
    }

    #[test]
    fn horizon_lengths_must_match() {
        let spec = LtvCmpcSpec {
            x0: DVector::zeros(1),
            nominal: integrator_horizon(3, None),
            contingency: integrator_horizon(4, None),
            contingency_probability: 0.5,
            previous_input: None,
        };
        assert!(matches!(
            build_cmpc(&spec),
            Err(BuildError::HorizonMismatch { .. })
        ));
    }

    #[test]
    fn terminal_input_is_rejected() {
        let mut h = integrator_horizon(2, None);
        h.constraints[2] = PolytopeStageConstraint::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        );
        assert_eq!(
            build_deterministic_mpc(&DVector::zeros(1), &h, None).unwrap_err(),
            BuildError::TerminalInput { stage: 2 }
        );
    }

    #[test]
    fn symmetric_problem_gives_identical_horizons() {
        let h = integrator_horizon(6, Some(1.0));
        let spec = LtvCmpcSpec {
            x0: DVector::zeros(1),
            nominal: h.clone(),
            contingency: h,
            contingency_probability: 0.5,
            previous_input: None,
        };
        let pair = solve_pair(&build_cmpc(&spec).unwrap());
        for k in 0..6 {
            assert!((&pair.nominal_inputs[k] - &pair.contingency_inputs[k]).amax() < 1e-8);
            assert!((&pair.nominal_states[k + 1] - &pair.contingency_states[k + 1]).amax() < 1e-8);
        }
        assert!((pair.shared_input[0] - 1.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_terminal_constraint_amortizes() {
        let pair = solve_pair(
            &build_deterministic_mpc(&DVector::zeros(1), &integrator_horizon(10, Some(1.0)), None)
                .unwrap(),
        );
        for u in &pair.nominal_inputs {
            assert!((u[0] - 0.1).abs() < 1e-9);
        }
        assert!(pair.single_horizon);
    }

    #[test]
    fn deterministic_inactive_constraint_gives_zero_inputs() {
        let pair = solve_pair(
            &build_deterministic_mpc(&DVector::zeros(1), &integrator_horizon(10, Some(0.0)), None)
                .unwrap(),
        );
        assert!(pair.nominal_inputs.iter().all(|u| u[0].abs() < 1e-9));
    }

    #[test]
    fn deterministic_zero_state_cost_unconstrained_is_zero() {
        let pair = solve_pair(
            &build_deterministic_mpc(
                &DVector::from_element(1, 3.0),
                &integrator_horizon(5, None),
                None,
            )
            .unwrap(),
        );
        assert!(pair.nominal_inputs.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn decode_refuses_non_optimal() {
        let p =
            build_deterministic_mpc(&DVector::zeros(1), &integrator_horizon(3, Some(1.0)), None)
                .unwrap();
        let mut sol = solve_qp(&p.qp, &SolverOptions::default());
        sol.status = QpStatus::Infeasible;
        assert_eq!(
            decode(&sol, &p.index).unwrap_err(),
            DecodeError::NotOptimal(QpStatus::Infeasible)
        );
    }

    #[test]
    fn rate_cost_references_previous_input() {
        // single input, zero R, rate weight 1, previous input 0.5, no constraints:
        // every input should stay at 0.5
        let mut h = integrator_horizon(4, None);
        for c in &mut h.costs {
            *c = StageCost::zero(1, 1).with_rate(DMatrix::from_element(1, 1, 1.0));
        }
        let prev = DVector::from_element(1, 0.5);
        let p = build_deterministic_mpc(&DVector::zeros(1), &h, Some(&prev)).unwrap();
        let pair = solve_pair(&p);
        assert!(pair
            .nominal_inputs
            .iter()
            .all(|u| (u[0] - 0.5).abs() < 1e-9));
    }

    #[test]
    fn slack_relaxes_infeasible_row() {
        // y_1 <= -1 impossible with |u| <= 0.5 from y_0 = 0; slack must absorb 0.5
        let mut h = integrator_horizon(1, None);
        h.constraints[0] = PolytopeStageConstraint::new(
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![0.5, 0.5]),
        );
        h.constraints[1] = PolytopeStageConstraint::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, -1.0),
        )
        .with_slack(vec![true]);
        h.costs[1].slack_weight = 100.0;
        let p = build_deterministic_mpc(&DVector::zeros(1), &h, None).unwrap();
        let pair = solve_pair(&p);
        assert!((pair.slack[1] - 0.5).abs() < 1e-8);
        assert!((pair.shared_input[0] + 0.5).abs() < 1e-8);
    }
}
