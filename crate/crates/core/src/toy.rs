//! Point-mass hurdle problem.
//!
//! A mass moves one unit right per step (`x_{k+1} = x_k + 1`) and is steered
//! vertically (`y_{k+1} = y_k + u_k`). A hurdle at `x = 10` starts at height
//! `-1` and may pop up at any step, rising at a fixed speed to `+1`. The mass
//! must clear the hurdle on arrival while paying `u^2` per step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{
    build_cmpc, build_deterministic_mpc, decode, AffineStageModel, BuildError, DecodeError,
    HorizonSpec, LtvCmpcSpec, PolytopeStageConstraint, StageCost, TrajectoryPair,
};
use crate::qp::{solve_qp, QpStatus, SolverOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToyError {
    #[error("step {step} is past the obstacle at step {max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("horizon must have at least {min} stage(s), got {got}")]
    HorizonTooShort { min: usize, got: usize },
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("pop step {step} outside 1..={max}")]
    PopStepOutOfRange { step: usize, max: usize },
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    /// Obstacle station; also the number of control steps.
    pub horizon: usize,
    pub initial_height: f64,
    pub max_height: f64,
    /// Rise per step once popped.
    pub rise_speed: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            horizon: 10,
            initial_height: -1.0,
            max_height: 1.0,
            rise_speed: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyState {
    pub x: f64,
    pub y: f64,
}

impl ToyState {
    pub const ORIGIN: ToyState = ToyState { x: 0.0, y: 0.0 };
}

pub fn step_toy(state: ToyState, u: f64) -> ToyState {
    ToyState {
        x: state.x + 1.0,
        y: state.y + u,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyObstacle {
    pub position: usize,
    pub height: f64,
    pub max_height: f64,
    pub rise_speed: f64,
    pub trigger_step: Option<usize>,
}

impl ToyObstacle {
    pub fn new(params: &ToyParams, trigger_step: Option<usize>) -> Self {
        Self {
            position: params.horizon,
            height: params.initial_height,
            max_height: params.max_height,
            rise_speed: params.rise_speed,
            trigger_step,
        }
    }

    pub fn triggered(&self) -> bool {
        self.trigger_step.is_some()
    }

    /// Obstacle state at `step` given its trigger.
    pub fn at_step(&self, params: &ToyParams, step: usize) -> ToyObstacle {
        let risen = match self.trigger_step {
            Some(p) if step > p => (step - p) as f64 * params.rise_speed,
            _ => 0.0,
        };
        ToyObstacle {
            height: (params.initial_height + risen).min(params.max_height),
            ..*self
        }
    }
}

/// Worst-case obstacle height when the mass reaches it, seen from step `k`.
pub fn obstacle_forecast(obstacle: &ToyObstacle, k: usize) -> Result<f64, ToyError> {
    if k > obstacle.position {
        return Err(ToyError::StepOutOfRange {
            step: k,
            max: obstacle.position,
        });
    }
    let remaining = (obstacle.position - k) as f64;
    Ok((obstacle.height + remaining * obstacle.rise_speed).min(obstacle.max_height))
}

pub fn rmpc_explicit_u0(target: f64, horizon: usize) -> Result<f64, ToyError> {
    if horizon == 0 {
        return Err(ToyError::HorizonTooShort { min: 1, got: 0 });
    }
    Ok(if target <= 0.0 {
        0.0
    } else {
        target / horizon as f64
    })
}

pub fn cmpc_explicit_u0(target: f64, horizon: usize, pc: f64) -> Result<f64, ToyError> {
    if horizon < 2 {
        return Err(ToyError::HorizonTooShort {
            min: 2,
            got: horizon,
        });
    }
    if !(0.0..=1.0).contains(&pc) {
        return Err(ToyError::ProbabilityOutOfRange(pc));
    }
    if target <= 0.0 {
        return Ok(0.0);
    }
    Ok(target * pc / (pc + horizon as f64 - 1.0))
}

fn integrator_horizon(horizon: usize, terminal: Option<f64>) -> HorizonSpec {
    let one = || DMatrix::from_element(1, 1, 1.0);
    let models = (0..horizon)
        .map(|_| AffineStageModel::new(one(), one(), DVector::zeros(1)))
        .collect();
    let mut costs: Vec<StageCost> = (0..horizon)
        .map(|_| StageCost::new(DMatrix::zeros(1, 1), one()))
        .collect();
    costs.push(StageCost::zero(1, 1));
    let mut constraints: Vec<_> = (0..=horizon)
        .map(|_| PolytopeStageConstraint::empty(1, 1))
        .collect();
    if let Some(t) = terminal {
        constraints[horizon] = PolytopeStageConstraint::new(
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

/// Contingency spec over `horizon` stages from height `y`: the contingency
/// horizon must reach `contingency_target`, the nominal horizon
/// `nominal_target` if any.
pub fn toy_cmpc_spec(
    y: f64,
    horizon: usize,
    nominal_target: Option<f64>,
    contingency_target: f64,
    pc: f64,
) -> LtvCmpcSpec {
    LtvCmpcSpec {
        x0: DVector::from_element(1, y),
        nominal: integrator_horizon(horizon, nominal_target),
        contingency: integrator_horizon(horizon, Some(contingency_target)),
        contingency_probability: pc,
        previous_input: None,
    }
}

fn solve(
    problem: crate::builder::CmpcProblem,
) -> Result<Result<TrajectoryPair, QpStatus>, ToyError> {
    let sol = solve_qp(&problem.qp, &SolverOptions::default());
    if !sol.is_optimal() {
        return Ok(Err(sol.status));
    }
    Ok(Ok(decode(&sol, &problem.index)?))
}

/// QP-solved first input of the contingency problem from `y = 0`.
pub fn cmpc_qp_u0(target: f64, horizon: usize, pc: f64) -> Result<f64, ToyError> {
    let spec = toy_cmpc_spec(0.0, horizon, None, target, pc);
    match solve(build_cmpc(&spec)?)? {
        Ok(pair) => Ok(pair.shared_input[0]),
        Err(status) => Err(ToyError::Decode(DecodeError::NotOptimal(status))),
    }
}

/// QP-solved first input of the single-horizon worst-case problem from `y = 0`.
pub fn rmpc_qp_u0(target: f64, horizon: usize) -> Result<f64, ToyError> {
    match solve(build_deterministic_mpc(
        &DVector::zeros(1),
        &integrator_horizon(horizon, Some(target)),
        None,
    )?)? {
        Ok(pair) => Ok(pair.shared_input[0]),
        Err(status) => Err(ToyError::Decode(DecodeError::NotOptimal(status))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyController {
    /// Single horizon constrained by the worst-case forecast.
    Rmpc,
    Cmpc(f64),
    /// Closed-form input law, no QP.
    ExplicitOracle(f64),
}

impl ToyController {
    pub fn label(&self) -> String {
        match self {
            ToyController::Rmpc => "rmpc".into(),
            ToyController::Cmpc(pc) => format!("cmpc({pc})"),
            ToyController::ExplicitOracle(pc) => format!("oracle({pc})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyStepRecord {
    pub step: usize,
    pub state: ToyState,
    pub u0: f64,
    pub cost_step: f64,
    pub cost_cum: f64,
    pub pop_observed: bool,
    /// Arrival height the contingency horizon was constrained to.
    pub contingency_target: f64,
    pub nominal_inputs: Vec<f64>,
    pub contingency_inputs: Vec<f64>,
    pub nominal_states: Vec<f64>,
    pub contingency_states: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrace {
    pub controller: ToyController,
    pub pop_step: Option<usize>,
    /// One row per step `0..=horizon`; the arrival row applies no input.
    pub steps: Vec<ToyStepRecord>,
    pub arrival_height: f64,
    /// Step and status of a failed solve; the trace stops there.
    pub failure: Option<(usize, QpStatus)>,
}

impl ToyTrace {
    pub fn total_cost(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cost_cum)
    }

    pub fn final_state(&self) -> ToyState {
        self.steps.last().map_or(ToyState::ORIGIN, |s| s.state)
    }

    pub fn cleared(&self) -> bool {
        self.failure.is_none() && self.final_state().y >= self.arrival_height
    }

    pub fn inputs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.u0).collect()
    }
}

struct Decision {
    u0: f64,
    pair: Option<TrajectoryPair>,
}

fn decide(
    controller: ToyController,
    y: f64,
    horizon: usize,
    nominal_target: Option<f64>,
    contingency_target: f64,
) -> Result<Result<Decision, QpStatus>, ToyError> {
    let pair = match controller {
        ToyController::Rmpc => {
            let h = integrator_horizon(horizon, Some(contingency_target));
            solve(build_deterministic_mpc(
                &DVector::from_element(1, y),
                &h,
                None,
            )?)?
        }
        ToyController::Cmpc(pc) => solve(build_cmpc(&toy_cmpc_spec(
            y,
            horizon,
            nominal_target,
            contingency_target,
            pc,
        ))?)?,
        ToyController::ExplicitOracle(pc) => {
            let gap = contingency_target - y;
            let u0 = if nominal_target.is_some() || horizon == 1 {
                rmpc_explicit_u0(gap, horizon)?
            } else {
                cmpc_explicit_u0(gap, horizon, pc)?
            };
            return Ok(Ok(Decision { u0, pair: None }));
        }
    };
    Ok(pair.map(|p| Decision {
        u0: p.shared_input[0],
        pair: Some(p),
    }))
}

/// Receding-horizon simulation with the terminal constraint fixed at the
/// obstacle station. A pop at step `p` is observed at step `p + 1`.
pub fn run_closed_loop(
    params: &ToyParams,
    controller: ToyController,
    pop_step: Option<usize>,
) -> Result<ToyTrace, ToyError> {
    let total = params.horizon;
    if let Some(p) = pop_step {
        if p == 0 || p > total {
            return Err(ToyError::PopStepOutOfRange {
                step: p,
                max: total,
            });
        }
    }
    if let ToyController::Cmpc(pc) | ToyController::ExplicitOracle(pc) = controller {
        if !(0.0..=1.0).contains(&pc) {
            return Err(ToyError::ProbabilityOutOfRange(pc));
        }
    }
    let truth = ToyObstacle::new(params, pop_step);
    let arrival_height = truth.at_step(params, total).height;
    let quiet = ToyObstacle::new(params, None);

    let mut state = ToyState::ORIGIN;
    let mut cost_cum = 0.0;
    let mut steps = Vec::with_capacity(total + 1);
    let mut failure = None;

    for k in 0..total {
        let observed = matches!(pop_step, Some(p) if k > p);
        let seen = if observed {
            truth.at_step(params, k)
        } else {
            quiet
        };
        let target = obstacle_forecast(&seen, k)?;
        let nominal_target = observed.then_some(target);
        let decision = match decide(controller, state.y, total - k, nominal_target, target)? {
            Ok(d) => d,
            Err(status) => {
                failure = Some((k, status));
                break;
            }
        };
        let u0 = decision.u0;
        let cost_step = u0 * u0;
        cost_cum += cost_step;
        let (ni, ci, ns, cs) = match &decision.pair {
            Some(p) => (
                p.nominal_inputs.iter().map(|u| u[0]).collect(),
                p.contingency_inputs.iter().map(|u| u[0]).collect(),
                p.nominal_states.iter().map(|x| x[0]).collect(),
                p.contingency_states.iter().map(|x| x[0]).collect(),
            ),
            None => (vec![u0], vec![u0], vec![state.y], vec![state.y]),
        };
        steps.push(ToyStepRecord {
            step: k,
            state,
            u0,
            cost_step,
            cost_cum,
            pop_observed: observed,
            contingency_target: target,
            nominal_inputs: ni,
            contingency_inputs: ci,
            nominal_states: ns,
            contingency_states: cs,
        });
        state = step_toy(state, u0);
    }
    if failure.is_none() {
        steps.push(ToyStepRecord {
            step: total,
            state,
            u0: 0.0,
            cost_step: 0.0,
            cost_cum,
            pop_observed: matches!(pop_step, Some(p) if total > p),
            contingency_target: arrival_height,
            nominal_inputs: vec![],
            contingency_inputs: vec![],
            nominal_states: vec![state.y],
            contingency_states: vec![state.y],
        });
    }
    Ok(ToyTrace {
        controller,
        pop_step,
        steps,
        arrival_height,
        failure,
    })
}

/// Closed-loop cost of every deterministic scenario: pop at step `1..=N`
/// (index `p - 1`) or never.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioCosts {
    pub pop: Vec<f64>,
    pub never: f64,
}

impl ScenarioCosts {
    /// Exact expectation for a per-step pop probability `p`.
    pub fn expected(&self, p: f64) -> Result<f64, ToyError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ToyError::ProbabilityOutOfRange(p));
        }
        let mut survive = 1.0;
        let mut total = 0.0;
        for &c in &self.pop {
            total += survive * p * c;
            survive *= 1.0 - p;
        }
        Ok(total + survive * self.never)
    }
}

pub fn scenario_costs(
    params: &ToyParams,
    controller: ToyController,
) -> Result<ScenarioCosts, ToyError> {
    let mut pop = Vec::with_capacity(params.horizon);
    for p in 1..=params.horizon {
        pop.push(run_closed_loop(params, controller, Some(p))?.total_cost());
    }
    let never = run_closed_loop(params, controller, None)?.total_cost();
    Ok(ScenarioCosts { pop, never })
}

pub fn expected_cost(
    params: &ToyParams,
    controller: ToyController,
    p: f64,
) -> Result<f64, ToyError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ToyError::ProbabilityOutOfRange(p));
    }
    scenario_costs(params, controller)?.expected(p)
}

/// Smallest per-step pop probability at which `rmpc` becomes cheaper in
/// expectation than `cmpc(0)`, by bisection to `tolerance`. `None` if the
/// sign never changes on `[0, 1]`.
pub fn crossover_probability(params: &ToyParams, tolerance: f64) -> Result<Option<f64>, ToyError> {
    let rmpc = scenario_costs(params, ToyController::Rmpc)?;
    let cmpc = scenario_costs(params, ToyController::Cmpc(0.0))?;
    let gap = |p: f64| -> Result<f64, ToyError> { Ok(rmpc.expected(p)? - cmpc.expected(p)?) };
    let (mut lo, mut hi) = (0.0, 1.0);
    if gap(lo)? < 0.0 {
        return Ok(Some(0.0));
    }
    if gap(hi)? >= 0.0 {
        return Ok(None);
    }
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySweepRow {
    pub pc: f64,
    pub u0_first: f64,
    pub total_cost: f64,
    pub y_final: f64,
    /// Largest |y| before the pop is observed.
    pub pre_pop_deviation: f64,
    pub cleared: bool,
}

pub fn sweep_pc(
    params: &ToyParams,
    pcs: &[f64],
    pop_step: Option<usize>,
) -> Result<Vec<ToySweepRow>, ToyError> {
    pcs.iter()
        .map(|&pc| {
            let trace = run_closed_loop(params, ToyController::Cmpc(pc), pop_step)?;
            let pre_pop_deviation = trace
                .steps
                .iter()
                .filter(|s| !s.pop_observed)
                .map(|s| s.state.y.abs())
                .fold(0.0, f64::max);
            Ok(ToySweepRow {
                pc,
                u0_first: trace.steps.first().map_or(0.0, |s| s.u0),
                total_cost: trace.total_cost(),
                y_final: trace.final_state().y,
                pre_pop_deviation,
                cleared: trace.cleared(),
            })
        })
        .collect()
}

/// Evenly spaced grid `0, 1/(n-1), ..., 1`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}
