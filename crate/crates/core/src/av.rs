//! Lateral contingency MPC for a vehicle passing a parked car whose door may
//! open into the lane.
//!
//! Both horizons share the first steering command. Before the door is seen
//! opening only the contingency horizon carries the door's worst-case
//! footprint; once it is observed, the nominal horizon carries it as well.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{
    build_cmpc, build_deterministic_mpc, decode, horizon_cost, BuildError, CmpcProblem,
    DecodeError, Horizon, HorizonSpec, LtvCmpcSpec, PolytopeStageConstraint, StageCost,
    TrajectoryPair,
};
use crate::qp::{kkt_residuals, solve_qp_warm, QpStatus, ResidualReport, SolverOptions, WarmStart};
use crate::vehicle::{
    build_ltv_model, plant_step, saturation_tan, HoldKind, HorizonSchedule, OperatingPoint,
    PlantInputs, VehicleError, VehicleParams, VehicleState,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AvError {
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("invalid setting {name}: {reason}")]
    Invalid { name: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvWeights {
    /// Diagonal of Q over `[Uy, r, dpsi, e]`.
    pub q: [f64; 4],
    /// Weight on steering slew `u_k - u_{k-1}`.
    pub r: f64,
    /// Linear penalty on the stage slack.
    pub w: f64,
}

impl Default for AvWeights {
    fn default() -> Self {
        Self {
            q: [0.0, 0.0, 1.0, 1.0],
            r: 0.01,
            w: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoorScenario {
    /// Station of the door's center, m.
    pub s_door: f64,
    /// Longitudinal extent of the door footprint, m.
    pub length: f64,
    /// Maximum intrusion into the lane, m.
    pub width: f64,
    /// m/s
    pub opening_speed: f64,
    /// Lane edge on the parked-car side (lateral error, m).
    pub e_right: f64,
    /// Lane edge on the far side.
    pub e_left: f64,
    /// m/s
    pub approach_speed: f64,
    /// Initial station, m.
    pub start_s: f64,
}

impl Default for DoorScenario {
    fn default() -> Self {
        Self {
            s_door: 24.0,
            length: 5.0,
            width: 1.0,
            opening_speed: 2.0,
            e_right: -0.7,
            e_left: 2.0,
            approach_speed: 12.0,
            start_s: 0.0,
        }
    }
}

impl DoorScenario {
    /// Door intrusion at time `t` for a door that starts opening at `start`.
    pub fn intrusion(&self, t: f64, start: f64) -> f64 {
        self.width.min(self.opening_speed * (t - start).max(0.0))
    }

    pub fn footprint(&self) -> (f64, f64) {
        (
            self.s_door - 0.5 * self.length,
            self.s_door + 0.5 * self.length,
        )
    }

    pub fn in_footprint(&self, s: f64) -> bool {
        let (lo, hi) = self.footprint();
        (lo..=hi).contains(&s)
    }
}

/// What the controller knows about the door.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DoorView {
    /// Not seen opening; the worst case assumes it starts at `assumed_start`.
    Quiet {
        assumed_start: f64,
    },
    Observed {
        trigger: f64,
    },
}

/// Longitudinal quantities at the horizon nodes `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalPlan {
    /// Absolute time, s.
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub ux: Vec<f64>,
    pub fxf: Vec<f64>,
    pub fxr: Vec<f64>,
}

impl LongitudinalPlan {
    /// Constant speed, zero longitudinal force, stations integrated with the
    /// lateral operating trajectory.
    pub fn constant_speed(
        t0: f64,
        s0: f64,
        ux: f64,
        schedule: &HorizonSchedule,
        ops: &[[f64; 4]],
    ) -> Self {
        let times = schedule.node_times();
        let mut s = vec![s0];
        for k in 0..schedule.len() {
            let [uy, _, dpsi, _] = ops.get(k).copied().unwrap_or_default();
            s.push(s[k] + (ux - uy * dpsi) * schedule.dt(k));
        }
        let n = times.len();
        Self {
            t: times.iter().map(|tau| t0 + tau).collect(),
            s,
            ux: vec![ux; n],
            fxf: vec![0.0; n],
            fxr: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Lower bound on `e` at a point inside stage `node - 1`, interpolated as
/// `(1 - theta) e_{node-1} + theta e_node >= e_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeBound {
    pub node: usize,
    pub theta: f64,
    pub e_min: f64,
}

/// `(e_min, e_max)` per node `0..=N` for each horizon, plus bounds at the
/// footprint edges when they fall between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralBounds {
    pub nominal: Vec<(f64, f64)>,
    pub contingency: Vec<(f64, f64)>,
    pub nominal_edges: Vec<EdgeBound>,
    pub contingency_edges: Vec<EdgeBound>,
}

/// Door-aware lateral bounds. A node inside the door footprint carries the
/// worst-case intrusion at the node's time. Where a footprint edge falls
/// inside a stage, the interpolated lateral error at the crossing carries the
/// intrusion at the crossing time, so the bound does not jump as nodes slide
/// past the edge. The moment the door reaches full width gets the same
/// treatment while the vehicle is inside the footprint. `margin` widens the door bound only.
pub fn encode_door_bounds(
    scenario: &DoorScenario,
    view: DoorView,
    plan: &LongitudinalPlan,
    margin: f64,
) -> LateralBounds {
    let lane = (scenario.e_right, scenario.e_left);
    let start = match view {
        DoorView::Quiet { assumed_start } => assumed_start,
        DoorView::Observed { trigger } => trigger,
    };
    let door: Vec<Option<f64>> = (0..plan.len())
        .map(|k| {
            scenario
                .in_footprint(plan.s[k])
                .then(|| scenario.e_right + scenario.intrusion(plan.t[k], start) + margin)
        })
        .collect();
    let with_door = |d: &Option<f64>| match d {
        Some(e_min) => (lane.0.max(*e_min), lane.1),
        None => lane,
    };
    let contingency: Vec<_> = door.iter().map(with_door).collect();
    let (lo, hi) = scenario.footprint();
    let full_open = start + scenario.width / scenario.opening_speed;
    let mut edges = Vec::new();
    for k in 1..plan.len() {
        let (s0, s1) = (plan.s[k - 1], plan.s[k]);
        let (t0, t1) = (plan.t[k - 1], plan.t[k]);
        let mut thetas: Vec<f64> = [lo, hi]
            .into_iter()
            .filter(|&e| s0 < e && e < s1)
            .map(|e| (e - s0) / (s1 - s0))
            .collect();
        if t0 < full_open && full_open < t1 {
            let theta = (full_open - t0) / (t1 - t0);
            if scenario.in_footprint(s0 + theta * (s1 - s0)) {
                thetas.push(theta);
            }
        }
        for theta in thetas {
            let t = t0 + theta * (t1 - t0);
            let e_min = scenario.e_right + scenario.intrusion(t, start) + margin;
            edges.push(EdgeBound {
                node: k,
                theta,
                e_min,
            });
        }
    }
    match view {
        DoorView::Quiet { .. } => LateralBounds {
            nominal: vec![lane; plan.len()],
            contingency,
            nominal_edges: Vec::new(),
            contingency_edges: edges,
        },
        DoorView::Observed { .. } => LateralBounds {
            nominal: contingency.clone(),
            contingency,
            nominal_edges: edges.clone(),
            contingency_edges: edges,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AvMode {
    /// Two horizons sharing the first command.
    Contingency,
    /// One horizon carrying the contingency bounds.
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvControllerConfig {
    pub mode: AvMode,
    pub pc: f64,
    pub weights: AvWeights,
    pub params: VehicleParams,
    pub schedule: HorizonSchedule,
    /// s
    pub control_period: f64,
    /// s; the door state is seen this late.
    pub observation_delay: f64,
    /// Smallest weight either horizon receives, so neither horizon's inputs
    /// become free variables at the ends of the `P^c` range.
    pub weight_floor: f64,
    /// Added to the door bound, m.
    pub door_margin: f64,
    /// Planned front and rear slip angles at nodes `k >= 1` are held within
    /// this fraction of the tire's full-sliding slip, keeping the plan inside the region where
    /// re-linearization stays informative. The rows share the stage slack
    /// so a plant already outside the envelope stays feasible. `None` drops
    /// the rows.
    pub slip_envelope: Option<f64>,
    pub warm_start: bool,
    pub solver: SolverOptions,
}

impl Default for AvControllerConfig {
    fn default() -> Self {
        Self {
            mode: AvMode::Contingency,
            pc: 0.25,
            weights: AvWeights::default(),
            params: VehicleParams::default(),
            schedule: HorizonSchedule::default(),
            control_period: 0.02,
            observation_delay: 0.02,
            weight_floor: 1e-6,
            door_margin: 0.05,
            slip_envelope: Some(0.5),
            warm_start: false,
            solver: SolverOptions::default(),
        }
    }
}

impl AvControllerConfig {
    pub fn validate(&self) -> Result<(), AvError> {
        let invalid = |name, reason: &str| {
            Err(AvError::Invalid {
                name,
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.pc) {
            return invalid("pc", "must lie in [0, 1]");
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            return invalid(
                "solver",
                "needs a positive tolerance and at least one iteration",
            );
        }
        if !(0.0..0.5).contains(&self.weight_floor) {
            return invalid("weight_floor", "must lie in [0, 0.5)");
        }
        if !(self.control_period > 0.0) {
            return invalid("control_period", "must be positive");
        }
        if !(self.observation_delay >= 0.0) {
            return invalid("observation_delay", "must be nonnegative");
        }
        if self.schedule.is_empty() || self.schedule.stages.iter().any(|s| !(s.0 > 0.0)) {
            return invalid(
                "schedule",
                "needs at least one stage, all durations positive",
            );
        }
        if let Some(f) = self.slip_envelope {
            if !(f > 0.0 && f.is_finite()) {
                return invalid("slip_envelope", "must be positive");
            }
        }
        if self.weights.w < 0.0 || self.weights.r < 0.0 || self.weights.q.iter().any(|&q| q < 0.0) {
            return invalid("weights", "must be nonnegative");
        }
        self.params.validate()?;
        Ok(())
    }

    /// Front and rear slip limits, rad.
    pub fn slip_limits(&self) -> Option<(f64, f64)> {
        let p = &self.params;
        self.slip_envelope.map(|f| {
            (
                f * saturation_tan(p.cornering_front, p.friction, p.fz_front()).atan(),
                f * saturation_tan(p.cornering_rear, p.friction, p.fz_rear()).atan(),
            )
        })
    }

    /// Slew limit between `u_{k-1}` and `u_k`. The change from `u_{k-1}` to
    /// `u_k` is spread over stage `k - 1`, so the per-period limit scales
    /// with that stage's length.
    pub fn slew_limit(&self, k: usize) -> f64 {
        let v = self.params.max_steer_slew;
        if k == 0 {
            return v;
        }
        let (dt, hold) = self.schedule.stages[k - 1];
        match hold {
            HoldKind::Zero => v,
            HoldKind::First => v * (dt / self.control_period).max(1.0),
        }
    }
}

/// Stage costs and constraints of one lateral horizon.
fn horizon_spec(
    cfg: &AvControllerConfig,
    ops: &[OperatingPoint],
    bounds: &[(f64, f64)],
    edges: &[EdgeBound],
) -> Result<HorizonSpec, AvError> {
    let n = cfg.schedule.len();
    let models = build_ltv_model(ops, &cfg.schedule, &cfg.params)?;
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.weights.q));
    let r_rate = DMatrix::from_element(1, 1, cfg.weights.r);
    let costs = (0..=n)
        .map(|k| {
            let c = StageCost::new(q.clone(), DMatrix::zeros(1, 1));
            let c = if k < n {
                c.with_rate(r_rate.clone())
            } else {
                c
            };
            if k > 0 {
                c.with_slack_weight(cfg.weights.w)
            } else {
                c
            }
        })
        .collect();
    let e_row = |sign: f64| DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.0, sign]);
    let constraints = (0..=n)
        .map(|k| {
            let mut c = PolytopeStageConstraint::empty(4, 1);
            if k < n {
                let dmax = cfg.params.max_steer;
                let vmax = cfg.slew_limit(k);
                let inputs = PolytopeStageConstraint::new(
                    DMatrix::zeros(4, 4),
                    DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]),
                    DVector::from_vec(vec![dmax, dmax, vmax, vmax]),
                )
                .with_prev(DMatrix::from_column_slice(
                    4,
                    1,
                    &[0.0, 0.0, -1.0, 1.0],
                ));
                c = c.stack(&inputs);
            }
            if k > 0 {
                let (e_min, e_max) = bounds[k];
                let mut g = DMatrix::zeros(2, 4);
                g.row_mut(0).copy_from(&e_row(1.0));
                g.row_mut(1).copy_from(&e_row(-1.0));
                let lateral = PolytopeStageConstraint::new(
                    g,
                    DMatrix::zeros(2, 1),
                    DVector::from_vec(vec![e_max, -e_min]),
                )
                .with_slack(vec![true, true]);
                c = c.stack(&lateral);
                for edge in edges.iter().filter(|b| b.node == k) {
                    let row = PolytopeStageConstraint::new(
                        e_row(-edge.theta),
                        DMatrix::zeros(1, 1),
                        DVector::from_element(1, -edge.e_min),
                    )
                    .with_prev_state(e_row(edge.theta - 1.0))
                    .with_slack(vec![true]);
                    c = c.stack(&row);
                }
                if let Some((af_max, ar_max)) = cfg.slip_limits() {
                    // small-angle slip: (Uy + a r) / Ux - delta and (Uy - b r) / Ux
                    let ux = ops[k.min(n - 1)].state.ux;
                    let (pa, pb) = (cfg.params.a, cfg.params.b);
                    let rear = DMatrix::from_row_slice(1, 4, &[1.0 / ux, -pb / ux, 0.0, 0.0]);
                    let mut g = DMatrix::zeros(2, 4);
                    g.row_mut(0).copy_from(&rear);
                    g.row_mut(1).copy_from(&-&rear);
                    let rows = PolytopeStageConstraint::new(
                        g,
                        DMatrix::zeros(2, 1),
                        DVector::from_vec(vec![ar_max; 2]),
                    )
                    .with_slack(vec![true, true]);
                    c = c.stack(&rows);
                    if k < n {
                        let front = DMatrix::from_row_slice(1, 4, &[1.0 / ux, pa / ux, 0.0, 0.0]);
                        let mut g = DMatrix::zeros(2, 4);
                        g.row_mut(0).copy_from(&front);
                        g.row_mut(1).copy_from(&-&front);
                        let rows = PolytopeStageConstraint::new(
                            g,
                            DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]),
                            DVector::from_vec(vec![af_max; 2]),
                        )
                        .with_slack(vec![true, true]);
                        c = c.stack(&rows);
                    }
                }
            }
            c
        })
        .collect();
    Ok(HorizonSpec {
        models,
        costs,
        constraints,
    })
}

/// The contingency QP for one control step.
#[allow(clippy::too_many_arguments)]
pub fn build_av_cmpc(
    cfg: &AvControllerConfig,
    measured: &VehicleState,
    nominal_ops: &[OperatingPoint],
    contingency_ops: &[OperatingPoint],
    bounds: &LateralBounds,
    previous_delta: f64,
) -> Result<(LtvCmpcSpec, CmpcProblem), AvError> {
    let floor = cfg.weight_floor;
    let spec = LtvCmpcSpec {
        x0: DVector::from_row_slice(&measured.lateral()),
        nominal: horizon_spec(cfg, nominal_ops, &bounds.nominal, &bounds.nominal_edges)?,
        contingency: horizon_spec(
            cfg,
            contingency_ops,
            &bounds.contingency,
            &bounds.contingency_edges,
        )?,
        contingency_probability: cfg.pc.clamp(floor, 1.0 - floor),
        previous_input: Some(DVector::from_element(1, previous_delta)),
    };
    let problem = build_cmpc(&spec)?;
    Ok((spec, problem))
}

/// Single horizon constrained by the contingency bounds.
pub fn build_av_robust(
    cfg: &AvControllerConfig,
    measured: &VehicleState,
    ops: &[OperatingPoint],
    bounds: &LateralBounds,
    previous_delta: f64,
) -> Result<(HorizonSpec, CmpcProblem), AvError> {
    let h = horizon_spec(cfg, ops, &bounds.contingency, &bounds.contingency_edges)?;
    let prev = DVector::from_element(1, previous_delta);
    let problem = build_deterministic_mpc(
        &DVector::from_row_slice(&measured.lateral()),
        &h,
        Some(&prev),
    )?;
    Ok((h, problem))
}

/// A decoded horizon, kept as the next step's operating trajectory.
#[derive(Debug, Clone, PartialEq)]
struct HorizonPlan {
    times: Vec<f64>,
    states: Vec<[f64; 4]>,
    inputs: Vec<f64>,
}

fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let last = values.len() - 1;
    if t <= times[0] {
        return values[0];
    }
    if t >= times[last] {
        return values[last];
    }
    let j = times.partition_point(|&x| x <= t) - 1;
    let w = (t - times[j]) / (times[j + 1] - times[j]);
    values[j] + w * (values[j + 1] - values[j])
}

impl HorizonPlan {
    fn from_pair(times: Vec<f64>, pair: &TrajectoryPair, which: Horizon) -> Self {
        let (xs, us) = match which {
            Horizon::Nominal => (&pair.nominal_states, &pair.nominal_inputs),
            Horizon::Contingency => (&pair.contingency_states, &pair.contingency_inputs),
        };
        Self {
            times,
            states: xs.iter().map(|x| [x[0], x[1], x[2], x[3]]).collect(),
            inputs: us.iter().map(|u| u[0]).collect(),
        }
    }

    fn state_at(&self, t: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            let col: Vec<f64> = self.states.iter().map(|x| x[i]).collect();
            *o = interp(&self.times, &col, t);
        }
        out
    }

    fn input_at(&self, t: f64) -> f64 {
        interp(&self.times[..self.inputs.len()], &self.inputs, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: Option<ResidualReport>,
    pub sigma_max: f64,
    pub objective: f64,
    pub j_nom: f64,
    pub j_con: f64,
    /// The solve failed and the previous command was held.
    pub flagged: bool,
    pub solve_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub delta: f64,
    /// `None` on a flagged step.
    pub pair: Option<TrajectoryPair>,
    pub diagnostics: StepDiagnostics,
}

/// `(J_nom, J_con)` of a decoded plan.
type HorizonCosts = Box<dyn Fn(&TrajectoryPair) -> (f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct AvController {
    cfg: AvControllerConfig,
    previous_delta: f64,
    plans: Option<[HorizonPlan; 2]>,
    warm: Option<WarmStart>,
}

impl AvController {
    pub fn new(cfg: AvControllerConfig) -> Result<Self, AvError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            previous_delta: 0.0,
            plans: None,
            warm: None,
        })
    }

    pub fn config(&self) -> &AvControllerConfig {
        &self.cfg
    }

    pub fn previous_delta(&self) -> f64 {
        self.previous_delta
    }

    fn operating_points(
        &self,
        which: usize,
        measured: &VehicleState,
        plan: &LongitudinalPlan,
    ) -> Vec<OperatingPoint> {
        let n = self.cfg.schedule.len();
        (0..n)
            .map(|k| {
                let (lat, delta) = match (&self.plans, k) {
                    (_, 0) => {
                        let d = self
                            .plans
                            .as_ref()
                            .map_or(0.0, |p| p[which].input_at(plan.t[0]));
                        (measured.lateral(), d)
                    }
                    (Some(p), _) => (p[which].state_at(plan.t[k]), p[which].input_at(plan.t[k])),
                    (None, _) => ([0.0; 4], 0.0),
                };
                OperatingPoint {
                    state: VehicleState {
                        s: plan.s[k],
                        ux: plan.ux[k],
                        ..measured.with_lateral(&lat)
                    },
                    delta,
                    kappa: 0.0,
                    fxf: plan.fxf[k],
                    fxr: plan.fxr[k],
                }
            })
            .collect()
    }

    fn lateral_guess(&self, which: usize, t0: f64) -> Vec<[f64; 4]> {
        let times = self.cfg.schedule.node_times();
        times
            .iter()
            .map(|tau| {
                self.plans
                    .as_ref()
                    .map_or([0.0; 4], |p| p[which].state_at(t0 + tau))
            })
            .collect()
    }

    /// One linearize, build, solve, decode cycle at time `t`.
    pub fn control_step(
        &mut self,
        measured: &VehicleState,
        scenario: &DoorScenario,
        view: DoorView,
        t: f64,
    ) -> Result<ControlOutput, AvError> {
        if !measured.is_finite() {
            return Err(AvError::Invalid {
                name: "measurement",
                reason: "non-finite state".into(),
            });
        }
        let cfg = &self.cfg;
        let plan = LongitudinalPlan::constant_speed(
            t,
            measured.s,
            measured.ux,
            &cfg.schedule,
            &self.lateral_guess(1, t),
        );
        let bounds = encode_door_bounds(scenario, view, &plan, cfg.door_margin);
        let ops_n = self.operating_points(0, measured, &plan);
        let ops_c = self.operating_points(1, measured, &plan);
        let prev = DVector::from_element(1, self.previous_delta);

        let (problem, costs): (CmpcProblem, HorizonCosts) = match cfg.mode {
            AvMode::Contingency => {
                let (spec, problem) =
                    build_av_cmpc(cfg, measured, &ops_n, &ops_c, &bounds, self.previous_delta)?;
                let prev = prev.clone();
                let f = move |p: &TrajectoryPair| {
                    (
                        horizon_cost(
                            &spec.nominal,
                            &p.nominal_states,
                            &p.nominal_inputs,
                            Some(&prev),
                        ),
                        horizon_cost(
                            &spec.contingency,
                            &p.contingency_states,
                            &p.contingency_inputs,
                            Some(&prev),
                        ),
                    )
                };
                (problem, Box::new(f))
            }
            AvMode::Robust => {
                let (h, problem) =
                    build_av_robust(cfg, measured, &ops_c, &bounds, self.previous_delta)?;
                let prev = prev.clone();
                let f = move |p: &TrajectoryPair| {
                    let j = horizon_cost(&h, &p.nominal_states, &p.nominal_inputs, Some(&prev));
                    (j, j)
                };
                (problem, Box::new(f))
            }
        };

        let opts = cfg.solver;
        let warm = if cfg.warm_start {
            self.warm.as_ref()
        } else {
            None
        };
        let started = Instant::now();
        let sol = solve_qp_warm(&problem.qp, &opts, warm);
        let solve_time = started.elapsed();

        let node_times: Vec<f64> = plan.t.clone();
        if !sol.is_optimal() {
            let diagnostics = StepDiagnostics {
                status: sol.status,
                iterations: sol.iterations,
                residuals: None,
                sigma_max: f64::NAN,
                objective: f64::NAN,
                j_nom: f64::NAN,
                j_con: f64::NAN,
                flagged: true,
                solve_time,
            };
            return Ok(ControlOutput {
                delta: self.previous_delta,
                pair: None,
                diagnostics,
            });
        }
        let residuals = kkt_residuals(&problem.qp, &sol).ok();
        let pair = decode(&sol, &problem.index)?;
        let (j_nom, j_con) = costs(&pair);
        let delta = pair.shared_input[0];
        self.previous_delta = delta;
        self.plans = Some([
            HorizonPlan::from_pair(node_times.clone(), &pair, Horizon::Nominal),
            HorizonPlan::from_pair(node_times, &pair, Horizon::Contingency),
        ]);
        self.warm = Some(WarmStart {
            primal: sol.primal.clone(),
            ineq_duals: sol.ineq_duals.clone(),
        });
        let diagnostics = StepDiagnostics {
            status: sol.status,
            iterations: sol.iterations,
            residuals,
            sigma_max: pair.max_slack(),
            objective: pair.objective,
            j_nom,
            j_con,
            flagged: false,
            solve_time,
        };
        Ok(ControlOutput {
            delta,
            pair: Some(pair),
            diagnostics,
        })
    }
}

// -------------------------------------------------------------------------
// closed loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvRunConfig {
    pub controller: AvControllerConfig,
    pub scenario: DoorScenario,
    /// s
    pub duration: f64,
    /// s
    pub dt_plant: f64,
    /// Keep both decoded horizons of every step.
    pub record_horizons: bool,
}

impl Default for AvRunConfig {
    fn default() -> Self {
        Self {
            controller: AvControllerConfig::default(),
            scenario: DoorScenario::default(),
            duration: 3.0,
            dt_plant: 1e-3,
            record_horizons: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvTraceRow {
    pub t: f64,
    pub state: VehicleState,
    /// Command applied over `[t, t + T)`.
    pub delta: f64,
    /// Shared first input of the solve; NaN on a flagged step.
    pub u0: f64,
    pub sigma_max: f64,
    pub objective: f64,
    pub j_nom: f64,
    pub j_con: f64,
    pub status: QpStatus,
    pub flagged: bool,
    /// The door opening had been observed at this step.
    pub observed: bool,
    pub iterations: usize,
    pub kkt_max: f64,
    pub solve_time: Duration,
}

/// Plant sample used for clearance checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantSample {
    pub t: f64,
    pub s: f64,
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvTrace {
    pub pc: f64,
    pub mode: AvMode,
    pub trigger: Option<f64>,
    pub rows: Vec<AvTraceRow>,
    pub samples: Vec<PlantSample>,
    pub horizons: Vec<Option<TrajectoryPair>>,
}

impl AvTrace {
    pub fn flagged_steps(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.flagged)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sigma_max(&self) -> f64 {
        self.rows.iter().map(|r| r.sigma_max).fold(0.0, f64::max)
    }

    /// Lateral error where the plant crosses station `s`.
    pub fn e_at_station(&self, s: f64) -> Option<f64> {
        self.samples
            .windows(2)
            .find(|w| w[0].s <= s && w[1].s > s)
            .map(|w| {
                let f = (s - w[0].s) / (w[1].s - w[0].s);
                w[0].e + f * (w[1].e - w[0].e)
            })
    }

    /// Smallest `e - door edge` over plant samples inside the footprint,
    /// against the true door. `None` if the footprint was never reached.
    pub fn door_clearance(&self, scenario: &DoorScenario) -> Option<f64> {
        let trigger = self.trigger?;
        self.samples
            .iter()
            .filter(|p| scenario.in_footprint(p.s))
            .map(|p| p.e - (scenario.e_right + scenario.intrusion(p.t, trigger)))
            .reduce(f64::min)
    }

    pub fn max_slew(&self) -> f64 {
        let mut prev = 0.0;
        let mut worst: f64 = 0.0;
        for r in &self.rows {
            worst = worst.max((r.delta - prev).abs());
            prev = r.delta;
        }
        worst
    }

    /// Steps whose slew is within `rel` of `limit`.
    pub fn slew_saturated_steps(&self, limit: f64, rel: f64) -> usize {
        let mut prev = 0.0;
        let mut count = 0;
        for r in &self.rows {
            if (r.delta - prev).abs() >= limit * (1.0 - rel) {
                count += 1;
            }
            prev = r.delta;
        }
        count
    }

    /// Largest |e| over steps before the door was observed.
    pub fn pre_trigger_max_abs_e(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| !r.observed)
            .map(|r| r.state.e.abs())
            .fold(0.0, f64::max)
    }

    /// Time of the first step at which the door was observed.
    pub fn observed_at(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.observed).map(|r| r.t)
    }
}

/// Resumable closed-loop simulation; cloning it branches the run.
#[derive(Debug, Clone)]
pub struct AvSimulation {
    cfg: AvRunConfig,
    controller: AvController,
    state: VehicleState,
    t: f64,
    step: usize,
    trace: AvTrace,
}

impl AvSimulation {
    pub fn new(cfg: AvRunConfig, trigger: Option<f64>) -> Result<Self, AvError> {
        if !(cfg.duration > 0.0) {
            return Err(AvError::Invalid {
                name: "duration",
                reason: "must be positive".into(),
            });
        }
        if !(cfg.dt_plant > 0.0 && cfg.dt_plant <= 2e-3) {
            return Err(AvError::Invalid {
                name: "dt_plant",
                reason: "must lie in (0, 0.002]".into(),
            });
        }
        let controller = AvController::new(cfg.controller.clone())?;
        let state = VehicleState::straight(cfg.scenario.start_s, cfg.scenario.approach_speed);
        let trace = AvTrace {
            pc: cfg.controller.pc,
            mode: cfg.controller.mode,
            trigger,
            rows: vec![],
            samples: vec![PlantSample {
                t: 0.0,
                s: state.s,
                e: state.e,
            }],
            horizons: vec![],
        };
        Ok(Self {
            cfg,
            controller,
            state,
            t: 0.0,
            step: 0,
            trace,
        })
    }

    pub fn total_steps(&self) -> usize {
        (self.cfg.duration / self.cfg.controller.control_period).round() as usize
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.cfg.controller.control_period
    }

    /// Whether the door opening is visible to the controller at `step`.
    pub fn observed_at_step(&self, trigger: Option<f64>, step: usize) -> bool {
        let t = self.time_of(step);
        matches!(trigger, Some(tr) if tr <= t - self.cfg.controller.observation_delay + 1e-12)
    }

    /// Replace the true trigger. Only valid while the run so far is
    /// indistinguishable from the new trigger's run.
    pub fn retrigger(&mut self, trigger: Option<f64>) {
        self.trace.trigger = trigger;
    }

    pub fn step(&mut self) -> Result<(), AvError> {
        let t = self.time_of(self.step);
        let cfg = &self.cfg;
        let period = cfg.controller.control_period;
        let observed = self.observed_at_step(self.trace.trigger, self.step);
        let view = if observed {
            DoorView::Observed {
                trigger: self.trace.trigger.expect("observed implies trigger"),
            }
        } else {
            DoorView::Quiet {
                assumed_start: t - cfg.controller.observation_delay,
            }
        };
        let out = self
            .controller
            .control_step(&self.state, &cfg.scenario, view, t)?;
        let d = &out.diagnostics;
        self.trace.rows.push(AvTraceRow {
            t,
            state: self.state,
            delta: out.delta,
            u0: out.pair.as_ref().map_or(f64::NAN, |p| p.shared_input[0]),
            sigma_max: d.sigma_max,
            objective: d.objective,
            j_nom: d.j_nom,
            j_con: d.j_con,
            status: d.status,
            flagged: d.flagged,
            observed,
            iterations: d.iterations,
            kkt_max: d.residuals.map_or(f64::NAN, |r| r.max()),
            solve_time: d.solve_time,
        });
        if cfg.record_horizons {
            self.trace.horizons.push(out.pair);
        }
        let sub = (period / cfg.dt_plant).round().max(1.0) as usize;
        let h = period / sub as f64;
        let delta = out.delta;
        for i in 0..sub {
            self.state = plant_step(
                &self.state,
                |_| delta,
                PlantInputs::default(),
                &cfg.controller.params,
                h,
                cfg.dt_plant,
            )?;
            self.trace.samples.push(PlantSample {
                t: t + (i + 1) as f64 * h,
                s: self.state.s,
                e: self.state.e,
            });
        }
        self.t = t + period;
        self.step += 1;
        Ok(())
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn finish(mut self) -> Result<AvTrace, AvError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.trace)
    }

    pub fn trace(&self) -> &AvTrace {
        &self.trace
    }
}

pub fn run_av(cfg: &AvRunConfig, trigger: Option<f64>) -> Result<AvTrace, AvError> {
    AvSimulation::new(cfg.clone(), trigger)?.finish()
}

/// Runs the never-trigger case and every trigger in `triggers`, branching
/// each triggered run off the shared prefix where the door is not yet
/// visible. Results are identical to independent runs.
pub fn run_av_triggers(
    cfg: &AvRunConfig,
    triggers: &[f64],
) -> Result<(AvTrace, Vec<AvTrace>), AvError> {
    let mut base = AvSimulation::new(cfg.clone(), None)?;
    let mut order: Vec<usize> = (0..triggers.len()).collect();
    order.sort_by(|&a, &b| triggers[a].total_cmp(&triggers[b]));
    let mut out: Vec<Option<AvTrace>> = vec![None; triggers.len()];
    for idx in order {
        let tr = triggers[idx];
        while !base.is_done() && !base.observed_at_step(Some(tr), base.current_step()) {
            base.step()?;
        }
        let mut branch = base.clone();
        branch.retrigger(Some(tr));
        out[idx] = Some(branch.finish()?);
    }
    let never = base.finish()?;
    Ok((
        never,
        out.into_iter()
            .map(|t| t.expect("every trigger ran"))
            .collect(),
    ))
}
