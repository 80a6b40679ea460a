//! Per-stage linearization and exact discretization of the lateral model
//! `x = [Uy, r, dpsi, e]`, `u = delta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::{continuous_dynamics, slip_angles, TireMode, VehicleParams, VehicleState};
use super::tire::linearize_tire;
use super::VehicleError;
use crate::builder::AffineStageModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoldKind {
    Zero,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSchedule {
    /// `(duration in s, hold)` per stage.
    pub stages: Vec<(f64, HoldKind)>,
}

impl Default for HorizonSchedule {
    fn default() -> Self {
        Self::mixed(5, 0.02, 15, 0.25)
    }
}

impl HorizonSchedule {
    /// `short` zero-order-hold stages of `dt_short`, then `long`
    /// first-order-hold stages of `dt_long`.
    pub fn mixed(short: usize, dt_short: f64, long: usize, dt_long: f64) -> Self {
        let mut stages = vec![(dt_short, HoldKind::Zero); short];
        stages.extend(std::iter::repeat_n((dt_long, HoldKind::First), long));
        Self { stages }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.stages.iter().map(|s| s.0).sum()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.stages[k].0
    }

    /// Node times `0, t_1, .., t_N` relative to the start of the horizon.
    pub fn node_times(&self) -> Vec<f64> {
        let mut t = vec![0.0];
        let mut acc = 0.0;
        for s in &self.stages {
            acc += s.0;
            t.push(acc);
        }
        t
    }
}

/// Where a stage is linearized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub state: VehicleState,
    pub delta: f64,
    pub kappa: f64,
    pub fxf: f64,
    pub fxr: f64,
}

impl OperatingPoint {
    pub fn straight(state: VehicleState) -> Self {
        Self {
            state,
            delta: 0.0,
            kappa: 0.0,
            fxf: 0.0,
            fxr: 0.0,
        }
    }
}

/// `x_dot ~ f + A (x - x_bar) + B (u - u_bar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LateralJacobian {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub f: DVector<f64>,
    pub x_bar: DVector<f64>,
    pub u_bar: f64,
}

impl LateralJacobian {
    /// Constant term of the affine form `A x + B u + c`.
    pub fn offset(&self) -> DVector<f64> {
        &self.f - &self.a * &self.x_bar - &self.b * self.u_bar
    }
}

fn lateral_rates(d: &VehicleState) -> DVector<f64> {
    DVector::from_vec(vec![d.uy, d.r, d.dpsi, d.e])
}

/// Analytic Jacobian of the lateral rows with tires linearized at `op`.
pub fn lateral_jacobian(
    op: &OperatingPoint,
    params: &VehicleParams,
) -> Result<LateralJacobian, VehicleError> {
    let x = &op.state;
    let (af, ar) = slip_angles(x, op.delta, params)?;
    let front = linearize_tire(
        af,
        params.cornering_front,
        params.friction,
        params.fz_front(),
    );
    let rear = linearize_tire(ar, params.cornering_rear, params.friction, params.fz_rear());
    let d = continuous_dynamics(
        x,
        op.delta,
        op.fxf,
        op.fxr,
        op.kappa,
        params,
        TireMode::Linearized { front, rear },
    )?;

    let ux = x.ux;
    let (pa, pb, m, iz) = (params.a, params.b, params.mass, params.yaw_inertia);
    let vf = x.uy + pa * x.r;
    let vr = x.uy - pb * x.r;
    let gf = ux / (ux * ux + vf * vf);
    let gr = ux / (ux * ux + vr * vr);
    let (cf, cr) = (front.slope, rear.slope);

    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        (cf * gf + cr * gr) / m,           (cf * pa * gf - cr * pb * gr) / m - ux,        0.0, 0.0,
        (pa * cf * gf - pb * cr * gr) / iz, (pa * pa * cf * gf + pb * pb * cr * gr) / iz, 0.0, 0.0,
        0.0,                               1.0,                                           0.0, 0.0,
        1.0,                               0.0,                                           ux,  0.0,
    ]);
    let b = DVector::from_vec(vec![-cf / m, -pa * cf / iz, 0.0, 0.0]);
    Ok(LateralJacobian {
        a,
        b,
        f: lateral_rates(&d),
        x_bar: DVector::from_vec(x.lateral().to_vec()),
        u_bar: op.delta,
    })
}

/// Zero-order hold: `exp([[A, B, c], [0, 0, 0], [0, 0, 0]] dt)`.
pub fn discretize_zoh(jac: &LateralJacobian, dt: f64) -> AffineStageModel {
    let n = jac.a.nrows();
    let mut m = DMatrix::zeros(n + 2, n + 2);
    m.view_mut((0, 0), (n, n)).copy_from(&jac.a);
    m.view_mut((0, n), (n, 1)).copy_from(&jac.b);
    m.view_mut((0, n + 1), (n, 1)).copy_from(&jac.offset());
    let phi = (m * dt).exp();
    AffineStageModel::new(
        phi.view((0, 0), (n, n)).clone_owned(),
        phi.view((0, n), (n, 1)).clone_owned(),
        phi.view((0, n + 1), (n, 1)).column(0).clone_owned(),
    )
}

/// First-order hold between `u_k` and `u_{k+1}`: augment with the input and
/// its (constant) rate `w = (u_{k+1} - u_k) / dt`, so
/// `B = Phi_xu - Phi_xw / dt` and `B_next = Phi_xw / dt`.
pub fn discretize_foh(jac: &LateralJacobian, dt: f64) -> AffineStageModel {
    let n = jac.a.nrows();
    let (iu, iw, ic) = (n, n + 1, n + 2);
    let mut m = DMatrix::zeros(n + 3, n + 3);
    m.view_mut((0, 0), (n, n)).copy_from(&jac.a);
    m.view_mut((0, iu), (n, 1)).copy_from(&jac.b);
    m.view_mut((0, ic), (n, 1)).copy_from(&jac.offset());
    m[(iu, iw)] = 1.0;
    let phi = (m * dt).exp();
    let phi_xu = phi.view((0, iu), (n, 1)).clone_owned();
    let phi_xw = phi.view((0, iw), (n, 1)).clone_owned();
    AffineStageModel::first_order_hold(
        phi.view((0, 0), (n, n)).clone_owned(),
        &phi_xu - &phi_xw / dt,
        &phi_xw / dt,
        phi.view((0, ic), (n, 1)).column(0).clone_owned(),
    )
}

/// One affine model per stage, linearized at `points[k]`.
pub fn build_ltv_model(
    points: &[OperatingPoint],
    schedule: &HorizonSchedule,
    params: &VehicleParams,
) -> Result<Vec<AffineStageModel>, VehicleError> {
    if points.len() != schedule.len() {
        return Err(VehicleError::OperatingPoints {
            expected: schedule.len(),
            got: points.len(),
        });
    }
    points
        .iter()
        .zip(&schedule.stages)
        .enumerate()
        .map(|(k, (op, &(dt, hold)))| {
            let jac = lateral_jacobian(op, params).map_err(|e| match e {
                VehicleError::Singularity { ux } => VehicleError::StageSingularity { stage: k, ux },
                other => other,
            })?;
            Ok(match hold {
                HoldKind::Zero => discretize_zoh(&jac, dt),
                HoldKind::First => discretize_foh(&jac, dt),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{plant_step, PlantInputs};

    fn p() -> VehicleParams {
        VehicleParams::default()
    }

    fn turning() -> OperatingPoint {
        OperatingPoint {
            state: VehicleState {
                s: 0.0,
                e: 0.2,
                dpsi: 0.01,
                ux: 12.0,
                uy: 0.1,
                r: 0.05,
            },
            delta: 0.02,
            kappa: 0.0,
            fxf: 0.0,
            fxr: 0.0,
        }
    }

    #[test]
    fn default_schedule() {
        let s = HorizonSchedule::default();
        assert_eq!(s.len(), 20);
        assert!((s.span() - 3.85).abs() < 1e-12);
        assert_eq!(s.stages[4].1, HoldKind::Zero);
        assert_eq!(s.stages[5].1, HoldKind::First);
    }

    #[test]
    fn short_stage_is_first_order_in_dt() {
        let jac = lateral_jacobian(
            &OperatingPoint::straight(VehicleState::straight(0.0, 12.0)),
            &p(),
        )
        .unwrap();
        let mut prev = f64::NAN;
        for i in 0..5 {
            let dt = 1e-3 / 2f64.powi(i);
            let md = discretize_zoh(&jac, dt);
            let err = (&md.a - (DMatrix::identity(4, 4) + &jac.a * dt)).norm();
            if i > 0 {
                let ratio = prev / err;
                assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
            }
            prev = err;
        }
    }

    #[test]
    fn frozen_tires_decouple_steering() {
        let params = VehicleParams {
            cornering_front: 1e-9,
            cornering_rear: 1e-9,
            ..p()
        };
        let jac = lateral_jacobian(
            &OperatingPoint::straight(VehicleState::straight(0.0, 12.0)),
            &params,
        )
        .unwrap();
        let dt = 1e-4;
        let md = discretize_zoh(&jac, dt);
        assert!(md.b[0].abs() < 1e-12 && md.b[1].abs() < 1e-12);
        assert!((md.a[(2, 1)] - dt).abs() < 1e-6 * dt);
    }

    #[test]
    fn affine_prediction_tracks_plant() {
        let op = turning();
        let jac = lateral_jacobian(&op, &p()).unwrap();
        for dt in [0.02, 0.25] {
            let md = discretize_zoh(&jac, dt);
            let x0 = DVector::from_vec(op.state.lateral().to_vec());
            let u = DVector::from_element(1, op.delta);
            let pred = md.propagate(&x0, &u, &u);
            let truth = plant_step(
                &op.state,
                |_| op.delta,
                PlantInputs::default(),
                &p(),
                dt,
                1e-3,
            )
            .unwrap();
            let truth = DVector::from_vec(truth.lateral().to_vec());
            let scale = (&truth - &x0).amax().max(1e-9);
            assert!((&pred - &truth).amax() / scale < 0.02, "dt {dt}");
        }
    }

    #[test]
    fn foh_with_equal_endpoints_is_zoh() {
        let jac = lateral_jacobian(&turning(), &p()).unwrap();
        let z = discretize_zoh(&jac, 0.25);
        let f = discretize_foh(&jac, 0.25);
        assert!((&f.b + f.b_next.as_ref().unwrap() - &z.b).amax() < 1e-12);
        assert!((&f.a - &z.a).amax() < 1e-12);
    }

    #[test]
    fn singular_stage_is_named() {
        let mut pts = vec![OperatingPoint::straight(VehicleState::straight(0.0, 12.0)); 20];
        pts[7].state.ux = 0.0;
        let err = build_ltv_model(&pts, &HorizonSchedule::default(), &p()).unwrap_err();
        assert_eq!(err, VehicleError::StageSingularity { stage: 7, ux: 0.0 });
    }
}
