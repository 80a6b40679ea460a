use serde::{Deserialize, Serialize};

use super::tire::{fiala_force, TireLinearization};
use super::VehicleError;

pub const GRAVITY: f64 = 9.81;

/// Lowest longitudinal speed at which the slip geometry is evaluated.
pub const MIN_SPEED: f64 = 0.1;

/// Path-relative bicycle state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub s: f64,
    pub e: f64,
    pub dpsi: f64,
    pub ux: f64,
    pub uy: f64,
    pub r: f64,
}

impl VehicleState {
    pub fn straight(s: f64, ux: f64) -> Self {
        Self {
            s,
            ux,
            ..Self::default()
        }
    }

    /// Controller state `[Uy, r, dpsi, e]`.
    pub fn lateral(&self) -> [f64; 4] {
        [self.uy, self.r, self.dpsi, self.e]
    }

    pub fn with_lateral(&self, x: &[f64]) -> Self {
        Self {
            uy: x[0],
            r: x[1],
            dpsi: x[2],
            e: x[3],
            ..*self
        }
    }

    fn axpy(&self, h: f64, d: &VehicleState) -> VehicleState {
        VehicleState {
            s: self.s + h * d.s,
            e: self.e + h * d.e,
            dpsi: self.dpsi + h * d.dpsi,
            ux: self.ux + h * d.ux,
            uy: self.uy + h * d.uy,
            r: self.r + h * d.r,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.s, self.e, self.dpsi, self.ux, self.uy, self.r]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub yaw_inertia: f64,
    /// CG to front axle, m
    pub a: f64,
    /// CG to rear axle, m
    pub b: f64,
    /// N/rad
    pub cornering_front: f64,
    pub cornering_rear: f64,
    pub friction: f64,
    /// rad
    pub max_steer: f64,
    /// rad per control period
    pub max_steer_slew: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1800.0,
            yaw_inertia: 3200.0,
            a: 1.4,
            b: 1.5,
            cornering_front: 120e3,
            cornering_rear: 150e3,
            friction: 0.9,
            max_steer: 0.6,
            max_steer_slew: 0.02,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.a + self.b
    }

    pub fn fz_front(&self) -> f64 {
        self.mass * GRAVITY * self.b / self.wheelbase()
    }

    pub fn fz_rear(&self) -> f64 {
        self.mass * GRAVITY * self.a / self.wheelbase()
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        let fields = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("a", self.a),
            ("b", self.b),
            ("cornering_front", self.cornering_front),
            ("cornering_rear", self.cornering_rear),
            ("friction", self.friction),
            ("max_steer", self.max_steer),
            ("max_steer_slew", self.max_steer_slew),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(VehicleError::InvalidParameter { name, value: v });
            }
        }
        Ok(())
    }

    pub fn front_force(&self, alpha: f64) -> f64 {
        fiala_force(alpha, self.cornering_front, self.friction, self.fz_front())
    }

    pub fn rear_force(&self, alpha: f64) -> f64 {
        fiala_force(alpha, self.cornering_rear, self.friction, self.fz_rear())
    }

    /// Understeer gradient `m / L (b / C_f - a / C_r)`, rad s^2 / m.
    pub fn understeer_gradient(&self) -> f64 {
        self.mass / self.wheelbase()
            * (self.b / self.cornering_front - self.a / self.cornering_rear)
    }
}

pub fn slip_angles(
    state: &VehicleState,
    delta: f64,
    params: &VehicleParams,
) -> Result<(f64, f64), VehicleError> {
    if state.ux <= MIN_SPEED || !state.ux.is_finite() {
        return Err(VehicleError::Singularity { ux: state.ux });
    }
    let af = ((state.uy + params.a * state.r) / state.ux).atan() - delta;
    let ar = ((state.uy - params.b * state.r) / state.ux).atan();
    Ok((af, ar))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TireMode {
    Nonlinear,
    Linearized {
        front: TireLinearization,
        rear: TireLinearization,
    },
}

/// Path-relative bicycle dynamics; the result holds time derivatives.
pub fn continuous_dynamics(
    state: &VehicleState,
    delta: f64,
    fxf: f64,
    fxr: f64,
    kappa: f64,
    params: &VehicleParams,
    tires: TireMode,
) -> Result<VehicleState, VehicleError> {
    let (af, ar) = slip_angles(state, delta, params)?;
    let (fyf, fyr) = match tires {
        TireMode::Nonlinear => (params.front_force(af), params.rear_force(ar)),
        TireMode::Linearized { front, rear } => (front.eval(af), rear.eval(ar)),
    };
    let m = params.mass;
    Ok(VehicleState {
        s: state.ux - state.uy * state.dpsi,
        e: state.uy + state.ux * state.dpsi,
        dpsi: state.r - kappa * state.ux,
        ux: (fxf + fxr) / m + state.r * state.uy,
        uy: (fyf + fyr) / m - state.r * state.ux,
        r: (params.a * fyf - params.b * fyr) / params.yaw_inertia,
    })
}

/// Inputs held by the plant over one integration window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantInputs {
    pub fxf: f64,
    pub fxr: f64,
    pub kappa: f64,
}

impl Default for PlantInputs {
    fn default() -> Self {
        Self {
            fxf: 0.0,
            fxr: 0.0,
            kappa: 0.0,
        }
    }
}

/// Fixed-step RK4 integration of the nonlinear model over `duration`, with
/// steering given as a function of time since the start of the window.
pub fn plant_step(
    state: &VehicleState,
    delta: impl Fn(f64) -> f64,
    inputs: PlantInputs,
    params: &VehicleParams,
    duration: f64,
    dt_plant: f64,
) -> Result<VehicleState, VehicleError> {
    if !(dt_plant > 0.0 && dt_plant <= 2e-3) {
        return Err(VehicleError::InvalidParameter {
            name: "dt_plant",
            value: dt_plant,
        });
    }
    let steps = (duration / dt_plant).round().max(1.0) as usize;
    let h = duration / steps as f64;
    let f = |x: &VehicleState, t: f64| {
        continuous_dynamics(
            x,
            delta(t),
            inputs.fxf,
            inputs.fxr,
            inputs.kappa,
            params,
            TireMode::Nonlinear,
        )
    };
    let mut x = *state;
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = f(&x, t)?;
        let k2 = f(&x.axpy(0.5 * h, &k1), t + 0.5 * h)?;
        let k3 = f(&x.axpy(0.5 * h, &k2), t + 0.5 * h)?;
        let k4 = f(&x.axpy(h, &k3), t + h)?;
        x = VehicleState {
            s: x.s + h / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s),
            e: x.e + h / 6.0 * (k1.e + 2.0 * k2.e + 2.0 * k3.e + k4.e),
            dpsi: x.dpsi + h / 6.0 * (k1.dpsi + 2.0 * k2.dpsi + 2.0 * k3.dpsi + k4.dpsi),
            ux: x.ux + h / 6.0 * (k1.ux + 2.0 * k2.ux + 2.0 * k3.ux + k4.ux),
            uy: x.uy + h / 6.0 * (k1.uy + 2.0 * k2.uy + 2.0 * k3.uy + k4.uy),
            r: x.r + h / 6.0 * (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r),
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn slip_examples() {
        let s = VehicleState::straight(0.0, 12.0);
        assert_eq!(slip_angles(&s, 0.0, &p()).unwrap(), (0.0, 0.0));
        let (af, ar) = slip_angles(&s, 0.05, &p()).unwrap();
        assert_eq!((af, ar), (-0.05, 0.0));
        let q = VehicleParams {
            a: 1.2,
            b: 1.4,
            ..p()
        };
        let s = VehicleState {
            uy: 0.3,
            r: 0.1,
            ..s
        };
        let (af, ar) = slip_angles(&s, 0.0, &q).unwrap();
        assert!((af - (0.42f64 / 12.0).atan()).abs() < 1e-15);
        assert!((af - 0.03497).abs() < 2e-5);
        assert!((ar - 0.013332).abs() < 1e-6);
        assert!(slip_angles(&VehicleState::straight(0.0, 0.05), 0.0, &p()).is_err());
    }

    #[test]
    fn straight_running_derivatives() {
        let d = continuous_dynamics(
            &VehicleState::straight(3.0, 12.0),
            0.0,
            0.0,
            0.0,
            0.0,
            &p(),
            TireMode::Nonlinear,
        )
        .unwrap();
        assert_eq!(
            d,
            VehicleState {
                s: 12.0,
                ..VehicleState::default()
            }
        );
    }

    #[test]
    fn curvature_drives_heading_error() {
        let d = continuous_dynamics(
            &VehicleState::straight(0.0, 12.0),
            0.0,
            0.0,
            0.0,
            1.0 / 50.0,
            &p(),
            TireMode::Nonlinear,
        )
        .unwrap();
        assert!((d.dpsi + 0.24).abs() < 1e-15);
    }

    #[test]
    fn balanced_yaw_moment() {
        // a Fyf = b Fyr with linear tires: choose forces directly
        let front = TireLinearization {
            alpha_bar: 0.0,
            force: 1500.0,
            slope: 0.0,
        };
        let rear = TireLinearization {
            alpha_bar: 0.0,
            force: 1400.0,
            slope: 0.0,
        };
        let d = continuous_dynamics(
            &VehicleState::straight(0.0, 12.0),
            0.0,
            0.0,
            0.0,
            0.0,
            &p(),
            TireMode::Linearized { front, rear },
        )
        .unwrap();
        assert!(d.r.abs() < 1e-12);
    }

    #[test]
    fn straight_running_stays_straight() {
        let x0 = VehicleState::straight(0.0, 12.0);
        let x = plant_step(&x0, |_| 0.0, PlantInputs::default(), &p(), 1.0, 1e-3).unwrap();
        assert_eq!(x.e, 0.0);
        assert_eq!(x.uy, 0.0);
        assert_eq!(x.r, 0.0);
        assert!((x.s - 12.0).abs() < 1e-12);
    }

    #[test]
    fn plant_rejects_coarse_step() {
        let x0 = VehicleState::straight(0.0, 12.0);
        assert!(plant_step(&x0, |_| 0.0, PlantInputs::default(), &p(), 1.0, 0.01).is_err());
    }

    #[test]
    fn load_split() {
        let q = p();
        assert!((q.fz_front() + q.fz_rear() - q.mass * GRAVITY).abs() < 1e-9);
        assert!((q.fz_front() * q.a - q.fz_rear() * q.b).abs() < 1e-9);
    }
}
