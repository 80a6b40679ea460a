//! Curvilinear single-track vehicle model.

mod ltv;
mod model;
mod tire;

use thiserror::Error;

pub use ltv::{
    build_ltv_model, discretize_foh, discretize_zoh, lateral_jacobian, HoldKind, HorizonSchedule,
    LateralJacobian, OperatingPoint,
};
pub use model::{
    continuous_dynamics, plant_step, slip_angles, PlantInputs, TireMode, VehicleParams,
    VehicleState, GRAVITY, MIN_SPEED,
};
pub use tire::{fiala_force, fiala_slope, linearize_tire, saturation_tan, TireLinearization};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VehicleError {
    #[error("longitudinal speed {ux} m/s is at or below the model singularity")]
    Singularity { ux: f64 },
    #[error("operating point for stage {stage} is singular (U_x = {ux} m/s)")]
    StageSingularity { stage: usize, ux: f64 },
    #[error("parameter {name} = {value} must be positive and finite")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("expected {expected} operating points, got {got}")]
    OperatingPoints { expected: usize, got: usize },
}
