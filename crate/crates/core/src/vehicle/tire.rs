//! Single-coefficient Fiala brush tire.
//!
//! With `t = tan(alpha)` and `t_sl = 3 mu Fz / C`:
//!
//! ```text
//! F = -C t + C^2 / (3 mu Fz) |t| t - C^3 / (27 mu^2 Fz^2) t^3   for |t| < t_sl
//! F = -mu Fz sign(alpha)                                        otherwise
//! ```
//!
//! Positive slip produces negative force.

/// `tan` of the slip angle at which the contact patch fully slides.
pub fn saturation_tan(cornering: f64, mu: f64, fz: f64) -> f64 {
    3.0 * mu * fz / cornering
}

pub fn fiala_force(alpha: f64, cornering: f64, mu: f64, fz: f64) -> f64 {
    let t = alpha.tan();
    if t.abs() >= saturation_tan(cornering, mu, fz) {
        return -mu * fz * alpha.signum();
    }
    let c = cornering;
    let mf = mu * fz;
    -c * t + c * c / (3.0 * mf) * t.abs() * t - c * c * c / (27.0 * mf * mf) * t * t * t
}

/// `dF/dalpha`; zero in full saturation.
pub fn fiala_slope(alpha: f64, cornering: f64, mu: f64, fz: f64) -> f64 {
    let t = alpha.tan();
    if t.abs() >= saturation_tan(cornering, mu, fz) {
        return 0.0;
    }
    let c = cornering;
    let mf = mu * fz;
    let dfdt = -c + 2.0 * c * c / (3.0 * mf) * t.abs() - c * c * c / (9.0 * mf * mf) * t * t;
    dfdt * (1.0 + t * t)
}

/// Affine tire model `F(alpha) ~ force + slope * (alpha - alpha_bar)`.
///
/// `slope` carries the sign of the curve, so it is negative below saturation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireLinearization {
    pub alpha_bar: f64,
    pub force: f64,
    pub slope: f64,
}

impl TireLinearization {
    pub fn eval(&self, alpha: f64) -> f64 {
        self.force + self.slope * (alpha - self.alpha_bar)
    }
}

pub fn linearize_tire(alpha_bar: f64, cornering: f64, mu: f64, fz: f64) -> TireLinearization {
    TireLinearization {
        alpha_bar,
        force: fiala_force(alpha_bar, cornering, mu, fz),
        slope: fiala_slope(alpha_bar, cornering, mu, fz),
    }
}
