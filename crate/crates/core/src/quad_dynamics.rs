//! Rigid-body quadrotor model with a quadratic propeller model, first-order
//! motor lag, linear body-frame drag and a proportional body-rate inner loop
//! that turns collective-thrust/body-rate (CTBR) commands into motor speed
//! setpoints.
//!
//! Frames: world `W` is z-up with gravity along `-z`; body `B` has x forward,
//! y left, z along the thrust axis. Rotors are laid out in an X configuration:
//!
//! | rotor | position (x, y)   | spin |
//! |-------|-------------------|------|
//! | 0     | ( d, -d)          | +1   |
//! | 1     | (-d,  d)          | +1   |
//! | 2     | ( d,  d)          | -1   |
//! | 3     | (-d, -d)          | -1   |
//!
//! with `d = arm_length / sqrt(2)`.

use nalgebra::{Matrix3, Matrix4, Quaternion, SVector, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;

const STATE_DIM: usize = 17;
type StateVec = SVector<f64, STATE_DIM>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    /// World-frame position, m.
    pub position: Vector3<f64>,
    /// Unit quaternion rotating body vectors into the world frame.
    pub attitude: Quaternion<f64>,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Body rates, rad/s.
    pub body_rates: Vector3<f64>,
    /// Rotor speeds, rad/s.
    pub motor_speeds: Vector4<f64>,
}

impl QuadState {
    /// Level and motionless at `position` with all motors at `motor_speed`.
    pub fn at_rest(position: Vector3<f64>, motor_speed: f64) -> Self {
        Self {
            position,
            attitude: Quaternion::identity(),
            velocity: Vector3::zeros(),
            body_rates: Vector3::zeros(),
            motor_speeds: Vector4::repeat(motor_speed),
        }
    }

    /// Level and motionless with motors spinning at hover speed.
    pub fn hover(position: Vector3<f64>, params: &QuadParams) -> Self {
        Self::at_rest(position, params.hover_motor_speed())
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.attitude)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.body_rates.iter().all(|v| v.is_finite())
            && self.motor_speeds.iter().all(|v| v.is_finite())
    }

    fn to_vector(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<4>(3).copy_from(&self.attitude.coords);
        x.fixed_rows_mut::<3>(7).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(10).copy_from(&self.body_rates);
        x.fixed_rows_mut::<4>(13).copy_from(&self.motor_speeds);
        x
    }

    fn from_vector(x: &StateVec) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            attitude: Quaternion::from(x.fixed_rows::<4>(3).into_owned()),
            velocity: x.fixed_rows::<3>(7).into_owned(),
            body_rates: x.fixed_rows::<3>(10).into_owned(),
            motor_speeds: x.fixed_rows::<4>(13).into_owned(),
        }
    }
}

/// Vehicle constants. Defaults describe a 220 g quadrotor with a
/// thrust-to-weight ratio of about 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadParams {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub gravity: Vector3<f64>,
    /// Motor time constant, s.
    pub motor_time_constant: f64,
    pub arm_length: f64,
    pub rotor_spin: [f64; 4],
    /// Per-rotor thrust `thrust_coeff * speed^2`, N.
    pub thrust_coeff: f64,
    /// Per-rotor drag torque `torque_coeff * speed^2`, N m.
    pub torque_coeff: f64,
    /// Linear body-frame drag, N per m/s on each body axis.
    pub drag_coeff: Vector3<f64>,
    pub max_motor_speed: f64,
    /// Proportional gain of the body-rate loop, 1/s.
    pub rate_gain: Vector3<f64>,
    /// Body-rate setpoint limit, rad/s.
    pub max_body_rate: Vector3<f64>,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 0.22,
            inertia: Matrix3::from_diagonal(&Vector3::new(2.5e-4, 2.5e-4, 4.0e-4)),
            gravity: Vector3::new(0.0, 0.0, -GRAVITY),
            motor_time_constant: 0.033,
            arm_length: 0.075,
            rotor_spin: [1.0, 1.0, -1.0, -1.0],
            thrust_coeff: 2.4e-7,
            torque_coeff: 4.0e-9,
            drag_coeff: Vector3::new(0.05, 0.05, 0.1),
            max_motor_speed: 3000.0,
            rate_gain: Vector3::new(20.0, 20.0, 10.0),
            max_body_rate: Vector3::new(10.0, 10.0, 5.0),
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass <= 0.0 || self.motor_time_constant <= 0.0 || self.thrust_coeff <= 0.0 {
            return Err(Error::Config("mass, motor time constant and thrust coefficient must be positive".into()));
        }
        if self.inertia.cholesky().is_none() {
            return Err(Error::Config("inertia must be positive definite".into()));
        }
        Ok(())
    }

    pub fn rotor_positions(&self) -> [Vector3<f64>; 4] {
        let d = self.arm_length / std::f64::consts::SQRT_2;
        [
            Vector3::new(d, -d, 0.0),
            Vector3::new(-d, d, 0.0),
            Vector3::new(d, d, 0.0),
            Vector3::new(-d, -d, 0.0),
        ]
    }

    /// Maximum collective thrust, N.
    pub fn max_thrust(&self) -> f64 {
        4.0 * self.thrust_coeff * self.max_motor_speed.powi(2)
    }

    pub fn hover_motor_speed(&self) -> f64 {
        (self.mass * self.gravity.norm() / (4.0 * self.thrust_coeff)).sqrt()
    }

    /// Normalized collective thrust that balances gravity.
    pub fn hover_thrust_command(&self) -> f64 {
        self.mass * self.gravity.norm() / self.max_thrust()
    }

    /// Maps per-rotor thrusts to `[collective, tau_x, tau_y, tau_z]`.
    pub fn mixing_matrix(&self) -> Matrix4<f64> {
        let pos = self.rotor_positions();
        let kappa = self.torque_coeff / self.thrust_coeff;
        Matrix4::from_fn(|r, c| match r {
            0 => 1.0,
            1 => pos[c].y,
            2 => -pos[c].x,
            _ => self.rotor_spin[c] * kappa,
        })
    }
}

/// Collective thrust (normalized to `[0, 1]` of [`QuadParams::max_thrust`])
/// plus a body-rate setpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtbrCommand {
    pub thrust: f64,
    pub body_rates: Vector3<f64>,
}

impl CtbrCommand {
    pub fn new(thrust: f64, body_rates: Vector3<f64>) -> Self {
        Self { thrust, body_rates }
    }

    /// Clamps thrust into `[0, 1]` and rates into the configured envelope.
    pub fn clamped(&self, params: &QuadParams) -> Self {
        let lim = params.max_body_rate;
        Self {
            thrust: self.thrust.clamp(0.0, 1.0),
            body_rates: Vector3::from_fn(|i, _| self.body_rates[i].clamp(-lim[i], lim[i])),
        }
    }
}

/// Exact first-order lag of the motor speeds over `dt`, clamped to
/// `[0, max_speed]`.
pub fn motor_dynamics(
    speeds: &Vector4<f64>,
    setpoints: &Vector4<f64>,
    time_constant: f64,
    dt: f64,
    max_speed: f64,
) -> Vector4<f64> {
    let blend = 1.0 - (-dt / time_constant).exp();
    Vector4::from_fn(|i, _| (speeds[i] + (setpoints[i] - speeds[i]) * blend).clamp(0.0, max_speed))
}

/// Time derivative of the motor speeds.
pub fn motor_derivative(speeds: &Vector4<f64>, setpoints: &Vector4<f64>, time_constant: f64) -> Vector4<f64> {
    (setpoints - speeds) / time_constant
}

/// Body-frame forces and torques acting on the vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub f_prop: Vector3<f64>,
    pub tau_prop: Vector3<f64>,
    pub f_aero: Vector3<f64>,
    pub tau_aero: Vector3<f64>,
}

pub fn forces_and_torques(state: &QuadState, params: &QuadParams) -> Wrench {
    let positions = params.rotor_positions();
    let mut f_prop = Vector3::zeros();
    let mut tau_prop = Vector3::zeros();
    for i in 0..4 {
        let w2 = state.motor_speeds[i] * state.motor_speeds[i];
        let thrust = Vector3::new(0.0, 0.0, params.thrust_coeff * w2);
        f_prop += thrust;
        tau_prop += positions[i].cross(&thrust);
        tau_prop.z += params.rotor_spin[i] * params.torque_coeff * w2;
    }
    let v_body = state.rotation().inverse_transform_vector(&state.velocity);
    let f_aero = -params.drag_coeff.component_mul(&v_body);
    Wrench {
        f_prop,
        tau_prop,
        f_aero,
        tau_aero: Vector3::zeros(),
    }
}

/// Proportional body-rate loop plus control allocation. Returns steady-state
/// motor speed setpoints in `[0, max_motor_speed]`.
pub fn body_rate_controller(
    body_rates: &Vector3<f64>,
    cmd: &CtbrCommand,
    params: &QuadParams,
) -> Vector4<f64> {
    let cmd = cmd.clamped(params);
    let torque = params.inertia * params.rate_gain.component_mul(&(cmd.body_rates - body_rates));
    let collective = cmd.thrust * params.max_thrust();
    let wrench = Vector4::new(collective, torque.x, torque.y, torque.z);
    let inverse = params
        .mixing_matrix()
        .try_inverse()
        .expect("X-configuration mixing matrix is invertible");
    let per_rotor = inverse * wrench;
    let max_rotor = params.thrust_coeff * params.max_motor_speed.powi(2);
    per_rotor.map(|t| (t.clamp(0.0, max_rotor) / params.thrust_coeff).sqrt())
}

fn derivative(x: &StateVec, setpoints: &Vector4<f64>, params: &QuadParams, inertia_inv: &Matrix3<f64>) -> StateVec {
    let state = QuadState::from_vector(x);
    let wrench = forces_and_torques(&state, params);
    let rot = state.rotation();
    let w = state.body_rates;

    let q_dot = state.attitude * Quaternion::from_imag(w) * 0.5;
    let v_dot = rot * (wrench.f_prop + wrench.f_aero) / params.mass + params.gravity;
    let jw = params.inertia * w;
    let w_dot = inertia_inv * (wrench.tau_prop + wrench.tau_aero - w.cross(&jw));
    let motor_dot = motor_derivative(&state.motor_speeds, setpoints, params.motor_time_constant);

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&state.velocity);
    dx.fixed_rows_mut::<4>(3).copy_from(&q_dot.coords);
    dx.fixed_rows_mut::<3>(7).copy_from(&v_dot);
    dx.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    dx.fixed_rows_mut::<4>(13).copy_from(&motor_dot);
    dx
}

/// Integrates the full state derivative with one RK4 step while holding the
/// motor setpoints constant, then renormalizes the attitude and clamps motor
/// speeds.
pub fn integrate(state: &QuadState, setpoints: &Vector4<f64>, params: &QuadParams, dt: f64) -> Result<QuadState> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(Error::Config(format!("integration step {dt} outside (0, 0.02]")));
    }
    let inertia_inv = params
        .inertia
        .try_inverse()
        .ok_or_else(|| Error::Config("singular inertia".into()))?;
    let x = state.to_vector();
    let k1 = derivative(&x, setpoints, params, &inertia_inv);
    let k2 = derivative(&(x + k1 * (dt / 2.0)), setpoints, params, &inertia_inv);
    let k3 = derivative(&(x + k2 * (dt / 2.0)), setpoints, params, &inertia_inv);
    let k4 = derivative(&(x + k3 * dt), setpoints, params, &inertia_inv);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

    let mut out = QuadState::from_vector(&next);
    if !out.is_finite() || out.attitude.norm() == 0.0 {
        return Err(Error::SimulationDiverged {
            prior: Box::new(state.clone()),
        });
    }
    out.attitude = out.attitude.normalize();
    out.motor_speeds = out.motor_speeds.map(|w| w.clamp(0.0, params.max_motor_speed));
    Ok(out)
}

/// Advances the vehicle by `dt` under a CTBR command.
pub fn step(state: &QuadState, cmd: &CtbrCommand, params: &QuadParams, dt: f64) -> Result<QuadState> {
    let setpoints = body_rate_controller(&state.body_rates, cmd, params);
    integrate(state, &setpoints, params, dt)
}

/// Translational plus rotational kinetic energy plus potential energy.
pub fn mechanical_energy(state: &QuadState, params: &QuadParams) -> f64 {
    let kinetic = 0.5 * params.mass * state.velocity.norm_squared();
    let rotational = 0.5 * state.body_rates.dot(&(params.inertia * state.body_rates));
    let potential = -params.mass * params.gravity.dot(&state.position);
    kinetic + rotational + potential
}
