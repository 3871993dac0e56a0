//! Ground-truth physical models: a generic linear discrete-time plant and a
//! 12-state rigid-body quadrotor.
//!
//! Frames: world is x/y horizontal, z up. Body is x forward, y left, z up, so a
//! level vehicle at hover measures a specific force of `(0, 0, +g)`.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub const GRAVITY: f64 = 9.81;

/// `x_{k+1} = A x_k + B u_k`, `y_k = C x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(SimError::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(SimError::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(SimError::Dimension(format!("C has {} columns, expected {n}", c.ncols())));
        }
        let finite = a.iter().chain(b.iter()).chain(c.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(SimError::contract("linear model entries must be finite"));
        }
        Ok(Self { a, b, c })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearState {
    pub x: DVector<f64>,
    pub k: u64,
}

impl LinearState {
    pub fn new(x: DVector<f64>) -> Self {
        Self { x, k: 0 }
    }
}

/// Advances the linear plant one step. The output is taken from the state
/// *before* the step, so `y` is `C x_k` and the returned state is `x_{k+1}`.
pub fn step_linear(
    state: &LinearState,
    input: &DVector<f64>,
    model: &LinearModel,
) -> Result<(LinearState, DVector<f64>)> {
    if state.x.len() != model.state_dim() {
        return Err(SimError::Dimension(format!(
            "state has length {}, model expects {}",
            state.x.len(),
            model.state_dim()
        )));
    }
    if input.len() != model.input_dim() {
        return Err(SimError::Dimension(format!(
            "input has length {}, model expects {}",
            input.len(),
            model.input_dim()
        )));
    }
    let y = &model.c * &state.x;
    let x_next = &model.a * &state.x + &model.b * input;
    Ok((
        LinearState {
            x: x_next,
            k: state.k + 1,
        },
        y,
    ))
}

/// Physical parameters of the simulated quadrotor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the body inertia tensor, kg·m².
    pub inertia: [f64; 3],
    /// Distance from the center of mass to each rotor, m.
    pub arm_length: f64,
    /// Thrust of one rotor at full command, N.
    pub max_motor_thrust: f64,
    /// Reaction torque per newton of thrust, m.
    pub yaw_moment_coeff: f64,
    /// Linear translational damping, N·s/m.
    pub linear_drag: f64,
    /// Linear rotational damping, N·m·s/rad.
    pub angular_damping: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.5,
            inertia: [0.015, 0.015, 0.027],
            arm_length: 0.225,
            max_motor_thrust: 7.3575,
            yaw_moment_coeff: 0.016,
            linear_drag: 0.45,
            angular_damping: 0.0,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.mass, self.arm_length, self.max_motor_thrust, self.yaw_moment_coeff];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SimError::config("plant", "mass, arm, thrust and moment coefficients must be positive"));
        }
        if self.inertia.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SimError::config("plant.inertia", "inertia must be positive-definite diagonal"));
        }
        if self.linear_drag < 0.0 || self.angular_damping < 0.0 {
            return Err(SimError::config("plant", "damping must be non-negative"));
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * GRAVITY
    }

    /// Per-motor command that exactly balances gravity.
    pub fn hover_command(&self) -> f64 {
        self.weight() / (4.0 * self.max_motor_thrust)
    }

    fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    fn half_span(&self) -> f64 {
        self.arm_length / std::f64::consts::SQRT_2
    }

    /// Collective thrust and body torque produced by the four rotor thrusts.
    ///
    /// X layout, rotors 0..4 at front-left, front-right, rear-right, rear-left;
    /// 0 and 2 spin one way, 1 and 3 the other.
    pub fn wrench(&self, thrusts: &[f64; 4]) -> (f64, Vector3<f64>) {
        let d = self.half_span();
        let k = self.yaw_moment_coeff;
        let [t0, t1, t2, t3] = *thrusts;
        let collective = t0 + t1 + t2 + t3;
        let torque = Vector3::new(
            d * (t0 - t1 - t2 + t3),
            -d * (t0 + t1 - t2 - t3),
            k * (t0 - t1 + t2 - t3),
        );
        (collective, torque)
    }

    /// Inverse of [`wrench`](Self::wrench): rotor thrusts for a desired
    /// collective thrust and torque. Not saturated.
    pub fn allocate(&self, collective: f64, torque: &Vector3<f64>) -> [f64; 4] {
        let d = self.half_span();
        let a = collective / 4.0;
        let bx = torque.x / (4.0 * d);
        let by = torque.y / (4.0 * d);
        let bz = torque.z / (4.0 * self.yaw_moment_coeff);
        [
            a + bx - by + bz,
            a - bx - by - bz,
            a - bx + by + bz,
            a + bx + by - bz,
        ]
    }
}

/// Ground-truth rigid-body state.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    /// Body frame, rad/s.
    pub angular_rate: Vector3<f64>,
    /// Non-gravitational acceleration over the last step in the body frame;
    /// what an ideal accelerometer reads.
    pub specific_force: Vector3<f64>,
    pub time: f64,
}

impl VehicleState {
    /// Level hover at `position`, balanced against gravity.
    pub fn hover(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            angular_rate: Vector3::zeros(),
            specific_force: Vector3::new(0.0, 0.0, GRAVITY),
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.angular_rate.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
    }

    /// Angle between body z and world z, rad.
    pub fn tilt(&self) -> f64 {
        let up = self.attitude * Vector3::z();
        up.z.clamp(-1.0, 1.0).acos()
    }
}

/// Normalized rotor commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorCommand(pub [f64; 4]);

impl MotorCommand {
    pub fn uniform(level: f64) -> Self {
        MotorCommand([level; 4]).saturated()
    }

    pub fn off() -> Self {
        MotorCommand([0.0; 4])
    }

    pub fn saturated(self) -> Self {
        MotorCommand(self.0.map(|c| if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) }))
    }
}

fn integrate_attitude(q: &UnitQuaternion<f64>, body_rate: &Vector3<f64>, dt: f64) -> UnitQuaternion<f64> {
    let delta = UnitQuaternion::from_scaled_axis(body_rate * dt);
    let mut next = q * delta;
    next.renormalize();
    next
}

/// One semi-implicit Euler step of the rigid-body quadrotor.
///
/// Angular rate is updated first and the new rate is used for the attitude;
/// likewise velocity before position. Commands are saturated to `[0, 1]`.
pub fn step_quadrotor(
    state: &VehicleState,
    cmd: &MotorCommand,
    dt: f64,
    params: &QuadrotorParams,
) -> VehicleState {
    debug_assert!(dt > 0.0 && dt <= 0.01, "dt {dt} outside (0, 0.01]");
    let cmd = cmd.saturated();
    let thrusts = cmd.0.map(|c| c * params.max_motor_thrust);
    let (collective, torque) = params.wrench(&thrusts);

    let inertia = params.inertia_matrix();
    let w = state.angular_rate;
    let gyroscopic = w.cross(&(inertia * w));
    let ang_acc = Vector3::new(
        (torque.x - gyroscopic.x - params.angular_damping * w.x) / params.inertia[0],
        (torque.y - gyroscopic.y - params.angular_damping * w.y) / params.inertia[1],
        (torque.z - gyroscopic.z - params.angular_damping * w.z) / params.inertia[2],
    );
    let angular_rate = w + ang_acc * dt;

    let drag_world = -params.linear_drag * state.velocity;
    let thrust_world = state.attitude * Vector3::new(0.0, 0.0, collective);
    let non_grav = (thrust_world + drag_world) / params.mass;
    let accel = non_grav - Vector3::new(0.0, 0.0, GRAVITY);
    let velocity = state.velocity + accel * dt;
    let position = state.position + velocity * dt;

    VehicleState {
        position,
        velocity,
        attitude: integrate_attitude(&state.attitude, &angular_rate, dt),
        angular_rate,
        specific_force: state.attitude.inverse() * non_grav,
        time: state.time + dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoise {
    /// m/s²
    pub accel_sigma: f64,
    /// rad/s
    pub gyro_sigma: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_sigma: 0.05,
            gyro_sigma: 0.005,
        }
    }
}

/// One accelerometer + gyroscope reading in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    let z: f64 = rng.sample(StandardNormal);
    Vector3::new(x, y, z) * sigma
}

/// Ideal body-frame measurement plus Gaussian noise. Always draws six normals
/// so the stream position does not depend on the sigmas.
pub fn imu_measure<R: Rng + ?Sized>(state: &VehicleState, noise: &ImuNoise, rng: &mut R) -> ImuSample {
    let accel_noise = gaussian3(rng, noise.accel_sigma);
    let gyro_noise = gaussian3(rng, noise.gyro_sigma);
    ImuSample {
        time: state.time,
        accel: state.specific_force + accel_noise,
        gyro: state.angular_rate + gyro_noise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use nalgebra::dmatrix;
    use nalgebra::dvector;

    #[test]
    fn identity_dynamics() {
        let model = LinearModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2)).unwrap();
        let (next, _) = step_linear(&LinearState::new(dvector![1.0, 2.0]), &dvector![5.0], &model).unwrap();
        assert_eq!(next.x, dvector![1.0, 2.0]);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn zero_fixed_point() {
        let model = LinearModel::new(
            dmatrix![1.0, 0.1; 0.0, 1.0],
            dmatrix![0.0; 0.1],
            dmatrix![1.0, 0.0],
        )
        .unwrap();
        let (next, y) = step_linear(&LinearState::new(dvector![0.0, 0.0]), &dvector![0.0], &model).unwrap();
        assert_eq!(next.x, dvector![0.0, 0.0]);
        assert_eq!(y, dvector![0.0]);
    }

    #[test]
    fn hand_multiplied_step() {
        let model = LinearModel::new(
            dmatrix![1.0, 0.1; 0.0, 1.0],
            dmatrix![0.0; 0.1],
            dmatrix![1.0, 0.0],
        )
        .unwrap();
        let (next, y) = step_linear(&LinearState::new(dvector![0.0, 0.0]), &dvector![1.0], &model).unwrap();
        assert_eq!(next.x, dvector![0.0, 0.1]);
        assert_eq!(y, dvector![0.0]);
    }

    #[test]
    fn output_uses_pre_step_state() {
        let model = LinearModel::new(dmatrix![2.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let (next, y) = step_linear(&LinearState::new(dvector![3.0]), &dvector![1.0], &model).unwrap();
        assert_eq!(y, dvector![3.0]);
        assert_eq!(next.x, dvector![7.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = LinearModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            step_linear(&LinearState::new(dvector![1.0]), &dvector![0.0], &model),
            Err(SimError::Dimension(_))
        ));
        assert!(matches!(
            step_linear(&LinearState::new(dvector![1.0, 2.0]), &dvector![0.0, 1.0], &model),
            Err(SimError::Dimension(_))
        ));
        assert!(LinearModel::new(DMatrix::identity(2, 2), DMatrix::zeros(3, 1), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn allocation_inverts_wrench() {
        let p = QuadrotorParams::default();
        let torque = Vector3::new(0.1, -0.05, 0.02);
        let thrusts = p.allocate(12.0, &torque);
        let (collective, back) = p.wrench(&thrusts);
        assert!((collective - 12.0).abs() < 1e-12);
        assert!((back - torque).norm() < 1e-12);
    }

    #[test]
    fn hover_balances_gravity() {
        let p = QuadrotorParams::default();
        let s0 = VehicleState::hover(Vector3::new(0.0, 0.0, 50.0));
        let s1 = step_quadrotor(&s0, &MotorCommand::uniform(p.hover_command()), 1.0 / 400.0, &p);
        assert!(s1.velocity.z.abs() < 1e-9);
        assert!(s1.angular_rate.norm() < 1e-12);
    }

    #[test]
    fn free_fall_with_motors_off() {
        let p = QuadrotorParams::default();
        let dt = 1.0 / 400.0;
        let s0 = VehicleState::hover(Vector3::new(0.0, 0.0, 50.0));
        let s1 = step_quadrotor(&s0, &MotorCommand::off(), dt, &p);
        assert!(((s1.velocity.z - s0.velocity.z) / dt + GRAVITY).abs() < 1e-9);
        assert!(s1.specific_force.norm() < 1e-12);
    }

    #[test]
    fn roll_torque_matches_arm_times_thrust_difference() {
        // Oracle: for small delta the first-step roll acceleration is
        // (d * 4 * delta * T_max) / Ixx with the left pair raised by delta and
        // the right pair lowered by delta.
        let p = QuadrotorParams::default();
        let dt = 1.0 / 400.0;
        let h = p.hover_command();
        let s0 = VehicleState::hover(Vector3::new(0.0, 0.0, 50.0));
        let mut rates = Vec::new();
        for delta in [0.001, 0.002, 0.004] {
            let cmd = MotorCommand([h + delta, h - delta, h - delta, h + delta]);
            let s1 = step_quadrotor(&s0, &cmd, dt, &p);
            let d = p.arm_length / 2f64.sqrt();
            let expected = d * 4.0 * delta * p.max_motor_thrust / p.inertia[0] * dt;
            assert!(s1.angular_rate.x > 0.0);
            assert!((s1.angular_rate.x - expected).abs() < 1e-12);
            assert!(s1.angular_rate.y.abs() < 1e-12 && s1.angular_rate.z.abs() < 1e-12);
            rates.push(s1.angular_rate.x);
        }
        assert!((rates[1] / rates[0] - 2.0).abs() < 1e-9);
        assert!((rates[2] / rates[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn commands_are_saturated() {
        let c = MotorCommand([-1.0, 0.5, 2.0, f64::NAN]).saturated();
        assert_eq!(c.0, [0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn imu_hover_reading() {
        let s = VehicleState::hover(Vector3::zeros());
        let noise = ImuNoise { accel_sigma: 0.0, gyro_sigma: 0.0 };
        let sample = imu_measure(&s, &noise, &mut stream(1, Stream::Imu));
        assert_eq!(sample.accel, Vector3::new(0.0, 0.0, GRAVITY));
        assert_eq!(sample.gyro, Vector3::zeros());
    }

    #[test]
    fn imu_same_seed_same_samples() {
        let s = VehicleState::hover(Vector3::zeros());
        let noise = ImuNoise::default();
        let mut a = stream(9, Stream::Imu);
        let mut b = stream(9, Stream::Imu);
        for _ in 0..10 {
            assert_eq!(imu_measure(&s, &noise, &mut a), imu_measure(&s, &noise, &mut b));
        }
    }

    #[test]
    fn imu_noise_std_converges() {
        let s = VehicleState::hover(Vector3::zeros());
        let noise = ImuNoise { accel_sigma: 0.02, gyro_sigma: 0.02 };
        let mut rng = stream(3, Stream::Imu);
        let n = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let g = imu_measure(&s, &noise, &mut rng).gyro.x;
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.02).abs() / 0.02 < 0.05, "std {std}");
    }
}
