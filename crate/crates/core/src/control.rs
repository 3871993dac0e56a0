//! Mission setpoints and the cascaded controller.
//!
//! Position error drives a velocity setpoint, velocity error drives a thrust
//! vector, the thrust direction and yaw give an attitude setpoint, attitude
//! error gives body rates, and rate error gives torques that the mixer turns
//! into per-motor commands.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{MotorCommand, QuadrotorParams, GRAVITY};
use crate::error::{Result, SimError};
use crate::estimation::EkfEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionPlan {
    /// Horizontal waypoints, m.
    pub waypoints: Vec<[f64; 2]>,
    /// m above ground
    pub altitude: f64,
    /// m/s
    pub cruise_speed: f64,
    /// How far ahead of the projection the carrot sits, s of cruise.
    pub lookahead: f64,
    /// Before this time the setpoint stays on the first waypoint, s.
    pub start_time: f64,
    /// rad
    pub yaw: f64,
}

impl Default for MissionPlan {
    fn default() -> Self {
        Self {
            waypoints: vec![[0.0, 0.0], [480.0, 360.0]],
            altitude: 50.0,
            cruise_speed: 10.0,
            lookahead: 2.0,
            start_time: 2.0,
            yaw: 0.0,
        }
    }
}

impl MissionPlan {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(SimError::config("mission.waypoints", "need at least two waypoints"));
        }
        if self.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SimError::config("mission.waypoints", "coordinates must be finite"));
        }
        if self.waypoints.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::config("mission.waypoints", "consecutive waypoints must differ"));
        }
        if !(self.altitude > 0.0 && self.altitude.is_finite()) {
            return Err(SimError::config("mission.altitude", "must be > 0"));
        }
        for (name, v) in [("cruise_speed", self.cruise_speed), ("lookahead", self.lookahead)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::config(format!("mission.{name}"), "must be > 0"));
            }
        }
        if !(self.start_time >= 0.0 && self.yaw.is_finite()) {
            return Err(SimError::config("mission", "start_time must be >= 0 and yaw finite"));
        }
        Ok(())
    }

    pub fn start(&self) -> Vector3<f64> {
        let [x, y] = self.waypoints[0];
        Vector3::new(x, y, self.altitude)
    }

    pub fn end(&self) -> Vector3<f64> {
        let [x, y] = *self.waypoints.last().expect("validated plan");
        Vector3::new(x, y, self.altitude)
    }

    fn legs(&self) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
        self.waypoints
            .windows(2)
            .map(|w| (Vector2::from(w[0]), Vector2::from(w[1])))
    }

    /// Horizontal distance from `p` to the planned polyline, m.
    pub fn cross_track_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = p.xy();
        self.legs()
            .map(|(a, b)| {
                let ab = b - a;
                let s = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (q - (a + ab * s)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoint {
    pub position: Vector3<f64>,
    pub yaw: f64,
    /// Overrides the vertical position loop with a fixed rate, m/s (up positive).
    pub vertical_velocity: Option<f64>,
}

/// Carrot-on-a-string setpoint along the current leg.
pub fn mission_setpoint(plan: &MissionPlan, est_position: &Vector3<f64>, t: f64) -> Setpoint {
    let hold = |p: Vector3<f64>| Setpoint { position: p, yaw: plan.yaw, vertical_velocity: None };
    if t < plan.start_time {
        return hold(plan.start());
    }
    let q = est_position.xy();
    let carrot = plan.cruise_speed * plan.lookahead;
    for (a, b) in plan.legs() {
        let ab = b - a;
        let len = ab.norm();
        let u = ab / len;
        let s = (q - a).dot(&u);
        if s < len {
            let c = a + u * (s.max(0.0) + carrot).min(len);
            return hold(Vector3::new(c.x, c.y, plan.altitude));
        }
    }
    hold(plan.end())
}

/// Per-axis PID gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pid3 {
    pub p: [f64; 3],
    #[serde(default)]
    pub i: [f64; 3],
    #[serde(default)]
    pub d: [f64; 3],
    /// Integrator clamp, output units.
    #[serde(default)]
    pub i_limit: [f64; 3],
}

impl Pid3 {
    pub fn p(p: [f64; 3]) -> Self {
        Self { p, i: [0.0; 3], d: [0.0; 3], i_limit: [0.0; 3] }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let all = self.p.iter().chain(&self.i).chain(&self.d).chain(&self.i_limit);
        if all.clone().any(|v| !v.is_finite()) || self.p.iter().any(|v| *v < 0.0) || self.i_limit.iter().any(|v| *v < 0.0) {
            return Err(SimError::config(path, "gains must be finite with P >= 0 and i_limit >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerGains {
    /// m/s per m
    pub position: Pid3,
    /// m/s² per m/s
    pub velocity: Pid3,
    /// rad/s per rad
    pub attitude: Pid3,
    /// rad/s² per rad/s
    pub rate: Pid3,
    pub max_horizontal_speed: f64,
    pub max_vertical_speed: f64,
    /// rad
    pub max_tilt: f64,
    /// rad/s
    pub max_rate: f64,
    /// First-order smoothing of the attitude setpoint, s. Zero disables it.
    pub attitude_time_constant: f64,
    /// Low-pass cutoff on the gyro rate fed to the rate loop, Hz. Zero
    /// disables it. The filter assumes the nominal loop period.
    pub gyro_filter_hz: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            position: Pid3::p([0.5, 0.5, 1.0]),
            velocity: Pid3 {
                p: [1.8, 1.8, 3.0],
                i: [0.4, 0.4, 1.0],
                d: [0.0; 3],
                i_limit: [3.0, 3.0, 3.0],
            },
            attitude: Pid3::p([5.0, 5.0, 3.0]),
            rate: Pid3 {
                p: [20.0, 20.0, 10.0],
                i: [5.0, 5.0, 2.0],
                d: [0.3, 0.3, 0.0],
                i_limit: [5.0, 5.0, 2.0],
            },
            max_horizontal_speed: 12.0,
            max_vertical_speed: 4.0,
            max_tilt: 35f64.to_radians(),
            max_rate: 4.0,
            attitude_time_constant: 0.3,
            gyro_filter_hz: 20.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        self.position.validate("gains.position")?;
        self.velocity.validate("gains.velocity")?;
        self.attitude.validate("gains.attitude")?;
        self.rate.validate("gains.rate")?;
        let limits = [self.max_horizontal_speed, self.max_vertical_speed, self.max_tilt, self.max_rate];
        if limits.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.max_tilt >= std::f64::consts::FRAC_PI_2 {
            return Err(SimError::config("gains", "limits must be positive, max_tilt below 90 degrees"));
        }
        if !(self.attitude_time_constant.is_finite() && self.attitude_time_constant >= 0.0) {
            return Err(SimError::config("gains.attitude_time_constant", "must be >= 0"));
        }
        if !(self.gyro_filter_hz.is_finite() && self.gyro_filter_hz >= 0.0) {
            return Err(SimError::config("gains.gyro_filter_hz", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PidState {
    integral: Vector3<f64>,
    prev_error: Option<Vector3<f64>>,
}

impl PidState {
    fn step(&mut self, g: &Pid3, error: Vector3<f64>, dt: f64) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        let deriv = self.prev_error.map_or(Vector3::zeros(), |prev| (error - prev) / dt);
        for i in 0..3 {
            self.integral[i] = (self.integral[i] + g.i[i] * error[i] * dt).clamp(-g.i_limit[i], g.i_limit[i]);
            out[i] = g.p[i] * error[i] + self.integral[i] + g.d[i] * deriv[i];
        }
        self.prev_error = Some(error);
        out
    }
}

/// Control error of the latest cycle, one entry per loop stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlError {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Vector3<f64>,
    pub rate: Vector3<f64>,
}

/// Cascaded PID controller with its integrator state.
#[derive(Debug, Clone)]
pub struct Controller {
    pub gains: ControllerGains,
    params: QuadrotorParams,
    position: PidState,
    velocity: PidState,
    rate: PidState,
    shaped: Option<UnitQuaternion<f64>>,
    filtered_rate: Option<Vector3<f64>>,
    pub last_error: ControlError,
}

fn clamp_norm(v: Vector2<f64>, max: f64) -> Vector2<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Attitude whose body z is along `thrust_dir` and whose heading is `yaw`.
fn attitude_from_thrust(thrust_dir: &Vector3<f64>, yaw: f64) -> UnitQuaternion<f64> {
    let b3 = thrust_dir.normalize();
    let c1 = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let b2 = b3.cross(&c1).normalize();
    let b1 = b2.cross(&b3);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[b1, b2, b3])))
}

impl Controller {
    pub fn new(gains: ControllerGains, params: QuadrotorParams) -> Self {
        Self {
            gains,
            params,
            position: PidState::default(),
            velocity: PidState::default(),
            rate: PidState::default(),
            shaped: None,
            filtered_rate: None,
            last_error: ControlError::default(),
        }
    }

    pub fn reset(&mut self) {
        self.position = PidState::default();
        self.velocity = PidState::default();
        self.rate = PidState::default();
        self.shaped = None;
        self.filtered_rate = None;
    }

    /// One pass through the cascade. `dt` is the time since the previous pass.
    pub fn compute_control(&mut self, est: &EkfEstimate, sp: &Setpoint, dt: f64) -> MotorCommand {
        debug_assert!(dt > 0.0);
        let g = self.gains.clone();

        let pos_err = sp.position - est.position;
        let mut vel_sp = self.position.step(&g.position, pos_err, dt);
        let h = clamp_norm(vel_sp.xy(), g.max_horizontal_speed);
        vel_sp.x = h.x;
        vel_sp.y = h.y;
        vel_sp.z = sp.vertical_velocity.unwrap_or(vel_sp.z).clamp(-g.max_vertical_speed, g.max_vertical_speed);

        let vel_err = vel_sp - est.velocity;
        let acc_sp = self.velocity.step(&g.velocity, vel_err, dt);
        let mut thrust = (acc_sp + Vector3::new(0.0, 0.0, GRAVITY)) * self.params.mass;
        thrust.z = thrust.z.max(0.1 * self.params.weight());
        let max_h = thrust.z * g.max_tilt.tan();
        let th = clamp_norm(thrust.xy(), max_h);
        thrust.x = th.x;
        thrust.y = th.y;

        let target = attitude_from_thrust(&thrust, sp.yaw);
        let att_sp = match self.shaped {
            Some(prev) if g.attitude_time_constant > 0.0 => {
                let alpha = dt / (g.attitude_time_constant + dt);
                prev.try_slerp(&target, alpha, 1e-9).unwrap_or(target)
            }
            _ => target,
        };
        self.shaped = Some(att_sp);
        let q_err = est.attitude.inverse() * att_sp;
        let sign = if q_err.w < 0.0 { -1.0 } else { 1.0 };
        let att_err = q_err.imag() * (2.0 * sign);
        let mut rate_sp = Vector3::from_iterator((0..3).map(|i| g.attitude.p[i] * att_err[i]));
        for v in rate_sp.iter_mut() {
            *v = v.clamp(-g.max_rate, g.max_rate);
        }

        let rate = match self.filtered_rate {
            Some(prev) if g.gyro_filter_hz > 0.0 => {
                let rc = 1.0 / (std::f64::consts::TAU * g.gyro_filter_hz);
                prev + (est.angular_rate - prev) * (dt / (rc + dt))
            }
            _ => est.angular_rate,
        };
        self.filtered_rate = Some(rate);
        let rate_err = rate_sp - rate;
        let ang_acc = self.rate.step(&g.rate, rate_err, dt);
        let torque = Vector3::from_iterator((0..3).map(|i| self.params.inertia[i] * ang_acc[i]));

        let body_z = est.attitude * Vector3::z();
        let collective = thrust.dot(&body_z).max(0.0);
        self.last_error = ControlError {
            position: pos_err,
            velocity: vel_err,
            attitude: att_err,
            rate: rate_err,
        };
        MotorCommand(self.mix(collective, &torque).map(|f| f / self.params.max_motor_thrust)).saturated()
    }

    /// Allocation with roll and pitch taking priority: yaw torque is scaled
    /// down to whatever headroom the motors have left.
    fn mix(&self, collective: f64, torque: &Vector3<f64>) -> [f64; 4] {
        let base = self.params.allocate(collective, &Vector3::new(torque.x, torque.y, 0.0));
        let yaw = self.params.allocate(0.0, &Vector3::new(0.0, 0.0, torque.z));
        let max = self.params.max_motor_thrust;
        let scale = base.iter().zip(&yaw).fold(1.0f64, |acc, (b, y)| {
            let room = if *y > 0.0 {
                (max - b) / y
            } else if *y < 0.0 {
                b / -y
            } else {
                f64::INFINITY
            };
            acc.min(room.max(0.0))
        });
        std::array::from_fn(|i| base[i] + scale * yaw[i])
    }
}

/// The command applied while the loop is stalled.
pub fn hold_last_control(prev: &MotorCommand) -> MotorCommand {
    *prev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::EkfConfig;

    fn estimate_at(p: Vector3<f64>) -> EkfEstimate {
        EkfEstimate::new(p, Vector3::zeros(), UnitQuaternion::identity(), &EkfConfig::default())
    }

    fn controller() -> Controller {
        Controller::new(ControllerGains::default(), QuadrotorParams::default())
    }

    fn plan_x() -> MissionPlan {
        MissionPlan {
            waypoints: vec![[0.0, 0.0], [100.0, 0.0]],
            start_time: 0.0,
            ..MissionPlan::default()
        }
    }

    #[test]
    fn carrot_ahead_on_leg() {
        let plan = plan_x();
        let sp = mission_setpoint(&plan, &Vector3::new(0.0, 0.0, 50.0), 1.0);
        assert_eq!(sp.position, Vector3::new(20.0, 0.0, 50.0));
    }

    #[test]
    fn on_leg_has_no_cross_track() {
        let plan = plan_x();
        let p = Vector3::new(30.0, 0.0, 50.0);
        let sp = mission_setpoint(&plan, &p, 1.0);
        assert_eq!(sp.position.y, 0.0);
        assert_eq!(plan.cross_track_distance(&p), 0.0);
    }

    #[test]
    fn lateral_offset_pulls_back() {
        let plan = plan_x();
        let p = Vector3::new(30.0, 1.0, 50.0);
        let sp = mission_setpoint(&plan, &p, 1.0);
        assert_eq!(sp.position, Vector3::new(50.0, 0.0, 50.0));
        assert!((sp.position - p).y < 0.0);
        assert_eq!(plan.cross_track_distance(&p), 1.0);
    }

    #[test]
    fn past_end_holds_last_waypoint() {
        let plan = plan_x();
        let sp = mission_setpoint(&plan, &Vector3::new(130.0, 2.0, 50.0), 1.0);
        assert_eq!(sp.position, plan.end());
        let near_end = mission_setpoint(&plan, &Vector3::new(95.0, 0.0, 50.0), 1.0);
        assert_eq!(near_end.position, plan.end());
    }

    #[test]
    fn multi_leg_switches_at_corner() {
        let plan = MissionPlan {
            waypoints: vec![[0.0, 0.0], [100.0, 0.0], [100.0, 100.0]],
            start_time: 0.0,
            ..MissionPlan::default()
        };
        let sp = mission_setpoint(&plan, &Vector3::new(100.5, 0.0, 50.0), 1.0);
        assert_eq!(sp.position, Vector3::new(100.0, 20.0, 50.0));
    }

    #[test]
    fn holds_start_before_start_time() {
        let plan = MissionPlan::default();
        let sp = mission_setpoint(&plan, &Vector3::new(3.0, 3.0, 50.0), 0.5);
        assert_eq!(sp.position, plan.start());
    }

    #[test]
    fn zero_error_is_exact_hover() {
        let mut c = controller();
        let p = Vector3::new(1.0, 2.0, 50.0);
        let sp = Setpoint { position: p, yaw: 0.0, vertical_velocity: None };
        let cmd = c.compute_control(&estimate_at(p), &sp, 0.0025);
        assert_eq!(cmd, MotorCommand::uniform(0.5));
    }

    #[test]
    fn below_altitude_adds_thrust() {
        let mut c = controller();
        let sp = Setpoint { position: Vector3::new(0.0, 0.0, 50.0), yaw: 0.0, vertical_velocity: None };
        let cmd = c.compute_control(&estimate_at(Vector3::new(0.0, 0.0, 49.0)), &sp, 0.0025);
        assert!(cmd.0.iter().all(|m| *m > 0.5));
        assert!(cmd.0.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn believed_roll_is_countered() {
        let mut c = controller();
        let p = Vector3::new(0.0, 0.0, 50.0);
        let mut est = estimate_at(p);
        est.attitude = UnitQuaternion::from_euler_angles(0.6, 0.0, 0.0);
        est.angular_rate = Vector3::new(31.48, 31.49, 31.49);
        let sp = Setpoint { position: p, yaw: 0.0, vertical_velocity: None };
        let cmd = c.compute_control(&est, &sp, 0.0025);
        // Negative roll torque: right-side motors (m1, m2) above the left pair.
        let roll_diff = (cmd.0[1] + cmd.0[2]) - (cmd.0[0] + cmd.0[3]);
        assert!(roll_diff > 0.5, "roll differential {roll_diff}");
    }

    #[test]
    fn hold_keeps_command() {
        let asym = MotorCommand([0.4, 0.6, 0.5, 0.55]);
        let mut cmd = asym;
        for _ in 0..400 {
            cmd = hold_last_control(&cmd);
            assert_eq!(cmd, asym);
        }
    }

    #[test]
    fn rejects_bad_plans() {
        let mut plan = MissionPlan::default();
        plan.waypoints.truncate(1);
        assert!(plan.validate().is_err());
        let plan = MissionPlan { altitude: -1.0, ..MissionPlan::default() };
        assert!(plan.validate().is_err());
        MissionPlan::default().validate().unwrap();
        ControllerGains::default().validate().unwrap();
    }
}
