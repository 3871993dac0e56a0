//! Error-state extended Kalman filter.
//!
//! Nominal state is position, velocity and attitude. The filter tracks a
//! 9-dimensional error `[δθ, δv, δp]` with the attitude error expressed in the
//! world frame (`q_true = Exp(δθ) ⊗ q`). Prediction runs on IMU data; position
//! fixes and altitude readings correct it, and every correction records the
//! normalized innovation the failsafe watches.

use nalgebra::{SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::GRAVITY;
use crate::error::{Result, SimError};
use crate::sensor_chip::Reading;

pub type Mat9 = SMatrix<f64, 9, 9>;
type Vec9 = SVector<f64, 9>;

const ATT: usize = 0;
const VEL: usize = 3;
const POS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    /// Gyro white-noise density, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer white-noise density, m/s²/√Hz.
    pub accel_noise: f64,
    /// Extra position random walk, m/√s.
    pub position_noise: f64,
    pub initial_attitude_std: f64,
    pub initial_velocity_std: f64,
    pub initial_position_std: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 0.0005,
            accel_noise: 0.05,
            position_noise: 0.01,
            initial_attitude_std: 0.02,
            initial_velocity_std: 0.1,
            initial_position_std: 0.5,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise,
            self.accel_noise,
            self.position_noise,
            self.initial_attitude_std,
            self.initial_velocity_std,
            self.initial_position_std,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::config("ekf", "noise parameters must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    PositionFix,
    Altitude,
}

impl FusionKind {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSource {
    pub kind: FusionKind,
    /// World position; altitude sources only use `z`.
    pub reading: Vector3<f64>,
    /// Per-axis measurement variance, m².
    pub variance: f64,
}

impl FusionSource {
    pub fn position_fix(reading: Vector3<f64>, variance: f64) -> Self {
        Self { kind: FusionKind::PositionFix, reading, variance }
    }

    pub fn altitude(z: f64, variance: f64) -> Self {
        Self {
            kind: FusionKind::Altitude,
            reading: Vector3::new(0.0, 0.0, z),
            variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfEstimate {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Body to world.
    pub attitude: UnitQuaternion<f64>,
    pub covariance: Mat9,
    /// Residual of the latest update, pre-correction.
    pub innovation: Vec<f64>,
    /// `νᵀ S⁻¹ ν / dim` of the latest update.
    pub innovation_variance_ratio: f64,
    /// Latest ratio per fusion kind.
    pub source_ratios: [f64; 2],
    pub last_predict_time: f64,
    /// Body rates from the latest IMU reading, rad/s.
    pub angular_rate: Vector3<f64>,
    /// Specific force from the latest IMU reading, body frame.
    pub specific_force: Vector3<f64>,
}

impl EkfEstimate {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, attitude: UnitQuaternion<f64>, cfg: &EkfConfig) -> Self {
        let mut p = Mat9::zeros();
        for i in 0..3 {
            p[(ATT + i, ATT + i)] = cfg.initial_attitude_std.powi(2);
            p[(VEL + i, VEL + i)] = cfg.initial_velocity_std.powi(2);
            p[(POS + i, POS + i)] = cfg.initial_position_std.powi(2);
        }
        Self {
            position,
            velocity,
            attitude,
            covariance: p,
            innovation: Vec::new(),
            innovation_variance_ratio: 0.0,
            source_ratios: [0.0; 2],
            last_predict_time: 0.0,
            angular_rate: Vector3::zeros(),
            specific_force: Vector3::new(0.0, 0.0, GRAVITY),
        }
    }

    /// The failsafe statistic: worst latest ratio over all fusion kinds.
    pub fn test_ratio(&self) -> f64 {
        self.source_ratios.iter().copied().fold(0.0, f64::max)
    }

    pub fn euler(&self) -> (f64, f64, f64) {
        self.attitude.euler_angles()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.covariance.iter().all(|v| v.is_finite())
    }
}

fn skew(v: &Vector3<f64>) -> SMatrix<f64, 3, 3> {
    SMatrix::<f64, 3, 3>::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn symmetrize(p: &mut Mat9) {
    *p = (*p + p.transpose()) * 0.5;
}

/// Propagates the estimate with one IMU reading over `dt` seconds.
pub fn ekf_predict(est: &EkfEstimate, imu: &Reading, dt: f64, cfg: &EkfConfig) -> Result<EkfEstimate> {
    let (Some(accel), Some(gyro)) = (imu.accel, imu.gyro) else {
        return Err(SimError::contract("prediction needs both accel and gyro data"));
    };
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::contract(format!("prediction step dt={dt} must be positive")));
    }
    let r = est.attitude.to_rotation_matrix();
    let acc_world = r * accel - Vector3::new(0.0, 0.0, GRAVITY);

    let mut next = est.clone();
    next.attitude = est.attitude * UnitQuaternion::from_scaled_axis(gyro * dt);
    next.attitude.renormalize();
    next.position = est.position + est.velocity * dt + acc_world * (0.5 * dt * dt);
    next.velocity = est.velocity + acc_world * dt;
    next.last_predict_time = imu.time;
    next.angular_rate = gyro;
    next.specific_force = accel;

    let mut phi = Mat9::identity();
    phi.fixed_view_mut::<3, 3>(VEL, ATT).copy_from(&(-skew(&(r * accel)) * dt));
    phi.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(SMatrix::<f64, 3, 3>::identity() * dt));
    let mut q = Mat9::zeros();
    for i in 0..3 {
        q[(ATT + i, ATT + i)] = cfg.gyro_noise.powi(2) * dt;
        q[(VEL + i, VEL + i)] = cfg.accel_noise.powi(2) * dt;
        q[(POS + i, POS + i)] = cfg.position_noise.powi(2) * dt;
    }
    next.covariance = phi * est.covariance * phi.transpose() + q;
    symmetrize(&mut next.covariance);
    Ok(next)
}

fn correct<const D: usize>(
    est: &EkfEstimate,
    kind: FusionKind,
    h: SMatrix<f64, D, 9>,
    residual: SVector<f64, D>,
    variance: f64,
) -> Result<EkfEstimate> {
    let name = match kind {
        FusionKind::PositionFix => "position fix",
        FusionKind::Altitude => "altitude",
    };
    let r = SMatrix::<f64, D, D>::identity() * variance;
    let p = &est.covariance;
    let s = h * p * h.transpose() + r;
    let chol = s.cholesky().ok_or(SimError::SingularInnovation(name))?;
    let s_inv = chol.inverse();
    let k = p * h.transpose() * s_inv;
    let dx: Vec9 = k * residual;

    let mut next = est.clone();
    let dtheta = Vector3::new(dx[ATT], dx[ATT + 1], dx[ATT + 2]);
    next.attitude = UnitQuaternion::from_scaled_axis(dtheta) * est.attitude;
    next.attitude.renormalize();
    next.velocity += Vector3::new(dx[VEL], dx[VEL + 1], dx[VEL + 2]);
    next.position += Vector3::new(dx[POS], dx[POS + 1], dx[POS + 2]);

    let ikh = Mat9::identity() - k * h;
    next.covariance = ikh * p * ikh.transpose() + k * r * k.transpose();
    symmetrize(&mut next.covariance);

    let ratio = (residual.transpose() * s_inv * residual)[(0, 0)] / D as f64;
    next.innovation = residual.iter().copied().collect();
    next.innovation_variance_ratio = ratio;
    next.source_ratios[kind.index()] = ratio;
    Ok(next)
}

/// Fuses one position or altitude measurement.
pub fn ekf_update(est: &EkfEstimate, source: &FusionSource) -> Result<EkfEstimate> {
    if !source.reading.iter().all(|v| v.is_finite()) {
        return Err(SimError::contract("fusion reading must be finite"));
    }
    if source.variance.is_infinite() {
        return Ok(est.clone());
    }
    if !(source.variance > 0.0) {
        return Err(SimError::contract("fusion variance must be positive"));
    }
    match source.kind {
        FusionKind::PositionFix => {
            let mut h = SMatrix::<f64, 3, 9>::zeros();
            h.fixed_view_mut::<3, 3>(0, POS).fill_with_identity();
            correct(est, source.kind, h, source.reading - est.position, source.variance)
        }
        FusionKind::Altitude => {
            let mut h = SMatrix::<f64, 1, 9>::zeros();
            h[(0, POS + 2)] = 1.0;
            let residual = SVector::<f64, 1>::new(source.reading.z - est.position.z);
            correct(est, source.kind, h, residual, source.variance)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn level() -> EkfEstimate {
        EkfEstimate::new(Vector3::new(0.0, 0.0, 50.0), Vector3::zeros(), UnitQuaternion::identity(), &EkfConfig::default())
    }

    fn imu(t: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Reading {
        Reading { time: t, accel: Some(accel), gyro: Some(gyro) }
    }

    fn hover_imu(t: f64) -> Reading {
        imu(t, Vector3::new(0.0, 0.0, GRAVITY), Vector3::zeros())
    }

    #[test]
    fn equilibrium_only_grows_covariance() {
        let e0 = level();
        let e1 = ekf_predict(&e0, &hover_imu(0.0025), 0.0025, &EkfConfig::default()).unwrap();
        assert_eq!(e1.position, e0.position);
        assert_eq!(e1.velocity, e0.velocity);
        assert!(e1.attitude.angle_to(&e0.attitude) < 1e-15);
        assert!(e1.covariance.trace() > e0.covariance.trace());
    }

    #[test]
    fn constant_yaw_rate_integrates() {
        let cfg = EkfConfig::default();
        let mut e = level();
        for k in 1..=400 {
            e = ekf_predict(&e, &imu(k as f64 / 400.0, Vector3::new(0.0, 0.0, GRAVITY), Vector3::new(0.0, 0.0, 0.1)), 0.0025, &cfg)
                .unwrap();
        }
        let (_, _, yaw) = e.euler();
        assert!((yaw - 0.1).abs() < 1e-6);
    }

    #[test]
    fn default_gyro_spins_the_estimate() {
        // 31.48 rad/s for one second is about 1803.7 degrees of believed rotation.
        let cfg = EkfConfig::default();
        let mut e = level();
        let rate = Vector3::new(31.48, 0.0, 0.0);
        for k in 1..=400 {
            e = ekf_predict(&e, &imu(k as f64 / 400.0, Vector3::new(0.0, 0.0, GRAVITY), rate), 0.0025, &cfg).unwrap();
        }
        let expected = UnitQuaternion::from_scaled_axis(rate);
        assert!(e.attitude.angle_to(&expected) < 1e-9);
        assert!((31.48f64.to_degrees() - 1803.67).abs() < 0.01);
    }

    #[test]
    fn absent_input_is_contract_violation() {
        let r = Reading::absent(0.0);
        assert!(matches!(ekf_predict(&level(), &r, 0.0025, &EkfConfig::default()), Err(SimError::Contract(_))));
    }

    #[test]
    fn matching_measurement_leaves_state() {
        let e = level();
        let u = ekf_update(&e, &FusionSource::position_fix(e.position, 1.0)).unwrap();
        assert_eq!(u.position, e.position);
        assert_eq!(u.velocity, e.velocity);
        assert!(u.innovation.iter().all(|v| *v == 0.0));
        assert_eq!(u.innovation_variance_ratio, 0.0);
    }

    #[test]
    fn offset_fix_scalar_gain() {
        let e = level();
        let p0 = e.covariance[(POS, POS)];
        let r = 0.01;
        let fix = e.position + Vector3::new(1.0, 0.0, 0.0);
        let u = ekf_update(&e, &FusionSource::position_fix(fix, r)).unwrap();
        assert_eq!(u.innovation[0], 1.0);
        // Position axes are uncorrelated at start: scalar gain P/(P+R).
        assert_relative_eq!(u.position.x, p0 / (p0 + r), epsilon = 1e-12);
        assert_relative_eq!(u.innovation_variance_ratio, 1.0 / (p0 + r) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_fixes_shrink_position_covariance() {
        let e0 = level();
        let mut e = e0.clone();
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            e = ekf_update(&e, &FusionSource::position_fix(e0.position, 0.25)).unwrap();
            let tr = e.covariance.fixed_view::<3, 3>(POS, POS).trace();
            assert!(tr <= prev);
            prev = tr;
        }
    }

    #[test]
    fn infinite_variance_is_no_op() {
        let e = level();
        let u = ekf_update(&e, &FusionSource::position_fix(Vector3::new(5.0, 5.0, 5.0), f64::INFINITY)).unwrap();
        assert_eq!(u, e);
    }

    #[test]
    fn altitude_update_moves_only_height() {
        let e = level();
        let u = ekf_update(&e, &FusionSource::altitude(51.0, 0.1)).unwrap();
        assert!(u.position.z > 50.0);
        assert_eq!(u.position.x, 0.0);
        assert_eq!(u.source_ratios[FusionKind::Altitude.index()], u.innovation_variance_ratio);
        assert_eq!(u.test_ratio(), u.innovation_variance_ratio);
    }

    #[test]
    fn rejects_nonfinite_reading() {
        let e = level();
        assert!(ekf_update(&e, &FusionSource::altitude(f64::NAN, 0.1)).is_err());
    }
}
