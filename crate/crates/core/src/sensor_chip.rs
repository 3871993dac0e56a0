//! Register-level emulation of IMU chips on a polled serial bus.
//!
//! A chip is a register file plus a sampling clock. Writing the power
//! management register can suspend it; writing the rate divider changes how
//! often fresh samples appear. What a suspended chip reports is profile data,
//! so a new part only needs a new [`ChipProfile`] entry.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::ImuSample;
use crate::error::{Result, SimError};
use crate::rng::SimRng;

const TIME_EPS: f64 = 1e-9;

/// Behavior of one sensor (accelerometer or gyroscope) while suspended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuspendBehavior {
    /// The sensor stops answering.
    Absent,
    /// The sensor answers with per-axis constants, optionally with spread.
    Default {
        mean: [f64; 3],
        #[serde(default)]
        std: [f64; 3],
    },
    /// The sensor answers with random data.
    Erroneous { mean: [f64; 3], std: [f64; 3] },
}

/// Coarse class of a suspend behavior, as tabulated per chip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorClass {
    Absent,
    Default,
    Erroneous,
}

impl SuspendBehavior {
    pub fn class(&self) -> BehaviorClass {
        match self {
            SuspendBehavior::Absent => BehaviorClass::Absent,
            SuspendBehavior::Default { .. } => BehaviorClass::Default,
            SuspendBehavior::Erroneous { .. } => BehaviorClass::Erroneous,
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        match self {
            SuspendBehavior::Absent => Ok(()),
            SuspendBehavior::Default { mean, std } | SuspendBehavior::Erroneous { mean, std } => {
                if mean.iter().chain(std.iter()).any(|v| !v.is_finite()) || std.iter().any(|s| *s < 0.0) {
                    return Err(SimError::config(path, "behavior values must be finite with std >= 0"));
                }
                Ok(())
            }
        }
    }

    fn draw(&self, rng: &mut SimRng) -> Option<Vector3<f64>> {
        match self {
            SuspendBehavior::Absent => None,
            SuspendBehavior::Default { mean, std } | SuspendBehavior::Erroneous { mean, std } => {
                let mut v = Vector3::from(*mean);
                for (axis, sigma) in std.iter().enumerate() {
                    if *sigma > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        v[axis] += sigma * z;
                    }
                }
                Some(v)
            }
        }
    }
}

/// Register and value pattern that puts the chip into suspend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuspendPattern {
    pub register: u8,
    pub mask: u8,
    /// The chip is suspended iff `reg & mask == value`.
    pub value: u8,
}

/// Lowest configurable sampling frequencies, Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowestRates {
    pub accel_tested: f64,
    pub accel_allowed: f64,
    pub gyro_tested: f64,
    pub gyro_allowed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipProfile {
    pub name: String,
    pub device_address: u8,
    /// Base rate fed to the sample-rate divider, Hz.
    pub gyro_output_rate: f64,
    /// Rate the chip runs at out of reset when there is no divider register.
    pub nominal_rate: f64,
    pub max_rate: f64,
    pub lowest: LowestRates,
    pub power_mgmt: SuspendPattern,
    #[serde(default)]
    pub rate_divider: Option<u8>,
    /// Register contents after the flight stack has configured the chip.
    #[serde(default)]
    pub reset_registers: BTreeMap<u8, u8>,
    pub accel_suspend: SuspendBehavior,
    pub gyro_suspend: SuspendBehavior,
    /// Rate at which a suspended chip still answers, when it differs from the
    /// configured rate.
    #[serde(default)]
    pub suspend_response_rate: Option<f64>,
}

impl ChipProfile {
    pub fn min_rate(&self) -> f64 {
        self.lowest.gyro_allowed
    }

    pub fn validate(&self) -> Result<()> {
        let path = format!("chip.profiles[{}]", self.name);
        let rates = [self.gyro_output_rate, self.nominal_rate, self.max_rate, self.min_rate()];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(SimError::config(&path, "rates must be positive"));
        }
        if self.min_rate() > self.max_rate {
            return Err(SimError::config(&path, "min rate exceeds max rate"));
        }
        if let Some(r) = self.suspend_response_rate {
            if !(r.is_finite() && r > 0.0) {
                return Err(SimError::config(&path, "suspend_response_rate must be positive"));
            }
        }
        self.accel_suspend.validate(&format!("{path}.accel_suspend"))?;
        self.gyro_suspend.validate(&format!("{path}.gyro_suspend"))
    }

    pub fn mpu6050() -> Self {
        Self {
            name: "MPU6050".into(),
            device_address: 0x68,
            gyro_output_rate: 8000.0,
            nominal_rate: 1000.0,
            max_rate: 8000.0,
            lowest: LowestRates {
                accel_tested: 31.25,
                accel_allowed: 31.25,
                gyro_tested: 31.25,
                gyro_allowed: 31.25,
            },
            power_mgmt: SuspendPattern { register: 0x6B, mask: 0x40, value: 0x40 },
            rate_divider: Some(0x19),
            reset_registers: BTreeMap::from([(0x6B, 0x01), (0x19, 0x07), (0x75, 0x68)]),
            // Same die family as the MPU6000; mirrors its suspend readings.
            accel_suspend: SuspendBehavior::Default {
                mean: [0.2477, 68.9905, -0.3031],
                std: [1.058, 14.563, 1.295],
            },
            gyro_suspend: SuspendBehavior::Default {
                mean: [0.0254, -0.0346, 0.1211],
                std: [0.0; 3],
            },
            suspend_response_rate: None,
        }
    }

    pub fn mpu6000() -> Self {
        Self {
            name: "MPU6000".into(),
            lowest: LowestRates {
                accel_tested: 100.0,
                accel_allowed: 50.0,
                gyro_tested: 100.0,
                gyro_allowed: 50.0,
            },
            suspend_response_rate: Some(100.0),
            ..Self::mpu6050()
        }
    }

    pub fn bmi055() -> Self {
        Self {
            name: "BMI055".into(),
            device_address: 0x18,
            gyro_output_rate: 2000.0,
            nominal_rate: 2000.0,
            max_rate: 2000.0,
            lowest: LowestRates {
                accel_tested: 15.56,
                accel_allowed: 7.81,
                gyro_tested: 32.0,
                gyro_allowed: 32.0,
            },
            power_mgmt: SuspendPattern { register: 0x11, mask: 0x80, value: 0x80 },
            rate_divider: None,
            reset_registers: BTreeMap::from([(0x11, 0x00), (0x00, 0xFA)]),
            accel_suspend: SuspendBehavior::Absent,
            gyro_suspend: SuspendBehavior::Default {
                mean: [-0.0025, -0.002, 0.0012],
                std: [0.0; 3],
            },
            suspend_response_rate: None,
        }
    }

    pub fn bmi270() -> Self {
        Self {
            name: "BMI270".into(),
            device_address: 0x68,
            gyro_output_rate: 3200.0,
            nominal_rate: 1600.0,
            max_rate: 3200.0,
            lowest: LowestRates {
                accel_tested: 12.5,
                accel_allowed: 0.78125,
                gyro_tested: 25.0,
                gyro_allowed: 25.0,
            },
            power_mgmt: SuspendPattern { register: 0x7D, mask: 0x06, value: 0x00 },
            rate_divider: None,
            reset_registers: BTreeMap::from([(0x7D, 0x0E), (0x00, 0x24)]),
            accel_suspend: SuspendBehavior::Default {
                mean: [141.53; 3],
                std: [0.0; 3],
            },
            gyro_suspend: SuspendBehavior::Default {
                mean: [31.48, 31.49, 31.49],
                std: [0.0; 3],
            },
            suspend_response_rate: None,
        }
    }

    pub fn icm42688p() -> Self {
        Self {
            name: "ICM-42688-P".into(),
            device_address: 0x68,
            gyro_output_rate: 32000.0,
            nominal_rate: 1600.0,
            max_rate: 32000.0,
            lowest: LowestRates {
                accel_tested: 12.5,
                accel_allowed: 1.5625,
                gyro_tested: 12.5,
                gyro_allowed: 12.5,
            },
            power_mgmt: SuspendPattern { register: 0x4E, mask: 0x0F, value: 0x00 },
            rate_divider: None,
            reset_registers: BTreeMap::from([(0x4E, 0x0F), (0x75, 0x47)]),
            accel_suspend: SuspendBehavior::Absent,
            gyro_suspend: SuspendBehavior::Absent,
            suspend_response_rate: None,
        }
    }

    pub fn builtin() -> Vec<ChipProfile> {
        vec![
            Self::mpu6050(),
            Self::bmi055(),
            Self::bmi270(),
            Self::icm42688p(),
            Self::mpu6000(),
        ]
    }
}

/// Looks a profile up by name among `extra` first, then the built-ins.
pub fn find_profile(name: &str, extra: &[ChipProfile]) -> Result<ChipProfile> {
    extra
        .iter()
        .cloned()
        .chain(ChipProfile::builtin())
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| SimError::UnknownProfile(name.to_string()))
}

/// What the controller receives from one read. A missing channel is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub time: f64,
    pub accel: Option<Vector3<f64>>,
    pub gyro: Option<Vector3<f64>>,
}

impl Reading {
    pub fn from_sample(s: &ImuSample) -> Self {
        Self {
            time: s.time,
            accel: Some(s.accel),
            gyro: Some(s.gyro),
        }
    }

    pub fn absent(time: f64) -> Self {
        Self { time, accel: None, gyro: None }
    }

    pub fn is_absent(&self) -> bool {
        self.accel.is_none() && self.gyro.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorResponse {
    pub reading: Reading,
    /// A new sample was produced by this read.
    pub fresh: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChipMode {
    Active,
    Suspended,
}

/// The register file and sampling clock of one emulated chip.
#[derive(Debug, Clone)]
pub struct Chip {
    profile: ChipProfile,
    registers: BTreeMap<u8, u8>,
    rate_override: Option<f64>,
    clock_origin: f64,
    samples_taken: u64,
    latched: Option<Reading>,
    rng: SimRng,
}

impl Chip {
    pub fn new(profile: ChipProfile, rng: SimRng) -> Self {
        Self {
            profile,
            registers: BTreeMap::new(),
            rate_override: None,
            clock_origin: 0.0,
            samples_taken: 0,
            latched: None,
            rng,
        }
    }

    pub fn profile(&self) -> &ChipProfile {
        &self.profile
    }

    pub fn read_register(&self, addr: u8) -> u8 {
        self.registers
            .get(&addr)
            .or_else(|| self.profile.reset_registers.get(&addr))
            .copied()
            .unwrap_or(0)
    }

    pub fn mode(&self) -> ChipMode {
        let p = self.profile.power_mgmt;
        if self.read_register(p.register) & p.mask == p.value {
            ChipMode::Suspended
        } else {
            ChipMode::Active
        }
    }

    pub fn is_suspended(&self) -> bool {
        self.mode() == ChipMode::Suspended
    }

    fn restart_clock(&mut self, time: f64) {
        self.clock_origin = time;
        self.samples_taken = 0;
    }

    /// Stores `value` at `addr`. Suspend state and sampling rate follow from
    /// the register contents; writes to other addresses are stored but inert.
    pub fn write_register(&mut self, addr: u8, value: u8, time: f64) {
        let before_mode = self.mode();
        let before_rate = self.effective_sample_rate();
        self.registers.insert(addr, value);
        if self.profile.rate_divider == Some(addr) {
            self.rate_override = None;
        }
        if self.mode() != before_mode || self.effective_sample_rate() != before_rate {
            self.restart_clock(time);
        }
    }

    /// Sets the output data rate directly, the way parts with an ODR field
    /// rather than a divider are reconfigured.
    pub fn configure_rate(&mut self, rate: f64, time: f64) -> Result<()> {
        let p = &self.profile;
        if !(rate.is_finite() && rate >= p.min_rate() - TIME_EPS && rate <= p.max_rate + TIME_EPS) {
            return Err(SimError::config(
                "attack.rate_hz",
                format!("{rate} Hz outside {} range [{}, {}]", p.name, p.min_rate(), p.max_rate),
            ));
        }
        self.rate_override = Some(rate);
        self.restart_clock(time);
        Ok(())
    }

    /// Drops any direct rate configuration and returns to the register-derived rate.
    pub fn restore_rate(&mut self, time: f64) {
        if self.rate_override.take().is_some() {
            self.restart_clock(time);
        }
    }

    /// `gyro_output_rate / (1 + divider)` for chips with a divider register.
    pub fn effective_sample_rate(&self) -> f64 {
        if let Some(rate) = self.rate_override {
            return rate;
        }
        match self.profile.rate_divider {
            Some(addr) => sample_rate(self.profile.gyro_output_rate, self.read_register(addr)),
            None => self.profile.nominal_rate,
        }
    }

    /// Rate at which readings currently appear on the bus.
    pub fn response_rate(&self) -> f64 {
        match (self.mode(), self.profile.suspend_response_rate) {
            (ChipMode::Suspended, Some(rate)) => rate,
            _ => self.effective_sample_rate(),
        }
    }

    fn sample_due(&mut self, time: f64) -> bool {
        let rate = self.response_rate();
        let next = self.clock_origin + self.samples_taken as f64 / rate;
        if time + TIME_EPS >= next {
            let elapsed = time - self.clock_origin;
            self.samples_taken = ((elapsed * rate + TIME_EPS).floor() as u64) + 1;
            true
        } else {
            false
        }
    }

    /// Answers one controller query at `time` given the physical truth.
    pub fn read_sample(&mut self, truth: &ImuSample, time: f64) -> SensorResponse {
        let suspended = self.is_suspended();
        if suspended
            && self.profile.accel_suspend == SuspendBehavior::Absent
            && self.profile.gyro_suspend == SuspendBehavior::Absent
        {
            return SensorResponse {
                reading: Reading::absent(time),
                fresh: false,
            };
        }
        if self.sample_due(time) {
            let reading = if suspended {
                Reading {
                    time,
                    accel: self.profile.accel_suspend.clone().draw(&mut self.rng),
                    gyro: self.profile.gyro_suspend.clone().draw(&mut self.rng),
                }
            } else {
                Reading { time, ..Reading::from_sample(truth) }
            };
            self.latched = Some(reading);
            return SensorResponse { reading, fresh: true };
        }
        SensorResponse {
            reading: self.latched.unwrap_or_else(|| Reading::absent(time)),
            fresh: false,
        }
    }
}

/// Sampling-rate divider formula.
pub fn sample_rate(output_rate: f64, divider: u8) -> f64 {
    output_rate / (1.0 + f64::from(divider))
}

/// A register write placed on the bus by an injector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteCommand {
    pub device_address: u8,
    pub register: u8,
    pub payload: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionOutcome {
    Accepted,
    Collision,
    /// Accepted on the bus but addressed to another device.
    NotAddressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub time: f64,
    pub command: WriteCommand,
    pub outcome: InjectionOutcome,
}

/// Legitimate controller polling on a shared bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BusModel {
    /// Hz
    pub poll_rate: f64,
    /// Time one poll occupies the bus, s.
    pub transaction_duration: f64,
    /// Time of the first poll, s.
    pub first_poll: f64,
    #[serde(skip)]
    pub log: Vec<InjectionRecord>,
}

impl Default for BusModel {
    fn default() -> Self {
        Self {
            poll_rate: 400.0,
            transaction_duration: 0.5e-3,
            first_poll: 0.0,
            log: Vec::new(),
        }
    }
}

impl BusModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.poll_rate.is_finite() && self.poll_rate > 0.0) {
            return Err(SimError::config("bus.poll_rate", "must be positive"));
        }
        if !(self.transaction_duration >= 0.0 && self.transaction_duration < 1.0 / self.poll_rate) {
            return Err(SimError::config("bus.transaction_duration", "must be shorter than the poll period"));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.poll_rate
    }

    /// Start of the most recent poll at or before `time`.
    pub fn last_poll(&self, time: f64) -> f64 {
        let n = ((time - self.first_poll) / self.period() + TIME_EPS).floor();
        self.first_poll + n * self.period()
    }

    pub fn next_poll_time(&self, time: f64) -> f64 {
        self.last_poll(time) + self.period()
    }

    /// True when no poll transaction occupies the bus at `time`.
    pub fn is_idle(&self, time: f64) -> bool {
        if time < self.first_poll {
            return true;
        }
        let phase = time - self.last_poll(time);
        phase > self.transaction_duration + TIME_EPS && phase < self.period() - TIME_EPS
    }

    /// Places a write on the bus; it reaches the chip only in an idle window.
    pub fn inject_message(&mut self, chip: &mut Chip, command: WriteCommand, time: f64) -> Result<InjectionOutcome> {
        if command.device_address > 0x7F {
            return Err(SimError::contract(format!(
                "device address {:#04x} is not a 7-bit address",
                command.device_address
            )));
        }
        let outcome = if !self.is_idle(time) {
            InjectionOutcome::Collision
        } else if command.device_address != chip.profile().device_address {
            InjectionOutcome::NotAddressed
        } else {
            chip.write_register(command.register, command.payload, time);
            InjectionOutcome::Accepted
        };
        self.log.push(InjectionRecord { time, command, outcome });
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn chip(profile: ChipProfile) -> Chip {
        Chip::new(profile, stream(1, Stream::Chip))
    }

    fn truth(t: f64, v: f64) -> ImuSample {
        ImuSample {
            time: t,
            accel: Vector3::new(v, v, 9.81),
            gyro: Vector3::new(v, 0.0, 0.0),
        }
    }

    #[test]
    fn sleep_bit_suspends_mpu6050() {
        let mut c = chip(ChipProfile::mpu6050());
        assert!(!c.is_suspended());
        c.write_register(0x6B, 0x40, 1.0);
        assert_eq!(c.mode(), ChipMode::Suspended);
        c.write_register(0x6B, 0x01, 2.0);
        assert_eq!(c.mode(), ChipMode::Active);
    }

    #[test]
    fn divider_write_sets_rate() {
        let mut c = chip(ChipProfile::mpu6050());
        assert_eq!(c.effective_sample_rate(), 1000.0);
        c.write_register(0x19, 0xFF, 0.0);
        assert_eq!(c.effective_sample_rate(), 31.25);
    }

    #[test]
    fn sample_rate_formula() {
        assert_eq!(sample_rate(8000.0, 255), 31.25);
        assert_eq!(sample_rate(8000.0, 0), 8000.0);
        assert_eq!(sample_rate(8000.0, 7), 1000.0);
    }

    #[test]
    fn inert_register_write() {
        let mut c = chip(ChipProfile::mpu6050());
        let rate = c.effective_sample_rate();
        c.write_register(0x75, 0x00, 0.0);
        assert_eq!(c.effective_sample_rate(), rate);
        assert!(!c.is_suspended());
        assert_eq!(c.read_register(0x75), 0x00);
    }

    #[test]
    fn unwritten_registers_read_reset_values() {
        let c = chip(ChipProfile::mpu6050());
        assert_eq!(c.read_register(0x75), 0x68);
        assert_eq!(c.read_register(0x6B), 0x01);
        assert_eq!(c.read_register(0x42), 0x00);
    }

    #[test]
    fn bmi270_suspended_reports_constants() {
        let mut c = chip(ChipProfile::bmi270());
        c.write_register(0x7D, 0x00, 0.0);
        let r = c.read_sample(&truth(0.0, 1.0), 0.0);
        assert!(r.fresh);
        assert_eq!(r.reading.accel.unwrap(), Vector3::new(141.53, 141.53, 141.53));
        assert_eq!(r.reading.gyro.unwrap(), Vector3::new(31.48, 31.49, 31.49));
    }

    #[test]
    fn icm42688_suspended_is_absent() {
        let mut c = chip(ChipProfile::icm42688p());
        c.write_register(0x4E, 0x00, 0.0);
        for k in 0..10 {
            let r = c.read_sample(&truth(k as f64 * 0.0025, 1.0), k as f64 * 0.0025);
            assert!(!r.fresh);
            assert!(r.reading.is_absent());
        }
    }

    #[test]
    fn latched_between_samples() {
        let mut c = chip(ChipProfile::mpu6050());
        c.write_register(0x19, 0xFF, 0.0); // 31.25 Hz, 32 ms period
        let a = c.read_sample(&truth(0.0, 1.0), 0.0);
        let b = c.read_sample(&truth(0.01, 2.0), 0.01);
        assert!(a.fresh && !b.fresh);
        assert_eq!(a.reading.accel, b.reading.accel);
        let later = c.read_sample(&truth(0.032, 3.0), 0.032);
        assert!(later.fresh);
        assert_eq!(later.reading.gyro.unwrap().x, 3.0);
    }

    #[test]
    fn mpu6000_suspend_slows_response() {
        let mut c = chip(ChipProfile::mpu6000());
        c.write_register(0x6B, 0x40, 0.0);
        assert_eq!(c.response_rate(), 100.0);
        let fresh = (0..400)
            .filter(|k| {
                let t = *k as f64 / 400.0;
                c.read_sample(&truth(t, 0.0), t).fresh
            })
            .count();
        assert_eq!(fresh, 100);
    }

    #[test]
    fn mpu6000_accel_y_is_noisy() {
        let mut c = chip(ChipProfile::mpu6000());
        c.write_register(0x6B, 0x40, 0.0);
        let ys: Vec<f64> = (0..2000)
            .filter_map(|k| {
                let t = k as f64 / 100.0;
                let r = c.read_sample(&truth(t, 0.0), t);
                r.fresh.then(|| r.reading.accel.unwrap().y)
            })
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
        assert!((mean - 68.9905).abs() < 1.5);
        assert!((std - 14.563).abs() / 14.563 < 0.1);
    }

    #[test]
    fn configure_rate_respects_profile_floor() {
        let mut c = chip(ChipProfile::mpu6000());
        assert!(c.configure_rate(40.0, 0.0).is_err());
        c.configure_rate(100.0, 0.0).unwrap();
        assert_eq!(c.effective_sample_rate(), 100.0);
        c.restore_rate(1.0);
        assert_eq!(c.effective_sample_rate(), 1000.0);
    }

    #[test]
    fn injection_window_arithmetic() {
        let mut bus = BusModel::default();
        let mut c = chip(ChipProfile::mpu6050());
        let cmd = WriteCommand { device_address: 0x68, register: 0x6B, payload: 0x40 };
        // 1.2 ms after the poll at 5 ms: the 0.5 ms transaction is over.
        assert_eq!(bus.inject_message(&mut c, cmd, 0.0062).unwrap(), InjectionOutcome::Accepted);
        assert!(c.is_suspended());
    }

    #[test]
    fn injection_during_poll_collides() {
        let mut bus = BusModel::default();
        let mut c = chip(ChipProfile::mpu6050());
        let cmd = WriteCommand { device_address: 0x68, register: 0x6B, payload: 0x40 };
        assert_eq!(bus.inject_message(&mut c, cmd, 0.0051).unwrap(), InjectionOutcome::Collision);
        assert!(!c.is_suspended());
        assert_eq!(bus.log.len(), 1);
        assert_eq!(bus.log[0].outcome, InjectionOutcome::Collision);
    }

    #[test]
    fn accepted_suspend_changes_reads() {
        let mut bus = BusModel::default();
        let mut c = chip(ChipProfile::icm42688p());
        assert!(c.read_sample(&truth(0.0, 1.0), 0.0).fresh);
        let cmd = WriteCommand { device_address: 0x68, register: 0x4E, payload: 0x00 };
        assert_eq!(bus.inject_message(&mut c, cmd, 0.0012).unwrap(), InjectionOutcome::Accepted);
        assert!(c.read_sample(&truth(0.0025, 1.0), 0.0025).reading.is_absent());
    }

    #[test]
    fn malformed_address_rejected() {
        let mut bus = BusModel::default();
        let mut c = chip(ChipProfile::mpu6050());
        let cmd = WriteCommand { device_address: 0xD0, register: 0x6B, payload: 0x40 };
        assert!(bus.inject_message(&mut c, cmd, 0.0012).is_err());
    }

    #[test]
    fn wrong_device_not_addressed() {
        let mut bus = BusModel::default();
        let mut c = chip(ChipProfile::mpu6050());
        let cmd = WriteCommand { device_address: 0x69, register: 0x6B, payload: 0x40 };
        assert_eq!(bus.inject_message(&mut c, cmd, 0.0012).unwrap(), InjectionOutcome::NotAddressed);
        assert!(!c.is_suspended());
    }

    #[test]
    fn profiles_are_valid_and_findable() {
        for p in ChipProfile::builtin() {
            p.validate().unwrap();
            assert_eq!(find_profile(&p.name, &[]).unwrap(), p);
        }
        assert!(matches!(find_profile("nope", &[]), Err(SimError::UnknownProfile(_))));
    }
}
