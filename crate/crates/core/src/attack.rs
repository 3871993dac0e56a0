//! Observation models induced by sensor deprivation.
//!
//! `y^a_k = (1 - γ_k) y_k + γ_k s_k`, where `s_k` is nothing (absent data), a
//! constant (default data), a random draw (erroneous data) or the previous
//! attacked value (stale data). Frequency reduction is not a stream transform;
//! it reconfigures the chip clock and is handled by the simulator.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::ImuNoise;
use crate::error::{Result, SimError};
use crate::rng::SimRng;
use crate::sensor_chip::{find_profile, ChipProfile, Reading, SuspendBehavior};

/// Per-axis Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian3 {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Gaussian3 {
    pub fn isotropic(mean: f64, std: f64) -> Self {
        Self { mean: [mean; 3], std: [std; 3] }
    }

    fn draw(&self, rng: &mut SimRng) -> Vector3<f64> {
        let mut v = Vector3::from(self.mean);
        for (axis, sigma) in self.std.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            v[axis] += sigma * z;
        }
        v
    }

    fn validate(&self, path: &str) -> Result<()> {
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite()) || self.std.iter().any(|s| *s < 0.0) {
            return Err(SimError::config(path, "mean and std must be finite, std >= 0"));
        }
        Ok(())
    }
}

/// What one sensor channel carries while attacked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelMode {
    /// Passed through untouched.
    Clean,
    Absent,
    /// Constant value, with optional spread for parts that jitter around it.
    Default {
        value: [f64; 3],
        #[serde(default)]
        std: [f64; 3],
    },
    Erroneous(Gaussian3),
    Stale,
}

impl ChannelMode {
    fn from_behavior(b: &SuspendBehavior) -> Self {
        match b {
            SuspendBehavior::Absent => ChannelMode::Absent,
            SuspendBehavior::Default { mean, std } => ChannelMode::Default { value: *mean, std: *std },
            SuspendBehavior::Erroneous { mean, std } => ChannelMode::Erroneous(Gaussian3 { mean: *mean, std: *std }),
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        match self {
            ChannelMode::Default { value, std } => Gaussian3 { mean: *value, std: *std }.validate(path),
            ChannelMode::Erroneous(g) => g.validate(path),
            _ => Ok(()),
        }
    }

    fn apply(
        &self,
        clean: Option<Vector3<f64>>,
        last: Option<Vector3<f64>>,
        rng: &mut SimRng,
    ) -> Option<Vector3<f64>> {
        match self {
            ChannelMode::Clean => clean,
            ChannelMode::Absent => None,
            ChannelMode::Default { value, std } => {
                let mut v = Vector3::from(*value);
                for (axis, sigma) in std.iter().enumerate() {
                    if *sigma > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        v[axis] += sigma * z;
                    }
                }
                Some(v)
            }
            ChannelMode::Erroneous(g) => Some(g.draw(rng)),
            ChannelMode::Stale => last,
        }
    }
}

/// How frequency reduction is requested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSetting {
    /// Value written to the sample-rate divider register.
    Divider(u8),
    /// Output data rate set directly, Hz.
    Hz(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SdaMode {
    Absent,
    Default {
        accel: [f64; 3],
        gyro: [f64; 3],
    },
    /// Unset parameters fall back to zero mean and ten times the nominal noise.
    Erroneous {
        #[serde(default)]
        accel: Option<Gaussian3>,
        #[serde(default)]
        gyro: Option<Gaussian3>,
    },
    Stale,
    FrequencyReduction {
        rate: RateSetting,
    },
    /// Independent behaviors per sensor, as on parts with separate dies.
    Split {
        accel: ChannelMode,
        gyro: ChannelMode,
    },
}

impl SdaMode {
    pub fn name(&self) -> &'static str {
        match self {
            SdaMode::Absent => "absent",
            SdaMode::Default { .. } => "default",
            SdaMode::Erroneous { .. } => "erroneous",
            SdaMode::Stale => "stale",
            SdaMode::FrequencyReduction { .. } => "frequency",
            SdaMode::Split { .. } => "split",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let path = "attack.mode";
        match self {
            SdaMode::Default { accel, gyro } => {
                if accel.iter().chain(gyro).any(|v| !v.is_finite()) {
                    return Err(SimError::config(path, "default values must be finite"));
                }
            }
            SdaMode::Erroneous { accel, gyro } => {
                for g in accel.iter().chain(gyro) {
                    g.validate(path)?;
                }
            }
            SdaMode::FrequencyReduction { rate: RateSetting::Hz(hz) } => {
                if !(hz.is_finite() && *hz > 0.0) {
                    return Err(SimError::config(path, "rate must be positive"));
                }
            }
            SdaMode::Split { accel, gyro } => {
                accel.validate(path)?;
                gyro.validate(path)?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-channel transform, or `None` when the mode acts on the chip clock.
    pub fn channels(&self, noise: &ImuNoise) -> Option<(ChannelMode, ChannelMode)> {
        match *self {
            SdaMode::Absent => Some((ChannelMode::Absent, ChannelMode::Absent)),
            SdaMode::Default { accel, gyro } => Some((
                ChannelMode::Default { value: accel, std: [0.0; 3] },
                ChannelMode::Default { value: gyro, std: [0.0; 3] },
            )),
            SdaMode::Erroneous { accel, gyro } => Some((
                ChannelMode::Erroneous(accel.unwrap_or(Gaussian3::isotropic(0.0, 10.0 * noise.accel_sigma))),
                ChannelMode::Erroneous(gyro.unwrap_or(Gaussian3::isotropic(0.0, 10.0 * noise.gyro_sigma))),
            )),
            SdaMode::Stale => Some((ChannelMode::Stale, ChannelMode::Stale)),
            SdaMode::FrequencyReduction { .. } => None,
            SdaMode::Split { accel, gyro } => Some((accel, gyro)),
        }
    }
}

/// Maps a chip's suspend behavior onto the attack vocabulary. An active chip
/// deprives nothing and yields `None`.
pub fn mode_from_chip(profile: &ChipProfile, suspended: bool) -> Option<SdaMode> {
    if !suspended {
        return None;
    }
    let accel = ChannelMode::from_behavior(&profile.accel_suspend);
    let gyro = ChannelMode::from_behavior(&profile.gyro_suspend);
    Some(match (accel, gyro) {
        (ChannelMode::Absent, ChannelMode::Absent) => SdaMode::Absent,
        (ChannelMode::Default { value: a, std: sa }, ChannelMode::Default { value: g, std: sg })
            if sa == [0.0; 3] && sg == [0.0; 3] =>
        {
            SdaMode::Default { accel: a, gyro: g }
        }
        (accel, gyro) => SdaMode::Split { accel, gyro },
    })
}

/// [`mode_from_chip`] for a suspended chip looked up by name.
pub fn mode_from_chip_name(name: &str, extra: &[ChipProfile]) -> Result<SdaMode> {
    let profile = find_profile(name, extra)?;
    Ok(mode_from_chip(&profile, true).expect("suspended chip always maps to a mode"))
}

/// Which value a stale channel replays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleSource {
    /// The previous attacked output; each window starts from the last clean reading.
    #[default]
    Recursive,
    /// The last clean reading before the first attacked step of the run, reused
    /// by every later window.
    PreAttack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub mode: SdaMode,
    /// s
    pub start: f64,
    /// s, exclusive
    pub stop: f64,
    #[serde(default)]
    pub stale_source: StaleSource,
}

impl AttackPlan {
    pub fn new(mode: SdaMode, start: f64, duration: f64) -> Self {
        Self {
            mode,
            start,
            stop: start + duration,
            stale_source: StaleSource::Recursive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if !(self.start.is_finite() && self.stop.is_finite() && self.start >= 0.0 && self.stop >= self.start) {
            return Err(SimError::config("attack", "need 0 <= start <= stop"));
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start && t < self.stop
    }
}

/// γ for step `k` of a loop running at `rate` Hz.
pub fn gamma_from_plan(plan: &AttackPlan, k: u64, rate: f64) -> bool {
    plan.is_active(k as f64 / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Attacked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackedReading {
    pub reading: Reading,
    pub provenance: Provenance,
}

impl AttackedReading {
    pub fn clean(reading: Reading) -> Self {
        Self { reading, provenance: Provenance::Clean }
    }
}

/// One application of the observation model. With `gamma == false` the clean
/// reading is returned bit for bit and no random numbers are consumed.
pub fn apply_sda(
    y: &Reading,
    channels: (ChannelMode, ChannelMode),
    gamma: bool,
    last: &AttackedReading,
    rng: &mut SimRng,
) -> AttackedReading {
    if !gamma {
        return AttackedReading::clean(*y);
    }
    let (accel_mode, gyro_mode) = channels;
    let accel = accel_mode.apply(y.accel, last.reading.accel, rng);
    let gyro = gyro_mode.apply(y.gyro, last.reading.gyro, rng);
    AttackedReading {
        reading: Reading { time: y.time, accel, gyro },
        provenance: Provenance::Attacked,
    }
}

/// Stateful wrapper the simulator runs on each fresh sample.
#[derive(Debug, Clone)]
pub struct AttackLayer {
    channels: Option<(ChannelMode, ChannelMode)>,
    stale_source: StaleSource,
    last: Option<AttackedReading>,
    pre_attack: Option<Reading>,
    rng: SimRng,
}

impl AttackLayer {
    pub fn new(mode: &SdaMode, stale_source: StaleSource, noise: &ImuNoise, rng: SimRng) -> Self {
        Self {
            channels: mode.channels(noise),
            stale_source,
            last: None,
            pre_attack: None,
            rng,
        }
    }

    pub fn process(&mut self, y: &Reading, gamma: bool) -> AttackedReading {
        let Some(channels) = self.channels.filter(|_| gamma) else {
            let out = AttackedReading::clean(*y);
            self.last = Some(out);
            return out;
        };
        let last = match (self.stale_source, self.pre_attack) {
            (StaleSource::PreAttack, Some(r)) => AttackedReading::clean(r),
            _ => self.last.unwrap_or(AttackedReading::clean(*y)),
        };
        if self.pre_attack.is_none() {
            self.pre_attack = Some(last.reading);
        }
        let out = apply_sda(y, channels, true, &last, &mut self.rng);
        self.last = Some(out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn reading(t: f64, v: f64) -> Reading {
        Reading {
            time: t,
            accel: Some(Vector3::new(v, 2.0 * v, 3.0 * v)),
            gyro: Some(Vector3::new(-v, 0.5, v)),
        }
    }

    fn rng() -> SimRng {
        stream(3, Stream::Attack)
    }

    #[test]
    fn gamma_zero_passes_through() {
        let noise = ImuNoise::default();
        let y = reading(0.0, 1.0);
        let modes = [
            SdaMode::Absent,
            SdaMode::Stale,
            SdaMode::Default { accel: [141.53; 3], gyro: [31.48; 3] },
            SdaMode::Erroneous { accel: None, gyro: None },
        ];
        for m in modes {
            let out = apply_sda(&y, m.channels(&noise).unwrap(), false, &AttackedReading::clean(y), &mut rng());
            assert_eq!(out.reading, y);
            assert_eq!(out.provenance, Provenance::Clean);
        }
    }

    #[test]
    fn stale_replays_last_clean_reading() {
        let noise = ImuNoise::default();
        let mut layer = AttackLayer::new(&SdaMode::Stale, StaleSource::Recursive, &noise, rng());
        let r = reading(0.0, 1.0);
        layer.process(&r, false);
        for k in 1..50 {
            let out = layer.process(&reading(k as f64, k as f64 + 5.0), true);
            assert_eq!(out.reading.accel, r.accel);
            assert_eq!(out.reading.gyro, r.gyro);
        }
    }

    #[test]
    fn stale_sources_differ_across_windows() {
        let noise = ImuNoise::default();
        let mut rec = AttackLayer::new(&SdaMode::Stale, StaleSource::Recursive, &noise, rng());
        let mut pre = AttackLayer::new(&SdaMode::Stale, StaleSource::PreAttack, &noise, rng());
        let plan = [(1.0, false), (2.0, true), (3.0, false), (4.0, true)];
        let mut outs = (vec![], vec![]);
        for (v, g) in plan {
            outs.0.push(rec.process(&reading(v, v), g).reading.accel.unwrap().x);
            outs.1.push(pre.process(&reading(v, v), g).reading.accel.unwrap().x);
        }
        assert_eq!(outs.0, vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(outs.1, vec![1.0, 1.0, 3.0, 1.0]);
    }

    #[test]
    fn default_mode_is_profile_constant() {
        let mode = mode_from_chip_name("BMI270", &[]).unwrap();
        let mut layer = AttackLayer::new(&mode, StaleSource::Recursive, &ImuNoise::default(), rng());
        let out = layer.process(&reading(0.0, 1.0), true);
        assert_eq!(out.reading.accel.unwrap(), Vector3::new(141.53, 141.53, 141.53));
        assert_eq!(out.reading.gyro.unwrap(), Vector3::new(31.48, 31.49, 31.49));
    }

    #[test]
    fn absent_mode_drops_both_channels() {
        let mut layer = AttackLayer::new(&SdaMode::Absent, StaleSource::Recursive, &ImuNoise::default(), rng());
        assert!(layer.process(&reading(0.0, 1.0), true).reading.is_absent());
    }

    #[test]
    fn chip_mapping() {
        assert_eq!(mode_from_chip_name("ICM-42688-P", &[]).unwrap(), SdaMode::Absent);
        match mode_from_chip_name("BMI055", &[]).unwrap() {
            SdaMode::Split { accel, gyro } => {
                assert_eq!(accel, ChannelMode::Absent);
                assert_eq!(gyro, ChannelMode::Default { value: [-0.0025, -0.002, 0.0012], std: [0.0; 3] });
            }
            other => panic!("expected split, got {other:?}"),
        }
        assert!(mode_from_chip(&ChipProfile::bmi270(), false).is_none());
        assert!(mode_from_chip_name("XYZ", &[]).is_err());
    }

    #[test]
    fn split_touches_only_its_channel() {
        let mode = SdaMode::Split { accel: ChannelMode::Absent, gyro: ChannelMode::Clean };
        let mut layer = AttackLayer::new(&mode, StaleSource::Recursive, &ImuNoise::default(), rng());
        let y = reading(0.0, 1.0);
        let out = layer.process(&y, true);
        assert_eq!(out.reading.accel, None);
        assert_eq!(out.reading.gyro, y.gyro);
    }

    #[test]
    fn window_membership() {
        let plan = AttackPlan::new(SdaMode::Stale, 4.0, 1.0);
        assert!(plan.is_active(4.5));
        assert!(!plan.is_active(3.9));
        assert!(!plan.is_active(5.0));
        let attacked = (0..4000u64).filter(|k| gamma_from_plan(&plan, *k, 400.0)).count();
        assert_eq!(attacked, 400);
    }

    #[test]
    fn erroneous_defaults_scale_nominal_noise() {
        let noise = ImuNoise { accel_sigma: 0.1, gyro_sigma: 0.01 };
        let (a, g) = SdaMode::Erroneous { accel: None, gyro: None }.channels(&noise).unwrap();
        assert_eq!(a, ChannelMode::Erroneous(Gaussian3::isotropic(0.0, 1.0)));
        assert_eq!(g, ChannelMode::Erroneous(Gaussian3::isotropic(0.0, 0.1)));
    }

    #[test]
    fn erroneous_is_seeded() {
        let mode = SdaMode::Erroneous { accel: None, gyro: None };
        let draw = || {
            let mut layer = AttackLayer::new(&mode, StaleSource::Recursive, &ImuNoise::default(), rng());
            (0..10).map(|k| layer.process(&reading(k as f64, 0.0), true).reading).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn frequency_mode_has_no_stream_transform() {
        let mode = SdaMode::FrequencyReduction { rate: RateSetting::Divider(255) };
        assert!(mode.channels(&ImuNoise::default()).is_none());
        let mut layer = AttackLayer::new(&mode, StaleSource::Recursive, &ImuNoise::default(), rng());
        let y = reading(0.0, 1.0);
        assert_eq!(layer.process(&y, true).reading, y);
    }

    #[test]
    fn config_roundtrip() {
        let plan: AttackPlan = toml::from_str(
            r#"
            start = 20.0
            stop = 21.0
            [mode]
            mode = "erroneous"
            accel = { mean = [0.0, 0.0, 9.81], std = [1.0, 1.0, 1.0] }
            "#,
        )
        .unwrap();
        assert_eq!(plan.mode.name(), "erroneous");
        let freq: SdaMode = toml::from_str("mode = \"frequency_reduction\"\nrate = { hz = 12.5 }").unwrap();
        assert_eq!(freq, SdaMode::FrequencyReduction { rate: RateSetting::Hz(12.5) });
    }
}
