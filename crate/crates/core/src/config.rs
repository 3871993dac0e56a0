//! Scenario configuration, loaded from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{ChannelMode, Gaussian3, RateSetting, SdaMode, StaleSource};
use crate::control::{ControllerGains, MissionPlan};
use crate::detection::{BusTraffic, FailsafeConfig};
use crate::dynamics::{ImuNoise, QuadrotorParams};
use crate::error::{Result, SimError};
use crate::estimation::EkfConfig;
use crate::scheduler::LoopConfig;
use crate::sensor_chip::{find_profile, BusModel, ChipProfile};
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChipConfig {
    /// Name of the chip on the bus.
    pub profile: String,
    /// Extra profiles, looked up before the built-ins.
    pub profiles: Vec<ChipProfile>,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            profile: "ICM-42688-P".into(),
            profiles: Vec::new(),
        }
    }
}

impl ChipConfig {
    pub fn resolve(&self) -> Result<ChipProfile> {
        let p = find_profile(&self.profile, &self.profiles)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Position fix noise per axis, m.
    pub gps_std: f64,
    /// Barometric altitude noise, m.
    pub baro_std: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { gps_std: 0.3, baro_std: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandConfig {
    /// m/s
    pub descent_rate: f64,
    /// m/s, below `final_altitude`
    pub final_descent_rate: f64,
    /// m
    pub final_altitude: f64,
}

impl Default for LandConfig {
    fn default() -> Self {
        Self {
            descent_rate: 2.5,
            final_descent_rate: 0.7,
            final_altitude: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrashConfig {
    /// Touchdown faster than this is a crash, m/s.
    pub max_impact_speed: f64,
    /// Touchdown tilted more than this is a crash, deg.
    pub max_tilt_deg: f64,
    /// Horizontal distance to the final waypoint that completes the mission, m.
    pub arrival_radius: f64,
}

impl Default for CrashConfig {
    fn default() -> Self {
        Self {
            max_impact_speed: 2.0,
            max_tilt_deg: 60.0,
            arrival_radius: 3.0,
        }
    }
}

/// Attack as written in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackMode {
    Absent,
    Default {
        #[serde(default = "bmi270_accel")]
        accel: [f64; 3],
        #[serde(default = "bmi270_gyro")]
        gyro: [f64; 3],
    },
    Erroneous {
        #[serde(default)]
        accel: Option<Gaussian3>,
        #[serde(default)]
        gyro: Option<Gaussian3>,
    },
    Stale,
    Split {
        accel: ChannelMode,
        gyro: ChannelMode,
    },
    /// Chip clock reconfigured for the window.
    Frequency { rate: RateSetting },
    /// Suspend write injected on the bus at the window start and undone at
    /// its end; what the controller sees is the chip's own suspend behavior.
    Suspend,
    /// The chip's suspend behavior applied as a stream model.
    Chip,
}

fn bmi270_accel() -> [f64; 3] {
    [141.53; 3]
}

fn bmi270_gyro() -> [f64; 3] {
    [31.48, 31.49, 31.49]
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Absent => "absent",
            AttackMode::Default { .. } => "default",
            AttackMode::Erroneous { .. } => "erroneous",
            AttackMode::Stale => "stale",
            AttackMode::Split { .. } => "split",
            AttackMode::Frequency { .. } => "frequency",
            AttackMode::Suspend => "suspend",
            AttackMode::Chip => "chip",
        }
    }

    /// Parses a bare mode name as accepted on the command line.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "absent" => AttackMode::Absent,
            "default" => AttackMode::Default { accel: bmi270_accel(), gyro: bmi270_gyro() },
            "erroneous" => AttackMode::Erroneous { accel: None, gyro: None },
            "stale" => AttackMode::Stale,
            "suspend" => AttackMode::Suspend,
            "chip" => AttackMode::Chip,
            other => {
                let hz = other
                    .strip_prefix("frequency:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| SimError::config("attack.mode", format!("unknown mode `{name}`")))?;
                AttackMode::Frequency { rate: RateSetting::Hz(hz) }
            }
        })
    }

    /// Stream-level model for modes that have one.
    pub fn sda_mode(&self, profile: &ChipProfile) -> Option<SdaMode> {
        match *self {
            AttackMode::Absent => Some(SdaMode::Absent),
            AttackMode::Default { accel, gyro } => Some(SdaMode::Default { accel, gyro }),
            AttackMode::Erroneous { accel, gyro } => Some(SdaMode::Erroneous { accel, gyro }),
            AttackMode::Stale => Some(SdaMode::Stale),
            AttackMode::Split { accel, gyro } => Some(SdaMode::Split { accel, gyro }),
            AttackMode::Frequency { rate } => Some(SdaMode::FrequencyReduction { rate }),
            AttackMode::Chip => crate::attack::mode_from_chip(profile, true),
            AttackMode::Suspend => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// s
    #[serde(default = "default_attack_start")]
    pub start: f64,
    /// s
    #[serde(default = "default_attack_duration")]
    pub duration: f64,
    #[serde(default)]
    pub stale_source: StaleSource,
}

fn default_attack_start() -> f64 {
    20.0
}

fn default_attack_duration() -> f64 {
    1.0
}

impl AttackConfig {
    pub fn new(mode: AttackMode) -> Self {
        Self {
            mode,
            start: default_attack_start(),
            duration: default_attack_duration(),
            stale_source: StaleSource::default(),
        }
    }

    pub fn stop(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub runs: usize,
    pub baseline_runs: usize,
    pub modes: Vec<AttackMode>,
    /// Reference trajectory sampling, Hz.
    pub reference_rate: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            runs: 11,
            baseline_runs: 11,
            modes: vec![
                AttackMode::Stale,
                AttackMode::Default { accel: bmi270_accel(), gyro: bmi270_gyro() },
                // Register garbage rather than a slightly noisy sensor.
                AttackMode::Erroneous {
                    accel: Some(Gaussian3::isotropic(0.0, 20.0)),
                    gyro: Some(Gaussian3::isotropic(0.0, 2.0)),
                },
                AttackMode::Absent,
            ],
            reference_rate: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Hz
    pub rates: Vec<f64>,
    pub runs: usize,
    /// How long the reduced rate is held, s.
    pub duration: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rates: vec![1600.0, 400.0, 200.0, 150.0, 100.0, 50.0, 31.25, 12.5],
            runs: 5,
            duration: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorEvalConfig {
    pub traffic: BusTraffic,
    /// Clean polling rate, Hz.
    pub poll_rate: f64,
    /// s
    pub learn_duration: f64,
    /// s
    pub eval_duration: f64,
    /// s
    pub window: f64,
    /// s
    pub stride: f64,
    /// Reduced rates evaluated as frequency attacks, Hz.
    pub attack_rates: Vec<f64>,
}

impl Default for DetectorEvalConfig {
    fn default() -> Self {
        Self {
            traffic: BusTraffic::default(),
            poll_rate: 400.0,
            learn_duration: 300.0,
            eval_duration: 60.0,
            window: 1.0,
            stride: 0.1,
            attack_rates: vec![100.0, 12.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulated time limit, s.
    pub duration: f64,
    /// Trace sampling, Hz.
    pub trace_rate: f64,
    /// Loop stall after which the flight stack cuts the motors, s.
    pub watchdog_timeout: f64,
    pub plant: QuadrotorParams,
    pub imu: ImuNoise,
    pub chip: ChipConfig,
    pub bus: BusModel,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub ekf: EkfConfig,
    pub fusion: FusionConfig,
    pub gains: ControllerGains,
    pub mission: MissionPlan,
    pub failsafe: FailsafeConfig,
    pub land: LandConfig,
    pub crash: CrashConfig,
    pub attack: Option<AttackConfig>,
    pub campaign: CampaignConfig,
    pub sweep: SweepConfig,
    pub detector: DetectorEvalConfig,
    pub synthesis: SynthesisConfig,
    pub output: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 120.0,
            trace_rate: 50.0,
            watchdog_timeout: 0.5,
            plant: QuadrotorParams::default(),
            imu: ImuNoise::default(),
            chip: ChipConfig::default(),
            bus: BusModel::default(),
            loop_config: LoopConfig::default(),
            ekf: EkfConfig::default(),
            fusion: FusionConfig::default(),
            gains: ControllerGains::default(),
            mission: MissionPlan::default(),
            failsafe: FailsafeConfig::default(),
            land: LandConfig::default(),
            crash: CrashConfig::default(),
            attack: None,
            campaign: CampaignConfig::default(),
            sweep: SweepConfig::default(),
            detector: DetectorEvalConfig::default(),
            synthesis: SynthesisConfig::default(),
            output: None,
        }
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SimError::config(path, "must be > 0"))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::config(toml_error_path(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| SimError::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::config(path.display().to_string(), e.to_string()))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("duration", self.duration)?;
        positive("trace_rate", self.trace_rate)?;
        positive("watchdog_timeout", self.watchdog_timeout)?;
        self.plant.validate()?;
        if self.imu.accel_sigma < 0.0 || self.imu.gyro_sigma < 0.0 {
            return Err(SimError::config("imu", "noise must be >= 0"));
        }
        let profile = self.chip.resolve()?;
        self.bus.validate()?;
        self.loop_config.validate()?;
        self.ekf.validate()?;
        positive("fusion.gps_std", self.fusion.gps_std)?;
        positive("fusion.baro_std", self.fusion.baro_std)?;
        self.gains.validate()?;
        self.mission.validate()?;
        self.failsafe.validate()?;
        positive("land.descent_rate", self.land.descent_rate)?;
        positive("land.final_descent_rate", self.land.final_descent_rate)?;
        if self.land.final_altitude < 0.0 {
            return Err(SimError::config("land.final_altitude", "must be >= 0"));
        }
        positive("crash.max_impact_speed", self.crash.max_impact_speed)?;
        positive("crash.max_tilt_deg", self.crash.max_tilt_deg)?;
        positive("crash.arrival_radius", self.crash.arrival_radius)?;
        if let Some(a) = &self.attack {
            self.validate_attack(a, &profile)?;
        }
        if self.campaign.runs == 0 || self.campaign.baseline_runs == 0 {
            return Err(SimError::config("campaign.runs", "need at least one run"));
        }
        positive("campaign.reference_rate", self.campaign.reference_rate)?;
        if self.sweep.runs == 0 || self.sweep.rates.is_empty() {
            return Err(SimError::config("sweep", "need at least one rate and one run"));
        }
        if self.sweep.rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(SimError::config("sweep.rates", "must be > 0"));
        }
        positive("sweep.duration", self.sweep.duration)?;
        let d = &self.detector;
        positive("detector.poll_rate", d.poll_rate)?;
        positive("detector.window", d.window)?;
        positive("detector.stride", d.stride)?;
        if d.learn_duration < d.window || d.eval_duration < d.window {
            return Err(SimError::config("detector", "durations must cover at least one window"));
        }
        if d.attack_rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(SimError::config("detector.attack_rates", "must be > 0"));
        }
        self.synthesis.validate()?;
        Ok(())
    }

    fn validate_attack(&self, a: &AttackConfig, profile: &ChipProfile) -> Result<()> {
        if !(a.start >= 0.0 && a.start.is_finite() && a.duration >= 0.0 && a.duration.is_finite()) {
            return Err(SimError::config("attack", "need start >= 0 and duration >= 0"));
        }
        if let Some(mode) = a.mode.sda_mode(profile) {
            mode.validate()?;
        }
        if let AttackMode::Frequency { rate: RateSetting::Hz(hz) } = a.mode {
            if !(hz >= profile.min_rate() && hz <= profile.max_rate) {
                return Err(SimError::config(
                    "attack.mode.rate",
                    format!("{hz} Hz outside {} range [{}, {}]", profile.name, profile.min_rate(), profile.max_rate),
                ));
            }
        }
        if let AttackMode::Frequency { rate: RateSetting::Divider(_) } = a.mode {
            if profile.rate_divider.is_none() {
                return Err(SimError::config("attack.mode.rate", format!("{} has no divider register", profile.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn with_attack(&self, mode: AttackMode) -> Self {
        let mut c = self.clone();
        let mut attack = c.attack.clone().unwrap_or_else(|| AttackConfig::new(mode));
        attack.mode = mode;
        c.attack = Some(attack);
        c
    }

    pub fn without_attack(&self) -> Self {
        Self { attack: None, ..self.clone() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SimError::contract(format!("config does not serialize to TOML: {e}")))
    }
}

fn toml_error_path(e: &toml::de::Error) -> String {
    // The message names the offending key; the span is the best path hint toml gives.
    e.span().map_or_else(|| "<toml>".to_string(), |s| format!("byte {}..{}", s.start, s.end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ScenarioConfig::from_toml_str("seed = 3\nbogus = 1\n").unwrap_err();
        assert!(err.is_config(), "{err}");
        assert!(err.to_string().contains("bogus"));
        let err = ScenarioConfig::from_toml_str("[mission]\naltitud = 3\n").unwrap_err();
        assert!(err.to_string().contains("altitud"));
    }

    #[test]
    fn attack_table_parses() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            seed = 7
            [attack]
            start = 10.0
            duration = 1.0
            mode = { kind = "stale" }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.attack.unwrap().mode, AttackMode::Stale);
        let cfg = ScenarioConfig::from_toml_str("[attack.mode]\nkind = \"frequency\"\nrate = { hz = 100.0 }\n").unwrap();
        assert_eq!(cfg.attack.unwrap().mode, AttackMode::Frequency { rate: RateSetting::Hz(100.0) });
    }

    #[test]
    fn out_of_range_rate_rejected() {
        let err = ScenarioConfig::from_toml_str("[attack.mode]\nkind = \"frequency\"\nrate = { hz = 5.0 }\n").unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn json_accepted() {
        let cfg = ScenarioConfig::from_json_str(r#"{"seed": 9, "chip": {"profile": "BMI270"}}"#).unwrap();
        assert_eq!(cfg.chip.profile, "BMI270");
        assert!(ScenarioConfig::from_json_str(r#"{"chip": {"profile": "nope"}}"#).unwrap_err().is_config());
    }

    #[test]
    fn roundtrip_and_hash() {
        let cfg = ScenarioConfig::default().with_attack(AttackMode::Absent);
        let text = toml::to_string(&cfg).unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), ScenarioConfig::default().hash());
    }

    #[test]
    fn mode_names() {
        for name in ["absent", "default", "erroneous", "stale", "suspend", "chip"] {
            assert_eq!(AttackMode::from_name(name).unwrap().name(), name);
        }
        assert_eq!(
            AttackMode::from_name("frequency:12.5").unwrap(),
            AttackMode::Frequency { rate: RateSetting::Hz(12.5) }
        );
        assert!(AttackMode::from_name("loud").is_err());
    }
}
