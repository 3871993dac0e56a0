//! Deterministic closed-loop quadrotor simulation for studying sensor
//! deprivation attacks: an IMU chip emulator whose registers an attacker can
//! rewrite, a firmware-style fast loop (error-state EKF, cascaded PID,
//! mixer) that stalls or degrades with the sensor, an innovation failsafe,
//! an MMIO access monitor, campaign metrics and an attack-synthesis
//! environment with a small policy-gradient trainer.

pub mod attack;
pub mod config;
pub mod control;
pub mod detection;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod metrics;
pub mod rng;
pub mod runner;
pub mod scheduler;
pub mod sensor_chip;
pub mod sim;
pub mod synthesis;

pub use attack::{RateSetting, SdaMode, StaleSource};
pub use config::{AttackConfig, AttackMode, ScenarioConfig};
pub use control::{ControllerGains, MissionPlan};
pub use detection::{AccessBounds, DetectionScore, FailsafeConfig};
pub use dynamics::{MotorCommand, QuadrotorParams, VehicleState};
pub use error::{Result, SimError};
pub use estimation::{EkfConfig, EkfEstimate};
pub use metrics::{CampaignRow, Category, RunSummary, Stats, Trajectory};
pub use runner::{CampaignOutput, DetectorReport, Metadata, RunReport, SweepReport};
pub use sensor_chip::{Chip, ChipProfile};
pub use sim::{simulate, Outcome, RunResult, Simulation, TraceRow};
pub use synthesis::{AttackEnv, AttackPolicy, Observation, Policy, RewardContext, RewardVariant, Rollout, SynthesisConfig};
