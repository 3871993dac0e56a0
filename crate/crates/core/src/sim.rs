//! Closed-loop flight: plant, IMU chip, attack, scheduler, estimator,
//! controller and failsafe advanced together one loop tick at a time.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackLayer, RateSetting, SdaMode};
use crate::config::{AttackConfig, AttackMode, ScenarioConfig};
use crate::control::{hold_last_control, mission_setpoint, Controller, Setpoint};
use crate::detection::{failsafe_step, FailsafeState};
use crate::dynamics::{imu_measure, step_quadrotor, MotorCommand, VehicleState};
use crate::error::{Result, SimError};
use crate::estimation::{ekf_predict, ekf_update, EkfEstimate, FusionSource};
use crate::rng::{stream, SimRng, Stream};
use crate::scheduler::{Scheduler, Task};
use crate::sensor_chip::{BusModel, Chip, ChipProfile, InjectionOutcome, Reading, WriteCommand};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightMode {
    Mission,
    Land,
    Disarmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Crash,
    Complete,
    Land,
    /// Still airborne at the time limit.
    Timeout,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Crash => "crash",
            Outcome::Complete => "complete",
            Outcome::Land => "land",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum EventKind {
    AttackStart,
    AttackStop,
    Injection { outcome: InjectionOutcome },
    Failsafe,
    WatchdogDisarm,
    Touchdown { speed: f64, tilt_deg: f64 },
    MissionComplete,
}

impl EventKind {
    pub fn label(&self) -> String {
        match self {
            EventKind::AttackStart => "attack_start".into(),
            EventKind::AttackStop => "attack_stop".into(),
            EventKind::Injection { outcome } => format!("injection_{}", serde_json::to_value(outcome).unwrap().as_str().unwrap()),
            EventKind::Failsafe => "failsafe".into(),
            EventKind::WatchdogDisarm => "watchdog_disarm".into(),
            EventKind::Touchdown { .. } => "touchdown".into(),
            EventKind::MissionComplete => "mission_complete".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One row of the flight log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    pub est_roll: f64,
    pub est_pitch: f64,
    pub est_yaw: f64,
    pub innovation_ratio: f64,
    pub gamma: u8,
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub ekf_rate: f64,
    pub mode: FlightMode,
    pub events: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: Outcome,
    pub detected: bool,
    pub attack_start: Option<f64>,
    pub attack_stop: Option<f64>,
    pub failsafe_time: Option<f64>,
    pub touchdown_time: Option<f64>,
    pub end_time: f64,
    /// Failsafe time minus attack start, s.
    pub ttd: Option<f64>,
    /// Crash time minus attack start, s.
    pub ttc: Option<f64>,
    /// Mean estimator rate while attacked, Hz.
    pub attack_ekf_rate: Option<f64>,
    pub events: Vec<Event>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    /// Raw innovation ratio after every fusion step.
    #[serde(skip)]
    pub fusion_ratios: Vec<f64>,
}

/// Chip-level part of an attack, applied on γ edges.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ChipAction {
    Suspend,
    Rate(RateSetting),
}

/// Closed-loop simulation of one flight.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ScenarioConfig,
    profile: ChipProfile,
    truth: VehicleState,
    chip: Chip,
    bus: BusModel,
    layer: AttackLayer,
    stream_attack: bool,
    chip_action: Option<ChipAction>,
    attack: Option<AttackConfig>,
    est: EkfEstimate,
    ctl: Controller,
    sched: Scheduler,
    failsafe: FailsafeState,
    mode: FlightMode,
    cmd: MotorCommand,
    held: Reading,
    k: u64,
    imu_rng: SimRng,
    fusion_rng: SimRng,
    gamma_override: Option<bool>,
    gamma: bool,
    land_hold: Vector3<f64>,
    seed: u64,
    events: Vec<Event>,
    pending_labels: Vec<String>,
    trace: Vec<TraceRow>,
    record_trace: bool,
    trace_every: u64,
    fusion_ratios: Vec<f64>,
    attack_start: Option<f64>,
    attack_stop: Option<f64>,
    attack_ticks: u64,
    attack_execs: u64,
    outcome: Option<Outcome>,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let profile = cfg.chip.resolve()?;
        let start = cfg.mission.start();
        let truth = VehicleState::hover(start);
        let est = EkfEstimate::new(start, Vector3::zeros(), truth.attitude, &cfg.ekf);
        let attack = cfg.attack.clone();
        let sda = attack.as_ref().and_then(|a| a.mode.sda_mode(&profile));
        let (stream_attack, chip_action) = match (attack.as_ref().map(|a| a.mode), sda) {
            (Some(AttackMode::Suspend), _) => (false, Some(ChipAction::Suspend)),
            (_, Some(SdaMode::FrequencyReduction { rate })) => (false, Some(ChipAction::Rate(rate))),
            (_, Some(_)) => (true, None),
            _ => (false, None),
        };
        let layer = AttackLayer::new(
            &sda.unwrap_or(SdaMode::Stale),
            attack.as_ref().map(|a| a.stale_source).unwrap_or_default(),
            &cfg.imu,
            stream(seed, Stream::Attack),
        );
        let trace_every = ((cfg.loop_config.loop_rate / cfg.trace_rate).round() as u64).max(1);
        Ok(Self {
            chip: Chip::new(profile.clone(), stream(seed, Stream::Chip)),
            profile,
            bus: cfg.bus.clone(),
            layer,
            stream_attack,
            chip_action,
            attack,
            ctl: Controller::new(cfg.gains.clone(), cfg.plant.clone()),
            sched: Scheduler::new(cfg.loop_config.clone()),
            failsafe: FailsafeState::from_config(&cfg.failsafe),
            mode: FlightMode::Mission,
            cmd: MotorCommand::uniform(cfg.plant.hover_command()),
            held: Reading::from_sample(&crate::dynamics::ImuSample {
                time: 0.0,
                accel: truth.specific_force,
                gyro: truth.angular_rate,
            }),
            truth,
            est,
            k: 0,
            imu_rng: stream(seed, Stream::Imu),
            fusion_rng: stream(seed, Stream::Fusion),
            gamma_override: None,
            gamma: false,
            land_hold: start,
            seed,
            events: Vec::new(),
            pending_labels: Vec::new(),
            trace: Vec::new(),
            record_trace: true,
            trace_every,
            fusion_ratios: Vec::new(),
            attack_start: None,
            attack_stop: None,
            attack_ticks: 0,
            attack_execs: 0,
            outcome: None,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.k as f64 / self.cfg.loop_config.loop_rate
    }

    pub fn truth(&self) -> &VehicleState {
        &self.truth
    }

    pub fn estimate(&self) -> &EkfEstimate {
        &self.est
    }

    pub fn command(&self) -> MotorCommand {
        self.cmd
    }

    pub fn flight_mode(&self) -> FlightMode {
        self.mode
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn failsafe_triggered(&self) -> bool {
        self.failsafe.triggered
    }

    pub fn gamma(&self) -> bool {
        self.gamma
    }

    pub fn control_error(&self) -> &crate::control::ControlError {
        &self.ctl.last_error
    }

    pub fn chip(&self) -> &Chip {
        &self.chip
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn set_record_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    /// Drives γ directly instead of from the configured window.
    pub fn set_gamma_override(&mut self, gamma: Option<bool>) {
        self.gamma_override = gamma;
    }

    /// Replaces the noise streams, e.g. when restarting from a snapshot.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.imu_rng = stream(seed, Stream::Imu);
        self.fusion_rng = stream(seed, Stream::Fusion);
        self.chip = Chip::new(self.profile.clone(), stream(seed, Stream::Chip));
        let attack_rng = stream(seed, Stream::Attack);
        let sda = self.attack.as_ref().and_then(|a| a.mode.sda_mode(&self.profile));
        self.layer = AttackLayer::new(
            &sda.unwrap_or(SdaMode::Stale),
            self.attack.as_ref().map(|a| a.stale_source).unwrap_or_default(),
            &self.cfg.imu,
            attack_rng,
        );
    }

    fn event(&mut self, kind: EventKind) {
        let time = self.time();
        self.pending_labels.push(kind.label());
        self.events.push(Event { time, kind });
    }

    fn scheduled_gamma(&self, t: f64) -> bool {
        self.attack
            .as_ref()
            .is_some_and(|a| t >= a.start && t < a.stop())
    }

    fn inject(&mut self, register: u8, payload: u8, t: f64) -> Result<()> {
        // Aim for the middle of the idle gap after the current poll.
        let poll = self.bus.last_poll(t);
        let gap = self.bus.period() - self.bus.transaction_duration;
        let at = poll + self.bus.transaction_duration + 0.5 * gap;
        let cmd = WriteCommand {
            device_address: self.profile.device_address,
            register,
            payload,
        };
        let outcome = self.bus.inject_message(&mut self.chip, cmd, at)?;
        self.event(EventKind::Injection { outcome });
        Ok(())
    }

    fn apply_chip_action(&mut self, on: bool, t: f64) -> Result<()> {
        let Some(action) = self.chip_action else { return Ok(()) };
        let pm = self.profile.power_mgmt;
        match (action, on) {
            (ChipAction::Suspend, true) => {
                let current = self.chip.read_register(pm.register);
                self.inject(pm.register, (current & !pm.mask) | pm.value, t)
            }
            (ChipAction::Suspend, false) => {
                let reset = self.profile.reset_registers.get(&pm.register).copied().unwrap_or(!pm.value & pm.mask);
                self.inject(pm.register, reset, t)
            }
            (ChipAction::Rate(RateSetting::Divider(d)), true) => {
                let addr = self.profile.rate_divider.ok_or_else(|| SimError::config("attack.mode.rate", "no divider register"))?;
                self.inject(addr, d, t)
            }
            (ChipAction::Rate(RateSetting::Divider(_)), false) => {
                let addr = self.profile.rate_divider.expect("checked on start");
                let reset = self.profile.reset_registers.get(&addr).copied().unwrap_or(0);
                self.inject(addr, reset, t)
            }
            (ChipAction::Rate(RateSetting::Hz(hz)), true) => self.chip.configure_rate(hz, t),
            (ChipAction::Rate(RateSetting::Hz(_)), false) => {
                self.chip.restore_rate(t);
                Ok(())
            }
        }
    }

    fn setpoint(&self, t: f64) -> Setpoint {
        match self.mode {
            FlightMode::Land => {
                let rate = if self.est.position.z > self.cfg.land.final_altitude {
                    self.cfg.land.descent_rate
                } else {
                    self.cfg.land.final_descent_rate
                };
                Setpoint {
                    position: self.land_hold,
                    yaw: self.cfg.mission.yaw,
                    vertical_velocity: Some(-rate),
                }
            }
            _ => mission_setpoint(&self.cfg.mission, &self.est.position, t),
        }
    }

    fn fuse(&mut self) -> Result<()> {
        let f = &self.cfg.fusion;
        let noise = Vector3::from_fn(|_, _| self.fusion_rng.sample::<f64, _>(StandardNormal));
        let baro: f64 = self.fusion_rng.sample(StandardNormal);
        let fix = self.truth.position + noise * f.gps_std;
        self.est = ekf_update(&self.est, &FusionSource::position_fix(fix, f.gps_std.powi(2)))?;
        let alt = self.truth.position.z + baro * f.baro_std;
        self.est = ekf_update(&self.est, &FusionSource::altitude(alt, f.baro_std.powi(2)))?;
        self.fusion_ratios.push(self.est.test_ratio());
        Ok(())
    }

    /// Advances one loop tick. Returns the outcome once the flight has ended.
    pub fn step(&mut self) -> Result<Option<Outcome>> {
        if let Some(o) = self.outcome {
            return Ok(Some(o));
        }
        let t = self.time();
        let dt = self.cfg.loop_config.dt();

        let gamma = self.gamma_override.unwrap_or_else(|| self.scheduled_gamma(t));
        if gamma != self.gamma {
            self.gamma = gamma;
            if gamma {
                self.attack_start.get_or_insert(t);
                self.event(EventKind::AttackStart);
            } else {
                self.attack_stop = Some(t);
                self.event(EventKind::AttackStop);
            }
            self.apply_chip_action(gamma, t)?;
        }
        if gamma {
            self.attack_ticks += 1;
        }

        let sample = imu_measure(&self.truth, &self.cfg.imu, &mut self.imu_rng);
        let response = self.chip.read_sample(&sample, t);
        let fresh = if response.fresh {
            let attacked = self.layer.process(&response.reading, gamma && self.stream_attack);
            let r = attacked.reading;
            if r.is_absent() {
                None
            } else {
                self.held = Reading {
                    time: t,
                    accel: r.accel.or(self.held.accel),
                    gyro: r.gyro.or(self.held.gyro),
                };
                Some(self.held)
            }
        } else {
            None
        };

        let rec = self.sched.tick(t, fresh.is_some());
        if self.mode != FlightMode::Disarmed {
            if let (Some(reading), Some(exec_dt)) = (fresh, rec.exec_dt) {
                if gamma {
                    self.attack_execs += 1;
                }
                self.est = ekf_predict(&self.est, &reading, exec_dt, &self.cfg.ekf)?;
                if rec.tasks_run.contains(Task::Fusion) {
                    self.fuse()?;
                }
                if !self.est.is_finite() {
                    return Err(SimError::Diverged { t, reason: "estimator state not finite".into() });
                }
                if self.mode == FlightMode::Mission {
                    let stat = self.est.test_ratio() / self.cfg.failsafe.normalization;
                    if failsafe_step(&mut self.failsafe, stat, t) {
                        self.mode = FlightMode::Land;
                        self.land_hold = self.est.position;
                        self.ctl.reset();
                        self.event(EventKind::Failsafe);
                    }
                }
                let sp = self.setpoint(t);
                // Like flight firmware, the controller assumes the nominal loop
                // period however late the data actually arrived.
                self.cmd = self.ctl.compute_control(&self.est, &sp, self.cfg.loop_config.dt());
            } else {
                self.cmd = hold_last_control(&self.cmd);
                if self.sched.stalled_for(t, 0.0) >= self.cfg.watchdog_timeout - 1e-9 {
                    self.mode = FlightMode::Disarmed;
                    self.cmd = MotorCommand::off();
                    self.event(EventKind::WatchdogDisarm);
                }
            }
        }

        self.truth = step_quadrotor(&self.truth, &self.cmd, dt, &self.cfg.plant);
        self.k += 1;
        if !self.truth.is_finite() {
            return Err(SimError::Diverged { t, reason: "vehicle state not finite".into() });
        }

        let now = self.time();
        if self.truth.position.z <= 0.0 {
            let speed = self.truth.velocity.norm();
            let tilt_deg = self.truth.tilt().to_degrees();
            self.event(EventKind::Touchdown { speed, tilt_deg });
            let crash = speed > self.cfg.crash.max_impact_speed || tilt_deg > self.cfg.crash.max_tilt_deg;
            self.outcome = Some(if crash { Outcome::Crash } else { Outcome::Land });
        } else if self.mode == FlightMode::Mission
            && now >= self.cfg.mission.start_time
            && (self.truth.position.xy() - self.cfg.mission.end().xy()).norm() < self.cfg.crash.arrival_radius
        {
            self.event(EventKind::MissionComplete);
            self.outcome = Some(Outcome::Complete);
        } else if now >= self.cfg.duration - 1e-9 {
            self.outcome = Some(Outcome::Timeout);
        }

        if self.record_trace && (self.k.is_multiple_of(self.trace_every) || !self.pending_labels.is_empty() || self.outcome.is_some()) {
            self.push_row(now, rec.effective_ekf_rate);
        }
        self.pending_labels.clear();
        Ok(self.outcome)
    }

    fn push_row(&mut self, t: f64, ekf_rate: f64) {
        let (roll, pitch, yaw) = self.truth.attitude.euler_angles();
        let (est_roll, est_pitch, est_yaw) = self.est.euler();
        let p = &self.truth.position;
        let v = &self.truth.velocity;
        let m = self.cmd.0;
        self.trace.push(TraceRow {
            t,
            x: p.x,
            y: p.y,
            z: p.z,
            vx: v.x,
            vy: v.y,
            vz: v.z,
            roll,
            pitch,
            yaw,
            est_x: self.est.position.x,
            est_y: self.est.position.y,
            est_z: self.est.position.z,
            est_roll,
            est_pitch,
            est_yaw,
            innovation_ratio: self.est.test_ratio() / self.cfg.failsafe.normalization,
            gamma: self.gamma as u8,
            m0: m[0],
            m1: m[1],
            m2: m[2],
            m3: m[3],
            ekf_rate,
            mode: self.mode,
            events: self.pending_labels.join("|"),
        });
    }

    /// Advances up to `ticks` loop ticks, stopping early if the flight ends.
    pub fn advance(&mut self, ticks: u64) -> Result<Option<Outcome>> {
        for _ in 0..ticks {
            if let Some(o) = self.step()? {
                return Ok(Some(o));
            }
        }
        Ok(self.outcome)
    }

    /// Runs to the end of the flight.
    pub fn run(mut self) -> Result<RunResult> {
        if self.record_trace && self.trace.is_empty() {
            self.push_row(0.0, 0.0);
        }
        while self.step()?.is_none() {}
        Ok(self.finish())
    }

    pub fn finish(self) -> RunResult {
        let outcome = self.outcome.unwrap_or(Outcome::Timeout);
        let touchdown_time = self
            .events
            .iter()
            .find(|e| matches!(e.kind, EventKind::Touchdown { .. }))
            .map(|e| e.time);
        let failsafe_time = self.failsafe.trigger_time;
        let since_attack = |t: Option<f64>| t.zip(self.attack_start).map(|(t, a)| t - a);
        let attack_ekf_rate = (self.attack_ticks > 0)
            .then(|| self.attack_execs as f64 / (self.attack_ticks as f64 / self.cfg.loop_config.loop_rate));
        RunResult {
            seed: self.seed,
            outcome,
            detected: failsafe_time.is_some(),
            attack_start: self.attack_start,
            attack_stop: self.attack_stop,
            failsafe_time,
            touchdown_time,
            end_time: self.time(),
            ttd: since_attack(failsafe_time),
            ttc: if outcome == Outcome::Crash { since_attack(touchdown_time) } else { None },
            attack_ekf_rate,
            events: self.events,
            trace: self.trace,
            fusion_ratios: self.fusion_ratios,
        }
    }
}

/// Runs one flight with `cfg`.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunResult> {
    Simulation::new(cfg)?.run()
}
