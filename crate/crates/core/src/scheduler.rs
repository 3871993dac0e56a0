//! Fast-loop scheduling coupled to IMU data arrival.
//!
//! The main loop ticks at a fixed rate but only executes when a fresh IMU
//! sample has arrived since its previous execution. Prediction and control
//! run on every execution; slower periodic tasks run on the first execution at
//! or after their due time. A slow sensor therefore slows everything, and a
//! silent one stops everything.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ekf,
    Control,
    Fusion,
    Telemetry,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ekf, Task::Control, Task::Fusion, Task::Telemetry];

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Set of tasks run in one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskSet(u8);

impl TaskSet {
    pub fn insert(&mut self, t: Task) {
        self.0 |= t.bit();
    }

    pub fn contains(&self, t: Task) -> bool {
        self.0 & t.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Task> + '_ {
        Task::ALL.into_iter().filter(|t| self.contains(*t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Hz
    pub loop_rate: f64,
    /// Hz
    pub fusion_rate: f64,
    /// Hz
    pub telemetry_rate: f64,
    /// Sliding window for the achieved-rate estimate, s.
    pub rate_window: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            loop_rate: 400.0,
            fusion_rate: 10.0,
            telemetry_rate: 4.0,
            rate_window: 1.0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loop_rate", self.loop_rate),
            ("fusion_rate", self.fusion_rate),
            ("telemetry_rate", self.telemetry_rate),
            ("rate_window", self.rate_window),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::config(format!("loop.{name}"), "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.loop_rate
    }

    pub fn nominal_rate(&self, task: Task) -> f64 {
        match task {
            Task::Ekf | Task::Control => self.loop_rate,
            Task::Fusion => self.fusion_rate,
            Task::Telemetry => self.telemetry_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopTickRecord {
    pub time: f64,
    pub imu_fresh: bool,
    pub tasks_run: TaskSet,
    /// Executions over the trailing rate window, Hz.
    pub effective_ekf_rate: f64,
    /// Time since the previous execution when this tick executed, s.
    pub exec_dt: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: LoopConfig,
    last_exec: Option<f64>,
    next_fusion: f64,
    next_telemetry: f64,
    recent: VecDeque<f64>,
}

impl Scheduler {
    pub fn new(config: LoopConfig) -> Self {
        Self {
            config,
            last_exec: None,
            next_fusion: 0.0,
            next_telemetry: 0.0,
            recent: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn last_execution(&self) -> Option<f64> {
        self.last_exec
    }

    /// Seconds since the loop last executed, counting from `start` if it never has.
    pub fn stalled_for(&self, t: f64, start: f64) -> f64 {
        t - self.last_exec.unwrap_or(start)
    }

    fn due(next: &mut f64, period: f64, t: f64) -> bool {
        if t + TIME_EPS < *next {
            return false;
        }
        while *next <= t + TIME_EPS {
            *next += period;
        }
        true
    }

    /// One loop tick at time `t`; `imu_fresh` says whether a new IMU sample
    /// arrived since the previous tick.
    pub fn tick(&mut self, t: f64, imu_fresh: bool) -> LoopTickRecord {
        let mut tasks = TaskSet::default();
        let mut exec_dt = None;
        if imu_fresh {
            tasks.insert(Task::Ekf);
            tasks.insert(Task::Control);
            if Self::due(&mut self.next_fusion, 1.0 / self.config.fusion_rate, t) {
                tasks.insert(Task::Fusion);
            }
            if Self::due(&mut self.next_telemetry, 1.0 / self.config.telemetry_rate, t) {
                tasks.insert(Task::Telemetry);
            }
            exec_dt = Some(self.last_exec.map_or(self.config.dt(), |last| t - last));
            self.last_exec = Some(t);
            self.recent.push_back(t);
        }
        let window = self.config.rate_window;
        while self.recent.front().is_some_and(|s| *s <= t - window + TIME_EPS) {
            self.recent.pop_front();
        }
        LoopTickRecord {
            time: t,
            imu_fresh,
            tasks_run: tasks,
            effective_ekf_rate: self.recent.len() as f64 / window,
            exec_dt,
        }
    }
}

/// Achieved rates over a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRates {
    pub ekf: f64,
    pub control: f64,
    pub fusion: f64,
    pub telemetry: f64,
}

impl TaskRates {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Ekf => self.ekf,
            Task::Control => self.control,
            Task::Fusion => self.fusion,
            Task::Telemetry => self.telemetry,
        }
    }
}

/// Executions per second of each task over `trace`, which must span at least
/// one second of uniformly spaced ticks.
pub fn effective_rates(trace: &[LoopTickRecord]) -> Result<TaskRates> {
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return Err(SimError::Empty("loop trace"));
    };
    let n = trace.len() as f64;
    let span = if trace.len() > 1 {
        (last.time - first.time) * n / (n - 1.0)
    } else {
        0.0
    };
    if span + TIME_EPS < 1.0 {
        return Err(SimError::contract(format!("trace spans {span} s, need at least 1 s")));
    }
    let count = |task| trace.iter().filter(|r| r.tasks_run.contains(task)).count() as f64 / span;
    Ok(TaskRates {
        ekf: count(Task::Ekf),
        control: count(Task::Control),
        fusion: count(Task::Fusion),
        telemetry: count(Task::Telemetry),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seconds: f64, fresh: impl Fn(u64) -> bool) -> Vec<LoopTickRecord> {
        let mut s = Scheduler::new(LoopConfig::default());
        let n = (seconds * 400.0) as u64;
        (0..n).map(|k| s.tick(k as f64 / 400.0, fresh(k))).collect()
    }

    #[test]
    fn clean_rates_nominal() {
        let trace = run(10.0, |_| true);
        let r = effective_rates(&trace).unwrap();
        let cfg = LoopConfig::default();
        for task in Task::ALL {
            let nominal = cfg.nominal_rate(task);
            assert!((r.get(task) - nominal).abs() <= 0.01 * nominal, "{task:?}: {}", r.get(task));
        }
        assert_eq!(trace.last().unwrap().effective_ekf_rate, 400.0);
    }

    #[test]
    fn no_task_without_fresh_data() {
        let trace = run(3.0, |k| k % 7 == 0);
        for r in &trace {
            assert_eq!(r.tasks_run.is_empty(), !r.imu_fresh);
        }
    }

    #[test]
    fn slow_sensor_slows_everything() {
        // 12.5 Hz: a fresh sample every 32 ticks.
        let trace = run(10.0, |k| k % 32 == 0);
        let r = effective_rates(&trace).unwrap();
        assert!((r.ekf - 12.5).abs() <= 1.0);
        assert!(r.telemetry <= 4.0 + 1e-9);
        assert!(r.fusion <= 12.5);
    }

    #[test]
    fn stall_runs_nothing() {
        let trace = run(2.0, |k| k < 400);
        assert!(trace[400..].iter().all(|r| r.tasks_run.is_empty()));
        assert_eq!(trace.last().unwrap().effective_ekf_rate, 0.0);
    }

    #[test]
    fn exec_dt_spans_gaps() {
        let trace = run(1.0, |k| k % 4 == 0);
        assert_eq!(trace[4].exec_dt, Some(0.01));
        assert_eq!(trace[5].exec_dt, None);
    }

    #[test]
    fn short_trace_rejected() {
        let trace = run(0.5, |_| true);
        assert!(effective_rates(&trace).is_err());
        assert!(matches!(effective_rates(&[]), Err(SimError::Empty(_))));
    }
}
