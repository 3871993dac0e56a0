//! Detectors: the estimator failsafe and an MMIO access-pattern monitor.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailsafeConfig {
    /// Trigger level on the normalized statistic.
    pub threshold: f64,
    /// Raw innovation ratio that maps to 1.0 on the normalized scale; four
    /// times the 99.9th percentile of a clean flight.
    pub normalization: f64,
    /// How long the statistic must stay above threshold, s.
    pub window: f64,
}

impl Default for FailsafeConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            normalization: 41.3,
            window: 1.0,
        }
    }
}

impl FailsafeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("threshold", self.threshold),
            ("normalization", self.normalization),
            ("window", self.window),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::config(format!("failsafe.{name}"), "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailsafeState {
    pub threshold: f64,
    pub window: f64,
    /// Continuous time above threshold, s.
    pub accumulator: f64,
    above_since: Option<f64>,
    pub triggered: bool,
    pub trigger_time: Option<f64>,
}

impl FailsafeState {
    pub fn new(threshold: f64, window: f64) -> Self {
        Self {
            threshold,
            window,
            accumulator: 0.0,
            above_since: None,
            triggered: false,
            trigger_time: None,
        }
    }

    pub fn from_config(cfg: &FailsafeConfig) -> Self {
        Self::new(cfg.threshold, cfg.window)
    }
}

/// Feeds one observation of the normalized statistic at time `t`. Returns true
/// on the step that triggers; the trigger fires at most once.
pub fn failsafe_step(fs: &mut FailsafeState, ratio: f64, t: f64) -> bool {
    if fs.triggered {
        return false;
    }
    if ratio > fs.threshold || ratio.is_nan() {
        let since = *fs.above_since.get_or_insert(t);
        fs.accumulator = t - since;
        if fs.accumulator + 1e-9 >= fs.window {
            fs.triggered = true;
            fs.trigger_time = Some(t);
            return true;
        }
    } else {
        fs.above_since = None;
        fs.accumulator = 0.0;
    }
    false
}

/// `q`-quantile of `samples` by nearest rank.
pub fn quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(SimError::Empty("quantile samples"));
    }
    let mut v: Vec<f64> = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub time: f64,
    pub address: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccessTrace {
    pub events: Vec<Access>,
}

impl AccessTrace {
    pub fn duration(&self) -> f64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.time - a.time,
            _ => 0.0,
        }
    }

    fn times_by_address(&self) -> BTreeMap<u32, Vec<f64>> {
        let mut m: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for e in &self.events {
            m.entry(e.address).or_default().push(e.time);
        }
        m
    }
}

/// How the monitored MCU talks to the IMU through its SPI data registers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BusTraffic {
    pub txdr: u32,
    pub rxdr: u32,
    /// Data bytes read per poll.
    pub reads_per_poll: u32,
    /// Spacing of the bytes of one transfer, s.
    pub byte_time: f64,
    /// Uniform jitter on each poll instant, fraction of the period.
    pub jitter: f64,
}

impl Default for BusTraffic {
    fn default() -> Self {
        Self {
            txdr: 0x4001_3420,
            rxdr: 0x4001_3430,
            reads_per_poll: 12,
            byte_time: 2e-6,
            jitter: 0.05,
        }
    }
}

/// Synthesizes MMIO accesses of a driver polling at `rate(t)` Hz over
/// `[0, duration)`. Each poll writes the register address to TXDR and reads the
/// payload from RXDR.
pub fn synthesize_trace(traffic: &BusTraffic, duration: f64, rate: impl Fn(f64) -> f64, rng: &mut SimRng) -> AccessTrace {
    let mut events = Vec::new();
    let mut nominal = 0.0;
    let mut last = f64::NEG_INFINITY;
    while nominal < duration {
        let period = 1.0 / rate(nominal);
        let jitter = if traffic.jitter > 0.0 {
            rng.random_range(-traffic.jitter..traffic.jitter) * period
        } else {
            0.0
        };
        let start = (nominal + jitter).max(last + traffic.byte_time).max(0.0);
        let mut t = start;
        events.push(Access { time: t, address: traffic.txdr, direction: Direction::Write });
        for _ in 0..traffic.reads_per_poll {
            t += traffic.byte_time;
            events.push(Access { time: t, address: traffic.rxdr, direction: Direction::Read });
        }
        last = t;
        nominal += period;
    }
    events.retain(|e| e.time < duration);
    AccessTrace { events }
}

/// Learned normal behavior of the monitored peripheral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessBounds {
    /// Per-address (min, max) access frequency over the sliding window, Hz.
    pub frequency: BTreeMap<u32, (f64, f64)>,
    pub addresses: BTreeSet<u32>,
    pub chains: BTreeSet<(u32, u32)>,
    pub window: f64,
    pub stride: f64,
    pub learned_from: f64,
}

fn window_starts(duration: f64, window: f64, stride: f64) -> Vec<f64> {
    let n = ((duration - window) / stride + 1e-9).floor();
    if n < 0.0 {
        return Vec::new();
    }
    (0..=n as usize).map(|i| i as f64 * stride).collect()
}

fn count_in(times: &[f64], a: f64, b: f64) -> usize {
    times.partition_point(|t| *t < b) - times.partition_point(|t| *t < a)
}

/// Learns per-address frequency extremes over `duration` seconds of `trace`.
pub fn learn_bounds(trace: &AccessTrace, window: f64, stride: f64, duration: f64) -> Result<AccessBounds> {
    if trace.events.is_empty() {
        return Err(SimError::Empty("access trace"));
    }
    if !(window > 0.0 && stride > 0.0 && duration >= window) {
        return Err(SimError::contract("need window > 0, stride > 0 and duration >= window"));
    }
    let by_addr = trace.times_by_address();
    let starts = window_starts(duration, window, stride);
    let frequency = by_addr
        .iter()
        .map(|(addr, times)| {
            let (lo, hi) = starts.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
                let f = count_in(times, *s, s + window) as f64 / window;
                (lo.min(f), hi.max(f))
            });
            (*addr, (lo, hi))
        })
        .collect();
    let events: Vec<&Access> = trace.events.iter().filter(|e| e.time < duration).collect();
    Ok(AccessBounds {
        frequency,
        addresses: events.iter().map(|e| e.address).collect(),
        chains: events.windows(2).map(|w| (w[0].address, w[1].address)).collect(),
        window,
        stride,
        learned_from: duration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Verdict {
    pub frequency: bool,
    pub access_list: bool,
    pub access_chain: bool,
}

impl Verdict {
    pub fn anomalous(&self) -> bool {
        self.frequency || self.access_list || self.access_chain
    }
}

/// Classifies the accesses in `[start, start + bounds.window)`.
pub fn classify(trace: &AccessTrace, start: f64, bounds: &AccessBounds) -> Verdict {
    let end = start + bounds.window;
    let lo = trace.events.partition_point(|e| e.time < start);
    let hi = trace.events.partition_point(|e| e.time < end);
    let slice = &trace.events[lo..hi];
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for e in slice {
        *counts.entry(e.address).or_default() += 1;
    }
    let frequency = bounds.frequency.iter().any(|(addr, (min, max))| {
        let f = counts.get(addr).copied().unwrap_or(0) as f64 / bounds.window;
        f < *min || f > *max
    });
    Verdict {
        frequency,
        access_list: slice.iter().any(|e| !bounds.addresses.contains(&e.address)),
        access_chain: slice.windows(2).any(|w| !bounds.chains.contains(&(w[0].address, w[1].address))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub windows: usize,
    /// Correct classifications over all windows.
    pub accuracy: f64,
    /// Fraction of windows each check flagged.
    pub frequency_flag_rate: f64,
    pub access_list_flag_rate: f64,
    pub access_chain_flag_rate: f64,
    /// Any window overlapping the attack was flagged.
    pub attack_detected: bool,
}

/// Scores sliding windows of `trace` against labels derived from `attack`
/// (`[start, stop)`, or `None` for a clean trace).
pub fn score(trace: &AccessTrace, duration: f64, bounds: &AccessBounds, attack: Option<(f64, f64)>) -> DetectionScore {
    let starts = window_starts(duration, bounds.window, bounds.stride);
    let mut correct = 0usize;
    let mut flags = [0usize; 3];
    let mut detected = false;
    for s in &starts {
        let v = classify(trace, *s, bounds);
        let attacked = attack.is_some_and(|(a, b)| *s < b && s + bounds.window > a);
        if v.anomalous() == attacked {
            correct += 1;
        }
        detected |= attacked && v.anomalous();
        flags[0] += v.frequency as usize;
        flags[1] += v.access_list as usize;
        flags[2] += v.access_chain as usize;
    }
    let n = starts.len().max(1) as f64;
    DetectionScore {
        windows: starts.len(),
        accuracy: correct as f64 / n,
        frequency_flag_rate: flags[0] as f64 / n,
        access_list_flag_rate: flags[1] as f64 / n,
        access_chain_flag_rate: flags[2] as f64 / n,
        attack_detected: detected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn below_threshold_never_triggers() {
        let mut fs = FailsafeState::new(1.0, 1.0);
        for k in 0..4000 {
            assert!(!failsafe_step(&mut fs, 0.99, k as f64 / 400.0));
        }
        assert!(!fs.triggered);
    }

    #[test]
    fn triggers_one_window_after_onset() {
        let mut fs = FailsafeState::new(1.0, 1.0);
        let mut fired = 0;
        for k in 0..2000 {
            let t = k as f64 / 400.0;
            let ratio = if t >= 2.0 { 5.0 } else { 0.1 };
            fired += failsafe_step(&mut fs, ratio, t) as usize;
        }
        assert_eq!(fired, 1);
        let tt = fs.trigger_time.unwrap();
        assert!((tt - 3.0).abs() <= 1.0 / 400.0);
        assert!(fs.accumulator >= fs.window - 1e-9);
    }

    #[test]
    fn dip_resets_accumulator() {
        let mut fs = FailsafeState::new(1.0, 1.0);
        for k in 0..800 {
            let t = k as f64 / 400.0;
            let ratio = if k == 300 { 0.5 } else { 2.0 };
            failsafe_step(&mut fs, ratio, t);
        }
        assert!((fs.trigger_time.unwrap() - (301.0 / 400.0 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn frozen_statistic_below_threshold_stays_silent() {
        let mut fs = FailsafeState::new(1.0, 1.0);
        let frozen = 0.3;
        for k in 0..2000 {
            failsafe_step(&mut fs, frozen, k as f64 / 400.0);
        }
        assert!(!fs.triggered);
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.999).unwrap(), 999.0);
        assert_eq!(quantile(&v, 0.5).unwrap(), 500.0);
        assert!(quantile(&[], 0.5).is_err());
    }

    fn steady(rate: f64, jitter: f64, seconds: f64) -> AccessTrace {
        let traffic = BusTraffic { jitter, ..BusTraffic::default() };
        synthesize_trace(&traffic, seconds, |_| rate, &mut stream(9, Stream::Bus))
    }

    #[test]
    fn constant_polling_bounds() {
        let trace = steady(400.0, 0.0, 20.0);
        let b = learn_bounds(&trace, 1.0, 0.1, 20.0).unwrap();
        let (lo, hi) = b.frequency[&BusTraffic::default().txdr];
        assert!((lo - 400.0).abs() <= 1.0 && (hi - 400.0).abs() <= 1.0);
    }

    #[test]
    fn addresses_get_independent_bounds() {
        let trace = steady(400.0, 0.0, 10.0);
        let b = learn_bounds(&trace, 1.0, 0.1, 10.0).unwrap();
        let t = BusTraffic::default();
        assert_eq!(b.frequency.len(), 2);
        assert!((b.frequency[&t.rxdr].0 - 12.0 * 400.0).abs() <= 12.0);
        assert!(b.chains.contains(&(t.txdr, t.rxdr)));
        assert!(b.chains.contains(&(t.rxdr, t.txdr)));
        assert!(!b.chains.contains(&(t.txdr, t.txdr)));
    }

    #[test]
    fn jitter_widens_bounds() {
        let calm = learn_bounds(&steady(400.0, 0.0, 30.0), 1.0, 0.1, 30.0).unwrap();
        let jittery = learn_bounds(&steady(400.0, 0.45, 30.0), 1.0, 0.1, 30.0).unwrap();
        let a = BusTraffic::default().txdr;
        let width = |b: &AccessBounds| b.frequency[&a].1 - b.frequency[&a].0;
        assert!(width(&jittery) >= width(&calm));
        // Every window of fresh jittered traffic falls within learned bounds.
        let eval = steady(400.0, 0.45, 30.0);
        let s = score(&eval, 30.0, &jittery, None);
        assert!(s.accuracy > 0.99);
    }

    #[test]
    fn empty_trace_rejected() {
        assert!(matches!(learn_bounds(&AccessTrace::default(), 1.0, 0.1, 1.0), Err(SimError::Empty(_))));
    }

    #[test]
    fn unseen_address_flagged() {
        let mut trace = steady(400.0, 0.0, 5.0);
        let b = learn_bounds(&trace, 1.0, 0.1, 5.0).unwrap();
        let at = trace.events.partition_point(|e| e.time < 2.5);
        trace.events.insert(at, Access { time: 2.5, address: 0x4001_3440, direction: Direction::Read });
        let v = classify(&trace, 2.0, &b);
        assert!(v.access_list && v.access_chain);
        assert!(!classify(&trace, 3.6, &b).anomalous());
    }

    #[test]
    fn classify_is_pure() {
        let trace = steady(400.0, 0.05, 5.0);
        let b = learn_bounds(&trace, 1.0, 0.1, 5.0).unwrap();
        assert_eq!(classify(&trace, 1.3, &b), classify(&trace, 1.3, &b));
    }
}
