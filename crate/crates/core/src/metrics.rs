//! Trajectory deviation, detection/crash timing and campaign aggregation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sim::{Outcome, RunResult, TraceRow};

const TIME_EPS: f64 = 1e-9;

/// Position over time with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    t: Vec<f64>,
    p: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn new(t: Vec<f64>, p: Vec<Vector3<f64>>) -> Result<Self> {
        if t.is_empty() {
            return Err(SimError::Empty("trajectory"));
        }
        if t.len() != p.len() {
            return Err(SimError::Dimension(format!("{} times but {} positions", t.len(), p.len())));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) || t.iter().any(|v| !v.is_finite()) {
            return Err(SimError::contract("trajectory times must be finite and strictly increasing"));
        }
        if p.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(SimError::contract("trajectory positions must be finite"));
        }
        Ok(Self { t, p })
    }

    /// True position from a flight log. Rows sharing a timestamp collapse to
    /// the first.
    pub fn from_trace(rows: &[TraceRow]) -> Result<Self> {
        let mut t = Vec::with_capacity(rows.len());
        let mut p = Vec::with_capacity(rows.len());
        for r in rows {
            if t.last().is_some_and(|last: &f64| r.t <= *last) {
                continue;
            }
            t.push(r.t);
            p.push(Vector3::new(r.x, r.y, r.z));
        }
        Self::new(t, p)
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.t[0]
    }

    pub fn end(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    /// Linearly interpolated position at `t`.
    pub fn at(&self, t: f64) -> Result<Vector3<f64>> {
        if !(t >= self.start() - TIME_EPS && t <= self.end() + TIME_EPS) {
            return Err(SimError::OutOfRange {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let i = self.t.partition_point(|s| *s <= t);
        if i == 0 {
            return Ok(self.p[0]);
        }
        if i == self.t.len() {
            return Ok(self.p[i - 1]);
        }
        let (t0, t1) = (self.t[i - 1], self.t[i]);
        let w = (t - t0) / (t1 - t0);
        Ok(self.p[i - 1] + (self.p[i] - self.p[i - 1]) * w)
    }

    /// Samples at `start + k / rate` for every such time up to `end`.
    pub fn resample(&self, rate: f64, start: f64, end: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(SimError::contract("resample rate must be > 0"));
        }
        let n = ((end - start) * rate + TIME_EPS).floor();
        if !(n >= 0.0) {
            return Err(SimError::Empty("resample window"));
        }
        let times: Vec<f64> = (0..=n as usize).map(|k| start + k as f64 / rate).collect();
        let pos = times.iter().map(|t| self.at(*t)).collect::<Result<Vec<_>>>()?;
        Self::new(times, pos)
    }
}

/// Per-axis mean of several trajectories, sampled at `rate` over the span
/// they all cover.
pub fn mean_trajectory(runs: &[Trajectory], rate: f64) -> Result<Trajectory> {
    let first = runs.first().ok_or(SimError::Empty("reference runs"))?;
    let start = runs.iter().map(Trajectory::start).fold(first.start(), f64::max);
    let end = runs.iter().map(Trajectory::end).fold(first.end(), f64::min);
    if end < start {
        return Err(SimError::Empty("common span of reference runs"));
    }
    let sampled = runs
        .iter()
        .map(|r| r.resample(rate, start, end))
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let pos = (0..sampled[0].len())
        .map(|k| sampled.iter().map(|s| s.p[k]).sum::<Vector3<f64>>() / n)
        .collect();
    Trajectory::new(sampled[0].t.clone(), pos)
}

/// Per-axis |A_t - R_t|.
pub fn deviation(a: &Trajectory, r: &Trajectory, t: f64) -> Result<Vector3<f64>> {
    Ok((a.at(t)? - r.at(t)?).abs())
}

/// Per-axis maximum of [`deviation`] over `[start, end]`. Both trajectories
/// are piecewise linear, so checking every sample time of either one plus
/// the endpoints is exact.
pub fn max_deviation(a: &Trajectory, r: &Trajectory, window: (f64, f64)) -> Result<Vector3<f64>> {
    let (start, end) = window;
    if !(start <= end) {
        return Err(SimError::Empty("deviation window"));
    }
    let inside = |t: &&f64| **t > start && **t < end;
    let mut best = deviation(a, r, start)?.sup(&deviation(a, r, end)?);
    for t in a.t.iter().filter(inside).chain(r.t.iter().filter(inside)) {
        best = best.sup(&deviation(a, r, *t)?);
    }
    Ok(best)
}

/// Outcome classes of the behaviour table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    UndetectedCrash,
    UndetectedComplete,
    DetectedCrash,
    DetectedLand,
    /// Anything else, e.g. still airborne when the run timed out.
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::UndetectedCrash,
        Category::UndetectedComplete,
        Category::DetectedCrash,
        Category::DetectedLand,
        Category::Other,
    ];

    pub fn of(detected: bool, outcome: Outcome) -> Self {
        match (detected, outcome) {
            (false, Outcome::Crash) => Category::UndetectedCrash,
            (false, Outcome::Complete) => Category::UndetectedComplete,
            (true, Outcome::Crash) => Category::DetectedCrash,
            (true, Outcome::Land) => Category::DetectedLand,
            _ => Category::Other,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Category::UndetectedCrash => "undetected_crash",
            Category::UndetectedComplete => "undetected_complete",
            Category::DetectedCrash => "detected_crash",
            Category::DetectedLand => "detected_land",
            Category::Other => "other",
        }
    }
}

/// What the campaign keeps from one attacked run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub index: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub detected: bool,
    pub ttd: Option<f64>,
    pub ttc: Option<f64>,
    /// Per-axis maximum deviation from the reference, m.
    pub max_deviation: Option<[f64; 3]>,
}

impl RunSummary {
    pub fn category(&self) -> Category {
        Category::of(self.detected, self.outcome)
    }
}

/// Window over which a run's deviation is measured: attack start until the
/// failsafe or touchdown, or the end of the run if neither happened.
pub fn deviation_window(run: &RunResult) -> Option<(f64, f64)> {
    let start = run.attack_start?;
    let end = run.failsafe_time.or(run.touchdown_time).unwrap_or(run.end_time);
    Some((start, end.max(start)))
}

/// Summarize a finished run against the reference trajectory. The deviation
/// window is clipped to the span both trajectories cover.
pub fn summarize_run(mode: &str, index: usize, run: &RunResult, reference: Option<&Trajectory>) -> Result<RunSummary> {
    let max_deviation = match (reference, deviation_window(run), run.trace.is_empty()) {
        (Some(r), Some((start, end)), false) => {
            let a = Trajectory::from_trace(&run.trace)?;
            let end = end.min(a.end()).min(r.end());
            let start = start.max(a.start()).max(r.start());
            Some(max_deviation(&a, r, (start, end))?.into())
        }
        _ => None,
    };
    Ok(RunSummary {
        mode: mode.to_string(),
        index,
        seed: run.seed,
        outcome: run.outcome,
        detected: run.detected,
        ttd: run.ttd,
        ttc: run.ttc,
        max_deviation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Summary statistics, or `None` for no samples. Samples are sorted first so
/// the result does not depend on their order.
pub fn stats(samples: &[f64]) -> Option<Stats> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    Some(Stats {
        mean,
        std: (sq.iter().sum::<f64>() / n).sqrt(),
        min: v[0],
        max: v[v.len() - 1],
        n: v.len(),
    })
}

/// Percentages rounded to two decimals that still sum to exactly 100.00,
/// by largest remainder.
pub fn rounded_percentages(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    // Work in hundredths of a percent.
    let exact: Vec<f64> = counts.iter().map(|c| *c as f64 * 10_000.0 / total as f64).collect();
    let mut units: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let short = 10_000 - units.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|a, b| (exact[*b] - exact[*b].floor()).total_cmp(&(exact[*a] - exact[*a].floor())).then(a.cmp(b)));
    for i in order.into_iter().take(short as usize) {
        units[i] += 1;
    }
    units.into_iter().map(|u| u as f64 / 100.0).collect()
}

/// One row of the behaviour and deviation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub mode: String,
    pub runs: usize,
    pub counts: [usize; 5],
    /// Same order as [`Category::ALL`], rounded so they sum to 100.
    pub percent: [f64; 5],
    pub ttd: Option<Stats>,
    pub ttc: Option<Stats>,
    /// Per-axis statistics of the runs' maximum deviation.
    pub deviation: Option<[Stats; 3]>,
}

impl CampaignRow {
    pub fn count(&self, c: Category) -> usize {
        self.counts[Category::ALL.iter().position(|x| *x == c).unwrap()]
    }

    pub fn fraction(&self, c: Category) -> f64 {
        self.count(c) as f64 / self.runs as f64
    }

    pub fn detected_fraction(&self) -> f64 {
        self.fraction(Category::DetectedCrash) + self.fraction(Category::DetectedLand)
    }

    pub fn crash_fraction(&self) -> f64 {
        self.fraction(Category::UndetectedCrash) + self.fraction(Category::DetectedCrash)
    }

    /// Number of categories with at least one run.
    pub fn distinct_outcomes(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }
}

/// Aggregate the runs of one attack mode.
pub fn aggregate_campaign(mode: &str, runs: &[RunSummary]) -> Result<CampaignRow> {
    if runs.is_empty() {
        return Err(SimError::Empty("campaign runs"));
    }
    let mut counts = [0usize; 5];
    for r in runs {
        counts[Category::ALL.iter().position(|c| *c == r.category()).unwrap()] += 1;
    }
    let pct = rounded_percentages(&counts);
    let ttd: Vec<f64> = runs.iter().filter_map(|r| r.ttd).collect();
    let ttc: Vec<f64> = runs.iter().filter_map(|r| r.ttc).collect();
    let devs: Vec<[f64; 3]> = runs.iter().filter_map(|r| r.max_deviation).collect();
    let deviation = if devs.is_empty() {
        None
    } else {
        let axis = |i: usize| stats(&devs.iter().map(|d| d[i]).collect::<Vec<_>>()).unwrap();
        Some([axis(0), axis(1), axis(2)])
    };
    Ok(CampaignRow {
        mode: mode.to_string(),
        runs: runs.len(),
        counts,
        percent: [pct[0], pct[1], pct[2], pct[3], pct[4]],
        ttd: stats(&ttd),
        ttc: stats(&ttc),
        deviation,
    })
}

/// All detection times, sorted, for distribution plots.
pub fn ttd_samples(runs: &[RunSummary]) -> Vec<(String, u64, f64)> {
    let mut v: Vec<(String, u64, f64)> = runs
        .iter()
        .filter_map(|r| r.ttd.map(|t| (r.mode.clone(), r.seed, t)))
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.total_cmp(&b.2)).then(a.1.cmp(&b.1)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(slope: f64) -> Trajectory {
        let t: Vec<f64> = (0..=10).map(|k| k as f64 * 0.5).collect();
        let p = t.iter().map(|t| Vector3::new(slope * t, 0.0, 0.0)).collect();
        Trajectory::new(t, p).unwrap()
    }

    fn offset(dx: f64) -> Trajectory {
        let t: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        let p = t.iter().map(|t| Vector3::new(*t + dx, 1.0, 2.0)).collect();
        Trajectory::new(t, p).unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_deviation() {
        let r = offset(0.0);
        assert_eq!(deviation(&r, &r, 3.3).unwrap(), Vector3::zeros());
    }

    #[test]
    fn constant_offset_in_x() {
        let d = deviation(&offset(3.0), &offset(0.0), 4.0).unwrap();
        assert_eq!(d, Vector3::new(3.0, 0.0, 0.0));
        let d = deviation(&offset(-3.0), &offset(0.0), 4.0).unwrap();
        assert_eq!(d, Vector3::new(3.0, 0.0, 0.0));
    }

    #[test]
    fn interpolated_lines() {
        // A_x(t) = t, R_x(t) = 2t, both sampled every 0.5 s.
        let d = deviation(&line(1.0), &line(2.0), 1.5).unwrap();
        assert_eq!(d.x, 1.5);
        let d = deviation(&line(1.0), &line(2.0), 1.25).unwrap();
        assert_eq!(d.x, 1.25);
    }

    #[test]
    fn out_of_range_time() {
        let r = offset(0.0);
        assert!(matches!(deviation(&r, &r, 10.5), Err(SimError::OutOfRange { .. })));
        assert!(deviation(&r, &r, -0.1).is_err());
    }

    #[test]
    fn max_over_window() {
        assert_eq!(max_deviation(&offset(2.0), &offset(0.0), (1.0, 5.0)).unwrap().x, 2.0);
        // Offset growing linearly from 0 to 5 m.
        let grow = line(1.0);
        let zero = line(0.0);
        assert_eq!(max_deviation(&grow, &zero, (0.0, 5.0)).unwrap().x, 5.0);
        assert_eq!(max_deviation(&grow, &zero, (0.0, 2.2)).unwrap().x, 2.2);
        assert!(matches!(max_deviation(&grow, &zero, (3.0, 2.0)), Err(SimError::Empty(_))));
    }

    #[test]
    fn rejects_bad_trajectories() {
        assert!(Trajectory::new(vec![], vec![]).is_err());
        assert!(Trajectory::new(vec![0.0, 0.0], vec![Vector3::zeros(); 2]).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0], vec![Vector3::zeros()]).is_err());
    }

    #[test]
    fn mean_of_mirrored_runs() {
        let up = offset(1.0);
        let down = offset(-1.0);
        let m = mean_trajectory(&[up, down], 10.0).unwrap();
        assert_eq!(m.len(), 101);
        assert!((m.at(5.0).unwrap() - Vector3::new(5.0, 1.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(rounded_percentages(&[5, 3, 3]), vec![45.46, 27.27, 27.27]);
        assert_eq!(rounded_percentages(&[11, 0]), vec![100.0, 0.0]);
        assert_eq!(rounded_percentages(&[1, 1, 1]), vec![33.34, 33.33, 33.33]);
    }

    fn summary(detected: bool, outcome: Outcome, ttd: Option<f64>) -> RunSummary {
        RunSummary {
            mode: "stale".into(),
            index: 0,
            seed: 1,
            outcome,
            detected,
            ttd,
            ttc: None,
            max_deviation: Some([1.0, 2.0, 3.0]),
        }
    }

    #[test]
    fn all_landed_after_detection() {
        let runs = vec![summary(true, Outcome::Land, Some(4.0)); 11];
        let row = aggregate_campaign("stale", &runs).unwrap();
        assert_eq!(row.percent, [0.0, 0.0, 0.0, 100.0, 0.0]);
        assert_eq!(row.ttd.unwrap().mean, 4.0);
        assert!(row.ttc.is_none());
    }

    #[test]
    fn never_detected_has_no_ttd() {
        let runs = vec![summary(false, Outcome::Crash, None); 11];
        let row = aggregate_campaign("absent", &runs).unwrap();
        assert!(row.ttd.is_none());
        assert_eq!(row.crash_fraction(), 1.0);
        assert_eq!(row.detected_fraction(), 0.0);
    }

    #[test]
    fn mixed_erroneous_row() {
        let mut runs = vec![summary(false, Outcome::Crash, None); 5];
        runs.extend(vec![summary(false, Outcome::Complete, None); 3]);
        runs.extend(vec![summary(true, Outcome::Crash, Some(1.7)); 3]);
        let row = aggregate_campaign("erroneous", &runs).unwrap();
        assert_eq!(row.percent, [45.46, 27.27, 27.27, 0.0, 0.0]);
        assert_eq!(row.distinct_outcomes(), 3);
    }

    #[test]
    fn empty_campaign_rejected() {
        assert!(aggregate_campaign("x", &[]).is_err());
    }
}
