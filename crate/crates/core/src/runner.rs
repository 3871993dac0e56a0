//! Experiment drivers and their on-disk artifacts: single runs, repeated
//! attack campaigns, frequency sweeps, access-monitor evaluations and attack
//! synthesis.
//!
//! Every directory written here carries a `metadata.json` with the config
//! hash, the master seed and the tool version, plus the full config, so any
//! artifact can be regenerated from it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::RateSetting;
use crate::config::{AttackMode, ScenarioConfig};
use crate::detection::{learn_bounds, score, synthesize_trace, AccessBounds, DetectionScore};
use crate::error::{Result, SimError};
use crate::metrics::{
    aggregate_campaign, mean_trajectory, summarize_run, ttd_samples, CampaignRow, Category, RunSummary, Stats,
    Trajectory,
};
use crate::rng::{mix, run_seed, stream, Stream};
use crate::sim::{simulate, Outcome, RunResult, TraceRow};
use crate::synthesis::{evaluate, eval_seeds, rollout, train, AttackEnv, AttackPolicy, CurvePoint, EvalStats, Policy, Rollout};

pub const TOOL: &str = "sdasim";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ScenarioConfig,
}

impl Metadata {
    pub fn new(command: &str, cfg: &ScenarioConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SimError::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| SimError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Output root: the config's `output`, else `fallback`.
pub fn output_dir(cfg: &ScenarioConfig, fallback: &Path) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| fallback.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub result: RunResult,
    /// Per-axis max |A - R| against a clean flight with the same seed, m.
    pub max_deviation: Option<[f64; 3]>,
}

/// One flight with the configured attack. With an attack, a clean flight with
/// the same seed serves as the deviation reference.
pub fn run(cfg: &ScenarioConfig) -> Result<RunReport> {
    cfg.validate()?;
    let result = simulate(cfg)?;
    let max_deviation = match cfg.attack {
        Some(_) => {
            let clean = simulate(&cfg.without_attack())?;
            let reference = Trajectory::from_trace(&clean.trace)?;
            summarize_run("run", 0, &result, Some(&reference))?.max_deviation
        }
        None => None,
    };
    Ok(RunReport { result, max_deviation })
}

#[derive(Debug, Clone, Serialize)]
struct ErrorArtifact<'a> {
    error: String,
    config_hash: String,
    seed: u64,
    metadata: &'a Metadata,
}

/// `run` plus `trace.csv`, `result.json` and `metadata.json` in `out`. A
/// failing simulation leaves `error.json` behind before returning the error.
pub fn run_to_dir(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport> {
    let meta = Metadata::new("run", cfg);
    let report = match run(cfg) {
        Ok(r) => r,
        Err(e) => {
            if !e.is_config() {
                write_json(
                    &out.join("error.json"),
                    &ErrorArtifact { error: e.to_string(), config_hash: meta.config_hash.clone(), seed: cfg.seed, metadata: &meta },
                )?;
            }
            return Err(e);
        }
    };
    write_csv(&out.join("trace.csv"), &report.result.trace)?;
    write_json(&out.join("result.json"), &report)?;
    write_json(&out.join("metadata.json"), &meta)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct CampaignOutput {
    pub master_seed: u64,
    pub baseline: Vec<RunSummary>,
    pub runs: Vec<RunSummary>,
    pub table: Vec<CampaignRow>,
    pub reference: Trajectory,
}

impl CampaignOutput {
    pub fn row(&self, mode: &str) -> Option<&CampaignRow> {
        self.table.iter().find(|r| r.mode == mode)
    }

    pub fn runs_of<'a>(&'a self, mode: &'a str) -> impl Iterator<Item = &'a RunSummary> + 'a {
        self.runs.iter().filter(move |r| r.mode == mode)
    }
}

/// `cfg.campaign.runs` flights per attack mode plus clean baselines, all
/// seeded from `cfg.seed`. Run `i` of every mode shares its seed with
/// baseline `i`. The deviation reference is the mean baseline trajectory.
pub fn campaign(cfg: &ScenarioConfig) -> Result<CampaignOutput> {
    cfg.validate()?;
    let cc = &cfg.campaign;
    if cc.runs == 0 || cc.baseline_runs == 0 || cc.modes.is_empty() {
        return Err(SimError::config("campaign", "needs runs >= 1, baseline_runs >= 1 and at least one mode"));
    }
    let master = cfg.seed;
    let seeded = |c: ScenarioConfig, i: usize| ScenarioConfig { seed: run_seed(master, i), ..c };

    let clean = cfg.without_attack();
    let baseline: Vec<RunResult> = (0..cc.baseline_runs)
        .into_par_iter()
        .map(|i| simulate(&seeded(clean.clone(), i)))
        .collect::<Result<_>>()?;
    let trajectories = baseline.iter().map(|r| Trajectory::from_trace(&r.trace)).collect::<Result<Vec<_>>>()?;
    let reference = mean_trajectory(&trajectories, cc.reference_rate)?;

    let jobs: Vec<(usize, usize)> = (0..cc.modes.len()).flat_map(|m| (0..cc.runs).map(move |i| (m, i))).collect();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(m, i)| {
            let mode = cc.modes[m];
            let r = simulate(&seeded(cfg.with_attack(mode), i))?;
            summarize_run(mode.name(), i, &r, Some(&reference))
        })
        .collect::<Result<_>>()?;
    let baseline = baseline
        .iter()
        .enumerate()
        .map(|(i, r)| summarize_run("baseline", i, r, None))
        .collect::<Result<Vec<_>>>()?;

    let mut table = vec![aggregate_campaign("baseline", &baseline)?];
    for mode in &cc.modes {
        let of_mode: Vec<RunSummary> = runs.iter().filter(|r| r.mode == mode.name()).cloned().collect();
        table.push(aggregate_campaign(mode.name(), &of_mode)?);
    }
    Ok(CampaignOutput { master_seed: master, baseline, runs, table, reference })
}

#[derive(Debug, Clone, Serialize)]
struct RunsCsvRow<'a> {
    mode: &'a str,
    index: usize,
    seed: u64,
    outcome: &'static str,
    detected: bool,
    category: &'static str,
    ttd: Option<f64>,
    ttc: Option<f64>,
    dev_x: Option<f64>,
    dev_y: Option<f64>,
    dev_z: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct OutcomeCsvRow<'a> {
    mode: &'a str,
    runs: usize,
    undetected_crash_pct: f64,
    undetected_complete_pct: f64,
    detected_crash_pct: f64,
    detected_land_pct: f64,
    other_pct: f64,
    ttd_mean: Option<f64>,
    ttd_std: Option<f64>,
    ttd_min: Option<f64>,
    ttd_max: Option<f64>,
    ttc_mean: Option<f64>,
    ttc_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct DeviationCsvRow<'a> {
    mode: &'a str,
    axis: &'static str,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    n: usize,
    /// std / mean
    cv: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TtdCsvRow<'a> {
    mode: &'a str,
    seed: u64,
    ttd: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ReferenceCsvRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

fn pct(row: &CampaignRow, c: Category) -> f64 {
    row.percent[Category::ALL.iter().position(|x| *x == c).unwrap()]
}

/// Column order of `outcomes.csv`: mode, runs, the five outcome-category
/// percentages, then TtD and TtC statistics in seconds.
pub fn write_campaign(out: &Path, cfg: &ScenarioConfig, c: &CampaignOutput) -> Result<()> {
    let runs: Vec<RunsCsvRow> = c
        .baseline
        .iter()
        .chain(&c.runs)
        .map(|r| RunsCsvRow {
            mode: &r.mode,
            index: r.index,
            seed: r.seed,
            outcome: r.outcome.name(),
            detected: r.detected,
            category: r.category().name(),
            ttd: r.ttd,
            ttc: r.ttc,
            dev_x: r.max_deviation.map(|d| d[0]),
            dev_y: r.max_deviation.map(|d| d[1]),
            dev_z: r.max_deviation.map(|d| d[2]),
        })
        .collect();
    write_csv(&out.join("runs.csv"), &runs)?;

    let outcomes: Vec<OutcomeCsvRow> = c
        .table
        .iter()
        .map(|r| OutcomeCsvRow {
            mode: &r.mode,
            runs: r.runs,
            undetected_crash_pct: pct(r, Category::UndetectedCrash),
            undetected_complete_pct: pct(r, Category::UndetectedComplete),
            detected_crash_pct: pct(r, Category::DetectedCrash),
            detected_land_pct: pct(r, Category::DetectedLand),
            other_pct: pct(r, Category::Other),
            ttd_mean: r.ttd.map(|s| s.mean),
            ttd_std: r.ttd.map(|s| s.std),
            ttd_min: r.ttd.map(|s| s.min),
            ttd_max: r.ttd.map(|s| s.max),
            ttc_mean: r.ttc.map(|s| s.mean),
            ttc_std: r.ttc.map(|s| s.std),
        })
        .collect();
    write_csv(&out.join("outcomes.csv"), &outcomes)?;

    let mut deviations = Vec::new();
    for r in &c.table {
        if let Some(d) = &r.deviation {
            for (axis, s) in ["x", "y", "z"].into_iter().zip(d) {
                deviations.push(DeviationCsvRow {
                    mode: &r.mode,
                    axis,
                    mean: s.mean,
                    std: s.std,
                    min: s.min,
                    max: s.max,
                    n: s.n,
                    cv: s.std / s.mean,
                });
            }
        }
    }
    write_csv(&out.join("deviations.csv"), &deviations)?;

    let ttd = ttd_samples(&c.runs);
    let ttd: Vec<TtdCsvRow> = ttd.iter().map(|(m, s, t)| TtdCsvRow { mode: m, seed: *s, ttd: *t }).collect();
    write_csv(&out.join("ttd_samples.csv"), &ttd)?;

    let reference: Vec<ReferenceCsvRow> = c
        .reference
        .times()
        .iter()
        .zip(c.reference.positions())
        .map(|(t, p)| ReferenceCsvRow { t: *t, x: p.x, y: p.y, z: p.z })
        .collect();
    write_csv(&out.join("reference.csv"), &reference)?;
    write_json(&out.join("metadata.json"), &Metadata::new("campaign", cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub rate: f64,
    pub runs: usize,
    pub crashes: usize,
    pub crash_rate: f64,
    pub detected: usize,
    /// Mean estimator rate while the reduced rate was in force, Hz.
    pub ekf_rate: f64,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub chip: String,
    pub entries: Vec<SweepEntry>,
    /// Highest rate at and below which every run crashed, Hz.
    pub all_crash_below: Option<f64>,
    /// Lowest rate at and above which no run crashed, Hz.
    pub stable_above: Option<f64>,
    /// Crash rate never decreases as the sensor rate decreases.
    pub monotone: bool,
}

/// Flies `cfg.sweep.runs` missions per configured sensor rate, each holding
/// the reduced rate for `cfg.sweep.duration` seconds from the attack start.
pub fn freq_sweep(cfg: &ScenarioConfig) -> Result<SweepReport> {
    let sc = &cfg.sweep;
    if sc.rates.is_empty() || sc.runs == 0 {
        return Err(SimError::config("sweep", "needs at least one rate and one run"));
    }
    let profile = cfg.chip.resolve()?;
    let mut rate_cfgs = Vec::new();
    for (k, rate) in sc.rates.iter().enumerate() {
        let mut c = cfg.with_attack(AttackMode::Frequency { rate: RateSetting::Hz(*rate) });
        if let Some(a) = c.attack.as_mut() {
            a.duration = sc.duration;
        }
        c.validate().map_err(|e| match e {
            SimError::Config { message, .. } => SimError::config(format!("sweep.rates[{k}]"), message),
            other => other,
        })?;
        rate_cfgs.push(c);
    }
    let jobs: Vec<(usize, usize)> = (0..rate_cfgs.len()).flat_map(|k| (0..sc.runs).map(move |i| (k, i))).collect();
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(k, i)| {
            let c = ScenarioConfig { seed: run_seed(cfg.seed, i), ..rate_cfgs[k].clone() };
            let mut sim = crate::sim::Simulation::new(&c)?;
            sim.set_record_trace(false);
            sim.run()
        })
        .collect::<Result<_>>()?;

    let entries: Vec<SweepEntry> = sc
        .rates
        .iter()
        .enumerate()
        .map(|(k, rate)| {
            let rs = &results[k * sc.runs..(k + 1) * sc.runs];
            let crashes = rs.iter().filter(|r| r.outcome == Outcome::Crash).count();
            let ekf: Vec<f64> = rs.iter().filter_map(|r| r.attack_ekf_rate).collect();
            SweepEntry {
                rate: *rate,
                runs: rs.len(),
                crashes,
                crash_rate: crashes as f64 / rs.len() as f64,
                detected: rs.iter().filter(|r| r.detected).count(),
                ekf_rate: if ekf.is_empty() { f64::NAN } else { ekf.iter().sum::<f64>() / ekf.len() as f64 },
                outcomes: rs.iter().map(|r| r.outcome).collect(),
            }
        })
        .collect();

    let mut by_rate: Vec<&SweepEntry> = entries.iter().collect();
    by_rate.sort_by(|a, b| b.rate.total_cmp(&a.rate));
    let monotone = by_rate.windows(2).all(|w| w[1].crash_rate >= w[0].crash_rate);
    let all_crash_below = by_rate
        .iter()
        .rev()
        .take_while(|e| e.crashes == e.runs)
        .last()
        .map(|e| e.rate);
    let stable_above = by_rate.iter().take_while(|e| e.crashes == 0).last().map(|e| e.rate);
    Ok(SweepReport { chip: profile.name, entries, all_crash_below, stable_above, monotone })
}

#[derive(Debug, Clone, Serialize)]
struct SweepCsvRow {
    rate: f64,
    runs: usize,
    crashes: usize,
    crash_rate: f64,
    detected: usize,
    ekf_rate: f64,
}

pub fn write_sweep(out: &Path, cfg: &ScenarioConfig, r: &SweepReport) -> Result<()> {
    let rows: Vec<SweepCsvRow> = r
        .entries
        .iter()
        .map(|e| SweepCsvRow {
            rate: e.rate,
            runs: e.runs,
            crashes: e.crashes,
            crash_rate: e.crash_rate,
            detected: e.detected,
            ekf_rate: e.ekf_rate,
        })
        .collect();
    write_csv(&out.join("sweep.csv"), &rows)?;
    write_json(&out.join("sweep.json"), r)?;
    write_json(&out.join("metadata.json"), &Metadata::new("freq-sweep", cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyScore {
    pub rate: f64,
    pub score: DetectionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub bounds: AccessBounds,
    pub clean: DetectionScore,
    /// Suspended chip: the driver keeps polling at the configured rate.
    pub suspend: DetectionScore,
    pub frequency: Vec<FrequencyScore>,
}

/// Learns access bounds on a clean trace, then scores a fresh clean trace, a
/// suspend attack and each reduced polling rate, attacked for the whole
/// evaluation trace.
pub fn detector_eval(cfg: &ScenarioConfig) -> Result<DetectorReport> {
    let dc = &cfg.detector;
    let pos = [("poll_rate", dc.poll_rate), ("eval_duration", dc.eval_duration)];
    for (name, v) in pos {
        if !(v.is_finite() && v > 0.0) {
            return Err(SimError::config(format!("detector.{name}"), "must be > 0"));
        }
    }
    if let Some(r) = dc.attack_rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(SimError::config("detector.attack_rates", format!("{r} is not a positive rate")));
    }
    let trace_seed = |salt: u64| stream(mix(cfg.seed, salt), Stream::Bus);
    let base = dc.poll_rate;
    let learn = synthesize_trace(&dc.traffic, dc.learn_duration, |_| base, &mut trace_seed(0));
    let bounds = learn_bounds(&learn, dc.window, dc.stride, dc.learn_duration)?;
    let eval = |salt: u64, rate: f64, attacked: bool| {
        let t = synthesize_trace(&dc.traffic, dc.eval_duration, |_| rate, &mut trace_seed(salt));
        score(&t, dc.eval_duration, &bounds, attacked.then_some((0.0, dc.eval_duration)))
    };
    let clean = eval(1, base, false);
    let suspend = eval(2, base, true);
    let frequency = dc
        .attack_rates
        .iter()
        .enumerate()
        .map(|(k, r)| FrequencyScore { rate: *r, score: eval(3 + k as u64, *r, true) })
        .collect();
    Ok(DetectorReport { bounds, clean, suspend, frequency })
}

pub fn write_detector(out: &Path, cfg: &ScenarioConfig, r: &DetectorReport) -> Result<()> {
    write_json(&out.join("detector.json"), r)?;
    write_json(&out.join("metadata.json"), &Metadata::new("detector-eval", cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTrainSummary {
    pub steps: usize,
    pub initial: EvalStats,
    pub trained: EvalStats,
    pub never: EvalStats,
    pub random: EvalStats,
}

/// Trains an attack policy and evaluates it next to the never-attack and
/// uniformly random baselines on the same held-out episodes.
pub fn synth_train(cfg: &ScenarioConfig) -> Result<(Policy, Vec<CurvePoint>, SynthTrainSummary)> {
    cfg.validate()?;
    let mut env = AttackEnv::new(cfg)?;
    let report = train(&mut env)?;
    let tc = &cfg.synthesis.trainer;
    let seeds = eval_seeds(tc.seed, tc.eval_episodes);
    let (never, _) = evaluate(&env, &AttackPolicy::Never, &seeds)?;
    let (random, _) = evaluate(&env, &AttackPolicy::Random { p: 0.5 }, &seeds)?;
    let summary = SynthTrainSummary {
        steps: tc.total_steps,
        initial: report.initial,
        trained: report.trained,
        never,
        random,
    };
    Ok((report.policy, report.curve, summary))
}

#[derive(Debug, Clone, Serialize)]
struct CurveCsvRow {
    step: usize,
    eval_mean: f64,
    eval_std: f64,
    eval_final_distance: f64,
    train_mean: Option<f64>,
}

pub fn write_synth_train(
    out: &Path,
    cfg: &ScenarioConfig,
    policy: &Policy,
    curve: &[CurvePoint],
    summary: &SynthTrainSummary,
) -> Result<()> {
    write_atomic(&out.join("policy.json"), policy.to_json()?.as_bytes())?;
    let rows: Vec<CurveCsvRow> = curve
        .iter()
        .map(|c| CurveCsvRow {
            step: c.step,
            eval_mean: c.eval_mean,
            eval_std: c.eval_std,
            eval_final_distance: c.eval_final_distance,
            train_mean: c.train_mean,
        })
        .collect();
    write_csv(&out.join("reward_curve.csv"), &rows)?;
    write_json(&out.join("train_summary.json"), summary)?;
    write_json(&out.join("metadata.json"), &Metadata::new("synth-train", cfg))
}

/// Greedy rollout of `policy` for episode `seed`.
pub fn synth_rollout(cfg: &ScenarioConfig, policy: &AttackPolicy, seed: u64) -> Result<Rollout> {
    cfg.validate()?;
    let mut env = AttackEnv::new(cfg)?;
    rollout(&mut env, policy, seed)
}

pub fn write_synth_rollout(out: &Path, cfg: &ScenarioConfig, r: &Rollout) -> Result<()> {
    write_csv(&out.join("rollout.csv"), &r.rows)?;
    write_json(&out.join("rollout.json"), r)?;
    write_json(&out.join("metadata.json"), &Metadata::new("synth-rollout", cfg))
}

/// Loads a trace written by `run_to_dir`.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(SimError::from)).collect()
}

/// Aggregate helper for callers that only need one mode's statistics.
pub fn deviation_cv(row: &CampaignRow) -> Option<[f64; 3]> {
    row.deviation.as_ref().map(|d: &[Stats; 3]| [d[0].std / d[0].mean, d[1].std / d[1].mean, d[2].std / d[2].mean])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn detector_report_orders() {
        let mut cfg = ScenarioConfig::default();
        cfg.detector.learn_duration = 30.0;
        cfg.detector.eval_duration = 10.0;
        let r = detector_eval(&cfg).unwrap();
        assert!(r.clean.accuracy > 0.99);
        assert!(r.suspend.accuracy < 0.01);
        assert!(r.frequency.iter().all(|f| f.score.accuracy > 0.9));
    }

    #[test]
    fn sweep_rejects_rates_outside_chip_range() {
        let mut cfg = ScenarioConfig::default();
        cfg.sweep.rates = vec![1.0];
        let e = freq_sweep(&cfg).unwrap_err();
        assert!(e.is_config(), "{e}");
    }

    #[test]
    fn metadata_carries_hash_and_seed() {
        let cfg = ScenarioConfig { seed: 9, ..ScenarioConfig::default() };
        let m = Metadata::new("run", &cfg);
        assert_eq!(m.seed, 9);
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.version, VERSION);
    }
}
