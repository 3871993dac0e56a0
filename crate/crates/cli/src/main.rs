//! `sdasim` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration error, 4 simulation or
//! training failure, 5 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sdasim_core::runner;
use sdasim_core::{AttackMode, AttackPolicy, Policy, ScenarioConfig, SimError};

#[derive(Debug, Parser)]
#[command(name = "sdasim", version, about = "Sensor deprivation attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML, or JSON with a .json extension). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Falls back to the config's `output`, then ./sdasim-out.
    #[arg(long, short, env = "SDASIM_OUT")]
    out: Option<PathBuf>,
    /// Attack mode: absent, default, erroneous, stale, suspend, chip or frequency:<Hz>.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fly one mission and write trace.csv, result.json and metadata.json.
    Run(Common),
    /// Repeat each attack mode over seeded runs and aggregate outcomes.
    Campaign {
        #[command(flatten)]
        common: Common,
        /// Runs per mode.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Fly missions at reduced sensor rates and report the instability threshold.
    FreqSweep {
        #[command(flatten)]
        common: Common,
        /// Runs per rate.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Score the MMIO access monitor on clean, suspended and slowed traffic.
    DetectorEval(Common),
    /// Train an attack policy.
    SynthTrain {
        #[command(flatten)]
        common: Common,
        /// Agent steps of experience.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll out a policy greedily for one episode.
    SynthRollout {
        #[command(flatten)]
        common: Common,
        /// Policy file, or one of never, always, random.
        #[arg(long, default_value = "never")]
        policy: String,
        /// Episode seed (goal and noise).
        #[arg(long, default_value_t = 1)]
        episode: u64,
    },
    /// Print the default scenario as TOML.
    DefaultConfig,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match &e {
            e if e.is_config() => 3,
            SimError::Io(_) | SimError::Csv(_) => 5,
            _ => 4,
        };
        Failure { code, error: e.into() }
    }
}

fn config_failure(e: anyhow::Error) -> Failure {
    Failure { code: 3, error: e }
}

fn load(common: &Common) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())).map_err(config_failure)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mode(common: &Common) -> Result<Option<AttackMode>, Failure> {
    common.mode.as_deref().map(AttackMode::from_name).transpose().map_err(Failure::from)
}

fn out_dir(common: &Common, cfg: &ScenarioConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| runner::output_dir(cfg, Path::new("sdasim-out")))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(common) => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode(&common)? {
                cfg = cfg.with_attack(m);
            }
            let out = out_dir(&common, &cfg);
            let r = runner::run_to_dir(&cfg, &out)?;
            let res = &r.result;
            println!(
                "outcome={} detected={} ttd={} ttc={} end={:.2}s -> {}",
                res.outcome.name(),
                res.detected,
                opt(res.ttd),
                opt(res.ttc),
                res.end_time,
                out.display()
            );
        }
        Command::Campaign { common, runs } => {
            let mut cfg = load(&common)?;
            if let Some(n) = runs {
                cfg.campaign.runs = n;
                cfg.campaign.baseline_runs = n;
            }
            if let Some(m) = mode(&common)? {
                // Keep the configured parameters of a mode the campaign already lists.
                let chosen = cfg.campaign.modes.iter().copied().find(|c| c.name() == m.name()).unwrap_or(m);
                cfg.campaign.modes = vec![chosen];
            }
            let out = out_dir(&common, &cfg);
            let c = runner::campaign(&cfg)?;
            runner::write_campaign(&out, &cfg, &c)?;
            println!("{:<10} {:>4} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "mode", "runs", "U-crash", "U-compl", "D-crash", "D-land", "other", "TtD");
            for row in &c.table {
                let p = row.percent;
                println!(
                    "{:<10} {:>4} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7}",
                    row.mode,
                    row.runs,
                    p[0],
                    p[1],
                    p[2],
                    p[3],
                    p[4],
                    opt(row.ttd.map(|s| s.mean))
                );
            }
            println!("-> {}", out.display());
        }
        Command::FreqSweep { common, runs } => {
            let mut cfg = load(&common)?;
            if let Some(n) = runs {
                cfg.sweep.runs = n;
            }
            let out = out_dir(&common, &cfg);
            let r = runner::freq_sweep(&cfg)?;
            runner::write_sweep(&out, &cfg, &r)?;
            for e in &r.entries {
                println!("{:>8.2} Hz  crashes {}/{}  ekf {:.2} Hz", e.rate, e.crashes, e.runs, e.ekf_rate);
            }
            println!(
                "chip={} stable_above={} all_crash_below={} monotone={} -> {}",
                r.chip,
                opt(r.stable_above),
                opt(r.all_crash_below),
                r.monotone,
                out.display()
            );
        }
        Command::DetectorEval(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg);
            let r = runner::detector_eval(&cfg)?;
            runner::write_detector(&out, &cfg, &r)?;
            println!("clean accuracy {:.6}", r.clean.accuracy);
            println!("suspend accuracy {:.6}", r.suspend.accuracy);
            for f in &r.frequency {
                println!("{} Hz accuracy {:.6}", f.rate, f.score.accuracy);
            }
            println!("-> {}", out.display());
        }
        Command::SynthTrain { common, steps } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode(&common)? {
                cfg.synthesis.mode = m;
            }
            if let Some(s) = steps {
                cfg.synthesis.trainer.total_steps = s;
            }
            let out = out_dir(&common, &cfg);
            let (policy, curve, summary) = runner::synth_train(&cfg)?;
            runner::write_synth_train(&out, &cfg, &policy, &curve, &summary)?;
            for c in &curve {
                println!("step {:>7}  eval {:>9.2} ± {:<8.2} final distance {:.1} m", c.step, c.eval_mean, c.eval_std, c.eval_final_distance);
            }
            println!(
                "initial {:.2}±{:.2}  trained {:.2}±{:.2} (95% CI half-widths)",
                summary.initial.mean_return, summary.initial.ci95, summary.trained.mean_return, summary.trained.ci95
            );
            println!(
                "final distance: trained {:.1} m, never {:.1} m, random {:.1} m -> {}",
                summary.trained.mean_final_distance,
                summary.never.mean_final_distance,
                summary.random.mean_final_distance,
                out.display()
            );
        }
        Command::SynthRollout { common, policy, episode } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode(&common)? {
                cfg.synthesis.mode = m;
            }
            let pol = match policy.as_str() {
                "never" => AttackPolicy::Never,
                "always" => AttackPolicy::Always,
                "random" => AttackPolicy::Random { p: 0.5 },
                path => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading policy {path}"))
                        .map_err(|error| Failure { code: 5, error })?;
                    AttackPolicy::Learned(
                        Policy::from_json(&text).with_context(|| format!("policy {path}")).map_err(config_failure)?,
                    )
                }
            };
            let out = out_dir(&common, &cfg);
            let r = runner::synth_rollout(&cfg, &pol, episode)?;
            runner::write_synth_rollout(&out, &cfg, &r)?;
            println!(
                "policy={} steps={} attacked={} return={:.2} final distance {:.1} m (from {:.1} m) -> {}",
                r.policy,
                r.steps,
                r.attacked_steps,
                r.episode_return,
                r.final_distance,
                r.initial_distance,
                out.display()
            );
        }
        Command::DefaultConfig => {
            print!("{}", ScenarioConfig::default().to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
