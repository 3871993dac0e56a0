//! Shared fixtures for the criterion benchmarks.

use sdasim_core::{ScenarioConfig, Simulation};

/// Clean flight already in cruise, so benchmarks time steady-state ticks.
pub fn cruising_sim(seconds: f64) -> Simulation {
    let cfg = ScenarioConfig::default();
    let mut sim = Simulation::new(&cfg).expect("default config is valid");
    sim.set_record_trace(false);
    let ticks = (seconds * cfg.loop_config.loop_rate) as u64;
    sim.advance(ticks).expect("clean flight");
    sim
}
