use sdasim_bench::cruising_sim;

#[test]
fn fixture_is_airborne_at_cruise() {
    let sim = cruising_sim(15.0);
    assert!((sim.time() - 15.0).abs() < 1e-9);
    assert!(sim.outcome().is_none());
    assert!((sim.truth().position.z - sim.config().mission.altitude).abs() < 2.0);
}
