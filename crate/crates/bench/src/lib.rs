//! Fixtures shared by the benchmarks in `benches/`.

use bilevel_market_core::feasible::FeasibleRegion;
use bilevel_market_core::scenario::{bundled_system, Scenario, System, DEFAULT_SEED};
use nalgebra::DVector;

pub fn system() -> System {
    bundled_system(DEFAULT_SEED).expect("bundled system loads")
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::preset(name).expect("known preset")
}

/// The feasible region seen by the DSO when every aggregator reports `price`.
pub fn region(system: &System, scenario: &Scenario, price: f64) -> FeasibleRegion {
    let a = system.aggregator_count();
    let theta = DVector::from_iterator(a, system.markets.iter().map(|m| m.theta));
    FeasibleRegion::new(
        &system.topology,
        &scenario.apply(&system.network),
        &theta,
        &DVector::from_element(a, price),
        scenario.price_model(),
        scenario.delta,
    )
    .expect("region builds")
}
