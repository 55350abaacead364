use std::hint::black_box;

use bilevel_market_bench::{region, scenario, system};
use bilevel_market_core::ala::run_ala;
use bilevel_market_core::dla::run_dla;
use bilevel_market_core::feasible::project;
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;

fn ala(c: &mut Criterion) {
    let system = system();
    let options = scenario("scenario-3").ala_options();
    let market = &system.markets[0];
    c.bench_function("ala/first_aggregator", |b| {
        b.iter(|| run_ala(market, black_box(0.5), 200.0, &options, false).unwrap())
    });
}

fn projection(c: &mut Criterion) {
    let system = system();
    let scenario = scenario("scenario-2");
    let region = region(&system, &scenario, 250.0);
    let target = DVector::from_element(system.aggregator_count(), 3.0);
    c.bench_function("projection/ieee37", |b| {
        b.iter(|| project(black_box(&target), &region, None).unwrap())
    });
}

fn dla(c: &mut Criterion) {
    let system = system();
    let mut group = c.benchmark_group("dla");
    group.sample_size(10);
    for name in ["scenario-3", "scenario-4"] {
        let scenario = scenario(name);
        group.bench_function(name, |b| b.iter(|| run_dla(&system, &scenario, false).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, ala, projection, dla);
criterion_main!(benches);
