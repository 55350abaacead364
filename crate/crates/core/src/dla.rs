//! DSO-level auction: projected gradient ascent on social welfare, using the
//! aggregator prices as the gradient.

use nalgebra::DVector;
use serde::Serialize;

use crate::ala::{run_all, AlaOptions, AlaOutcome, AlaTraceRow};
use crate::error::{Error, Result};
use crate::feasible::{evaluate_constraints, project, wholesale_price, ConstraintReport, FeasibleRegion};
use crate::oracle::social_welfare;
use crate::scenario::{Scenario, System};

/// Relative price accuracy the DSO asks of every aggregator auction. The
/// budget is checked at the aggregators' own prices, so price noise enters
/// it multiplied by `Σ|c_k p_k|`.
const ALA_PRICE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DsoState {
    pub p: DVector<f64>,
    pub prices: DVector<f64>,
    pub theta: DVector<f64>,
    /// Estimated price response `-dc_k/dp_k ≥ 0`, from successive reports.
    pub price_slopes: DVector<f64>,
    pub iteration: usize,
    pub welfare: Vec<f64>,
    /// `a_k` of the last aggregator round.
    pub flags: Vec<bool>,
    pub step_size: f64,
}

impl DsoState {
    pub fn initial(system: &System, scenario: &Scenario) -> Self {
        let a = system.aggregator_count();
        Self {
            p: DVector::zeros(a),
            prices: DVector::from_element(a, scenario.c0b),
            theta: DVector::from_iterator(a, system.markets.iter().map(|m| m.theta)),
            price_slopes: DVector::zeros(a),
            iteration: 0,
            welfare: Vec::new(),
            flags: vec![true; a],
            step_size: scenario.step_size,
        }
    }
}

fn region_for(system: &System, scenario: &Scenario, state: &DsoState) -> Result<FeasibleRegion> {
    FeasibleRegion::new(
        &system.topology,
        &scenario.apply(&system.network),
        &state.theta,
        &state.prices,
        scenario.price_model(),
        scenario.delta,
    )?
    .with_price_response(&state.price_slopes, &state.p)
}

/// `p' = Π(p + ε c)` over the region rebuilt from the latest reports.
pub fn dla_step(state: &DsoState, system: &System, scenario: &Scenario) -> Result<DsoState> {
    if let Some(k) = state.flags.iter().position(|a| !a) {
        return Err(Error::Validation(format!(
            "DSO step requested with aggregator {k} unbalanced"
        )));
    }
    let region = region_for(system, scenario, state)?;
    let target = &state.p + &state.prices * state.step_size;
    let projection = project(&target, &region, Some(&state.p))?;
    Ok(DsoState {
        p: projection.p,
        iteration: state.iteration + 1,
        ..state.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    Converged,
    /// Aggregator `aggregator` (index, at `node`) could not balance `allotment`.
    FlagF {
        aggregator: usize,
        node: usize,
        allotment: f64,
    },
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DlaIterate {
    pub iteration: usize,
    pub social_welfare: f64,
    pub total_injection: f64,
    pub wholesale_price: f64,
    pub p: Vec<f64>,
    pub prices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatorResult {
    pub node: usize,
    pub allotment: f64,
    pub price: f64,
    pub theta: f64,
    pub demands: Vec<f64>,
    pub supplies: Vec<f64>,
    pub bids: Vec<f64>,
    pub ala_iterations: usize,
    pub energy_residual: f64,
    pub money_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlaTraceRecord {
    pub dla_iteration: usize,
    pub node: usize,
    #[serde(flatten)]
    pub row: AlaTraceRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuctionResult {
    pub termination: Termination,
    /// DSO iterations whose aggregator round fully balanced.
    pub iterations: usize,
    pub p: Vec<f64>,
    pub prices: Vec<f64>,
    pub aggregators: Vec<AggregatorResult>,
    pub total_injection: f64,
    pub wholesale_price: f64,
    /// `cᵀp - c0 Σp`, ¢.
    pub profit: f64,
    pub social_welfare: f64,
    pub welfare_trajectory: Vec<f64>,
    pub history: Vec<DlaIterate>,
    /// Constraint residuals at the final allotment, budget at final prices.
    pub constraints: ConstraintReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ala_trace: Vec<AlaTraceRecord>,
}

fn welfare_of(system: &System, outcomes: &[AlaOutcome]) -> Result<f64> {
    let demands: Vec<Vec<f64>> = outcomes.iter().map(|o| o.demands.clone()).collect();
    let supplies: Vec<Vec<f64>> = outcomes.iter().map(|o| o.supplies.clone()).collect();
    social_welfare(system, &demands, &supplies)
}

fn prices_of(outcomes: &[AlaOutcome]) -> DVector<f64> {
    DVector::from_iterator(outcomes.len(), outcomes.iter().map(|o| o.price))
}

struct Round {
    p: DVector<f64>,
    outcomes: Vec<AlaOutcome>,
}

/// Runs the bilevel auction from `p = 0` until the allotments and prices
/// settle, an aggregator raises `a_k = F`, or the iteration cap.
pub fn run_dla(system: &System, scenario: &Scenario, trace: bool) -> Result<AuctionResult> {
    scenario.validate()?;
    let a = system.aggregator_count();
    let ala = AlaOptions {
        price_tol: ALA_PRICE_TOL,
        ..scenario.ala_options()
    };
    let tol = scenario.tolerances;
    let mut state = DsoState::initial(system, scenario);
    // Fails early when the origin is not a member of the feasible set.
    project(&state.p, &region_for(system, scenario, &state)?, None)?;

    let mut records = Vec::new();
    let mut history = Vec::new();
    let mut run_round = |p: &DVector<f64>, prices: &DVector<f64>, iteration: usize| -> Result<Vec<AlaOutcome>> {
        let outcomes = run_all(&system.markets, p.as_slice(), prices.as_slice(), &ala, trace)?;
        if trace {
            for (m, o) in system.markets.iter().zip(&outcomes) {
                records.extend(o.trace.iter().map(|row| AlaTraceRecord {
                    dla_iteration: iteration,
                    node: m.node,
                    row: *row,
                }));
            }
        }
        Ok(outcomes)
    };

    let mut current = Round {
        outcomes: run_round(&state.p, &state.prices, 0)?,
        p: state.p.clone(),
    };
    let mut previous: Option<Round> = None;
    let termination = loop {
        state.flags = current.outcomes.iter().map(|o| o.balanced).collect();
        if let Some(k) = state.flags.iter().position(|f| !f) {
            break Termination::FlagF {
                aggregator: k,
                node: system.markets[k].node,
                allotment: current.p[k],
            };
        }
        let prices = prices_of(&current.outcomes);
        let sw = welfare_of(system, &current.outcomes)?;
        state.welfare.push(sw);
        history.push(DlaIterate {
            iteration: state.iteration,
            social_welfare: sw,
            total_injection: current.p.sum(),
            wholesale_price: wholesale_price(scenario.c0b, scenario.beta0, current.p.as_slice()),
            p: current.p.as_slice().to_vec(),
            prices: prices.as_slice().to_vec(),
        });

        if let Some(prev) = &previous {
            let prev_prices = prices_of(&prev.outcomes);
            let dp = (&current.p - &prev.p).norm();
            let dc = prices
                .iter()
                .zip(prev_prices.iter())
                .map(|(c, c_prev)| (c - c_prev).abs() / c.abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            let own = region_for(
                system,
                scenario,
                &DsoState {
                    prices: prices.clone(),
                    price_slopes: DVector::zeros(a),
                    ..state.clone()
                },
            )?;
            let budget = own.budget(&current.p);
            log::debug!(
                "dla iteration {}: sw {sw:.6} |dp| {dp:.3e} dc {dc:.3e} budget {budget:.3e}",
                state.iteration
            );
            if dp <= tol.allotment && dc <= tol.price && budget <= tol.budget {
                break Termination::Converged;
            }
            // Secant estimate of each aggregator's price response.
            for k in 0..a {
                let step = current.p[k] - prev.p[k];
                if step.abs() > 1e-9 * current.p[k].abs().max(1.0) {
                    let slope = -(prices[k] - prev_prices[k]) / step;
                    state.price_slopes[k] = if slope.is_finite() { slope.max(0.0) } else { 0.0 };
                }
            }
        }
        if state.iteration >= scenario.max_dla_iterations {
            break Termination::IterationCap;
        }

        state.p = current.p.clone();
        state.prices = prices.clone();
        state.theta = DVector::from_iterator(a, current.outcomes.iter().map(|o| o.theta));
        let mut step = scenario.step_size;
        let (next_p, next_outcomes) = loop {
            let next = dla_step(
                &DsoState {
                    step_size: step,
                    ..state.clone()
                },
                system,
                scenario,
            )?;
            let outcomes = run_round(&next.p, &prices, state.iteration + 1)?;
            let Some(sigma) = scenario.armijo else {
                break (next.p, outcomes);
            };
            // Trapezoid estimate of the welfare change from reported prices.
            let dp = &next.p - &state.p;
            let linear = prices.dot(&dp);
            let gain = 0.5 * (&prices + prices_of(&outcomes)).dot(&dp);
            let all_balanced = outcomes.iter().all(|o| o.balanced);
            if !all_balanced || linear <= 0.0 || gain >= sigma * linear || step < scenario.step_size * 1e-6 {
                break (next.p, outcomes);
            }
            step *= 0.5;
        };
        state.iteration += 1;
        previous = Some(std::mem::replace(
            &mut current,
            Round {
                p: next_p,
                outcomes: next_outcomes,
            },
        ));
    };

    // On a flag the last fully balanced round is reported.
    let reported = match (&termination, previous) {
        (Termination::FlagF { .. }, Some(prev)) => prev,
        _ => current,
    };
    let prices = prices_of(&reported.outcomes);
    let own = FeasibleRegion::new(
        &system.topology,
        &scenario.apply(&system.network),
        &DVector::from_iterator(a, reported.outcomes.iter().map(|o| o.theta)),
        &prices,
        scenario.price_model(),
        scenario.delta,
    )?;
    let constraints = evaluate_constraints(&reported.p, &own)?;
    let total = reported.p.sum();
    let c0 = wholesale_price(scenario.c0b, scenario.beta0, reported.p.as_slice());
    let profit = prices.dot(&reported.p) - c0 * total;
    let social_welfare = welfare_of(system, &reported.outcomes)?;
    let aggregators = system
        .markets
        .iter()
        .zip(&reported.outcomes)
        .map(|(m, o)| AggregatorResult {
            node: m.node,
            allotment: o.allotment,
            price: o.price,
            theta: o.theta,
            demands: o.demands.clone(),
            supplies: o.supplies.clone(),
            bids: o.bids.clone(),
            ala_iterations: o.iterations,
            energy_residual: o.energy_residual,
            money_residual: o.money_residual,
        })
        .collect();
    Ok(AuctionResult {
        termination,
        iterations: state.welfare.len(),
        p: reported.p.as_slice().to_vec(),
        prices: prices.as_slice().to_vec(),
        aggregators,
        total_injection: total,
        wholesale_price: c0,
        profit,
        social_welfare,
        welfare_trajectory: state.welfare,
        history,
        constraints,
        ala_trace: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Buyer, Seller};
    use crate::ala::AggregatorMarket;
    use crate::grid::tests::chain;
    use crate::scenario::AgentsFile;

    fn system(markets: Vec<AggregatorMarket>, s0: f64) -> System {
        let nodes: Vec<usize> = markets.iter().map(|m| m.node).collect();
        let mut net = chain(nodes.iter().copied().max().unwrap(), nodes);
        net.s0_limit_pu = s0;
        for l in &mut net.lines {
            l.mva_limit_pu = 100.0;
            l.r_pu = 1e-4;
            l.x_pu = 2e-4;
        }
        System::new(
            net,
            AgentsFile {
                seed: None,
                aggregators: markets,
            },
        )
        .unwrap()
    }

    fn lone_buyer() -> System {
        system(
            vec![AggregatorMarket {
                node: 1,
                theta: 0.0,
                buyers: vec![Buyer::log(1.0, 1.0).unwrap()],
                sellers: vec![],
            }],
            10.0,
        )
    }

    #[test]
    fn zero_prices_are_a_fixed_point() {
        let sys = lone_buyer();
        let scenario = Scenario {
            c0b: 0.0,
            ..Scenario::default()
        };
        let mut state = DsoState::initial(&sys, &scenario);
        state.p = DVector::from_element(1, 0.5);
        state.prices = DVector::zeros(1);
        let next = dla_step(&state, &sys, &scenario).unwrap();
        assert_eq!(next.p, state.p);
    }

    #[test]
    fn interior_step_is_plain_gradient_step() {
        let sys = system(
            vec![
                AggregatorMarket {
                    node: 1,
                    theta: 0.4,
                    buyers: vec![],
                    sellers: vec![],
                },
                AggregatorMarket {
                    node: 2,
                    theta: 0.4,
                    buyers: vec![],
                    sellers: vec![],
                },
            ],
            50.0,
        );
        let scenario = Scenario {
            step_size: 1e-3,
            c0b: 0.0,
            ..Scenario::default()
        };
        let mut state = DsoState::initial(&sys, &scenario);
        state.p = DVector::from_vec(vec![1.0, 1.0]);
        state.prices = DVector::from_vec(vec![100.0, 200.0]);
        let next = dla_step(&state, &sys, &scenario).unwrap();
        assert!((next.p[0] - 1.1).abs() < 1e-12 && (next.p[1] - 1.2).abs() < 1e-12, "{}", next.p);
    }

    #[test]
    fn lone_buyer_settles_at_base_price() {
        // u'(p) = 1 / (p + 1) = c0b = 0.4 → p = 1.5.
        let sys = lone_buyer();
        let scenario = Scenario {
            c0b: 0.4,
            beta0: 0.0,
            step_size: 0.5,
            ..Scenario::default()
        };
        let out = run_dla(&sys, &scenario, false).unwrap();
        assert_eq!(out.termination, Termination::Converged);
        assert!((out.p[0] - 1.5).abs() < 1e-4, "{:?}", out.p);
        assert!((out.prices[0] - 0.4).abs() < 1e-4);
        assert!(out.profit >= -1e-6);
    }

    #[test]
    fn budget_bound_single_aggregator_matches_bisection() {
        // Budget only: (c0b - c(p)) p + β0 p² = 0 with c(p) = x / (p + 1/y)
        // from a single buyer; bisection on that scalar equation.
        let (x, y, c0b, beta0) = (300.0, 4.0, 100.0, 20.0);
        let sys = system(
            vec![AggregatorMarket {
                node: 1,
                theta: 0.3,
                buyers: vec![Buyer::log(x, y).unwrap()],
                sellers: vec![],
            }],
            1e3,
        );
        let residual = |p: f64| c0b - x / (p + 1.0 / y) + beta0 * p;
        let (mut lo, mut hi) = (1e-9, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let scenario = Scenario {
            c0b,
            beta0,
            step_size: 2e-3,
            ..Scenario::default()
        };
        let out = run_dla(&sys, &scenario, false).unwrap();
        assert_eq!(out.termination, Termination::Converged);
        assert!((out.p[0] - lo).abs() < 1e-4, "{} vs {lo}", out.p[0]);
        let budget = out.constraints.budget;
        assert!(budget <= 1e-6 && budget > -1e-4, "{budget}");
    }

    #[test]
    fn exporters_appear_with_expensive_wholesale_power() {
        let sellers = |n: usize| (0..n).map(|i| Seller::log(100.0 + 10.0 * i as f64, 3.0, 0.4).unwrap()).collect();
        let buyers = |n: usize| (0..n).map(|i| Buyer::log(200.0 + 20.0 * i as f64, 3.0).unwrap()).collect();
        let sys = system(
            vec![
                AggregatorMarket {
                    node: 1,
                    theta: 0.4,
                    buyers: buyers(1),
                    sellers: sellers(6),
                },
                AggregatorMarket {
                    node: 2,
                    theta: 0.4,
                    buyers: buyers(5),
                    sellers: sellers(1),
                },
            ],
            20.0,
        );
        let scenario = Scenario {
            c0b: 800.0,
            beta0: 40.0,
            ..Scenario::default()
        };
        let out = run_dla(&sys, &scenario, false).unwrap();
        assert_eq!(out.termination, Termination::Converged);
        assert!(out.p[0] < 0.0 && out.p[1] > 0.0, "{:?}", out.p);
        assert!(out.constraints.feasible);
        assert!(out.profit >= -1e-6);
    }

    #[test]
    fn unabsorbable_first_round_flags() {
        let sys = system(
            vec![AggregatorMarket {
                node: 1,
                theta: 0.4,
                buyers: vec![],
                sellers: vec![Seller::log(100.0, 3.0, 0.4).unwrap()],
            }],
            10.0,
        );
        // Prices stay high but the lone seller can never absorb an import.
        let scenario = Scenario {
            c0b: 0.0,
            step_size: 1.0,
            ..Scenario::default()
        };
        let out = run_dla(&sys, &scenario, false).unwrap();
        assert!(matches!(out.termination, Termination::FlagF { node: 1, .. }), "{:?}", out.termination);
        assert!(out.p[0] <= 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let sys = system(
            vec![
                AggregatorMarket {
                    node: 1,
                    theta: 0.35,
                    buyers: vec![Buyer::log(250.0, 3.0).unwrap(); 3],
                    sellers: vec![Seller::log(150.0, 4.0, 0.3).unwrap(); 2],
                },
                AggregatorMarket {
                    node: 2,
                    theta: 0.45,
                    buyers: vec![Buyer::log(300.0, 2.0).unwrap(); 2],
                    sellers: vec![Seller::log(120.0, 5.0, 0.4).unwrap(); 3],
                },
            ],
            3.0,
        );
        let scenario = Scenario {
            beta0: 10.0,
            ..Scenario::default()
        };
        let a = run_dla(&sys, &scenario, true).unwrap();
        let b = run_dla(&sys, &scenario, true).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.ala_trace, b.ala_trace);
        assert!(!a.ala_trace.is_empty());
    }
}
