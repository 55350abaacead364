//! Full-information benchmark: maximizes total utility directly over the
//! feasible set, knowing every agent's utility.
//!
//! Given an allotment `p_k`, the best local allocation equalizes marginal
//! utilities at a multiplier `λ_k` with `D(λ_k) - S(λ_k) = p_k`. Its value
//! `Θ*_k(p_k)` is concave with slope `λ_k`, so the outer problem is a smooth
//! concave maximization over `p` alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ala::AggregatorMarket;
use crate::barrier::{self, BarrierOptions, Constraint, Equality, KktResidual, Objective};
use crate::error::{check_len, Error, Result};
use crate::feasible::{evaluate_constraints, ConstraintReport, FeasibleRegion};
use crate::scenario::{Scenario, System};

/// Total utility of one aggregator's agents.
pub fn market_welfare(market: &AggregatorMarket, demands: &[f64], supplies: &[f64]) -> Result<f64> {
    check_len("market_welfare demands", market.buyers.len(), demands.len())?;
    check_len("market_welfare supplies", market.sellers.len(), supplies.len())?;
    let mut total = 0.0;
    for (b, d) in market.buyers.iter().zip(demands) {
        total += b.utility().evaluate(*d)?.0;
    }
    for (index, (s, supply)) in market.sellers.iter().zip(supplies).enumerate() {
        if *supply > s.capacity() {
            return Err(Error::CapacityViolation {
                index,
                supply: *supply,
                capacity: s.capacity(),
            });
        }
        if *supply < 0.0 {
            return Err(Error::NegativeQuantity(*supply));
        }
        total += s.retained_value(*supply);
    }
    Ok(total)
}

/// `Σ_k [Σ_i u_i(d_i) + Σ_j v_j(g_j - s_j)]`.
pub fn social_welfare(system: &System, demands: &[Vec<f64>], supplies: &[Vec<f64>]) -> Result<f64> {
    check_len("social_welfare demands", system.markets.len(), demands.len())?;
    check_len("social_welfare supplies", system.markets.len(), supplies.len())?;
    let mut total = 0.0;
    for ((m, d), s) in system.markets.iter().zip(demands).zip(supplies) {
        total += market_welfare(m, d, s)?;
    }
    Ok(total)
}

/// Welfare-maximizing split of a fixed allotment inside one aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptimum {
    /// Common marginal utility `λ_k = dΘ*/dp_k`.
    pub multiplier: f64,
    pub demands: Vec<f64>,
    pub supplies: Vec<f64>,
    pub welfare: f64,
    /// `d²Θ*/dp_k²`, capped when the allocation is locally insensitive to `λ`.
    pub curvature: f64,
}

const CURVATURE_CAP: f64 = 1e10;

/// Budget violation tolerated on accepted iterates, scaled by the wholesale bill.
fn budget_slack(scenario: &Scenario, p: &DVector<f64>) -> f64 {
    1e-9 * (scenario.c0b * p.abs().sum()).max(1.0)
}

fn net_demand(market: &AggregatorMarket, lambda: f64) -> (f64, f64) {
    let mut net = 0.0;
    let mut slope = 0.0;
    for b in &market.buyers {
        net += b.utility().quantity_at(lambda);
        slope += b.utility().quantity_slope(lambda);
    }
    for s in &market.sellers {
        let keep = s.utility().quantity_at(lambda);
        if keep < s.capacity() {
            net -= s.capacity() - keep;
            slope += s.utility().quantity_slope(lambda);
        }
    }
    (net, slope)
}

/// Bounds on `p_k` inside which a local optimum exists.
pub fn allotment_range(market: &AggregatorMarket) -> (f64, f64) {
    let lower = -market.sellers.iter().map(|s| s.capacity()).sum::<f64>();
    let upper = market
        .buyers
        .iter()
        .map(|b| match *b.utility() {
            crate::agents::Utility::Log { .. } => f64::INFINITY,
            crate::agents::Utility::Quadratic { a, b } => a / b,
        })
        .sum::<f64>();
    (lower, upper)
}

/// Solves `max Σu(d) + Σv(g - s)` subject to `Σd - Σs = p_k`, `0 ≤ s ≤ g`,
/// `d ≥ 0` by bisection on the shared multiplier.
pub fn local_optimum(market: &AggregatorMarket, allotment: f64) -> Result<LocalOptimum> {
    let (lower, upper) = allotment_range(market);
    if allotment < lower || allotment > upper {
        return Err(Error::InfeasibleRegion(format!(
            "allotment {allotment} outside [{lower}, {upper}] at node {}",
            market.node
        )));
    }
    // Above every agent's marginal utility at zero, net demand is -Σg.
    let top = market
        .buyers
        .iter()
        .map(|b| b.utility().marginal(0.0))
        .chain(market.sellers.iter().map(|s| s.utility().marginal(0.0)))
        .fold(1.0, f64::max);
    let mut hi = 2.0 * top;
    let mut lo = hi;
    while net_demand(market, lo).0 < allotment {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::InfeasibleRegion(format!(
                "allotment {allotment} cannot be absorbed at node {}",
                market.node
            )));
        }
    }
    // lo == hi when the allotment sits at its lower bound.
    for _ in 0..2000 {
        let mid = (lo * hi).sqrt();
        if !(mid > lo && mid < hi) {
            break;
        }
        if net_demand(market, mid).0 >= allotment {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = if (net_demand(market, lo).0 - allotment).abs() <= (net_demand(market, hi).0 - allotment).abs() {
        lo
    } else {
        hi
    };
    let demands: Vec<f64> = market.buyers.iter().map(|b| b.utility().quantity_at(lambda)).collect();
    let mut supplies: Vec<f64> = market
        .sellers
        .iter()
        .map(|s| s.capacity() - s.utility().quantity_at(lambda).min(s.capacity()))
        .collect();
    // Absorb the bisection's last rounding error in the most flexible seller
    // or buyer so that the allotment balances exactly.
    let imbalance = demands.iter().sum::<f64>() - supplies.iter().sum::<f64>() - allotment;
    if let Some((j, _)) = supplies
        .iter()
        .enumerate()
        .filter(|(j, s)| **s + imbalance >= 0.0 && **s + imbalance <= market.sellers[*j].capacity())
        .max_by(|a, b| a.1.total_cmp(b.1))
    {
        supplies[j] += imbalance;
    }
    let (_, slope) = net_demand(market, lambda);
    let curvature = if slope < 0.0 {
        (1.0 / slope).max(-CURVATURE_CAP)
    } else {
        -CURVATURE_CAP
    };
    let welfare = market_welfare(market, &demands, &supplies)?;
    Ok(LocalOptimum {
        multiplier: lambda,
        demands,
        supplies,
        welfare,
        curvature,
    })
}

/// How the budget constraint enters the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Aggregator prices in the budget equal the optimum's own multipliers.
    #[default]
    SelfConsistent,
    /// Only the physical constraints.
    Omitted,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub p: Vec<f64>,
    /// Multipliers `λ_k`, the benchmark's aggregator prices.
    pub prices: Vec<f64>,
    pub demands: Vec<Vec<f64>>,
    pub supplies: Vec<Vec<f64>>,
    pub social_welfare: f64,
    pub budget_mode: BudgetMode,
    pub converged: bool,
    /// Rounds of the price self-consistency loop.
    pub consistency_rounds: usize,
    /// Final max relative change of the prices in that loop.
    pub price_change: f64,
    pub kkt: KktResidual,
    pub constraints: ConstraintReport,
}

struct NegativeWelfare<'a> {
    markets: &'a [AggregatorMarket],
}

impl NegativeWelfare<'_> {
    fn locals(&self, p: &DVector<f64>) -> Option<Vec<LocalOptimum>> {
        self.markets
            .iter()
            .zip(p.iter())
            .map(|(m, pk)| local_optimum(m, *pk).ok())
            .collect()
    }
}

impl Objective for NegativeWelfare<'_> {
    fn value(&self, p: &DVector<f64>) -> Option<f64> {
        Some(-self.locals(p)?.iter().map(|l| l.welfare).sum::<f64>())
    }
    fn gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        let locals = self.locals(p).expect("gradient inside the domain");
        DVector::from_iterator(p.len(), locals.iter().map(|l| -l.multiplier))
    }
    fn hessian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let locals = self.locals(p).expect("hessian inside the domain");
        DMatrix::from_diagonal(&DVector::from_iterator(p.len(), locals.iter().map(|l| -l.curvature)))
    }
}

fn domain_constraints(markets: &[AggregatorMarket]) -> (Vec<Constraint>, Vec<Equality>) {
    let a = markets.len();
    let unit = |k: usize, sign: f64| {
        let mut v = DVector::zeros(a);
        v[k] = sign;
        v
    };
    let mut constraints = Vec::new();
    let mut equalities = Vec::new();
    for (k, m) in markets.iter().enumerate() {
        let (lower, upper) = allotment_range(m);
        if upper <= lower {
            equalities.push(Equality {
                row: unit(k, 1.0),
                rhs: lower,
            });
            continue;
        }
        constraints.push(Constraint::linear(unit(k, -1.0), -lower));
        if upper.is_finite() {
            constraints.push(Constraint::linear(unit(k, 1.0), upper));
        }
    }
    (constraints, equalities)
}

fn solve_fixed_prices(
    system: &System,
    region: &FeasibleRegion,
    mode: BudgetMode,
    warm: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, KktResidual)> {
    let (mut constraints, mut equalities) = region.solver_constraints_with(mode == BudgetMode::SelfConsistent);
    let (domain, fixed) = domain_constraints(&system.markets);
    constraints.extend(domain);
    equalities.extend(fixed);
    let a = system.aggregator_count();
    let satisfies = |x: &DVector<f64>| {
        equalities.iter().all(|e| (e.row.dot(x) - e.rhs).abs() <= 1e-12) && constraints.iter().all(|c| c.eval(x) < 0.0)
    };
    let start = match warm {
        Some(w) if satisfies(w) => w.clone(),
        _ => barrier::find_interior_point(&constraints, &equalities, &DVector::zeros(a))?,
    };
    let objective = NegativeWelfare {
        markets: &system.markets,
    };
    let options = BarrierOptions {
        complementarity_tol: 1e-8,
        ..BarrierOptions::default()
    };
    let solution = barrier::minimize(&objective, &constraints, &equalities, start, &options)?;
    Ok((solution.x, solution.kkt))
}

/// Maximizes social welfare over the scenario's feasible set.
///
/// In [`BudgetMode::SelfConsistent`] the budget constraint is evaluated at
/// the prices the optimum itself induces, `c_k = λ_k(p_k)`. That constraint
/// is handled by sequential linearization of `λ(p)` around the current
/// iterate until the multipliers change by at most `1e-6` relative.
pub fn solve_centralized(system: &System, scenario: &Scenario, mode: BudgetMode) -> Result<OracleResult> {
    scenario.validate()?;
    let network = scenario.apply(&system.network);
    let a = system.aggregator_count();
    let theta = DVector::from_iterator(a, system.markets.iter().map(|m| m.theta));
    let region = |prices: &DVector<f64>| {
        FeasibleRegion::new(
            &system.topology,
            &network,
            &theta,
            prices,
            scenario.price_model(),
            scenario.delta,
        )
    };
    let objective = NegativeWelfare {
        markets: &system.markets,
    };
    let locals = |p: &DVector<f64>| -> Result<Vec<LocalOptimum>> {
        objective
            .locals(p)
            .ok_or_else(|| Error::InfeasibleRegion("optimum left the allotment domain".into()))
    };
    let multipliers = |l: &[LocalOptimum]| DVector::from_iterator(a, l.iter().map(|l| l.multiplier));

    let (mut p, mut kkt) =
        solve_fixed_prices(system, &region(&DVector::from_element(a, scenario.c0b))?, BudgetMode::Omitted, None)?;
    let mut rounds = 0;
    let mut change = 0.0;
    let mut converged = true;
    if mode == BudgetMode::SelfConsistent {
        let own = region(&multipliers(&locals(&p)?))?;
        if own.budget(&p) > 0.0 {
            // Restart from the origin, where the budget holds with equality.
            // Each linearized region then contains the previous iterate.
            converged = false;
            p = DVector::zeros(a);
            let mut current = locals(&p)?;
            for round in 1..=300 {
                rounds = round;
                let prices = multipliers(&current);
                let slopes = DVector::from_iterator(a, current.iter().map(|l| -l.curvature));
                let linearized = region(&prices)?.with_price_response(&slopes, &p)?;
                let (target, next_kkt) = solve_fixed_prices(system, &linearized, mode, Some(&p))?;
                // Welfare is concave and the linearized region contains `p`, so
                // welfare never drops along the segment; backtrack until the
                // exact budget holds. Regime switches of single agents make the
                // linearization overshoot and, without this, cycle.
                let slack = budget_slack(scenario, &p);
                let mut alpha = 1.0;
                let accepted = loop {
                    let trial = &p + (&target - &p) * alpha;
                    let trial_locals = locals(&trial)?;
                    if region(&multipliers(&trial_locals))?.budget(&trial) <= slack {
                        break Some((trial, trial_locals));
                    }
                    alpha *= 0.5;
                    if alpha < 1e-6 {
                        break None;
                    }
                };
                let Some((next_p, next)) = accepted else {
                    log::debug!("oracle round {round}: no budget-feasible step");
                    break;
                };
                change = next
                    .iter()
                    .zip(&current)
                    .map(|(n, c)| (n.multiplier - c.multiplier).abs() / n.multiplier.abs().max(1e-12))
                    .fold(0.0, f64::max);
                let step = (&next_p - &p).amax();
                p = next_p;
                kkt = next_kkt;
                current = next;
                if change <= 1e-6 && step <= 1e-8 {
                    converged = true;
                    break;
                }
            }
        }
    }
    let final_locals = locals(&p)?;
    let prices = multipliers(&final_locals);
    // The budget row is always reported at the optimum's own prices.
    let constraints = evaluate_constraints(&p, &region(&prices)?)?;
    let demands: Vec<Vec<f64>> = final_locals.iter().map(|l| l.demands.clone()).collect();
    let supplies: Vec<Vec<f64>> = final_locals.iter().map(|l| l.supplies.clone()).collect();
    Ok(OracleResult {
        social_welfare: social_welfare(system, &demands, &supplies)?,
        p: p.as_slice().to_vec(),
        prices: prices.as_slice().to_vec(),
        demands,
        supplies,
        budget_mode: mode,
        converged,
        consistency_rounds: rounds,
        price_change: change,
        kkt,
        constraints,
    })
}
