//! Aggregator-level auction: proportional allocation with a virtual bidder,
//! iterated on the posted price until supply and demand balance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Buyer, BuyingAgent, Seller, SellingAgent};
use crate::error::{Error, Result};

/// Size of the virtual bidder's standing offer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VirtualBid {
    /// Infinitely large bidder: the posted price is the clearing price.
    #[default]
    Limit,
    Finite(f64),
}

/// `c0 = Σb / (p_k + Σs)`.
pub fn clearing_price(bids: &[f64], supplies: &[f64], allotment: f64) -> Result<f64> {
    let volume = allotment + supplies.iter().sum::<f64>();
    if !(volume > 0.0) {
        return Err(Error::StalledMarket(volume));
    }
    Ok(bids.iter().sum::<f64>() / volume)
}

/// Price after the virtual bidder buys `s0` at `c0`; equal to `c0` in the limit.
pub fn virtual_price(
    clearing: f64,
    bids: &[f64],
    supplies: &[f64],
    allotment: f64,
    s0: VirtualBid,
) -> Result<f64> {
    match s0 {
        VirtualBid::Limit => Ok(clearing),
        VirtualBid::Finite(size) => {
            if !(size > 0.0) {
                return Err(Error::Validation(format!("virtual bid size {size} must be positive")));
            }
            let volume = allotment + size + supplies.iter().sum::<f64>();
            if !(volume > 0.0) {
                return Err(Error::StalledMarket(volume));
            }
            Ok((clearing * size + bids.iter().sum::<f64>()) / volume)
        }
    }
}

/// `d_i = b_i / c`.
pub fn proportional_allocate(bids: &[f64], price: f64) -> Result<Vec<f64>> {
    if !(price > 0.0) {
        return Err(Error::PriceDomain(price));
    }
    Ok(bids.iter().map(|b| b / price).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlaOptions {
    /// Weight of the new price in `c ← (1 - α) c + α c_new`.
    pub damping: f64,
    pub max_iterations: usize,
    pub price_floor: f64,
    /// Consecutive rounds at the floor before the market is declared stalled.
    pub floor_patience: usize,
    pub price_tol: f64,
    /// `ε_bal`, pu.
    pub balance_tol: f64,
    /// Money balance target relative to `max(1, Σb)`.
    pub money_tol: f64,
    pub virtual_bid: VirtualBid,
}

impl Default for AlaOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iterations: 100,
            price_floor: 1e-9,
            floor_patience: 10,
            price_tol: 1e-8,
            balance_tol: 1e-6,
            money_tol: 1e-9,
            virtual_bid: VirtualBid::Limit,
        }
    }
}

/// One aggregator's buyers and sellers. The auction only calls
/// [`BuyingAgent::bid`] and [`SellingAgent::offer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorMarket<B = Buyer, S = Seller> {
    pub node: usize,
    /// Reactive to real power ratio reported to the DSO.
    pub theta: f64,
    pub buyers: Vec<B>,
    pub sellers: Vec<S>,
}

impl<B: BuyingAgent, S: SellingAgent> AggregatorMarket<B, S> {
    pub fn responses(&self, price: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let bids = self.buyers.iter().map(|b| b.bid(price)).collect::<Result<Vec<_>>>()?;
        let supplies = self.sellers.iter().map(|s| s.offer(price)).collect::<Result<Vec<_>>>()?;
        Ok((bids, supplies))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlaTraceRow {
    pub round: usize,
    pub price: f64,
    pub total_bid: f64,
    pub total_supply: f64,
    /// `Σd - Σs - p_k`.
    pub balance_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlaOutcome {
    pub price: f64,
    pub bids: Vec<f64>,
    pub demands: Vec<f64>,
    pub supplies: Vec<f64>,
    /// `a_k`: false when no balanced positive price was found.
    pub balanced: bool,
    pub theta: f64,
    pub allotment: f64,
    pub iterations: usize,
    /// `Σd - Σs - p_k`.
    pub energy_residual: f64,
    /// `Σb - c p_k - c Σs`.
    pub money_residual: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<AlaTraceRow>,
}

fn outcome(
    price: f64,
    bids: Vec<f64>,
    supplies: Vec<f64>,
    allotment: f64,
    theta: f64,
    balanced: bool,
    iterations: usize,
    trace: Vec<AlaTraceRow>,
) -> AlaOutcome {
    let demands: Vec<f64> = bids.iter().map(|b| b / price).collect();
    let total_bid: f64 = bids.iter().sum();
    let total_supply: f64 = supplies.iter().sum();
    let total_demand: f64 = demands.iter().sum();
    AlaOutcome {
        energy_residual: total_demand - total_supply - allotment,
        money_residual: total_bid - price * allotment - price * total_supply,
        price,
        bids,
        demands,
        supplies,
        balanced,
        theta,
        allotment,
        iterations,
        trace,
    }
}

/// Runs the price iteration for allotment `p_k` starting at `initial_price`.
///
/// The excess demand `Σb/c - Σs - p_k` is nonincreasing in `c`, so every
/// evaluated price tightens a bracket around the equilibrium. Damped updates
/// that leave the bracket are replaced by its geometric midpoint, and the
/// damping is halved whenever the excess demand changes sign.
pub fn run_ala<B: BuyingAgent, S: SellingAgent>(
    market: &AggregatorMarket<B, S>,
    allotment: f64,
    initial_price: f64,
    options: &AlaOptions,
    trace: bool,
) -> Result<AlaOutcome> {
    let floor = options.price_floor;
    let mut price = if initial_price.is_finite() {
        initial_price.max(floor)
    } else {
        floor
    };
    let mut below = 0.0_f64;
    let mut above = f64::INFINITY;
    let mut alpha = options.damping;
    let mut last_sign = 0.0;
    let mut floor_hits = 0;
    let mut rows = Vec::new();
    let mut last = None;
    for round in 1..=options.max_iterations {
        let (bids, supplies) = market.responses(price)?;
        let total_bid: f64 = bids.iter().sum();
        let total_supply: f64 = supplies.iter().sum();
        let excess = total_bid / price - total_supply - allotment;
        if trace {
            rows.push(AlaTraceRow {
                round,
                price,
                total_bid,
                total_supply,
                balance_residual: excess,
            });
        }
        // |Δc| / c of the undamped update equals |excess| / (p_k + Σs).
        let volume = allotment + total_supply;
        let tol = options
            .balance_tol
            .min(options.money_tol * total_bid.max(1.0) / price)
            .min((options.price_tol * volume.abs()).max(1e-12));
        // A bracket collapsed to rounding level cannot be refined further;
        // accept it when both balance conditions hold.
        let collapsed = above.is_finite() && below > 0.0 && above - below <= 8.0 * f64::EPSILON * above;
        let balance_ok = excess.abs() <= options.balance_tol.min(options.money_tol * total_bid.max(1.0) / price);
        if excess.abs() <= tol || (collapsed && balance_ok) {
            return Ok(outcome(price, bids, supplies, allotment, market.theta, true, round, rows));
        }
        if excess > 0.0 {
            below = below.max(price);
        } else {
            above = above.min(price);
        }
        let sign = excess.signum();
        if sign * last_sign < 0.0 {
            alpha *= 0.5;
        }
        last_sign = sign;

        let mut next = match clearing_price(&bids, &supplies, allotment)
            .and_then(|c0| virtual_price(c0, &bids, &supplies, allotment, options.virtual_bid))
        {
            Ok(target) => (1.0 - alpha) * price + alpha * target,
            Err(_) => f64::NAN,
        };
        if !(next > below && next < above) {
            next = match (below > 0.0, above.is_finite()) {
                (true, true) => (below * above).sqrt(),
                (false, true) => 0.5 * above,
                _ => 2.0 * below.max(price),
            };
        }
        if next <= floor {
            next = floor;
            floor_hits += 1;
            if floor_hits >= options.floor_patience {
                last = Some((bids, supplies, round));
                break;
            }
        } else {
            floor_hits = 0;
        }
        last = Some((bids, supplies, round));
        price = next;
    }
    let (bids, supplies, iterations) = match last {
        Some((b, s, i)) if i < options.max_iterations => (b, s, i),
        _ => {
            let (b, s) = market.responses(price)?;
            (b, s, options.max_iterations)
        }
    };
    log::debug!("aggregator at node {} failed to balance p_k = {allotment}", market.node);
    Ok(outcome(price, bids, supplies, allotment, market.theta, false, iterations, rows))
}

/// Runs every aggregator concurrently; results are in input order and equal
/// to a sequential run.
pub fn run_all<B, S>(
    markets: &[AggregatorMarket<B, S>],
    allotments: &[f64],
    initial_prices: &[f64],
    options: &AlaOptions,
    trace: bool,
) -> Result<Vec<AlaOutcome>>
where
    B: BuyingAgent + Sync,
    S: SellingAgent + Sync,
{
    crate::error::check_len("run_all allotments", markets.len(), allotments.len())?;
    crate::error::check_len("run_all prices", markets.len(), initial_prices.len())?;
    markets
        .par_iter()
        .zip(allotments.par_iter())
        .zip(initial_prices.par_iter())
        .map(|((m, p), c)| run_ala(m, *p, *c, options, trace))
        .collect()
}
