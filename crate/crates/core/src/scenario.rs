//! Scenario configuration, data files, seeded populations and the scenario
//! runner that writes result artifacts.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{Buyer, Seller};
use crate::ala::{AggregatorMarket, AlaOptions, VirtualBid};
use crate::dla::{run_dla, AuctionResult};
use crate::error::{Error, Result};
use crate::feasible::PriceModel;
use crate::grid::{build_topology, RadialNetwork, TopologyMatrices};

const IEEE37: &str = include_str!("../data/ieee37.json");
const POPULATION: &str = include_str!("../data/population.json");

/// Seed of the bundled agents file.
pub const DEFAULT_SEED: u64 = 37;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// `ε_bal`: aggregator energy balance, pu.
    pub balance: f64,
    /// `ε_p`: DSO allotment change, pu.
    pub allotment: f64,
    /// `ε_c`: relative aggregator price change.
    pub price: f64,
    /// `ε_feas`.
    pub feasibility: f64,
    /// Budget residual at the aggregators' own final prices, ¢.
    pub budget: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            balance: 1e-6,
            allotment: 1e-5,
            price: 1e-6,
            feasibility: 1e-8,
            budget: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    /// Wholesale base price `c0b`, ¢/pu.
    pub c0b: f64,
    /// Wholesale price elasticity `β0`, ¢/pu².
    pub beta0: f64,
    /// Overrides the network's transformer limit when set.
    pub s0_limit_pu: Option<f64>,
    /// Overrides the network's root voltage when set.
    pub v0_pu: Option<f64>,
    /// Allowed voltage deviation `δ`, pu.
    pub delta: f64,
    /// DSO gradient step `ε`, pu²/¢.
    pub step_size: f64,
    /// Sufficient-increase factor for step backtracking; `None` keeps `ε` fixed.
    pub armijo: Option<f64>,
    pub virtual_bid: VirtualBid,
    pub tolerances: Tolerances,
    pub max_dla_iterations: usize,
    pub max_ala_iterations: usize,
    pub seed: u64,
    pub base_kva: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            c0b: 200.0,
            beta0: 0.0,
            s0_limit_pu: None,
            v0_pu: None,
            delta: 0.05,
            step_size: 2e-3,
            armijo: None,
            virtual_bid: VirtualBid::Limit,
            tolerances: Tolerances::default(),
            max_dla_iterations: 500,
            max_ala_iterations: 100,
            seed: DEFAULT_SEED,
            base_kva: 100.0,
        }
    }
}

pub const PRESETS: [&str; 4] = ["scenario-1", "scenario-2", "scenario-3", "scenario-4"];

impl Scenario {
    pub fn preset(name: &str) -> Result<Self> {
        let (c0b, beta0, s0) = match name {
            "scenario-1" => (800.0, 40.0, 25.0),
            "scenario-2" => (200.0, 30.0, 25.0),
            "scenario-3" => (200.0, 10.0, 25.0),
            "scenario-4" => (200.0, 0.0, 40.0),
            other => return Err(Error::UnknownPreset(other.into())),
        };
        Ok(Self {
            name: name.into(),
            c0b,
            beta0,
            s0_limit_pu: Some(s0),
            ..Self::default()
        })
    }

    /// A preset name or a path to a scenario JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        if Path::new(spec).exists() {
            let scenario: Self = read_json(Path::new(spec))?;
            scenario.validate()?;
            return Ok(scenario);
        }
        Err(Error::UnknownPreset(spec.into()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tolerances;
        let positive = [
            ("balance tolerance", t.balance),
            ("allotment tolerance", t.allotment),
            ("price tolerance", t.price),
            ("feasibility tolerance", t.feasibility),
            ("budget tolerance", t.budget),
            ("step size", self.step_size),
            ("base kVA", self.base_kva),
        ];
        for (what, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{what} must be positive, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Validation(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !(self.c0b >= 0.0 && self.beta0 >= 0.0) {
            return Err(Error::Validation("c0b and beta0 must be non-negative".into()));
        }
        if let Some(sigma) = self.armijo {
            if !(sigma > 0.0 && sigma < 1.0) {
                return Err(Error::Validation(format!("armijo factor {sigma} outside (0, 1)")));
            }
        }
        if self.max_dla_iterations == 0 || self.max_ala_iterations == 0 {
            return Err(Error::Validation("iteration caps must be positive".into()));
        }
        Ok(())
    }

    pub fn price_model(&self) -> PriceModel {
        PriceModel {
            base_price: self.c0b,
            elasticity: self.beta0,
        }
    }

    pub fn ala_options(&self) -> AlaOptions {
        AlaOptions {
            max_iterations: self.max_ala_iterations,
            balance_tol: self.tolerances.balance,
            virtual_bid: self.virtual_bid,
            ..AlaOptions::default()
        }
    }

    /// The network with this scenario's transformer limit and root voltage.
    pub fn apply(&self, network: &RadialNetwork) -> RadialNetwork {
        let mut net = network.clone();
        if let Some(s0) = self.s0_limit_pu {
            net.s0_limit_pu = s0;
        }
        if let Some(v0) = self.v0_pu {
            net.v0_pu = v0;
        }
        net
    }
}

/// Per-aggregator populations as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub aggregators: Vec<AggregatorMarket>,
}

/// A validated network with one market per aggregator, in the network's
/// aggregator order.
#[derive(Debug, Clone)]
pub struct System {
    pub network: RadialNetwork,
    pub topology: TopologyMatrices,
    pub markets: Vec<AggregatorMarket>,
}

impl System {
    pub fn new(network: RadialNetwork, agents: AgentsFile) -> Result<Self> {
        network.validate()?;
        let topology = build_topology(&network)?;
        let mut by_node: HashMap<usize, AggregatorMarket> = HashMap::new();
        for market in agents.aggregators {
            if !network.aggregator_nodes.contains(&market.node) {
                return Err(Error::Validation(format!(
                    "agents reference node {} which is not an aggregator node",
                    market.node
                )));
            }
            if !(market.theta >= 0.0 && market.theta.is_finite()) {
                return Err(Error::Validation(format!(
                    "aggregator at node {} has invalid theta {}",
                    market.node, market.theta
                )));
            }
            for b in &market.buyers {
                b.utility().validate()?;
            }
            for s in &market.sellers {
                s.utility().validate()?;
                if !(s.capacity() >= 0.0) {
                    return Err(Error::Validation(format!(
                        "seller at node {} has negative capacity",
                        market.node
                    )));
                }
            }
            let node = market.node;
            if by_node.insert(node, market).is_some() {
                return Err(Error::Validation(format!("node {node} has two agent entries")));
            }
        }
        let markets = network
            .aggregator_nodes
            .iter()
            .map(|n| {
                by_node
                    .remove(n)
                    .ok_or_else(|| Error::Validation(format!("aggregator node {n} has no agents entry")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            network,
            topology,
            markets,
        })
    }

    pub fn aggregator_count(&self) -> usize {
        self.markets.len()
    }

    pub fn agent_counts(&self) -> (usize, usize) {
        self.markets
            .iter()
            .fold((0, 0), |(b, s), m| (b + m.buyers.len(), s + m.sellers.len()))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_network(path: &Path) -> Result<RadialNetwork> {
    let network: RadialNetwork = read_json(path)?;
    network.validate()?;
    Ok(network)
}

pub fn load_agents(path: &Path) -> Result<AgentsFile> {
    read_json(path)
}

pub fn load_system(network_path: &Path, agents_path: &Path) -> Result<System> {
    System::new(load_network(network_path)?, load_agents(agents_path)?)
}

/// The modified IEEE 37-node feeder shipped with the crate.
pub fn bundled_network() -> RadialNetwork {
    serde_json::from_str(IEEE37).expect("bundled network parses")
}

/// Population sizes per aggregator of the bundled feeder.
pub fn bundled_population_spec() -> PopulationSpec {
    serde_json::from_str(POPULATION).expect("bundled population spec parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.high > self.low {
            rng.random_range(self.low..self.high)
        } else {
            self.low
        }
    }
}

/// Uniform sampling ranges of the generated utility parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterRanges {
    pub buyer_x: Range,
    pub buyer_y: Range,
    pub seller_x: Range,
    pub seller_y: Range,
    pub capacity: Range,
    pub theta: Range,
}

impl Default for ParameterRanges {
    fn default() -> Self {
        Self {
            buyer_x: Range { low: 80.0, high: 160.0 },
            buyer_y: Range { low: 5.0, high: 15.0 },
            seller_x: Range { low: 60.0, high: 160.0 },
            seller_y: Range { low: 5.0, high: 15.0 },
            capacity: Range { low: 0.1, high: 0.5 },
            theta: Range { low: 0.3, high: 0.5 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub node: usize,
    pub buyers: usize,
    pub sellers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub aggregators: Vec<AggregatorSpec>,
    #[serde(default)]
    pub ranges: ParameterRanges,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let r = &self.ranges;
        for (what, range) in [
            ("buyer_x", r.buyer_x),
            ("buyer_y", r.buyer_y),
            ("seller_x", r.seller_x),
            ("seller_y", r.seller_y),
        ] {
            if !(range.low > 0.0 && range.high >= range.low) {
                return Err(Error::Validation(format!("range {what} must be positive and ordered")));
            }
        }
        if !(r.capacity.low >= 0.0 && r.capacity.high >= r.capacity.low) {
            return Err(Error::Validation("capacity range must be non-negative and ordered".into()));
        }
        if !(r.theta.low >= 0.0 && r.theta.high >= r.theta.low) {
            return Err(Error::Validation("theta range must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

/// Draws every aggregator's population in spec order from one seeded stream.
pub fn gen_agents(spec: &PopulationSpec, seed: u64) -> Result<AgentsFile> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.ranges;
    let mut aggregators = Vec::with_capacity(spec.aggregators.len());
    for agg in &spec.aggregators {
        let theta = r.theta.sample(&mut rng);
        let buyers = (0..agg.buyers)
            .map(|_| {
                let x = r.buyer_x.sample(&mut rng);
                let y = r.buyer_y.sample(&mut rng);
                Buyer::log(x, y)
            })
            .collect::<Result<Vec<_>>>()?;
        let sellers = (0..agg.sellers)
            .map(|_| {
                let x = r.seller_x.sample(&mut rng);
                let y = r.seller_y.sample(&mut rng);
                let g = r.capacity.sample(&mut rng);
                Seller::log(x, y, g)
            })
            .collect::<Result<Vec<_>>>()?;
        aggregators.push(AggregatorMarket {
            node: agg.node,
            theta,
            buyers,
            sellers,
        });
    }
    Ok(AgentsFile {
        seed: Some(seed),
        aggregators,
    })
}

/// The bundled feeder populated from the bundled spec with `seed`.
pub fn bundled_system(seed: u64) -> Result<System> {
    System::new(bundled_network(), gen_agents(&bundled_population_spec(), seed)?)
}

/// SHA-256 over the network, agents and scenario exactly as they enter a run.
pub fn config_hash(system: &System, scenario: &Scenario) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&system.network)?);
    hasher.update(serde_json::to_vec(&system.markets)?);
    hasher.update(serde_json::to_vec(scenario)?);
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub base_kva: f64,
    pub scenario: String,
    pub aggregators: usize,
    pub buyers: usize,
    pub sellers: usize,
    pub crate_version: String,
}

/// Runs the auction and writes `result.json`, `manifest.json`,
/// `convergence.csv` and, when tracing, `ala_trace.csv` into `out_dir`.
pub fn run_scenario(system: &System, scenario: &Scenario, out_dir: &Path, trace: bool) -> Result<AuctionResult> {
    scenario.validate()?;
    let result = run_dla(system, scenario, trace)?;
    fs::create_dir_all(out_dir)?;
    let (buyers, sellers) = system.agent_counts();
    let manifest = Manifest {
        config_hash: config_hash(system, scenario)?,
        seed: scenario.seed,
        base_kva: scenario.base_kva,
        scenario: scenario.name.clone(),
        aggregators: system.aggregator_count(),
        buyers,
        sellers,
        crate_version: env!("CARGO_PKG_VERSION").into(),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out_dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    write_convergence_csv(&result, &system.network.aggregator_nodes, &out_dir.join("convergence.csv"))?;
    if trace {
        write_trace_csv(&result, &out_dir.join("ala_trace.csv"))?;
    }
    Ok(result)
}

pub fn write_convergence_csv(result: &AuctionResult, nodes: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string(), "sw".into(), "sum_p".into(), "c0".into()];
    header.extend(nodes.iter().map(|n| format!("p_{n}")));
    header.extend(nodes.iter().map(|n| format!("c_{n}")));
    w.write_record(&header)?;
    for it in &result.history {
        let mut row = vec![
            it.iteration.to_string(),
            it.social_welfare.to_string(),
            it.total_injection.to_string(),
            it.wholesale_price.to_string(),
        ];
        row.extend(it.p.iter().map(f64::to_string));
        row.extend(it.prices.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(result: &AuctionResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dla_iteration", "node", "round", "price", "total_bid", "total_supply", "balance_residual"])?;
    for rec in &result.ala_trace {
        let r = &rec.row;
        w.write_record([
            rec.dla_iteration.to_string(),
            rec.node.to_string(),
            r.round.to_string(),
            r.price.to_string(),
            r.total_bid.to_string(),
            r.total_supply.to_string(),
            r.balance_residual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
