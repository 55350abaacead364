use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bilevel_market_core::dla::run_dla;
use bilevel_market_core::oracle::{solve_centralized, BudgetMode};
use bilevel_market_core::scenario::{
    bundled_network, bundled_population_spec, gen_agents, load_agents, load_network, read_json, run_scenario,
    PopulationSpec, Scenario, System,
};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bilevel-market", version, about = "Bilevel DSO/aggregator energy auction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Network JSON; the bundled IEEE-37 feeder when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Agents JSON; generated from the bundled population spec when omitted.
    #[arg(long)]
    agents: Option<PathBuf>,
    /// Scenario file or preset name (`scenario-1` .. `scenario-4`).
    #[arg(long, default_value = "scenario-1")]
    scenario: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Inputs {
    fn load(&self) -> Result<(System, Scenario)> {
        let mut scenario = Scenario::resolve(&self.scenario)?;
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        scenario.validate()?;
        let network = match &self.network {
            Some(path) => load_network(path)?,
            None => bundled_network(),
        };
        let agents = match &self.agents {
            Some(path) => load_agents(path)?,
            None => gen_agents(&bundled_population_spec(), scenario.seed)?,
        };
        Ok((System::new(network, agents)?, scenario))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check that the inputs load and are consistent.
    Validate(Inputs),
    /// Generate an agents file from a population spec.
    Gen {
        /// Population spec JSON; the bundled spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = bilevel_market_core::scenario::DEFAULT_SEED)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the auction and write its artifacts.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-aggregator auction trace.
        #[arg(long)]
        trace: bool,
    },
    /// Solve the centralized benchmark and print it as JSON.
    Oracle {
        #[command(flatten)]
        inputs: Inputs,
        /// Leave the budget constraint out of the benchmark.
        #[arg(long)]
        omit_budget: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the auction and the benchmark and report the welfare gap.
    Compare {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        omit_budget: bool,
    },
}

fn budget_mode(omit: bool) -> BudgetMode {
    if omit {
        BudgetMode::Omitted
    } else {
        BudgetMode::SelfConsistent
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(inputs) => {
            let (system, scenario) = inputs.load()?;
            let (buyers, sellers) = system.agent_counts();
            println!(
                "ok: {} aggregators, {buyers} buyers, {sellers} sellers, scenario {}",
                system.aggregator_count(),
                scenario.name
            );
        }
        Command::Gen { spec, seed, out } => {
            let spec: PopulationSpec = match spec {
                Some(path) => read_json(&path)?,
                None => bundled_population_spec(),
            };
            let agents = gen_agents(&spec, seed)?;
            emit(&serde_json::to_string_pretty(&agents)?, out.as_deref())?;
        }
        Command::Run { inputs, out, trace } => {
            let (system, scenario) = inputs.load()?;
            let result = run_scenario(&system, &scenario, &out, trace)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "termination": result.termination,
                    "iterations": result.iterations,
                    "total_injection": result.total_injection,
                    "wholesale_price": result.wholesale_price,
                    "profit": result.profit,
                    "social_welfare": result.social_welfare,
                    "feasible": result.constraints.feasible,
                }))?
            );
        }
        Command::Oracle {
            inputs,
            omit_budget,
            out,
        } => {
            let (system, scenario) = inputs.load()?;
            let result = solve_centralized(&system, &scenario, budget_mode(omit_budget))?;
            emit(&serde_json::to_string_pretty(&result)?, out.as_deref())?;
        }
        Command::Compare { inputs, omit_budget } => {
            let (system, scenario) = inputs.load()?;
            let auction = run_dla(&system, &scenario, false)?;
            let oracle = solve_centralized(&system, &scenario, budget_mode(omit_budget))?;
            let gap = (oracle.social_welfare - auction.social_welfare) / oracle.social_welfare.abs().max(1e-12);
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "termination": auction.termination,
                    "iterations": auction.iterations,
                    "auction_welfare": auction.social_welfare,
                    "oracle_welfare": oracle.social_welfare,
                    "oracle_converged": oracle.converged,
                    "relative_gap": gap,
                    "auction_p": auction.p,
                    "oracle_p": oracle.p,
                }))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BILEVEL_MARKET_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
