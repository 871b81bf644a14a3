//! `pbridge`: build priors, analyze observability, simulate contamination
//! scenarios and reconstruct them from sensor readings.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pbridge_core::bridge::{
    proximal_solve, Domain, EtaInit, InnerMode, ObservationModel, SolverConfig, SolverError,
};
use pbridge_core::io::{
    read_flows, read_network, read_observations, read_prior, read_state_values, write_bundle,
    write_json, write_marginals, write_plan, write_prior, write_trace, NamedReport, Summary,
};
use pbridge_core::observability::{analyze, canonicalize, controlled_prior};
use pbridge_core::prior::{build_prior, FlowSeries, MarkovPrior, NetworkModel};
use pbridge_core::sim::{make_scenario, propagate, Injection, NoiseSpec, SimError};

#[derive(Parser)]
#[command(name = "pbridge", version, about = "Reconstruct contaminant spread from partial sensor readings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the transition prior from a network and its flows.
    BuildPrior(BuildPriorArgs),
    /// Reconstruct the transport plan behind a set of sensor readings.
    Solve(SolveArgs),
    /// Report whether the initial mass is identifiable from the sensors.
    Observability(ObservabilityArgs),
    /// Inject mass, propagate it and write a scenario bundle.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct NetworkInput {
    /// Network description (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Flow table with columns time,pipe_id,flow_lps.
    #[arg(long)]
    flows: PathBuf,
    /// Step length in seconds.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
}

impl NetworkInput {
    fn load(&self) -> Result<(NetworkModel, FlowSeries)> {
        let net = read_network(&self.network)?;
        let flows = read_flows(&self.flows, &net, self.dt)?;
        Ok((net, flows))
    }
}

#[derive(Args)]
struct PriorInput {
    /// Prior archive written by build-prior.
    #[arg(long, conflicts_with_all = ["network", "flows"])]
    prior: Option<PathBuf>,
    /// Network description (JSON); needs --flows.
    #[arg(long, requires = "flows")]
    network: Option<PathBuf>,
    /// Flow table with columns time,pipe_id,flow_lps.
    #[arg(long, requires = "network")]
    flows: Option<PathBuf>,
    /// Step length in seconds.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
}

struct LoadedPrior {
    prior: MarkovPrior,
    state_ids: Vec<String>,
    network_sensors: Option<Vec<String>>,
}

impl PriorInput {
    fn load(&self) -> Result<LoadedPrior> {
        match (&self.prior, &self.network, &self.flows) {
            (Some(dir), _, _) => {
                let (prior, state_ids) = read_prior(dir, None)?;
                Ok(LoadedPrior {
                    prior,
                    state_ids,
                    network_sensors: None,
                })
            }
            (None, Some(network), Some(flows)) => {
                let input = NetworkInput {
                    network: network.clone(),
                    flows: flows.clone(),
                    dt: self.dt,
                };
                let (net, flows) = input.load()?;
                let prior = build_prior(&net, &flows)?;
                Ok(LoadedPrior {
                    prior,
                    state_ids: net.state_ids().to_vec(),
                    network_sensors: Some(net.sensor_ids()),
                })
            }
            _ => bail!("give either --prior or both --network and --flows"),
        }
    }
}

#[derive(Args)]
struct BuildPriorArgs {
    #[command(flatten)]
    input: NetworkInput,
    /// Output directory for prior.csv and states.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EtaStart {
    /// Largest total reading spread evenly over the unobserved states.
    Uniform,
    /// The uniform start with random factors in [0.5, 1.5), drawn from --seed.
    Random,
    /// Values from --eta-file.
    File,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    input: PriorInput,
    /// Readings with columns time,sensor_id,mass_g; sensor ids are state ids.
    #[arg(long)]
    observations: PathBuf,
    /// Solve every proximal step to the residual tolerance.
    #[arg(long, conflicts_with = "inner_sweeps")]
    exact: bool,
    /// Inner sweeps per proximal step.
    #[arg(long, default_value_t = 2)]
    inner_sweeps: usize,
    /// Stop once the unobserved initial mass changes by at most this.
    #[arg(long, default_value_t = 1e-8)]
    outer_tol: f64,
    /// Observation residual tolerance, relative to max(1, largest reading).
    #[arg(long, default_value_t = 1e-9)]
    residual_tol: f64,
    #[arg(long, default_value_t = 200_000)]
    max_outer_iters: usize,
    #[arg(long, value_enum, default_value_t = EtaStart::Uniform)]
    eta_init: EtaStart,
    /// Starting mass per unobserved state (columns state_id,mass_g).
    #[arg(long, required_if_eq("eta_init", "file"))]
    eta_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Remove the initial mass on downstream-unobserved states.
    #[arg(long)]
    canonicalize: bool,
    /// Run the inner sweeps on log-scalings.
    #[arg(long)]
    log_domain: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ObservabilityArgs {
    #[command(flatten)]
    input: PriorInput,
    /// Comma-separated sensor state ids; defaults to the network's sensors.
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<String>>,
    /// Absolute rank tolerance; defaults to 1e-10 times the largest column norm.
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    input: NetworkInput,
    /// Spread the injection over every segment of this pipe.
    #[arg(long, conflicts_with = "inject_states", required_unless_present = "inject_states")]
    inject_pipe: Option<String>,
    /// Comma-separated state ids to inject into.
    #[arg(long, value_delimiter = ',')]
    inject_states: Option<Vec<String>>,
    /// Injected mass in grams.
    #[arg(long)]
    grams: f64,
    /// Comma-separated sensor state ids; defaults to the network's sensors.
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<String>>,
    /// Relative sensor noise level.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildPrior(args) => build_prior_cmd(&args),
        Command::Solve(args) => solve_cmd(&args),
        Command::Observability(args) => observability_cmd(&args),
        Command::Simulate(args) => simulate_cmd(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for infeasible readings, 3 for a solve that did not converge, 4 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    let solver = e.chain().find_map(|c| {
        c.downcast_ref::<SolverError>().or(match c.downcast_ref::<SimError>() {
            Some(SimError::Solver(s)) => Some(s),
            _ => None,
        })
    });
    match solver {
        Some(SolverError::Infeasible { .. } | SolverError::DegenerateUpdate { .. }) => 2,
        Some(SolverError::NotConverged { .. } | SolverError::MaxItersExceeded { .. }) => 3,
        _ => 4,
    }
}

fn sensor_indices(state_ids: &[String], sensors: &[String]) -> Result<Vec<usize>> {
    sensors
        .iter()
        .map(|s| {
            state_ids
                .iter()
                .position(|id| id == s)
                .with_context(|| format!("sensor {s:?} is not a state id"))
        })
        .collect()
}

fn build_prior_cmd(args: &BuildPriorArgs) -> Result<()> {
    let (net, flows) = args.input.load()?;
    let prior = build_prior(&net, &flows)?;
    write_prior(&args.out, &prior, net.state_ids())?;
    info!("wrote {} states over {} steps to {}", prior.n(), prior.horizon(), args.out.display());
    Ok(())
}

fn solve_cmd(args: &SolveArgs) -> Result<()> {
    let loaded = args.input.load()?;
    let (prior, ids) = (&loaded.prior, &loaded.state_ids);
    let (sensors, rho) = read_observations(&args.observations, None, Some(prior.horizon()))?;
    let obs = ObservationModel::new(prior.n(), sensor_indices(ids, &sensors)?)?;
    let eta_init = match args.eta_init {
        EtaStart::Uniform => EtaInit::Uniform,
        EtaStart::Random => EtaInit::Random { seed: args.seed },
        EtaStart::File => {
            let path = args.eta_file.as_deref().context("--eta-init file needs --eta-file")?;
            let unobserved: Vec<String> = obs.unobserved().iter().map(|&i| ids[i].clone()).collect();
            EtaInit::Given(read_state_values(path, &unobserved)?)
        }
    };
    let config = SolverConfig {
        outer_tol: args.outer_tol,
        inner: if args.exact {
            InnerMode::Exact
        } else {
            InnerMode::Sweeps(args.inner_sweeps)
        },
        max_outer_iters: args.max_outer_iters,
        residual_tol: args.residual_tol,
        eta_init,
        domain: if args.log_domain { Domain::Log } else { Domain::Linear },
        ..SolverConfig::default()
    };
    let out = proximal_solve(prior, &obs, &rho, &config)?;
    let report = analyze(prior, &obs, None)?;
    let mut plan = out.plan.clone();
    let mut summary = Summary::new(&out, &plan, &report, ids);
    if args.canonicalize && !report.is_unique {
        let cal_a = controlled_prior(&out.state, prior)?;
        let canon = canonicalize(&out.plan, &report, &cal_a)?;
        if let Some(w) = &canon.warning {
            log::warn!("{w}");
            summary.warning = Some(w.to_string());
        }
        plan = canon.plan;
        summary.canonicalized = true;
        summary.total_initial_mass_g = plan.total_mass();
    }
    write_marginals(&args.out.join("marginals.csv"), &plan.marginals(), ids)?;
    write_plan(&args.out.join("plan.csv"), &plan, ids)?;
    write_trace(&args.out.join("trace.csv"), &out.trace)?;
    write_json(&args.out.join("summary.json"), &summary)?;
    info!(
        "{} iterations, objective {:.3e}, estimated initial mass {:.6} g",
        summary.iterations, summary.objective, summary.total_initial_mass_g
    );
    Ok(())
}

fn observability_cmd(args: &ObservabilityArgs) -> Result<()> {
    let loaded = args.input.load()?;
    let sensors = match (&args.sensors, &loaded.network_sensors) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => bail!("--sensors is required with --prior"),
    };
    let obs = ObservationModel::new(loaded.prior.n(), sensor_indices(&loaded.state_ids, &sensors)?)?;
    let report = analyze(&loaded.prior, &obs, args.rank_tol)?;
    let named = NamedReport {
        report: &report,
        state_ids: &loaded.state_ids,
    };
    match &args.out {
        Some(path) => write_json(path, &named)?,
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &named)?;
            if let Err(e) = writeln!(out) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let (mut net, flows) = args.input.load()?;
    if let Some(sensors) = &args.sensors {
        net = net.with_sensors(sensors)?;
    }
    let injection = match (&args.inject_pipe, &args.inject_states) {
        (Some(pipe), _) => Injection::pipe(&net, pipe, args.grams)?,
        (None, Some(states)) => Injection {
            states: states.clone(),
            grams: args.grams,
        },
        (None, None) => bail!("give --inject-pipe or --inject-states"),
    };
    let noise = (args.noise > 0.0).then_some(NoiseSpec {
        sigma: args.noise,
        seed: args.seed,
    });
    let (scenario, rho) = make_scenario(&net, &flows, &injection, noise)?;
    let (marginals, _) = propagate(&scenario);
    write_bundle(&args.out, &net, &flows, &injection, &marginals, &rho, noise)?;
    info!("bundle written to {}", args.out.display());
    Ok(())
}
