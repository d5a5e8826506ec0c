use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use v2gsim::allocation;
use v2gsim::endurance;
use v2gsim::fleet::{self, FleetParams};
use v2gsim::grid::{self, NetworkCase};
use v2gsim::opf::{self, DispatchStatus, SolverOptions};
use v2gsim::participation;
use v2gsim::pf;
use v2gsim::runner::{self, ReportFormat, RunConfig};

#[derive(Parser)]
#[command(name = "v2gsim", version, about = "V2G grid-emergency simulation toolkit")]
struct Cli {
    /// Run configuration (JSON); required by `run`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format: json or csv.
    #[arg(long, global = true, default_value = "json")]
    format: String,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve AC power flow on a case with pro-rata generator dispatch.
    Powerflow(PowerflowArgs),
    /// Solve the dispatch + load-shed OPF, optionally under an outage.
    Opf(OpfArgs),
    /// Fit the willingness regression and score per-zip participation.
    Participation(ParticipationArgs),
    /// Project EV counts per zip to future years.
    Project(ProjectArgs),
    /// Aggregate participating vehicles onto grid buses.
    Allocate(AllocateArgs),
    /// Fleet discharge-endurance curve.
    Endurance(EnduranceArgs),
    /// Full scenario x fleet-level sweep from a run config.
    Run,
}

#[derive(Args)]
struct PowerflowArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
    #[arg(long, default_value_t = 30)]
    max_iterations: usize,
}

#[derive(Args)]
struct OpfArgs {
    #[arg(long)]
    case: PathBuf,
    /// Outage scenario file; applied when --scenario names one of them.
    #[arg(long, requires = "scenario")]
    scenarios: Option<PathBuf>,
    #[arg(long, requires = "scenarios")]
    scenario: Option<String>,
}

#[derive(Args)]
struct ParticipationArgs {
    #[arg(long)]
    survey: PathBuf,
    #[arg(long)]
    population: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    holdout_fraction: f64,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    registrations: PathBuf,
    #[arg(long)]
    fleet_params: PathBuf,
    #[arg(long)]
    base_year: i32,
    /// Comma-separated target years, e.g. 2025,2030,2035,2040.
    #[arg(long, value_delimiter = ',')]
    years: Vec<i32>,
}

#[derive(Args)]
struct AllocateArgs {
    /// CSV of participating vehicles per zip: zip,count.
    #[arg(long)]
    participants: PathBuf,
    #[arg(long)]
    case: PathBuf,
    /// Zip centroid CSV for nearest-substation mapping.
    #[arg(long, conflicts_with = "map")]
    centroids: Option<PathBuf>,
    /// Explicit zip,bus_id CSV; overrides the heuristic.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 7.0)]
    power_per_vehicle_kw: f64,
}

#[derive(Args)]
struct EnduranceArgs {
    /// Registrations CSV: zip,make,model,count,usable_kwh,is_phev.
    #[arg(long)]
    registrations: PathBuf,
    #[arg(long, default_value_t = 7.0)]
    power_per_vehicle_kw: f64,
    #[arg(long, default_value_t = 24.0)]
    horizon_h: f64,
    #[arg(long, default_value_t = 0.25)]
    step_h: f64,
    #[arg(long, default_value_t = 1.0)]
    initial_soc: f64,
}

enum CliError {
    /// Bad arguments, unreadable or invalid inputs -> exit 1.
    Config(String),
    /// A solver gave up on otherwise valid inputs -> exit 2.
    Solver(String),
}

impl CliError {
    fn config(err: impl std::fmt::Display) -> CliError {
        CliError::Config(err.to_string())
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_case(path: &Path) -> Result<NetworkCase, CliError> {
    grid::parse_case(&read_to_string(path)?).map_err(CliError::config)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serialization cannot fail");
    text.push('\n');
    text
}

fn require_json(format: &str) -> Result<(), CliError> {
    if format != "json" {
        return Err(CliError::Config(format!(
            "unsupported format for this subcommand: {format}"
        )));
    }
    Ok(())
}

fn cmd_powerflow(args: &PowerflowArgs, format: &str) -> Result<String, CliError> {
    require_json(format)?;
    let case = load_case(&args.case)?;
    let total_load = case.total_load_p();
    let total_pmax: f64 = case
        .generators
        .iter()
        .filter(|g| g.in_service)
        .map(|g| g.pmax)
        .sum();
    if total_pmax <= 0.0 {
        return Err(CliError::Config(
            "case has no in-service generation capacity".to_string(),
        ));
    }
    // pro-rata dispatch by pmax; the slack bus absorbs losses
    let share = (total_load / total_pmax).min(1.0);
    let idx = case.bus_index();
    let mut p = vec![0.0; case.buses.len()];
    let mut q = vec![0.0; case.buses.len()];
    for g in case.generators.iter().filter(|g| g.in_service) {
        p[idx[&g.bus]] += g.pmax * share;
    }
    for l in &case.loads {
        p[idx[&l.bus]] -= l.p;
        q[idx[&l.bus]] -= l.q;
    }
    let solution = pf::solve_powerflow(&case, &p, &q, args.tolerance, args.max_iterations)
        .map_err(CliError::config)?;
    if !solution.converged {
        let detail = solution
            .diagnostic
            .clone()
            .unwrap_or_else(|| format!("max mismatch {:.3e}", solution.max_mismatch));
        return Err(CliError::Solver(format!(
            "power flow did not converge in {} iterations: {detail}",
            solution.iterations
        )));
    }
    Ok(to_json(&solution))
}

fn cmd_opf(args: &OpfArgs, format: &str) -> Result<String, CliError> {
    require_json(format)?;
    let mut case = load_case(&args.case)?;
    if let (Some(path), Some(name)) = (&args.scenarios, &args.scenario) {
        let scenarios = grid::parse_scenarios(&read_to_string(path)?).map_err(CliError::config)?;
        let scenario = scenarios
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| CliError::Config(format!("no scenario named {name}")))?;
        case = case.apply_outage(scenario).map_err(CliError::config)?.case;
    }
    let result =
        opf::solve_opf_with_shed(&case, &SolverOptions::default()).map_err(CliError::config)?;
    if result.status == DispatchStatus::Failed {
        return Err(CliError::Solver(
            result
                .diagnostic
                .unwrap_or_else(|| "dispatch failed".to_string()),
        ));
    }
    Ok(to_json(&result))
}

fn cmd_participation(
    args: &ParticipationArgs,
    seed: u64,
    format: &str,
) -> Result<String, CliError> {
    require_json(format)?;
    let survey =
        participation::load_survey_csv(&read_bytes(&args.survey)?[..]).map_err(CliError::config)?;
    let population = participation::load_population_csv(&read_bytes(&args.population)?[..])
        .map_err(CliError::config)?;
    let model =
        participation::fit(&survey, args.holdout_fraction, seed).map_err(CliError::config)?;
    let rates = participation::zip_rates(&model, &population).map_err(CliError::config)?;
    Ok(to_json(&serde_json::json!({
        "model": model,
        "zip_rates": rates,
    })))
}

fn cmd_project(args: &ProjectArgs, format: &str) -> Result<String, CliError> {
    require_json(format)?;
    let registrations = fleet::load_registration_counts(&read_bytes(&args.registrations)?[..])
        .map_err(CliError::config)?;
    let params = FleetParams::parse(&read_to_string(&args.fleet_params)?).map_err(CliError::config)?;
    let mut years = args.years.clone();
    years.sort_unstable();
    years.dedup();
    let projection = fleet::project(&registrations, &params, args.base_year, &years)
        .map_err(CliError::config)?;
    let by_year: BTreeMap<i32, BTreeMap<String, u64>> = years
        .iter()
        .map(|&y| (y, projection.rounded(y)))
        .collect();
    Ok(to_json(&by_year))
}

fn cmd_allocate(args: &AllocateArgs, format: &str) -> Result<String, CliError> {
    require_json(format)?;
    let text = read_to_string(&args.participants)?;
    let mut participants = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    for row in rdr.deserialize() {
        let (zip, count): (String, u64) = row.map_err(CliError::config)?;
        participants.insert(zip, count);
    }
    let map = match (&args.map, &args.centroids) {
        (Some(path), _) => {
            allocation::load_map_csv(&read_bytes(path)?[..]).map_err(CliError::config)?
        }
        (None, Some(path)) => {
            let centroids =
                allocation::load_centroids_csv(&read_bytes(path)?[..]).map_err(CliError::config)?;
            let case = load_case(&args.case)?;
            allocation::nearest_substation_map(&centroids, &case).map_err(CliError::config)?
        }
        (None, None) => {
            return Err(CliError::Config(
                "one of --centroids or --map is required".to_string(),
            ))
        }
    };
    let alloc = allocation::allocate(&participants, &map, args.power_per_vehicle_kw)
        .map_err(CliError::config)?;
    Ok(to_json(&alloc))
}

fn cmd_endurance(args: &EnduranceArgs, format: &str) -> Result<String, CliError> {
    let mut fleet = endurance::load_composition_csv(&read_bytes(&args.registrations)?[..])
        .map_err(CliError::config)?;
    fleet.initial_soc = args.initial_soc;
    let curve = endurance::curve(
        &fleet,
        args.power_per_vehicle_kw,
        args.horizon_h,
        args.step_h,
    )
    .map_err(CliError::config)?;
    match format {
        "csv" => Ok(curve.to_csv()),
        "json" => Ok(to_json(&curve)),
        other => Err(CliError::Config(format!("unsupported format: {other}"))),
    }
}

fn cmd_run(cli: &Cli) -> Result<String, CliError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("run requires --config".to_string()))?;
    let text = read_to_string(config_path)?;
    let mut config = RunConfig::parse(&text).map_err(CliError::config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let base_dir = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let report = runner::run(&config, &base_dir).map_err(CliError::config)?;
    if cli.verbose {
        for row in &report.rows {
            eprintln!(
                "{} / {}: {} ({} MW V2G)",
                row.scenario, row.fleet_level, row.status, row.v2g_mw
            );
        }
    }
    let format: ReportFormat = cli.format.parse().map_err(CliError::Config)?;
    Ok(runner::emit(&report, format))
}

fn dispatch(cli: &Cli) -> Result<String, CliError> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Powerflow(args) => cmd_powerflow(args, &cli.format),
        Command::Opf(args) => cmd_opf(args, &cli.format),
        Command::Participation(args) => cmd_participation(args, seed, &cli.format),
        Command::Project(args) => cmd_project(args, &cli.format),
        Command::Allocate(args) => cmd_allocate(args, &cli.format),
        Command::Endurance(args) => cmd_endurance(args, &cli.format),
        Command::Run => cmd_run(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(output) => {
            if let Some(path) = &cli.out {
                if let Err(e) = fs::write(path, &output) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(1);
                }
            } else {
                print!("{output}");
            }
            ExitCode::SUCCESS
        }
        Err(CliError::Config(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Solver(message)) => {
            eprintln!("solver failure: {message}");
            ExitCode::from(2)
        }
    }
}
