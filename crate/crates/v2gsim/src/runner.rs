//! Orchestration: wires ingestion, participation scoring, fleet
//! projection, spatial allocation, outages, and the OPF into the
//! scenario x fleet-level sweep, and emits the report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocation::{self, AllocationError, V2GAllocation, ZipBusMap};
use crate::fleet::{self, FleetError, FleetParams};
use crate::grid::{self, GridError, NetworkCase, OutageScenario};
use crate::opf::{self, DispatchStatus, SolverOptions};
use crate::participation::{self, FitError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
}

fn default_power_kw() -> f64 {
    7.0
}
fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub case: PathBuf,
    pub scenarios: PathBuf,
    pub registrations: PathBuf,
    pub population: PathBuf,
    pub survey: PathBuf,
    pub fleet_params: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zip_centroids: Option<PathBuf>,
    /// Explicit zip->bus CSV; overrides the nearest-substation heuristic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zip_bus_map: Option<PathBuf>,
    /// Winter peak the case loads are scaled to before every run.
    pub target_peak_mw: f64,
    pub base_year: i32,
    pub years: Vec<i32>,
    #[serde(default = "default_power_kw")]
    pub power_per_vehicle_kw: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, RunError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        if config.years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RunError::Config(
                "years must be strictly ascending".to_string(),
            ));
        }
        if config.zip_centroids.is_none() && config.zip_bus_map.is_none() {
            return Err(RunError::Config(
                "one of zip_centroids or zip_bus_map is required".to_string(),
            ));
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    /// "no_v2g" or the fleet year.
    pub fleet_level: String,
    pub v2g_mw: f64,
    /// Feasibility gap percentage; absent for failed cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shed_pct: Option<f64>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// SHA-256 over the config and every referenced input file.
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    /// Unix seconds; excluded from CSV emission so reports stay
    /// byte-comparable.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unsupported format: {other}")),
        }
    }
}

pub fn emit(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serialization cannot fail")
        }
        ReportFormat::Csv => {
            let mut out = String::from("scenario,fleet_level,v2g_mw,shed_pct,status\n");
            for row in &report.rows {
                let shed = row
                    .shed_pct
                    .map(opf::format_gap_percent)
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{:.3},{},{}\n",
                    row.scenario, row.fleet_level, row.v2g_mw, shed, row.status
                ));
            }
            out
        }
    }
}

struct Inputs {
    case: NetworkCase,
    scenarios: Vec<OutageScenario>,
    registrations: BTreeMap<String, fleet::EvCount>,
    population: Vec<(String, participation::DemographicRecord)>,
    survey: Vec<participation::SurveyResponse>,
    fleet_params: FleetParams,
    map_source: MapSource,
    config_hash: String,
}

enum MapSource {
    Explicit(ZipBusMap),
    Centroids(BTreeMap<String, (f64, f64)>),
}

fn read_file(hasher: &mut Sha256, path: &Path) -> Result<Vec<u8>, RunError> {
    let bytes = fs::read(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    hasher.update((path.to_string_lossy().len() as u64).to_le_bytes());
    hasher.update(path.to_string_lossy().as_bytes());
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(&bytes);
    Ok(bytes)
}

fn load_inputs(config: &RunConfig, base_dir: &Path) -> Result<Inputs, RunError> {
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    let mut hasher = Sha256::new();
    hasher.update(
        serde_json::to_vec(config).expect("config serialization cannot fail"),
    );

    let case_text = read_file(&mut hasher, &resolve(&config.case))?;
    let case = grid::parse_case(&String::from_utf8_lossy(&case_text))?;
    let scenario_text = read_file(&mut hasher, &resolve(&config.scenarios))?;
    let scenarios = grid::parse_scenarios(&String::from_utf8_lossy(&scenario_text))?;
    for s in &scenarios {
        for id in &s.generator_ids {
            if !case.generators.iter().any(|g| g.id == *id) {
                return Err(RunError::Config(format!(
                    "scenario {} references unknown generator {id}",
                    s.name
                )));
            }
        }
    }
    let registrations =
        fleet::load_registration_counts(&read_file(&mut hasher, &resolve(&config.registrations))?[..])?;
    let population =
        participation::load_population_csv(&read_file(&mut hasher, &resolve(&config.population))?[..])?;
    let survey =
        participation::load_survey_csv(&read_file(&mut hasher, &resolve(&config.survey))?[..])?;
    let params_text = read_file(&mut hasher, &resolve(&config.fleet_params))?;
    let fleet_params = FleetParams::parse(&String::from_utf8_lossy(&params_text))?;
    let map_source = if let Some(path) = &config.zip_bus_map {
        MapSource::Explicit(allocation::load_map_csv(
            &read_file(&mut hasher, &resolve(path))?[..],
        )?)
    } else {
        let path = config.zip_centroids.as_ref().expect("validated in parse");
        MapSource::Centroids(allocation::load_centroids_csv(
            &read_file(&mut hasher, &resolve(path))?[..],
        )?)
    };
    let config_hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(Inputs {
        case,
        scenarios,
        registrations,
        population,
        survey,
        fleet_params,
        map_source,
        config_hash,
    })
}

/// Runs the full sweep: every outage scenario against the No-V2G baseline
/// and every projected fleet year. A failing cell is recorded and the
/// sweep continues.
pub fn run(config: &RunConfig, base_dir: &Path) -> Result<Report, RunError> {
    let inputs = load_inputs(config, base_dir)?;
    let solver = config.solver.clone().unwrap_or_default();

    let scaled = inputs.case.scale_loads_to_peak(config.target_peak_mw)?;

    let model = participation::fit(&inputs.survey, config.holdout_fraction, config.seed)?;
    let rates = participation::zip_rates(&model, &inputs.population)?;
    let projection = fleet::project(
        &inputs.registrations,
        &inputs.fleet_params,
        config.base_year,
        &config.years,
    )?;
    let map = match &inputs.map_source {
        MapSource::Explicit(map) => map.clone(),
        MapSource::Centroids(centroids) => {
            allocation::nearest_substation_map(centroids, &scaled)?
        }
    };

    let mut allocations: Vec<(String, Option<V2GAllocation>)> =
        vec![("no_v2g".to_string(), None)];
    for &year in &config.years {
        let counts = projection.rounded(year);
        let participants = allocation::participants(&counts, &rates)?;
        let alloc = allocation::allocate(&participants, &map, config.power_per_vehicle_kw)?;
        allocations.push((year.to_string(), Some(alloc)));
    }

    let mut rows = Vec::new();
    for scenario in &inputs.scenarios {
        for (level, alloc) in &allocations {
            rows.push(run_cell(&scaled, scenario, level, alloc.as_ref(), &solver));
        }
    }

    Ok(Report {
        metadata: ReportMetadata {
            config_hash: inputs.config_hash,
            seed: config.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
        rows,
    })
}

fn run_cell(
    scaled: &NetworkCase,
    scenario: &OutageScenario,
    fleet_level: &str,
    alloc: Option<&V2GAllocation>,
    solver: &SolverOptions,
) -> ReportRow {
    let v2g_mw = alloc.map(V2GAllocation::total_mw).unwrap_or(0.0);
    let outcome = (|| -> Result<opf::DispatchResult, String> {
        let outage = scaled
            .apply_outage(scenario)
            .map_err(|e| e.to_string())?;
        let case = match alloc {
            Some(a) => outage.case.add_v2g_generators(a).map_err(|e| e.to_string())?,
            None => outage.case,
        };
        opf::solve_opf_with_shed(&case, solver).map_err(|e| e.to_string())
    })();
    match outcome {
        Ok(result) if result.status != DispatchStatus::Failed => ReportRow {
            scenario: scenario.name.clone(),
            fleet_level: fleet_level.to_string(),
            v2g_mw,
            shed_pct: Some(result.total_shed_fraction * 100.0),
            status: match result.status {
                DispatchStatus::Optimal => "optimal".to_string(),
                DispatchStatus::ShedRequired => "shed_required".to_string(),
                DispatchStatus::Failed => unreachable!(),
            },
            diagnostic: None,
        },
        Ok(result) => ReportRow {
            scenario: scenario.name.clone(),
            fleet_level: fleet_level.to_string(),
            v2g_mw,
            shed_pct: None,
            status: "failed".to_string(),
            diagnostic: result.diagnostic,
        },
        Err(message) => ReportRow {
            scenario: scenario.name.clone(),
            fleet_level: fleet_level.to_string(),
            v2g_mw,
            shed_pct: None,
            status: "failed".to_string(),
            diagnostic: Some(message),
        },
    }
}

/// CSV emission with the timestamp excluded; used by the determinism
/// checks as well as the CLI.
pub fn emit_csv(report: &Report) -> String {
    emit(report, ReportFormat::Csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> Report {
        Report {
            metadata: ReportMetadata {
                config_hash: "abc".into(),
                seed: 7,
                tool_version: "0.1.0".into(),
                timestamp: 1_700_000_000,
            },
            rows: vec![ReportRow {
                scenario: "scenario_1".into(),
                fleet_level: "2035".into(),
                v2g_mw: 1000.0,
                shed_pct: Some(3.4712),
                status: "shed_required".into(),
                diagnostic: None,
            }],
        }
    }

    #[test]
    fn csv_has_header_and_formatted_percentages() {
        let csv = emit_csv(&sample_report());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario,fleet_level,v2g_mw,shed_pct,status"
        );
        assert_eq!(
            lines.next().unwrap(),
            "scenario_1,2035,1000.000,3.47,shed_required"
        );
        assert!(lines.next().is_none());
    }

    #[test]
    fn json_roundtrip_preserves_report() {
        let report = sample_report();
        let text = emit(&report, ReportFormat::Json);
        let parsed: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn config_requires_sorted_years_and_a_map_source() {
        let base = r#"{
            "case": "case.json", "scenarios": "s.json",
            "registrations": "r.csv", "population": "p.csv",
            "survey": "s.csv", "fleet_params": "f.json",
            "zip_centroids": "c.csv",
            "target_peak_mw": 2000.0, "base_year": 2025,
            "years": [2030, 2025]
        }"#;
        assert!(matches!(RunConfig::parse(base), Err(RunError::Config(_))));
        let no_map = base
            .replace("\"zip_centroids\": \"c.csv\",", "")
            .replace("[2030, 2025]", "[2025, 2030]");
        assert!(matches!(RunConfig::parse(&no_map), Err(RunError::Config(_))));
        let good = base.replace("[2030, 2025]", "[2025, 2030]");
        assert!(RunConfig::parse(&good).is_ok());
    }

    #[test]
    fn missing_input_file_names_the_path() {
        let config = RunConfig::parse(
            r#"{
                "case": "nope/missing_case.json", "scenarios": "s.json",
                "registrations": "r.csv", "population": "p.csv",
                "survey": "s.csv", "fleet_params": "f.json",
                "zip_centroids": "c.csv",
                "target_peak_mw": 2000.0, "base_year": 2025, "years": [2030]
            }"#,
        )
        .unwrap();
        let err = run(&config, Path::new("/tmp")).unwrap_err();
        assert!(err.to_string().contains("missing_case.json"), "{err}");
    }
}
