//! Cohort stock-flow projection of per-zip EV counts.
//!
//! Each year, per zip: the cohort reaching the vehicle lifetime retires,
//! the total stock scales with population growth, new sales replace
//! retirements plus growth, and the EV share of new sales moves by the
//! base growth rate amplified by the adoption-incentive multiplier.
//!
//! Stocks are fractional vehicles internally; rounding to whole vehicles
//! happens only at reporting so small zips do not drift.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("negative EV count for zip {0}")]
    NegativeCount(String),
    #[error("missing growth entry for year {0}")]
    MissingGrowthYear(i32),
    #[error("missing share growth entry for year {0}")]
    MissingShareGrowthYear(i32),
    #[error("no population entry for zip {0} in the fleet params")]
    MissingPopulation(String),
    #[error("target year {target} precedes base year {base}")]
    TargetBeforeBase { target: i32, base: i32 },
    #[error("invalid fleet params: {0}")]
    BadParams(String),
    #[error("params parse error: {0}")]
    Parse(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn default_lifetime() -> u32 {
    15
}
fn default_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetParams {
    #[serde(default = "default_lifetime")]
    pub vehicle_lifetime: u32,
    /// Vehicles per resident, held constant over the run.
    pub ownership_rate: f64,
    #[serde(default = "default_multiplier")]
    pub incentive_multiplier: f64,
    /// Uniform per-year fractional population growth, by calendar year.
    pub population_growth: BTreeMap<i32, f64>,
    /// Per-year fractional change in the EV share of new sales.
    pub base_share_growth: BTreeMap<i32, f64>,
    /// Residents per zip at the base year (total stock = population x
    /// ownership_rate).
    pub population: BTreeMap<String, f64>,
    /// EV share of new sales at the base year.
    pub initial_ev_share: f64,
    /// Optional per-zip population growth overrides.
    #[serde(default)]
    pub population_growth_by_zip: BTreeMap<String, BTreeMap<i32, f64>>,
}

impl FleetParams {
    pub fn parse(text: &str) -> Result<FleetParams, FleetError> {
        let params: FleetParams =
            serde_json::from_str(text).map_err(|e| FleetError::Parse(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        if self.vehicle_lifetime < 1 {
            return Err(FleetError::BadParams("vehicle_lifetime must be >= 1".into()));
        }
        if !(self.ownership_rate > 0.0) {
            return Err(FleetError::BadParams("ownership_rate must be positive".into()));
        }
        if !(self.incentive_multiplier > 0.0) {
            return Err(FleetError::BadParams(
                "incentive_multiplier must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.initial_ev_share) {
            return Err(FleetError::BadParams(
                "initial_ev_share must be within [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn growth_for(&self, zip: &str, year: i32) -> Option<f64> {
        if let Some(series) = self.population_growth_by_zip.get(zip) {
            if let Some(g) = series.get(&year) {
                return Some(*g);
            }
        }
        self.population_growth.get(&year).copied()
    }
}

/// Initial EV count per zip: either a bare total (spread uniformly over
/// cohort ages) or an explicit purchase-year histogram.
#[derive(Debug, Clone, PartialEq)]
pub enum EvCount {
    Total(u64),
    ByPurchaseYear(BTreeMap<i32, u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipFleet {
    /// Total vehicle stock (all drivetrains), fractional.
    pub stock: f64,
    /// EV cohorts by age: index 0 is the newest; length = vehicle_lifetime.
    pub cohorts: Vec<f64>,
    /// EV share of new sales.
    pub ev_share: f64,
}

impl ZipFleet {
    pub fn ev_stock(&self) -> f64 {
        self.cohorts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub year: i32,
    pub zips: BTreeMap<String, ZipFleet>,
}

/// Per-zip, per requested year EV counts (fractional; see
/// [`FleetProjection::rounded`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetProjection {
    pub counts: BTreeMap<String, BTreeMap<i32, f64>>,
}

impl FleetProjection {
    /// Whole-vehicle counts for one year, rounded half-up.
    pub fn rounded(&self, year: i32) -> BTreeMap<String, u64> {
        self.counts
            .iter()
            .map(|(zip, by_year)| {
                let v = by_year.get(&year).copied().unwrap_or(0.0);
                (zip.clone(), (v + 0.5).floor() as u64)
            })
            .collect()
    }
}

/// Builds the base-year state. Counts without purchase years spread
/// uniformly over ages 0..lifetime-1, remainder r going to the r youngest
/// cohorts so cohorts sum to the registration count exactly.
pub fn initialize(
    registrations: &BTreeMap<String, EvCount>,
    params: &FleetParams,
    base_year: i32,
) -> Result<FleetState, FleetError> {
    params.validate()?;
    let lifetime = params.vehicle_lifetime as usize;
    let mut zips = BTreeMap::new();
    for (zip, count) in registrations {
        let mut cohorts = vec![0.0_f64; lifetime];
        match count {
            EvCount::Total(total) => {
                let per = total / lifetime as u64;
                let remainder = (total % lifetime as u64) as usize;
                for (age, slot) in cohorts.iter_mut().enumerate() {
                    *slot = per as f64 + if age < remainder { 1.0 } else { 0.0 };
                }
            }
            EvCount::ByPurchaseYear(histogram) => {
                for (&purchase_year, &n) in histogram {
                    let age = base_year - purchase_year;
                    if (0..lifetime as i32).contains(&age) {
                        cohorts[age as usize] += n as f64;
                    }
                    // vehicles older than the lifetime are already retired
                }
            }
        }
        let population = params
            .population
            .get(zip)
            .ok_or_else(|| FleetError::MissingPopulation(zip.clone()))?;
        zips.insert(
            zip.clone(),
            ZipFleet {
                stock: population * params.ownership_rate,
                cohorts,
                ev_share: params.initial_ev_share,
            },
        );
    }
    Ok(FleetState {
        year: base_year,
        zips,
    })
}

/// Advances the state one calendar year.
pub fn step_year(state: &FleetState, params: &FleetParams) -> Result<FleetState, FleetError> {
    let year = state.year + 1;
    let lifetime = params.vehicle_lifetime as f64;
    let mut zips = BTreeMap::new();
    for (zip, fleet) in &state.zips {
        let growth = params
            .growth_for(zip, year)
            .ok_or(FleetError::MissingGrowthYear(year))?;
        let share_growth = params
            .base_share_growth
            .get(&year)
            .copied()
            .ok_or(FleetError::MissingShareGrowthYear(year))?;

        let retirements = fleet.stock / lifetime;
        let new_stock = fleet.stock * (1.0 + growth);
        let new_sales = (retirements + (new_stock - fleet.stock)).max(0.0);
        let new_share = (fleet.ev_share
            * (1.0 + share_growth * params.incentive_multiplier))
            .clamp(0.0, 1.0);

        let mut cohorts = Vec::with_capacity(fleet.cohorts.len());
        cohorts.push(new_sales * new_share);
        cohorts.extend_from_slice(&fleet.cohorts[..fleet.cohorts.len() - 1]);

        zips.insert(
            zip.clone(),
            ZipFleet {
                stock: new_stock,
                cohorts,
                ev_share: new_share,
            },
        );
    }
    Ok(FleetState { year, zips })
}

/// Steps from the base year and records EV stock per zip at each target
/// year. The base year reproduces the inputs exactly.
pub fn project(
    registrations: &BTreeMap<String, EvCount>,
    params: &FleetParams,
    base_year: i32,
    target_years: &[i32],
) -> Result<FleetProjection, FleetError> {
    for &t in target_years {
        if t < base_year {
            return Err(FleetError::TargetBeforeBase {
                target: t,
                base: base_year,
            });
        }
    }
    let mut state = initialize(registrations, params, base_year)?;
    let mut counts: BTreeMap<String, BTreeMap<i32, f64>> = registrations
        .keys()
        .map(|zip| (zip.clone(), BTreeMap::new()))
        .collect();
    let last = target_years.iter().copied().max().unwrap_or(base_year);
    for year in base_year..=last {
        if year > base_year {
            state = step_year(&state, params)?;
        }
        if target_years.contains(&year) {
            for (zip, fleet) in &state.zips {
                counts.get_mut(zip).unwrap().insert(year, fleet.ev_stock());
            }
        }
    }
    Ok(FleetProjection { counts })
}

#[derive(Debug, Deserialize)]
struct RegistrationRow {
    zip: String,
    #[allow(dead_code)]
    make: String,
    #[allow(dead_code)]
    model: String,
    count: u64,
    #[allow(dead_code)]
    usable_kwh: f64,
    #[allow(dead_code)]
    is_phev: bool,
}

/// Registrations CSV: zip,make,model,count,usable_kwh,is_phev. This module
/// consumes zip and count; the endurance module reads the battery columns.
pub fn load_registration_counts<R: Read>(
    reader: R,
) -> Result<BTreeMap<String, EvCount>, FleetError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: RegistrationRow = row?;
        *totals.entry(row.zip).or_insert(0) += row.count;
    }
    Ok(totals
        .into_iter()
        .map(|(zip, n)| (zip, EvCount::Total(n)))
        .collect())
}
