//! How long the participating fleet can sustain its discharge rate:
//! per-model endurance, the fraction-remaining curve, and duration
//! quantiles.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnduranceError {
    #[error("discharge power must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("fleet has no vehicles")]
    EmptyFleet,
    #[error("horizon and step must be positive")]
    BadGrid,
    #[error("quantile fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionEntry {
    pub label: String,
    /// Usable battery energy, kWh (already derated for initial state of
    /// charge upstream if desired).
    pub usable_kwh: f64,
    pub count: u64,
    pub is_phev: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetComposition {
    pub entries: Vec<CompositionEntry>,
    /// Initial state of charge as a fraction of usable capacity.
    #[serde(default = "default_soc")]
    pub initial_soc: f64,
}

fn default_soc() -> f64 {
    1.0
}

impl FleetComposition {
    pub fn total_vehicles(&self) -> u64 {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn phev_fraction(&self) -> f64 {
        let total = self.total_vehicles();
        if total == 0 {
            return 0.0;
        }
        let phev: u64 = self
            .entries
            .iter()
            .filter(|e| e.is_phev)
            .map(|e| e.count)
            .sum();
        phev as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnduranceCurve {
    pub time_h: Vec<f64>,
    pub fraction_remaining: Vec<f64>,
}

impl EnduranceCurve {
    /// Plot-ready CSV: time_h,fraction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_h,fraction\n");
        for (t, f) in self.time_h.iter().zip(&self.fraction_remaining) {
            out.push_str(&format!("{t},{f}\n"));
        }
        out
    }
}

/// Hours a vehicle sustains `power` kW from `usable_kwh` of energy.
pub fn vehicle_endurance(usable_kwh: f64, power_kw: f64) -> Result<f64, EnduranceError> {
    if power_kw <= 0.0 {
        return Err(EnduranceError::NonPositivePower(power_kw));
    }
    Ok(usable_kwh / power_kw)
}

fn endurances(
    fleet: &FleetComposition,
    power_kw: f64,
) -> Result<Vec<(f64, u64)>, EnduranceError> {
    if fleet.total_vehicles() == 0 {
        return Err(EnduranceError::EmptyFleet);
    }
    fleet
        .entries
        .iter()
        .filter(|e| e.count > 0)
        .map(|e| {
            vehicle_endurance(e.usable_kwh * fleet.initial_soc, power_kw).map(|h| (h, e.count))
        })
        .collect()
}

/// Fraction of the fleet still discharging at each grid point. A vehicle
/// whose endurance is exactly t still counts as remaining at t.
pub fn curve(
    fleet: &FleetComposition,
    power_kw: f64,
    horizon_h: f64,
    step_h: f64,
) -> Result<EnduranceCurve, EnduranceError> {
    if !(horizon_h > 0.0 && step_h > 0.0) {
        return Err(EnduranceError::BadGrid);
    }
    let by_model = endurances(fleet, power_kw)?;
    let total = fleet.total_vehicles() as f64;
    let mut time_h = Vec::new();
    let mut fraction_remaining = Vec::new();
    let steps = (horizon_h / step_h).floor() as usize;
    for k in 0..=steps {
        let t = k as f64 * step_h;
        let alive: u64 = by_model
            .iter()
            .filter(|(h, _)| *h >= t)
            .map(|(_, c)| c)
            .sum();
        time_h.push(t);
        fraction_remaining.push(alive as f64 / total);
    }
    Ok(EnduranceCurve {
        time_h,
        fraction_remaining,
    })
}

/// Largest endurance time t (over the fleet's endurance set) at which at
/// least `fraction` of the fleet is still discharging.
pub fn duration_quantile(
    fleet: &FleetComposition,
    power_kw: f64,
    fraction: f64,
) -> Result<f64, EnduranceError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EnduranceError::BadFraction(fraction));
    }
    let by_model = endurances(fleet, power_kw)?;
    let total = fleet.total_vehicles() as f64;
    let mut best: Option<f64> = None;
    for (t, _) in &by_model {
        let alive: u64 = by_model
            .iter()
            .filter(|(h, _)| h >= t)
            .map(|(_, c)| c)
            .sum();
        if alive as f64 / total >= fraction {
            best = Some(best.map_or(*t, |b: f64| b.max(*t)));
        }
    }
    // fraction <= 1 guarantees at least the minimum endurance qualifies
    Ok(best.expect("some endurance level always satisfies the fraction"))
}

#[derive(Debug, Deserialize)]
struct RegistrationRow {
    #[allow(dead_code)]
    zip: String,
    make: String,
    model: String,
    count: u64,
    usable_kwh: f64,
    is_phev: bool,
}

/// Builds the fleet composition from the registrations CSV
/// (zip,make,model,count,usable_kwh,is_phev), merging rows of the same
/// make/model.
pub fn load_composition_csv<R: Read>(reader: R) -> Result<FleetComposition, EnduranceError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut merged: std::collections::BTreeMap<String, CompositionEntry> =
        std::collections::BTreeMap::new();
    for row in rdr.deserialize() {
        let row: RegistrationRow = row?;
        let label = format!("{} {}", row.make, row.model);
        merged
            .entry(label.clone())
            .and_modify(|e| e.count += row.count)
            .or_insert(CompositionEntry {
                label,
                usable_kwh: row.usable_kwh,
                count: row.count,
                is_phev: row.is_phev,
            });
    }
    Ok(FleetComposition {
        entries: merged.into_values().collect(),
        initial_soc: 1.0,
    })
}
