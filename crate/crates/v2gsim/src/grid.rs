//! Network data model: case ingestion, validation, and the case
//! transformations used to build emergency scenarios (generator outages,
//! peak-demand load scaling, V2G capacity insertion).
//!
//! All electrical quantities are MW / MVAr / MVA at the case `base_mva`;
//! impedances are per-unit. Cases are immutable after construction:
//! every transformation returns a new `NetworkCase`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::V2GAllocation;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("case parse error: {0}")]
    Parse(String),
    #[error("case validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown generator id {0}")]
    UnknownGenerator(u32),
    #[error("unknown bus id {0}")]
    UnknownBus(u32),
    #[error("total active load is zero; cannot scale to a peak")]
    ZeroTotalLoad,
    #[error("target peak must be positive, got {0}")]
    NonPositivePeak(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusRole {
    Slack,
    Pv,
    Pq,
}

fn default_vmin() -> f64 {
    0.9
}

fn default_vmax() -> f64 {
    1.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub role: BusRole,
    /// Voltage magnitude bounds in per-unit; 0.9/1.1 when the case omits them.
    #[serde(default = "default_vmin")]
    pub vmin: f64,
    #[serde(default = "default_vmax")]
    pub vmax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zip: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    #[serde(rename = "from")]
    pub from_bus: u32,
    #[serde(rename = "to")]
    pub to_bus: u32,
    /// Series impedance, per-unit.
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, per-unit.
    #[serde(rename = "b", default)]
    pub b_shunt: f64,
    /// MVA flow limit on the from-end; 0 = unlimited.
    #[serde(default)]
    pub rating: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    /// Polynomial cost coefficients: $ , $/MWh, $/MWh².
    #[serde(rename = "c0", default)]
    pub cost_c0: f64,
    #[serde(rename = "c1", default)]
    pub cost_c1: f64,
    #[serde(rename = "c2", default)]
    pub cost_c2: f64,
    #[serde(default)]
    pub fuel: String,
    #[serde(default)]
    pub is_v2g: bool,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: u32,
    pub bus: u32,
    /// Active demand, MW.
    pub p: f64,
    /// Reactive demand, MVAr.
    pub q: f64,
    #[serde(default = "default_true")]
    pub sheddable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
}

/// A named generator-outage scenario. `expected_capacity_removed_mw` is a
/// documentation field: a mismatch against the actual pmax sum is reported,
/// not rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageScenario {
    pub name: String,
    pub generator_ids: Vec<u32>,
    #[serde(default)]
    pub expected_capacity_removed_mw: f64,
}

/// Result of applying an outage: the modified case plus the pmax actually
/// taken offline, for comparison against the scenario's expectation.
#[derive(Debug, Clone)]
pub struct OutageResult {
    pub case: NetworkCase,
    pub removed_capacity_mw: f64,
}

pub fn parse_case(text: &str) -> Result<NetworkCase, GridError> {
    let case: NetworkCase =
        serde_json::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;
    case.validate()?;
    Ok(case)
}

pub fn parse_scenarios(text: &str) -> Result<Vec<OutageScenario>, GridError> {
    serde_json::from_str(text).map_err(|e| GridError::Parse(e.to_string()))
}

impl NetworkCase {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization cannot fail")
    }

    /// Checks every structural invariant, collecting all failures.
    pub fn validate(&self) -> Result<(), GridError> {
        let mut failures = Vec::new();
        if !(self.base_mva > 0.0) {
            failures.push(format!("base_mva must be positive, got {}", self.base_mva));
        }
        let mut ids = HashSet::new();
        for bus in &self.buses {
            if !ids.insert(bus.id) {
                failures.push(format!("duplicate bus id {}", bus.id));
            }
            if !(bus.vmin > 0.0 && bus.vmin <= bus.vmax) {
                failures.push(format!(
                    "bus {}: voltage bounds must satisfy 0 < vmin <= vmax (got {}..{})",
                    bus.id, bus.vmin, bus.vmax
                ));
            }
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.role == BusRole::Slack)
            .count();
        match slack_count {
            0 => failures.push("no slack bus".to_string()),
            1 => {}
            n => failures.push(format!("multiple slack buses ({n})")),
        }
        for (i, br) in self.branches.iter().enumerate() {
            if !ids.contains(&br.from_bus) {
                failures.push(format!("branch {i}: unknown from bus {}", br.from_bus));
            }
            if !ids.contains(&br.to_bus) {
                failures.push(format!("branch {i}: unknown to bus {}", br.to_bus));
            }
            if br.from_bus == br.to_bus {
                failures.push(format!("branch {i}: from and to are both bus {}", br.from_bus));
            }
            if br.x == 0.0 {
                failures.push(format!("branch {i}: zero reactance"));
            }
        }
        let mut gen_ids = HashSet::new();
        for g in &self.generators {
            if !gen_ids.insert(g.id) {
                failures.push(format!("duplicate generator id {}", g.id));
            }
            if !ids.contains(&g.bus) {
                failures.push(format!("generator {}: unknown bus {}", g.id, g.bus));
            }
            if g.pmin > g.pmax {
                failures.push(format!("generator {}: pmin > pmax", g.id));
            }
            if g.qmin > g.qmax {
                failures.push(format!("generator {}: qmin > qmax", g.id));
            }
            if g.is_v2g && g.pmin != 0.0 {
                failures.push(format!("generator {}: v2g units must have pmin = 0", g.id));
            }
        }
        let mut load_ids = HashSet::new();
        for l in &self.loads {
            if !load_ids.insert(l.id) {
                failures.push(format!("duplicate load id {}", l.id));
            }
            if !ids.contains(&l.bus) {
                failures.push(format!("load {}: unknown bus {}", l.id, l.bus));
            }
            if l.p < 0.0 {
                failures.push(format!("load {}: negative active demand", l.id));
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(GridError::Validation(failures))
        }
    }

    pub fn bus_index(&self) -> BTreeMap<u32, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    pub fn slack_bus(&self) -> Option<&Bus> {
        self.buses.iter().find(|b| b.role == BusRole::Slack)
    }

    pub fn total_load_p(&self) -> f64 {
        self.loads.iter().map(|l| l.p).sum()
    }

    /// Total pmax over in-service generators.
    pub fn total_capacity(&self) -> f64 {
        self.generators
            .iter()
            .filter(|g| g.in_service)
            .map(|g| g.pmax)
            .sum()
    }

    /// Returns a copy with the scenario's generators switched off and the
    /// capacity actually removed.
    pub fn apply_outage(&self, scenario: &OutageScenario) -> Result<OutageResult, GridError> {
        let mut case = self.clone();
        let mut removed = 0.0;
        for id in &scenario.generator_ids {
            let gen = case
                .generators
                .iter_mut()
                .find(|g| g.id == *id)
                .ok_or(GridError::UnknownGenerator(*id))?;
            if gen.in_service {
                removed += gen.pmax;
            }
            gen.in_service = false;
        }
        Ok(OutageResult {
            case,
            removed_capacity_mw: removed,
        })
    }

    /// Scales every load by target_peak / current total active load,
    /// preserving each load's power factor.
    pub fn scale_loads_to_peak(&self, target_peak: f64) -> Result<NetworkCase, GridError> {
        if target_peak <= 0.0 {
            return Err(GridError::NonPositivePeak(target_peak));
        }
        let total = self.total_load_p();
        if total <= 0.0 {
            return Err(GridError::ZeroTotalLoad);
        }
        let k = target_peak / total;
        let mut case = self.clone();
        for load in &mut case.loads {
            load.p *= k;
            load.q *= k;
        }
        Ok(case)
    }

    /// Inserts one V2G generator per allocated bus with nonzero capacity.
    ///
    /// V2G units get pmin = 0, zero reactive capability, and a marginal cost
    /// of 1.5 x the most expensive conventional unit plus 1 $/MWh, so the
    /// optimizer exhausts conventional capacity before discharging vehicles.
    pub fn add_v2g_generators(&self, alloc: &V2GAllocation) -> Result<NetworkCase, GridError> {
        let ids = self.bus_index();
        for bus in alloc.buses.keys() {
            if !ids.contains_key(bus) {
                return Err(GridError::UnknownBus(*bus));
            }
        }
        let max_c1 = self
            .generators
            .iter()
            .filter(|g| !g.is_v2g)
            .map(|g| g.cost_c1)
            .fold(0.0_f64, f64::max);
        let v2g_c1 = max_c1 * 1.5 + 1.0;
        let mut next_id = self.generators.iter().map(|g| g.id).max().unwrap_or(0) + 1;
        let mut case = self.clone();
        for (bus, entry) in &alloc.buses {
            if entry.capacity_mw <= 0.0 {
                continue;
            }
            case.generators.push(Generator {
                id: next_id,
                bus: *bus,
                pmin: 0.0,
                pmax: entry.capacity_mw,
                qmin: 0.0,
                qmax: 0.0,
                cost_c0: 0.0,
                cost_c1: v2g_c1,
                cost_c2: 0.0,
                fuel: "v2g".to_string(),
                is_v2g: true,
                in_service: true,
            });
            next_id += 1;
        }
        Ok(case)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{BusCapacity, V2GAllocation};

    pub(crate) fn three_bus_text() -> String {
        r#"{
            "base_mva": 100.0,
            "buses": [
                {"id": 1, "role": "slack"},
                {"id": 2, "role": "pq"},
                {"id": 3, "role": "pq"}
            ],
            "branches": [
                {"from": 1, "to": 2, "r": 0.0, "x": 0.1},
                {"from": 2, "to": 3, "r": 0.0, "x": 0.1}
            ],
            "generators": [
                {"id": 1, "bus": 1, "pmin": 0.0, "pmax": 200.0, "qmin": -100.0, "qmax": 100.0, "c1": 10.0}
            ],
            "loads": [
                {"id": 1, "bus": 3, "p": 50.0, "q": 10.0}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn parses_minimal_case() {
        let case = parse_case(&three_bus_text()).unwrap();
        assert_eq!(case.buses.len(), 3);
        assert_eq!(case.branches.len(), 2);
        assert_eq!(case.buses[0].vmin, 0.9);
        assert_eq!(case.buses[0].vmax, 1.1);
        assert!(case.branches[0].in_service);
    }

    #[test]
    fn duplicate_bus_id_rejected() {
        let text = three_bus_text().replace(r#""id": 2, "role": "pq""#, r#""id": 1, "role": "pq""#);
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate bus id 1"), "{err}");
    }

    #[test]
    fn missing_slack_rejected() {
        let text = three_bus_text().replace("slack", "pq");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("no slack bus"), "{err}");
    }

    #[test]
    fn validation_collects_all_failures() {
        let mut case = parse_case(&three_bus_text()).unwrap();
        case.buses[0].role = BusRole::Pq;
        case.loads[0].p = -1.0;
        match case.validate().unwrap_err() {
            GridError::Validation(failures) => assert_eq!(failures.len(), 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn roundtrip_preserves_case() {
        let case = parse_case(&three_bus_text()).unwrap();
        let again = parse_case(&case.to_json()).unwrap();
        assert_eq!(case, again);
    }

    #[test]
    fn outage_reports_removed_capacity() {
        let mut case = parse_case(&three_bus_text()).unwrap();
        case.generators.push(Generator {
            id: 2,
            bus: 2,
            pmin: 0.0,
            pmax: 930.0,
            qmin: -10.0,
            qmax: 10.0,
            cost_c0: 0.0,
            cost_c1: 12.0,
            cost_c2: 0.0,
            fuel: "natural_gas".into(),
            is_v2g: false,
            in_service: true,
        });
        let scenario = OutageScenario {
            name: "s1".into(),
            generator_ids: vec![2],
            expected_capacity_removed_mw: 930.0,
        };
        let out = case.apply_outage(&scenario).unwrap();
        assert_eq!(out.removed_capacity_mw, 930.0);
        assert!(!out.case.generators[1].in_service);
        // the input is untouched and the output differs only in service flags
        assert!(case.generators[1].in_service);
        let mut restored = out.case.clone();
        restored.generators[1].in_service = true;
        assert_eq!(restored, case);
    }

    #[test]
    fn empty_outage_is_identity() {
        let case = parse_case(&three_bus_text()).unwrap();
        let scenario = OutageScenario {
            name: "none".into(),
            generator_ids: vec![],
            expected_capacity_removed_mw: 0.0,
        };
        let out = case.apply_outage(&scenario).unwrap();
        assert_eq!(out.removed_capacity_mw, 0.0);
        assert_eq!(out.case, case);
    }

    #[test]
    fn outage_unknown_generator_names_id() {
        let case = parse_case(&three_bus_text()).unwrap();
        let scenario = OutageScenario {
            name: "bad".into(),
            generator_ids: vec![99],
            expected_capacity_removed_mw: 0.0,
        };
        let err = case.apply_outage(&scenario).unwrap_err();
        assert!(err.to_string().contains("99"));
    }

    #[test]
    fn load_scaling_preserves_power_factor() {
        let mut case = parse_case(&three_bus_text()).unwrap();
        // 300 MW at pf 0.95 and 200 MW at pf 0.9
        case.loads = vec![
            Load {
                id: 1,
                bus: 2,
                p: 300.0,
                q: 300.0 * (1.0 / 0.95_f64.powi(2) - 1.0).sqrt(),
                sheddable: true,
            },
            Load {
                id: 2,
                bus: 3,
                p: 200.0,
                q: 200.0 * (1.0 / 0.9_f64.powi(2) - 1.0).sqrt(),
                sheddable: true,
            },
        ];
        let scaled = case.scale_loads_to_peak(750.0).unwrap();
        assert!((scaled.loads[0].p - 450.0).abs() < 1e-9);
        assert!((scaled.loads[1].p - 300.0).abs() < 1e-9);
        assert!((scaled.total_load_p() - 750.0).abs() < 1e-9);
        for (before, after) in case.loads.iter().zip(&scaled.loads) {
            assert!((after.q / after.p - before.q / before.p).abs() < 1e-12);
        }
    }

    #[test]
    fn load_scaling_identity_and_errors() {
        let case = parse_case(&three_bus_text()).unwrap();
        let same = case.scale_loads_to_peak(case.total_load_p()).unwrap();
        assert_eq!(same, case);
        assert!(matches!(
            case.scale_loads_to_peak(0.0),
            Err(GridError::NonPositivePeak(_))
        ));
        let mut empty = case.clone();
        empty.loads.clear();
        assert!(matches!(
            empty.scale_loads_to_peak(100.0),
            Err(GridError::ZeroTotalLoad)
        ));
    }

    #[test]
    fn v2g_insertion_sizes_and_prices_units() {
        let case = parse_case(&three_bus_text()).unwrap();
        let alloc = V2GAllocation {
            power_per_vehicle_kw: 7.0,
            buses: [(2u32, BusCapacity { vehicles: 1000, capacity_mw: 7.0 })]
                .into_iter()
                .collect(),
        };
        let with = case.add_v2g_generators(&alloc).unwrap();
        assert_eq!(with.generators.len(), 2);
        let v2g = with.generators.last().unwrap();
        assert!(v2g.is_v2g);
        assert_eq!(v2g.bus, 2);
        assert_eq!(v2g.pmax, 7.0);
        assert_eq!(v2g.pmin, 0.0);
        assert_eq!((v2g.qmin, v2g.qmax), (0.0, 0.0));
        assert!(v2g.cost_c1 > case.generators[0].cost_c1 * 1.5);
        assert!(
            (with.total_capacity() - case.total_capacity() - 7.0).abs() < 1e-12
        );
    }

    #[test]
    fn v2g_insertion_identity_and_unknown_bus() {
        let case = parse_case(&three_bus_text()).unwrap();
        let empty = V2GAllocation {
            power_per_vehicle_kw: 7.0,
            buses: BTreeMap::new(),
        };
        assert_eq!(case.add_v2g_generators(&empty).unwrap(), case);
        let bad = V2GAllocation {
            power_per_vehicle_kw: 7.0,
            buses: [(999u32, BusCapacity { vehicles: 1, capacity_mw: 0.007 })]
                .into_iter()
                .collect(),
        };
        assert!(matches!(
            case.add_v2g_generators(&bad),
            Err(GridError::UnknownBus(999))
        ));
    }

    #[test]
    fn rescaling_is_idempotent_on_target() {
        let case = parse_case(&three_bus_text()).unwrap();
        let a = case.scale_loads_to_peak(400.0).unwrap();
        let ab = a.scale_loads_to_peak(250.0).unwrap();
        let b = case.scale_loads_to_peak(250.0).unwrap();
        for (x, y) in ab.loads.iter().zip(&b.loads) {
            assert!((x.p - y.p).abs() <= 1e-9 * y.p.abs().max(1.0));
            assert!((x.q - y.q).abs() <= 1e-9 * y.q.abs().max(1.0));
        }
    }
}
