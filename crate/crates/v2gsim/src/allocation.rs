//! Spatial allocation of participating vehicles onto grid buses at a
//! fixed per-vehicle discharge rate (7 kW level-2 default).

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::NetworkCase;
use crate::participation::ZipParticipation;

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("no participation rate for zip {0}")]
    MissingRate(String),
    #[error("zip {0} has no bus mapping")]
    UnmappedZip(String),
    #[error("no buses carry coordinates and attached equipment; cannot build a nearest-substation map")]
    NoMappableBuses,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapProvenance {
    ExplicitFile,
    NearestSubstation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipBusMap {
    pub map: BTreeMap<String, u32>,
    pub provenance: MapProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusCapacity {
    pub vehicles: u64,
    pub capacity_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2GAllocation {
    pub power_per_vehicle_kw: f64,
    pub buses: BTreeMap<u32, BusCapacity>,
}

impl V2GAllocation {
    pub fn total_mw(&self) -> f64 {
        self.buses.values().map(|b| b.capacity_mw).sum()
    }

    pub fn total_vehicles(&self) -> u64 {
        self.buses.values().map(|b| b.vehicles).sum()
    }
}

/// Participating vehicles per zip: count x rate, rounded half-up per zip
/// (before aggregation, so per-zip reports and per-bus totals reconcile).
pub fn participants(
    ev_counts: &BTreeMap<String, u64>,
    rates: &[ZipParticipation],
) -> Result<BTreeMap<String, u64>, AllocationError> {
    let by_zip: BTreeMap<&str, f64> = rates
        .iter()
        .map(|r| (r.zip.as_str(), r.participation_rate))
        .collect();
    ev_counts
        .iter()
        .map(|(zip, count)| {
            let rate = by_zip
                .get(zip.as_str())
                .ok_or_else(|| AllocationError::MissingRate(zip.clone()))?;
            Ok((zip.clone(), (*count as f64 * rate + 0.5).floor() as u64))
        })
        .collect()
}

/// Great-circle distance in kilometers.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const EARTH_RADIUS_KM: f64 = 6371.0;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().atan2((1.0 - a).sqrt())
}

/// Maps each zip centroid to the great-circle-nearest bus that has at
/// least one load or generator attached, ties broken by lowest bus id.
pub fn nearest_substation_map(
    zip_centroids: &BTreeMap<String, (f64, f64)>,
    case: &NetworkCase,
) -> Result<ZipBusMap, AllocationError> {
    let mut candidates: Vec<(u32, f64, f64)> = case
        .buses
        .iter()
        .filter(|b| {
            let attached = case.loads.iter().any(|l| l.bus == b.id)
                || case.generators.iter().any(|g| g.bus == b.id);
            attached && b.lat.is_some() && b.lon.is_some()
        })
        .map(|b| (b.id, b.lat.unwrap(), b.lon.unwrap()))
        .collect();
    if candidates.is_empty() {
        return Err(AllocationError::NoMappableBuses);
    }
    candidates.sort_by_key(|c| c.0);
    let map = zip_centroids
        .iter()
        .map(|(zip, &(lat, lon))| {
            let mut best = (candidates[0].0, f64::INFINITY);
            for &(id, blat, blon) in &candidates {
                let d = haversine_km(lat, lon, blat, blon);
                if d < best.1 {
                    best = (id, d);
                }
            }
            (zip.clone(), best.0)
        })
        .collect();
    Ok(ZipBusMap {
        map,
        provenance: MapProvenance::NearestSubstation,
    })
}

/// Aggregates per-zip participants onto buses; capacity is exactly
/// vehicles x power / 1000 MW. Buses that end up with zero vehicles are
/// dropped.
pub fn allocate(
    participants: &BTreeMap<String, u64>,
    map: &ZipBusMap,
    power_per_vehicle_kw: f64,
) -> Result<V2GAllocation, AllocationError> {
    let mut vehicles_by_bus: BTreeMap<u32, u64> = BTreeMap::new();
    for (zip, count) in participants {
        let bus = map
            .map
            .get(zip)
            .ok_or_else(|| AllocationError::UnmappedZip(zip.clone()))?;
        *vehicles_by_bus.entry(*bus).or_insert(0) += count;
    }
    let buses = vehicles_by_bus
        .into_iter()
        .filter(|(_, v)| *v > 0)
        .map(|(bus, vehicles)| {
            (
                bus,
                BusCapacity {
                    vehicles,
                    capacity_mw: vehicles as f64 * power_per_vehicle_kw / 1000.0,
                },
            )
        })
        .collect();
    Ok(V2GAllocation {
        power_per_vehicle_kw,
        buses,
    })
}

#[derive(Debug, Deserialize)]
struct CentroidRow {
    zip: String,
    lat: f64,
    lon: f64,
}

/// Zip centroid CSV: zip,lat,lon.
pub fn load_centroids_csv<R: Read>(
    reader: R,
) -> Result<BTreeMap<String, (f64, f64)>, AllocationError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: CentroidRow = row?;
        out.insert(row.zip, (row.lat, row.lon));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct MapRow {
    zip: String,
    bus_id: u32,
}

/// Explicit zip-to-bus CSV: zip,bus_id. Always overrides the heuristic.
pub fn load_map_csv<R: Read>(reader: R) -> Result<ZipBusMap, AllocationError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut map = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: MapRow = row?;
        map.insert(row.zip, row.bus_id);
    }
    Ok(ZipBusMap {
        map,
        provenance: MapProvenance::ExplicitFile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;
    use crate::participation::ZipParticipation;

    fn rate(zip: &str, r: f64) -> ZipParticipation {
        ZipParticipation {
            zip: zip.to_string(),
            shares: [0.0; 5],
            participation_rate: r,
        }
    }

    #[test]
    fn participant_rounding_is_half_up() {
        let counts: BTreeMap<String, u64> = [
            ("a".to_string(), 1000),
            ("b".to_string(), 3),
            ("c".to_string(), 500),
        ]
        .into_iter()
        .collect();
        let rates = vec![rate("a", 0.5), rate("b", 0.25), rate("c", 0.0)];
        let p = participants(&counts, &rates).unwrap();
        assert_eq!(p["a"], 500);
        assert_eq!(p["b"], 1); // 0.75 rounds up
        assert_eq!(p["c"], 0);
    }

    #[test]
    fn missing_rate_names_the_zip() {
        let counts: BTreeMap<String, u64> = [("78799".to_string(), 10)].into_iter().collect();
        let err = participants(&counts, &[]).unwrap_err();
        assert!(err.to_string().contains("78799"));
    }

    fn coord_case() -> NetworkCase {
        parse_case(
            r#"{
                "base_mva": 100.0,
                "buses": [
                    {"id": 4, "role": "slack", "lat": 30.0, "lon": -97.0},
                    {"id": 9, "role": "pq", "lat": 30.0, "lon": -98.0},
                    {"id": 2, "role": "pq", "lat": 31.0, "lon": -97.5}
                ],
                "branches": [
                    {"from": 4, "to": 9, "r": 0.0, "x": 0.1},
                    {"from": 9, "to": 2, "r": 0.0, "x": 0.1}
                ],
                "generators": [{"id": 1, "bus": 4, "pmin": 0.0, "pmax": 100.0,
                                "qmin": -50.0, "qmax": 50.0, "c1": 10.0}],
                "loads": [{"id": 1, "bus": 9, "p": 10.0, "q": 1.0}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn equidistant_zip_takes_lowest_bus_id() {
        let case = coord_case();
        // bus 2 has no load or generator, so only buses 4 and 9 qualify;
        // this centroid is equidistant from both
        let centroids: BTreeMap<String, (f64, f64)> =
            [("78750".to_string(), (30.0, -97.5))].into_iter().collect();
        let map = nearest_substation_map(&centroids, &case).unwrap();
        assert_eq!(map.map["78750"], 4);
        assert_eq!(map.provenance, MapProvenance::NearestSubstation);
    }

    #[test]
    fn nearest_map_matches_brute_force() {
        let case = coord_case();
        let centroids: BTreeMap<String, (f64, f64)> = [
            ("z1".to_string(), (30.01, -97.02)),
            ("z2".to_string(), (29.95, -97.96)),
            ("z3".to_string(), (30.9, -97.4)),
        ]
        .into_iter()
        .collect();
        let map = nearest_substation_map(&centroids, &case).unwrap();
        for (zip, &(lat, lon)) in &centroids {
            let mut best = (0u32, f64::INFINITY);
            for b in &case.buses {
                if b.id == 2 {
                    continue; // nothing attached
                }
                let d = haversine_km(lat, lon, b.lat.unwrap(), b.lon.unwrap());
                if d < best.1 {
                    best = (b.id, d);
                }
            }
            assert_eq!(map.map[zip], best.0, "zip {zip}");
        }
    }

    #[test]
    fn no_coordinates_is_an_error() {
        let mut case = coord_case();
        for b in &mut case.buses {
            b.lat = None;
            b.lon = None;
        }
        let centroids: BTreeMap<String, (f64, f64)> =
            [("z".to_string(), (30.0, -97.0))].into_iter().collect();
        assert!(matches!(
            nearest_substation_map(&centroids, &case),
            Err(AllocationError::NoMappableBuses)
        ));
    }

    #[test]
    fn allocation_aggregates_and_scales() {
        let p: BTreeMap<String, u64> = [
            ("a".to_string(), 300),
            ("b".to_string(), 200),
            ("c".to_string(), 1000),
        ]
        .into_iter()
        .collect();
        let map = ZipBusMap {
            map: [
                ("a".to_string(), 5u32),
                ("b".to_string(), 5),
                ("c".to_string(), 7),
            ]
            .into_iter()
            .collect(),
            provenance: MapProvenance::ExplicitFile,
        };
        let alloc = allocate(&p, &map, 7.0).unwrap();
        assert_eq!(alloc.buses[&5].vehicles, 500);
        assert!((alloc.buses[&5].capacity_mw - 3.5).abs() < 1e-12);
        assert!((alloc.buses[&7].capacity_mw - 7.0).abs() < 1e-12);
        assert_eq!(alloc.total_vehicles(), 1500);

        // conservation and linearity in the per-vehicle power
        let alloc3 = allocate(&p, &map, 3.5).unwrap();
        for (bus, cap) in &alloc.buses {
            assert!((alloc3.buses[bus].capacity_mw - cap.capacity_mw / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_participants_empty_allocation() {
        let p: BTreeMap<String, u64> = [("a".to_string(), 0)].into_iter().collect();
        let map = ZipBusMap {
            map: [("a".to_string(), 5u32)].into_iter().collect(),
            provenance: MapProvenance::ExplicitFile,
        };
        let alloc = allocate(&p, &map, 7.0).unwrap();
        assert!(alloc.buses.is_empty());
    }

    #[test]
    fn unmapped_zip_is_an_error() {
        let p: BTreeMap<String, u64> = [("a".to_string(), 10)].into_iter().collect();
        let map = ZipBusMap {
            map: BTreeMap::new(),
            provenance: MapProvenance::ExplicitFile,
        };
        assert!(matches!(
            allocate(&p, &map, 7.0),
            Err(AllocationError::UnmappedZip(_))
        ));
    }

    #[test]
    fn haversine_sanity() {
        // Austin to Dallas is roughly 290 km
        let d = haversine_km(30.2672, -97.7431, 32.7767, -96.7970);
        assert!((d - 290.0).abs() < 15.0, "{d}");
        assert_eq!(haversine_km(30.0, -97.0, 30.0, -97.0), 0.0);
    }
}
