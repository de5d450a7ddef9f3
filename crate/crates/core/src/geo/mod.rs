//! Base stations, geodesic distance, buffer selection and bounded Voronoi
//! tessellation.

mod projection;
mod voronoi;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use projection::AzimuthalEquidistant;
pub use voronoi::{
    clip_half_plane, polygon_area, polygon_contains, voronoi, voronoi_geojson, voronoi_planar, Point, Tessellation,
    VoronoiCellPolygon,
};

use crate::error::{Error, Result};
use crate::ingest::{CdrRecord, Cell, MicroDegrees};
use crate::par;

/// Mean Earth radius used for all great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// All cells sharing one site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseStation {
    pub station_id: u32,
    pub lat: MicroDegrees,
    pub lon: MicroDegrees,
    pub member_cell_ids: Vec<u32>,
}

impl BaseStation {
    pub fn site(&self) -> LatLon {
        LatLon::new(self.lat.degrees(), self.lon.degrees())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellMerge {
    pub stations: Vec<BaseStation>,
    /// Indexed by cell id.
    pub cell_to_station: Vec<u32>,
}

/// Groups cells with identical truncated coordinates into base stations.
///
/// Station ids are dense and follow the first appearance of each site in
/// cell-id order.
pub fn merge_cells(cells: &[Cell]) -> CellMerge {
    let mut by_site: HashMap<(MicroDegrees, MicroDegrees), u32> = HashMap::new();
    let mut merge = CellMerge::default();
    let mut ordered: Vec<&Cell> = cells.iter().collect();
    ordered.sort_by_key(|c| c.cell_id);
    merge.cell_to_station = vec![u32::MAX; cells.len()];
    for cell in ordered {
        let next = merge.stations.len() as u32;
        let station_id = *by_site.entry((cell.lat, cell.lon)).or_insert(next);
        if station_id == next {
            merge.stations.push(BaseStation {
                station_id,
                lat: cell.lat,
                lon: cell.lon,
                member_cell_ids: Vec::new(),
            });
        }
        merge.stations[station_id as usize].member_cell_ids.push(cell.cell_id);
        let slot = cell.cell_id as usize;
        if slot >= merge.cell_to_station.len() {
            merge.cell_to_station.resize(slot + 1, u32::MAX);
        }
        merge.cell_to_station[slot] = station_id;
    }
    merge
}

/// Rewrites each record's cell id to its station id.
pub fn remap_cdr_cells(cdrs: &[CdrRecord], cell_to_station: &[u32]) -> Result<Vec<CdrRecord>> {
    let parts = par::map_chunks(cdrs, par::CHUNK_ROWS, |chunk| {
        chunk
            .iter()
            .map(|r| match cell_to_station.get(r.cell_id as usize) {
                Some(&s) if s != u32::MAX => Ok(CdrRecord { cell_id: s, ..*r }),
                _ => Err(Error::Consistency(format!("cell {} has no base station", r.cell_id))),
            })
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(cdrs.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Seed geometry of the event area plus the buffer radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGeometry {
    #[serde(default)]
    pub seed_station_ids: Vec<u32>,
    /// `[lat, lon]` vertices.
    #[serde(default)]
    pub seed_polyline: Vec<[f64; 2]>,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
}

fn default_radius() -> f64 {
    250.0
}

impl SeedGeometry {
    pub fn stations(ids: impl IntoIterator<Item = u32>, radius_m: f64) -> Self {
        Self {
            seed_station_ids: ids.into_iter().collect(),
            seed_polyline: Vec::new(),
            radius_m,
        }
    }

    /// Seed station sites followed by polyline vertices.
    pub fn points(&self, stations: &[BaseStation]) -> Result<Vec<LatLon>> {
        let mut points = Vec::with_capacity(self.seed_station_ids.len() + self.seed_polyline.len());
        for &id in &self.seed_station_ids {
            let station = stations
                .iter()
                .find(|s| s.station_id == id)
                .ok_or_else(|| Error::Argument(format!("seed station {id} does not exist")))?;
            points.push(station.site());
        }
        points.extend(self.seed_polyline.iter().map(|&[lat, lon]| LatLon::new(lat, lon)));
        Ok(points)
    }
}

/// Seed stations plus every station within `radius_m` of a seed point.
pub fn select_buffer_stations(stations: &[BaseStation], seeds: &SeedGeometry) -> Result<BTreeSet<u32>> {
    if !(seeds.radius_m > 0.0 && seeds.radius_m.is_finite()) {
        return Err(Error::Argument(format!(
            "radius must be positive, got {}",
            seeds.radius_m
        )));
    }
    let points = seeds.points(stations)?;
    if points.is_empty() {
        return Err(Error::Argument("seed geometry is empty".into()));
    }
    let near = par::map(stations, |s| {
        let site = s.site();
        points.iter().any(|&p| haversine_m(site, p) <= seeds.radius_m)
    });
    let mut selected: BTreeSet<u32> = seeds.seed_station_ids.iter().copied().collect();
    selected.extend(stations.iter().zip(near).filter(|(_, n)| *n).map(|(s, _)| s.station_id));
    Ok(selected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self> {
        let b = Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_lat, self.max_lat, self.min_lon, self.max_lon]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.min_lat >= self.max_lat || self.min_lon >= self.max_lon {
            return Err(Error::Argument(format!("degenerate bounding box {self:?}")));
        }
        if self.min_lat < -90.0 || self.max_lat > 90.0 || self.min_lon < -180.0 || self.max_lon > 180.0 {
            return Err(Error::Argument(format!("bounding box outside the globe {self:?}")));
        }
        Ok(())
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: LatLon) -> bool {
        p.lat > self.min_lat && p.lat < self.max_lat && p.lon > self.min_lon && p.lon < self.max_lon
    }

    pub fn center(&self) -> LatLon {
        LatLon::new((self.min_lat + self.max_lat) / 2.0, (self.min_lon + self.max_lon) / 2.0)
    }

    /// Corners counter-clockwise from south-west.
    pub fn corners(&self) -> [LatLon; 4] {
        [
            LatLon::new(self.min_lat, self.min_lon),
            LatLon::new(self.min_lat, self.max_lon),
            LatLon::new(self.max_lat, self.max_lon),
            LatLon::new(self.max_lat, self.min_lon),
        ]
    }

    /// Smallest box around `sites`, widened by `pad_m` meters on every side.
    pub fn around(sites: &[LatLon], pad_m: f64) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Argument("no sites to bound".into()));
        }
        let mut b = Self {
            min_lat: f64::INFINITY,
            max_lat: f64::NEG_INFINITY,
            min_lon: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
        };
        for s in sites {
            b.min_lat = b.min_lat.min(s.lat);
            b.max_lat = b.max_lat.max(s.lat);
            b.min_lon = b.min_lon.min(s.lon);
            b.max_lon = b.max_lon.max(s.lon);
        }
        let pad_lat = (pad_m / EARTH_RADIUS_M).to_degrees();
        let mid = b.center().lat.to_radians().cos().max(1e-6);
        let pad_lon = pad_lat / mid;
        b.min_lat = (b.min_lat - pad_lat).max(-90.0);
        b.max_lat = (b.max_lat + pad_lat).min(90.0);
        b.min_lon = (b.min_lon - pad_lon).max(-180.0);
        b.max_lon = (b.max_lon + pad_lon).min(180.0);
        b.validate()?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(id: u32, lat: f64, lon: f64) -> Cell {
        Cell {
            cell_id: id,
            lat: MicroDegrees::from_degrees(lat),
            lon: MicroDegrees::from_degrees(lon),
        }
    }

    #[test]
    fn haversine_identity_and_equator_degree() {
        let p = LatLon::new(47.5, 19.05);
        assert_eq!(haversine_m(p, p), 0.0);
        // Closed-form arc length of one degree: 2*pi*R/360.
        let arc = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 360.0;
        let d = haversine_m(LatLon::new(0.0, 0.0), LatLon::new(0.0, 1.0));
        assert!((d - arc).abs() < 1e-6);
        assert!((d - 111_194.9).abs() <= 0.1);
    }

    #[test]
    fn haversine_symmetric() {
        let a = LatLon::new(47.49, 19.03);
        let b = LatLon::new(47.51, 19.07);
        assert_eq!(haversine_m(a, b), haversine_m(b, a));
        assert!(haversine_m(a, b) > 0.0);
    }

    #[test]
    fn haversine_meridian_arc() {
        // Along a meridian the great-circle distance is R * delta_lat exactly.
        let d = haversine_m(LatLon::new(47.0, 19.0), LatLon::new(48.0, 19.0));
        assert!((d - EARTH_RADIUS_M * 1f64.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn colocated_cells_merge() {
        let cells = [cell(0, 47.5, 19.05), cell(1, 47.5, 19.05), cell(2, 47.51, 19.06)];
        let m = merge_cells(&cells);
        assert_eq!(m.stations.len(), 2);
        assert_eq!(m.cell_to_station, vec![0, 0, 1]);
        assert_eq!(m.stations[0].member_cell_ids, vec![0, 1]);
    }

    #[test]
    fn distinct_cells_stay_distinct() {
        let cells: Vec<Cell> = (0..20).map(|i| cell(i, 47.0 + f64::from(i) * 0.001, 19.0)).collect();
        let m = merge_cells(&cells);
        assert_eq!(m.stations.len(), cells.len());
        assert_eq!(m.cell_to_station, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn remap_conserves_counts() {
        let cells = [cell(0, 47.5, 19.05), cell(1, 47.5, 19.05)];
        let m = merge_cells(&cells);
        let mut cdrs = Vec::new();
        for i in 0..25 {
            cdrs.push(CdrRecord {
                ts: i,
                device_id: 0,
                cell_id: u32::from(i >= 10),
                tac: 1,
            });
        }
        let out = remap_cdr_cells(&cdrs, &m.cell_to_station).unwrap();
        assert_eq!(out.len(), 25);
        assert!(out.iter().all(|r| r.cell_id == 0));

        let identity: Vec<u32> = vec![0, 1];
        assert_eq!(remap_cdr_cells(&cdrs, &identity).unwrap(), cdrs);
    }

    #[test]
    fn remap_rejects_unmapped_cells() {
        let cdrs = [CdrRecord {
            ts: 0,
            device_id: 0,
            cell_id: 7,
            tac: 1,
        }];
        assert!(matches!(remap_cdr_cells(&cdrs, &[0]), Err(Error::Consistency(_))));
    }

    fn station(id: u32, lat: f64, lon: f64) -> BaseStation {
        BaseStation {
            station_id: id,
            lat: MicroDegrees::from_degrees(lat),
            lon: MicroDegrees::from_degrees(lon),
            member_cell_ids: vec![id],
        }
    }

    #[test]
    fn buffer_threshold() {
        // 1 micro-degree of latitude is ~0.111 m, so step north until the
        // haversine distance crosses 250 m.
        let seed = station(0, 47.5, 19.05);
        let mut inside = 47.5;
        while haversine_m(seed.site(), LatLon::new(inside + 1e-6, 19.05)) <= 250.0 {
            inside += 1e-6;
        }
        let stations = vec![
            seed.clone(),
            station(1, 47.5, 19.05 + 1e-6),
            station(2, inside, 19.05),
            station(3, 47.5 + (251.0 / EARTH_RADIUS_M).to_degrees(), 19.05),
        ];
        let far = haversine_m(seed.site(), stations[3].site());
        assert!(far > 250.0, "{far}");
        let sel = select_buffer_stations(&stations, &SeedGeometry::stations([0], 250.0)).unwrap();
        assert!(sel.contains(&0) && sel.contains(&1));
        assert_eq!(sel.contains(&2), haversine_m(seed.site(), stations[2].site()) <= 250.0);
        assert!(!sel.contains(&3));
    }

    #[test]
    fn buffer_argument_errors() {
        let stations = vec![station(0, 47.5, 19.05)];
        assert!(select_buffer_stations(&stations, &SeedGeometry::stations([], 250.0)).is_err());
        assert!(select_buffer_stations(&stations, &SeedGeometry::stations([0], 0.0)).is_err());
        assert!(select_buffer_stations(&stations, &SeedGeometry::stations([9], 250.0)).is_err());
    }

    #[test]
    fn polyline_seeds_select_nearby() {
        let stations = vec![station(0, 47.5, 19.05), station(1, 47.52, 19.05)];
        let seeds = SeedGeometry {
            seed_station_ids: vec![],
            seed_polyline: vec![[47.5201, 19.05]],
            radius_m: 250.0,
        };
        let sel = select_buffer_stations(&stations, &seeds).unwrap();
        assert_eq!(sel.into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn seed_config_parses() {
        let s: SeedGeometry =
            serde_json::from_str(r#"{ "seed_station_ids": [1,2], "seed_polyline": [[47.5,19.04]], "radius_m": 250 }"#)
                .unwrap();
        assert_eq!(s.seed_station_ids, vec![1, 2]);
        assert_eq!(s.radius_m, 250.0);
    }

    #[test]
    fn bbox_validation() {
        assert!(BoundingBox::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 1.0, 2.0, 1.0).is_err());
        let b = BoundingBox::around(&[LatLon::new(47.5, 19.0), LatLon::new(47.6, 19.1)], 500.0).unwrap();
        assert!(b.contains_strictly(LatLon::new(47.5, 19.0)));
        assert!(b.min_lat < 47.5 - 0.004);
    }
}
