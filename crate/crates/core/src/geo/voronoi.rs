//! Bounded Voronoi cells by successive half-plane clipping.
//!
//! Each cell starts as the convex clip region and is cut by the bisector
//! against every other site, nearest first. Once the nearest remaining site
//! is more than twice as far as the cell's farthest vertex, no later bisector
//! can reach the cell and the loop stops.

use std::collections::HashSet;

use serde_json::{json, Map, Value};

use super::{AzimuthalEquidistant, BaseStation, BoundingBox, LatLon};
use crate::error::{Error, Result};
use crate::par;

pub type Point = [f64; 2];

/// Keeps the part of `poly` at least as close to `site` as to `other`.
pub fn clip_half_plane(poly: &[Point], site: Point, other: Point) -> Vec<Point> {
    let n = [other[0] - site[0], other[1] - site[1]];
    let mid = [(site[0] + other[0]) / 2.0, (site[1] + other[1]) / 2.0];
    let side = |p: &Point| (p[0] - mid[0]) * n[0] + (p[1] - mid[1]) * n[1];

    let mut out = Vec::with_capacity(poly.len() + 1);
    for (i, a) in poly.iter().enumerate() {
        let b = &poly[(i + 1) % poly.len()];
        let (sa, sb) = (side(a), side(b));
        if sa <= 0.0 {
            out.push(*a);
        }
        if (sa < 0.0 && sb > 0.0) || (sa > 0.0 && sb < 0.0) {
            let t = sa / (sa - sb);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Area of a simple polygon given as an open or closed ring.
pub fn polygon_area(ring: &[Point]) -> f64 {
    signed_area(ring).abs()
}

/// Even-odd point-in-polygon test. Boundary points may go either way.
pub fn polygon_contains(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn voronoi_cell(sites: &[Point], i: usize, clip: &[Point]) -> Vec<Point> {
    let site = sites[i];
    let mut others: Vec<(f64, usize)> = sites
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, s)| (dist2(site, *s), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let reach2 = |poly: &[Point]| poly.iter().map(|v| dist2(site, *v)).fold(0.0, f64::max);
    let mut poly = clip.to_vec();
    let mut reach = reach2(&poly);
    for (d2, j) in others {
        // Bisector is at distance d/2; beyond the farthest vertex it cannot cut.
        if d2 / 4.0 > reach {
            break;
        }
        poly = clip_half_plane(&poly, site, sites[j]);
        if poly.is_empty() {
            break;
        }
        reach = reach2(&poly);
    }
    poly
}

/// Voronoi cells of `sites` clipped to the convex polygon `clip`.
///
/// Returns one open ring per site, counter-clockwise, in site order.
pub fn voronoi_planar(sites: &[Point], clip: &[Point]) -> Result<Vec<Vec<Point>>> {
    if sites.is_empty() {
        return Err(Error::Argument("Voronoi needs at least one site".into()));
    }
    if clip.len() < 3 || signed_area(clip).abs() == 0.0 {
        return Err(Error::Argument("clip region must be a non-degenerate polygon".into()));
    }
    let mut clip = clip.to_vec();
    if signed_area(&clip) < 0.0 {
        clip.reverse();
    }
    let mut seen = HashSet::with_capacity(sites.len());
    for s in sites {
        if !seen.insert((s[0].to_bits(), s[1].to_bits())) {
            return Err(Error::Consistency(format!("duplicate Voronoi site {s:?}")));
        }
        if !polygon_contains(&clip, *s) {
            return Err(Error::Argument(format!("site {s:?} lies outside the clip region")));
        }
    }
    Ok(par::map_range(sites.len(), |i| voronoi_cell(sites, i, &clip)))
}

/// One station's service-area polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct VoronoiCellPolygon {
    pub station_id: u32,
    /// Closed ring of `(lat, lon)` vertices, counter-clockwise.
    pub ring: Vec<LatLon>,
}

/// Voronoi cells in both geographic and projected form.
#[derive(Debug, Clone)]
pub struct Tessellation {
    pub projection: AzimuthalEquidistant,
    pub bbox: BoundingBox,
    /// The bounding box corners in projected meters.
    pub clip: Vec<Point>,
    pub cells: Vec<VoronoiCellPolygon>,
    /// Open projected rings, parallel to `cells`.
    pub planar: Vec<Vec<Point>>,
}

/// Voronoi polygons around station sites, computed in an azimuthal
/// equidistant projection centered on the bounding box and clipped to it.
pub fn voronoi(stations: &[BaseStation], bbox: &BoundingBox) -> Result<Tessellation> {
    bbox.validate()?;
    if stations.is_empty() {
        return Err(Error::Argument("Voronoi needs at least one station".into()));
    }
    let mut seen = HashSet::with_capacity(stations.len());
    for s in stations {
        if !seen.insert((s.lat, s.lon)) {
            return Err(Error::Consistency(format!(
                "station {} shares its site with another station",
                s.station_id
            )));
        }
        if !bbox.contains_strictly(s.site()) {
            return Err(Error::Argument(format!(
                "station {} at {}, {} is not inside the bounding box",
                s.station_id, s.lat, s.lon
            )));
        }
    }
    let projection = AzimuthalEquidistant::new(bbox.center());
    let clip: Vec<Point> = bbox.corners().iter().map(|&c| projection.forward(c)).collect();
    let sites: Vec<Point> = stations.iter().map(|s| projection.forward(s.site())).collect();
    let planar = voronoi_planar(&sites, &clip)?;
    let cells = stations
        .iter()
        .zip(&planar)
        .map(|(s, ring)| {
            let mut geo: Vec<LatLon> = ring.iter().map(|&p| projection.inverse(p)).collect();
            if let Some(&first) = geo.first() {
                geo.push(first);
            }
            VoronoiCellPolygon {
                station_id: s.station_id,
                ring: geo,
            }
        })
        .collect();
    Ok(Tessellation {
        projection,
        bbox: *bbox,
        clip,
        cells,
        planar,
    })
}

/// GeoJSON FeatureCollection with one polygon feature per station. Each
/// feature carries `station_id` plus whatever `extra` returns for it.
pub fn voronoi_geojson<F>(cells: &[VoronoiCellPolygon], mut extra: F) -> Value
where
    F: FnMut(u32) -> Map<String, Value>,
{
    let features: Vec<Value> = cells
        .iter()
        .map(|c| {
            let mut props = Map::new();
            props.insert("station_id".into(), json!(c.station_id));
            props.extend(extra(c.station_id));
            let coords: Vec<Value> = c.ring.iter().map(|p| json!([p.lon, p.lat])).collect();
            json!({
                "type": "Feature",
                "properties": props,
                "geometry": { "type": "Polygon", "coordinates": [coords] },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::MicroDegrees;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQUARE: [Point; 4] = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];

    #[test]
    fn single_site_gets_whole_region() {
        let cells = voronoi_planar(&[[3.0, 4.0]], &SQUARE).unwrap();
        assert_eq!(cells[0], SQUARE.to_vec());
    }

    #[test]
    fn two_symmetric_sites_split_on_bisector() {
        let cells = voronoi_planar(&[[2.5, 5.0], [7.5, 5.0]], &SQUARE).unwrap();
        assert!((polygon_area(&cells[0]) - 50.0).abs() < 1e-12);
        assert!((polygon_area(&cells[1]) - 50.0).abs() < 1e-12);
        assert!(cells[0].iter().all(|p| p[0] <= 5.0));
        assert!(cells[1].iter().all(|p| p[0] >= 5.0));
    }

    #[test]
    fn duplicate_and_outside_sites_rejected() {
        assert!(matches!(
            voronoi_planar(&[[1.0, 1.0], [1.0, 1.0]], &SQUARE),
            Err(Error::Consistency(_))
        ));
        assert!(voronoi_planar(&[[11.0, 1.0]], &SQUARE).is_err());
        assert!(voronoi_planar(&[], &SQUARE).is_err());
    }

    #[test]
    fn clockwise_clip_accepted() {
        let mut cw = SQUARE.to_vec();
        cw.reverse();
        let cells = voronoi_planar(&[[2.0, 2.0], [8.0, 8.0]], &cw).unwrap();
        let total: f64 = cells.iter().map(|c| polygon_area(c)).sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn random_sites_tile_and_own() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sites: Vec<Point> = (0..40)
            .map(|_| [rng.gen_range(0.1..9.9), rng.gen_range(0.1..9.9)])
            .collect();
        let cells = voronoi_planar(&sites, &SQUARE).unwrap();
        let total: f64 = cells.iter().map(|c| polygon_area(c)).sum();
        assert!((total - 100.0).abs() / 100.0 < 1e-9);
        for _ in 0..500 {
            let p = [rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)];
            let nearest = (0..sites.len())
                .min_by(|&a, &b| dist2(p, sites[a]).total_cmp(&dist2(p, sites[b])))
                .unwrap();
            assert!(polygon_contains(&cells[nearest], p));
        }
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
    fn geographic_single_station_is_bbox() {
        let bbox = BoundingBox::new(47.45, 47.55, 18.95, 19.15).unwrap();
        let t = voronoi(&[station(0, 47.5, 19.05)], &bbox).unwrap();
        let ring = &t.cells[0].ring;
        assert_eq!(ring.len(), 5);
        assert_eq!(ring.first(), ring.last());
        for (v, c) in ring.iter().zip(bbox.corners()) {
            assert!((v.lat - c.lat).abs() < 1e-9 && (v.lon - c.lon).abs() < 1e-9);
        }
    }

    #[test]
    fn geographic_errors() {
        let bbox = BoundingBox::new(47.45, 47.55, 18.95, 19.15).unwrap();
        assert!(voronoi(&[], &bbox).is_err());
        assert!(voronoi(&[station(0, 47.6, 19.05)], &bbox).is_err());
        let dup = [station(0, 47.5, 19.05), station(1, 47.5, 19.05)];
        assert!(matches!(voronoi(&dup, &bbox), Err(Error::Consistency(_))));
    }

    #[test]
    fn geojson_shape() {
        let bbox = BoundingBox::new(47.45, 47.55, 18.95, 19.15).unwrap();
        let t = voronoi(&[station(4, 47.5, 19.0), station(9, 47.5, 19.1)], &bbox).unwrap();
        let gj = voronoi_geojson(&t.cells, |_| Map::new());
        assert_eq!(gj["features"].as_array().unwrap().len(), 2);
        assert_eq!(gj["features"][1]["properties"]["station_id"], 9);
        let first = &gj["features"][0]["geometry"]["coordinates"][0];
        assert_eq!(first[0], first[first.as_array().unwrap().len() - 1]);
    }
}
