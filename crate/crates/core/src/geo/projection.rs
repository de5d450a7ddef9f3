use super::{LatLon, EARTH_RADIUS_M};

/// Spherical azimuthal equidistant projection about a center point, in
/// meters (x east, y north).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzimuthalEquidistant {
    center: LatLon,
    sin_phi0: f64,
    cos_phi0: f64,
}

impl AzimuthalEquidistant {
    pub fn new(center: LatLon) -> Self {
        let phi0 = center.lat.to_radians();
        Self {
            center,
            sin_phi0: phi0.sin(),
            cos_phi0: phi0.cos(),
        }
    }

    pub fn center(&self) -> LatLon {
        self.center
    }

    pub fn forward(&self, p: LatLon) -> [f64; 2] {
        let phi = p.lat.to_radians();
        let dlambda = (p.lon - self.center.lon).to_radians();
        let (sin_phi, cos_phi) = phi.sin_cos();
        // Angular distance via the haversine form, stable for small arcs.
        let dphi = phi - self.center.lat.to_radians();
        let h = (dphi / 2.0).sin().powi(2) + self.cos_phi0 * cos_phi * (dlambda / 2.0).sin().powi(2);
        let c = 2.0 * h.sqrt().min(1.0).asin();
        let k = if c < 1e-12 { 1.0 } else { c / c.sin() };
        let x = EARTH_RADIUS_M * k * cos_phi * dlambda.sin();
        let y = EARTH_RADIUS_M * k * (self.cos_phi0 * sin_phi - self.sin_phi0 * cos_phi * dlambda.cos());
        [x, y]
    }

    pub fn inverse(&self, [x, y]: [f64; 2]) -> LatLon {
        let rho = x.hypot(y);
        if rho < 1e-9 {
            return self.center;
        }
        let c = rho / EARTH_RADIUS_M;
        let (sin_c, cos_c) = c.sin_cos();
        let phi = (cos_c * self.sin_phi0 + y * sin_c * self.cos_phi0 / rho)
            .clamp(-1.0, 1.0)
            .asin();
        let lambda =
            self.center.lon.to_radians() + (x * sin_c).atan2(rho * self.cos_phi0 * cos_c - y * self.sin_phi0 * sin_c);
        LatLon::new(phi.to_degrees(), lambda.to_degrees())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_m;
    use proptest::prelude::*;

    #[test]
    fn center_maps_to_origin() {
        let proj = AzimuthalEquidistant::new(LatLon::new(47.5, 19.05));
        let [x, y] = proj.forward(LatLon::new(47.5, 19.05));
        assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn radial_distance_is_geodesic(dlat in -0.2f64..0.2, dlon in -0.3f64..0.3) {
            let center = LatLon::new(47.5, 19.05);
            let proj = AzimuthalEquidistant::new(center);
            let p = LatLon::new(47.5 + dlat, 19.05 + dlon);
            let [x, y] = proj.forward(p);
            prop_assert!((x.hypot(y) - haversine_m(center, p)).abs() < 1e-6);
            let back = proj.inverse([x, y]);
            prop_assert!((back.lat - p.lat).abs() < 1e-10);
            prop_assert!((back.lon - p.lon).abs() < 1e-10);
        }
    }
}
