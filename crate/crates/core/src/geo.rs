//! Web Mercator projection, haversine distance and per-city coordinate
//! normalization.
//!
//! Mercator coordinates use the spherical "Web Mercator" form with
//! `R = 20 037 508.34 m` (half the equatorial circumference) mapped to 180°.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half the Earth's circumference in Web Mercator meters.
pub const HALF_CIRCUMFERENCE_M: f64 = 20_037_508.34;
/// Degrees spanned by `HALF_CIRCUMFERENCE_M`.
pub const HALF_TURN_DEG: f64 = 180.0;
/// Mean Earth radius used by [`geodesic_distance`].
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Latitude at which `y = ±R`.
pub const MAX_LAT_DEG: f64 = 85.051_128_779_806_6;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("coordinate ({lon}, {lat}) outside the Mercator-valid band")]
    OutOfBand { lon: f64, lat: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("normalization needs at least two records, got {0}")]
    TooFewRecords(usize),
    #[error("degenerate variance on the {0} axis")]
    DegenerateVariance(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        let p = Self { lon, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !self.lon.is_finite() || !self.lat.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if self.lon.abs() > 180.0 || self.lat.abs() > MAX_LAT_DEG {
            return Err(GeoError::OutOfBand { lon: self.lon, lat: self.lat });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MercatorPoint {
    pub x: f64,
    pub y: f64,
}

impl MercatorPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &MercatorPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

pub fn to_mercator(p: GeoPoint) -> Result<MercatorPoint, GeoError> {
    p.validate()?;
    let k = HALF_CIRCUMFERENCE_M / HALF_TURN_DEG;
    let x = p.lon * k;
    let lat_rad = p.lat.to_radians();
    // ln(tan(pi/4 + lat/2)) == atanh(sin(lat)), which is exact at the equator.
    // The log term is in radians; convert to degrees before scaling like x.
    let y = lat_rad.sin().atanh().to_degrees() * k;
    Ok(MercatorPoint { x, y })
}

pub fn from_mercator(m: MercatorPoint) -> GeoPoint {
    let k = HALF_TURN_DEG / HALF_CIRCUMFERENCE_M;
    let lon = m.x * k;
    // 2*atan(exp(t)) - pi/2 == atan(sinh(t))
    let lat = (m.y * k).to_radians().sinh().atan().to_degrees();
    GeoPoint { lon, lat }
}

/// Local length inflation `1 / cos(lat)` of the projection.
pub fn mercator_scale_factor(lat_deg: f64) -> Result<f64, GeoError> {
    if !lat_deg.is_finite() {
        return Err(GeoError::NonFinite);
    }
    if lat_deg.abs() >= MAX_LAT_DEG {
        return Err(GeoError::OutOfBand { lon: 0.0, lat: lat_deg });
    }
    Ok(1.0 / lat_deg.to_radians().cos())
}

/// Haversine great-circle distance in meters.
pub fn geodesic_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Mercator-plane distance divided by the scale factor at the mid latitude.
pub fn scale_corrected_distance(a: GeoPoint, b: GeoPoint) -> Result<f64, GeoError> {
    let d = to_mercator(a)?.distance(&to_mercator(b)?);
    Ok(d / mercator_scale_factor((a.lat + b.lat) / 2.0)?)
}

/// Per-axis mean and population standard deviation of visit coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
}

impl NormStats {
    pub fn validate(&self) -> Result<(), GeoError> {
        let all = [self.mean_x, self.mean_y, self.std_x, self.std_y];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if self.std_x <= 0.0 {
            return Err(GeoError::DegenerateVariance("x"));
        }
        if self.std_y <= 0.0 {
            return Err(GeoError::DegenerateVariance("y"));
        }
        Ok(())
    }

    pub fn normalize(&self, m: MercatorPoint) -> [f64; 2] {
        [(m.x - self.mean_x) / self.std_x, (m.y - self.mean_y) / self.std_y]
    }

    pub fn denormalize(&self, n: [f64; 2]) -> MercatorPoint {
        MercatorPoint { x: n[0] * self.std_x + self.mean_x, y: n[1] * self.std_y + self.mean_y }
    }

    pub fn scale(&self) -> [f64; 2] {
        [self.std_x, self.std_y]
    }

    pub fn offset(&self) -> [f64; 2] {
        [self.mean_x, self.mean_y]
    }
}

/// Two-pass mean / population variance over every record.
pub fn fit_norm_stats<'a, I>(records: I) -> Result<NormStats, GeoError>
where
    I: IntoIterator<Item = &'a MercatorPoint>,
    I::IntoIter: Clone,
{
    let it = records.into_iter();
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in it.clone() {
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(GeoError::NonFinite);
        }
        n += 1;
        sx += p.x;
        sy += p.y;
    }
    if n < 2 {
        return Err(GeoError::TooFewRecords(n));
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut vx, mut vy) = (0.0, 0.0);
    for p in it {
        vx += (p.x - mx) * (p.x - mx);
        vy += (p.y - my) * (p.y - my);
    }
    let stats = NormStats {
        mean_x: mx,
        mean_y: my,
        std_x: (vx / n as f64).sqrt(),
        std_y: (vy / n as f64).sqrt(),
    };
    // A spread this small relative to the magnitude is rounding noise.
    let floor = |m: f64| 1e-12 * m.abs().max(1.0);
    if stats.std_x <= floor(mx) {
        return Err(GeoError::DegenerateVariance("x"));
    }
    if stats.std_y <= floor(my) {
        return Err(GeoError::DegenerateVariance("y"));
    }
    Ok(stats)
}

/// Half the Earth's circumference on the haversine sphere.
pub fn half_circumference_sphere() -> f64 {
    PI * EARTH_RADIUS_M
}
