//! Coordinates, query regions and POI entities pulled from an Overpass endpoint.

mod fetch;
mod overpass;

pub(crate) use fetch::write_atomic;
#[cfg(feature = "net")]
pub use fetch::HttpTransport;
pub use fetch::{cache_key, FetchError, HttpResponse, PoiFetcher, Transport, TransportError, ENDPOINT_ENV};
pub use overpass::{build_overpass_query, parse_overpass_response, OverpassError};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Meters per degree of latitude on the spherical model used for region sizing.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("latitude {0} is too close to a pole for a square region")]
    PolarLatitude(f64),
    #[error("side length must be positive, got {0} m")]
    InvalidSide(f64),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid query config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(r: RawPoint) -> Result<Self, GeoError> {
        GeoPoint::new(r.lat, r.lon)
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let ok = lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon);
        if !ok {
            return Err(GeoError::OutOfRange { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Axis-aligned region in degrees. Boxes crossing the antimeridian are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl BBox {
    pub fn new(south: f64, west: f64, north: f64, east: f64) -> Result<Self, GeoError> {
        let all_finite = [south, west, north, east].iter().all(|v| v.is_finite());
        if !all_finite || south >= north || west >= east {
            return Err(GeoError::InvalidBox(format!("({south}, {west}, {north}, {east})")));
        }
        if south < -90.0 || north > 90.0 || west < -180.0 || east > 180.0 {
            return Err(GeoError::InvalidBox(format!(
                "({south}, {west}, {north}, {east}) leaves the coordinate range"
            )));
        }
        Ok(Self { south, west, north, east })
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.south + self.north) / 2.0, (self.west + self.east) / 2.0)
    }

    /// Strict containment on all four sides.
    pub fn strictly_contains(&self, other: &BBox) -> bool {
        self.south < other.south && self.west < other.west && self.north > other.north && self.east > other.east
    }

    /// `south,west,north,east` with 7 decimals, the Overpass bbox order.
    pub fn overpass_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:.7},{:.7},{:.7},{:.7}", self.south, self.west, self.north, self.east);
        s
    }
}

/// Square region of side `side_m` centred on `p`, using a per-axis flat-earth conversion.
pub fn bbox_from_center(p: GeoPoint, side_m: f64) -> Result<BBox, GeoError> {
    if !(side_m > 0.0) || !side_m.is_finite() {
        return Err(GeoError::InvalidSide(side_m));
    }
    if p.lat.abs() >= 89.0 {
        return Err(GeoError::PolarLatitude(p.lat));
    }
    let half = side_m / 2.0;
    let dlat = half / METERS_PER_DEGREE;
    let dlon = half / (METERS_PER_DEGREE * p.lat.to_radians().cos());
    BBox::new(p.lat - dlat, p.lon - dlon, p.lat + dlat, p.lon + dlon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiEntity {
    pub osm_id: i64,
    /// `node`, `way` or `relation`.
    pub element_type: String,
    pub matched_key: String,
    pub matched_value: String,
    pub tags: BTreeMap<String, String>,
    pub center: Option<GeoPoint>,
}

pub const DEFAULT_FEATURE_KEYS: [&str; 11] = [
    "landuse", "amenity", "natural", "highway", "building", "leisure", "shop", "tourism", "railway", "waterway",
    "aeroway",
];

pub const DEFAULT_ENDPOINT: &str = "https://overpass-api.de/api/interpreter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GscQueryConfig {
    pub side_m: f64,
    pub feature_keys: Vec<String>,
    pub endpoint: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub min_request_interval_s: f64,
    /// First retry delay; doubles on each further attempt.
    pub backoff_base_s: f64,
    pub cache_dir: PathBuf,
    /// Ignore cached bodies and query again.
    pub force_refetch: bool,
}

impl Default for GscQueryConfig {
    fn default() -> Self {
        Self {
            side_m: 1000.0,
            feature_keys: DEFAULT_FEATURE_KEYS.iter().map(|s| s.to_string()).collect(),
            endpoint: DEFAULT_ENDPOINT.to_string(),
            timeout_s: 60.0,
            max_retries: 3,
            min_request_interval_s: 1.0,
            backoff_base_s: 2.0,
            cache_dir: PathBuf::from("cache/overpass"),
            force_refetch: false,
        }
    }
}

impl GscQueryConfig {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.side_m > 0.0) {
            return Err(GeoError::InvalidSide(self.side_m));
        }
        if self.feature_keys.is_empty() {
            return Err(GeoError::InvalidConfig("feature_keys is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for k in &self.feature_keys {
            if k.is_empty() || !seen.insert(k) {
                return Err(GeoError::InvalidConfig(format!("feature key {k:?} is empty or repeated")));
            }
        }
        if self.timeout_s <= 0.0 || self.min_request_interval_s < 0.0 || self.backoff_base_s < 0.0 {
            return Err(GeoError::InvalidConfig("negative timing parameter".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equator_box_is_one_degree() {
        let b = bbox_from_center(GeoPoint::new(0.0, 0.0).unwrap(), 222_640.0).unwrap();
        assert_eq!((b.south, b.west, b.north, b.east), (-1.0, -1.0, 1.0, 1.0));
    }

    #[test]
    fn sixty_north_oracle() {
        // Spherical meters-per-degree: Δlat = 500 / 111320, Δlon = Δlat / cos 60° = 2Δlat.
        let b = bbox_from_center(GeoPoint::new(60.0, 10.0).unwrap(), 1000.0).unwrap();
        let dlat = (b.north - b.south) / 2.0;
        let dlon = (b.east - b.west) / 2.0;
        assert!((dlat - 0.004_491_556).abs() < 1e-8, "{dlat}");
        assert!((dlon - 0.008_983_111).abs() < 1e-8, "{dlon}");
    }

    #[test]
    fn polar_and_side_errors() {
        let p = GeoPoint::new(89.5, 0.0).unwrap();
        assert_eq!(bbox_from_center(p, 1000.0), Err(GeoError::PolarLatitude(89.5)));
        let q = GeoPoint::new(1.0, 1.0).unwrap();
        assert_eq!(bbox_from_center(q, 0.0), Err(GeoError::InvalidSide(0.0)));
        assert_eq!(bbox_from_center(q, -5.0), Err(GeoError::InvalidSide(-5.0)));
    }

    #[test]
    fn point_and_box_validation() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 179.0, 1.0, 181.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = GscQueryConfig::default();
        assert_eq!(cfg.feature_keys.len(), 11);
        cfg.validate().unwrap();
        cfg.feature_keys.push("amenity".into());
        assert!(cfg.validate().is_err());
        cfg.feature_keys.clear();
        assert!(cfg.validate().is_err());
    }
}
