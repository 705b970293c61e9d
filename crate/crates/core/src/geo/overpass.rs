use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

use super::{BBox, GeoPoint, PoiEntity};

/// Server-side timeout written into every query.
const QUERY_TIMEOUT_S: u32 = 60;
const ELEMENT_KINDS: [&str; 3] = ["node", "way", "relation"];

/// Overpass QL requesting every node, way and relation carrying one of `keys` inside `bbox`,
/// as JSON with tags and center geometry. Output is byte-stable for identical inputs.
pub fn build_overpass_query(bbox: &BBox, keys: &[String]) -> String {
    let area = bbox.overpass_text();
    let mut q = String::new();
    let _ = writeln!(q, "[out:json][timeout:{QUERY_TIMEOUT_S}];");
    q.push_str("(\n");
    for key in keys {
        let escaped = key.replace('\\', "\\\\").replace('"', "\\\"");
        for kind in ELEMENT_KINDS {
            let _ = writeln!(q, "  {kind}[\"{escaped}\"]({area});");
        }
    }
    q.push_str(");\nout center tags;\n");
    q
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OverpassError {
    #[error("malformed Overpass JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("element #{index} lacks field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("element #{index} has an invalid coordinate")]
    BadCoordinate { index: usize },
}

#[derive(Deserialize)]
struct Document {
    elements: Option<Vec<Element>>,
}

#[derive(Deserialize)]
struct Element {
    #[serde(rename = "type")]
    kind: Option<String>,
    id: Option<i64>,
    lat: Option<f64>,
    lon: Option<f64>,
    center: Option<Center>,
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct Center {
    lat: f64,
    lon: f64,
}

fn byte_offset(body: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in body.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(body.len());
        }
        offset += l.len() + 1;
    }
    body.len()
}

/// One entity per (element, configured key) pair, in document order then key order.
/// Elements carrying none of the keys are dropped.
pub fn parse_overpass_response(body: &[u8], keys: &[String]) -> Result<Vec<PoiEntity>, OverpassError> {
    let doc: Document = serde_json::from_slice(body).map_err(|e| OverpassError::Parse {
        offset: byte_offset(body, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let elements = doc.elements.ok_or(OverpassError::MissingField { index: 0, field: "elements" })?;
    let mut out = Vec::new();
    for (index, el) in elements.into_iter().enumerate() {
        let id = el.id.ok_or(OverpassError::MissingField { index, field: "id" })?;
        let center = match (el.lat, el.lon, &el.center) {
            (Some(lat), Some(lon), _) => Some(lat_lon(lat, lon, index)?),
            (_, _, Some(c)) => Some(lat_lon(c.lat, c.lon, index)?),
            _ => None,
        };
        let kind = el.kind.unwrap_or_else(|| "node".to_string());
        for key in keys {
            if let Some(value) = el.tags.get(key) {
                out.push(PoiEntity {
                    osm_id: id,
                    element_type: kind.clone(),
                    matched_key: key.clone(),
                    matched_value: value.clone(),
                    tags: el.tags.clone(),
                    center,
                });
            }
        }
    }
    Ok(out)
}

fn lat_lon(lat: f64, lon: f64, index: usize) -> Result<GeoPoint, OverpassError> {
    GeoPoint::new(lat, lon).map_err(|_| OverpassError::BadCoordinate { index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::DEFAULT_FEATURE_KEYS;

    fn keys(k: &[&str]) -> Vec<String> {
        k.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn query_shape() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let q = build_overpass_query(&b, &keys(&["amenity"]));
        assert!(q.contains("node[\"amenity\"](0.0000000,0.0000000,1.0000000,1.0000000);"));
        assert!(q.contains("way[\"amenity\"]("));
        assert!(q.contains("relation[\"amenity\"]("));
        assert!(q.starts_with("[out:json]"));
        assert!(q.contains("out center tags;"));
        assert_eq!(q, build_overpass_query(&b, &keys(&["amenity"])));
    }

    #[test]
    fn default_keys_give_33_clauses() {
        let b = BBox::new(50.0, 4.0, 50.01, 4.02).unwrap();
        let q = build_overpass_query(&b, &keys(&DEFAULT_FEATURE_KEYS));
        let clauses = q.lines().filter(|l| l.trim_start().starts_with(['n', 'w', 'r']) && l.contains("[\"")).count();
        assert_eq!(clauses, 33);
    }

    #[test]
    fn empty_and_multi_key() {
        assert!(parse_overpass_response(br#"{"elements": []}"#, &keys(&["amenity"])).unwrap().is_empty());
        let body = br#"{"elements":[{"type":"node","id":7,"lat":1.0,"lon":2.0,
            "tags":{"amenity":"school","tourism":"hotel","name":"x"}}]}"#;
        let e = parse_overpass_response(body, &keys(&["tourism", "amenity"])).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].matched_key.as_str(), e[0].matched_value.as_str()), ("tourism", "hotel"));
        assert_eq!((e[1].matched_key.as_str(), e[1].matched_value.as_str()), ("amenity", "school"));
    }

    #[test]
    fn way_center_and_untagged_drop() {
        let body = br#"{"elements":[
            {"type":"way","id":11,"center":{"lat":51.5,"lon":-0.1},"tags":{"landuse":"grass"}},
            {"type":"node","id":12,"lat":1.0,"lon":1.0,"tags":{"name":"nothing"}}]}"#;
        let e = parse_overpass_response(body, &keys(&["landuse"])).unwrap();
        assert_eq!(e.len(), 1);
        let c = e[0].center.unwrap();
        assert_eq!((c.lat(), c.lon()), (51.5, -0.1));
        assert_eq!(e[0].element_type, "way");
    }

    #[test]
    fn errors() {
        let missing = br#"{"elements":[{"type":"node","tags":{"amenity":"x"}}]}"#;
        assert_eq!(
            parse_overpass_response(missing, &keys(&["amenity"])),
            Err(OverpassError::MissingField { index: 0, field: "id" })
        );
        match parse_overpass_response(b"{\"elements\": [\n  {oops", &keys(&["amenity"])) {
            Err(OverpassError::Parse { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("{other:?}"),
        }
    }
}
