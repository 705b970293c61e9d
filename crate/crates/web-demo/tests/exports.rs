use geoat_web_demo::{late_curve, overpass_view, tone_profile};
use serde_json::Value;

#[test]
fn tone_peaks_in_the_band_holding_its_frequency() {
    let v: Value = serde_json::from_str(&tone_profile(1000.0, 0.0, 0.001).unwrap()).unwrap();
    let db: Vec<f64> = serde_json::from_value(v["db"].clone()).unwrap();
    let centers: Vec<f64> = serde_json::from_value(v["centers_hz"].clone()).unwrap();
    let k = (0..db.len()).max_by(|&a, &b| db[a].total_cmp(&db[b])).unwrap();
    let nearest = (0..centers.len())
        .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
        .unwrap();
    assert!(k.abs_diff(nearest) <= 1, "peak band {k}, nearest {nearest}");
    // (16000 - 512) / 160 + 1 frames without padding.
    assert_eq!(v["frames"], 97);
}

#[test]
fn late_curve_starts_at_ln2_weighting() {
    let v: Vec<Value> = serde_json::from_str(&late_curve(0.5, 2.0, 0.0, 3.0, 4).unwrap()).unwrap();
    assert_eq!(v.len(), 4);
    let lambda = v[0]["lambda"].as_f64().unwrap();
    assert!((lambda - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v[0]["logit"].as_f64().unwrap() - (0.5 + lambda * 2.0)).abs() < 1e-15);
    let probs: Vec<f64> = v.iter().map(|p| p["prob"].as_f64().unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn overpass_view_matches_the_equator_case() {
    let v: Value = serde_json::from_str(&overpass_view(0.0, 0.0, 222_640.0, "amenity").unwrap()).unwrap();
    assert_eq!(v["north"], 1.0);
    assert_eq!(v["east"], 1.0);
    assert!(v["query"].as_str().unwrap().contains("amenity"));
    assert!(overpass_view(95.0, 0.0, 100.0, "").is_err());
}
