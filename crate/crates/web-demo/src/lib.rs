//! WebAssembly bindings for the static demo page. Every export returns a JSON string so
//! the page needs no generated type glue beyond `wasm-bindgen`'s.

use geoat_core::fusion::late_fuse;
use geoat_core::geo::{bbox_from_center, build_overpass_query, GeoPoint, DEFAULT_FEATURE_KEYS};
use geoat_core::signal::{LogMel, MelConfig, SAMPLE_RATE};
use geoat_core::tensor::{Tape, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Profile {
    centers_hz: Vec<f64>,
    /// Time-mean log-mel energy per band.
    db: Vec<f64>,
    frames: usize,
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Log-mel profile of one second of an amplitude-modulated tone over white noise.
pub fn tone_profile(freq: f64, am_rate: f64, noise: f64) -> Result<String, String> {
    let cfg = MelConfig { clip_samples: SAMPLE_RATE as usize, ..MelConfig::default() };
    let front = LogMel::new(cfg.clone()).map_err(|e| e.to_string())?;
    // Deterministic noise from a small LCG keeps the page reproducible.
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    let samples: Vec<f64> = (0..cfg.clip_samples)
        .map(|i| {
            let t = i as f64 / f64::from(SAMPLE_RATE);
            let env = if am_rate > 0.0 { 0.5 * (1.0 + (std::f64::consts::TAU * am_rate * t).sin()) } else { 1.0 };
            state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
            0.4 * env * (std::f64::consts::TAU * freq * t).sin() + noise * u
        })
        .collect();
    let m = front.compute(&samples);
    let db = (0..m.f).map(|f| (0..m.t).map(|t| m.at(t, f)).sum::<f64>() / m.t as f64).collect();
    Ok(to_json(&Profile { centers_hz: cfg.center_frequencies(), db, frames: m.t }))
}

#[derive(Serialize)]
struct LatePoint {
    lambda_raw: f64,
    lambda: f64,
    logit: f64,
    prob: f64,
}

/// Fused logit and probability of one class as `λ_raw` sweeps `[lo, hi]`.
pub fn late_curve(z_audio: f64, z_gsc: f64, lo: f64, hi: f64, steps: usize) -> Result<String, String> {
    let steps = steps.max(2);
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let raw = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![z_audio]));
        let g = tape.constant(Tensor::from_vec(vec![z_gsc]));
        let l = tape.constant(Tensor::from_vec(vec![raw]));
        let fused = late_fuse(&mut tape, a, g, l).map_err(|e| e.to_string())?;
        let logit = tape.value(fused).data()[0];
        out.push(LatePoint { lambda_raw: raw, lambda: raw.exp().ln_1p(), logit, prob: 1.0 / (1.0 + (-logit).exp()) });
    }
    Ok(to_json(&out))
}

#[derive(Serialize)]
struct QueryView {
    south: f64,
    west: f64,
    north: f64,
    east: f64,
    query: String,
}

/// Bounding box and Overpass QL text for a square of `side_m` metres around a point.
pub fn overpass_view(lat: f64, lon: f64, side_m: f64, keys: &str) -> Result<String, String> {
    let p = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    let bbox = bbox_from_center(p, side_m).map_err(|e| e.to_string())?;
    let keys: Vec<String> = if keys.trim().is_empty() {
        DEFAULT_FEATURE_KEYS.iter().map(|s| s.to_string()).collect()
    } else {
        keys.split(',').map(|k| k.trim().to_string()).filter(|k| !k.is_empty()).collect()
    };
    Ok(to_json(&QueryView {
        south: bbox.south,
        west: bbox.west,
        north: bbox.north,
        east: bbox.east,
        query: build_overpass_query(&bbox, &keys),
    }))
}

#[wasm_bindgen(js_name = toneProfile)]
pub fn tone_profile_js(freq: f64, am_rate: f64, noise: f64) -> Result<String, JsValue> {
    tone_profile(freq, am_rate, noise).map_err(js_err)
}

#[wasm_bindgen(js_name = lateCurve)]
pub fn late_curve_js(z_audio: f64, z_gsc: f64, lo: f64, hi: f64, steps: usize) -> Result<String, JsValue> {
    late_curve(z_audio, z_gsc, lo, hi, steps).map_err(js_err)
}

#[wasm_bindgen(js_name = overpassView)]
pub fn overpass_view_js(lat: f64, lon: f64, side_m: f64, keys: &str) -> Result<String, JsValue> {
    overpass_view(lat, lon, side_m, keys).map_err(js_err)
}
