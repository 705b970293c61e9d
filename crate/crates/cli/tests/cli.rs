use std::path::Path;
use std::process::{Command, Output};

use geoat_core::geo::{cache_key, GeoPoint, DEFAULT_FEATURE_KEYS};
use geoat_core::gsc::{read_embedding_file, write_embedding_file, EmbeddingFile};
use geoat_core::metrics::EvalReport;
use geoat_core::synth::WorldSpec;
use serde_json::Value;

const SMALL: &str = "[model]\nmlp_hidden = [32, 16]\ngsc_hidden = [16]\n\
                     [encode]\ndim = 64\n\
                     [train]\nmax_epochs = 20\npatience = 5\n\
                     [synth]\nclips_per_class = 12\n";

const DEAD_ENDPOINT: &str = "http://127.0.0.1:9/api/interpreter";

fn geoat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoat"))
        .current_dir(dir)
        .env("GEOAT_OVERPASS_ENDPOINT", DEAD_ENDPOINT)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn has_record(dir: &Path) -> bool {
    dir.join("resolved_config.toml").is_file() && dir.join("version.txt").is_file()
}

fn world(dir: &Path) {
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok_json(&geoat(dir, &["--config", "small.toml", "synth", "generate", "--out", "world"]));
    ok_json(&geoat(
        dir,
        &["--config", "small.toml", "dataset", "split", "--manifest", "world/manifest.jsonl", "--out", "split"],
    ));
}

#[test]
fn smoke_pipeline_produces_reports_and_run_records() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    world(d);
    let c = ["--config", "small.toml"];
    for v in ["late", "audio_only"] {
        let t = ok_json(&geoat(d, &[&c[..], &["train", "--split-dir", "split", "--out", v, "--variant", v]].concat()));
        assert_eq!(t["variant"], v);
        let ckpt = format!("{v}/seed_0/model.ckpt");
        let out = format!("{v}_eval");
        let e = ok_json(&geoat(
            d,
            &[&c[..], &["eval", "--checkpoint", &ckpt, "--manifest", "split/test.jsonl", "--out", &out]].concat(),
        ));
        assert!(e["map"].as_f64().unwrap() > 0.0);
    }
    ok_json(&geoat(
        d,
        &[
            &c[..],
            &[
                "delta",
                "--report",
                "late_eval/report.json",
                "--baseline",
                "audio_only_eval/report.json",
                "--out",
                "delta",
            ],
        ]
        .concat(),
    ));
    let r = EvalReport::read(&d.join("delta/report.json")).unwrap();
    assert_eq!(r.variant, "late");
    assert_eq!(r.baseline.as_deref(), Some("audio_only"));
    assert_eq!(r.delta.as_ref().unwrap().len(), 8);
    assert_eq!(r.per_class_ap.len(), 8);
    assert!(std::fs::read_to_string(d.join("delta/delta.csv")).unwrap().starts_with("class,delta_ap,group\n"));
    for dir in ["world", "split", "late", "late_eval", "audio_only", "delta"] {
        assert!(has_record(&d.join(dir)), "{dir}");
    }
    let world_cfg = std::fs::read_to_string(d.join("world/resolved_config.toml")).unwrap();
    assert!(world_cfg.contains("lawn_mower"));
}

#[test]
fn train_rerun_from_resolved_config_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    world(d);
    let a = ok_json(&geoat(
        d,
        &["--config", "small.toml", "train", "--split-dir", "split", "--out", "a", "--variant", "early_channel"],
    ));
    let b = ok_json(&geoat(d, &["--config", "a/resolved_config.toml", "train", "--out", "b"]));
    assert_eq!(a["runs"][0]["digest"], b["runs"][0]["digest"]);
    let ha = std::fs::read(d.join("a/seed_0/history.csv")).unwrap();
    assert_eq!(ha, std::fs::read(d.join("b/seed_0/history.csv")).unwrap());
}

#[test]
fn wilcoxon_on_equal_columns_fails_operationally() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("x.csv"), "a,b\n0.5,0.5\n0.7,0.7\n0.1,0.1\n").unwrap();
    let e = err_json(&geoat(d, &["stats", "wilcoxon", "--csv", "x.csv", "--a", "a", "--b", "b"]), 1);
    assert_eq!(e["error"], "AllZeroDifferences");
    std::fs::write(d.join("y.csv"), "a,b\n1,2\n2,4\n3,1\n4,8\n5,9\n").unwrap();
    let w = ok_json(&geoat(d, &["stats", "wilcoxon", "--csv", "y.csv", "--a", "a", "--b", "b"]));
    assert_eq!(w["method"], "exact");
    let t = ok_json(&geoat(d, &["stats", "welch", "--csv", "y.csv", "--a", "a", "--b", "b"]));
    assert!(t["p"].as_f64().unwrap() > 0.0);
    err_json(&geoat(d, &["stats", "welch", "--csv", "y.csv", "--a", "a", "--b", "zz"]), 2);
}

#[test]
fn annotation_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("ann.csv"), "rater,i1,i2,i3,i4\nA,1,1,0,0\nB,1,0,0,0\n").unwrap();
    let a = ok_json(&geoat(d, &["stats", "alpha", "--annotations", "ann.csv"]));
    assert!((a["alpha"].as_f64().unwrap() - 0.533333333).abs() < 1e-9);
    let g = ok_json(&geoat(d, &["stats", "agreement", "--annotations", "ann.csv"]));
    assert_eq!(g["per_rater"], serde_json::json!([1.0, 0.75]));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(err_json(&geoat(d, &["frobnicate"]), 2)["error"], "Usage");
    err_json(&geoat(d, &["train", "--out", "x"]), 2);
    err_json(&geoat(d, &["--set", "train.max_epochs", "train"]), 2);
    err_json(&geoat(d, &["--set", "model.bogus=1", "train"]), 2);
    let e = err_json(&geoat(d, &["dataset", "split", "--manifest", "missing.jsonl", "--out", "s"]), 1);
    assert_eq!(e["error"], "Io");
    assert!(!d.join("s").exists());
}

#[test]
fn zeroshot_map_writes_mapping_and_projected_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut t = EmbeddingFile::new(2);
    for (w, v) in [("dog", [1.0, 0.0]), ("bark", [0.9, 0.1]), ("siren", [0.0, 1.0]), ("alarm", [0.1, 0.9])] {
        t.insert(w, &v).unwrap();
    }
    write_embedding_file(&d.join("words.bin"), &t).unwrap();
    std::fs::write(d.join("src.txt"), "bark\nsiren\nunknownword\n").unwrap();
    std::fs::write(d.join("tgt.txt"), "dog\nalarm\n").unwrap();
    std::fs::write(d.join("scores.csv"), "bark,siren,unknownword\n0.2,0.9,0.5\n").unwrap();
    let args = [
        "zeroshot",
        "map",
        "--sources",
        "src.txt",
        "--targets",
        "tgt.txt",
        "--embeddings",
        "words.bin",
        "--scores",
        "scores.csv",
        "--out",
        "zs",
    ];
    let v = ok_json(&geoat(d, &args));
    assert_eq!(v["assigned"], 2);
    assert_eq!(v["oov_sources"], serde_json::json!(["unknownword"]));
    assert_eq!(std::fs::read_to_string(d.join("zs/mapped_scores.csv")).unwrap(), "dog,alarm\n0.2,0.9\n");
    assert_eq!(std::fs::read_to_string(d.join("zs/mapping.jsonl")).unwrap().lines().count(), 3);
    assert!(has_record(&d.join("zs")));
}

/// Class index of a synthetic clip id `c<class>_<k>`.
fn class_of(id: &str) -> usize {
    id[1..3].parse().unwrap()
}

fn point_for(class: usize, k: usize) -> GeoPoint {
    GeoPoint::new(10.0 + class as f64 * 0.1, 20.0 + k as f64 * 0.001).unwrap()
}

/// Seeds the Overpass cache so that a 1 km query returns the class context and a 200 m
/// query returns only generic buildings.
fn seed_cache(cache: &Path, p: GeoPoint, class: usize, spec: &WorldSpec) {
    let keys: Vec<String> = DEFAULT_FEATURE_KEYS.iter().map(|s| s.to_string()).collect();
    for (side, tags) in [(1000.0, spec.classes[class].context.clone()), (200.0, vec!["building: yes".to_string()])] {
        let elements: Vec<Value> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let (k, v) = t.split_once(": ").unwrap();
                serde_json::json!({"type": "node", "id": i + 1, "lat": p.lat(), "lon": p.lon(), "tags": {k: v}})
            })
            .collect();
        let body = serde_json::json!({ "elements": elements });
        let key = cache_key(p, side, &keys, DEAD_ENDPOINT);
        std::fs::write(cache.join(format!("{key}.json")), body.to_string()).unwrap();
    }
}

fn geotag(path: &Path, cache: &Path, spec: &WorldSpec) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut out = String::new();
    for (k, line) in text.lines().enumerate() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        let class = class_of(v["id"].as_str().unwrap());
        let p = point_for(class, k);
        seed_cache(cache, p, class, spec);
        v["geo"] = serde_json::json!({"lat": p.lat(), "lon": p.lon()});
        v.as_object_mut().unwrap().remove("gsc_tags");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

#[test]
fn gsc_fetch_encode_and_range_sweep_replay_from_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    world(d);
    let cache = d.join("cache");
    std::fs::create_dir_all(&cache).unwrap();
    let spec = WorldSpec { clips_per_class: 12, ..WorldSpec::default() };
    for s in ["train", "val", "test"] {
        geotag(&d.join(format!("split/{s}.jsonl")), &cache, &spec);
    }
    let cache_set = format!("query.cache_dir=\"{}\"", cache.display());
    let base = [
        "--config",
        "small.toml",
        "--set",
        &cache_set,
        "--set",
        "query.max_retries=0",
        "--set",
        "train.patience=15",
        "--set",
        "train.max_epochs=60",
    ];

    let f = ok_json(&geoat(
        d,
        &[&base[..], &["gsc", "fetch", "--manifest", "split/test.jsonl", "--out", "fetched"]].concat(),
    ));
    assert_eq!(f["queried"], f["records"]);
    let fetched = std::fs::read_to_string(d.join("fetched/manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(fetched.lines().next().unwrap()).unwrap();
    let ctx = &spec.classes[class_of(first["id"].as_str().unwrap())].context;
    assert_eq!(first["gsc_tags"].as_array().unwrap().len(), ctx.len());

    let e = ok_json(&geoat(
        d,
        &[&base[..], &["gsc", "encode", "--manifest", "fetched/manifest.jsonl", "--out", "enc"]].concat(),
    ));
    assert_eq!(e["dim"], 64);
    let table = read_embedding_file(&d.join("enc/gsc_vectors.bin")).unwrap();
    assert_eq!(table.len(), f["records"].as_u64().unwrap() as usize);

    let sweep = [
        &base[..],
        &["--set", "sweep.side_m=[200.0, 1000.0]", "sweep", "range", "--split-dir", "split", "--out", "sweep"],
    ]
    .concat();
    let s = ok_json(&geoat(d, &sweep));
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let (near, far) = (rows[0]["map_mean"].as_f64().unwrap(), rows[1]["map_mean"].as_f64().unwrap());
    assert!(far > near + 0.2, "{near} vs {far}");
    let csv = std::fs::read_to_string(d.join("sweep/range_sweep.csv")).unwrap();
    assert!(csv.starts_with("side_m,map_mean,map_std,class_0,"));
    assert!(has_record(&d.join("sweep")));

    // A query outside the seeded cache goes to the dead endpoint and fails cleanly.
    let miss = [
        &base[..],
        &["--set", "query.side_m=300.0", "gsc", "fetch", "--manifest", "split/test.jsonl", "--out", "miss"],
    ]
    .concat();
    assert_eq!(err_json(&geoat(d, &miss), 1)["error"], "Network");
}
