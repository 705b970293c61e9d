mod support;

use geoat_core::dataset::{
    iterative_stratified_split, prevalence, read_manifest, write_manifest, ClipRecord, DatasetError, SplitSpec,
};
use geoat_core::features::{build_features, FeatureError, FeatureOptions, Features, GscEncodeConfig};
use geoat_core::fusion::{ModelConfig, Variant};
use geoat_core::metrics::{
    average_precision, f1_micro, per_class_delta, roc_auc, roc_auc_binary, Averaging, DeltaGroup, EvalReport,
    MetricError, ScoreMatrix,
};
use geoat_core::signal::{LoadOptions, MelConfig};
use geoat_core::train::{train_fresh, EarlyStopping, StopDecision, TrainConfig, TrainError};
use rand::Rng;
use support::{ap_oracle, auc_trapezoid, label_manifest, random_instance, rng};

#[test]
fn ap_and_auc_match_oracles() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut r, 20);
        match (average_precision(&s, &l), ap_oracle(&s, &l)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{s:?} {l:?}: {a} vs {b}"),
            (Err(MetricError::NoPositives), None) => {}
            other => panic!("{other:?}"),
        }
        match (roc_auc_binary(&s, &l), auc_trapezoid(&s, &l)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{s:?} {l:?}: {a} vs {b}"),
            (Err(MetricError::Degenerate), None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn ranking_metrics_ignore_monotone_transforms() {
    let mut r = rng(12);
    for _ in 0..200 {
        let (s, l) = random_instance(&mut r, 20);
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        assert_eq!(average_precision(&s, &l), average_precision(&t, &l));
        assert_eq!(roc_auc_binary(&s, &l), roc_auc_binary(&t, &l));
    }
}

#[test]
fn f1_matches_direct_counting() {
    let mut r = rng(13);
    for _ in 0..500 {
        let n = r.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let l: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        let tp = p.iter().zip(&l).filter(|(p, l)| **p >= 0.5 && **l).count() as f64;
        let fp = p.iter().zip(&l).filter(|(p, l)| **p >= 0.5 && !**l).count() as f64;
        let fnn = p.iter().zip(&l).filter(|(p, l)| **p < 0.5 && **l).count() as f64;
        let got = f1_micro(&p, &l, 0.5).unwrap();
        let want = if tp + fp + fnn == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        assert_eq!(got.f1, want);
    }
}

#[test]
fn macro_auc_skips_and_reports_degenerate_classes() {
    // Two clips × three classes; class 2 never occurs.
    let scores = [0.9, 0.2, 0.1, 0.3, 0.8, 0.4];
    let labels = [true, false, false, false, true, false];
    let m = ScoreMatrix { scores: &scores, labels: &labels, n_classes: 3 };
    let r = roc_auc(&m, Averaging::Macro).unwrap();
    assert_eq!(r.skipped_classes, vec![2]);
    assert_eq!(r.value, 1.0);
    let micro = roc_auc(&m, Averaging::Micro).unwrap();
    assert_eq!(micro.averaging, Averaging::Micro);
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}")).collect()
}

#[test]
fn report_map_and_exclusions() {
    let probs = [0.9, 0.1, 0.2, 0.8, 0.3, 0.4];
    let labels = [true, false, false, true, true, false];
    let rep = EvalReport::evaluate("late", 3, &names(2), &probs, &labels, 0.5).unwrap();
    let aps: Vec<f64> = rep.per_class_ap.iter().flatten().copied().collect();
    assert_eq!(rep.map, aps.iter().sum::<f64>() / aps.len() as f64);
    assert!(rep.excluded_classes.is_empty());

    let labels = [true, false, false, false, true, false];
    let rep = EvalReport::evaluate("late", 3, &names(2), &probs, &labels, 0.5).unwrap();
    assert_eq!(rep.excluded_classes, vec![1]);
    assert_eq!(rep.per_class_ap[1], None);
    assert_eq!(rep.map, rep.per_class_ap[0].unwrap());

    let json = rep.to_json();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rep);
    assert_eq!(rep.ap_csv().lines().count(), 3);
    assert!(rep.ap_csv().ends_with("k1,\n"));
}

#[test]
fn delta_contract() {
    let probs = [0.9, 0.1, 0.2, 0.8];
    let labels = [true, false, false, true];
    let a = EvalReport::evaluate("late", 0, &names(2), &probs, &labels, 0.5).unwrap();
    let d = per_class_delta(&a, &a).unwrap();
    assert!(d.iter().all(|c| c.delta_ap == Some(0.0) && c.group == Some(DeltaGroup::Neutral)));
    let other = EvalReport::evaluate("late", 0, &names(2)[..1].to_vec(), &[0.5, 0.5], &[true, false], 0.5).unwrap();
    assert_eq!(per_class_delta(&a, &other), Err(MetricError::ClassMismatch));
    let with = a.clone().with_baseline(&a).unwrap();
    assert_eq!(with.baseline.as_deref(), Some("late"));
}

fn single_label(n: usize) -> Vec<ClipRecord> {
    (0..n)
        .map(|i| ClipRecord {
            id: format!("c{i}"),
            audio_path: "x.wav".into(),
            labels: vec![1],
            geo: None,
            gsc_tags: None,
            gsc_embedding_ref: None,
        })
        .collect()
}

#[test]
fn split_partition_and_sizes() {
    for seed in 0..20 {
        let recs = single_label(10);
        let s = iterative_stratified_split(&recs, &SplitSpec { seed, ..Default::default() }).unwrap();
        assert_eq!(s.train.len(), 7);
        assert!((1..=2).contains(&s.val.len()) && (1..=2).contains(&s.test.len()));
        let mut all: Vec<usize> = s.subsets().iter().flat_map(|v| v.iter().copied()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}

#[test]
fn split_is_deterministic_and_stratified() {
    let recs = label_manifest(800, 28, 5);
    let spec = SplitSpec { seed: 9, ..Default::default() };
    let a = iterative_stratified_split(&recs, &spec).unwrap();
    assert_eq!(a, iterative_stratified_split(&recs, &spec).unwrap());
    let all: Vec<usize> = (0..recs.len()).collect();
    let global = prevalence(&recs, &all, 28);
    let test = prevalence(&recs, &a.test, 28);
    for c in 0..28 {
        assert!(test[c] > 0.0);
        assert!((test[c] - global[c]).abs() <= 0.02, "label {c}: {} vs {}", test[c], global[c]);
    }
}

#[test]
fn split_flags_rare_labels() {
    let mut recs = label_manifest(50, 3, 1);
    for (i, r) in recs.iter_mut().enumerate() {
        r.labels = vec![u8::from(i % 2 == 0), u8::from(i % 3 == 0), u8::from(i < 2)];
    }
    match iterative_stratified_split(&recs, &SplitSpec::default()) {
        Err(DatasetError::InfeasibleSplit { labels }) => assert_eq!(labels, vec![2]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn split_repair_puts_a_positive_in_test() {
    // Three positives of a label whose demand would round away from the test subset.
    let mut recs = label_manifest(40, 2, 2);
    for r in recs.iter_mut() {
        r.labels[1] = 0;
    }
    for i in 0..3 {
        recs[i].labels[1] = 1;
    }
    for seed in 0..10 {
        let s = iterative_stratified_split(&recs, &SplitSpec { seed, ..Default::default() }).unwrap();
        assert!(s.test.iter().any(|&i| recs[i].labels[1] == 1), "seed {seed}");
    }
}

#[test]
fn manifest_round_trip_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let recs = label_manifest(5, 3, 4);
    let path = dir.path().join("m.jsonl");
    write_manifest(&path, &recs).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back.len(), 5);
    assert_eq!(back[2].audio_path, std::path::absolute(dir.path()).unwrap().join("clips/2.wav"));
    assert_eq!(back[2].labels, recs[2].labels);
    std::fs::write(&path, "{\"id\":\"a\",\"audio_path\":\"a.wav\",\"labels\":[2]}\n").unwrap();
    assert!(matches!(read_manifest(&path), Err(DatasetError::InvalidRecord { .. })));
}

#[test]
fn early_stopping_rule() {
    let mut s = EarlyStopping::new(15);
    assert_eq!(s.update(1, 0.5), StopDecision::Improved);
    assert_eq!(s.update(2, 0.7), StopDecision::Improved);
    let mut stopped = None;
    for epoch in 3..100 {
        // Monotonically degrading after the best epoch.
        if s.update(epoch, 0.7 - epoch as f64 * 0.001) == StopDecision::Stop {
            stopped = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped, Some(2 + 15));
    assert_eq!(s.best(), Some((2, 0.7)));
}

/// Linearly separable pooled-audio features: class c lifts mel bin c.
fn separable(n: usize, seed: u64, gsc: bool) -> Features {
    let mut r = rng(seed);
    let (c, f, d) = (3, 8, 6);
    let mut audio = Vec::new();
    let mut labels = Vec::new();
    let mut g = Vec::new();
    for _ in 0..n {
        let k = r.random_range(0..c);
        for j in 0..f {
            audio.push(r.random_range(-0.3..0.3) + if j == k { 2.0 } else { 0.0 });
        }
        for j in 0..c {
            labels.push(if j == k { 1.0 } else { 0.0 });
        }
        for j in 0..d {
            g.push(if gsc && j == k { 1.0 } else { 0.0 });
        }
    }
    Features {
        ids: (0..n).map(|i| i.to_string()).collect(),
        n_classes: c,
        labels,
        t: 1,
        f,
        audio,
        gsc_dim: d,
        gsc: g,
        empty_context: 0,
    }
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        n_mels: 8,
        gsc_dim: 6,
        n_classes: 3,
        mlp_hidden: vec![8, 4],
        gsc_hidden: vec![4],
        ..Default::default()
    }
}

#[test]
fn loss_decreases_on_separable_data() {
    let (tr, va) = (separable(96, 1, true), separable(30, 2, true));
    for v in [Variant::AudioOnly, Variant::Late] {
        let cfg = TrainConfig { max_epochs: 5, patience: 4, ..Default::default() };
        let out = train_fresh(&small_model(v), &tr, &va, &cfg).unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{v}: {losses:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = (separable(64, 3, true), separable(20, 4, true));
    let cfg = TrainConfig { max_epochs: 6, patience: 3, seed: 17, ..Default::default() };
    let mc = small_model(Variant::EarlyChannel);
    let a = train_fresh(&mc, &tr, &va, &cfg).unwrap();
    let b = train_fresh(&mc, &tr, &va, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.checkpoint().digest(), b.model.checkpoint().digest());
    assert!(a.history.to_csv().starts_with("epoch,loss,val_f1\n1,"));
}

#[test]
fn fusion_variants_require_context() {
    let mut recs = label_manifest(6, 2, 3);
    recs[0].gsc_tags = Some(vec!["amenity: school".into()]);
    let opts = FeatureOptions {
        mel: MelConfig::default(),
        pool_time: true,
        audio: false,
        gsc: Some(GscEncodeConfig::default()),
        load: LoadOptions::default(),
    };
    match build_features(&recs, &opts) {
        Err(FeatureError::MissingGsc(id)) => assert_eq!(id, "clip00001"),
        other => panic!("{other:?}"),
    }
    let err: TrainError = build_features(&recs, &opts).unwrap_err().into();
    assert!(err.to_string().contains("clip00001"));
}
