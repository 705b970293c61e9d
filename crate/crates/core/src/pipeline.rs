//! Multi-stage compositions driven by a [`RunConfig`]; the command-line tool is a thin
//! layer over these.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    iterative_stratified_split, prevalence, read_manifest, write_manifest, write_split, ClipRecord, DatasetError,
    Split, SUBSET_NAMES,
};
use crate::features::{build_features, FeatureError, FeatureOptions, Features};
use crate::fusion::{Backbone, FusionModel, ModelConfig, ModelError, Variant};
use crate::geo::{FetchError, PoiFetcher, Transport};
use crate::gsc::{descriptors_from_entities, write_embedding_file, EmbeddingFile, EmbeddingFileError};
use crate::metrics::{mean_std, EvalReport, MetricError};
use crate::signal::LoadOptions;
use crate::synth::{generate_world, SynthError};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::train::{default_class_names, evaluate_model, train_seeds, History, TrainError};
use crate::zeroshot::ZeroShotError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingFileError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Name of the innermost error variant, e.g. `InfeasibleSplit`.
    pub fn kind(&self) -> String {
        let dbg = match self {
            PipelineError::Config(e) => format!("{e:?}"),
            PipelineError::Dataset(e) => format!("{e:?}"),
            PipelineError::Features(e) => format!("{e:?}"),
            PipelineError::Train(e) => format!("{e:?}"),
            PipelineError::Model(e) => format!("{e:?}"),
            PipelineError::Metric(e) => format!("{e:?}"),
            PipelineError::Checkpoint(e) => format!("{e:?}"),
            PipelineError::Synth(e) => format!("{e:?}"),
            PipelineError::Fetch(e) => format!("{e:?}"),
            PipelineError::Embedding(e) => format!("{e:?}"),
            PipelineError::ZeroShot(e) => format!("{e:?}"),
            PipelineError::Io { .. } => "Io".into(),
            PipelineError::Invalid(_) => "Invalid".into(),
        };
        variant_name(&dbg)
    }
}

/// Leading identifier of a `Debug` rendering.
pub fn variant_name(dbg: &str) -> String {
    dbg.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Configured class names, or `class_<i>` when none are set.
pub fn class_names(cfg: &RunConfig, n: usize) -> Result<Vec<String>, PipelineError> {
    match cfg.run.class_names.len() {
        0 => Ok(default_class_names(n)),
        k if k == n => Ok(cfg.run.class_names.clone()),
        k => Err(PipelineError::Invalid(format!("run.class_names has {k} entries but the labels have {n} columns"))),
    }
}

/// Loader settings that match a model: only needed modalities, time-pooled for the MLP.
pub fn feature_options(cfg: &RunConfig, model: &ModelConfig) -> FeatureOptions {
    FeatureOptions {
        mel: cfg.mel.clone(),
        pool_time: model.backbone == Backbone::MelMlp,
        audio: model.variant.uses_audio(),
        gsc: model.variant.uses_gsc().then(|| cfg.encode.clone()),
        load: LoadOptions::default(),
    }
}

/// `cfg.model` with data-dependent sizes taken from the features.
pub fn fit_model_config(cfg: &RunConfig, feats: &Features) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.n_classes = feats.n_classes;
    m.n_mels = cfg.mel.n_mels;
    m.n_frames = if feats.t > 1 { feats.t } else { cfg.mel.n_frames() };
    if feats.gsc_dim > 0 {
        m.gsc_dim = feats.gsc_dim;
    }
    m
}

pub fn load_subset(split_dir: &Path, name: &str) -> Result<Vec<ClipRecord>, PipelineError> {
    Ok(read_manifest(&split_dir.join(format!("{name}.jsonl")))?)
}

/// Generates the synthetic world into `out`; its recorded config carries the class names.
pub fn synth_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<ClipRecord>, PipelineError> {
    let records = generate_world(&cfg.synth, out)?;
    let mut resolved = cfg.clone();
    if resolved.run.class_names.is_empty() {
        resolved.run.class_names = cfg.synth.class_names();
    }
    resolved.write_record(out)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub sizes: [usize; 3],
    pub global_prevalence: Vec<f64>,
    pub test_prevalence: Vec<f64>,
    pub max_test_deviation: f64,
}

/// Stratified train/val/test split of a manifest, written as three manifests.
pub fn split_dataset(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<(Split, SplitSummary), PipelineError> {
    let records = read_manifest(manifest)?;
    let split = iterative_stratified_split(&records, &cfg.split)?;
    write_split(out, &records, &split)?;
    let n_classes = records.first().map_or(0, |r| r.labels.len());
    let all: Vec<usize> = (0..records.len()).collect();
    let global = prevalence(&records, &all, n_classes);
    let test = prevalence(&records, &split.test, n_classes);
    let max_dev = global.iter().zip(&test).map(|(g, t)| (g - t).abs()).fold(0.0, f64::max);
    let summary = SplitSummary {
        sizes: [split.train.len(), split.val.len(), split.test.len()],
        global_prevalence: global,
        test_prevalence: test,
        max_test_deviation: max_dev,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out.join("split_summary.json"), text).map_err(io_err(out))?;
    cfg.write_record(out)?;
    Ok((split, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub epochs_run: usize,
}

/// Trains `cfg.model` once per seed on the split's train subset with validation-based
/// early stopping. Each seed writes `seed_<s>/model.ckpt` and `history.csv`.
pub fn train_run(cfg: &RunConfig, split_dir: &Path, out: &Path) -> Result<Vec<SeedRun>, PipelineError> {
    let train = load_subset(split_dir, "train")?;
    let val = load_subset(split_dir, "val")?;
    let opts = feature_options(cfg, &cfg.model);
    let ft = build_features(&train, &opts)?;
    let fv = build_features(&val, &opts)?;
    let model_cfg = fit_model_config(cfg, &ft);
    model_cfg.validate()?;
    let outcomes = train_seeds(&model_cfg, &ft, &fv, &cfg.train, &cfg.run.seeds);
    cfg.write_record(out)?;
    let mut runs = Vec::new();
    for (&seed, outcome) in cfg.run.seeds.iter().zip(outcomes) {
        let outcome = outcome?;
        let dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ckpt = outcome.model.checkpoint();
        let path = dir.join("model.ckpt");
        write_checkpoint(&path, &ckpt)?;
        std::fs::write(dir.join("history.csv"), outcome.history.to_csv()).map_err(io_err(&dir))?;
        runs.push(seed_run(seed, path, ckpt.digest(), &outcome.history));
    }
    let text = serde_json::to_string_pretty(&runs).expect("runs serialize");
    std::fs::write(out.join("runs.json"), text).map_err(io_err(out))?;
    Ok(runs)
}

fn seed_run(seed: u64, checkpoint: PathBuf, digest: String, h: &History) -> SeedRun {
    SeedRun {
        seed,
        checkpoint,
        digest,
        best_epoch: h.best_epoch,
        best_val_f1: h.best_val_f1,
        epochs_run: h.epochs.len(),
    }
}

/// Scores a checkpoint on a manifest and writes `report.json` and `per_class_ap.csv`.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<EvalReport, PipelineError> {
    let model = FusionModel::from_checkpoint(&read_checkpoint(checkpoint)?)?;
    let records = read_manifest(manifest)?;
    let feats = build_features(&records, &feature_options(cfg, model.config()))?;
    let names = class_names(cfg, feats.n_classes)?;
    let report = evaluate_model(&model, &feats, &names, model.config().seed, cfg.train.threshold)?;
    report.write(out).map_err(io_err(out))?;
    cfg.write_record(out)?;
    Ok(report)
}

/// Attaches per-class ΔAP against a baseline report and writes it with `delta.csv`.
pub fn delta_run(cfg: &RunConfig, report: &Path, baseline: &Path, out: &Path) -> Result<EvalReport, PipelineError> {
    let a = EvalReport::read(report).map_err(io_err(report))?;
    let b = EvalReport::read(baseline).map_err(io_err(baseline))?;
    let with = a.with_baseline(&b)?;
    with.write(out).map_err(io_err(out))?;
    let mut csv = String::from("class,delta_ap,group\n");
    for d in with.delta.iter().flatten() {
        let ap = d.delta_ap.map_or(String::new(), |v| v.to_string());
        let group = d.group.map_or(String::new(), |g| {
            serde_json::to_value(g).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        });
        csv.push_str(&format!("{},{ap},{group}\n", d.class));
    }
    std::fs::write(out.join("delta.csv"), csv).map_err(io_err(out))?;
    cfg.write_record(out)?;
    Ok(with)
}

/// Replaces each geotagged record's descriptor list with freshly queried POIs.
pub fn attach_context<T: Transport>(
    records: &[ClipRecord],
    fetcher: &PoiFetcher<T>,
) -> Result<Vec<ClipRecord>, PipelineError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut r = r.clone();
        if let Some(p) = r.geo {
            let entities = fetcher.fetch_pois(p)?;
            let tags = descriptors_from_entities(&entities, false).into_iter().map(|d| d.text().to_string()).collect();
            r.gsc_tags = Some(tags);
            r.gsc_embedding_ref = None;
        }
        out.push(r);
    }
    Ok(out)
}

/// Queries POIs for every geotagged record and writes an updated manifest to `out`.
pub fn gsc_fetch<T: Transport>(
    cfg: &RunConfig,
    manifest: &Path,
    transport: T,
    out: &Path,
) -> Result<Vec<ClipRecord>, PipelineError> {
    let records = read_manifest(manifest)?;
    let fetcher = PoiFetcher::new(cfg.query.clone(), transport)?;
    let updated = attach_context(&records, &fetcher)?;
    write_manifest(&out.join("manifest.jsonl"), &updated)?;
    cfg.write_record(out)?;
    Ok(updated)
}

/// Encodes each record's context into `gsc_vectors.bin`, keyed by clip id, and writes a
/// manifest that points at it.
pub fn gsc_encode(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Features, PipelineError> {
    let records = read_manifest(manifest)?;
    let opts = FeatureOptions {
        mel: cfg.mel.clone(),
        pool_time: true,
        audio: false,
        gsc: Some(cfg.encode.clone()),
        load: LoadOptions::default(),
    };
    let feats = build_features(&records, &opts)?;
    let mut table = EmbeddingFile::new(feats.gsc_dim);
    for (i, id) in feats.ids.iter().enumerate() {
        let row: Vec<f32> = feats.gsc[i * feats.gsc_dim..(i + 1) * feats.gsc_dim].iter().map(|&v| v as f32).collect();
        table.insert(id, &row)?;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_embedding_file(&out.join("gsc_vectors.bin"), &table)?;
    let refs: Vec<ClipRecord> = records
        .into_iter()
        .map(|mut r| {
            r.gsc_embedding_ref = Some(r.id.clone());
            r
        })
        .collect();
    write_manifest(&out.join("manifest.jsonl"), &refs)?;
    cfg.write_record(out)?;
    Ok(feats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub side_m: f64,
    pub map_mean: f64,
    pub map_std: f64,
    /// Mean AP per class over seeds; `None` where the test subset has no positives.
    pub per_class_ap: Vec<Option<f64>>,
}

/// Context-only models over several query ranges: fetch, encode, train and evaluate per
/// range. Writes `range_sweep.csv` with one row per range and one AP column per class.
pub fn sweep_range<T: Transport + Clone>(
    cfg: &RunConfig,
    split_dir: &Path,
    transport: T,
    out: &Path,
) -> Result<Vec<RangeRow>, PipelineError> {
    let subsets: Vec<Vec<ClipRecord>> =
        SUBSET_NAMES.iter().map(|n| load_subset(split_dir, n)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for &side_m in &cfg.sweep.side_m {
        let mut c = cfg.clone();
        c.query.side_m = side_m;
        c.model.variant = Variant::GscOnly;
        let fetcher = PoiFetcher::new(c.query.clone(), transport.clone())?;
        let opts = feature_options(&c, &c.model);
        let mut feats = Vec::new();
        for s in &subsets {
            feats.push(build_features(&attach_context(s, &fetcher)?, &opts)?);
        }
        let model_cfg = fit_model_config(&c, &feats[0]);
        model_cfg.validate()?;
        names = class_names(&c, feats[0].n_classes)?;
        let mut reports = Vec::new();
        for outcome in train_seeds(&model_cfg, &feats[0], &feats[1], &c.train, &c.run.seeds) {
            let m = outcome?.model;
            reports.push(evaluate_model(&m, &feats[2], &names, m.config().seed, c.train.threshold)?);
        }
        let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
        let (map_mean, map_std) = mean_std(&maps);
        let per_class_ap = (0..names.len())
            .map(|k| {
                let v: Vec<f64> = reports.iter().filter_map(|r| r.per_class_ap[k]).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        rows.push(RangeRow { side_m, map_mean, map_std, per_class_ap });
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut csv = format!("side_m,map_mean,map_std,{}\n", names.join(","));
    for r in &rows {
        let cells: Vec<String> = r.per_class_ap.iter().map(|v| v.map_or(String::new(), |x| x.to_string())).collect();
        csv.push_str(&format!("{},{},{},{}\n", r.side_m, r.map_mean, r.map_std, cells.join(",")));
    }
    std::fs::write(out.join("range_sweep.csv"), csv).map_err(io_err(out))?;
    cfg.write_record(out)?;
    Ok(rows)
}
