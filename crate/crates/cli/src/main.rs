//! `geoat`: the experiment pipeline as subcommands. Results go to stdout as JSON; failures
//! print a JSON error object to stderr and exit 1 (operational) or 2 (usage).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoat_core::config::{ConfigError, RunConfig};
use geoat_core::geo::HttpTransport;
use geoat_core::gsc::read_embedding_file;
use geoat_core::pipeline::{self, variant_name, PipelineError};
use geoat_core::stats::{
    krippendorff_alpha_nominal, majority_vote, percent_agreement, welch_t_test, wilcoxon_signed_rank, AnnotationMatrix,
};
use geoat_core::zeroshot::{build_mapping, map_scores};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "geoat", version, about = "Geospatial audio tagging pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set model.variant=late`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Context vectors from OpenStreetMap.
    #[command(subcommand)]
    Gsc(GscCmd),
    #[command(subcommand)]
    Dataset(DatasetCmd),
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Train one model per configured seed on a split directory.
    Train {
        #[arg(long)]
        split_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        backbone: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class AP difference of one report against a baseline report.
    Delta {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Zeroshot(ZeroShotCmd),
    #[command(subcommand)]
    Stats(StatsCmd),
    #[command(subcommand)]
    Sweep(SweepCmd),
}

#[derive(Subcommand)]
enum GscCmd {
    /// Query POIs around every geotagged clip and write a manifest with descriptors.
    Fetch(ManifestOut),
    /// Encode descriptors into a vector file and a manifest referencing it.
    Encode(ManifestOut),
}

#[derive(Args)]
struct ManifestOut {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Stratified train/val/test split.
    Split(ManifestOut),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write the synthetic world: clips, manifest and class list.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum ZeroShotCmd {
    /// Map source labels to target labels by embedding similarity.
    Map {
        /// One source label per line.
        #[arg(long)]
        sources: PathBuf,
        /// One target label per line.
        #[arg(long)]
        targets: PathBuf,
        /// Word vectors in the GEOEMB01 format.
        #[arg(long)]
        embeddings: PathBuf,
        /// Optional CSV of source scores (header = source labels) to project.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Krippendorff's alpha (nominal) over a rater × item CSV.
    Alpha {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Per-rater percent agreement with the majority-vote consensus.
    Agreement {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Paired Wilcoxon signed-rank test between two CSV columns.
    Wilcoxon(Columns),
    /// Welch's two-sample t-test between two CSV columns.
    Welch(Columns),
}

#[derive(Args)]
struct Columns {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Context-only AP across query ranges (`sweep.side_m`).
    Range {
        #[arg(long)]
        split_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl Failure {
    fn usage(kind: &str, message: impl Into<String>) -> Self {
        Self { code: 2, kind: kind.into(), message: message.into() }
    }

    fn op(kind: &str, message: impl Into<String>) -> Self {
        Self { code: 1, kind: kind.into(), message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Write { .. } => Failure::op("Io", e.to_string()),
            _ => Failure::usage(&variant_name(&format!("{e:?}")), e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            e => Failure::op(&e.kind(), e.to_string()),
        }
    }
}

fn op_err<E: std::fmt::Debug + std::fmt::Display>(e: E) -> Failure {
    Failure::op(&variant_name(&format!("{e:?}")), e.to_string())
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::op("Io", format!("{}: {e}", path.display()))
}

/// Command-line paths become `paths.*` overrides so the resolved config records them.
fn path_set(key: &str, p: &Option<PathBuf>) -> Result<Option<String>, Failure> {
    let Some(p) = p else { return Ok(None) };
    let abs = std::path::absolute(p).map_err(io_fail(p))?;
    let text = abs.to_string_lossy();
    let quoted = serde_json::to_string(&text).expect("string serializes");
    Ok(Some(format!("paths.{key}={quoted}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail(Failure::usage("Usage", e.to_string().trim()));
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let body = json!({ "error": f.kind, "message": f.message, "exit_code": f.code });
    eprintln!("{body}");
    ExitCode::from(f.code)
}

fn load(cli: &Cli, extra: Vec<Option<String>>) -> Result<RunConfig, Failure> {
    let mut sets = cli.sets.clone();
    sets.extend(extra.into_iter().flatten());
    Ok(RunConfig::load(cli.config.as_deref(), &sets)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn run(cli: Cli) -> Result<Value, Failure> {
    match &cli.cmd {
        Cmd::Gsc(GscCmd::Fetch(a)) => {
            let cfg = load(&cli, vec![path_set("manifest", &a.manifest)?, path_set("out_dir", &a.out)?])?;
            let recs = pipeline::gsc_fetch(&cfg, cfg.path("manifest")?, HttpTransport, cfg.path("out_dir")?)?;
            let tagged = recs.iter().filter(|r| r.geo.is_some()).count();
            Ok(json!({ "records": recs.len(), "queried": tagged }))
        }
        Cmd::Gsc(GscCmd::Encode(a)) => {
            let cfg = load(&cli, vec![path_set("manifest", &a.manifest)?, path_set("out_dir", &a.out)?])?;
            let f = pipeline::gsc_encode(&cfg, cfg.path("manifest")?, cfg.path("out_dir")?)?;
            Ok(json!({ "records": f.len(), "dim": f.gsc_dim, "empty_context": f.empty_context }))
        }
        Cmd::Dataset(DatasetCmd::Split(a)) => {
            let cfg = load(&cli, vec![path_set("manifest", &a.manifest)?, path_set("out_dir", &a.out)?])?;
            let (_, summary) = pipeline::split_dataset(&cfg, cfg.path("manifest")?, cfg.path("out_dir")?)?;
            Ok(json!({ "sizes": summary.sizes, "max_test_deviation": summary.max_test_deviation }))
        }
        Cmd::Synth(SynthCmd::Generate { out, clips_per_class, seed }) => {
            let cfg = load(
                &cli,
                vec![
                    path_set("out_dir", out)?,
                    clips_per_class.map(|n| format!("synth.clips_per_class={n}")),
                    seed.map(|s| format!("synth.seed={s}")),
                ],
            )?;
            let recs = pipeline::synth_generate(&cfg, cfg.path("out_dir")?)?;
            Ok(json!({ "clips": recs.len(), "classes": cfg.synth.class_names() }))
        }
        Cmd::Train { split_dir, out, variant, backbone, seeds } => {
            let cfg = load(
                &cli,
                vec![
                    path_set("split_dir", split_dir)?,
                    path_set("out_dir", out)?,
                    variant.as_ref().map(|v| format!("model.variant=\"{v}\"")),
                    backbone.as_ref().map(|b| format!("model.backbone=\"{b}\"")),
                    seeds.as_ref().map(|s| format!("run.seeds=[{s}]")),
                ],
            )?;
            let runs = pipeline::train_run(&cfg, cfg.path("split_dir")?, cfg.path("out_dir")?)?;
            Ok(json!({ "variant": cfg.model.variant.name(), "runs": to_json(&runs) }))
        }
        Cmd::Eval { checkpoint, manifest, out } => {
            let cfg = load(
                &cli,
                vec![path_set("checkpoint", checkpoint)?, path_set("manifest", manifest)?, path_set("out_dir", out)?],
            )?;
            let r = pipeline::eval_run(&cfg, cfg.path("checkpoint")?, cfg.path("manifest")?, cfg.path("out_dir")?)?;
            Ok(json!({ "variant": r.variant, "seed": r.seed, "map": r.map, "micro_auc": r.micro_auc,
                       "macro_auc": r.macro_auc, "micro_f1": r.micro_f1, "excluded_classes": r.excluded_classes }))
        }
        Cmd::Delta { report, baseline, out } => {
            let cfg = load(&cli, vec![path_set("out_dir", out)?])?;
            let r = pipeline::delta_run(&cfg, report, baseline, cfg.path("out_dir")?)?;
            Ok(json!({ "variant": r.variant, "baseline": r.baseline, "delta": to_json(&r.delta) }))
        }
        Cmd::Zeroshot(ZeroShotCmd::Map { sources, targets, embeddings, scores, out }) => {
            let cfg = load(&cli, vec![path_set("out_dir", out)?])?;
            zeroshot(&cfg, sources, targets, embeddings, scores.as_deref())
        }
        Cmd::Stats(s) => stats(s),
        Cmd::Sweep(SweepCmd::Range { split_dir, out }) => {
            let cfg = load(&cli, vec![path_set("split_dir", split_dir)?, path_set("out_dir", out)?])?;
            let rows = pipeline::sweep_range(&cfg, cfg.path("split_dir")?, HttpTransport, cfg.path("out_dir")?)?;
            Ok(json!({ "rows": to_json(&rows) }))
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_fail(path))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn zeroshot(
    cfg: &RunConfig,
    sources: &Path,
    targets: &Path,
    embeddings: &Path,
    scores: Option<&Path>,
) -> Result<Value, Failure> {
    let out = cfg.path("out_dir")?;
    let (src, tgt) = (read_lines(sources)?, read_lines(targets)?);
    let table = read_embedding_file(embeddings).map_err(op_err)?;
    let mapping = build_mapping(&src, &tgt, &table, cfg.zeroshot.tau).map_err(op_err)?;
    std::fs::create_dir_all(out).map_err(io_fail(out))?;
    std::fs::write(out.join("mapping.jsonl"), mapping.to_jsonl()).map_err(io_fail(out))?;
    let mut uncovered = Vec::new();
    if let Some(path) = scores {
        let (header, rows) = read_table(path)?;
        if header != src {
            return Err(Failure::op("ScoreLength", "score columns must list the source labels in order"));
        }
        let mut w = csv::Writer::from_path(out.join("mapped_scores.csv")).map_err(op_err)?;
        w.write_record(&tgt).map_err(op_err)?;
        for row in rows {
            let m = map_scores(&row, &mapping).map_err(op_err)?;
            uncovered = m.uncovered;
            w.write_record(m.scores.iter().map(|v| v.to_string())).map_err(op_err)?;
        }
        w.flush().map_err(io_fail(out))?;
    }
    cfg.write_record(out)?;
    let assigned = mapping.entries.iter().filter(|e| e.target.is_some()).count();
    Ok(json!({ "sources": src.len(), "assigned": assigned, "oov_sources": mapping.oov_sources,
               "uncovered_targets": uncovered }))
}

/// Header and numeric rows of a CSV file.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), Failure> {
    let mut r = csv::Reader::from_path(path).map_err(op_err)?;
    let header: Vec<String> = r.headers().map_err(op_err)?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(op_err)?;
        let row = rec
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::op("Parse", format!("{} row {}: {e}", path.display(), i + 2)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn columns(c: &Columns) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let (header, rows) = read_table(&c.csv)?;
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::usage("UnknownColumn", format!("no column {name:?} in {}", c.csv.display())))
    };
    let (ia, ib) = (find(&c.a)?, find(&c.b)?);
    Ok((rows.iter().map(|r| r[ia]).collect(), rows.iter().map(|r| r[ib]).collect()))
}

fn stats(cmd: &StatsCmd) -> Result<Value, Failure> {
    match cmd {
        StatsCmd::Alpha { annotations } => {
            let m = AnnotationMatrix::read(annotations).map_err(op_err)?;
            let a = krippendorff_alpha_nominal(&m).map_err(op_err)?;
            Ok(json!({ "alpha": a.value(), "raters": m.n_raters(), "items": m.n_items() }))
        }
        StatsCmd::Agreement { annotations, threshold } => {
            let m = AnnotationMatrix::read(annotations).map_err(op_err)?;
            let cons = majority_vote(&m, *threshold);
            let a = percent_agreement(&m, &cons).map_err(op_err)?;
            Ok(json!({ "mean": a.mean, "per_rater": a.per_rater, "raters": m.raters, "threshold": threshold }))
        }
        StatsCmd::Wilcoxon(c) => {
            let (a, b) = columns(c)?;
            Ok(to_json(&wilcoxon_signed_rank(&a, &b).map_err(op_err)?))
        }
        StatsCmd::Welch(c) => {
            let (a, b) = columns(c)?;
            Ok(to_json(&welch_t_test(&a, &b).map_err(op_err)?))
        }
    }
}
