//! Turns manifest records into model-ready audio, context and label arrays.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClipRecord;
use crate::gsc::{
    encode_descriptors, read_embedding_file, Descriptor, EmbeddingFile, EmbeddingFileError, Encoder, GscError,
};
use crate::signal::{load_wav, LoadOptions, LogMel, MelConfig, SignalError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("record {id}: {source}")]
    Gsc {
        id: String,
        #[source]
        source: GscError,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingFileError),
    #[error("record {0} has no context tags or vector reference")]
    MissingGsc(String),
    #[error("record {id} references vector {key:?}, which the vector file lacks")]
    MissingVector { id: String, key: String },
    #[error("records {0} reference context vectors but no vector file is configured")]
    NoVectorFile(String),
    #[error("context dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hashed,
    Imported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GscEncodeConfig {
    pub encoder: EncoderKind,
    /// Output width of the hashed encoder.
    pub dim: usize,
    /// Descriptor embedding table for the imported encoder.
    pub embedding_file: Option<PathBuf>,
    /// Precomputed per-record vectors addressed by `gsc_embedding_ref`.
    pub vector_file: Option<PathBuf>,
}

impl Default for GscEncodeConfig {
    fn default() -> Self {
        Self { encoder: EncoderKind::Hashed, dim: crate::gsc::DEFAULT_GSC_DIM, embedding_file: None, vector_file: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureOptions {
    pub mel: MelConfig,
    /// Keep only the time mean of each mel bin (`T = 1`); exact for the MLP backbone.
    pub pool_time: bool,
    pub audio: bool,
    pub gsc: Option<GscEncodeConfig>,
    pub load: LoadOptions,
}

/// Row-major arrays for `n` clips.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub ids: Vec<String>,
    pub n_classes: usize,
    pub labels: Vec<f64>,
    /// Frames per clip and mel bins; zero-sized when audio was not requested.
    pub t: usize,
    pub f: usize,
    pub audio: Vec<f64>,
    pub gsc_dim: usize,
    pub gsc: Vec<f64>,
    /// Clips whose context held no usable descriptor.
    pub empty_context: usize,
}

impl Features {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn label_row(&self, i: usize) -> &[f64] {
        &self.labels[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn labels_bool(&self) -> Vec<bool> {
        self.labels.iter().map(|&v| v > 0.5).collect()
    }

    /// Audio `[b, T, F]`, context `[b, D]` and targets `[b, C]`; absent modalities become
    /// `[b, 1, 1]` / `[b, 1]` zero placeholders.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Tensor) {
        let b = idx.len();
        let take = |src: &[f64], width: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(b * width);
            for &i in idx {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            out
        };
        let audio = if self.t * self.f > 0 {
            Tensor::new(vec![b, self.t, self.f], take(&self.audio, self.t * self.f))
        } else {
            Ok(Tensor::zeros(&[b, 1, 1]))
        };
        let gsc = if self.gsc_dim > 0 {
            Tensor::new(vec![b, self.gsc_dim], take(&self.gsc, self.gsc_dim))
        } else {
            Ok(Tensor::zeros(&[b, 1]))
        };
        let y = Tensor::new(vec![b, self.n_classes], take(&self.labels, self.n_classes));
        (audio.expect("audio batch"), gsc.expect("gsc batch"), y.expect("label batch"))
    }

    /// Per-mel-bin mean and standard deviation over every frame of the given clips.
    pub fn audio_stats(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let f = self.f;
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut n = 0usize;
        for &i in idx {
            for row in self.audio[i * self.t * f..(i + 1) * self.t * f].chunks(f) {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        (mean, std)
    }
}

enum ContextSource {
    Hashed(usize),
    Imported(EmbeddingFile),
}

fn encode_context(records: &[ClipRecord], cfg: &GscEncodeConfig) -> Result<(usize, Vec<f64>, usize), FeatureError> {
    if let Some(r) = records.iter().find(|r| !r.has_gsc()) {
        return Err(FeatureError::MissingGsc(r.id.clone()));
    }
    let vectors = match &cfg.vector_file {
        Some(p) => Some(read_embedding_file(p)?),
        None => None,
    };
    let source = match cfg.encoder {
        EncoderKind::Hashed => ContextSource::Hashed(cfg.dim),
        EncoderKind::Imported => {
            let path = cfg.embedding_file.as_ref().ok_or_else(|| FeatureError::Gsc {
                id: "-".into(),
                source: GscError::MissingEmbedding("no embedding_file configured".into()),
            })?;
            ContextSource::Imported(read_embedding_file(path)?)
        }
    };
    let dim = match (&source, &vectors) {
        (_, Some(v)) if records.iter().all(|r| r.gsc_embedding_ref.is_some()) => v.dim(),
        (ContextSource::Hashed(d), _) => *d,
        (ContextSource::Imported(t), _) => t.dim(),
    };
    let mut out = Vec::with_capacity(records.len() * dim);
    let mut empty = 0;
    for r in records {
        let v: Vec<f64> = if let Some(key) = &r.gsc_embedding_ref {
            let table = vectors.as_ref().ok_or_else(|| FeatureError::NoVectorFile(r.id.clone()))?;
            let v = table.get(key).ok_or_else(|| FeatureError::MissingVector { id: r.id.clone(), key: key.clone() })?;
            v.iter().map(|&x| f64::from(x)).collect()
        } else {
            let tags = r.gsc_tags.as_deref().unwrap_or_default();
            let descriptors: Vec<Descriptor> = tags.iter().map(|t| Descriptor::parse(t)).collect();
            let encoder = match &source {
                ContextSource::Hashed(d) => Encoder::Hashed { dim: *d },
                ContextSource::Imported(t) => Encoder::Imported(t),
            };
            let g = encode_descriptors(&descriptors, encoder)
                .map_err(|source| FeatureError::Gsc { id: r.id.clone(), source })?;
            if g.empty_context {
                empty += 1;
            }
            g.values
        };
        if v.len() != dim {
            return Err(FeatureError::DimMismatch { expected: dim, got: v.len() });
        }
        out.extend(v);
    }
    Ok((dim, out, empty))
}

/// Loads and featurizes every record. Audio extraction runs on all available cores.
pub fn build_features(records: &[ClipRecord], opts: &FeatureOptions) -> Result<Features, FeatureError> {
    let n_classes = records.first().map_or(0, |r| r.labels.len());
    let labels = records.iter().flat_map(|r| r.labels.iter().map(|&v| f64::from(v))).collect();
    let (t, f, audio) = if opts.audio {
        let front = LogMel::new(opts.mel.clone())?;
        let t = if opts.pool_time { 1 } else { opts.mel.n_frames() };
        let f = opts.mel.n_mels;
        let rows = parallel_map(records, |r| -> Result<Vec<f64>, SignalError> {
            let clip = load_wav(&r.audio_path, opts.load)?;
            let m = front.compute(&clip.samples);
            Ok(if opts.pool_time {
                let mut mean = vec![0.0; m.f];
                for row in m.frames.chunks(m.f) {
                    mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                mean.iter_mut().for_each(|a| *a /= m.t as f64);
                mean
            } else {
                m.frames
            })
        });
        let mut audio = Vec::with_capacity(records.len() * t * f);
        for row in rows {
            audio.extend(row?);
        }
        (t, f, audio)
    } else {
        (0, 0, Vec::new())
    };
    let (gsc_dim, gsc, empty_context) = match &opts.gsc {
        Some(cfg) => encode_context(records, cfg)?,
        None => (0, Vec::new(), 0),
    };
    Ok(Features {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        n_classes,
        labels,
        t,
        f,
        audio,
        gsc_dim,
        gsc,
        empty_context,
    })
}

/// Order-preserving map over scoped worker threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
