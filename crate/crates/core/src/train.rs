//! Mini-batch training with validation-F1 early stopping, plus inference and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{parallel_map, FeatureError, Features};
use crate::fusion::{FusionModel, ModelConfig, ModelError};
use crate::metrics::{f1_micro, EvalReport, MetricError};
use crate::tensor::{AdamW, AdamWConfig, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NumericFault { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Randomly initialized backbone; default rate 1e-3.
    Scratch,
    /// Starting from pretrained weights; default rate 1e-5.
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Overrides the mode's default rate.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Binarization threshold for validation F1.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Scratch,
            lr: None,
            weight_decay: 0.01,
            max_epochs: 100,
            patience: 15,
            batch_size: 32,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.mode {
            TrainMode::Scratch => 1e-3,
            TrainMode::FineTune => 1e-5,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate() > 0.0) {
            return bad("lr must be positive");
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return bad("need 0 < patience < max_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best validation score; signals a stop after `patience` epochs without a
/// strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: None, since: 0 }
    }

    pub fn update(&mut self, epoch: usize, score: f64) -> StopDecision {
        if score > self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.since = 0;
            return StopDecision::Improved;
        }
        self.since += 1;
        if self.since >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Wait
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_f1\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.val_f1));
        }
        s
    }
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: FusionModel,
    pub history: History,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid outputs, row-major clips × classes.
pub fn predict_probs(model: &FusionModel, feats: &Features, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    let idx: Vec<usize> = (0..feats.len()).collect();
    let mut out = Vec::with_capacity(feats.len() * feats.n_classes);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (a, g, _) = feats.batch(chunk);
        let logits = model.predict(&a, &g)?;
        out.extend(logits.data().iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}

/// Sets the audio normalization from the training clips.
pub fn fit_normalization(model: &mut FusionModel, train: &Features) -> Result<(), TrainError> {
    if train.t * train.f > 0 {
        let idx: Vec<usize> = (0..train.len()).collect();
        let (mean, std) = train.audio_stats(&idx);
        model.set_audio_normalization(&mean, &std)?;
    }
    Ok(())
}

/// Trains `model` in place from its current parameters and returns the best-epoch copy.
pub fn train_model(
    mut model: FusionModel,
    train: &Features,
    val: &Features,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("train and validation sets must be non-empty".into()));
    }
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.learning_rate(), weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.checkpoint();
    let mut history = History::default();
    let val_labels = val.labels_bool();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (a, g, y) = train.batch(chunk);
            let mut tape = Tape::new();
            let a = tape.constant(a);
            let g = tape.constant(g);
            let out = model.forward(&mut tape, a, g)?;
            let loss = tape.bce_with_logits(out.logits, &y)?;
            let lv = tape.value(loss).item().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(TrainError::NumericFault { epoch, step });
            }
            total += lv * chunk.len() as f64;
            let grads = tape.backward(loss)?.for_params(model.params());
            opt.step(model.params_mut(), &grads)?;
            model.project();
        }
        let probs = predict_probs(&model, val, cfg.batch_size)?;
        let f1 = f1_micro(&probs, &val_labels, cfg.threshold)?.f1;
        history.epochs.push(EpochRecord { epoch, loss: total / train.len() as f64, val_f1: f1 });
        match stopper.update(epoch, f1) {
            StopDecision::Improved => best = model.checkpoint(),
            StopDecision::Wait => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_f1) = stopper.best().expect("at least one epoch");
    history.best_epoch = best_epoch;
    history.best_val_f1 = best_f1;
    Ok(TrainOutcome { model: FusionModel::from_checkpoint(&best)?, history })
}

/// Fresh model for `model_cfg`, normalized on `train`, trained with `cfg`.
pub fn train_fresh(
    model_cfg: &ModelConfig,
    train: &Features,
    val: &Features,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut model = FusionModel::new(model_cfg.clone())?;
    fit_normalization(&mut model, train)?;
    train_model(model, train, val, cfg)
}

/// One independent run per seed (model init and batch order both keyed by the seed),
/// executed concurrently.
pub fn train_seeds(
    model_cfg: &ModelConfig,
    train: &Features,
    val: &Features,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Vec<Result<TrainOutcome, TrainError>> {
    parallel_map(seeds, |&seed| {
        let mc = ModelConfig { seed, ..model_cfg.clone() };
        let tc = TrainConfig { seed, ..cfg.clone() };
        train_fresh(&mc, train, val, &tc)
    })
}

pub fn evaluate_model(
    model: &FusionModel,
    feats: &Features,
    class_names: &[String],
    seed: u64,
    threshold: f64,
) -> Result<EvalReport, TrainError> {
    let probs = predict_probs(model, feats, 64)?;
    Ok(EvalReport::evaluate(model.config().variant.name(), seed, class_names, &probs, &feats.labels_bool(), threshold)?)
}

/// Default class names `class_0 .. class_{n-1}`.
pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}
