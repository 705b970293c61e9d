//! Multi-label tagging metrics and evaluation reports.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no positive labels; average precision undefined")]
    NoPositives,
    #[error("only one label value present; AUC undefined")]
    Degenerate,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("reports cover different classes")]
    ClassMismatch,
}

fn check_len(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    Ok(())
}

/// Indices sorted by descending score; ties keep ascending index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Non-interpolated average precision: the mean, over positives, of precision at each
/// positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_len(scores, labels)?;
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(acc / hits as f64)
}

/// Mann–Whitney AUC with midranks for tied scores.
pub fn roc_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_len(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Degenerate);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Row-major `n × c` score matrix with matching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
    pub n_classes: usize,
}

impl ScoreMatrix<'_> {
    pub fn n_items(&self) -> usize {
        self.scores.len() / self.n_classes.max(1)
    }

    pub fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        let k = self.n_classes;
        (
            self.scores.iter().skip(c).step_by(k).copied().collect(),
            self.labels.iter().skip(c).step_by(k).copied().collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Over all flattened item × class pairs.
    Micro,
    /// Mean of per-class values over classes where both labels occur.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub value: f64,
    pub averaging: Averaging,
    /// Classes left out of a macro average for lacking one label value.
    pub skipped_classes: Vec<usize>,
}

pub fn roc_auc(m: &ScoreMatrix<'_>, averaging: Averaging) -> Result<AucResult, MetricError> {
    check_len(m.scores, m.labels)?;
    match averaging {
        Averaging::Micro => {
            Ok(AucResult { value: roc_auc_binary(m.scores, m.labels)?, averaging, skipped_classes: Vec::new() })
        }
        Averaging::Macro => {
            let mut vals = Vec::new();
            let mut skipped = Vec::new();
            for c in 0..m.n_classes {
                let (s, l) = m.column(c);
                match roc_auc_binary(&s, &l) {
                    Ok(v) => vals.push(v),
                    Err(MetricError::Degenerate) => skipped.push(c),
                    Err(e) => return Err(e),
                }
            }
            if vals.is_empty() {
                return Err(MetricError::Degenerate);
            }
            Ok(AucResult { value: vals.iter().sum::<f64>() / vals.len() as f64, averaging, skipped_classes: skipped })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// No predicted and no true positives: the score is 0 by convention.
    pub degenerate: bool,
}

/// Micro F1 with `p >= threshold` counted as a positive prediction.
pub fn f1_micro(probs: &[f64], labels: &[bool], threshold: f64) -> Result<F1Result, MetricError> {
    check_len(probs, labels)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(F1Result {
        f1: if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
        tp,
        fp,
        fn_,
        degenerate: denom == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: String,
    pub delta_ap: Option<f64>,
    pub group: Option<DeltaGroup>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaGroup {
    /// ΔAP > +0.05.
    Benefiting,
    /// |ΔAP| ≤ 0.05.
    Neutral,
    /// ΔAP < −0.05.
    Nonbenefiting,
}

pub const DELTA_THRESHOLD: f64 = 0.05;

pub fn delta_group(delta: f64) -> DeltaGroup {
    if delta > DELTA_THRESHOLD {
        DeltaGroup::Benefiting
    } else if delta < -DELTA_THRESHOLD {
        DeltaGroup::Nonbenefiting
    } else {
        DeltaGroup::Neutral
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// `None` for classes without positives in the evaluated set.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over defined per-class APs.
    pub map: f64,
    pub excluded_classes: Vec<usize>,
    pub micro_auc: Option<f64>,
    pub macro_auc: Option<f64>,
    pub macro_auc_skipped: Vec<usize>,
    pub micro_f1: f64,
    pub f1_threshold: f64,
    pub f1_degenerate: bool,
    pub n_items: usize,
    /// Filled by [`EvalReport::with_baseline`].
    pub baseline: Option<String>,
    pub delta: Option<Vec<ClassDelta>>,
}

impl EvalReport {
    /// Scores `probs` (sigmoid outputs, row-major items × classes) against `labels`.
    pub fn evaluate(
        variant: &str,
        seed: u64,
        class_names: &[String],
        probs: &[f64],
        labels: &[bool],
        threshold: f64,
    ) -> Result<Self, MetricError> {
        check_len(probs, labels)?;
        let c = class_names.len();
        let m = ScoreMatrix { scores: probs, labels, n_classes: c };
        let mut per_class_ap = Vec::with_capacity(c);
        let mut excluded = Vec::new();
        for k in 0..c {
            let (s, l) = m.column(k);
            match average_precision(&s, &l) {
                Ok(ap) => per_class_ap.push(Some(ap)),
                Err(MetricError::NoPositives) => {
                    per_class_ap.push(None);
                    excluded.push(k);
                }
                Err(e) => return Err(e),
            }
        }
        let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
        let map = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        let micro_auc = roc_auc(&m, Averaging::Micro).ok().map(|r| r.value);
        let (macro_auc, macro_auc_skipped) = match roc_auc(&m, Averaging::Macro) {
            Ok(r) => (Some(r.value), r.skipped_classes),
            Err(_) => (None, (0..c).collect()),
        };
        let f1 = f1_micro(probs, labels, threshold)?;
        Ok(Self {
            variant: variant.to_string(),
            seed,
            class_names: class_names.to_vec(),
            per_class_ap,
            map,
            excluded_classes: excluded,
            micro_auc,
            macro_auc,
            macro_auc_skipped,
            micro_f1: f1.f1,
            f1_threshold: threshold,
            f1_degenerate: f1.degenerate,
            n_items: m.n_items(),
            baseline: None,
            delta: None,
        })
    }

    /// Attaches per-class ΔAP relative to `baseline`.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Result<Self, MetricError> {
        let delta = per_class_delta(&self, baseline)?;
        self.baseline = Some(baseline.variant.clone());
        self.delta = Some(delta);
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `class,ap` rows; undefined APs are left empty.
    pub fn ap_csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for (name, ap) in self.class_names.iter().zip(&self.per_class_ap) {
            match ap {
                Some(v) => s.push_str(&format!("{name},{v}\n")),
                None => s.push_str(&format!("{name},\n")),
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("per_class_ap.csv"), self.ap_csv())
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// `AP_a − AP_b` per class, grouped at ±0.05.
pub fn per_class_delta(a: &EvalReport, b: &EvalReport) -> Result<Vec<ClassDelta>, MetricError> {
    if a.class_names != b.class_names {
        return Err(MetricError::ClassMismatch);
    }
    Ok(a.class_names
        .iter()
        .zip(a.per_class_ap.iter().zip(&b.per_class_ap))
        .map(|(name, (x, y))| {
            let delta_ap = match (x, y) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            };
            ClassDelta { class: name.clone(), delta_ap, group: delta_ap.map(delta_group) }
        })
        .collect())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
