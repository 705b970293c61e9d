//! Maps scores over a source label set onto target labels by word-embedding similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gsc::EmbeddingFile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZeroShotError {
    #[error("no token of label {0:?} is in the embedding vocabulary")]
    AllTokensOov(String),
    #[error("label is empty")]
    EmptyLabel,
    #[error("mapping file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mapping names unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("expected {expected} source scores, got {got}")]
    ScoreLength { expected: usize, got: usize },
}

/// Lowercased tokens split on whitespace, underscores, slashes, parentheses and commas.
pub fn label_tokens(label: &str) -> Vec<String> {
    label
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || matches!(c, '_' | '/' | '(' | ')' | ','))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Mean of the in-vocabulary token vectors; unknown tokens are skipped.
pub fn label_embed(label: &str, table: &EmbeddingFile) -> Result<Vec<f64>, ZeroShotError> {
    let tokens = label_tokens(label);
    if tokens.is_empty() {
        return Err(ZeroShotError::EmptyLabel);
    }
    let mut acc = vec![0.0; table.dim()];
    let mut hits = 0usize;
    for t in &tokens {
        if let Some(v) = table.get(t) {
            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += f64::from(x));
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(ZeroShotError::AllTokensOov(label.to_string()));
    }
    acc.iter_mut().for_each(|a| *a /= hits as f64);
    Ok(acc)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub source: String,
    pub target: Option<String>,
    /// Cosine to the chosen target, or to the best candidate when unassigned.
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMapping {
    pub tau: f64,
    pub targets: Vec<String>,
    pub entries: Vec<MappingEntry>,
    /// Sources skipped because none of their tokens were embeddable.
    pub oov_sources: Vec<String>,
}

pub const DEFAULT_TAU: f64 = 0.4;

/// Each source goes to its most similar target when that cosine reaches `tau`; ties keep
/// the earlier target.
pub fn build_mapping(
    sources: &[String],
    targets: &[String],
    table: &EmbeddingFile,
    tau: f64,
) -> Result<LabelMapping, ZeroShotError> {
    let target_vecs = targets.iter().map(|t| label_embed(t, table)).collect::<Result<Vec<_>, _>>()?;
    let mut entries = Vec::with_capacity(sources.len());
    let mut oov_sources = Vec::new();
    for s in sources {
        let v = match label_embed(s, table) {
            Ok(v) => v,
            Err(ZeroShotError::AllTokensOov(_)) | Err(ZeroShotError::EmptyLabel) => {
                oov_sources.push(s.clone());
                entries.push(MappingEntry { source: s.clone(), target: None, similarity: None });
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, tv) in target_vecs.iter().enumerate() {
            let c = cosine(&v, tv);
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let (target, similarity) = match best {
            Some((j, c)) if c >= tau => (Some(targets[j].clone()), Some(c)),
            Some((_, c)) => (None, Some(c)),
            None => (None, None),
        };
        entries.push(MappingEntry { source: s.clone(), target, similarity });
    }
    Ok(LabelMapping { tau, targets: targets.to_vec(), entries, oov_sources })
}

impl LabelMapping {
    /// One `{"source", "target", "similarity"}` object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }

    /// Reads a mapping file, e.g. a released one, against a known target list.
    pub fn from_jsonl(text: &str, targets: &[String], tau: f64) -> Result<Self, ZeroShotError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: MappingEntry =
                serde_json::from_str(line).map_err(|err| ZeroShotError::Parse { line: i + 1, msg: err.to_string() })?;
            if let Some(t) = &e.target {
                if !targets.contains(t) {
                    return Err(ZeroShotError::UnknownLabel { kind: "target", label: t.clone() });
                }
            }
            entries.push(e);
        }
        Ok(Self { tau, targets: targets.to_vec(), entries, oov_sources: Vec::new() })
    }

    pub fn sources(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.source.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappedScores {
    pub scores: Vec<f64>,
    /// Targets no source maps to; their score is 0.
    pub uncovered: Vec<String>,
}

/// Per target, the maximum score among the sources assigned to it.
pub fn map_scores(source_scores: &[f64], mapping: &LabelMapping) -> Result<MappedScores, ZeroShotError> {
    if source_scores.len() != mapping.entries.len() {
        return Err(ZeroShotError::ScoreLength { expected: mapping.entries.len(), got: source_scores.len() });
    }
    let mut best: Vec<Option<f64>> = vec![None; mapping.targets.len()];
    for (e, &s) in mapping.entries.iter().zip(source_scores) {
        if let Some(t) = &e.target {
            let j = mapping
                .targets
                .iter()
                .position(|x| x == t)
                .ok_or_else(|| ZeroShotError::UnknownLabel { kind: "target", label: t.clone() })?;
            best[j] = Some(best[j].map_or(s, |b: f64| b.max(s)));
        }
    }
    let uncovered = mapping.targets.iter().zip(&best).filter(|(_, b)| b.is_none()).map(|(t, _)| t.clone()).collect();
    Ok(MappedScores { scores: best.into_iter().map(|b| b.unwrap_or(0.0)).collect(), uncovered })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_split_on_separators() {
        assert_eq!(label_tokens("Falling water/rain"), ["falling", "water", "rain"]);
        assert_eq!(label_tokens("bus_stop (Urban)"), ["bus", "stop", "urban"]);
    }
}
