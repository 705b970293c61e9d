//! Clip manifests and multi-label stratified splitting.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid record {id}: {msg}")]
    InvalidRecord { id: String, msg: String },
    #[error("labels with fewer than 3 positives cannot cover every subset: {labels:?}")]
    InfeasibleSplit { labels: Vec<usize> },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: PathBuf,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsc_tags: Option<Vec<String>>,
    /// Key of a precomputed context vector in the run's vector file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsc_embedding_ref: Option<String>,
}

impl ClipRecord {
    pub fn has_label(&self, c: usize) -> bool {
        self.labels.get(c) == Some(&1)
    }

    pub fn has_gsc(&self) -> bool {
        self.gsc_tags.is_some() || self.gsc_embedding_ref.is_some()
    }
}

/// Checks labels are binary, ids unique and label vectors equally long.
pub fn validate_records(records: &[ClipRecord]) -> Result<usize, DatasetError> {
    let n_classes = records.first().map_or(0, |r| r.labels.len());
    let mut ids = HashSet::new();
    for r in records {
        let bad = |msg: String| DatasetError::InvalidRecord { id: r.id.clone(), msg };
        if !ids.insert(r.id.as_str()) {
            return Err(bad("duplicate id".into()));
        }
        if r.labels.len() != n_classes {
            return Err(bad(format!("{} labels, expected {n_classes}", r.labels.len())));
        }
        if r.labels.iter().any(|&v| v > 1) {
            return Err(bad("labels must be 0 or 1".into()));
        }
    }
    Ok(n_classes)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>, DatasetError> {
    let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::path::absolute(parent).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ClipRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.audio_path.is_relative() {
            rec.audio_path = base.join(&rec.audio_path);
        }
        out.push(rec);
    }
    validate_records(&out)?;
    Ok(out)
}

pub fn manifest_text(records: &[ClipRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    }
    crate::geo::write_atomic(path, manifest_text(records).as_bytes())
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Train, validation and test shares.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fractions: [0.70, 0.15, 0.15], seed: 0 }
    }
}

/// Record indices per subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn subsets(&self) -> [&Vec<usize>; 3] {
        [&self.train, &self.val, &self.test]
    }
}

pub const SUBSET_NAMES: [&str; 3] = ["train", "val", "test"];

/// Iterative stratification: the label with the fewest unassigned positives is handled
/// first, and each of its clips goes to the subset whose demand for that label is largest.
/// Ties fall to the larger remaining capacity, then to a seeded coin.
pub fn iterative_stratified_split(records: &[ClipRecord], spec: &SplitSpec) -> Result<Split, DatasetError> {
    let sum: f64 = spec.fractions.iter().sum();
    if spec.fractions.iter().any(|&f| !(f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidSpec(format!("fractions {:?} must be positive and sum to 1", spec.fractions)));
    }
    let n_classes = validate_records(records)?;
    let counts: Vec<usize> = (0..n_classes).map(|c| records.iter().filter(|r| r.has_label(c)).count()).collect();
    let short: Vec<usize> = (0..n_classes).filter(|&c| counts[c] < 3).collect();
    if !short.is_empty() {
        return Err(DatasetError::InfeasibleSplit { labels: short });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = records.len() as f64;
    let mut capacity: Vec<f64> = spec.fractions.iter().map(|f| f * n).collect();
    let mut demand: Vec<Vec<f64>> =
        spec.fractions.iter().map(|f| counts.iter().map(|&k| f * k as f64).collect()).collect();
    let mut assigned: Vec<Option<usize>> = vec![None; records.len()];
    let mut remaining = counts.clone();

    // Full subsets drop out of the running unless every subset is full.
    let pick = |rng: &mut ChaCha8Rng, capacity: &[f64], key: &dyn Fn(usize) -> (f64, f64)| -> usize {
        let open: Vec<usize> = match (0..3).filter(|&j| capacity[j] >= 0.5).collect::<Vec<_>>() {
            v if v.is_empty() => (0..3).collect(),
            v => v,
        };
        let best =
            open.iter().map(|&j| key(j)).fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
        let tied: Vec<usize> = open.into_iter().filter(|&j| key(j) == best).collect();
        tied[rng.random_range(0..tied.len())]
    };

    let place = |i: usize,
                 j: usize,
                 assigned: &mut Vec<Option<usize>>,
                 capacity: &mut Vec<f64>,
                 demand: &mut Vec<Vec<f64>>,
                 remaining: &mut Vec<usize>| {
        assigned[i] = Some(j);
        capacity[j] -= 1.0;
        for c in 0..n_classes {
            if records[i].has_label(c) {
                demand[j][c] -= 1.0;
                remaining[c] -= 1;
            }
        }
    };

    loop {
        let label = (0..n_classes).filter(|&c| remaining[c] > 0).min_by_key(|&c| (remaining[c], c));
        let Some(label) = label else { break };
        let mut members: Vec<usize> =
            (0..records.len()).filter(|&i| assigned[i].is_none() && records[i].has_label(label)).collect();
        members.shuffle(&mut rng);
        for i in members {
            let j = pick(&mut rng, &capacity, &|j| (demand[j][label], capacity[j]));
            place(i, j, &mut assigned, &mut capacity, &mut demand, &mut remaining);
        }
    }
    let mut unlabeled: Vec<usize> = (0..records.len()).filter(|&i| assigned[i].is_none()).collect();
    unlabeled.shuffle(&mut rng);
    for i in unlabeled {
        let j = pick(&mut rng, &capacity, &|j| (capacity[j], 0.0));
        place(i, j, &mut assigned, &mut capacity, &mut demand, &mut remaining);
    }

    // Repair: give every label a test positive, taking it from the subset holding the most.
    let mut subset: Vec<usize> = assigned.into_iter().map(|a| a.expect("all assigned")).collect();
    for c in 0..n_classes {
        let in_subset = |subset: &[usize], j: usize| {
            (0..records.len()).filter(|&i| subset[i] == j && records[i].has_label(c)).count()
        };
        if in_subset(&subset, 2) > 0 {
            continue;
        }
        let donor = if in_subset(&subset, 0) >= in_subset(&subset, 1) { 0 } else { 1 };
        // Prefer the clip whose move disturbs the fewest other labels.
        let moved = (0..records.len())
            .filter(|&i| subset[i] == donor && records[i].has_label(c))
            .min_by_key(|&i| (records[i].labels.iter().filter(|&&v| v == 1).count(), i));
        if let Some(i) = moved {
            subset[i] = 2;
        }
    }

    refine(records, n_classes, &counts, &mut subset);

    let collect = |j: usize| (0..records.len()).filter(|&i| subset[i] == j).collect();
    Ok(Split { train: collect(0), val: collect(1), test: collect(2) })
}

/// Size-preserving swaps between subsets that lower the squared
/// gap between each subset's label counts and its share at global prevalence; the
/// fourth power makes the worst labels dominate. A swap never
/// removes a label's last test positive.
fn refine(records: &[ClipRecord], n_classes: usize, counts: &[usize], subset: &mut [usize]) {
    let mut have = vec![vec![0i64; n_classes]; 3];
    let mut size = [0usize; 3];
    for (i, &j) in subset.iter().enumerate() {
        size[j] += 1;
        for c in 0..n_classes {
            have[j][c] += i64::from(records[i].labels[c]);
        }
    }
    let n = records.len() as f64;
    let target: Vec<Vec<f64>> =
        size.iter().map(|&m| counts.iter().map(|&k| m as f64 * k as f64 / n).collect()).collect();
    // Change in Σ (have − target)⁴ for subset j when its count of label c moves by d.
    let cost = |have: &[Vec<i64>], j: usize, c: usize, d: i64| {
        let now = have[j][c] as f64 - target[j][c];
        let next = now + d as f64;
        next.powi(4) - now.powi(4)
    };
    for _ in 0..20 {
        let mut improved = false;
        for (held, other) in [(2usize, 0usize), (1, 0), (2, 1)] {
            let members: Vec<usize> = (0..subset.len()).filter(|&i| subset[i] == held).collect();
            for a in members {
                let mut best: Option<(f64, usize)> = None;
                for b in (0..subset.len()).filter(|&i| subset[i] == other) {
                    let mut gain = 0.0;
                    let mut keeps_test = true;
                    for c in 0..n_classes {
                        let d = i64::from(records[b].labels[c]) - i64::from(records[a].labels[c]);
                        if d != 0 {
                            gain += cost(&have, held, c, d) + cost(&have, other, c, -d);
                            if held == 2 && have[2][c] + d == 0 {
                                keeps_test = false;
                            }
                        }
                    }
                    if keeps_test && gain < -1e-9 && best.is_none_or(|(g, _)| gain < g) {
                        best = Some((gain, b));
                    }
                }
                if let Some((_, b)) = best {
                    for c in 0..n_classes {
                        let d = i64::from(records[b].labels[c]) - i64::from(records[a].labels[c]);
                        have[held][c] += d;
                        have[other][c] -= d;
                    }
                    subset[a] = other;
                    subset[b] = held;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Per-label positive fraction over the given records.
pub fn prevalence(records: &[ClipRecord], idx: &[usize], n_classes: usize) -> Vec<f64> {
    (0..n_classes)
        .map(|c| {
            let k = idx.iter().filter(|&&i| records[i].has_label(c)).count();
            k as f64 / idx.len().max(1) as f64
        })
        .collect()
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn write_split(dir: &Path, records: &[ClipRecord], split: &Split) -> Result<(), DatasetError> {
    for (name, idx) in SUBSET_NAMES.iter().zip(split.subsets()) {
        let subset: Vec<ClipRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        write_manifest(&dir.join(format!("{name}.jsonl")), &subset)?;
    }
    Ok(())
}
