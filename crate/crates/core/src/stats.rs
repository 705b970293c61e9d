//! Rater consensus, agreement and reliability, and paired/unpaired significance tests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no rated items{0}")]
    NoItems(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("every paired difference is zero")]
    AllZeroDifferences,
    #[error("both samples have zero variance")]
    DegenerateVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("annotation csv: {0}")]
    Csv(String),
}

/// Raters × items; `None` marks a missing rating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    pub raters: Vec<String>,
    pub items: Vec<String>,
    pub cells: Vec<Vec<Option<u8>>>,
}

/// Cell text for a missing rating in CSV form.
pub const MISSING: &str = "NA";

impl AnnotationMatrix {
    pub fn new(cells: Vec<Vec<Option<u8>>>) -> Result<Self, StatsError> {
        let n = cells.first().map_or(0, |r| r.len());
        if cells.len() < 2 {
            return Err(StatsError::InsufficientData("need at least two raters".into()));
        }
        if let Some(r) = cells.iter().find(|r| r.len() != n) {
            return Err(StatsError::LengthMismatch(r.len(), n));
        }
        Ok(Self {
            raters: (0..cells.len()).map(|r| format!("r{r}")).collect(),
            items: (0..n).map(|i| format!("i{i}")).collect(),
            cells,
        })
    }

    /// Dense binary ratings, one row per rater.
    pub fn from_binary(rows: &[Vec<u8>]) -> Result<Self, StatsError> {
        Self::new(rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect())
    }

    pub fn n_raters(&self) -> usize {
        self.cells.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, i: usize) -> impl Iterator<Item = u8> + '_ {
        self.cells.iter().filter_map(move |r| r[i])
    }

    /// Header `rater,<item ids...>`, then one row per rater; missing cells read `NA` or empty.
    pub fn from_csv(text: &str) -> Result<Self, StatsError> {
        let err = |e: csv::Error| StatsError::Csv(e.to_string());
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(err)?.clone();
        let items: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut raters = Vec::new();
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(err)?;
            let mut it = rec.iter();
            raters.push(it.next().unwrap_or_default().to_string());
            let row = it
                .map(|c| match c {
                    "" | MISSING => Ok(None),
                    "0" => Ok(Some(0)),
                    "1" => Ok(Some(1)),
                    other => Err(StatsError::Csv(format!("cell {other:?} is not 0, 1 or {MISSING}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            cells.push(row);
        }
        let mut m = Self::new(cells)?;
        if m.n_items() != items.len() {
            return Err(StatsError::LengthMismatch(m.n_items(), items.len()));
        }
        m.raters = raters;
        m.items = items;
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rater".to_string()];
        header.extend(self.items.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (name, row) in self.raters.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.map_or(MISSING.to_string(), |v| v.to_string())));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn read(path: &Path) -> Result<Self, StatsError> {
        let text = std::fs::read_to_string(path).map_err(|e| StatsError::Csv(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusLabels {
    pub labels: Vec<u8>,
    pub threshold: f64,
}

/// Positive when at least `ceil(threshold · raters_i)` of the item's raters marked it;
/// missing ratings shrink that item's rater count. Items nobody rated are negative.
pub fn majority_vote(m: &AnnotationMatrix, threshold: f64) -> ConsensusLabels {
    let labels = (0..m.n_items())
        .map(|i| {
            let (mut pos, mut n) = (0usize, 0usize);
            for v in m.item(i) {
                n += 1;
                pos += usize::from(v == 1);
            }
            let need = (threshold * n as f64 - 1e-9).ceil().max(1.0) as usize;
            u8::from(n > 0 && pos >= need)
        })
        .collect();
    ConsensusLabels { labels, threshold }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub per_rater: Vec<f64>,
    pub mean: f64,
}

/// Fraction of each rater's rated items that match the consensus.
pub fn percent_agreement(m: &AnnotationMatrix, consensus: &ConsensusLabels) -> Result<Agreement, StatsError> {
    if consensus.labels.len() != m.n_items() {
        return Err(StatsError::LengthMismatch(consensus.labels.len(), m.n_items()));
    }
    let mut per_rater = Vec::with_capacity(m.n_raters());
    for (r, row) in m.cells.iter().enumerate() {
        let (mut same, mut n) = (0usize, 0usize);
        for (c, &v) in row.iter().zip(&consensus.labels) {
            if let Some(c) = c {
                n += 1;
                same += usize::from(*c == v);
            }
        }
        if n == 0 {
            return Err(StatsError::NoItems(format!(" for rater {}", m.raters[r])));
        }
        per_rater.push(same as f64 / n as f64);
    }
    let mean = per_rater.iter().sum::<f64>() / per_rater.len() as f64;
    Ok(Agreement { per_rater, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Alpha {
    Value(f64),
    /// A single category occurs among pairable ratings; α is undefined.
    NoVariation,
}

impl Alpha {
    pub fn value(self) -> Option<f64> {
        match self {
            Alpha::Value(v) => Some(v),
            Alpha::NoVariation => None,
        }
    }
}

/// Krippendorff's α for nominal data via the coincidence matrix. Items with fewer than
/// two ratings are not pairable and are skipped.
pub fn krippendorff_alpha_nominal(m: &AnnotationMatrix) -> Result<Alpha, StatsError> {
    let mut coincidence: BTreeMap<(u8, u8), f64> = BTreeMap::new();
    let mut pairable = 0usize;
    for i in 0..m.n_items() {
        let vals: Vec<u8> = m.item(i).collect();
        let mu = vals.len();
        if mu < 2 {
            continue;
        }
        pairable += 1;
        let mut counts: BTreeMap<u8, f64> = BTreeMap::new();
        for &v in &vals {
            *counts.entry(v).or_default() += 1.0;
        }
        let w = 1.0 / (mu - 1) as f64;
        for (&c, &nc) in &counts {
            for (&k, &nk) in &counts {
                let pairs = if c == k { nc * (nc - 1.0) } else { nc * nk };
                *coincidence.entry((c, k)).or_default() += pairs * w;
            }
        }
    }
    if pairable < 2 {
        return Err(StatsError::InsufficientData("need at least two items with two or more ratings".into()));
    }
    let mut marginal: BTreeMap<u8, f64> = BTreeMap::new();
    for (&(c, _), &o) in &coincidence {
        *marginal.entry(c).or_default() += o;
    }
    if marginal.values().filter(|&&v| v > 0.0).count() < 2 {
        return Ok(Alpha::NoVariation);
    }
    let n: f64 = marginal.values().sum();
    let d_o: f64 = coincidence.iter().filter(|((c, k), _)| c != k).map(|(_, o)| o).sum::<f64>() / n;
    let d_e = 1.0 - marginal.values().map(|nc| nc * (nc - 1.0)).sum::<f64>() / (n * (n - 1.0));
    Ok(Alpha::Value(1.0 - d_o / d_e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W−)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p: f64,
    pub method: PMethod,
}

/// Largest effective sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired signed-rank test on `x − y`. Zero differences are dropped and tied
/// magnitudes get midranks.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&mags);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let (p, method) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_signed_rank_p(&ranks, w), PMethod::Exact)
    } else {
        (normal_signed_rank_p(&mags, n, w), PMethod::Normal)
    };
    Ok(WilcoxonResult { w, w_plus, w_minus, n, p, method })
}

/// `min(1, 2·P(T ≤ w))` where T is the positive-rank sum under random signs. Ranks are
/// doubled so midranks become integers for the subset-sum count.
fn exact_signed_rank_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut ways = vec![0u64; max + 1];
    ways[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if ways[s] > 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let below: u64 = ways[..=limit.min(max)].iter().sum();
    let p = 2.0 * below as f64 / 2f64.powi(ranks.len() as i32);
    p.min(1.0)
}

fn normal_signed_rank_p(mags: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties: BTreeMap<u64, f64> = BTreeMap::new();
    for m in mags {
        *ties.entry(m.to_bits()).or_default() += 1.0;
    }
    let correction: f64 = ties.values().map(|t| t * t * t - t).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - correction;
    if var <= 0.0 {
        return 1.0;
    }
    // w is the smaller tail, so the continuity shift moves it toward the mean.
    let z = ((w - mean + 0.5) / var.sqrt()).min(0.0);
    let normal = Normal::standard();
    (2.0 * normal.cdf(z)).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::InsufficientData("each sample needs at least two values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::InsufficientData(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_fixture() {
        let m = AnnotationMatrix::from_binary(&[vec![1, 1, 0, 0], vec![1, 0, 0, 0]]).unwrap();
        let a = krippendorff_alpha_nominal(&m).unwrap().value().unwrap();
        assert!((a - (1.0 - 0.25 / (30.0 / 56.0))).abs() < 1e-12);
        assert!((a - 0.533333333).abs() < 1e-9);
    }

    #[test]
    fn alpha_no_variation_and_agreement() {
        let m = AnnotationMatrix::from_binary(&[vec![1, 1, 1], vec![1, 1, 1]]).unwrap();
        assert_eq!(krippendorff_alpha_nominal(&m).unwrap(), Alpha::NoVariation);
        let m = AnnotationMatrix::from_binary(&[vec![1, 0, 1], vec![1, 0, 1]]).unwrap();
        assert_eq!(krippendorff_alpha_nominal(&m).unwrap(), Alpha::Value(1.0));
    }

    #[test]
    fn vote_boundaries() {
        let col = |pos: usize, rated: usize, total: usize| -> Vec<Vec<Option<u8>>> {
            (0..total)
                .map(|r| {
                    vec![if r < pos {
                        Some(1)
                    } else if r < rated {
                        Some(0)
                    } else {
                        None
                    }]
                })
                .collect()
        };
        let vote = |c| majority_vote(&AnnotationMatrix::new(c).unwrap(), 0.5).labels[0];
        assert_eq!(vote(col(5, 10, 10)), 1);
        assert_eq!(vote(col(4, 10, 10)), 0);
        assert_eq!(vote(col(3, 6, 10)), 1);
        assert_eq!(vote(col(0, 0, 10)), 0);
    }

    #[test]
    fn wilcoxon_shift_example() {
        let y = [0.1, 0.5, 0.2, 0.9, 0.4];
        let x: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p, 2.0 / 32.0);
        assert_eq!(wilcoxon_signed_rank(&y, &y), Err(StatsError::AllZeroDifferences));
    }

    #[test]
    fn welch_edges() {
        let a = [0.2, 0.4, 0.9];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let a: Vec<f64> = (0..5).map(|i| i as f64 * 1e-9).collect();
        let b: Vec<f64> = (0..5).map(|i| 1.0 + i as f64 * 1e-9).collect();
        assert!(welch_t_test(&a, &b).unwrap().p < 1e-6);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]), Err(StatsError::DegenerateVariance));
    }
}
