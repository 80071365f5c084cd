//! Clustering quality: Hungarian-matched accuracy, NMI and ARI.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A partition of `N >= 1` items given as integer cluster ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling(Vec<usize>);

impl Labeling {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("a labeling needs at least one item"));
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of distinct ids.
    pub fn clusters(&self) -> usize {
        let mut ids = self.0.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Dense re-indexing of ids to `0..k` in ascending id order.
fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut index = BTreeMap::new();
    for &l in labels {
        let next = index.len();
        index.entry(l).or_insert(next);
    }
    // BTreeMap iteration is sorted; remap so dense ids follow id order
    let order: BTreeMap<usize, usize> = index.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    (labels.iter().map(|l| order[l]).collect(), order.len())
}

/// Counts `table[p][t]` of items in predicted cluster `p` and true class `t`.
pub fn contingency(pred: &Labeling, truth: &Labeling) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "labelings differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (p, kp) = dense_ids(&pred.0);
    let (t, kt) = dense_ids(&truth.0);
    let mut table = vec![vec![0u64; kt]; kp];
    for (a, b) in p.into_iter().zip(t) {
        table[a][b] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect assignment on a square cost matrix, `O(n³)`
/// (shortest augmenting paths with potentials). Returns `col_for_row`.
pub fn hungarian_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_for_row = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_for_row[row_of[j] - 1] = j - 1;
        }
    }
    col_for_row
}

/// Fraction of items correctly labelled under the best one-to-one map from
/// predicted clusters to true classes.
pub fn accuracy_hungarian(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let size = table.len().max(table[0].len());
    let max = table.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|r| {
            (0..size)
                .map(|c| max - table.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0) as f64)
                .collect()
        })
        .collect();
    let assignment = hungarian_min_cost(&cost);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .filter_map(|(r, &c)| table.get(r).and_then(|row| row.get(c)).copied())
        .sum();
    Ok(matched as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalization {
    /// `MI / ((H(p) + H(t)) / 2)`
    #[default]
    Arithmetic,
    /// `MI / sqrt(H(p) H(t))`
    Geometric,
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .abs()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Arithmetic)
}

/// NMI in `[0, 1]`. When either partition has zero entropy the score is 1 if
/// the partitions are identical single clusters and 0 otherwise.
pub fn nmi_with(pred: &Labeling, truth: &Labeling, norm: NmiNormalization) -> Result<f64> {
    let table = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..table[0].len()).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let hp = entropy(rows.iter().copied(), n);
    let ht = entropy(cols.iter().copied(), n);
    if hp == 0.0 || ht == 0.0 {
        return Ok(if hp == 0.0 && ht == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            if count > 0 {
                let joint = count as f64 / n;
                mi += joint * (count as f64 * n / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (hp + ht),
        NmiNormalization::Geometric => (hp * ht).sqrt(),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> f64 {
    (c as f64) * (c as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts over the contingency table.
pub fn ari(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::invalid("ARI needs at least two items"));
    }
    let table = contingency(pred, truth)?;
    let n = pred.len() as u64;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let row_pairs: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let col_pairs: f64 = (0..table[0].len())
        .map(|c| pairs(table.iter().map(|r| r[c]).sum()))
        .sum();
    let expected = row_pairs * col_pairs / pairs(n);
    let max_index = 0.5 * (row_pairs + col_pairs);
    if max_index == expected {
        // both partitions trivial in the same way: perfect agreement
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Shannon entropy (nats) of the label histogram; `ln K` is the balanced maximum.
pub fn label_entropy(labels: &[usize]) -> f64 {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0u64) += 1;
    }
    entropy(counts.into_values(), labels.len() as f64)
}

/// Evaluation report, serialized as `{nmi, acc, ari, n, k_pred, k_true, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    pub n: usize,
    pub k_pred: usize,
    pub k_true: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn compute(pred: &Labeling, truth: &Labeling, seed: u64) -> Result<Self> {
        Ok(Self {
            nmi: nmi(pred, truth)?,
            acc: accuracy_hungarian(pred, truth)?,
            ari: ari(pred, truth)?,
            n: pred.len(),
            k_pred: pred.clusters(),
            k_true: truth.clusters(),
            seed,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
