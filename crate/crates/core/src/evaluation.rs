//! Grounding latent labels to ground truth by optimal assignment, and
//! pooled overall accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[a][b]` = points predicted `a` whose true class is `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || cols == 0 || counts.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("contingency table must be a non-empty rectangle".into()));
        }
        Ok(ContingencyTable { counts })
    }

    /// Table of size `max(num_pred, 1+max pred) × max(num_true, 1+max truth)`.
    pub fn from_labels(pred: &[usize], truth: &[usize], num_pred: usize, num_true: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                truth.len()
            )));
        }
        let rows = pred.iter().map(|p| p + 1).max().unwrap_or(0).max(num_pred).max(1);
        let cols = truth.iter().map(|t| t + 1).max().unwrap_or(0).max(num_true).max(1);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p][t] += 1;
        }
        Ok(ContingencyTable { counts })
    }

    pub fn num_pred(&self) -> usize {
        self.counts.len()
    }

    pub fn num_true(&self) -> usize {
        self.counts[0].len()
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred][truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Entrywise sum of two tables of the same size.
    pub fn merge(&mut self, other: &ContingencyTable) -> Result<()> {
        if self.num_pred() != other.num_pred() || self.num_true() != other.num_true() {
            return Err(Error::Contract("merging contingency tables of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// Maps each predicted class to a true class, or `None` when it is left
/// unmatched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub mapping: Vec<Option<usize>>,
    pub agreement: u64,
}

impl Assignment {
    pub fn relabel(&self, pred: &[usize]) -> Vec<Option<usize>> {
        pred.iter().map(|&p| self.mapping.get(p).copied().flatten()).collect()
    }
}

/// Minimum-cost perfect matching on a square matrix (shortest augmenting
/// paths with potentials). Returns the column assigned to each row.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            rows[owner[j] - 1] = j - 1;
        }
    }
    rows
}

fn optimum(cost: &[Vec<i64>]) -> i64 {
    if cost.is_empty() {
        return 0;
    }
    min_cost_assignment(cost).iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

fn without(cost: &[Vec<i64>], row: usize, col: usize) -> Vec<Vec<i64>> {
    cost.iter()
        .enumerate()
        .filter(|&(i, _)| i != row)
        .map(|(_, r)| r.iter().enumerate().filter(|&(j, _)| j != col).map(|(_, &v)| v).collect())
        .collect()
}

/// Lexicographically smallest optimal assignment: fix rows in order, each to
/// the lowest column that still admits an optimal completion.
fn lexicographic_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let mut remaining = cost.to_vec();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut target = optimum(cost);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = None;
        for (local, &col) in free_cols.iter().enumerate() {
            let rest = without(&remaining, 0, local);
            let total = remaining[0][local] + optimum(&rest);
            if total == target {
                chosen = Some((local, col, rest));
                break;
            }
        }
        let (local, col, rest) = chosen.expect("an optimal column always exists");
        target -= remaining[0][local];
        out.push(col);
        free_cols.remove(local);
        remaining = rest;
    }
    out
}

/// One-to-one assignment of predicted to true classes maximizing the number
/// of agreeing points. Rectangular tables are padded with empty dummy
/// classes; predicted classes paired with a dummy map to `None`.
pub fn hungarian_match(table: &ContingencyTable) -> Assignment {
    let n = table.num_pred().max(table.num_true());
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a < table.num_pred() && b < table.num_true() {
                        -(table.get(a, b) as i64)
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let cols = lexicographic_assignment(&cost);
    let mapping: Vec<Option<usize>> = cols[..table.num_pred()]
        .iter()
        .map(|&b| (b < table.num_true()).then_some(b))
        .collect();
    let agreement = mapping
        .iter()
        .enumerate()
        .filter_map(|(a, b)| b.map(|b| table.get(a, b)))
        .sum();
    Assignment { mapping, agreement }
}

/// Points correct after instance-wise matching, and the instance size.
pub fn matched_counts(pred: &[usize], truth: &[usize]) -> Result<(u64, u64)> {
    let table = ContingencyTable::from_labels(pred, truth, 1, 1)?;
    Ok((hungarian_match(&table).agreement, pred.len() as u64))
}

/// Fraction of points correct after relabelling predictions with the best
/// one-to-one class mapping for this instance.
pub fn matched_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (correct, total) = matched_counts(pred, truth)?;
    if total == 0 {
        return Err(Error::Contract("accuracy of an empty instance".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Direct agreement count, for the supervised level.
pub fn direct_counts(pred: &[usize], truth: &[usize]) -> Result<(u64, u64)> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok((correct as u64, pred.len() as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    /// Correct points over all points, pooled across instances.
    pub oa: f64,
    pub per_instance: Vec<f64>,
    pub correct: u64,
    pub total: u64,
}

/// Pools `(correct, total)` per instance into overall accuracy.
pub fn overall_accuracy(instances: &[(u64, u64)]) -> Result<LevelMetrics> {
    let correct: u64 = instances.iter().map(|c| c.0).sum();
    let total: u64 = instances.iter().map(|c| c.1).sum();
    if instances.is_empty() || total == 0 {
        return Err(Error::Contract("overall accuracy over zero points".into()));
    }
    let per_instance = instances
        .iter()
        .map(|&(c, t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(LevelMetrics {
        oa: correct as f64 / total as f64,
        per_instance,
        correct,
        total,
    })
}

/// Whether middle-level matching is solved per instance or once for the
/// whole dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchingScope {
    #[default]
    Instance,
    Dataset,
}

/// Middle-level metrics over a dataset of `(predicted, true)` label pairs.
pub fn middle_level_metrics(
    instances: &[(Vec<usize>, Vec<usize>)],
    num_pred: usize,
    num_true: usize,
    scope: MatchingScope,
) -> Result<LevelMetrics> {
    match scope {
        MatchingScope::Instance => {
            let counts = instances
                .iter()
                .map(|(p, t)| matched_counts(p, t))
                .collect::<Result<Vec<_>>>()?;
            overall_accuracy(&counts)
        }
        MatchingScope::Dataset => {
            let rows = instances.iter().flat_map(|(p, _)| p).map(|p| p + 1).max().unwrap_or(0).max(num_pred);
            let cols = instances.iter().flat_map(|(_, t)| t).map(|t| t + 1).max().unwrap_or(0).max(num_true);
            let mut pooled = ContingencyTable::from_labels(&[], &[], rows, cols)?;
            for (p, t) in instances {
                pooled.merge(&ContingencyTable::from_labels(p, t, rows, cols)?)?;
            }
            let assignment = hungarian_match(&pooled);
            let counts = instances
                .iter()
                .map(|(p, t)| {
                    let mapped = assignment.relabel(p);
                    let correct = mapped.iter().zip(t).filter(|(m, t)| **m == Some(**t)).count();
                    (correct as u64, p.len() as u64)
                })
                .collect::<Vec<_>>();
            overall_accuracy(&counts)
        }
    }
}
