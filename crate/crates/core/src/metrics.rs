//! Accuracy variants, Cohen's kappa and seed aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{HcatCode, Hierarchy};
use crate::error::{contract, Error, Result};

/// Counts indexed `[true][predicted]` over `labels`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub labels: Vec<HcatCode>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionTable {
    pub fn from_counts(labels: Vec<HcatCode>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(contract("confusion counts must be square over the label roster"));
        }
        Ok(ConfusionTable { labels, counts })
    }

    /// Label space is the union of both sequences, sorted.
    pub fn from_predictions(preds: &[HcatCode], labels: &[HcatCode]) -> Result<Self> {
        check_lengths(preds, labels)?;
        let roster: Vec<HcatCode> = labels
            .iter()
            .chain(preds)
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pos: BTreeMap<&HcatCode, usize> = roster.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let n = roster.len();
        let mut counts = vec![vec![0u64; n]; n];
        for (p, l) in preds.iter().zip(labels) {
            counts[pos[l]][pos[p]] += 1;
        }
        Ok(ConfusionTable {
            labels: roster,
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

fn check_lengths<T>(preds: &[T], labels: &[T]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(contract("accuracy over an empty set"));
    }
    Ok(())
}

pub fn overall_accuracy<T: PartialEq>(preds: &[T], labels: &[T]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hit = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hit as f64 / preds.len() as f64)
}

fn restricted<T: PartialEq>(preds: &[T], labels: &[T], keep: impl Fn(&T) -> bool, what: &str) -> Result<f64> {
    check_lengths(preds, labels)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        if keep(l) {
            n += 1;
            hit += usize::from(p == l);
        }
    }
    if n == 0 {
        return Err(Error::Degenerate(format!("no samples qualify for {what}")));
    }
    Ok(hit as f64 / n as f64)
}

/// Accuracy over samples whose true label is not `excluded`.
pub fn minority_class_accuracy<T: PartialEq>(preds: &[T], labels: &[T], excluded: &T) -> Result<f64> {
    restricted(preds, labels, |l| l != excluded, "minority-class accuracy")
}

/// Accuracy over samples whose true label is in `subset`.
pub fn subset_accuracy<T: Ord>(preds: &[T], labels: &[T], subset: &BTreeSet<T>) -> Result<f64> {
    restricted(preds, labels, |l| subset.contains(l), "subset accuracy")
}

/// A prediction counts as correct if it shares the label's parent at `level`.
pub fn parent_level_accuracy(
    preds: &[HcatCode],
    labels: &[HcatCode],
    level: u32,
    hierarchy: &Hierarchy,
) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut hit = 0;
    for (p, l) in preds.iter().zip(labels) {
        hit += usize::from(hierarchy.parent_at(p, level)? == hierarchy.parent_at(l, level)?);
    }
    Ok(hit as f64 / preds.len() as f64)
}

pub fn cohens_kappa(c: &ConfusionTable) -> Result<f64> {
    let total = c.total() as f64;
    if total == 0.0 {
        return Err(Error::Degenerate("kappa of an empty confusion table".into()));
    }
    let n = c.labels.len();
    let trace: u64 = (0..n).map(|i| c.counts[i][i]).sum();
    let p_o = trace as f64 / total;
    let mut p_e = 0.0;
    for k in 0..n {
        let row: u64 = c.counts[k].iter().sum();
        let col: u64 = c.counts.iter().map(|r| r[k]).sum();
        p_e += row as f64 * col as f64;
    }
    p_e /= total * total;
    if p_e == 1.0 {
        return if p_o == 1.0 {
            Ok(1.0)
        } else {
            Err(Error::Degenerate("chance agreement of one".into()))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub minority_class_accuracy: Option<f64>,
    pub kappa: f64,
    pub parent_accuracy: BTreeMap<u32, f64>,
    pub subset_accuracy: BTreeMap<String, f64>,
    pub confusion: ConfusionTable,
}

impl MetricsReport {
    /// Full report over `preds` and `labels`. Subsets with no qualifying
    /// label are skipped with a warning rather than failing the report.
    pub fn evaluate(
        preds: &[HcatCode],
        labels: &[HcatCode],
        majority: Option<&HcatCode>,
        hierarchy: &Hierarchy,
        subsets: &BTreeMap<String, BTreeSet<HcatCode>>,
    ) -> Result<Self> {
        let confusion = ConfusionTable::from_predictions(preds, labels)?;
        let minority_class_accuracy = match majority {
            Some(m) => match minority_class_accuracy(preds, labels, m) {
                Ok(v) => Some(v),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        let mut parent_accuracy = BTreeMap::new();
        for level in hierarchy.levels() {
            parent_accuracy.insert(level, parent_level_accuracy(preds, labels, level, hierarchy)?);
        }
        let mut subset_acc = BTreeMap::new();
        for (name, set) in subsets {
            match subset_accuracy(preds, labels, set) {
                Ok(v) => {
                    subset_acc.insert(name.clone(), v);
                }
                Err(Error::Degenerate(_)) => log::warn!("subset {name} has no test labels"),
                Err(e) => return Err(e),
            }
        }
        Ok(MetricsReport {
            overall_accuracy: overall_accuracy(preds, labels)?,
            minority_class_accuracy,
            kappa: cohens_kappa(&confusion).unwrap_or(0.0),
            parent_accuracy,
            subset_accuracy: subset_acc,
            confusion,
        })
    }

    /// Scalar metrics keyed by name.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("oa".to_string(), self.overall_accuracy);
        if let Some(v) = self.minority_class_accuracy {
            m.insert("mca".to_string(), v);
        }
        m.insert("kappa".to_string(), self.kappa);
        for (l, v) in &self.parent_accuracy {
            m.insert(format!("parent_l{l}"), *v);
        }
        for (k, v) in &self.subset_accuracy {
            m.insert(format!("subset_{k}"), *v);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub values: BTreeMap<String, Vec<f64>>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Per-metric mean and (n-1) standard deviation across seeds.
pub fn aggregate_seeds(reports: &[(u64, MetricsReport)]) -> Result<SeedSummary> {
    if reports.len() < 2 {
        return Err(contract("aggregation needs at least two reports"));
    }
    let keys: Vec<String> = reports[0].1.scalars().into_keys().collect();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (seed, r) in reports {
        let s = r.scalars();
        if s.keys().ne(keys.iter()) {
            return Err(contract(format!("report for seed {seed} has different metric keys")));
        }
        for (k, v) in s {
            values.entry(k).or_default().push(v);
        }
    }
    let seeds: Vec<u64> = reports.iter().map(|r| r.0).collect();
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(contract("duplicate seed in aggregation"));
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (k, v) in &values {
        let (m, s) = mean_std(v);
        mean.insert(k.clone(), m);
        std.insert(k.clone(), s);
    }
    Ok(SeedSummary {
        seeds,
        values,
        mean,
        std,
    })
}
