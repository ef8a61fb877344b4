use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{HcatCode, ParcelSample};
use crate::error::{contract, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Assigns splits per class so each class is divided in the given
/// proportions. Within a class, the first splits get `round(f * n)` samples
/// and the last split takes the remainder.
pub fn assign_splits(samples: &mut [ParcelSample], fractions: &[(Split, f64)], seed: u64) -> Result<()> {
    let total: f64 = fractions.iter().map(|f| f.1).sum();
    if fractions.is_empty() || (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| f.1 < 0.0) {
        return Err(contract(format!("split fractions {fractions:?} do not sum to 1")));
    }
    let mut by_class: BTreeMap<HcatCode, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.hcat.clone()).or_default().push(i);
    }
    for (ci, (_, mut idx)) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut stream(seed, "split", ci as u64));
        let n = idx.len();
        let mut start = 0;
        for (k, (split, f)) in fractions.iter().enumerate() {
            let take = if k + 1 == fractions.len() {
                n - start
            } else {
                ((f * n as f64).round() as usize).min(n - start)
            };
            for &i in &idx[start..start + take] {
                samples[i].split = *split;
            }
            start += take;
        }
    }
    Ok(())
}

/// Seeded sorted subset of `min(n, indices.len())` entries.
pub fn fixed_subset(indices: &[usize], n: usize, seed: u64) -> Vec<usize> {
    if indices.len() <= n {
        return indices.to_vec();
    }
    let mut v = indices.to_vec();
    v.shuffle(&mut stream(seed, "subset", 0));
    v.truncate(n);
    v.sort_unstable();
    v
}
