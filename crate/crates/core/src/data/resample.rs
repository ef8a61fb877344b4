use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{Corpus, HcatCode};
use crate::rng::stream;

pub fn class_counts(corpus: &Corpus) -> BTreeMap<HcatCode, usize> {
    let mut m = BTreeMap::new();
    for s in &corpus.samples {
        *m.entry(s.hcat.clone()).or_default() += 1;
    }
    m
}

/// Median with the mean of the two middle values rounded half up.
pub fn median_round_half_up(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]).div_ceil(2)
    })
}

/// Downsamples `majority` to the median count of the remaining classes.
///
/// The retained samples are a uniform subset drawn under `seed`, kept in
/// their original order. Other classes are untouched. A class already at or
/// below the median is left alone, which makes the operation idempotent.
pub fn resample_majority(corpus: &Corpus, majority: &HcatCode, seed: u64) -> Corpus {
    let counts = class_counts(corpus);
    let Some(&count) = counts.get(majority) else {
        log::warn!("majority class {majority} absent; resampling skipped");
        return corpus.clone();
    };
    let others: Vec<usize> = counts
        .iter()
        .filter(|(c, _)| *c != majority)
        .map(|(_, &n)| n)
        .collect();
    let Some(target) = median_round_half_up(&others) else {
        return corpus.clone();
    };
    if count <= target {
        return corpus.clone();
    }
    let mut idx: Vec<usize> = (0..corpus.samples.len())
        .filter(|&i| corpus.samples[i].hcat == *majority)
        .collect();
    idx.shuffle(&mut stream(seed, "resample", 0));
    let mut keep = vec![true; corpus.samples.len()];
    for &i in &idx[target..] {
        keep[i] = false;
    }
    let samples = corpus
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Corpus::new(samples, corpus.manifest.clone())
}
