//! Parcel time series, crop-class codes, corpus files and splits.

mod resample;
mod splits;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub use resample::{class_counts, median_round_half_up, resample_majority};
pub use splits::{assign_splits, fixed_subset, Split};
pub use synth::{generate_synthetic, synthetic_hierarchy, SynthConfig, SynthRegion};

/// Sentinel-2 band order in stored `S2` rows.
pub const S2_BANDS: [&str; 13] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12",
];
pub const S2_GROUP: &str = "S2";
pub const B04: usize = 3;
pub const B08: usize = 7;
pub const B10: usize = 10;

/// Indices of the 12 bands used by supervised models (cirrus band dropped).
pub fn s2_supervised_channels() -> Vec<usize> {
    (0..13).filter(|&i| i != B10).collect()
}

/// Hierarchical crop-class code: a fixed-length decimal string.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HcatCode(pub String);

impl HcatCode {
    pub fn new(code: impl Into<String>) -> Self {
        HcatCode(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for HcatCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Taxonomy levels mapped to code prefix lengths.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hierarchy(pub BTreeMap<u32, usize>);

impl Hierarchy {
    pub fn parent_at(&self, code: &HcatCode, level: u32) -> Result<HcatCode> {
        let len = *self
            .0
            .get(&level)
            .ok_or_else(|| contract(format!("unknown hierarchy level {level}")))?;
        if len > code.0.len() {
            return Err(contract(format!(
                "level {level} prefix length {len} exceeds code {code}"
            )));
        }
        Ok(HcatCode(code.0[..len].to_string()))
    }

    pub fn levels(&self) -> Vec<u32> {
        self.0.keys().copied().collect()
    }

    pub fn leaf_level(&self) -> Option<u32> {
        self.0.keys().next_back().copied()
    }

    fn validate(&self) -> Result<()> {
        let mut prev = 0;
        for (level, &len) in &self.0 {
            if len < prev {
                return Err(contract(format!(
                    "prefix length must not shrink with level (level {level})"
                )));
            }
            prev = len;
        }
        Ok(())
    }
}

/// One labeled parcel. `channels` maps a group name to day-major rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParcelSample {
    pub id: String,
    pub days: Vec<usize>,
    pub channels: BTreeMap<String, Vec<Vec<f64>>>,
    pub lon: f64,
    pub lat: f64,
    pub region: String,
    pub hcat: HcatCode,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub region_counts: BTreeMap<String, usize>,
    pub class_counts: BTreeMap<HcatCode, usize>,
    #[serde(default)]
    pub majority_class: Option<HcatCode>,
    /// Declared fractions per split name; must sum to one when present.
    #[serde(default)]
    pub split_fractions: BTreeMap<Split, f64>,
    #[serde(default)]
    pub hierarchy: Hierarchy,
    /// Groups stored as a single row instead of one row per day.
    #[serde(default)]
    pub static_groups: BTreeSet<String>,
}

impl CorpusManifest {
    pub const PRETRAIN_SPLIT: [(Split, f64); 2] = [(Split::Train, 0.8), (Split::Validation, 0.2)];
    pub const FINETUNE_SPLIT: [(Split, f64); 3] =
        [(Split::Train, 0.6), (Split::Validation, 0.2), (Split::Test, 0.2)];

    fn validate(&self) -> Result<()> {
        if !self.split_fractions.is_empty() {
            let s: f64 = self.split_fractions.values().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(contract(format!("split fractions sum to {s}, not 1")));
            }
        }
        self.hierarchy.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<ParcelSample>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn new(samples: Vec<ParcelSample>, mut manifest: CorpusManifest) -> Self {
        recount(&samples, &mut manifest);
        Corpus { samples, manifest }
    }

    pub fn recount(&mut self) {
        recount(&self.samples, &mut self.manifest);
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Sorted list of distinct class codes.
    pub fn classes(&self) -> Vec<HcatCode> {
        let set: BTreeSet<&HcatCode> = self.samples.iter().map(|s| &s.hcat).collect();
        set.into_iter().cloned().collect()
    }

    pub fn regions(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.samples.iter().map(|s| &s.region).collect();
        set.into_iter().cloned().collect()
    }

    /// Keeps samples matching `keep`, recounting the manifest.
    pub fn filter(&self, keep: impl Fn(&ParcelSample) -> bool) -> Corpus {
        let samples = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        Corpus::new(samples, self.manifest.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let breaches = validate_samples(&self.samples, &self.manifest);
        if breaches.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(breaches))
        }
    }
}

fn recount(samples: &[ParcelSample], m: &mut CorpusManifest) {
    m.region_counts.clear();
    m.class_counts.clear();
    for s in samples {
        *m.region_counts.entry(s.region.clone()).or_default() += 1;
        *m.class_counts.entry(s.hcat.clone()).or_default() += 1;
    }
}

fn validate_samples(samples: &[ParcelSample], m: &CorpusManifest) -> Vec<String> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    let mut widths: BTreeMap<&str, usize> = BTreeMap::new();
    let mut code_len = None;
    for (i, s) in samples.iter().enumerate() {
        let line = i + 1;
        let mut breach = |msg: String| out.push(format!("line {line}: {msg}"));
        if !ids.insert(s.id.as_str()) {
            breach(format!("duplicate id {}", s.id));
        }
        if s.days.windows(2).any(|w| w[0] >= w[1]) {
            breach("non-increasing days".into());
        }
        if s.days.iter().any(|d| !(1..=366).contains(d)) {
            breach("day outside 1..=366".into());
        }
        if !(-PI..=PI).contains(&s.lon) || !(-FRAC_PI_2..=FRAC_PI_2).contains(&s.lat) {
            breach(format!("centroid ({}, {}) out of range", s.lon, s.lat));
        }
        if s.region.is_empty() {
            breach("empty region".into());
        }
        if s.hcat.0.is_empty() || !s.hcat.0.bytes().all(|b| b.is_ascii_digit()) {
            breach(format!("hcat code {:?} is not decimal", s.hcat.0));
        }
        match code_len {
            None => code_len = Some(s.hcat.0.len()),
            Some(l) if l != s.hcat.0.len() => breach("hcat codes differ in length".into()),
            _ => {}
        }
        for (g, rows) in &s.channels {
            let want = if m.static_groups.contains(g) { 1 } else { s.days.len() };
            if rows.len() != want {
                breach(format!("group {g} has {} rows, expected {want}", rows.len()));
            }
            for r in rows {
                let w = *widths.entry(g.as_str()).or_insert(r.len());
                if r.len() != w {
                    breach(format!("group {g} row width {} differs from {w}", r.len()));
                    break;
                }
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                breach(format!("group {g} has non-finite values"));
            }
        }
    }
    out
}

/// Path of the manifest stored next to a corpus file.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Reads a JSON Lines corpus and its manifest sidecar, if present.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ParcelSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        samples.push(s);
    }
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        serde_json::from_str(&fs::read_to_string(&mpath)?)?
    } else {
        CorpusManifest::default()
    };
    let corpus = Corpus::new(samples, manifest);
    corpus.validate()?;
    Ok(corpus)
}

pub fn corpus_to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut s = String::new();
    for sample in &corpus.samples {
        s.push_str(&serde_json::to_string(sample)?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes the corpus as JSON Lines plus the manifest sidecar.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(corpus_to_jsonl(corpus)?.as_bytes())?;
    w.flush()?;
    let m = serde_json::to_string_pretty(&corpus.manifest)?;
    fs::write(manifest_path(path), m + "\n")?;
    Ok(())
}

/// Per-channel z-score statistics for each numeric group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Normalizer {
    pub groups: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Normalizer {
    /// Mean and standard deviation over all rows of the `train` split.
    pub fn fit(corpus: &Corpus) -> Self {
        let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for s in corpus.samples.iter().filter(|s| s.split == Split::Train) {
            for (g, rows) in &s.channels {
                for r in rows {
                    let e = acc
                        .entry(g.clone())
                        .or_insert_with(|| (vec![0.0; r.len()], vec![0.0; r.len()], 0));
                    for (k, &v) in r.iter().enumerate() {
                        e.0[k] += v;
                        e.1[k] += v * v;
                    }
                    e.2 += 1;
                }
            }
        }
        let groups = acc
            .into_iter()
            .map(|(g, (sum, sq, n))| {
                let n = n.max(1) as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                let std = sq
                    .iter()
                    .zip(&mean)
                    .map(|(q, m)| {
                        let var = (q / n - m * m).max(0.0);
                        if var > 1e-16 { var.sqrt() } else { 1.0 }
                    })
                    .collect();
                (g, (mean, std))
            })
            .collect();
        Normalizer { groups }
    }

    /// Z-scores `row`; `select` maps row positions to stored channel indices.
    pub fn apply(&self, group: &str, row: &[f64], select: Option<&[usize]>) -> Result<Vec<f64>> {
        let Some((mean, std)) = self.groups.get(group) else {
            return Ok(row.to_vec());
        };
        row.iter()
            .enumerate()
            .map(|(j, &v)| {
                let k = select.map_or(j, |s| s[j]);
                match (mean.get(k), std.get(k)) {
                    (Some(m), Some(s)) => Ok((v - m) / s),
                    _ => Err(contract(format!("normalizer for {group} lacks channel {k}"))),
                }
            })
            .collect()
    }
}
