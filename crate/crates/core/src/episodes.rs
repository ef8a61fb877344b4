//! n-way k-shot episode construction over region-tagged corpora.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, HcatCode, Split};
use crate::error::{contract, Error, Result};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_support: usize,
    #[serde(default = "default_k_query")]
    pub k_query: usize,
    /// Eligible regions; every region when empty.
    #[serde(default)]
    pub regions: Vec<String>,
}

fn default_k_query() -> usize {
    5
}

impl EpisodeConfig {
    pub fn new(n_way: usize, k_support: usize, k_query: usize) -> Self {
        EpisodeConfig {
            n_way,
            k_support,
            k_query,
            regions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_support < 1 || self.k_query < 1 {
            return Err(contract(format!("invalid episode shape {self:?}")));
        }
        Ok(())
    }
}

/// One episode. Entries are `(corpus index, class index into the roster)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub class_roster: Vec<HcatCode>,
    pub region: String,
}

impl EpisodeTask {
    pub fn n_way(&self) -> usize {
        self.class_roster.len()
    }
}

/// Per-region, per-class sample pools restricted to one split.
pub struct EpisodeSampler {
    config: EpisodeConfig,
    /// region -> (sample count, eligible class -> indices)
    pools: BTreeMap<String, (usize, BTreeMap<HcatCode, Vec<usize>>)>,
}

impl EpisodeSampler {
    pub fn new(corpus: &Corpus, split: Option<Split>, config: &EpisodeConfig) -> Result<Self> {
        config.validate()?;
        let mut all: BTreeMap<String, BTreeMap<HcatCode, Vec<usize>>> = BTreeMap::new();
        for (i, s) in corpus.samples.iter().enumerate() {
            if split.is_some_and(|sp| s.split != sp) {
                continue;
            }
            if !config.regions.is_empty() && !config.regions.contains(&s.region) {
                continue;
            }
            all.entry(s.region.clone())
                .or_default()
                .entry(s.hcat.clone())
                .or_default()
                .push(i);
        }
        let mut pools = BTreeMap::new();
        for (region, classes) in all {
            let count = classes.values().map(Vec::len).sum();
            let eligible: BTreeMap<_, _> = classes
                .into_iter()
                .filter(|(_, v)| v.len() > config.k_query)
                .collect();
            if eligible.len() >= config.n_way {
                pools.insert(region, (count, eligible));
            }
        }
        if pools.is_empty() {
            return Err(Error::Episode(format!(
                "no region has {} classes with at least {} samples",
                config.n_way,
                config.k_query + 1
            )));
        }
        Ok(EpisodeSampler {
            config: config.clone(),
            pools,
        })
    }

    /// Eligible regions with their sample counts.
    pub fn region_counts(&self) -> Vec<(&str, usize)> {
        self.pools.iter().map(|(r, (n, _))| (r.as_str(), *n)).collect()
    }

    pub fn eligible_classes(&self, region: &str) -> Vec<&HcatCode> {
        self.pools
            .get(region)
            .map(|p| p.1.keys().collect())
            .unwrap_or_default()
    }

    /// Region drawn in proportion to its sample count.
    pub fn sample_region(&self, rng: &mut Rng) -> &str {
        let total: usize = self.pools.values().map(|p| p.0).sum();
        let mut u = rng.random_range(0..total);
        for (r, (n, _)) in &self.pools {
            if u < *n {
                return r;
            }
            u -= n;
        }
        unreachable!("draw below total count")
    }

    /// Draws `n_way` distinct classes, then per class the query set first and
    /// the support set from what remains. A class without `k_support`
    /// leftovers contributes all of them to the support set.
    pub fn sample_task(&self, region: &str, rng: &mut Rng) -> Result<EpisodeTask> {
        let (_, classes) = self
            .pools
            .get(region)
            .ok_or_else(|| Error::Episode(format!("region {region} is not eligible")))?;
        let keys: Vec<&HcatCode> = classes.keys().collect();
        let picked = index::sample(rng, keys.len(), self.config.n_way).into_vec();
        let mut task = EpisodeTask {
            support: Vec::new(),
            query: Vec::new(),
            class_roster: Vec::with_capacity(self.config.n_way),
            region: region.to_string(),
        };
        for (ci, &k) in picked.iter().enumerate() {
            let code = keys[k];
            let mut pool = classes[code].clone();
            pool.shuffle(rng);
            let kq = self.config.k_query;
            let ks = self.config.k_support.min(pool.len() - kq);
            task.query.extend(pool[..kq].iter().map(|&i| (i, ci)));
            task.support.extend(pool[kq..kq + ks].iter().map(|&i| (i, ci)));
            task.class_roster.push(code.clone());
        }
        Ok(task)
    }

    /// Task number `ordinal` of the stream keyed by `seed`.
    pub fn task(&self, seed: u64, label: &str, ordinal: u64) -> Result<EpisodeTask> {
        let mut rng = stream(seed, label, ordinal);
        let region = self.sample_region(&mut rng).to_string();
        self.sample_task(&region, &mut rng)
    }
}

/// Fixed task set drawn from the validation split.
pub fn build_meta_validation(
    corpus: &Corpus,
    config: &EpisodeConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<EpisodeTask>> {
    if !corpus.samples.iter().any(|s| s.split == Split::Validation) {
        return Err(Error::Episode("validation split is empty".into()));
    }
    let sampler = EpisodeSampler::new(corpus, Some(Split::Validation), config)?;
    (0..count as u64)
        .map(|i| sampler.task(seed, "meta-validation", i))
        .collect()
}

#[derive(Serialize)]
struct TaskDump<'a> {
    region: &'a str,
    roster: &'a [HcatCode],
    support: Vec<(&'a str, usize)>,
    query: Vec<(&'a str, usize)>,
}

/// JSON Lines listing of task rosters by sample id.
pub fn dump_tasks(tasks: &[EpisodeTask], corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for t in tasks {
        let ids = |v: &[(usize, usize)]| {
            v.iter()
                .map(|&(i, c)| (corpus.samples[i].id.as_str(), c))
                .collect::<Vec<_>>()
        };
        let d = TaskDump {
            region: &t.region,
            roster: &t.class_roster,
            support: ids(&t.support),
            query: ids(&t.query),
        };
        out.push_str(&serde_json::to_string(&d)?);
        out.push('\n');
    }
    Ok(out)
}
