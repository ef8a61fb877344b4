use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{assign_splits, Corpus, CorpusManifest, HcatCode, Hierarchy, ParcelSample, Split, S2_GROUP};
use crate::error::{contract, Result};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRegion {
    pub code: String,
    pub samples: usize,
    pub obs_min: usize,
    pub obs_max: usize,
    /// Region centre in radians.
    pub lon: f64,
    pub lat: f64,
    /// Fine-tuning regions get a train/validation/test split, others train/validation.
    #[serde(default)]
    pub finetune: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub regions: Vec<SynthRegion>,
    pub n_classes: usize,
    /// Share of each region's samples given to class 0; zero spreads evenly.
    pub majority_fraction: f64,
    pub noise: f64,
    pub separability: f64,
    /// Standard deviation (days) of a per-sample phenology shift.
    pub sample_jitter: f64,
    pub channels: usize,
    pub level3_groups: usize,
    pub level4_groups: usize,
    /// Smallest per-class, per-region count allowed is `2 * k_max`.
    pub k_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let region = |code: &str, samples, lon: f64, lat: f64, finetune| SynthRegion {
            code: code.into(),
            samples,
            obs_min: 8,
            obs_max: 20,
            lon: lon.to_radians(),
            lat: lat.to_radians(),
            finetune,
        };
        SynthConfig {
            regions: vec![
                region("LV006", 600, 24.1, 56.9, false),
                region("PT111", 600, -8.6, 41.1, false),
                region("EE001", 600, 24.7, 59.4, true),
            ],
            n_classes: 8,
            majority_fraction: 0.3,
            noise: 0.05,
            separability: 1.0,
            sample_jitter: 4.0,
            channels: 13,
            level3_groups: 3,
            level4_groups: 5,
            k_max: 10,
        }
    }
}

/// Leaf codes for `n_leaf` classes spread round-robin over level-4 groups,
/// which are spread round-robin over level-3 groups. Codes are ten digits:
/// three for level 3, three for level 4 and four for the leaf.
pub fn synthetic_hierarchy(n_l3: usize, n_l4: usize, n_leaf: usize) -> (Vec<HcatCode>, Hierarchy) {
    let codes = (0..n_leaf)
        .map(|c| {
            let l4 = c % n_l4.max(1);
            let l3 = l4 % n_l3.max(1);
            HcatCode(format!("{:03}{:03}{:04}", l3 + 1, l4 + 1, c + 1))
        })
        .collect();
    let h = Hierarchy(BTreeMap::from([(3, 3), (4, 6), (6, 10)]));
    (codes, h)
}

struct Profile {
    base: Vec<f64>,
    amp: Vec<f64>,
    sos: f64,
    eos: f64,
    r1: f64,
    r2: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Profile {
    fn value(&self, k: usize, day: f64, shift: f64, amp_scale: f64) -> f64 {
        let up = logistic((day - self.sos - shift) / self.r1);
        let down = logistic((day - self.eos - shift) / self.r2);
        self.base[k] + amp_scale * self.amp[k] * (up - down)
    }
}

fn profiles(cfg: &SynthConfig, seed: u64) -> Vec<Profile> {
    let mut ch = stream(seed, "synth-channels", 0);
    let base: Vec<f64> = (0..cfg.channels).map(|_| ch.random_range(0.05..0.3)).collect();
    let amp: Vec<f64> = (0..cfg.channels).map(|_| ch.random_range(-0.15..0.35)).collect();
    let s = cfg.separability;
    (0..cfg.n_classes)
        .map(|c| {
            let mut r = stream(seed, "synth-class", c as u64);
            Profile {
                base: base.iter().map(|b| b + s * r.random_range(-0.05..0.05)).collect(),
                amp: amp.iter().map(|a| a + s * r.random_range(-0.2..0.2)).collect(),
                sos: 110.0 + s * r.random_range(-40.0..40.0),
                eos: 250.0 + s * r.random_range(-40.0..40.0),
                r1: 12.0 + s * r.random_range(-5.0..5.0),
                r2: 14.0 + s * r.random_range(-5.0..5.0),
            }
        })
        .collect()
}

/// Largest-remainder allocation of `n` items in proportion to `weights`.
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = n - out.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.regions.len() < 2 {
        return Err(contract("synthetic corpus needs at least two regions"));
    }
    if cfg.n_classes < 4 {
        return Err(contract("synthetic corpus needs at least four classes"));
    }
    if cfg.channels == 0 {
        return Err(contract("synthetic corpus needs at least one channel"));
    }
    if cfg.noise == 0.0 && cfg.separability == 0.0 {
        return Err(contract(
            "zero noise with identical class profiles is unidentifiable",
        ));
    }
    if cfg.noise < 0.0 || cfg.separability < 0.0 || cfg.sample_jitter < 0.0 {
        return Err(contract("noise, separability and jitter must be non-negative"));
    }
    if !(0.0..1.0).contains(&cfg.majority_fraction) {
        return Err(contract("majority_fraction must lie in [0, 1)"));
    }
    let codes: BTreeSet<&str> = cfg.regions.iter().map(|r| r.code.as_str()).collect();
    if codes.len() != cfg.regions.len() {
        return Err(contract("duplicate region code"));
    }
    for r in &cfg.regions {
        if r.obs_min == 0 || r.obs_min > r.obs_max || r.obs_max > 366 {
            return Err(contract(format!("region {} has bad observation range", r.code)));
        }
    }
    Ok(())
}

fn class_weights(cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let rest = cfg.n_classes - 1;
    let mut w: Vec<f64> = (0..rest).map(|_| rng.random_range(0.6..1.4)).collect();
    let sum: f64 = w.iter().sum();
    let minority = if cfg.majority_fraction > 0.0 {
        1.0 - cfg.majority_fraction
    } else {
        rest as f64 / cfg.n_classes as f64
    };
    for v in &mut w {
        *v *= minority / sum;
    }
    let major = if cfg.majority_fraction > 0.0 {
        cfg.majority_fraction
    } else {
        1.0 / cfg.n_classes as f64
    };
    std::iter::once(major).chain(w).collect()
}

/// Seeded synthetic corpus of double-logistic phenology curves.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    validate(cfg)?;
    let profs = profiles(cfg, seed);
    let (codes, hierarchy) = synthetic_hierarchy(cfg.level3_groups, cfg.level4_groups, cfg.n_classes);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| contract(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.sample_jitter).map_err(|e| contract(e.to_string()))?;
    let mut pre = Vec::new();
    let mut fine = Vec::new();
    for r in &cfg.regions {
        let mut rr = stream(seed, &format!("synth-region:{}", r.code), 0);
        let shift = rr.random_range(-8.0..8.0);
        let amp_scale = rr.random_range(0.9..1.1);
        let counts = allocate(r.samples, &class_weights(cfg, &mut rr));
        if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n < 2 * cfg.k_max) {
            return Err(contract(format!(
                "region {} gives class {c} only {n} samples, need {}",
                r.code,
                2 * cfg.k_max
            )));
        }
        let mut i = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut rng = stream(seed, &format!("synth-sample:{}", r.code), i as u64);
                let t = rng.random_range(r.obs_min..=r.obs_max);
                let mut days: Vec<usize> = index::sample(&mut rng, 366, t).into_iter().map(|d| d + 1).collect();
                days.sort_unstable();
                let own = if cfg.sample_jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
                let rows = days
                    .iter()
                    .map(|&d| {
                        (0..cfg.channels)
                            .map(|k| {
                                let v = profs[c].value(k, d as f64, shift + own, amp_scale);
                                if cfg.noise > 0.0 { v + noise.sample(&mut rng) } else { v }
                            })
                            .collect()
                    })
                    .collect();
                let lon = (r.lon + rng.random_range(-0.01..0.01)).clamp(-std::f64::consts::PI, std::f64::consts::PI);
                let lat = (r.lat + rng.random_range(-0.01..0.01))
                    .clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
                let sample = ParcelSample {
                    id: format!("{}-{i:06}", r.code),
                    days,
                    channels: BTreeMap::from([(S2_GROUP.to_string(), rows)]),
                    lon,
                    lat,
                    region: r.code.clone(),
                    hcat: codes[c].clone(),
                    split: Split::Train,
                };
                if r.finetune { fine.push(sample) } else { pre.push(sample) }
                i += 1;
            }
        }
    }
    assign_splits(&mut pre, &CorpusManifest::PRETRAIN_SPLIT, seed)?;
    assign_splits(&mut fine, &CorpusManifest::FINETUNE_SPLIT, seed)?;
    let split_fractions = match (pre.is_empty(), fine.is_empty()) {
        (false, true) => CorpusManifest::PRETRAIN_SPLIT.into_iter().collect(),
        (true, false) => CorpusManifest::FINETUNE_SPLIT.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    let mut samples = pre;
    samples.extend(fine);
    let manifest = CorpusManifest {
        majority_class: Some(codes[0].clone()),
        split_fractions,
        hierarchy,
        ..Default::default()
    };
    Ok(Corpus::new(samples, manifest))
}
