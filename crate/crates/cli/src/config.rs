use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fsml_core::data::{HcatCode, SynthConfig};
use fsml_core::meta::MetaConfig;
use fsml_core::nn::{InputSpec, ModelSpec, TaskInfoMode, TransformerConfig};
use fsml_core::ssl::SslConfig;
use fsml_core::train::{FineTuneRegime, SearchSpace, TrainOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SynthData,
    PretrainTransfer,
    PretrainMeta,
    PretrainSsl,
    Finetune,
    Evaluate,
    Tune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub transfer: Option<TrainOptions>,
    #[serde(default)]
    pub meta: Option<MetaConfig>,
    #[serde(default)]
    pub ssl: Option<SslSection>,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub tune: Option<TuneSection>,
    /// Named class subsets reported alongside overall accuracy.
    #[serde(default)]
    pub subsets: BTreeMap<String, BTreeSet<HcatCode>>,
}

pub fn default_seeds() -> Vec<u64> {
    vec![0, 1, 42, 123, 1234]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSON Lines corpus; its manifest sits next to it.
    pub corpus: PathBuf,
    pub pretrain_regions: Vec<String>,
    pub finetune_regions: Vec<String>,
    #[serde(default = "yes")]
    pub resample_majority: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default)]
    pub seed: u64,
    pub generator: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub input: InputSpec,
}

impl ModelConfig {
    pub fn spec(&self, n_classes: usize) -> ModelSpec {
        ModelSpec {
            transformer: self.transformer.clone(),
            input: self.input.clone(),
            n_classes,
            task_info: TaskInfoMode::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    pub model: ModelConfig,
    pub train: SslConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Random,
    Transfer,
    Meta,
    Ssl,
}

impl Source {
    pub fn checkpoint(self) -> Option<&'static str> {
        match self {
            Source::Random => None,
            Source::Transfer => Some("transfer"),
            Source::Meta => Some("meta"),
            Source::Ssl => Some("ssl"),
        }
    }
}

/// One row of the results table: where the initial weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub label: String,
    pub from: Source,
    /// Architecture for random initialisation; the top-level model otherwise.
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub k_shots: Vec<usize>,
    pub regime: FineTuneRegime,
    pub inits: Vec<InitSpec>,
    #[serde(default = "ft_epochs")]
    pub max_epochs: usize,
    #[serde(default = "ft_batch")]
    pub batch_size: usize,
    #[serde(default = "ft_patience")]
    pub patience: usize,
    #[serde(default = "ft_val_points")]
    pub val_points: usize,
}

fn ft_epochs() -> usize {
    200
}
fn ft_batch() -> usize {
    16
}
fn ft_patience() -> usize {
    5
}
fn ft_val_points() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    pub init: InitSpec,
    pub k: usize,
    pub trials: usize,
    /// Keys among `lr_head` and `lr_backbone`.
    pub space: SearchSpace,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))?;
        if cfg.data.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.corpus = dir.join(&cfg.data.corpus);
            }
        }
        Ok(cfg)
    }

    /// Field-level problems for running `mode`; empty when runnable.
    pub fn problems(&self, mode: Mode) -> Vec<String> {
        let mut p = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            p.push(format!("schema_version: expected {SCHEMA_VERSION}, found {}", self.schema_version));
        }
        if self.seeds.is_empty() {
            p.push("seeds: must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            p.push("seeds: must be distinct".into());
        }
        let need = |p: &mut Vec<String>, present: bool, field: &str| {
            if !present {
                p.push(format!("{field}: required for mode {}", mode_name(mode)));
            }
        };
        match mode {
            Mode::SynthData => need(&mut p, self.synth.is_some(), "synth"),
            Mode::PretrainTransfer => {
                need(&mut p, self.model.is_some(), "model");
                need(&mut p, self.transfer.is_some(), "transfer");
            }
            Mode::PretrainMeta => {
                need(&mut p, self.model.is_some(), "model");
                need(&mut p, self.meta.is_some(), "meta");
            }
            Mode::PretrainSsl => need(&mut p, self.ssl.is_some(), "ssl"),
            Mode::Finetune | Mode::Evaluate => need(&mut p, self.finetune.is_some(), "finetune"),
            Mode::Tune => {
                need(&mut p, self.tune.is_some(), "tune");
                need(&mut p, self.finetune.is_some(), "finetune");
            }
        }
        if matches!(mode, Mode::PretrainTransfer | Mode::PretrainMeta | Mode::PretrainSsl) && self.data.pretrain_regions.is_empty() {
            p.push("data.pretrain_regions: must not be empty".into());
        }
        if matches!(mode, Mode::Finetune | Mode::Tune) && self.data.finetune_regions.is_empty() {
            p.push("data.finetune_regions: must not be empty".into());
        }
        if let (Some(ft), true) = (&self.finetune, matches!(mode, Mode::Finetune | Mode::Evaluate | Mode::Tune)) {
            if ft.k_shots.is_empty() || ft.k_shots.contains(&0) {
                p.push("finetune.k_shots: must be non-empty and positive".into());
            }
            if ft.inits.is_empty() {
                p.push("finetune.inits: must not be empty".into());
            }
            let labels: BTreeSet<&str> = ft.inits.iter().map(|i| i.label.as_str()).collect();
            if labels.len() != ft.inits.len() {
                p.push("finetune.inits: labels must be distinct".into());
            }
            for (i, init) in ft.inits.iter().enumerate() {
                self.init_problems(&mut p, &format!("finetune.inits[{i}]"), init);
            }
            if let Err(e) = ft.regime.validate() {
                p.push(format!("finetune.regime: {e}"));
            }
        }
        if let (Some(t), Mode::Tune) = (&self.tune, mode) {
            if t.trials == 0 {
                p.push("tune.trials: must be at least 1".into());
            }
            for k in t.space.keys() {
                if k != "lr_head" && k != "lr_backbone" {
                    p.push(format!("tune.space.{k}: unknown parameter (expected lr_head or lr_backbone)"));
                }
            }
            self.init_problems(&mut p, "tune.init", &t.init);
        }
        if let (Some(m), Mode::PretrainMeta) = (&self.meta, mode) {
            if let Err(e) = m.validate() {
                p.push(format!("meta: {e}"));
            }
        }
        p
    }

    fn init_problems(&self, p: &mut Vec<String>, at: &str, init: &InitSpec) {
        if init.label.is_empty() || init.label.contains(['/', ',', ' ']) {
            p.push(format!("{at}.label: must be non-empty without '/', ',' or spaces"));
        }
        if init.from == Source::Random && init.model.is_none() && self.model.is_none() {
            p.push(format!("{at}.model: random initialisation needs a model here or at top level"));
        }
        if init.from != Source::Random && init.model.is_some() {
            p.push(format!("{at}.model: only allowed for random initialisation"));
        }
    }

    /// Stable digest of everything except the mode.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.mode = None;
        let text = serde_json::to_string(&serde_json::to_value(&c).expect("config serialises")).expect("value serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve_mode(&self, flag: Option<Mode>) -> anyhow::Result<Mode> {
        match flag.or(self.mode) {
            Some(m) => Ok(m),
            None => bail!("no mode given: pass --mode or set \"mode\" in the config"),
        }
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::SynthData => "synth-data",
        Mode::PretrainTransfer => "pretrain-transfer",
        Mode::PretrainMeta => "pretrain-meta",
        Mode::PretrainSsl => "pretrain-ssl",
        Mode::Finetune => "finetune",
        Mode::Evaluate => "evaluate",
        Mode::Tune => "tune",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "schema_version": 1,
            "data": {"corpus": "c.jsonl", "pretrain_regions": ["A"], "finetune_regions": ["B"]}
        }))
        .unwrap()
    }

    #[test]
    fn seeds_default_to_five() {
        assert_eq!(minimal().seeds, vec![0, 1, 42, 123, 1234]);
        assert!(minimal().data.resample_majority);
    }

    #[test]
    fn hash_ignores_mode_only() {
        let a = minimal();
        let mut b = minimal();
        b.mode = Some(Mode::Finetune);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seeds = vec![9];
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_sections_are_named() {
        let p = minimal().problems(Mode::PretrainTransfer);
        assert_eq!(p, vec!["model: required for mode pretrain-transfer", "transfer: required for mode pretrain-transfer"]);
        assert!(minimal().problems(Mode::SynthData).iter().any(|s| s.starts_with("synth:")));
    }

    #[test]
    fn schema_version_and_seeds_checked() {
        let mut c = minimal();
        c.schema_version = 2;
        c.seeds.clear();
        let p = c.problems(Mode::Evaluate);
        assert!(p.iter().any(|s| s.starts_with("schema_version")));
        assert!(p.iter().any(|s| s == "seeds: must not be empty"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<ExperimentConfig, _> = serde_json::from_value(serde_json::json!({
            "schema_version": 1,
            "data": {"corpus": "c", "pretrain_regions": [], "finetune_regions": [], "extra": 1}
        }));
        assert!(r.unwrap_err().to_string().contains("extra"));
    }

    #[test]
    fn relative_corpus_resolves_against_config() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("exp.json");
        std::fs::write(&p, serde_json::to_string(&minimal()).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap().data.corpus, d.path().join("c.jsonl"));
    }
}
