#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsml::config::{
    DataConfig, ExperimentConfig, FinetuneSection, InitSpec, ModelConfig, Source, SslSection, SynthSection, TuneSection,
    SCHEMA_VERSION,
};
use fsml_core::data::{s2_supervised_channels, SynthConfig, SynthRegion, S2_GROUP};
use fsml_core::episodes::EpisodeConfig;
use fsml_core::meta::{Algorithm, MetaConfig};
use fsml_core::nn::{InputSpec, TransformerConfig};
use fsml_core::ssl::{DecoderKind, SslConfig};
use fsml_core::token_codec::{ChannelGroup, ChannelGroupSpec, EncodingRegime};
use fsml_core::train::{FineTuneRegime, LrGroups, Range, TrainOptions};

pub fn small_transformer(max_seq_len: usize) -> TransformerConfig {
    TransformerConfig {
        embed_dim: 16,
        num_heads: 2,
        hidden_dim: 32,
        encoder_blocks: 1,
        decoder_blocks: 0,
        max_seq_len,
    }
}

pub fn series_model() -> ModelConfig {
    ModelConfig {
        transformer: small_transformer(366),
        input: InputSpec::Series {
            group: S2_GROUP.into(),
            channels: s2_supervised_channels(),
        },
    }
}

/// Thirteen S2 bands split into five spectral groups, XTS encodings.
pub fn xts_model(decoder_blocks: usize) -> ModelConfig {
    let sel = |name: &str, idx: &[usize]| ChannelGroup {
        select: Some(idx.to_vec()),
        source: Some(S2_GROUP.into()),
        ..ChannelGroup::dynamic(name, idx.len())
    };
    let groups = ChannelGroupSpec::new(vec![
        sel("rgb", &[1, 2, 3]),
        sel("red_edge", &[4, 5, 6, 8]),
        sel("nir", &[7]),
        sel("swir", &[10, 11, 12]),
        sel("atm", &[0, 9]),
    ])
    .unwrap();
    let regime = EncodingRegime::xts(16);
    let mut transformer = small_transformer(groups.token_count(regime.max_len));
    transformer.decoder_blocks = decoder_blocks;
    ModelConfig {
        transformer,
        input: InputSpec::Tokens { groups, regime },
    }
}

/// Three small regions; the last one is held out for fine-tuning.
pub fn tiny_synth(samples: usize) -> SynthConfig {
    let region = |code: &str, lon: f64, lat: f64, finetune| SynthRegion {
        code: code.into(),
        samples,
        obs_min: 6,
        obs_max: 12,
        lon: f64::to_radians(lon),
        lat: f64::to_radians(lat),
        finetune,
    };
    SynthConfig {
        regions: vec![
            region("LV006", 24.1, 56.9, false),
            region("PT111", -8.6, 41.1, false),
            region("EE001", 24.7, 59.4, true),
        ],
        n_classes: 4,
        k_max: 4,
        ..SynthConfig::default()
    }
}

/// Every mode configured at toy scale, seeds {0, 1}.
pub fn smoke_config(dir: &Path) -> ExperimentConfig {
    let inits = vec![
        InitSpec {
            label: "random".into(),
            from: Source::Random,
            model: None,
        },
        InitSpec {
            label: "transfer".into(),
            from: Source::Transfer,
            model: None,
        },
        InitSpec {
            label: "meta".into(),
            from: Source::Meta,
            model: None,
        },
    ];
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        mode: None,
        seeds: vec![0, 1],
        data: DataConfig {
            corpus: dir.join("corpus.jsonl"),
            pretrain_regions: vec!["LV006".into(), "PT111".into()],
            finetune_regions: vec!["EE001".into()],
            resample_majority: true,
        },
        synth: Some(SynthSection {
            seed: 7,
            generator: tiny_synth(60),
        }),
        model: Some(series_model()),
        transfer: Some(TrainOptions {
            max_epochs: 2,
            batch_size: 16,
            patience: 5,
            lr: LrGroups::uniform(1e-3),
            cycles: 0,
        }),
        meta: Some(MetaConfig {
            algorithm: Algorithm::Maml,
            inner_lr: 0.1,
            outer_lr: 1e-3,
            encoder_lr: 0.0,
            inner_steps: 1,
            tasks_per_batch: 2,
            total_tasks: 8,
            validate_every: 4,
            validation_tasks: 4,
            episode: EpisodeConfig::new(2, 1, 2),
        }),
        ssl: Some(SslSection {
            model: xts_model(1),
            train: SslConfig {
                decoder: DecoderKind::CrossAttention,
                plan: None,
                batch_size: 16,
                lr: 1e-3,
                epochs: 1,
                validate_every: 4,
                patience: 5,
            },
        }),
        finetune: Some(FinetuneSection {
            k_shots: vec![1, 2],
            regime: FineTuneRegime::same(1e-3),
            inits,
            max_epochs: 2,
            batch_size: 8,
            patience: 2,
            val_points: 20,
        }),
        tune: Some(TuneSection {
            init: InitSpec {
                label: "random".into(),
                from: Source::Random,
                model: None,
            },
            k: 1,
            trials: 2,
            space: BTreeMap::from([("lr_head".to_string(), Range::log(1e-4, 1e-2))]),
        }),
        subsets: BTreeMap::new(),
    }
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn fsml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_mode(config: &Path, out: &Path, mode: &str) -> Output {
    let o = fsml(&[
        "--config",
        config.to_str().unwrap(),
        "--mode",
        mode,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "{mode} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
