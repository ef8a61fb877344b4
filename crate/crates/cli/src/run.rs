use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use fsml_core::data::{load_corpus, resample_majority, write_corpus, generate_synthetic, Corpus};
use fsml_core::meta::{meta_train, trace_csv};
use fsml_core::metrics::MetricsReport;
use fsml_core::ssl::{pretrain_ssl, ssl_trace_csv};
use fsml_core::train::{
    finetune, pretrain_transfer, random_search, EpochRecord, FineTuneRegime, FinetuneOptions, RegimeMode,
    TrainedModel,
};

use crate::config::{mode_name, ExperimentConfig, FinetuneSection, InitSpec, Mode};
use crate::results::{emit_plots, results_csv, ReportGrid};

/// Paths of one run, all under `<out>/<hash>`.
pub struct Layout {
    pub root: PathBuf,
    pub hash: String,
}

impl Layout {
    pub fn new(out: &Path, cfg: &ExperimentConfig) -> Self {
        let hash = cfg.hash();
        Layout {
            root: out.join(&hash),
            hash,
        }
    }

    pub fn seed_dir(&self, seed: u64, kind: &str) -> PathBuf {
        self.root.join(seed.to_string()).join(kind)
    }

    pub fn checkpoint(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed, "checkpoints").join(name)
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Prefixes every row of a CSV with the config hash and seed.
fn tag_csv(hash: &str, seed: u64, csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str("config_hash,seed,");
        } else {
            out.push_str(&format!("{hash},{seed},"));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn tags(hash: &str, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([("config_hash".to_string(), hash.to_string()), ("seed".to_string(), seed.to_string())])
}

fn epochs_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy));
    }
    s
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

fn stamped<T: Serialize>(hash: &str, seed: u64, body: T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(&Stamped { config_hash: hash, seed, body })? + "\n")
}

fn in_regions(corpus: &Corpus, regions: &[String]) -> anyhow::Result<Corpus> {
    let c = corpus.filter(|s| regions.contains(&s.region));
    if c.samples.is_empty() {
        bail!("data: no samples in regions {regions:?}");
    }
    Ok(c)
}

fn pretrain_corpus(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> anyhow::Result<Corpus> {
    let c = in_regions(corpus, &cfg.data.pretrain_regions)?;
    if !cfg.data.resample_majority {
        return Ok(c);
    }
    match c.manifest.majority_class.clone() {
        Some(m) => Ok(resample_majority(&c, &m, seed)),
        None => {
            log::warn!("manifest names no majority class; resampling skipped");
            Ok(c)
        }
    }
}

/// Runs `mode` for every selected seed. Returns the written result files.
pub fn run(cfg: &ExperimentConfig, mode: Mode, seeds: &[u64], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let lay = Layout::new(out, cfg);
    write(
        &lay.root.join("config.json"),
        &(serde_json::to_string_pretty(&ExperimentConfig { mode: None, ..cfg.clone() })? + "\n"),
    )?;
    log::info!("{} -> {}", mode_name(mode), lay.root.display());
    if mode == Mode::SynthData {
        let s = cfg.synth.as_ref().expect("validated");
        let corpus = generate_synthetic(&s.generator, s.seed).context("data")?;
        write_corpus(&cfg.data.corpus, &corpus).context("data")?;
        return Ok(vec![cfg.data.corpus.clone()]);
    }
    if mode == Mode::Evaluate {
        return evaluate(cfg, &lay, seeds);
    }
    let corpus = load_corpus(&cfg.data.corpus).context("data")?;
    let mut written = Vec::new();
    for &seed in seeds {
        match mode {
            Mode::PretrainTransfer => {
                let pre = pretrain_corpus(cfg, &corpus, seed)?;
                let spec = cfg.model.as_ref().expect("validated").spec(1);
                let o = pretrain_transfer(&pre, &spec, cfg.transfer.as_ref().expect("validated"), seed).context("train")?;
                let stem = lay.checkpoint(seed, "transfer");
                std::fs::create_dir_all(stem.parent().expect("nested"))?;
                o.model.save_tagged(&stem, &tags(&lay.hash, seed)).context("nn")?;
                let t = lay.seed_dir(seed, "traces").join("transfer.csv");
                write(&t, &tag_csv(&lay.hash, seed, &epochs_csv(&o.fit.trace)))?;
                written.extend([stem.with_extension("fsml"), t]);
            }
            Mode::PretrainMeta => {
                let pre = pretrain_corpus(cfg, &corpus, seed)?;
                let spec = cfg.model.as_ref().expect("validated").spec(1);
                let o = meta_train(&pre, &spec, cfg.meta.as_ref().expect("validated"), seed).context("meta")?;
                let stem = lay.checkpoint(seed, "meta");
                std::fs::create_dir_all(stem.parent().expect("nested"))?;
                o.model.save_tagged(&stem, &tags(&lay.hash, seed)).context("nn")?;
                let t = lay.seed_dir(seed, "traces").join("meta.csv");
                write(&t, &tag_csv(&lay.hash, seed, &trace_csv(&o.trace)))?;
                written.extend([stem.with_extension("fsml"), t]);
            }
            Mode::PretrainSsl => {
                let pre = pretrain_corpus(cfg, &corpus, seed)?;
                let s = cfg.ssl.as_ref().expect("validated");
                let o = pretrain_ssl(&pre, &s.model.spec(1), &s.train, seed).context("ssl")?;
                let stem = lay.checkpoint(seed, "ssl");
                std::fs::create_dir_all(stem.parent().expect("nested"))?;
                o.model.save_tagged(&stem, &tags(&lay.hash, seed)).context("nn")?;
                let t = lay.seed_dir(seed, "traces").join("ssl.csv");
                write(&t, &tag_csv(&lay.hash, seed, &ssl_trace_csv(&o.trace)))?;
                written.extend([stem.with_extension("fsml"), t]);
            }
            Mode::Finetune => {
                let ft = cfg.finetune.as_ref().expect("validated");
                let target = in_regions(&corpus, &cfg.data.finetune_regions)?;
                for init in &ft.inits {
                    let model = initial_model(cfg, &lay, init, seed)?;
                    for &k in &ft.k_shots {
                        let (report, trace) = finetune_one(cfg, ft, &target, &model, k, ft.regime, seed)?;
                        let name = format!("finetune_{}_k{k}", init.label);
                        let r = lay.seed_dir(seed, "reports").join(format!("{name}.json"));
                        write(&r, &stamped(&lay.hash, seed, &report)?)?;
                        let t = lay.seed_dir(seed, "traces").join(format!("{name}.csv"));
                        write(&t, &tag_csv(&lay.hash, seed, &epochs_csv(&trace)))?;
                        written.extend([r, t]);
                    }
                }
            }
            Mode::Tune => {
                written.extend(tune(cfg, &lay, &corpus, seed)?);
                // One seed drives the search.
                break;
            }
            Mode::SynthData | Mode::Evaluate => unreachable!("handled above"),
        }
    }
    if mode == Mode::Finetune {
        written.extend(evaluate(cfg, &lay, seeds)?);
    }
    Ok(written)
}

fn initial_model(cfg: &ExperimentConfig, lay: &Layout, init: &InitSpec, seed: u64) -> anyhow::Result<TrainedModel> {
    match init.from.checkpoint() {
        None => {
            let m = init.model.as_ref().or(cfg.model.as_ref()).expect("validated");
            Ok(TrainedModel::random(&m.spec(1), seed).context("nn")?)
        }
        Some(name) => {
            let stem = lay.checkpoint(seed, name);
            if !stem.with_extension("fsml").exists() {
                bail!(
                    "init {}: no checkpoint at {} (run pretrain-{} first)",
                    init.label,
                    stem.with_extension("fsml").display(),
                    name
                );
            }
            Ok(TrainedModel::load(&stem).context("nn")?)
        }
    }
}

fn finetune_one(
    cfg: &ExperimentConfig,
    ft: &FinetuneSection,
    target: &Corpus,
    model: &TrainedModel,
    k: usize,
    regime: FineTuneRegime,
    seed: u64,
) -> anyhow::Result<(MetricsReport, Vec<EpochRecord>)> {
    let opts = FinetuneOptions {
        k,
        regime,
        max_epochs: ft.max_epochs,
        batch_size: ft.batch_size,
        patience: ft.patience,
        val_points: ft.val_points,
    };
    let o = finetune(model, target, &opts, &cfg.subsets, seed).context("train")?;
    Ok((o.report, o.fit.trace))
}

/// Aggregates per-seed reports into the results table and plot data.
pub fn evaluate(cfg: &ExperimentConfig, lay: &Layout, seeds: &[u64]) -> anyhow::Result<Vec<PathBuf>> {
    let ft = cfg.finetune.as_ref().expect("validated");
    let mut grid: ReportGrid = BTreeMap::new();
    for init in &ft.inits {
        for &k in &ft.k_shots {
            for &seed in seeds {
                let p = lay
                    .seed_dir(seed, "reports")
                    .join(format!("finetune_{}_k{k}.json", init.label));
                if !p.exists() {
                    continue;
                }
                let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("report {}", p.display()))?;
                let obj = v.as_object_mut().expect("report is an object");
                obj.remove("config_hash");
                obj.remove("seed");
                let rep: MetricsReport = serde_json::from_value(v).with_context(|| format!("report {}", p.display()))?;
                grid.entry((init.label.clone(), k)).or_default().push((seed, rep));
            }
        }
    }
    if grid.is_empty() {
        bail!("evaluate: no fine-tuning reports under {}", lay.root.display());
    }
    let order: Vec<String> = ft.inits.iter().map(|i| i.label.clone()).collect();
    let csv = results_csv(&lay.hash, &order, &ft.k_shots, &grid)?;
    let path = lay.results();
    write(&path, &csv)?;
    let mut out = vec![path.clone()];
    out.extend(emit_plots(&path, &lay.root.join("plots"))?);
    Ok(out)
}

fn tune(cfg: &ExperimentConfig, lay: &Layout, corpus: &Corpus, seed: u64) -> anyhow::Result<Vec<PathBuf>> {
    let t = cfg.tune.as_ref().expect("validated");
    let ft = cfg.finetune.as_ref().expect("validated");
    let target = in_regions(corpus, &cfg.data.finetune_regions)?;
    let model = initial_model(cfg, lay, &t.init, seed)?;
    let base = ft.regime;
    let out = random_search(&t.space, t.trials, seed, |c| {
        let lr_head = c.get("lr_head").copied().unwrap_or(base.lr_head);
        let lr_backbone = match base.mode {
            RegimeMode::HeadOnly => 0.0,
            RegimeMode::SameLr => lr_head,
            RegimeMode::SplitLr => c.get("lr_backbone").copied().unwrap_or(base.lr_backbone),
        };
        let regime = FineTuneRegime { mode: base.mode, lr_head, lr_backbone };
        let opts = FinetuneOptions {
            k: t.k,
            regime,
            max_epochs: ft.max_epochs,
            batch_size: ft.batch_size,
            patience: ft.patience,
            val_points: ft.val_points,
        };
        let o = finetune(&model, &target, &opts, &cfg.subsets, seed)?;
        Ok(o.fit.trace.iter().map(|r| r.val_accuracy).fold(f64::NEG_INFINITY, f64::max))
    })
    .context("train")?;
    let log_path = lay.seed_dir(seed, "traces").join("tune.csv");
    write(&log_path, &tag_csv(&lay.hash, seed, &out.log_csv()))?;
    let best_path = lay.seed_dir(seed, "reports").join("tune_best.json");
    write(&best_path, &stamped(&lay.hash, seed, &out.best)?)?;
    if out.best.is_none() {
        bail!("tune: every trial failed; see {}", log_path.display());
    }
    Ok(vec![log_path, best_path])
}

pub fn select_seeds(cfg: &ExperimentConfig, flag: Option<u64>) -> Vec<u64> {
    match flag {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

