use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_annealing, EarlyStopper, LrGroups, Optimizer};
use crate::data::{fixed_subset, Corpus, HcatCode, Normalizer, Split};
use crate::error::{contract, Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::{
    argmax_rows, batch_logits, cross_entropy, init_model, prepare_input, Checkpoint, ModelInput,
    ModelParams, ModelSpec, Section, TensorParams,
};
use crate::rng::stream;
use crate::tensor::{grad, Tape};

/// Samples per gradient chunk. Fixed so the summation order, and hence the
/// result, does not depend on the worker count.
pub const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub label: usize,
}

/// Gradient entries for `keys`, shaped as a partial [`ModelParams`].
pub(crate) fn grads_to_params(keys: &[(Section, String)], grads: &[crate::tensor::Tensor]) -> ModelParams {
    let mut g = ModelParams::default();
    for ((s, k), t) in keys.iter().zip(grads) {
        g.section_mut(*s).insert(k.clone(), t.to_array());
    }
    g
}

/// `acc += other` entrywise; missing entries are inserted.
pub fn add_into(acc: &mut ModelParams, other: &ModelParams) {
    for s in Section::ALL {
        for (k, a) in other.section(s) {
            match acc.section_mut(s).get_mut(k) {
                Some(dst) => {
                    for (x, y) in dst.data_mut().iter_mut().zip(a.data()) {
                        *x += y;
                    }
                }
                None => {
                    acc.section_mut(s).insert(k.clone(), a.clone());
                }
            }
        }
    }
}

pub fn scale_params(p: &mut ModelParams, f: f64) {
    for s in Section::ALL {
        for a in p.section_mut(s).values_mut() {
            a.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
}

/// Mean cross-entropy over `batch` and its gradient for `sections`.
pub fn batch_loss_grad(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &[&Example],
    sections: &[Section],
) -> Result<(f64, ModelParams)> {
    let total = batch.len();
    if total == 0 {
        return Err(contract("empty batch"));
    }
    let keys = params.keys(sections);
    let parts: Vec<Result<(f64, ModelParams)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let tp = TensorParams::watched(params, &tape, sections);
            let inputs: Vec<&ModelInput> = chunk.iter().map(|e| &e.input).collect();
            let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let l = cross_entropy(&batch_logits(&tp, spec, &inputs)?, &labels)?
                .scale(chunk.len() as f64 / total as f64)?;
            let g = grad(&l, &tp.flat(sections), false)?;
            Ok((l.item()?, grads_to_params(&keys, &g)))
        })
        .collect();
    let mut loss = 0.0;
    let mut acc = ModelParams::default();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        add_into(&mut acc, &g);
    }
    Ok((loss, acc))
}

/// Mean loss and argmax predictions over `examples`.
pub fn evaluate(params: &ModelParams, spec: &ModelSpec, examples: &[Example]) -> Result<(f64, Vec<usize>)> {
    if examples.is_empty() {
        return Err(contract("evaluation over an empty set"));
    }
    let parts: Vec<Result<(f64, Vec<usize>)>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let tp = TensorParams::constant(params);
            let inputs: Vec<&ModelInput> = chunk.iter().map(|e| &e.input).collect();
            let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let lg = batch_logits(&tp, spec, &inputs)?;
            let l = cross_entropy(&lg, &labels)?.item()? * chunk.len() as f64;
            Ok((l, argmax_rows(&lg)))
        })
        .collect();
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(examples.len());
    for p in parts {
        let (l, pr) = p?;
        loss += l;
        preds.extend(pr);
    }
    Ok((loss / examples.len() as f64, preds))
}

pub fn accuracy(preds: &[usize], examples: &[Example]) -> f64 {
    let hit = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    hit as f64 / examples.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: LrGroups,
    #[serde(default)]
    pub cycles: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub struct FitOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

/// Epoch loop with Adam. Early stopping watches validation loss while the
/// returned parameters are those of the best validation accuracy.
pub fn fit(
    init: ModelParams,
    spec: &ModelSpec,
    train: &[Example],
    val: &[Example],
    opts: &TrainOptions,
    seed: u64,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(contract("training needs non-empty train and validation sets"));
    }
    if opts.batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let sections = opts.lr.trainable();
    let mut params = init;
    let mut opt = Optimizer::adam();
    let mut stopper = EarlyStopper::new(opts.patience);
    let (_, p0) = evaluate(&params, spec, val)?;
    let mut best = (accuracy(&p0, val), params.clone(), 0);
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut stream(seed, "epoch", epoch as u64));
        let lr = opts
            .lr
            .scaled(cosine_annealing(1.0, opts.cycles, epoch - 1, opts.max_epochs));
        let mut train_loss = 0.0;
        for b in order.chunks(opts.batch_size) {
            let batch: Vec<&Example> = b.iter().map(|&i| &train[i]).collect();
            let (l, g) = batch_loss_grad(&params, spec, &batch, &sections)?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step: epoch,
                    detail: "non-finite training loss".into(),
                });
            }
            opt.apply(&mut params, &g, &lr)?;
            train_loss += l * b.len() as f64;
        }
        let (val_loss, preds) = evaluate(&params, spec, val)?;
        let val_accuracy = accuracy(&preds, val);
        trace.push(EpochRecord {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_accuracy > best.0 {
            best = (val_accuracy, params.clone(), epoch);
        }
        if stopper.observe(epoch, val_loss) {
            break;
        }
    }
    Ok(FitOutcome {
        params: best.1,
        best_epoch: best.2,
        trace,
    })
}

/// Parameters plus everything needed to rebuild inputs for them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub norm: Option<Normalizer>,
    pub classes: Vec<HcatCode>,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    spec: ModelSpec,
    classes: Vec<HcatCode>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tags: BTreeMap<String, String>,
}

impl TrainedModel {
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(TrainedModel {
            spec: spec.clone(),
            params: init_model(spec, &mut stream(seed, "init", 0))?,
            norm: None,
            classes: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let ck = Checkpoint::from_params(&self.params);
        match &self.norm {
            Some(n) => ck.with_normalizer(n),
            None => ck,
        }
    }

    /// Writes `<stem>.fsml` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.save_tagged(stem, &BTreeMap::new())
    }

    /// Like [`save`](Self::save), recording `tags` in the sidecar.
    pub fn save_tagged(&self, stem: &Path, tags: &BTreeMap<String, String>) -> Result<()> {
        self.checkpoint().write(&stem.with_extension("fsml"))?;
        let side = ModelSidecar {
            spec: self.spec.clone(),
            classes: self.classes.clone(),
            tags: tags.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = Checkpoint::read(&stem.with_extension("fsml"))?;
        let side: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        Ok(TrainedModel {
            spec: side.spec,
            params: ck.params(),
            norm: ck.normalizer(),
            classes: side.classes,
        })
    }

    pub fn examples(&self, corpus: &Corpus, indices: &[usize]) -> Result<Vec<Example>> {
        let pos: BTreeMap<&HcatCode, usize> = self.classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
        indices
            .par_iter()
            .map(|&i| {
                let s = &corpus.samples[i];
                let label = *pos
                    .get(&s.hcat)
                    .ok_or_else(|| contract(format!("class {} not in the label space", s.hcat)))?;
                Ok(Example {
                    input: prepare_input(&self.spec, s, self.norm.as_ref())?,
                    label,
                })
            })
            .collect()
    }
}

pub struct TransferOutcome {
    pub model: TrainedModel,
    pub fit: FitOutcome,
}

/// Supervised pre-training on every class of `corpus`.
pub fn pretrain_transfer(corpus: &Corpus, spec: &ModelSpec, opts: &TrainOptions, seed: u64) -> Result<TransferOutcome> {
    let classes = corpus.classes();
    let mut spec = spec.clone();
    spec.n_classes = classes.len();
    let mut model = TrainedModel::random(&spec, seed)?;
    model.norm = Some(Normalizer::fit(corpus));
    model.classes = classes;
    let train = model.examples(corpus, &corpus.indices_in(Split::Train))?;
    let val = model.examples(corpus, &corpus.indices_in(Split::Validation))?;
    let fit = fit(model.params.clone(), &spec, &train, &val, opts, seed)?;
    model.params = fit.params.clone();
    Ok(TransferOutcome { model, fit })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeMode {
    SameLr,
    SplitLr,
    HeadOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneRegime {
    pub mode: RegimeMode,
    pub lr_head: f64,
    pub lr_backbone: f64,
}

impl FineTuneRegime {
    pub fn same(lr: f64) -> Self {
        FineTuneRegime {
            mode: RegimeMode::SameLr,
            lr_head: lr,
            lr_backbone: lr,
        }
    }

    pub fn split(lr_head: f64, lr_backbone: f64) -> Self {
        FineTuneRegime {
            mode: RegimeMode::SplitLr,
            lr_head,
            lr_backbone,
        }
    }

    pub fn head_only(lr_head: f64) -> Self {
        FineTuneRegime {
            mode: RegimeMode::HeadOnly,
            lr_head,
            lr_backbone: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            RegimeMode::SameLr => self.lr_head == self.lr_backbone,
            RegimeMode::HeadOnly => self.lr_backbone == 0.0,
            RegimeMode::SplitLr => true,
        };
        if !ok || self.lr_head <= 0.0 || self.lr_backbone < 0.0 {
            return Err(contract(format!("inconsistent fine-tuning regime {self:?}")));
        }
        Ok(())
    }

    pub fn groups(&self) -> LrGroups {
        LrGroups {
            backbone: self.lr_backbone,
            head: self.lr_head,
            task_encoder: self.lr_backbone,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneOptions {
    pub k: usize,
    pub regime: FineTuneRegime,
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

impl FinetuneOptions {
    pub fn new(k: usize, regime: FineTuneRegime) -> Self {
        FinetuneOptions {
            k,
            regime,
            max_epochs: ft_epochs(),
            batch_size: ft_batch(),
            patience: ft_patience(),
            val_points: ft_val_points(),
        }
    }
}

/// Per-class draw of `min(k, count)` train-split samples.
pub fn kshot_subset(corpus: &Corpus, k: usize, seed: u64) -> BTreeMap<HcatCode, Vec<usize>> {
    let mut by_class: BTreeMap<HcatCode, Vec<usize>> =
        corpus.classes().into_iter().map(|c| (c, Vec::new())).collect();
    for i in corpus.indices_in(Split::Train) {
        by_class.get_mut(&corpus.samples[i].hcat).expect("class listed").push(i);
    }
    for (ci, (code, idx)) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            log::warn!("class {code} has no training samples; skipped in the k-shot subset");
        }
        idx.shuffle(&mut stream(seed, "kshot", ci as u64));
        idx.truncate(k);
        idx.sort_unstable();
    }
    by_class
}

pub struct FinetuneOutcome {
    pub model: TrainedModel,
    pub fit: FitOutcome,
    pub report: MetricsReport,
    pub train_indices: Vec<usize>,
}

/// Fine-tunes `init` on a k-shot subset of `corpus` and evaluates on its
/// test split. The head is replaced by a fresh classifier over the corpus'
/// classes; anything else in the old head (such as a decoder) is dropped.
pub fn finetune(
    init: &TrainedModel,
    corpus: &Corpus,
    opts: &FinetuneOptions,
    subsets: &BTreeMap<String, BTreeSet<HcatCode>>,
    seed: u64,
) -> Result<FinetuneOutcome> {
    opts.regime.validate()?;
    let classes = corpus.classes();
    let mut model = init.clone();
    model.spec.n_classes = classes.len();
    model.classes = classes;
    if model.norm.is_none() {
        model.norm = Some(Normalizer::fit(corpus));
    }
    model
        .params
        .reset_head(model.spec.transformer.embed_dim, model.classes.len(), &mut stream(seed, "finetune-head", 0));
    let train_indices: Vec<usize> = kshot_subset(corpus, opts.k, seed).into_values().flatten().collect();
    let mut train_indices = train_indices;
    train_indices.sort_unstable();
    let val_idx = fixed_subset(&corpus.indices_in(Split::Validation), opts.val_points, seed);
    let test_idx = corpus.indices_in(Split::Test);
    if test_idx.is_empty() {
        return Err(contract("fine-tuning corpus has no test split"));
    }
    let train = model.examples(corpus, &train_indices)?;
    let val = model.examples(corpus, &val_idx)?;
    let test = model.examples(corpus, &test_idx)?;
    let topts = TrainOptions {
        max_epochs: opts.max_epochs,
        batch_size: opts.batch_size,
        patience: opts.patience,
        lr: opts.regime.groups(),
        cycles: 0,
    };
    let fit = fit(model.params.clone(), &model.spec, &train, &val, &topts, seed)?;
    model.params = fit.params.clone();
    let (_, preds) = evaluate(&model.params, &model.spec, &test)?;
    let pred_codes: Vec<HcatCode> = preds.iter().map(|&p| model.classes[p].clone()).collect();
    let true_codes: Vec<HcatCode> = test.iter().map(|e| model.classes[e.label].clone()).collect();
    let report = MetricsReport::evaluate(
        &pred_codes,
        &true_codes,
        corpus.manifest.majority_class.as_ref(),
        &corpus.manifest.hierarchy,
        subsets,
    )?;
    Ok(FinetuneOutcome {
        model,
        fit,
        report,
        train_indices,
    })
}
