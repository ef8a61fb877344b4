//! Bi-level optimisation: SGD task adaptation inside, Adam across tasks.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Normalizer, Split};
use crate::episodes::{build_meta_validation, EpisodeConfig, EpisodeSampler, EpisodeTask};
use crate::error::{contract, Error, Result};
use crate::nn::{
    argmax_rows, batch_logits, cross_entropy, init_model, prepare_input, ModelInput, ModelParams, ModelSpec, Section,
    TaskInfoMode, TensorParams,
};
use crate::rng::stream;
use crate::tensor::{grad, Tape, Tensor};
use crate::train::{add_into, grads_to_params, scale_params, LrGroups, Optimizer, TrainedModel};

pub use crate::nn::polar_to_cartesian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Algorithm {
    Maml,
    Fomaml,
    Anil,
    TimlEnc,
    TimlNoenc,
}

impl Algorithm {
    pub fn second_order(self) -> bool {
        matches!(self, Algorithm::Maml | Algorithm::TimlEnc | Algorithm::TimlNoenc)
    }

    /// Sections moved by the inner loop.
    pub fn inner_sections(self) -> Vec<Section> {
        match self {
            Algorithm::Anil => vec![Section::Head],
            _ => vec![Section::Backbone, Section::Head],
        }
    }

    /// Sections receiving a meta-gradient. The head is re-drawn for every
    /// task, so it never carries one.
    pub fn outer_sections(self) -> Vec<Section> {
        match self {
            Algorithm::TimlEnc => vec![Section::Backbone, Section::TaskEncoder],
            _ => vec![Section::Backbone],
        }
    }

    pub fn task_info(self) -> TaskInfoMode {
        match self {
            Algorithm::TimlEnc => TaskInfoMode::Film,
            Algorithm::TimlNoenc => TaskInfoMode::Concat,
            _ => TaskInfoMode::None,
        }
    }
}

/// Model spec for `alg`: task information wired in as the variant requires.
pub fn apply_task_encoding(spec: &ModelSpec, alg: Algorithm) -> Result<ModelSpec> {
    let mut s = spec.clone();
    s.task_info = alg.task_info();
    s.validate()?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    pub inner_lr: f64,
    pub outer_lr: f64,
    #[serde(default)]
    pub encoder_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    #[serde(default = "default_total_tasks")]
    pub total_tasks: usize,
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default = "default_validation_tasks")]
    pub validation_tasks: usize,
    pub episode: EpisodeConfig,
}

fn default_total_tasks() -> usize {
    100_000
}
fn default_validate_every() -> usize {
    100
}
fn default_validation_tasks() -> usize {
    100
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        let mut bad = Vec::new();
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            bad.push("inner_lr must be positive");
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            bad.push("outer_lr must be positive");
        }
        if self.algorithm == Algorithm::TimlEnc && !(self.encoder_lr > 0.0) {
            bad.push("encoder_lr must be positive for TIML_ENC");
        }
        if self.inner_steps == 0 {
            bad.push("inner_steps must be at least 1");
        }
        if self.tasks_per_batch == 0 || self.validate_every == 0 || self.validation_tasks == 0 {
            bad.push("tasks_per_batch, validate_every and validation_tasks must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(contract(bad.join("; ")))
        }
    }

    fn outer_lr(&self) -> LrGroups {
        LrGroups {
            backbone: self.outer_lr,
            head: 0.0,
            task_encoder: if self.algorithm == Algorithm::TimlEnc { self.encoder_lr } else { 0.0 },
        }
    }
}

fn nan_check(l: &Tensor, step: usize) -> Result<f64> {
    let v = l.item()?;
    if !v.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("inner loss {v}"),
        });
    }
    Ok(v)
}

/// `s` plain gradient steps of rate `alpha` on `sections`. With
/// `create_graph` the result stays differentiable with respect to `p`.
pub fn inner_adapt<F>(
    p: &TensorParams,
    loss: F,
    alpha: f64,
    steps: usize,
    sections: &[Section],
    create_graph: bool,
) -> Result<TensorParams>
where
    F: Fn(&TensorParams) -> Result<Tensor>,
{
    let mut cur = p.clone();
    for step in 0..steps {
        let l = loss(&cur)?;
        nan_check(&l, step)?;
        let keys: Vec<(Section, String)> = sections
            .iter()
            .flat_map(|s| cur.section(*s).keys().map(move |k| (*s, k.clone())))
            .collect();
        let g = grad(&l, &cur.flat(sections), create_graph)?;
        for ((s, k), gi) in keys.iter().zip(&g) {
            let upd = cur.section(*s)[k].sub(&gi.scale(alpha)?)?;
            cur.section_mut(*s).insert(k.clone(), upd);
        }
    }
    Ok(cur)
}

/// Adapted parameters as plain values, one fresh tape per step.
pub fn adapt_values<F>(params: &ModelParams, loss: F, alpha: f64, steps: usize, sections: &[Section]) -> Result<ModelParams>
where
    F: Fn(&TensorParams) -> Result<Tensor>,
{
    let mut cur = params.clone();
    for step in 0..steps {
        let tape = Tape::new();
        let tp = TensorParams::watched(&cur, &tape, sections);
        let l = loss(&tp)?;
        nan_check(&l, step)?;
        let keys = cur.keys(sections);
        let g = grad(&l, &tp.flat(sections), false)?;
        for ((s, k), gi) in keys.iter().zip(&g) {
            let dst = cur.section_mut(*s).get_mut(k).expect("key listed");
            for (w, d) in dst.data_mut().iter_mut().zip(gi.values()) {
                *w -= alpha * d;
            }
        }
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug)]
pub struct InnerLoop {
    pub alpha: f64,
    pub steps: usize,
    pub algorithm: Algorithm,
}

/// Query loss after adaptation on the support loss, and its gradient with
/// respect to the pre-adaptation parameters of the outer sections.
pub fn task_meta_gradient<S, Q>(params: &ModelParams, inner: InnerLoop, support: S, query: Q) -> Result<(f64, ModelParams)>
where
    S: Fn(&TensorParams) -> Result<Tensor>,
    Q: Fn(&TensorParams) -> Result<Tensor>,
{
    let alg = inner.algorithm;
    let outer = alg.outer_sections();
    let inner_s = alg.inner_sections();
    if alg.second_order() {
        let tape = Tape::new();
        let watch: Vec<Section> = Section::ALL
            .into_iter()
            .filter(|s| outer.contains(s) || inner_s.contains(s))
            .collect();
        let init = TensorParams::watched(params, &tape, &watch);
        let adapted = inner_adapt(&init, support, inner.alpha, inner.steps, &inner_s, true)?;
        let lq = query(&adapted)?;
        let g = grad(&lq, &init.flat(&outer), false)?;
        Ok((lq.item()?, grads_to_params(&params.keys(&outer), &g)))
    } else {
        let adapted = adapt_values(params, support, inner.alpha, inner.steps, &inner_s)?;
        let tape = Tape::new();
        let tp = TensorParams::watched(&adapted, &tape, &outer);
        let lq = query(&tp)?;
        let g = grad(&lq, &tp.flat(&outer), false)?;
        Ok((lq.item()?, grads_to_params(&adapted.keys(&outer), &g)))
    }
}

/// Mean of `parts` by pairwise summation in the given order.
pub fn pairwise_mean(parts: Vec<ModelParams>) -> Result<ModelParams> {
    fn sum(mut v: Vec<ModelParams>) -> ModelParams {
        if v.len() == 1 {
            return v.pop().expect("one element");
        }
        let right = v.split_off(v.len() / 2);
        let mut l = sum(v);
        add_into(&mut l, &sum(right));
        l
    }
    if parts.is_empty() {
        return Err(contract("meta-gradient over an empty task batch"));
    }
    let n = parts.len();
    let mut s = sum(parts);
    scale_params(&mut s, 1.0 / n as f64);
    Ok(s)
}

/// Inputs for every sample the sampler can reach, keyed by corpus index.
pub struct TaskData<'a> {
    pub spec: &'a ModelSpec,
    pub inputs: &'a BTreeMap<usize, ModelInput>,
}

impl TaskData<'_> {
    fn loss_fn<'b>(&'b self, set: &'b [(usize, usize)]) -> impl Fn(&TensorParams) -> Result<Tensor> + 'b {
        move |p: &TensorParams| {
            let inputs: Vec<&ModelInput> = set.iter().map(|(i, _)| &self.inputs[i]).collect();
            let labels: Vec<usize> = set.iter().map(|(_, c)| *c).collect();
            cross_entropy(&batch_logits(p, self.spec, &inputs)?, &labels)
        }
    }

    /// `params` with a head drawn for `task` from the given stream.
    pub fn with_head(&self, params: &ModelParams, task: &EpisodeTask, seed: u64, label: &str, ordinal: u64) -> ModelParams {
        let mut p = params.clone();
        p.reset_head(self.spec.transformer.embed_dim, task.n_way(), &mut stream(seed, label, ordinal));
        p
    }

    pub fn meta_gradient(&self, params: &ModelParams, task: &EpisodeTask, inner: InnerLoop) -> Result<(f64, ModelParams)> {
        task_meta_gradient(params, inner, self.loss_fn(&task.support), self.loss_fn(&task.query))
    }

    /// Query accuracy and loss after adapting on the support set.
    pub fn adapt_and_score(&self, params: &ModelParams, task: &EpisodeTask, inner: InnerLoop) -> Result<(f64, f64)> {
        let adapted = adapt_values(
            params,
            self.loss_fn(&task.support),
            inner.alpha,
            inner.steps,
            &inner.algorithm.inner_sections(),
        )?;
        let tp = TensorParams::constant(&adapted);
        let inputs: Vec<&ModelInput> = task.query.iter().map(|(i, _)| &self.inputs[i]).collect();
        let labels: Vec<usize> = task.query.iter().map(|(_, c)| *c).collect();
        let lg = batch_logits(&tp, self.spec, &inputs)?;
        let loss = cross_entropy(&lg, &labels)?.item()?;
        let hit = argmax_rows(&lg).iter().zip(&labels).filter(|(a, b)| a == b).count();
        Ok((hit as f64 / labels.len() as f64, loss))
    }

    /// Mean query accuracy and loss over `tasks`, heads from `label`.
    pub fn score_tasks(&self, params: &ModelParams, tasks: &[EpisodeTask], inner: InnerLoop, seed: u64, label: &str) -> Result<(f64, f64)> {
        let scores: Vec<Result<(f64, f64)>> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| self.adapt_and_score(&self.with_head(params, t, seed, label, i as u64), t, inner))
            .collect();
        let (mut acc, mut loss) = (0.0, 0.0);
        for s in scores {
            let (a, l) = s?;
            acc += a;
            loss += l;
        }
        let n = tasks.len() as f64;
        Ok((acc / n, loss / n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub tasks_seen: usize,
    pub mean_query_accuracy: f64,
    pub mean_query_loss: f64,
}

pub fn trace_csv(trace: &[ValidationPoint]) -> String {
    let mut out = String::from("tasks_seen,mean_query_accuracy,mean_query_loss\n");
    for p in trace {
        out.push_str(&format!("{},{},{}\n", p.tasks_seen, p.mean_query_accuracy, p.mean_query_loss));
    }
    out
}

pub struct MetaOutcome {
    pub model: TrainedModel,
    pub trace: Vec<ValidationPoint>,
    pub best_tasks_seen: usize,
}

pub fn prepare_inputs(spec: &ModelSpec, corpus: &Corpus, norm: &Normalizer, indices: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, ModelInput>> {
    let idx: Vec<usize> = indices.into_iter().collect();
    let v: Vec<Result<(usize, ModelInput)>> = idx
        .par_iter()
        .map(|&i| Ok((i, prepare_input(spec, &corpus.samples[i], Some(norm))?)))
        .collect();
    v.into_iter().collect()
}

/// Meta-trains an initialisation from episodes of the train split and
/// keeps the one scoring best on the fixed validation tasks.
pub fn meta_train(corpus: &Corpus, base: &ModelSpec, config: &MetaConfig, seed: u64) -> Result<MetaOutcome> {
    config.validate()?;
    let mut spec = apply_task_encoding(base, config.algorithm)?;
    spec.n_classes = config.episode.n_way;
    let norm = Normalizer::fit(corpus);
    let sampler = EpisodeSampler::new(corpus, Some(Split::Train), &config.episode)?;
    let val_tasks = build_meta_validation(corpus, &config.episode, config.validation_tasks, seed)?;
    let reach = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s.split, Split::Train | Split::Validation))
        .map(|(i, _)| i);
    let inputs = prepare_inputs(&spec, corpus, &norm, reach)?;
    let data = TaskData { spec: &spec, inputs: &inputs };
    let inner = InnerLoop {
        alpha: config.inner_lr,
        steps: config.inner_steps,
        algorithm: config.algorithm,
    };
    let mut params = init_model(&spec, &mut stream(seed, "init", 0))?;
    let mut opt = Optimizer::adam();
    let lr = config.outer_lr();

    let validate = |p: &ModelParams, seen: usize| -> Result<ValidationPoint> {
        let (a, l) = data.score_tasks(p, &val_tasks, inner, seed, "meta-validation-head")?;
        log::info!("meta tasks_seen={seen} acc={a:.4} loss={l:.4}");
        Ok(ValidationPoint {
            tasks_seen: seen,
            mean_query_accuracy: a,
            mean_query_loss: l,
        })
    };
    let mut trace = vec![validate(&params, 0)?];
    let mut best = (trace[0].mean_query_accuracy, params.clone(), 0);
    let mut seen = 0;
    let mut next_val = config.validate_every;
    while seen < config.total_tasks {
        let n = config.tasks_per_batch.min(config.total_tasks - seen);
        let grads: Vec<Result<(f64, ModelParams)>> = (seen..seen + n)
            .into_par_iter()
            .map(|ord| {
                let task = sampler.task(seed, "meta-train", ord as u64)?;
                let p = data.with_head(&params, &task, seed, "task-head", ord as u64);
                data.meta_gradient(&p, &task, inner)
            })
            .collect();
        let grads = grads.into_iter().map(|g| g.map(|x| x.1)).collect::<Result<Vec<_>>>()?;
        opt.apply(&mut params, &pairwise_mean(grads)?, &lr)?;
        seen += n;
        if seen >= next_val || seen == config.total_tasks {
            next_val = seen + config.validate_every;
            let pt = validate(&params, seen)?;
            if pt.mean_query_accuracy > best.0 {
                best = (pt.mean_query_accuracy, params.clone(), seen);
            }
            trace.push(pt);
        }
    }
    Ok(MetaOutcome {
        model: TrainedModel {
            spec,
            params: best.1,
            norm: Some(norm),
            classes: Vec::new(),
        },
        trace,
        best_tasks_seen: best.2,
    })
}
