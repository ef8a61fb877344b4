//! Masked-autoencoder pre-training over token sequences.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Normalizer, Split};
use crate::error::{contract, Error, Result};
use crate::nn::layers::{cross_block, encode, encoder_block, init_block, layer_norm, linear, scatter_matrix};
use crate::nn::params::{init_layer_norm, init_linear, init_vector, lookup, TensorMap};
use crate::nn::{init_model, InputSpec, ModelParams, ModelSpec, Section, TensorParams, TransformerConfig};
use crate::rng::{stream, Rng};
use crate::tensor::{grad, Array, Tape, Tensor};
use crate::token_codec::{contexts, encode_tokens, ChannelGroupSpec, GroupEncoding, GroupKind, TokenInput, Variant};
use crate::train::{add_into, grads_to_params, scale_params, EarlyStopper, LrGroups, Optimizer, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    ChannelGroups,
    ContiguousTimesteps,
    RandomTimesteps,
    Mixed,
}

impl Strategy {
    pub const STRUCTURED: [Strategy; 4] = [
        Strategy::Random,
        Strategy::ChannelGroups,
        Strategy::ContiguousTimesteps,
        Strategy::RandomTimesteps,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPlan {
    pub strategy: Strategy,
    pub target_ratio: f64,
    /// No random top-up when set.
    pub strict: bool,
}

impl MaskPlan {
    pub fn presto() -> Self {
        MaskPlan {
            strategy: Strategy::Mixed,
            target_ratio: 0.75,
            strict: false,
        }
    }

    pub fn xts() -> Self {
        MaskPlan {
            strategy: Strategy::Mixed,
            target_ratio: 0.70,
            strict: true,
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Presto => Self::presto(),
            Variant::Xts => Self::xts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(contract(format!("mask ratio {} outside (0, 1)", self.target_ratio)));
        }
        Ok(())
    }

    /// Resolves `Mixed` to one structured strategy.
    pub fn draw(&self, rng: &mut Rng) -> Strategy {
        match self.strategy {
            Strategy::Mixed => Strategy::STRUCTURED[rng.random_range(0..4)],
            s => s,
        }
    }
}

/// Token positions laid out as in the encoder input.
struct Layout {
    /// `(group index, row)` per token.
    cells: Vec<(usize, usize)>,
    dynamic_groups: Vec<usize>,
    t: usize,
}

fn layout(spec: &ChannelGroupSpec, t: usize) -> Layout {
    let mut cells = Vec::with_capacity(spec.token_count(t));
    for gi in spec.token_group_order() {
        let rows = if spec.groups[gi].kind == GroupKind::Static { 1 } else { t };
        cells.extend((0..rows).map(|r| (gi, r)));
    }
    let dynamic_groups = (0..spec.groups.len())
        .filter(|&g| spec.groups[g].kind == GroupKind::Dynamic)
        .collect();
    Layout { cells, dynamic_groups, t }
}

/// Masks tokens under `plan`. `padding` marks unavailable tokens: they are
/// never counted in `N` and never returned as masked. Mixed plans must be
/// resolved with [`MaskPlan::draw`] first, otherwise one is drawn here.
pub fn build_mask(plan: &MaskPlan, spec: &ChannelGroupSpec, t: usize, padding: &[bool], rng: &mut Rng) -> Result<Vec<bool>> {
    plan.validate()?;
    if t == 0 {
        return Err(contract("masking needs at least one time step"));
    }
    let lay = layout(spec, t);
    if padding.len() != lay.cells.len() {
        return Err(contract(format!("padding of length {} for {} tokens", padding.len(), lay.cells.len())));
    }
    let n = padding.iter().filter(|p| !**p).count();
    let target = (plan.target_ratio * n as f64).floor() as usize;
    let mut masked = vec![false; padding.len()];
    let mut count = 0;
    let set = |masked: &mut Vec<bool>, i: usize, count: &mut usize| {
        if !padding[i] && !masked[i] {
            masked[i] = true;
            *count += 1;
        }
    };
    let strategy = plan.draw(rng);
    let avail_at = |step: usize| {
        lay.cells
            .iter()
            .enumerate()
            .filter(|(i, (g, r))| *r == step && !padding[*i] && lay.dynamic_groups.contains(g))
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
    };
    match strategy {
        Strategy::Random | Strategy::Mixed => {}
        Strategy::ChannelGroups => {
            let mut groups = lay.dynamic_groups.clone();
            groups.shuffle(rng);
            for g in groups {
                let idx: Vec<usize> = (0..lay.cells.len())
                    .filter(|&i| lay.cells[i].0 == g && !padding[i])
                    .collect();
                if count + idx.len() <= target {
                    idx.into_iter().for_each(|i| set(&mut masked, i, &mut count));
                }
            }
        }
        Strategy::ContiguousTimesteps | Strategy::RandomTimesteps => {
            let per_step = lay.dynamic_groups.len().max(1);
            let len = (target / per_step).min(lay.t);
            let steps: Vec<usize> = if strategy == Strategy::ContiguousTimesteps {
                let start = rng.random_range(0..=lay.t - len);
                (start..start + len).collect()
            } else {
                index::sample(rng, lay.t, len).into_vec()
            };
            for s in steps {
                let idx = avail_at(s);
                if count + idx.len() <= target {
                    idx.into_iter().for_each(|i| set(&mut masked, i, &mut count));
                }
            }
        }
    }
    if strategy == Strategy::Random || !plan.strict {
        let mut rest: Vec<usize> = (0..masked.len()).filter(|&i| !padding[i] && !masked[i]).collect();
        rest.shuffle(rng);
        for i in rest.into_iter().take(target - count) {
            masked[i] = true;
        }
    }
    Ok(masked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    SelfAttention,
    CrossAttention,
}

/// Decoder parameters under `decoder.`, stored in the head section.
pub fn init_decoder(head: &mut crate::nn::ParamMap, spec: &ModelSpec, kind: DecoderKind, rng: &mut Rng) -> Result<()> {
    let InputSpec::Tokens { groups, .. } = &spec.input else {
        return Err(contract("masked reconstruction needs token input"));
    };
    let cfg = &spec.transformer;
    let d = cfg.embed_dim;
    if cfg.decoder_blocks == 0 {
        return Err(contract("decoder needs at least one block"));
    }
    init_vector(head, "decoder.mask_token", d, rng);
    for b in 0..cfg.decoder_blocks {
        init_block(head, &format!("decoder.{b}"), d, cfg.hidden_dim, kind == DecoderKind::CrossAttention, rng);
    }
    init_layer_norm(head, "decoder.final_ln", d);
    for g in &groups.groups {
        init_linear(head, &format!("decoder.out.{}", g.name), d, g.channels, rng);
    }
    Ok(())
}

/// Cross-attention decoder blocks: each query row sees only `memory`.
pub fn decode_cross(h: &TensorMap, cfg: &TransformerConfig, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
    let mut q = queries.clone();
    for b in 0..cfg.decoder_blocks {
        q = cross_block(h, &format!("decoder.{b}"), &q, memory, cfg.num_heads)?;
    }
    Ok(q)
}

/// Per-group reconstructions `[rows, channels]`. Rows that were not masked
/// are zero.
pub fn reconstruct(p: &TensorParams, spec: &ModelSpec, kind: DecoderKind, input: &TokenInput, masked: &[bool]) -> Result<Vec<Tensor>> {
    let InputSpec::Tokens { groups, regime } = &spec.input else {
        return Err(contract("masked reconstruction needs token input"));
    };
    let cfg = &spec.transformer;
    let seq = encode_tokens(input, groups, regime, &p.backbone)?;
    let n = seq.mask.len();
    if masked.len() != n {
        return Err(contract(format!("mask of length {} for {n} tokens", masked.len())));
    }
    let hidden: Vec<bool> = (0..n).map(|i| seq.mask[i] || masked[i]).collect();
    if hidden.iter().all(|h| *h) {
        return Err(Error::Degenerate("every token is masked".into()));
    }
    let enc = encode(&p.backbone, cfg, &seq.tokens, &hidden)?;
    let targets: Vec<usize> = (0..n).filter(|&i| masked[i] && !seq.mask[i]).collect();
    let lay = layout(groups, input.t);
    let mut out: Vec<Tensor> = groups
        .groups
        .iter()
        .map(|g| {
            let rows = if g.kind == GroupKind::Static { 1 } else { input.t };
            Tensor::zeros(&[rows, g.channels])
        })
        .collect();
    if targets.is_empty() {
        return Ok(out);
    }
    let h: &TensorMap = &p.head;
    let ctx = contexts(input, groups, regime, &p.backbone)?;
    let d = cfg.embed_dim;
    let mask_tok = lookup(h, "decoder.mask_token")?.reshape(&[1, d])?;
    let queries = Tensor::embedding(&ctx, &targets)?.add(&mask_tok)?;
    let decoded = match kind {
        DecoderKind::CrossAttention => {
            let visible: Vec<usize> = (0..n).filter(|&i| !hidden[i]).collect();
            decode_cross(h, cfg, &queries, &Tensor::embedding(&enc, &visible)?)?
        }
        DecoderKind::SelfAttention => {
            // Visible encodings and mask queries share one sequence; padding is dropped.
            let present: Vec<usize> = (0..n).filter(|&i| !seq.mask[i]).collect();
            let full = enc.add(&scatter_matrix(n, &targets)?.matmul(&queries)?)?;
            let mut x = Tensor::embedding(&full, &present)?;
            for b in 0..cfg.decoder_blocks {
                x = encoder_block(h, &format!("decoder.{b}"), &x, cfg.num_heads)?;
            }
            let pos: Vec<usize> = targets
                .iter()
                .map(|t| present.binary_search(t).expect("target is present"))
                .collect();
            Tensor::embedding(&x, &pos)?
        }
    };
    let decoded = layer_norm(h, "decoder.final_ln", &decoded)?;
    for (gi, g) in groups.groups.iter().enumerate() {
        let mine: Vec<usize> = (0..targets.len()).filter(|&j| lay.cells[targets[j]].0 == gi).collect();
        if mine.is_empty() {
            continue;
        }
        let rows: Vec<usize> = mine.iter().map(|&j| lay.cells[targets[j]].1).collect();
        let r = linear(h, &format!("decoder.out.{}", g.name), &Tensor::embedding(&decoded, &mine)?)?;
        out[gi] = scatter_matrix(out[gi].shape()[0], &rows)?.matmul(&r)?;
    }
    Ok(out)
}

/// Cells contributing to the loss: masked, present, numeric.
pub fn loss_support(spec: &ChannelGroupSpec, input: &TokenInput, masked: &[bool]) -> Vec<Array> {
    let lay = layout(spec, input.t);
    let mut sup: Vec<Array> = spec
        .groups
        .iter()
        .map(|g| Array::zeros(&[if g.kind == GroupKind::Static { 1 } else { input.t }, g.channels]))
        .collect();
    for (i, &(gi, r)) in lay.cells.iter().enumerate() {
        let g = &spec.groups[gi];
        if masked[i] && input.values[gi].is_some() && g.encoding == GroupEncoding::Numeric {
            let c = g.channels;
            sup[gi].data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 1.0);
        }
    }
    sup
}

/// Summed squared error over the support cells and the number of cells.
pub fn masked_sse(recon: &[Tensor], input: &TokenInput, support: &[Array]) -> Result<(Tensor, usize)> {
    let mut total = Tensor::scalar(0.0);
    let mut cells = 0;
    for ((r, v), s) in recon.iter().zip(&input.values).zip(support) {
        let k = s.data().iter().filter(|x| **x != 0.0).count();
        if k == 0 {
            continue;
        }
        let v = v.as_ref().expect("support implies values");
        let diff = r.sub(&Tensor::from_array(v))?.mul(&Tensor::from_array(s))?;
        total = total.add(&diff.square()?.sum()?)?;
        cells += k;
    }
    Ok((total, cells))
}

/// One masked sample ready for the loss.
#[derive(Clone, Debug)]
pub struct MaskedSample {
    pub input: TokenInput,
    pub masked: Vec<bool>,
}

/// Masks for a batch. Mixed plans pick one strategy for the whole batch.
pub fn mask_batch(plan: &MaskPlan, spec: &ModelSpec, inputs: &[&TokenInput], seed: u64, label: &str, batch: u64) -> Result<Vec<MaskedSample>> {
    let InputSpec::Tokens { groups, .. } = &spec.input else {
        return Err(contract("masked reconstruction needs token input"));
    };
    let fixed = MaskPlan {
        strategy: plan.draw(&mut stream(seed, label, batch)),
        ..*plan
    };
    inputs
        .iter()
        .enumerate()
        .map(|(i, inp)| {
            let pad: Vec<bool> = layout(groups, inp.t)
                .cells
                .iter()
                .map(|(g, _)| inp.values[*g].is_none())
                .collect();
            let mut rng = stream(seed, &format!("{label}/sample"), (batch << 24) + i as u64);
            Ok(MaskedSample {
                input: (*inp).clone(),
                masked: build_mask(&fixed, groups, inp.t, &pad, &mut rng)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeStep {
    pub loss: f64,
    pub cells: usize,
    /// No masked cell in the batch: loss is zero by convention.
    pub degenerate: bool,
}

/// Mean squared reconstruction error over masked cells and, when
/// `sections` is non-empty, its gradient.
pub fn mae_step(
    params: &ModelParams,
    spec: &ModelSpec,
    kind: DecoderKind,
    batch: &[MaskedSample],
    sections: &[Section],
) -> Result<(MaeStep, ModelParams)> {
    let InputSpec::Tokens { groups, .. } = &spec.input else {
        return Err(contract("masked reconstruction needs token input"));
    };
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let keys = params.keys(sections);
    let parts: Vec<Result<(f64, usize, ModelParams)>> = batch
        .par_chunks(crate::train::CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let tp = TensorParams::watched(params, &tape, sections);
            let mut sse = Tensor::scalar(0.0);
            let mut cells = 0;
            for s in chunk {
                let r = reconstruct(&tp, spec, kind, &s.input, &s.masked)?;
                let (e, k) = masked_sse(&r, &s.input, &loss_support(groups, &s.input, &s.masked))?;
                sse = sse.add(&e)?;
                cells += k;
            }
            let g = if sections.is_empty() || cells == 0 {
                ModelParams::default()
            } else {
                grads_to_params(&keys, &grad(&sse, &tp.flat(sections), false)?)
            };
            Ok((sse.item()?, cells, g))
        })
        .collect();
    let (mut sse, mut cells, mut acc) = (0.0, 0, ModelParams::default());
    for p in parts {
        let (e, k, g) = p?;
        sse += e;
        cells += k;
        add_into(&mut acc, &g);
    }
    if cells == 0 {
        return Ok((
            MaeStep {
                loss: 0.0,
                cells,
                degenerate: true,
            },
            acc,
        ));
    }
    scale_params(&mut acc, 1.0 / cells as f64);
    Ok((
        MaeStep {
            loss: sse / cells as f64,
            cells,
            degenerate: false,
        },
        acc,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub decoder: DecoderKind,
    #[serde(default)]
    pub plan: Option<MaskPlan>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Optimizer steps between validations.
    pub validate_every: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    1
}
fn default_patience() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn ssl_trace_csv(trace: &[SslRecord]) -> String {
    let mut out = String::from("step,train_loss,val_loss\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.train_loss, r.val_loss));
    }
    out
}

pub struct SslOutcome {
    pub model: TrainedModel,
    pub trace: Vec<SslRecord>,
    pub best_step: usize,
}

fn token_inputs(spec: &ModelSpec, corpus: &Corpus, norm: &Normalizer, split: Split) -> Result<Vec<TokenInput>> {
    let InputSpec::Tokens { groups, regime } = &spec.input else {
        return Err(contract("masked reconstruction needs token input"));
    };
    corpus
        .indices_in(split)
        .par_iter()
        .map(|&i| TokenInput::from_sample(&corpus.samples[i], groups, regime, Some(norm)))
        .collect()
}

/// Pre-trains encoder and decoder by masked reconstruction over the
/// train split, validating on fixed masks of the validation split.
pub fn pretrain_ssl(corpus: &Corpus, spec: &ModelSpec, config: &SslConfig, seed: u64) -> Result<SslOutcome> {
    spec.validate()?;
    let InputSpec::Tokens { regime, .. } = &spec.input else {
        return Err(contract("masked reconstruction needs token input"));
    };
    if config.batch_size == 0 || config.validate_every == 0 {
        return Err(contract("batch_size and validate_every must be positive"));
    }
    let plan = config.plan.unwrap_or(MaskPlan::for_variant(regime.variant));
    plan.validate()?;
    let norm = Normalizer::fit(corpus);
    let train = token_inputs(spec, corpus, &norm, Split::Train)?;
    let val = token_inputs(spec, corpus, &norm, Split::Validation)?;
    if train.is_empty() || val.is_empty() {
        return Err(contract("pre-training needs train and validation samples"));
    }
    let mut rng = stream(seed, "init", 0);
    let mut params = init_model(spec, &mut rng)?;
    params.head.clear();
    init_decoder(&mut params.head, spec, config.decoder, &mut rng)?;

    let val_batches: Vec<Vec<MaskedSample>> = val
        .chunks(config.batch_size)
        .enumerate()
        .map(|(b, c)| {
            let refs: Vec<&TokenInput> = c.iter().collect();
            mask_batch(&plan, spec, &refs, seed, "ssl-val-mask", b as u64)
        })
        .collect::<Result<_>>()?;
    let validate = |p: &ModelParams| -> Result<f64> {
        let (mut sse, mut cells) = (0.0, 0);
        for b in &val_batches {
            let (s, _) = mae_step(p, spec, config.decoder, b, &[])?;
            sse += s.loss * s.cells as f64;
            cells += s.cells;
        }
        Ok(if cells == 0 { 0.0 } else { sse / cells as f64 })
    };

    let sections = [Section::Backbone, Section::Head];
    let lr = LrGroups {
        backbone: config.lr,
        head: config.lr,
        task_encoder: 0.0,
    };
    let mut opt = Optimizer::adam();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0);
    let (mut step, mut window_loss, mut window_n) = (0usize, 0.0, 0usize);
    'outer: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "ssl-epoch", epoch as u64));
        for idx in order.chunks(config.batch_size) {
            let refs: Vec<&TokenInput> = idx.iter().map(|&i| &train[i]).collect();
            let batch = mask_batch(&plan, spec, &refs, seed, "ssl-mask", step as u64)?;
            let (s, g) = mae_step(&params, spec, config.decoder, &batch, &sections)?;
            if !s.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite reconstruction loss".into(),
                });
            }
            if !s.degenerate {
                opt.apply(&mut params, &g, &lr)?;
            } else {
                log::warn!("batch {step} has no masked cells");
            }
            step += 1;
            window_loss += s.loss;
            window_n += 1;
            if step % config.validate_every == 0 {
                let v = validate(&params)?;
                trace.push(SslRecord {
                    step,
                    train_loss: window_loss / window_n as f64,
                    val_loss: v,
                });
                (window_loss, window_n) = (0.0, 0);
                if v < best.0 {
                    best = (v, params.clone(), step);
                }
                if stopper.observe(step, v) {
                    break 'outer;
                }
            }
        }
    }
    if trace.is_empty() || window_n > 0 {
        let v = validate(&params)?;
        trace.push(SslRecord {
            step,
            train_loss: if window_n > 0 { window_loss / window_n as f64 } else { f64::NAN },
            val_loss: v,
        });
        if v < best.0 {
            best = (v, params.clone(), step);
        }
    }
    Ok(SslOutcome {
        model: TrainedModel {
            spec: spec.clone(),
            params: best.1,
            norm: Some(norm),
            classes: Vec::new(),
        },
        trace,
        best_step: best.2,
    })
}
