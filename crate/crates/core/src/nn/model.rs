use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, ParcelSample};
use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::{Array, Tensor};
use crate::token_codec::{self, ChannelGroupSpec, EncodingRegime, TokenInput};

use super::config::TransformerConfig;
use super::layers::{classify, encode, linear, pool_sequence, sinusoid_table};
use super::params::{init_linear, ModelParams, TensorMap, TensorParams};

/// How per-sample location enters the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskInfoMode {
    #[default]
    None,
    /// Three Cartesian coordinates appended to every time step.
    Concat,
    /// Learned scale and shift before the backbone and before the head.
    Film,
}

pub const FILM_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputSpec {
    /// Per-day band values of one group, linearly projected, with a
    /// sinusoidal day-of-year position.
    Series { group: String, channels: Vec<usize> },
    /// Grouped tokens with contextual encodings.
    Tokens {
        groups: ChannelGroupSpec,
        regime: EncodingRegime,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub transformer: TransformerConfig,
    pub input: InputSpec,
    pub n_classes: usize,
    #[serde(default)]
    pub task_info: TaskInfoMode,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.n_classes == 0 {
            return Err(contract("model needs at least one class"));
        }
        if let InputSpec::Tokens { groups, regime } = &self.input {
            groups.validate()?;
            regime.validate()?;
            if regime.d_emb != self.transformer.embed_dim {
                return Err(contract("token regime width differs from embed_dim"));
            }
            let longest = groups.token_count(regime.max_len);
            if longest > self.transformer.max_seq_len {
                return Err(contract(format!(
                    "{longest} tokens at the longest series exceed max_seq_len {}",
                    self.transformer.max_seq_len
                )));
            }
            if self.task_info != TaskInfoMode::None {
                return Err(contract("task information is only supported on series input"));
            }
        }
        if self.transformer.embed_dim % 2 != 0 {
            return Err(contract("embed_dim must be even for sinusoidal positions"));
        }
        Ok(())
    }

    pub fn series_width(&self) -> usize {
        match &self.input {
            InputSpec::Series { channels, .. } => {
                channels.len() + if self.task_info == TaskInfoMode::Concat { 3 } else { 0 }
            }
            InputSpec::Tokens { .. } => 0,
        }
    }
}

/// Fresh parameters: weights uniform in ±1/sqrt(fan_in), biases zero.
pub fn init_model(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams> {
    spec.validate()?;
    let cfg = &spec.transformer;
    let d = cfg.embed_dim;
    let mut p = ModelParams::default();
    match &spec.input {
        InputSpec::Series { .. } => init_linear(&mut p.backbone, "input", spec.series_width(), d, rng),
        InputSpec::Tokens { groups, regime } => {
            token_codec::init_projections(&mut p.backbone, groups, regime, rng)
        }
    }
    super::layers::init_encoder(&mut p.backbone, cfg, rng);
    p.reset_head(d, spec.n_classes, rng);
    if spec.task_info == TaskInfoMode::Film {
        init_linear(&mut p.task_encoder, "film.fc1", 3, FILM_HIDDEN, rng);
        // Zero output layer: the modulation starts as the identity.
        p.task_encoder
            .insert("film.fc2.weight".into(), Array::zeros(&[FILM_HIDDEN, 4 * d]));
        p.task_encoder
            .insert("film.fc2.bias".into(), Array::zeros(&[4 * d]));
    }
    Ok(p)
}

/// Model input prepared from one sample. Plain data, so it can be shared
/// across threads and turned into tensors inside each tape scope.
#[derive(Clone, Debug, PartialEq)]
pub enum InputBody {
    Series {
        values: Array,
        positions: Vec<usize>,
        padded: Vec<bool>,
    },
    Tokens(TokenInput),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub body: InputBody,
    pub cart: [f64; 3],
}

/// Unit vector of a (longitude, latitude) pair in radians.
pub fn polar_to_cartesian(lon: f64, lat: f64) -> Result<[f64; 3]> {
    use std::f64::consts::{FRAC_PI_2, PI};
    if !(-PI..=PI).contains(&lon) || !(-FRAC_PI_2..=FRAC_PI_2).contains(&lat) {
        return Err(contract(format!("coordinates ({lon}, {lat}) outside the polar domain")));
    }
    Ok([lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()])
}

pub fn prepare_input(spec: &ModelSpec, sample: &ParcelSample, norm: Option<&Normalizer>) -> Result<ModelInput> {
    let cart = polar_to_cartesian(sample.lon, sample.lat)?;
    let body = match &spec.input {
        InputSpec::Series { group, channels } => {
            let rows = sample
                .channels
                .get(group)
                .ok_or_else(|| contract(format!("sample {} lacks group {group}", sample.id)))?;
            let t = sample.days.len();
            if rows.len() != t {
                return Err(contract(format!("sample {} has {} rows for {t} days", sample.id, rows.len())));
            }
            let pad = if spec.task_info == TaskInfoMode::Film {
                spec.transformer.max_seq_len
            } else {
                t
            };
            if t > spec.transformer.max_seq_len {
                return Err(crate::Error::Length {
                    len: t,
                    max: spec.transformer.max_seq_len,
                });
            }
            let w = spec.series_width();
            let mut data = Vec::with_capacity(pad * w);
            for row in rows {
                let picked: Vec<f64> = channels
                    .iter()
                    .map(|&k| {
                        row.get(k)
                            .copied()
                            .ok_or_else(|| contract(format!("group {group} lacks channel {k}")))
                    })
                    .collect::<Result<_>>()?;
                match norm {
                    Some(n) => data.extend(n.apply(group, &picked, Some(channels))?),
                    None => data.extend(picked),
                }
                if spec.task_info == TaskInfoMode::Concat {
                    data.extend(cart);
                }
            }
            data.resize(pad * w, 0.0);
            let mut positions: Vec<usize> = sample.days.iter().map(|d| d - 1).collect();
            positions.extend(t..pad);
            let mut padded = vec![false; t];
            padded.resize(pad, true);
            InputBody::Series {
                values: Array::new(vec![pad, w], data)?,
                positions,
                padded,
            }
        }
        InputSpec::Tokens { groups, regime } => {
            InputBody::Tokens(TokenInput::from_sample(sample, groups, regime, norm)?)
        }
    };
    Ok(ModelInput { body, cart })
}

/// Per-feature scale and shift, each `[1, d]`.
pub struct Film {
    pub gamma_backbone: Tensor,
    pub delta_backbone: Tensor,
    pub gamma_head: Tensor,
    pub delta_head: Tensor,
}

/// Runs the task encoder on a Cartesian coordinate.
pub fn film(encoder: &TensorMap, cart: [f64; 3], d: usize) -> Result<Film> {
    let x = Tensor::new(&[1, 3], cart.to_vec())?;
    let h = linear(encoder, "film.fc1", &x)?.relu()?;
    let o = linear(encoder, "film.fc2", &h)?;
    if o.shape()[1] != 4 * d {
        return Err(contract("task encoder width does not match embed_dim"));
    }
    Ok(Film {
        gamma_backbone: o.slice(1, 0, d)?.add_scalar(1.0)?,
        delta_backbone: o.slice(1, d, 2 * d)?,
        gamma_head: o.slice(1, 2 * d, 3 * d)?.add_scalar(1.0)?,
        delta_head: o.slice(1, 3 * d, 4 * d)?,
    })
}

/// Token embeddings `[n, d]` and their mask, before the encoder.
pub fn embed(p: &TensorParams, spec: &ModelSpec, input: &ModelInput) -> Result<(Tensor, Vec<bool>)> {
    match (&spec.input, &input.body) {
        (InputSpec::Series { .. }, InputBody::Series { values, positions, padded }) => {
            let x = Tensor::from_array(values);
            let pe = sinusoid_table(positions, spec.transformer.embed_dim)?;
            let e = linear(&p.backbone, "input", &x)?.add(&pe)?;
            Ok((e, padded.clone()))
        }
        (InputSpec::Tokens { groups, regime }, InputBody::Tokens(t)) => {
            let seq = token_codec::encode_tokens(t, groups, regime, &p.backbone)?;
            Ok((seq.tokens, seq.mask))
        }
        _ => Err(contract("model input does not match the model's input spec")),
    }
}

/// Pooled sample embedding `[1, d]`, including task modulation.
pub fn sample_embedding(p: &TensorParams, spec: &ModelSpec, input: &ModelInput) -> Result<Tensor> {
    let (mut x, mask) = embed(p, spec, input)?;
    let mods = match spec.task_info {
        TaskInfoMode::Film => Some(film(&p.task_encoder, input.cart, spec.transformer.embed_dim)?),
        _ => None,
    };
    if let Some(f) = &mods {
        x = x.mul(&f.gamma_backbone)?.add(&f.delta_backbone)?;
    }
    let enc = encode(&p.backbone, &spec.transformer, &x, &mask)?;
    let mut e = pool_sequence(&enc, &mask)?;
    if let Some(f) = &mods {
        e = e.mul(&f.gamma_head)?.add(&f.delta_head)?;
    }
    Ok(e)
}

pub fn logits(p: &TensorParams, spec: &ModelSpec, input: &ModelInput) -> Result<Tensor> {
    classify(&p.head, &sample_embedding(p, spec, input)?)
}

/// Stacked logits `[b, n_c]` for a batch of inputs.
pub fn batch_logits(p: &TensorParams, spec: &ModelSpec, inputs: &[&ModelInput]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(contract("empty batch"));
    }
    let rows = inputs
        .iter()
        .map(|i| sample_embedding(p, spec, i))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = rows.iter().collect();
    classify(&p.head, &Tensor::concat(&refs, 0)?)
}
