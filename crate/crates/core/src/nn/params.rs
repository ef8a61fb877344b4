use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::{Array, Tape, Tensor};

pub type ParamMap = BTreeMap<String, Array>;
pub type TensorMap = BTreeMap<String, Tensor>;

/// Model parameters split into the encoder (`backbone`), the task-specific
/// layers (`head`) and the optional task-information encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub backbone: ParamMap,
    pub head: ParamMap,
    pub task_encoder: ParamMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Backbone,
    Head,
    TaskEncoder,
}

impl Section {
    pub const ALL: [Section; 3] = [Section::Backbone, Section::Head, Section::TaskEncoder];

    pub fn prefix(self) -> &'static str {
        match self {
            Section::Backbone => "backbone",
            Section::Head => "head",
            Section::TaskEncoder => "task_encoder",
        }
    }
}

impl ModelParams {
    pub fn section(&self, s: Section) -> &ParamMap {
        match s {
            Section::Backbone => &self.backbone,
            Section::Head => &self.head,
            Section::TaskEncoder => &self.task_encoder,
        }
    }

    pub fn section_mut(&mut self, s: Section) -> &mut ParamMap {
        match s {
            Section::Backbone => &mut self.backbone,
            Section::Head => &mut self.head,
            Section::TaskEncoder => &mut self.task_encoder,
        }
    }

    pub fn num_scalars(&self) -> usize {
        Section::ALL
            .iter()
            .flat_map(|s| self.section(*s).values())
            .map(Array::numel)
            .sum()
    }

    /// Output width of the classification head, if one is present.
    pub fn n_classes(&self) -> Option<usize> {
        self.head.get("classifier.weight").map(|w| w.shape()[1])
    }

    /// Flat `(section, name)` keys in canonical order.
    pub fn keys(&self, sections: &[Section]) -> Vec<(Section, String)> {
        sections
            .iter()
            .flat_map(|s| self.section(*s).keys().map(move |k| (*s, k.clone())))
            .collect()
    }

    pub fn get(&self, s: Section, name: &str) -> Result<&Array> {
        self.section(s)
            .get(name)
            .ok_or_else(|| contract(format!("missing parameter {}.{name}", s.prefix())))
    }

    /// Replaces the head with a freshly initialized linear classifier.
    pub fn reset_head(&mut self, embed_dim: usize, n_classes: usize, rng: &mut Rng) {
        self.head.clear();
        init_linear(&mut self.head, "classifier", embed_dim, n_classes, rng);
    }

    pub fn is_finite(&self) -> bool {
        Section::ALL
            .iter()
            .all(|s| self.section(*s).values().all(Array::is_finite))
    }
}

/// Tape-side view of [`ModelParams`].
#[derive(Clone, Debug, Default)]
pub struct TensorParams {
    pub backbone: TensorMap,
    pub head: TensorMap,
    pub task_encoder: TensorMap,
}

impl TensorParams {
    /// Constant view: nothing is tracked.
    pub fn constant(p: &ModelParams) -> Self {
        Self::build(p, None, &[])
    }

    /// View whose tensors in `watched` sections are leaves on `tape`.
    pub fn watched(p: &ModelParams, tape: &Tape, watched: &[Section]) -> Self {
        Self::build(p, Some(tape), watched)
    }

    fn build(p: &ModelParams, tape: Option<&Tape>, watched: &[Section]) -> Self {
        let mut out = TensorParams::default();
        for s in Section::ALL {
            let track = tape.filter(|_| watched.contains(&s));
            let dst = out.section_mut(s);
            for (k, a) in p.section(s) {
                let t = Tensor::from_array(a);
                dst.insert(k.clone(), track.map_or(t.clone(), |tp| tp.watch(&t)));
            }
        }
        out
    }

    pub fn section(&self, s: Section) -> &TensorMap {
        match s {
            Section::Backbone => &self.backbone,
            Section::Head => &self.head,
            Section::TaskEncoder => &self.task_encoder,
        }
    }

    pub fn section_mut(&mut self, s: Section) -> &mut TensorMap {
        match s {
            Section::Backbone => &mut self.backbone,
            Section::Head => &mut self.head,
            Section::TaskEncoder => &mut self.task_encoder,
        }
    }

    /// Tensors of `sections` in canonical order.
    pub fn flat(&self, sections: &[Section]) -> Vec<&Tensor> {
        sections
            .iter()
            .flat_map(|s| self.section(*s).values())
            .collect()
    }

    pub fn to_params(&self) -> ModelParams {
        let mut p = ModelParams::default();
        for s in Section::ALL {
            let dst = p.section_mut(s);
            for (k, t) in self.section(s) {
                dst.insert(k.clone(), t.to_array());
            }
        }
        p
    }
}

pub fn lookup<'a>(map: &'a TensorMap, name: &str) -> Result<&'a Tensor> {
    map.get(name)
        .ok_or_else(|| contract(format!("missing parameter {name}")))
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Inserts `{name}.weight` of shape `[fan_in, fan_out]` drawn from
/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) and a zero `{name}.bias`.
pub fn init_linear(map: &mut ParamMap, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    map.insert(format!("{name}.weight"), uniform(&[fan_in, fan_out], bound, rng));
    map.insert(format!("{name}.bias"), Array::zeros(&[fan_out]));
}

/// Lookup table of `rows` entries, initialized as a linear map from a one-hot input.
pub fn init_table(map: &mut ParamMap, name: &str, rows: usize, width: usize, rng: &mut Rng) {
    let bound = 1.0 / (rows as f64).sqrt();
    map.insert(name.to_string(), uniform(&[rows, width], bound, rng));
}

pub fn init_layer_norm(map: &mut ParamMap, name: &str, dim: usize) {
    map.insert(format!("{name}.gamma"), Array::full(&[dim], 1.0));
    map.insert(format!("{name}.beta"), Array::zeros(&[dim]));
}

pub fn init_vector(map: &mut ParamMap, name: &str, dim: usize, rng: &mut Rng) {
    let bound = 1.0 / (dim as f64).sqrt();
    map.insert(name.to_string(), uniform(&[dim], bound, rng));
}
