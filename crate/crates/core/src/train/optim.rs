use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParams, Section};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate per parameter section. A zero rate freezes the section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrGroups {
    pub backbone: f64,
    pub head: f64,
    pub task_encoder: f64,
}

impl LrGroups {
    pub fn uniform(lr: f64) -> Self {
        LrGroups {
            backbone: lr,
            head: lr,
            task_encoder: lr,
        }
    }

    pub fn get(&self, s: Section) -> f64 {
        match s {
            Section::Backbone => self.backbone,
            Section::Head => self.head,
            Section::TaskEncoder => self.task_encoder,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        LrGroups {
            backbone: self.backbone * f,
            head: self.head * f,
            task_encoder: self.task_encoder * f,
        }
    }

    /// Sections with a non-zero rate, in canonical order.
    pub fn trainable(&self) -> Vec<Section> {
        Section::ALL.into_iter().filter(|s| self.get(*s) != 0.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state over named parameters. Gradients come as a
/// [`ModelParams`] holding only the entries to update.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    moments: BTreeMap<(Section, String), (Vec<f64>, Vec<f64>)>,
}

fn check_finite(grads: &ModelParams, step: u64) -> Result<()> {
    for s in Section::ALL {
        for (k, g) in grads.section(s) {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    detail: format!("non-finite gradient for {}.{k}", s.prefix()),
                });
            }
        }
    }
    Ok(())
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    /// First and second moment of one entry, if it has been updated.
    pub fn moments(&self, s: Section, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(&(s, name.to_string()))
            .map(|(m, v)| (&m[..], &v[..]))
    }

    /// Applies one update. Sections whose rate is zero are left untouched.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: &LrGroups) -> Result<()> {
        check_finite(grads, self.step)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for s in Section::ALL {
            let rate = lr.get(s);
            if rate == 0.0 {
                continue;
            }
            for (k, g) in grads.section(s) {
                let p = params
                    .section_mut(s)
                    .get_mut(k)
                    .ok_or_else(|| crate::error::contract(format!("gradient for unknown {}.{k}", s.prefix())))?;
                if p.shape() != g.shape() {
                    return Err(Error::Shape {
                        op: "optimizer",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= rate * gi;
                        }
                    }
                    OptimizerKind::Adam => {
                        let n = g.numel();
                        let (m, v) = self
                            .moments
                            .entry((s, k.clone()))
                            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                        for (i, w) in p.data_mut().iter_mut().enumerate() {
                            let gi = g.data()[i];
                            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                            let mh = m[i] / bc1;
                            let vh = v[i] / bc2;
                            *w -= rate * mh / (vh.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine schedule with `cycles` equal-length restarts; zero cycles keeps
/// the rate constant.
pub fn cosine_annealing(lr_max: f64, cycles: u32, epoch: usize, total_epochs: usize) -> f64 {
    if cycles == 0 || total_epochs == 0 {
        return lr_max;
    }
    let len = total_epochs as f64 / cycles as f64;
    let pos = (epoch as f64) % len;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * pos / len).cos())
}

/// Watches a validation loss and signals when it has not improved for
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
}

impl EarlyStopper {
    pub const MIN_DELTA: f64 = 1e-12;

    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            epochs_since_best: 0,
        }
    }

    /// Records the loss of `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss - Self::MIN_DELTA {
            self.best_loss = loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        self.epochs_since_best >= self.patience
    }
}
