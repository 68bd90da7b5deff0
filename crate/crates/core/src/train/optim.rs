use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{GradStore, TrainError};
use crate::models::{Family, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain gradient descent; the update is linear in the gradient.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw() -> Self {
        Self { kind: OptimizerKind::AdamW, weight_decay: 0.01, ..Self::adam() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, ..Self::adam() }
    }

    /// Adam for CNNs, AdamW for transformers.
    pub fn for_family(f: Family) -> Self {
        match f {
            Family::Cnn => Self::adam(),
            Family::Transformer => Self::adamw(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam / AdamW with one state slot per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    t: u64,
    state: IndexMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, model: &Model) -> Self {
        let state = model
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.clone(), Moments { m: vec![0.0; p.value.len()], v: vec![0.0; p.value.len()] }))
            .collect();
        Self { cfg, lr: cfg.lr, t: 0, state }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Names holding optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Applies one update from accumulated gradients.
    ///
    /// Every trainable parameter must have state; parameters absent from
    /// `grads` are treated as having zero gradient.
    pub fn step(&mut self, model: &mut Model, grads: &GradStore) -> Result<(), TrainError> {
        for name in grads.names() {
            if !self.state.contains_key(name) {
                return Err(TrainError::State(format!("gradient for {name} has no optimizer state")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, st) in &mut self.state {
            let p = model.param_mut(name)?;
            if !p.trainable || p.value.len() != st.m.len() {
                return Err(TrainError::State(format!("parameter {name} changed since the optimizer was built")));
            }
            let g = grads.get(name);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i] as f64);
                let mut th = *w as f64;
                if c.kind == OptimizerKind::Sgd {
                    *w = (th - self.lr * gi) as f32;
                    continue;
                }
                if c.kind == OptimizerKind::AdamW {
                    th -= self.lr * c.weight_decay * th;
                }
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                th -= self.lr * mh / (vh.sqrt() + c.eps);
                *w = th as f32;
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self { factor: 0.1, patience: 3, threshold: 1e-4, min_lr: 1e-6, lr, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's monitored loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
