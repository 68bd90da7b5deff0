use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kaiming_uniform, ssf_hook, Bindings, ForwardCtx, ForwardOut, Model, ModelError, Param, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompactCnnConfig {
    pub n_mels: usize,
    pub in_channels: usize,
    pub block_widths: [usize; 3],
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub pool_kind: PoolKind,
    pub adaptive_pool_out: (usize, usize),
    pub hidden_fc: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
}

impl Default for CompactCnnConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            in_channels: 1,
            block_widths: [16, 32, 64],
            kernel: 3,
            padding: 1,
            pool: 2,
            pool_kind: PoolKind::Max,
            adaptive_pool_out: (4, 4),
            hidden_fc: 128,
            dropout_p: 0.5,
            n_classes: 31,
        }
    }
}

impl CompactCnnConfig {
    pub fn with_classes(n_classes: usize) -> Self {
        Self { n_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.kernel != 3 || self.padding != 1 {
            return bad(format!("only 3x3 kernels with padding 1 are supported, got {} / {}", self.kernel, self.padding));
        }
        if self.pool != 2 {
            return bad(format!("pool size must be 2, got {}", self.pool));
        }
        if self.in_channels != 1 {
            return bad("inputs are single-channel spectrograms".into());
        }
        if self.block_widths.contains(&0) || self.hidden_fc == 0 || self.n_classes < 2 {
            return bad("widths must be positive and n_classes >= 2".into());
        }
        if self.adaptive_pool_out.0 == 0 || self.adaptive_pool_out.1 == 0 {
            return bad("adaptive pool output must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.n_mels < 8 {
            return bad("n_mels must allow three 2x2 pools".into());
        }
        Ok(())
    }

    /// Width of the flattened adaptive-pool output.
    pub fn flat_features(&self) -> usize {
        self.block_widths[2] * self.adaptive_pool_out.0 * self.adaptive_pool_out.1
    }
}

pub(super) fn init(c: &CompactCnnConfig, rng: &mut ChaCha8Rng) -> Result<IndexMap<String, Param>> {
    c.validate()?;
    let mut p = IndexMap::new();
    let mut cin = c.in_channels;
    for (i, &w) in c.block_widths.iter().enumerate() {
        let n = i + 1;
        let fan_in = cin * 9;
        p.insert(format!("conv{n}.weight"), Param::weight(kaiming_uniform(&[w, cin, 3, 3], fan_in, rng)));
        p.insert(format!("conv{n}.bias"), Param::weight(Tensor::zeros(&[w])));
        p.insert(format!("bn{n}.weight"), Param::weight(Tensor::ones(&[w])));
        p.insert(format!("bn{n}.bias"), Param::weight(Tensor::zeros(&[w])));
        p.insert(format!("bn{n}.running_mean"), Param::buffer(Tensor::zeros(&[w])));
        p.insert(format!("bn{n}.running_var"), Param::buffer(Tensor::ones(&[w])));
        cin = w;
    }
    let flat = c.flat_features();
    p.insert("fc.weight".into(), Param::weight(kaiming_uniform(&[c.hidden_fc, flat], flat, rng)));
    p.insert("fc.bias".into(), Param::weight(Tensor::zeros(&[c.hidden_fc])));
    p.insert("head.weight".into(), Param::weight(kaiming_uniform(&[c.n_classes, c.hidden_fc], c.hidden_fc, rng)));
    p.insert("head.bias".into(), Param::weight(Tensor::zeros(&[c.n_classes])));
    Ok(p)
}

pub(super) fn ssf_points(c: &CompactCnnConfig) -> Vec<(String, usize)> {
    let mut v = Vec::new();
    for (i, &w) in c.block_widths.iter().enumerate() {
        v.push((format!("conv{}", i + 1), w));
        v.push((format!("bn{}", i + 1), w));
    }
    v.push(("fc".into(), c.hidden_fc));
    v
}

/// conv → relu → pool → batchnorm, three times; adaptive average pool;
/// flatten → fc → dropout → head.
pub(super) fn forward<T: Real>(
    model: &Model,
    c: &CompactCnnConfig,
    tape: &mut Tape<T>,
    b: &Bindings,
    input: Var,
    ctx: &mut ForwardCtx,
) -> Result<ForwardOut<T>> {
    let s = tape.shape(input).to_vec();
    model.check_input(&s, c.n_mels, 8)?;
    let mut x = input;
    let mut bn_stats = Vec::new();
    for n in 1..=3 {
        let conv = format!("conv{n}");
        x = tape.conv2d(x, b.get(&format!("{conv}.weight"))?, Some(b.get(&format!("{conv}.bias"))?), c.padding)?;
        x = ssf_hook(model, tape, b, &conv, x, 1)?;
        x = tape.relu(x)?;
        x = match c.pool_kind {
            PoolKind::Max => tape.max_pool2d(x, c.pool)?,
            PoolKind::Avg => tape.avg_pool2d(x, c.pool)?,
        };
        let bn = format!("bn{n}");
        let (y, st) = tape.batch_norm2d(
            x,
            b.get(&format!("{bn}.weight"))?,
            b.get(&format!("{bn}.bias"))?,
            &model.buffer::<T>(&format!("{bn}.running_mean"))?,
            &model.buffer::<T>(&format!("{bn}.running_var"))?,
            T::of(0.1),
            T::of(1e-5),
            ctx.train,
        )?;
        if let Some(st) = st {
            bn_stats.push((bn.clone(), st));
        }
        x = ssf_hook(model, tape, b, &bn, y, 1)?;
    }
    let (oh, ow) = c.adaptive_pool_out;
    x = tape.adaptive_avg_pool2d(x, oh, ow)?;
    x = tape.flatten(x)?;
    x = tape.linear(x, b.get("fc.weight")?, Some(b.get("fc.bias")?))?;
    let features = ssf_hook(model, tape, b, "fc", x, 1)?;
    let dropped = tape.dropout(features, c.dropout_p, ctx.train, &mut ctx.rng)?;
    let logits = tape.linear(dropped, b.get("head.weight")?, Some(b.get("head.bias")?))?;
    Ok(ForwardOut { logits, features, bn_stats })
}
