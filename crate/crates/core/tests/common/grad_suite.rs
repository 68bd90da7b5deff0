//! Finite-difference suite shared by the gradient tests and the acceptance
//! run: f64 checks of every differentiable op over several seeds and of the
//! parameters of both model families.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uavtune::models::{
    Architecture, CompactCnnConfig, ForwardCtx, Model, ParamKind, PoolKind, SpecTransformerConfig,
};
use uavtune::peft::{apply_strategy, cayley_blocks, ssf_apply, FineTuneStrategy, Ia3Options, OftOptions};
use uavtune::tensor::{finite_diff_check, scaled_dot_attention, Tape, Tensor, TensorError, Var};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub const SEEDS: u64 = 10;
pub const SMOOTH: f64 = 1e-5;
pub const KINKED: f64 = 1e-3;
pub const H: f64 = 1e-6;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Pushes values at least `gap` away from zero.
pub fn off_zero(t: &mut Tensor<f64>, gap: f64) {
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
}

pub type OpFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'a;

/// Checks `sum(W ⊙ f(inputs))` against every input in turn, with `W` a
/// random weighting so upstream gradients are not all ones.
pub fn check_op(name: &str, shapes: &[&[usize]], tol: f64, prep: impl Fn(&mut Tensor<f64>), f: &OpFn<'_>) -> Check {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                let mut t = randn(s, &mut rng);
                prep(&mut t);
                t
            })
            .collect();
        let out_shape = {
            let mut tape = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vs).unwrap();
            tape.shape(out).to_vec()
        };
        let w = randn(&out_shape, &mut rng);
        for j in 0..inputs.len() {
            let loss = |tape: &mut Tape<f64>, leaf: Var| {
                let vs: Vec<Var> =
                    (0..inputs.len()).map(|i| if i == j { leaf } else { tape.constant(inputs[i].clone()) }).collect();
                let out = f(tape, &vs)?;
                let wv = tape.constant(w.clone());
                let y = tape.mul(out, wv)?;
                tape.sum(y)
            };
            let err = finite_diff_check(loss, &inputs[j], H).map_err(|e| format!("{name}: {e}"))?;
            if !(err < tol) {
                return Err(format!("{name}: input {j}, seed {seed}: {err:e}"));
            }
        }
    }
    Ok(())
}

pub fn none(_: &mut Tensor<f64>) {}

pub fn elementwise_ops() -> Check {
    check_op("add", &[&[2, 3, 4], &[2, 3, 4]], SMOOTH, none, &|t, v| t.add(v[0], v[1]))?;
    check_op("add broadcast", &[&[2, 3, 4], &[1, 3, 1]], SMOOTH, none, &|t, v| t.add(v[0], v[1]))?;
    check_op("sub", &[&[3, 5], &[1, 5]], SMOOTH, none, &|t, v| t.sub(v[0], v[1]))?;
    check_op("mul", &[&[2, 3, 4], &[2, 3, 4]], SMOOTH, none, &|t, v| t.mul(v[0], v[1]))?;
    check_op("mul broadcast", &[&[2, 1, 4], &[1, 3, 4]], SMOOTH, none, &|t, v| t.mul(v[0], v[1]))?;
    check_op("scale", &[&[4, 3]], SMOOTH, none, &|t, v| t.scale(v[0], -1.7))?;
    check_op("gelu", &[&[3, 7]], SMOOTH, none, &|t, v| t.gelu(v[0]))?;
    check_op("relu", &[&[3, 7]], KINKED, |x| off_zero(x, 0.05), &|t, v| t.relu(v[0]))?;
    Ok(())
}

pub fn linear_algebra_ops() -> Check {
    check_op("matmul", &[&[3, 4], &[4, 5]], SMOOTH, none, &|t, v| t.matmul(v[0], v[1]))?;
    check_op("batched matmul", &[&[2, 3, 4], &[2, 4, 2]], SMOOTH, none, &|t, v| t.matmul(v[0], v[1]))?;
    check_op("linear", &[&[2, 3, 4], &[5, 4], &[5]], SMOOTH, none, &|t, v| t.linear(v[0], v[1], Some(v[2])))?;
    check_op("linear no bias", &[&[3, 4], &[2, 4]], SMOOTH, none, &|t, v| t.linear(v[0], v[1], None))?;
    check_op("transpose", &[&[2, 3, 4]], SMOOTH, none, &|t, v| t.transpose(v[0]))?;
    Ok(())
}

pub fn shape_ops() -> Check {
    check_op("reshape", &[&[2, 6]], SMOOTH, none, &|t, v| t.reshape(v[0], &[3, 4]))?;
    check_op("flatten", &[&[2, 3, 2]], SMOOTH, none, &|t, v| t.flatten(v[0]))?;
    check_op("permute", &[&[2, 3, 4]], SMOOTH, none, &|t, v| t.permute(v[0], &[2, 0, 1]))?;
    check_op("concat", &[&[2, 3], &[2, 4]], SMOOTH, none, &|t, v| t.concat(v[0], v[1], 1))?;
    check_op("concat axis 0", &[&[1, 3], &[2, 3]], SMOOTH, none, &|t, v| t.concat(v[0], v[1], 0))?;
    check_op("broadcast_to", &[&[1, 3, 1]], SMOOTH, none, &|t, v| t.broadcast_to(v[0], &[2, 3, 4]))?;
    check_op("select", &[&[2, 3, 4]], SMOOTH, none, &|t, v| t.select(v[0], 1, 2))?;
    Ok(())
}

pub fn reductions_and_losses() -> Check {
    check_op("sum", &[&[3, 4]], SMOOTH, none, &|t, v| t.sum(v[0]))?;
    check_op("mean", &[&[3, 4]], SMOOTH, none, &|t, v| t.mean(v[0]))?;
    check_op("softmax last", &[&[3, 5]], SMOOTH, none, &|t, v| t.softmax(v[0], 1))?;
    check_op("softmax middle", &[&[2, 4, 3]], SMOOTH, none, &|t, v| t.softmax(v[0], 1))?;
    check_op("cross_entropy", &[&[4, 6]], 1e-6, none, &|t, v| t.cross_entropy(v[0], &[0, 5, 2, 2]))?;
    Ok(())
}

pub fn dropout_with_fixed_mask() -> Check {
    check_op("dropout", &[&[4, 8]], SMOOTH, none, &|t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.dropout(v[0], 0.4, true, &mut rng)
    })?;
    Ok(())
}

pub fn convolution_and_pooling() -> Check {
    check_op("conv2d", &[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]], SMOOTH, none, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1))?;
    check_op("conv2d valid", &[&[1, 2, 5, 5], &[3, 2, 3, 3]], SMOOTH, none, &|t, v| t.conv2d(v[0], v[1], None, 0))?;
    check_op("max_pool2d", &[&[2, 2, 6, 4]], KINKED, none, &|t, v| t.max_pool2d(v[0], 2))?;
    check_op("avg_pool2d", &[&[2, 2, 6, 4]], SMOOTH, none, &|t, v| t.avg_pool2d(v[0], 2))?;
    check_op("adaptive down", &[&[1, 2, 7, 9]], SMOOTH, none, &|t, v| t.adaptive_avg_pool2d(v[0], 4, 4))?;
    check_op("adaptive up", &[&[1, 2, 3, 2]], SMOOTH, none, &|t, v| t.adaptive_avg_pool2d(v[0], 4, 4))?;
    Ok(())
}

pub fn normalization() -> Check {
    let rm = [0.1, -0.2, 0.3];
    let rv = [1.0, 0.5, 2.0];
    check_op("batch_norm2d train", &[&[4, 3, 2, 3], &[3], &[3]], SMOOTH, none, &|t, v| {
        Ok(t.batch_norm2d(v[0], v[1], v[2], &rm, &rv, 0.1, 1e-5, true)?.0)
    })?;
    check_op("batch_norm2d eval", &[&[4, 3, 2, 3], &[3], &[3]], SMOOTH, none, &|t, v| {
        Ok(t.batch_norm2d(v[0], v[1], v[2], &rm, &rv, 0.1, 1e-5, false)?.0)
    })?;
    check_op("layer_norm", &[&[2, 3, 6], &[6], &[6]], SMOOTH, none, &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    Ok(())
}

pub fn attention() -> Check {
    check_op("attention", &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]], SMOOTH, none, &|t, v| {
        Ok(scaled_dot_attention(t, v[0], v[1], v[2], 2, None)?.0)
    })?;
    check_op("attention weights", &[&[1, 4, 6], &[1, 4, 6], &[1, 4, 6]], SMOOTH, none, &|t, v| {
        Ok(scaled_dot_attention(t, v[0], v[1], v[2], 3, None)?.1)
    })?;
    check_op("attention kv scales", &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4], &[4], &[4]], SMOOTH, none, &|t, v| {
        Ok(scaled_dot_attention(t, v[0], v[1], v[2], 2, Some((v[3], v[4])))?.0)
    })?;
    Ok(())
}

pub fn adapter_ops() -> Check {
    check_op("ssf", &[&[2, 3, 4], &[3], &[3]], SMOOTH, none, &|t, v| Ok(ssf_apply(t, v[0], v[1], v[2], 1)?))?;
    check_op("cayley one block", &[&[1, 6]], SMOOTH, |x| x.data_mut().iter_mut().for_each(|v| *v *= 0.5), &|t, v| {
        cayley_blocks(t, v[0], 4).map_err(|e| TensorError::Invalid { op: "cayley", msg: e.to_string() })
    })?;
    check_op("cayley blocks", &[&[3, 3]], SMOOTH, none, &|t, v| {
        cayley_blocks(t, v[0], 3).map_err(|e| TensorError::Invalid { op: "cayley", msg: e.to_string() })
    })?;
    check_op("rotated weight", &[&[6, 6], &[2, 3]], SMOOTH, none, &|t, v| {
        let r = cayley_blocks(t, v[1], 3).map_err(|e| TensorError::Invalid { op: "cayley", msg: e.to_string() })?;
        t.matmul(v[0], r)
    })?;
    Ok(())
}

/// Cross-entropy of the model on `x`, with parameter `name` bound to `value`.
fn model_loss(m: &Model, x: &Tensor<f64>, labels: &[usize], train: bool, name: &str, value: &Tensor<f64>, grad: bool) -> (f64, Option<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let mut b = m.bind(&mut tape);
    let leaf = tape.leaf(value.clone(), grad);
    b.set(name, leaf);
    let xv = tape.constant(x.clone());
    let mut ctx = if train { ForwardCtx::train(7) } else { ForwardCtx::eval() };
    let out = m.forward(&mut tape, &b, xv, &mut ctx).unwrap();
    let loss = tape.cross_entropy(out.logits, labels).unwrap();
    let l = tape.value(loss).item();
    if !grad {
        return (l, None);
    }
    tape.backward(loss).unwrap();
    (l, Some(tape.grad(leaf).unwrap().to_vec()))
}

struct ModelCheck {
    worst: f64,
    checked: usize,
    skipped: usize,
}

/// Central differences for `stride`-spaced entries of every parameter. An
/// entry whose estimates at `h` and `h/10` disagree straddles a kink and is
/// skipped.
fn check_model(m: &Model, x: &Tensor<f64>, labels: &[usize], train: bool, stride: usize) -> ModelCheck {
    let mut r = ModelCheck { worst: 0.0, checked: 0, skipped: 0 };
    for (name, p) in m.params() {
        if p.kind == ParamKind::Buffer {
            continue;
        }
        let base: Tensor<f64> = p.value.cast();
        let analytic = model_loss(m, x, labels, train, name, &base, true).1.unwrap();
        let numeric = |i: usize, h: f64| {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let lp = model_loss(m, x, labels, train, name, &plus, false).0;
            let lm = model_loss(m, x, labels, train, name, &minus, false).0;
            (lp - lm) / (2.0 * h)
        };
        for i in (0..base.len()).step_by(stride) {
            let n1 = numeric(i, H);
            let err = |n: f64| (analytic[i] - n).abs() / n.abs().max(1.0);
            let mut e = err(n1);
            if e >= SMOOTH {
                let n2 = numeric(i, H / 10.0);
                if (n1 - n2).abs() / n1.abs().max(1.0) > SMOOTH {
                    r.skipped += 1;
                    continue;
                }
                e = e.min(err(n2));
            }
            r.worst = r.worst.max(e);
            r.checked += 1;
        }
    }
    r
}

fn tiny_cnn(pool: PoolKind, seed: u64) -> Model {
    let cfg = CompactCnnConfig {
        n_mels: 16,
        block_widths: [3, 4, 5],
        hidden_fc: 6,
        adaptive_pool_out: (2, 2),
        pool_kind: pool,
        n_classes: 3,
        ..Default::default()
    };
    Model::new(Architecture::Cnn(cfg), seed).unwrap()
}

fn tiny_transformer(seed: u64) -> Model {
    let cfg = SpecTransformerConfig {
        n_mels: 16,
        n_frames: 16,
        patch: 8,
        embed_dim: 8,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        n_classes: 3,
    };
    Model::new(Architecture::Transformer(cfg), seed).unwrap()
}

/// Moves adapters off their identity so their gradients are generic.
fn jitter_adapters(m: &mut Model, rng: &mut ChaCha8Rng) {
    for (_, p) in m.params_mut() {
        if p.kind == ParamKind::Adapter {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.sample::<f32, _>(StandardNormal);
            }
        }
    }
}

pub fn cnn_parameters() -> Check {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = if seed % 2 == 0 { PoolKind::Max } else { PoolKind::Avg };
        let mut m = apply_strategy(tiny_cnn(pool, seed), FineTuneStrategy::Ssf).unwrap();
        jitter_adapters(&mut m, &mut rng);
        let x = randn(&[3, 1, 16, 12], &mut rng);
        for train in [true, false] {
            let r = check_model(&m, &x, &[0, 2, 1], train, 1);
            ensure!(r.worst < KINKED, "cnn seed {seed} train {train}: {:e}", r.worst);
            ensure!(r.skipped * 100 <= r.checked, "cnn seed {seed}: {} kinks in {}", r.skipped, r.checked);
        }
    }
    Ok(())
}

pub fn transformer_parameters() -> Check {
    let strategies = [
        FineTuneStrategy::Full,
        FineTuneStrategy::Ssf,
        FineTuneStrategy::Ia3(Ia3Options { scale_query: true }),
        FineTuneStrategy::Oft(OftOptions { blocks: 2 }),
    ];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = strategies[seed as usize % strategies.len()];
        let mut m = apply_strategy(tiny_transformer(seed), s).unwrap();
        jitter_adapters(&mut m, &mut rng);
        let x = randn(&[2, 1, 16, 16], &mut rng);
        let r = check_model(&m, &x, &[1, 2], false, 1);
        ensure!(r.skipped == 0, "transformer {s}: {} kinks", r.skipped);
        ensure!(r.worst < SMOOTH, "transformer seed {seed} {s}: {:e}", r.worst);
    }
    Ok(())
}

pub fn default_size_models_sampled() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cnn = Model::new(Architecture::Cnn(CompactCnnConfig::with_classes(4)), 1).unwrap();
    let x = randn(&[2, 1, 64, 24], &mut rng);
    let r = check_model(&cnn, &x, &[0, 3], true, 997);
    ensure!(r.worst < KINKED && r.skipped * 100 <= r.checked, "default cnn: {:e}", r.worst);

    let cfg = SpecTransformerConfig { n_frames: 32, n_classes: 4, ..Default::default() };
    let tr = Model::new(Architecture::Transformer(cfg), 2).unwrap();
    let x = randn(&[2, 1, 64, 32], &mut rng);
    let r = check_model(&tr, &x, &[1, 2], false, 251);
    ensure!(r.worst < SMOOTH && r.skipped == 0, "default transformer: {:e}", r.worst);
    Ok(())
}

/// Every group of the suite by name.
pub const SUITE: [(&str, fn() -> Check); 12] = [
    ("elementwise ops", elementwise_ops),
    ("linear algebra ops", linear_algebra_ops),
    ("shape ops", shape_ops),
    ("reductions and losses", reductions_and_losses),
    ("dropout", dropout_with_fixed_mask),
    ("convolution and pooling", convolution_and_pooling),
    ("normalization", normalization),
    ("attention", attention),
    ("adapter ops", adapter_ops),
    ("cnn parameters", cnn_parameters),
    ("transformer parameters", transformer_parameters),
    ("default-size models", default_size_models_sampled),
];
