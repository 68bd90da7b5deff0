use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uavtune::models::{Architecture, CompactCnnConfig, Family, Model, ParamKind, SpecTransformerConfig};
use uavtune::peft::{
    apply_strategy, cayley, orthogonality_error, param_stats, skew_params, ssf_apply, FineTuneStrategy, Ia3Options,
    OftOptions, PeftError,
};
use uavtune::tensor::{finite_diff_check, Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn cnn(classes: usize) -> Model {
    Model::new(Architecture::Cnn(CompactCnnConfig::with_classes(classes)), 7).unwrap()
}

fn transformer(frames: usize, classes: usize) -> Model {
    let cfg = SpecTransformerConfig { n_frames: frames, n_classes: classes, ..Default::default() };
    Model::new(Architecture::Transformer(cfg), 8).unwrap()
}

const IA3: FineTuneStrategy = FineTuneStrategy::Ia3(Ia3Options { scale_query: false });
const OFT: FineTuneStrategy = FineTuneStrategy::Oft(OftOptions { blocks: 4 });

// Independent hand counts for the default widths.
const CNN_CONV_BN: usize = (16 * 9 + 16 + 32) + (32 * 16 * 9 + 32 + 64) + (64 * 32 * 9 + 64 + 128);
const CNN_FC: usize = 1024 * 128 + 128;
const CNN_BN_AFFINE: usize = 2 * (16 + 32 + 64);
const CNN_SSF: usize = 2 * (16 + 16 + 32 + 32 + 64 + 64 + 128);

fn cnn_head(c: usize) -> usize {
    128 * c + c
}

fn cnn_total(c: usize) -> usize {
    CNN_CONV_BN + CNN_FC + cnn_head(c)
}

const D: usize = 64;
const DEPTH: usize = 4;
const HIDDEN: usize = 256;
const TR_SSF: usize = 2 * (D + DEPTH * (D + 4 * D + D + HIDDEN + D) + D);
const TR_IA3: usize = DEPTH * (D + D + HIDDEN);
const TR_OFT: usize = DEPTH * 4 * 4 * (16 * 15 / 2);

fn tr_total(patches: usize, c: usize) -> usize {
    let block = 4 * D + 4 * (D * D + D) + (D * HIDDEN + HIDDEN) + (HIDDEN * D + D);
    (256 * D + D) + D + (patches + 1) * D + DEPTH * block + 2 * D + D * c + c
}

fn pct(t: usize, total: usize) -> f64 {
    100.0 * t as f64 / total as f64
}

#[test]
fn applicability_matrix() {
    let expect_ok = |s: FineTuneStrategy, f: Family| match s {
        FineTuneStrategy::BatchNorm => f == Family::Cnn,
        FineTuneStrategy::Ia3(_) | FineTuneStrategy::Oft(_) => f == Family::Transformer,
        _ => true,
    };
    for s in FineTuneStrategy::ALL {
        for (f, m) in [(Family::Cnn, cnn(31)), (Family::Transformer, transformer(157, 31))] {
            let r = apply_strategy(m, s);
            assert_eq!(r.is_ok(), expect_ok(s, f), "{s} on {f}");
            if let Err(e) = r {
                assert!(matches!(e, PeftError::Inapplicable { .. }), "{e}");
            }
        }
    }
}

#[test]
fn cnn_trainable_counts() {
    let c = 31;
    let total = cnn_total(c);
    let cells = [
        (FineTuneStrategy::Full, total, total),
        (FineTuneStrategy::ClassifierOnly, CNN_FC + cnn_head(c), total),
        (FineTuneStrategy::BatchNorm, CNN_BN_AFFINE + cnn_head(c), total),
        (FineTuneStrategy::Ssf, CNN_SSF + cnn_head(c), total + CNN_SSF),
    ];
    for (s, trainable, total) in cells {
        let st = param_stats(&apply_strategy(cnn(c), s).unwrap());
        assert_eq!((st.trainable, st.total), (trainable, total), "{s}");
        assert_eq!(st.percent, pct(trainable, total), "{s}");
    }
}

#[test]
fn transformer_trainable_counts() {
    let (c, n) = (31, 4 * 9);
    let total = tr_total(n, c);
    let head = D * c + c;
    let cells = [
        (FineTuneStrategy::Full, total, total),
        (FineTuneStrategy::ClassifierOnly, head, total),
        (FineTuneStrategy::Ssf, TR_SSF + head, total + TR_SSF),
        (IA3, TR_IA3 + head, total + TR_IA3),
        (OFT, TR_OFT + head, total + TR_OFT),
    ];
    for (s, trainable, total) in cells {
        let st = param_stats(&apply_strategy(transformer(157, c), s).unwrap());
        assert_eq!((st.trainable, st.total), (trainable, total), "{s}");
    }
}

#[test]
fn ia3_query_scaling_adds_one_vector_per_block() {
    let s = FineTuneStrategy::Ia3(Ia3Options { scale_query: true });
    let st = param_stats(&apply_strategy(transformer(157, 31), s).unwrap());
    assert_eq!(st.trainable, TR_IA3 + DEPTH * D + D * 31 + 31);
}

#[test]
fn full_and_frozen_percent_strings() {
    let m = apply_strategy(cnn(31), FineTuneStrategy::Full).unwrap();
    assert_eq!(format!("{:.2}", param_stats(&m).percent), "100.00");
    let mut m = transformer(157, 31);
    m.freeze_all();
    assert_eq!(param_stats(&m).to_string(), format!("0/{} (0.00%)", tr_total(36, 31)));
}

#[test]
fn ssf_on_cnn_is_a_small_fraction() {
    let m = apply_strategy(cnn(31), FineTuneStrategy::Ssf).unwrap();
    let st = param_stats(&m);
    assert!(pct(CNN_SSF, st.total) < 2.0);
    // with the 8-class synthetic head, adapters plus head stay under 2%
    let st = param_stats(&apply_strategy(cnn(8), FineTuneStrategy::Ssf).unwrap());
    assert_eq!(st.trainable, CNN_SSF + cnn_head(8));
    assert!(st.percent < 2.0, "{st}");
}

#[test]
fn base_weights_frozen_under_adapters() {
    for (s, m) in [
        (FineTuneStrategy::Ssf, cnn(31)),
        (FineTuneStrategy::Ssf, transformer(157, 31)),
        (IA3, transformer(157, 31)),
        (OFT, transformer(157, 31)),
    ] {
        let m = apply_strategy(m, s).unwrap();
        for (name, p) in m.params() {
            let expect = p.kind == ParamKind::Adapter || name.starts_with("head.");
            assert_eq!(p.trainable, expect && p.kind != ParamKind::Buffer, "{s}: {name}");
        }
    }
}

#[test]
fn adapters_cannot_stack() {
    let m = apply_strategy(transformer(157, 31), FineTuneStrategy::Ssf).unwrap();
    assert!(matches!(apply_strategy(m, IA3), Err(PeftError::Option(_))));
}

#[test]
fn oft_blocks_must_tile_width() {
    for blocks in [0, 3, 64] {
        let s = FineTuneStrategy::Oft(OftOptions { blocks });
        assert!(matches!(apply_strategy(transformer(157, 31), s), Err(PeftError::Option(_))), "{blocks}");
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in FineTuneStrategy::ALL {
        assert_eq!(s.name().parse::<FineTuneStrategy>().unwrap(), s);
    }
    assert!("lora".parse::<FineTuneStrategy>().is_err());
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn adapters_are_identity_at_init() {
    let cases = [
        (FineTuneStrategy::Ssf, cnn(31)),
        (FineTuneStrategy::Ssf, transformer(157, 31)),
        (IA3, transformer(157, 31)),
        (FineTuneStrategy::Ia3(Ia3Options { scale_query: true }), transformer(157, 31)),
        (OFT, transformer(157, 31)),
    ];
    for (s, base) in cases {
        let adapted = apply_strategy(base.clone(), s).unwrap();
        for chunk in 0..4 {
            let x = randn(&[25, 1, 64, 157], 100 + chunk);
            let d = max_abs_diff(&base.predict(&x).unwrap(), &adapted.predict(&x).unwrap());
            assert!(d < 1e-5, "{s} on {}: {d}", base.family());
        }
    }
}

#[test]
fn perturbed_adapters_change_logits() {
    let base = transformer(157, 31);
    let x = randn(&[2, 1, 64, 157], 1);
    for s in [FineTuneStrategy::Ssf, IA3, OFT] {
        let mut m = apply_strategy(base.clone(), s).unwrap();
        for (name, p) in m.params_mut() {
            if p.kind == ParamKind::Adapter {
                let noise = randn(p.value.shape(), name.len() as u64);
                for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
                    *v += 0.1 * n;
                }
            }
        }
        assert!(max_abs_diff(&base.predict(&x).unwrap(), &m.predict(&x).unwrap()) > 1e-3, "{s}");
    }
}

#[test]
fn ssf_apply_example_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), true);
    let g = tape.leaf(Tensor::new(&[2], vec![2.0, 2.0]).unwrap(), true);
    let b = tape.leaf(Tensor::new(&[2], vec![1.0, 1.0]).unwrap(), true);
    let y = ssf_apply(&mut tape, x, g, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), [3.0, 5.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [2.0, 2.0]);
    assert_eq!(tape.grad(g).unwrap(), [1.0, 2.0]);
    assert_eq!(tape.grad(b).unwrap(), [1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let g = tape.leaf(Tensor::ones(&[2]), true);
    let b = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(ssf_apply(&mut tape, x, g, b, 1).is_err());
}

#[test]
fn ssf_apply_finite_differences() {
    for seed in 0..10 {
        let x = randn(&[2, 3, 4], seed).cast::<f64>();
        let w = randn(&[2, 3, 4], seed + 50).cast::<f64>();
        let gamma = randn(&[3], seed + 100).cast::<f64>();
        let f = |t: &mut Tape<f64>, v| {
            let b = t.constant(Tensor::full(&[3], 0.5));
            let wv = t.constant(w.clone());
            let xv = t.constant(x.clone());
            let y = ssf_apply(t, xv, v, b, 1)?;
            let y = t.mul(y, wv)?;
            t.sum(y)
        };
        assert!(finite_diff_check(f, &gamma, 1e-6).unwrap() < 1e-7);
    }
}

#[test]
fn adapter_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = transformer(157, 31);
    let mut tuned = apply_strategy(base.clone(), OFT).unwrap();
    for (name, p) in tuned.params_mut() {
        if p.kind == ParamKind::Adapter {
            p.value = randn(p.value.shape(), name.len() as u64);
        }
    }
    let path = dir.path().join("oft.ckpt");
    uavtune::models::save_adapters(&tuned, &path).unwrap();
    let mut restored = base.clone();
    restored.load_adapters(&path).unwrap();
    assert_eq!(restored.adapters(), tuned.adapters());
    let x = randn(&[2, 1, 64, 157], 5);
    assert_eq!(restored.predict(&x).unwrap(), tuned.predict(&x).unwrap());

    let other = transformer(96, 31);
    let mut wrong = other;
    assert!(wrong.load_adapters(&path).is_err());
    assert!(uavtune::models::load_checkpoint(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cayley_is_orthogonal(seed in any::<u64>(), r in 2usize..12, scale in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..skew_params(r)).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let rm = cayley(&p, r).unwrap();
        prop_assert!(orthogonality_error(&rm, r) < 1e-5);
    }

    #[test]
    fn ssf_identity_parameters_are_identity(seed in any::<u64>(), c in 1usize..6, n in 1usize..5) {
        let x = randn(&[n, c, 3], seed).cast::<f64>();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(&[c]));
        let b = tape.constant(Tensor::zeros(&[c]));
        let y = ssf_apply(&mut tape, xv, g, b, 1).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}
