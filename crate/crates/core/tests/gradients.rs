//! Finite-difference checks in f64 for every differentiable op and for the
//! parameters of both model families.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uavtune::tensor::{Tape, Tensor};

mod common;

use common::grad_suite::{self, randn};

#[test]
fn elementwise_ops() {
    grad_suite::elementwise_ops().unwrap();
}

#[test]
fn linear_algebra_ops() {
    grad_suite::linear_algebra_ops().unwrap();
}

#[test]
fn shape_ops() {
    grad_suite::shape_ops().unwrap();
}

#[test]
fn reductions_and_losses() {
    grad_suite::reductions_and_losses().unwrap();
}

#[test]
fn dropout_with_fixed_mask() {
    grad_suite::dropout_with_fixed_mask().unwrap();
}

#[test]
fn convolution_and_pooling() {
    grad_suite::convolution_and_pooling().unwrap();
}

#[test]
fn normalization() {
    grad_suite::normalization().unwrap();
}

#[test]
fn attention() {
    grad_suite::attention().unwrap();
}

#[test]
fn adapter_ops() {
    grad_suite::adapter_ops().unwrap();
}

#[test]
fn cnn_parameters() {
    grad_suite::cnn_parameters().unwrap();
}

#[test]
fn transformer_parameters() {
    grad_suite::transformer_parameters().unwrap();
}

#[test]
fn default_size_models_sampled() {
    grad_suite::default_size_models_sampled().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_shape_law(m in 1usize..6, k in 1usize..6, n in 1usize..6, b in 1usize..3) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[b, m, k]));
        let c = tape.constant(Tensor::zeros(&[b, k, n]));
        let y = tape.matmul(a, c).unwrap();
        prop_assert_eq!(tape.shape(y).to_vec(), vec![b, m, n]);
        let bad = tape.constant(Tensor::zeros(&[b, k + 1, n]));
        prop_assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn conv_pool_shape_law(h in 2usize..12, w in 2usize..12, c in 1usize..4, f in 1usize..4, pad in 0usize..2) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, c, h + 2, w + 2]));
        let k = tape.constant(Tensor::zeros(&[f, c, 3, 3]));
        let y = tape.conv2d(x, k, None, pad).unwrap();
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        prop_assert_eq!(tape.shape(y).to_vec(), vec![1, f, oh, ow]);
        let p = tape.max_pool2d(y, 2).unwrap();
        prop_assert_eq!(tape.shape(p).to_vec(), vec![1, f, oh / 2, ow / 2]);
    }

    #[test]
    fn gradient_shapes_match_values(seed in any::<u64>(), r in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(randn(&[r, c], &mut rng), true);
        let b = tape.leaf(randn(&[c, r], &mut rng), true);
        let y = tape.matmul(a, b).unwrap();
        let y = tape.gelu(y).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(a).unwrap().len(), r * c);
        prop_assert_eq!(tape.grad(b).unwrap().len(), r * c);
    }
}
