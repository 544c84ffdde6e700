//! Analytic gradients against central finite differences.

mod common;

use actembed::grad::Activation;
use actembed::losses::Reduction;
use actembed::model::{Architecture, ModelParams};

fn small_model(act: Activation, hidden: Vec<usize>) -> ModelParams {
    let mut arch = Architecture::new(4, hidden, 2);
    arch.activation = act;
    common::jittered(arch, 3)
}

const H: f64 = 1e-5;

const ACTIVATIONS: [Activation; 4] = [
    Activation::Identity,
    Activation::Relu,
    Activation::LeakyRelu { slope: 0.01 },
    Activation::Tanh,
];

#[test]
fn stage1_gradients_match_finite_differences() {
    for act in ACTIVATIONS {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let e = common::stage1_grad_error(&small_model(act, vec![3]), reduction, H);
            assert!(e < 1e-4, "{act:?} {reduction:?}: {e}");
        }
    }
}

#[test]
fn stage2_gradients_match_finite_differences() {
    for act in ACTIVATIONS {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let e = common::stage2_grad_error(&small_model(act, vec![3]), reduction, H);
            assert!(e < 1e-4, "{act:?} {reduction:?}: {e}");
        }
    }
}

#[test]
fn identity_shortcut_blocks_are_differentiated_too() {
    // 4 -> 4 -> 2 has one identity-shortcut block in each half
    let p = small_model(Activation::Tanh, vec![4]);
    assert!(common::stage1_grad_error(&p, Reduction::Sum, H) < 1e-4);
    assert!(common::stage2_grad_error(&p, Reduction::Sum, H) < 1e-4);
}
