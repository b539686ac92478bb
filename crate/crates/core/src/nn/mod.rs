//! Dense-tensor reverse-mode autodiff plus the layers and optimizers the
//! pipeline stages are built from.
//!
//! Parameters live in [`Tensor`]s owned by modules. A forward pass binds them
//! to a [`Tape`] (tracked or frozen), and after [`Tape::backward`] the module
//! pulls its gradients back with [`Module::absorb_grads`]. Gradients add up
//! across passes until [`Module::zero_grad`].

mod gradcheck;
mod layers;
mod optim;
mod probe;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use layers::{BatchNorm1d, ClassifierHead, LayerNorm, LinearLayer, MlpEncoder, Mode, Module};
pub use optim::{AdamState, SgdState};
pub use probe::{fit_linear_probe, probe_accuracy, probe_predict};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Encodes a `(b, k)` batch without recording gradients.
pub fn forward_encoder(encoder: &MlpEncoder, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = encoder.bind_frozen(&mut tape);
    let xv = tape.leaf(x);
    let z = encoder.forward(&mut tape, &vars, xv)?;
    Ok(tape.to_tensor(z))
}

/// Head logits for a `(b, p)` batch. Train mode updates running statistics.
pub fn forward_classifier(head: &mut ClassifierHead, z: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = head.bind_frozen(&mut tape);
    let zv = tape.leaf(z);
    let y = head.forward(&mut tape, &vars, zv, mode)?;
    Ok(tape.to_tensor(y))
}

/// Mean cross entropy of `(b, c)` logits against class ids.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let ce = tape.cross_entropy(l, labels)?;
    Ok(tape.scalar(ce))
}

/// Predicted class per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}
