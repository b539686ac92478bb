use rand::SeedableRng;

use super::layers::{LinearLayer, Module};
use super::optim::AdamState;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Softmax regression fitted full-batch with Adam. Used as a measuring stick
/// for separability, never as part of the pipeline.
pub fn fit_linear_probe(x: &Tensor, labels: &[usize], classes: usize, epochs: usize, seed: u64) -> Result<LinearLayer> {
    if x.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("probe needs one label per row"));
    }
    if classes < 2 || labels.iter().any(|&y| y >= classes) {
        return Err(Error::invalid("probe labels out of range"));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut layer = LinearLayer::new(x.cols(), classes, &mut rng);
    let mut opt = AdamState::new(0.05)?;
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let xv = tape.leaf(x);
        let logits = layer.forward(&mut tape, &vars, xv)?;
        let loss = tape.cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        layer.zero_grad();
        layer.absorb_grads(&tape, &vars)?;
        opt.step(&mut layer.params_mut())?;
    }
    Ok(layer)
}

pub fn probe_predict(layer: &LinearLayer, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let vars = layer.bind_frozen(&mut tape);
    let xv = tape.leaf(x);
    let logits = layer.forward(&mut tape, &vars, xv)?;
    Ok(super::argmax_rows(&tape.to_tensor(logits)))
}

/// Fraction of rows the probe assigns to `labels`.
pub fn probe_accuracy(layer: &LinearLayer, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = probe_predict(layer, x)?;
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
