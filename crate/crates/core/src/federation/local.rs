//! Client-side work: local training with and without the invariance
//! penalty, and evaluation.

use rand::Rng;

use super::{ClientState, RoundConfig};
use crate::data::{feature_batch, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ClassifierHead, MlpEncoder, Mode, Module, SgdState, Tape, Tensor, Var};
use crate::rng::SimRng;
use crate::translator::GeneratorNet;

/// Mean over rows of `‖z - G(z, d, d')‖²` with `G` frozen in eval mode.
/// Gradients reach `z` through both occurrences.
pub fn di_term(tape: &mut Tape, z: Var, g: &GeneratorNet, g_vars: &[Var], src: &[usize], tgt: &[usize]) -> Result<Var> {
    let zt = g.forward(tape, g_vars, z, src, tgt, None)?;
    let d = tape.sub(z, zt)?;
    let sq = tape.square(d)?;
    let per_row = tape.row_sum(sq)?;
    tape.mean(per_row)
}

/// Draws one target client per row, uniformly over `0..clients`.
pub fn sample_targets(rows: usize, clients: usize, rng: &mut SimRng) -> Vec<usize> {
    (0..rows).map(|_| rng.random_range(0..clients)).collect()
}

/// Value of the invariance penalty for a batch from client `d`.
pub fn loss_di(encoder: &MlpEncoder, g: &GeneratorNet, x: &Tensor, d: usize, rng: &mut SimRng) -> Result<f64> {
    if d >= g.clients() {
        return Err(Error::invalid(format!("client {d} outside translator range 0..{}", g.clients())));
    }
    let mut tape = Tape::new();
    let ev = encoder.bind_frozen(&mut tape);
    let gv = g.bind_frozen(&mut tape);
    let xv = tape.leaf(x);
    let z = encoder.forward(&mut tape, &ev, xv)?;
    let tgt = sample_targets(x.rows(), g.clients(), rng);
    let l = di_term(&mut tape, z, g, &gv, &vec![d; x.rows()], &tgt)?;
    Ok(tape.scalar(l))
}

/// Cross entropy training for `epochs` passes.
pub fn local_train_stage1(client: &mut ClientState, epochs: usize, cfg: &RoundConfig) -> Result<Vec<f64>> {
    train_epochs(client, epochs, cfg, None)
}

/// `L_cls + λ_di L_di` for `cfg.epochs` passes. Without a translator, with
/// `use_di` off or with `λ_di = 0` this is exactly stage 1.
pub fn local_train_stage4(client: &mut ClientState, g: Option<&GeneratorNet>, cfg: &RoundConfig) -> Result<Vec<f64>> {
    let g = g.filter(|_| cfg.use_di && cfg.lambda_di > 0.0);
    train_epochs(client, cfg.epochs, cfg, g)
}

fn train_epochs(client: &mut ClientState, epochs: usize, cfg: &RoundConfig, g: Option<&GeneratorNet>) -> Result<Vec<f64>> {
    if client.data.examples.is_empty() {
        return Err(Error::invalid(format!("client {} has no training data", client.id)));
    }
    let mut opt = SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in client.batcher.epoch() {
            // train-mode batch norm needs two rows
            if idx.len() < 2 {
                continue;
            }
            let x = feature_batch(&client.data.examples, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| client.data.examples[i].label).collect();
            let mut tape = Tape::new();
            let ev = client.encoder.bind(&mut tape);
            let hv = client.head.bind(&mut tape);
            let xv = tape.leaf(&x);
            let z = client.encoder.forward(&mut tape, &ev, xv)?;
            let logits = client.head.forward(&mut tape, &hv, z, Mode::Train)?;
            let ce = tape.cross_entropy(logits, &y)?;
            let loss = match g {
                Some(g) => {
                    let gv = g.bind_frozen(&mut tape);
                    let tgt = sample_targets(idx.len(), g.clients(), &mut client.di_rng);
                    let di = di_term(&mut tape, z, g, &gv, &vec![client.id; idx.len()], &tgt)?;
                    let w = tape.scale(di, cfg.lambda_di)?;
                    tape.add(ce, w)?
                }
                None => ce,
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("client {} loss at epoch {epoch}", client.id)));
            }
            tape.backward(loss)?;
            client.encoder.zero_grad();
            client.head.zero_grad();
            client.encoder.absorb_grads(&tape, &ev)?;
            client.head.absorb_grads(&tape, &hv)?;
            let mut params = client.encoder.params_mut();
            params.extend(client.head.params_mut());
            opt.step(&mut params)?;
            total += value * idx.len() as f64;
            seen += idx.len();
        }
        let mean = if seen > 0 { total / seen as f64 } else { f64::NAN };
        log::trace!("client {} epoch {epoch} loss {mean:.5}", client.id);
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Eval-mode accuracy and mean cross entropy.
pub fn evaluate(encoder: &MlpEncoder, head: &ClassifierHead, examples: &[LabeledExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let x = feature_batch(examples, &idx)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let mut tape = Tape::new();
    let ev = encoder.bind_frozen(&mut tape);
    let hv = head.bind_frozen(&mut tape);
    let xv = tape.leaf(&x);
    let z = encoder.forward(&mut tape, &ev, xv)?;
    let logits = head.forward_eval(&mut tape, &hv, z)?;
    let loss = tape.cross_entropy(logits, &labels)?;
    let pred = argmax_rows(&tape.to_tensor(logits));
    let hits = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok((hits as f64 / labels.len() as f64, tape.scalar(loss)))
}

/// Encoder outputs for a set of examples.
pub fn encode_examples(encoder: &MlpEncoder, examples: &[LabeledExample]) -> Result<Tensor> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    crate::nn::forward_encoder(encoder, &feature_batch(examples, &idx)?)
}
