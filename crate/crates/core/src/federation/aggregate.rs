//! Parameter importance and importance-weighted aggregation.

use super::{ClientState, GlobalModel};
use crate::data::feature_batch;
use crate::error::{Error, Result};
use crate::nn::{Module, Tape, Var};

/// Denominators below this fall back to uniform weights.
pub const NORMALIZE_FLOOR: f64 = 1e-12;

/// Per-scalar sensitivity of a client's encoder and head parameters. The head
/// part covers gamma, beta, dense weight and bias (not running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub encoder: Vec<f64>,
    pub head: Vec<f64>,
}

/// `ω^j = mean_x |∂‖out(x)‖ / ∂param_j|` for the encoder output `g(x)` and
/// the head output `h(g(x))`, one backward pass per sample. With `squared`
/// the squared norm is differentiated instead.
pub fn compute_importance(client: &ClientState, squared: bool) -> Result<ImportanceVector> {
    let data = &client.data.examples;
    if data.is_empty() {
        return Err(Error::invalid(format!("client {} has no data for importance", client.id)));
    }
    let mut enc = vec![0.0; client.encoder.num_params()];
    let mut head = vec![0.0; client.head.num_params()];
    let accumulate = |acc: &mut [f64], tape: &Tape, vars: &[Var]| {
        let mut off = 0;
        for &v in vars {
            let n = tape.value(v).len();
            if let Some(g) = tape.grad(v) {
                for (a, x) in acc[off..off + n].iter_mut().zip(g) {
                    *a += x.abs();
                }
            }
            off += n;
        }
    };
    let output_norm = |tape: &mut Tape, out: Var| -> Result<Var> {
        let n = tape.row_norm(out)?;
        let n = if squared { tape.square(n)? } else { n };
        tape.sum(n)
    };
    for i in 0..data.len() {
        let x = feature_batch(data, &[i])?;

        let mut tape = Tape::new();
        let ev = client.encoder.bind(&mut tape);
        let xv = tape.leaf(&x);
        let z = client.encoder.forward(&mut tape, &ev, xv)?;
        let n = output_norm(&mut tape, z)?;
        tape.backward(n)?;
        accumulate(&mut enc, &tape, &ev);

        let mut tape = Tape::new();
        let ev = client.encoder.bind_frozen(&mut tape);
        let hv = client.head.bind(&mut tape);
        let xv = tape.leaf(&x);
        let z = client.encoder.forward(&mut tape, &ev, xv)?;
        let logits = client.head.forward_eval(&mut tape, &hv, z)?;
        let n = output_norm(&mut tape, logits)?;
        tape.backward(n)?;
        accumulate(&mut head, &tape, &hv);
    }
    let scale = 1.0 / data.len() as f64;
    enc.iter_mut().chain(head.iter_mut()).for_each(|v| *v *= scale);
    Ok(ImportanceVector { encoder: enc, head })
}

/// Per-coordinate division by the sum over clients; coordinates whose sum is
/// below [`NORMALIZE_FLOOR`] get `1/m` for every client.
pub fn normalize_importance(raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = raw.len();
    if m == 0 {
        return Err(Error::invalid("no importance vectors to normalize"));
    }
    let n = raw[0].len();
    if raw.iter().any(|w| w.len() != n) {
        return Err(Error::shape("importance vectors have different lengths"));
    }
    if raw.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("importance entries must be finite and non-negative"));
    }
    let mut out = vec![vec![0.0; n]; m];
    for j in 0..n {
        let s: f64 = raw.iter().map(|w| w[j]).sum();
        for d in 0..m {
            out[d][j] = if s < NORMALIZE_FLOOR { 1.0 / m as f64 } else { raw[d][j] / s };
        }
    }
    Ok(out)
}

/// Per-coordinate convex combination of aligned parameter vectors. `None`
/// means uniform weights (plain averaging).
///
/// Computed as `θ_0 + Σ_d w_d (θ_d - θ_0)` and clamped to the coordinate's
/// range, so identical inputs come back bit-for-bit and rounding never
/// leaves the hull.
pub fn aggregate(params: &[Vec<f64>], weights: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
    let m = params.len();
    if m == 0 {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let n = params[0].len();
    if params.iter().any(|p| p.len() != n) {
        return Err(Error::shape("client parameter vectors are misaligned"));
    }
    if let Some(w) = weights {
        if w.len() != m || w.iter().any(|v| v.len() != n) {
            return Err(Error::shape("importance weights do not match parameters"));
        }
    }
    let uniform = 1.0 / m as f64;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let base = params[0][j];
        let (mut lo, mut hi) = (base, base);
        let mut acc = 0.0;
        for d in 0..m {
            let v = params[d][j];
            lo = lo.min(v);
            hi = hi.max(v);
            let w = weights.map_or(uniform, |w| w[d][j]);
            acc += w * (v - base);
        }
        out.push((base + acc).clamp(lo, hi));
    }
    Ok(out)
}

/// Builds the global model from client encoders and head states. Head
/// running statistics are always averaged uniformly.
pub fn aggregate_models(
    template: &GlobalModel,
    encoders: &[Vec<f64>],
    head_states: &[Vec<f64>],
    importance: Option<&[ImportanceVector]>,
) -> Result<GlobalModel> {
    let mut heads = Vec::with_capacity(head_states.len());
    for s in head_states {
        let mut h = template.head.clone();
        h.load_state_vector(s)?;
        heads.push(h);
    }
    let (enc_w, head_w) = match importance {
        Some(imp) => {
            let e: Vec<Vec<f64>> = imp.iter().map(|i| i.encoder.clone()).collect();
            let h: Vec<Vec<f64>> = imp.iter().map(|i| i.head.clone()).collect();
            (Some(normalize_importance(&e)?), Some(normalize_importance(&h)?))
        }
        None => (None, None),
    };
    let mut global = template.clone();
    global.encoder.load_flat_params(&aggregate(encoders, enc_w.as_deref())?)?;
    let head_params: Vec<Vec<f64>> = heads.iter().map(Module::flat_params).collect();
    global.head.load_flat_params(&aggregate(&head_params, head_w.as_deref())?)?;
    let means: Vec<Vec<f64>> = heads.iter().map(|h| h.bn.running_mean.clone()).collect();
    let vars: Vec<Vec<f64>> = heads.iter().map(|h| h.bn.running_var.clone()).collect();
    global.head.bn.running_mean = aggregate(&means, None)?;
    global.head.bn.running_var = aggregate(&vars, None)?;
    Ok(global)
}

/// Overwrites every client's encoder and head (including running
/// statistics) with the global model.
pub fn broadcast(global: &GlobalModel, clients: &mut [ClientState]) -> Result<()> {
    for c in clients {
        if c.encoder.num_params() != global.encoder.num_params() || c.head.state_len() != global.head.state_len() {
            return Err(Error::shape(format!("client {} model does not match the global shape", c.id)));
        }
        c.encoder.load_flat_params(&global.encoder.flat_params())?;
        c.head.load_state_vector(&global.head.state_vector())?;
    }
    Ok(())
}
