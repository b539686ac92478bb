//! Latent space inversion: turning Gaussian noise into class-informative
//! latent vectors using nothing but a client's classifier head.
//!
//! The objective per minibatch of synthetic latents `ẑ` with target labels is
//!
//! ```text
//! L_synth = CE(head(ẑ), y) + λ_bn * (‖μ(ẑ) - running_mean‖² + ‖σ²(ẑ) - running_var‖²)
//!         + λ_norm * mean_i ‖ẑ_i‖²
//! ```
//!
//! The head runs with its running statistics and is never updated.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::{AdamState, BatchNorm1d, ClassifierHead, Module, Tape, Tensor, Var};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub lambda_bn: f64,
    pub lambda_norm: f64,
    /// Drop the classification term (used for projection ablations only).
    pub use_clsz: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Vectors synthesized per client.
    pub samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lambda_bn: 0.001,
            lambda_norm: 0.0001,
            use_clsz: true,
            lr: 1e-4,
            steps: 2000,
            batch: 32,
            samples: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda_bn) || !finite_nonneg(self.lambda_norm) {
            return Err(Error::Config("inversion coefficients must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("inversion lr must be positive".into()));
        }
        if self.batch < 2 || self.samples < 2 {
            return Err(Error::Config("inversion needs batch >= 2 and samples >= 2".into()));
        }
        Ok(())
    }

    /// Stable fingerprint recorded with each bank.
    pub fn fingerprint(&self) -> u64 {
        let s = serde_json::to_string(self).expect("config serializes");
        s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Synthesized latents of one client.
#[derive(Clone, PartialEq)]
pub struct SynthBank {
    pub client: usize,
    /// `(s, p)` matrix of synthesized latents.
    pub latents: Tensor,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub config_hash: u64,
}

impl fmt::Debug for SynthBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SynthBank")
            .field("client", &self.client)
            .field("shape", &self.latents.shape())
            .field("seed", &self.seed)
            .finish()
    }
}

impl SynthBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latents.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.latents.row(i)
    }

    /// Rows selected by `idx` as a `(len, p)` tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let p = self.latent_dim();
        let mut v = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            v.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), p], v)
    }

    /// Splits into `(first, rest)` at row `at`.
    pub fn split_at(&self, at: usize) -> Result<(SynthBank, SynthBank)> {
        if at == 0 || at >= self.len() {
            return Err(Error::invalid("split point must leave both parts nonempty"));
        }
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        let mk = |idx: &[usize]| -> Result<SynthBank> {
            Ok(SynthBank {
                client: self.client,
                latents: self.gather(idx)?,
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
                seed: self.seed,
                config_hash: self.config_hash,
            })
        };
        Ok((mk(&head)?, mk(&tail)?))
    }
}

/// Server-side holder of the banks; purging makes them unreadable.
#[derive(Debug, Default)]
pub struct BankStore {
    banks: Option<Vec<SynthBank>>,
    created_stage: Option<u8>,
    purged_stage: Option<u8>,
}

impl BankStore {
    pub fn new(banks: Vec<SynthBank>, stage: u8) -> Self {
        Self {
            banks: Some(banks),
            created_stage: Some(stage),
            purged_stage: None,
        }
    }

    pub fn banks(&self) -> Result<&[SynthBank]> {
        self.banks.as_deref().ok_or(Error::Purged)
    }

    pub fn get(&self, client: usize) -> Result<&SynthBank> {
        self.banks()?
            .iter()
            .find(|b| b.client == client)
            .ok_or_else(|| Error::invalid(format!("no bank for client {client}")))
    }

    /// Destroys every bank.
    pub fn purge(&mut self, stage: u8) {
        self.banks = None;
        self.purged_stage = Some(stage);
    }

    pub fn is_purged(&self) -> bool {
        self.banks.is_none()
    }

    /// `(created, purged)` stage numbers.
    pub fn lifetime(&self) -> (Option<u8>, Option<u8>) {
        (self.created_stage, self.purged_stage)
    }

    /// Number of latent scalars currently stored.
    pub fn stored_scalars(&self) -> usize {
        self.banks.as_ref().map(|b| b.iter().map(|x| x.latents.numel()).sum()).unwrap_or(0)
    }
}

/// Consumes a bank.
pub fn purge_bank(bank: SynthBank) {
    drop(bank);
}

/// Labels drawn with replacement from the client's empirical label distribution.
pub fn sample_label_targets(dataset: &DomainDataset, count: usize, seed: u64) -> Result<Vec<usize>> {
    if dataset.examples.is_empty() {
        return Err(Error::invalid("cannot sample labels from an empty dataset"));
    }
    let mut rng = stream(seed, "label-targets", dataset.domain as u64);
    let n = dataset.examples.len();
    Ok((0..count).map(|_| dataset.examples[rng.random_range(0..n)].label).collect())
}

/// Cross entropy of the frozen head (running statistics) on `z`.
pub fn clsz_term(tape: &mut Tape, z: Var, labels: &[usize], head: &ClassifierHead, head_vars: &[Var]) -> Result<Var> {
    let logits = head.forward_eval(tape, head_vars, z)?;
    tape.cross_entropy(logits, labels)
}

/// Squared distance of batch mean and unbiased batch variance to the
/// running statistics.
pub fn bn_term(tape: &mut Tape, z: Var, bn: &BatchNorm1d) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != bn.features() {
        return Err(Error::shape(format!("bn loss over {} features got {shape:?}", bn.features())));
    }
    if shape[0] < 2 {
        return Err(Error::invalid("batch-statistic loss needs at least 2 vectors"));
    }
    let mu = tape.col_mean(z)?;
    let var = tape.col_var(z, true)?;
    let rm = tape.constant(vec![bn.features()], bn.running_mean.clone())?;
    let rv = tape.constant(vec![bn.features()], bn.running_var.clone())?;
    let dm = tape.sub(mu, rm)?;
    let dv = tape.sub(var, rv)?;
    let dm2 = tape.square(dm)?;
    let dv2 = tape.square(dv)?;
    let a = tape.sum(dm2)?;
    let b = tape.sum(dv2)?;
    tape.add(a, b)
}

/// Mean squared Euclidean norm over the batch.
pub fn norm_term(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.square(z)?;
    let per_row = tape.row_sum(sq)?;
    tape.mean(per_row)
}

pub fn loss_clsz(z: &Tensor, labels: &[usize], head: &ClassifierHead) -> Result<f64> {
    check_width(z, head.latent_dim())?;
    let mut tape = Tape::new();
    let hv = head.bind_frozen(&mut tape);
    let zv = tape.leaf(z);
    let l = clsz_term(&mut tape, zv, labels, head, &hv)?;
    Ok(tape.scalar(l))
}

pub fn loss_bn(z: &Tensor, bn: &BatchNorm1d) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    let l = bn_term(&mut tape, zv, bn)?;
    Ok(tape.scalar(l))
}

pub fn loss_norm(z: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    let l = norm_term(&mut tape, zv)?;
    Ok(tape.scalar(l))
}

fn check_width(z: &Tensor, p: usize) -> Result<()> {
    if z.shape().len() != 2 || z.cols() != p {
        return Err(Error::shape(format!("expected (b, {p}) latents, got {:?}", z.shape())));
    }
    Ok(())
}

fn synth_objective(tape: &mut Tape, z: Var, labels: &[usize], head: &ClassifierHead, hv: &[Var], cfg: &SynthConfig) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    if cfg.use_clsz {
        terms.push(clsz_term(tape, z, labels, head, hv)?);
    }
    if cfg.lambda_bn > 0.0 {
        let t = bn_term(tape, z, &head.bn)?;
        terms.push(tape.scale(t, cfg.lambda_bn)?);
    }
    if cfg.lambda_norm > 0.0 {
        let t = norm_term(tape, z)?;
        terms.push(tape.scale(t, cfg.lambda_norm)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => {
            let zero = tape.scale(z, 0.0)?;
            return tape.sum(zero);
        }
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Row ranges of at most `batch` rows; a trailing single row joins the
/// previous chunk so every chunk has a defined variance.
fn chunk_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// Optimizes `cfg.samples` noise vectors against a frozen head.
pub fn synthesize(head: &ClassifierHead, dataset: &DomainDataset, cfg: &SynthConfig, seed: u64) -> Result<SynthBank> {
    synthesize_traced(head, dataset, cfg, seed, 0).map(|(b, _)| b)
}

/// Like [`synthesize`], also returning the frozen-head classification loss of
/// the whole bank at step 0 and every `every` steps (`every = 0` disables).
pub fn synthesize_traced(
    head: &ClassifierHead,
    dataset: &DomainDataset,
    cfg: &SynthConfig,
    seed: u64,
    every: usize,
) -> Result<(SynthBank, Vec<f64>)> {
    cfg.validate()?;
    let p = head.latent_dim();
    let labels = sample_label_targets(dataset, cfg.samples, seed)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.classes()) {
        return Err(Error::invalid(format!("label {bad} outside head classes")));
    }
    let mut rng = stream(seed, "inversion-init", dataset.domain as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let ranges = chunk_ranges(cfg.samples, cfg.batch);
    let mut chunks: Vec<Tensor> = ranges
        .iter()
        .map(|r| {
            let v = (0..r.len() * p).map(|_| normal.sample(&mut rng)).collect();
            Tensor::param(vec![r.len(), p], v)
        })
        .collect::<Result<_>>()?;
    let mut opts: Vec<AdamState> = ranges.iter().map(|_| AdamState::new(cfg.lr)).collect::<Result<_>>()?;

    let assemble = |chunks: &[Tensor]| -> Result<Tensor> {
        let v: Vec<f64> = chunks.iter().flat_map(|c| c.values().iter().copied()).collect();
        Tensor::new(vec![cfg.samples, p], v)
    };
    let mut trace = Vec::new();
    if every > 0 {
        trace.push(loss_clsz(&assemble(&chunks)?, &labels, head)?);
    }

    for step in 0..cfg.steps {
        for ((chunk, opt), r) in chunks.iter_mut().zip(&mut opts).zip(&ranges) {
            let mut tape = Tape::new();
            let hv = head.bind_frozen(&mut tape);
            let z = tape.leaf(chunk);
            let loss = synth_objective(&mut tape, z, &labels[r.clone()], head, &hv, cfg)
                .map_err(|e| Error::NonFinite(format!("inversion diverged at step {step}: {e}")))?;
            tape.backward(loss)?;
            chunk.zero_grad();
            tape.accumulate_into(z, chunk)?;
            opt.step(&mut [chunk])?;
            if chunk.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("inversion diverged at step {step}")));
            }
        }
        if every > 0 && (step + 1) % every == 0 {
            trace.push(loss_clsz(&assemble(&chunks)?, &labels, head)?);
        }
    }

    Ok((
        SynthBank {
            client: dataset.domain,
            latents: assemble(&chunks)?,
            labels,
            seed,
            config_hash: cfg.fingerprint(),
        },
        trace,
    ))
}

/// Fraction of bank vectors the frozen head assigns to their target label.
pub fn bank_accuracy(bank: &SynthBank, head: &ClassifierHead) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = head.bind_frozen(&mut tape);
    let z = tape.leaf(&bank.latents);
    let logits = head.forward_eval(&mut tape, &hv, z)?;
    let pred = crate::nn::argmax_rows(&tape.to_tensor(logits));
    let hits = pred.iter().zip(&bank.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / bank.len() as f64)
}

/// Per-class counts of a bank, for diagnostics.
pub fn label_histogram(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &y in labels {
        *h.entry(y).or_insert(0) += 1;
    }
    h
}

/// Writes `client,label,z0..z{p-1}` rows for every bank.
pub fn dump_banks_csv(banks: &[SynthBank], path: impl AsRef<std::path::Path>) -> Result<()> {
    let p = banks.first().map(|b| b.latent_dim()).unwrap_or(0);
    let mut s = String::from("client,label");
    for j in 0..p {
        s.push_str(&format!(",z{j}"));
    }
    s.push('\n');
    for b in banks {
        for i in 0..b.len() {
            s.push_str(&format!("{},{}", b.client, b.labels[i]));
            for v in b.row(i) {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledExample;
    use crate::nn::{grad_check, LinearLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(labels: &[usize]) -> DomainDataset {
        DomainDataset {
            domain: 0,
            examples: labels
                .iter()
                .map(|&label| LabeledExample {
                    features: vec![0.0],
                    label,
                    domain: 0,
                })
                .collect(),
            val: vec![],
        }
    }

    fn head(p: usize, c: usize, seed: u64) -> ClassifierHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierHead::new(p, c, &mut rng)
    }

    #[test]
    fn single_class_targets() {
        let t = sample_label_targets(&dataset(&[2, 2, 2]), 50, 1).unwrap();
        assert!(t.iter().all(|&y| y == 2));
    }

    #[test]
    fn balanced_targets_within_three_sigma() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let t = sample_label_targets(&dataset(&labels), 3000, 7).unwrap();
        let sd = (3000.0_f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (_, n) in label_histogram(&t) {
            assert!((n as f64 - 1000.0).abs() < 3.0 * sd, "{n}");
        }
        assert_eq!(t, sample_label_targets(&dataset(&labels), 3000, 7).unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(sample_label_targets(&dataset(&[]), 5, 0).is_err());
    }

    #[test]
    fn clsz_uniform_logits_is_ln_c() {
        let mut h = head(4, 7, 0);
        h.fc = LinearLayer::zeroed(4, 7);
        let z = Tensor::from_rows(&[vec![0.3, -0.1, 2.0, 1.0]]).unwrap();
        assert!((loss_clsz(&z, &[3], &h).unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clsz_confident_is_zero() {
        let mut h = head(1, 2, 0);
        h.fc = LinearLayer::from_values(vec![vec![1000.0], vec![-1000.0]], vec![0.0, 0.0]).unwrap();
        let z = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(loss_clsz(&z, &[0], &h).unwrap() < 1e-300);
    }

    #[test]
    fn clsz_gradient_matches_finite_differences() {
        let h = head(3, 4, 2);
        let labels = [1, 3];
        let err = grad_check(
            |t, z| {
                let hv = h.bind_frozen(t);
                clsz_term(t, z, &labels, &h, &hv)
            },
            &[2, 3],
            &[0.3, -1.2, 0.5, 1.1, 0.2, -0.7],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bn_loss_values() {
        let mut bn = BatchNorm1d::new(1);
        // mean 2, unbiased variance 2
        let z = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        bn.running_mean = vec![2.0];
        bn.running_var = vec![2.0];
        assert_eq!(loss_bn(&z, &bn).unwrap(), 0.0);
        bn.running_mean = vec![0.0];
        assert!((loss_bn(&z, &bn).unwrap() - 4.0).abs() < 1e-15);
        let swapped = Tensor::from_rows(&[vec![3.0], vec![1.0]]).unwrap();
        assert_eq!(loss_bn(&swapped, &bn).unwrap(), loss_bn(&z, &bn).unwrap());
        assert!(loss_bn(&Tensor::from_rows(&[vec![1.0]]).unwrap(), &bn).is_err());
    }

    #[test]
    fn norm_loss_values() {
        assert_eq!(loss_norm(&Tensor::zeros(vec![2, 2])).unwrap(), 0.0);
        assert_eq!(loss_norm(&Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap()).unwrap(), 25.0);
        let z = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
        let scaled = Tensor::new(vec![2, 2], z.values().iter().map(|v| v * 3.0).collect()).unwrap();
        assert!((loss_norm(&scaled).unwrap() - 9.0 * loss_norm(&z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let h = head(4, 3, 1);
        let ds = dataset(&[0, 1, 2]);
        let cfg = SynthConfig {
            steps: 0,
            samples: 10,
            batch: 4,
            ..SynthConfig::default()
        };
        let a = synthesize(&h, &ds, &cfg, 3).unwrap();
        let b = synthesize(&h, &ds, &SynthConfig { steps: 1, ..cfg.clone() }, 3).unwrap();
        assert_eq!(a.latents.shape(), &[10, 4]);
        assert_ne!(a.latents, b.latents);
        // N(0,1) draws
        let m: f64 = a.latents.values().iter().sum::<f64>() / 40.0;
        assert!(m.abs() < 0.6);
    }

    #[test]
    fn chunking_never_leaves_single_rows() {
        assert_eq!(chunk_ranges(200, 32).last().unwrap().len(), 8);
        assert_eq!(chunk_ranges(33, 32), vec![0..33]);
        assert_eq!(chunk_ranges(10, 32), vec![0..10]);
    }

    #[test]
    fn store_lifecycle() {
        let h = head(2, 2, 0);
        let cfg = SynthConfig {
            steps: 1,
            samples: 4,
            batch: 4,
            ..SynthConfig::default()
        };
        let bank = synthesize(&h, &dataset(&[0, 1]), &cfg, 0).unwrap();
        let mut store = BankStore::new(vec![bank], 2);
        assert!(store.get(0).is_ok());
        assert_eq!(store.stored_scalars(), 8);
        store.purge(3);
        assert!(matches!(store.get(0), Err(Error::Purged)));
        assert_eq!(store.stored_scalars(), 0);
        assert_eq!(store.lifetime(), (Some(2), Some(3)));
    }
}
