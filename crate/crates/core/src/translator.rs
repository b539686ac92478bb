//! Latent translator: a generator `G(ẑ, d, d')` that moves a latent from
//! client `d`'s distribution to client `d'`'s while keeping its class, trained
//! against a discriminator with a real/fake head and a client-index head.
//!
//! Class preservation comes only from minibatch composition: every training
//! batch holds a single class, and `G` never sees a label.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::SynthBank;
use crate::nn::{AdamState, LayerNorm, LinearLayer, Module, Tape, Tensor, Var};
use crate::rng::{stream, SimRng};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub lambda_clsg: f64,
    pub lambda_rec: f64,
    pub lambda_clsd: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Adam first-moment decay for both networks.
    pub beta1: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub slope: f64,
    /// Alternating discriminator/generator updates.
    pub steps: usize,
    pub batch: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda_clsg: 1.0,
            lambda_rec: 10.0,
            lambda_clsd: 1.0,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            hidden: 64,
            dropout: 0.5,
            slope: 0.2,
            steps: 2000,
            batch: 32,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_clsg", self.lambda_clsg),
            ("lambda_rec", self.lambda_rec),
            ("lambda_clsd", self.lambda_clsd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("translator learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config("dropout and beta1 must lie in [0,1)".into()));
        }
        if self.hidden == 0 || self.batch < 2 {
            return Err(Error::Config("translator needs hidden > 0 and batch >= 2".into()));
        }
        Ok(())
    }
}

/// Dense, leaky ReLU, layer norm, dropout.
#[derive(Clone, Debug, PartialEq)]
struct HiddenBlock {
    dense: LinearLayer,
    norm: LayerNorm,
}

impl HiddenBlock {
    fn new(input: usize, width: usize, rng: &mut SimRng) -> Self {
        Self {
            dense: LinearLayer::new(input, width, rng),
            norm: LayerNorm::new(width),
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, act: &Activation, rng: Option<&mut SimRng>) -> Result<Var> {
        let h = self.dense.forward(tape, &vars[..2], x)?;
        let h = tape.leaky_relu(h, act.slope)?;
        let h = self.norm.forward(tape, &vars[2..4], h)?;
        dropout(tape, h, act.dropout, rng)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.dense.params();
        v.extend(self.norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.dense.params_mut();
        v.extend(self.norm.params_mut());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Activation {
    slope: f64,
    dropout: f64,
}

/// Inverted dropout; `rng = None` means eval mode.
fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut SimRng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let n = tape.value(x).len();
            let mask = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

fn one_hot_pair(src: &[usize], tgt: &[usize], m: usize) -> Result<Vec<f64>> {
    if src.len() != tgt.len() {
        return Err(Error::shape("source and target id lists differ in length"));
    }
    let mut v = vec![0.0; src.len() * 2 * m];
    for (i, (&d, &t)) in src.iter().zip(tgt).enumerate() {
        if d >= m || t >= m {
            return Err(Error::invalid(format!("client id pair ({d},{t}) outside 0..{m}")));
        }
        v[i * 2 * m + d] = 1.0;
        v[i * 2 * m + m + t] = 1.0;
    }
    Ok(v)
}

/// `G`: three dense layers over `[ẑ, onehot(d), onehot(d')]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    blocks: [HiddenBlock; 2],
    out: LinearLayer,
    clients: usize,
    act: Activation,
}

impl GeneratorNet {
    pub fn new(latent: usize, clients: usize, cfg: &GanConfig, rng: &mut SimRng) -> Result<Self> {
        if clients == 0 || latent == 0 {
            return Err(Error::invalid("generator needs latent > 0 and clients > 0"));
        }
        Ok(Self {
            blocks: [
                HiddenBlock::new(latent + 2 * clients, cfg.hidden, rng),
                HiddenBlock::new(cfg.hidden, cfg.hidden, rng),
            ],
            out: LinearLayer::new(cfg.hidden, latent, rng),
            clients,
            act: Activation {
                slope: cfg.slope,
                dropout: cfg.dropout,
            },
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.out.output_dim()
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    /// Output layer, exposed for tests that pin its weights.
    pub fn output_layer_mut(&mut self) -> &mut LinearLayer {
        &mut self.out
    }

    /// Translates each row `i` from client `src[i]` to `tgt[i]`. Passing an
    /// RNG enables dropout (training mode).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var, src: &[usize], tgt: &[usize], mut rng: Option<&mut SimRng>) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim() || shape[0] != src.len() {
            return Err(Error::shape(format!("generator input {shape:?} with {} ids", src.len())));
        }
        let codes = one_hot_pair(src, tgt, self.clients)?;
        let c = tape.constant(vec![src.len(), 2 * self.clients], codes)?;
        let mut h = tape.concat_cols(z, c)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(tape, &vars[4 * i..4 * i + 4], h, &self.act, rng.as_deref_mut())?;
        }
        self.out.forward(tape, &vars[8..10], h)
    }
}

impl Module for GeneratorNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.blocks.iter().flat_map(HiddenBlock::params).collect();
        v.extend(self.out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(HiddenBlock::params_mut).collect();
        v.extend(self.out.params_mut());
        v
    }
}

/// Shared trunk with a real/fake score head and a client-index head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    blocks: [HiddenBlock; 2],
    src: LinearLayer,
    cls: LinearLayer,
    act: Activation,
}

impl DiscriminatorNet {
    pub fn new(latent: usize, clients: usize, cfg: &GanConfig, rng: &mut SimRng) -> Result<Self> {
        if clients < 2 || latent == 0 {
            return Err(Error::invalid("discriminator needs latent > 0 and at least 2 clients"));
        }
        Ok(Self {
            blocks: [HiddenBlock::new(latent, cfg.hidden, rng), HiddenBlock::new(cfg.hidden, cfg.hidden, rng)],
            src: LinearLayer::new(cfg.hidden, 1, rng),
            cls: LinearLayer::new(cfg.hidden, clients, rng),
            act: Activation {
                slope: cfg.slope,
                dropout: cfg.dropout,
            },
        })
    }

    pub fn clients(&self) -> usize {
        self.cls.output_dim()
    }

    /// `(src scores (b,1), client logits (b,m))` from one trunk pass.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var, mut rng: Option<&mut SimRng>) -> Result<(Var, Var)> {
        let mut h = z;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(tape, &vars[4 * i..4 * i + 4], h, &self.act, rng.as_deref_mut())?;
        }
        let s = self.src.forward(tape, &vars[8..10], h)?;
        let c = self.cls.forward(tape, &vars[10..12], h)?;
        Ok((s, c))
    }
}

impl Module for DiscriminatorNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.blocks.iter().flat_map(HiddenBlock::params).collect();
        v.extend(self.src.params());
        v.extend(self.cls.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(HiddenBlock::params_mut).collect();
        v.extend(self.src.params_mut());
        v.extend(self.cls.params_mut());
        v
    }
}

/// `E log σ(real) + E log(1 - σ(fake))`, both logs floored at 1e-12.
pub fn adv_term(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let pr = tape.sigmoid(real_scores)?;
    let pr = tape.clamp_min(pr, LOG_FLOOR)?;
    let lr = tape.ln(pr)?;
    let neg = tape.scale(fake_scores, -1.0)?;
    let pf = tape.sigmoid(neg)?;
    let pf = tape.clamp_min(pf, LOG_FLOOR)?;
    let lf = tape.ln(pf)?;
    let a = tape.mean(lr)?;
    let b = tape.mean(lf)?;
    tape.add(a, b)
}

/// Mean absolute difference.
pub fn l1_term(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Eval-mode translation without gradient tracking.
pub fn translate(g: &GeneratorNet, z: &Tensor, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gv = g.bind_frozen(&mut tape);
    let zv = tape.leaf(z);
    let out = g.forward(&mut tape, &gv, zv, src, tgt, None)?;
    Ok(tape.to_tensor(out))
}

/// Adversarial objective of an eval-mode discriminator on given batches.
pub fn loss_adv(d: &DiscriminatorNet, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let dv = d.bind_frozen(&mut tape);
    let r = tape.leaf(real);
    let f = tape.leaf(fake);
    let (rs, _) = d.forward(&mut tape, &dv, r, None)?;
    let (fs, _) = d.forward(&mut tape, &dv, f, None)?;
    let l = adv_term(&mut tape, rs, fs)?;
    Ok(tape.scalar(l))
}

/// Client-index cross entropy on real (bank) latents.
pub fn loss_clsd(d: &DiscriminatorNet, z: &Tensor, domains: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let dv = d.bind_frozen(&mut tape);
    let zv = tape.leaf(z);
    let (_, c) = d.forward(&mut tape, &dv, zv, None)?;
    let l = tape.cross_entropy(c, domains)?;
    Ok(tape.scalar(l))
}

/// Client-index cross entropy of translated latents against their targets.
pub fn loss_clsg(d: &DiscriminatorNet, g: &GeneratorNet, z: &Tensor, src: &[usize], tgt: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = g.bind_frozen(&mut tape);
    let dv = d.bind_frozen(&mut tape);
    let zv = tape.leaf(z);
    let t = g.forward(&mut tape, &gv, zv, src, tgt, None)?;
    let (_, c) = d.forward(&mut tape, &dv, t, None)?;
    let l = tape.cross_entropy(c, tgt)?;
    Ok(tape.scalar(l))
}

/// Cycle reconstruction `mean |ẑ - G(G(ẑ,d,d'),d',d)|` in eval mode.
pub fn loss_rec(g: &GeneratorNet, z: &Tensor, src: &[usize], tgt: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = g.bind_frozen(&mut tape);
    let zv = tape.leaf(z);
    let t = g.forward(&mut tape, &gv, zv, src, tgt, None)?;
    let back = g.forward(&mut tape, &gv, t, tgt, src, None)?;
    let l = l1_term(&mut tape, zv, back)?;
    Ok(tape.scalar(l))
}

/// One single-class minibatch drawn from the pooled banks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBatch {
    pub class: usize,
    pub z: Tensor,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Per-step losses, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub adv: f64,
    pub cls: f64,
    pub rec: f64,
}

/// Holds both networks and their optimizers. Each step type only ever
/// touches its own network.
pub struct TranslatorTrainer {
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    cfg: GanConfig,
    opt_g: AdamState,
    opt_d: AdamState,
    rng: SimRng,
    /// `pools[y][d]` = row indices of class `y` in client `d`'s bank.
    pools: Vec<Vec<Vec<usize>>>,
    banks: Vec<SynthBank>,
    classes: Vec<usize>,
    next_class: usize,
}

impl TranslatorTrainer {
    /// Banks must be ordered by client index `0..m`.
    pub fn new(banks: &[SynthBank], cfg: &GanConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if banks.len() < 2 {
            return Err(Error::invalid("translator needs at least 2 client banks"));
        }
        if banks.iter().any(SynthBank::is_empty) {
            return Err(Error::invalid("every client bank must be nonempty"));
        }
        let p = banks[0].latent_dim();
        if banks.iter().any(|b| b.latent_dim() != p) {
            return Err(Error::shape("bank latent widths differ"));
        }
        let m = banks.len();
        let n_classes = banks.iter().flat_map(|b| b.labels.iter()).max().map(|y| y + 1).unwrap_or(0);
        let mut pools = vec![vec![Vec::new(); m]; n_classes];
        for (d, b) in banks.iter().enumerate() {
            for (i, &y) in b.labels.iter().enumerate() {
                pools[y][d].push(i);
            }
        }
        let mut classes = Vec::new();
        for (y, per_client) in pools.iter().enumerate() {
            let present = per_client.iter().filter(|v| !v.is_empty()).count();
            for (d, v) in per_client.iter().enumerate() {
                if v.is_empty() && present > 0 {
                    log::warn!("class {y} absent from client {d}'s bank; pair skipped");
                }
            }
            if present > 0 {
                classes.push(y);
            }
        }
        let mut init = stream(seed, "translator-init", 0);
        let generator = GeneratorNet::new(p, m, cfg, &mut init)?;
        let discriminator = DiscriminatorNet::new(p, m, cfg, &mut init)?;
        Ok(Self {
            generator,
            discriminator,
            cfg: cfg.clone(),
            opt_g: AdamState::with_betas(cfg.lr_g, cfg.beta1, 0.999, 1e-8)?,
            opt_d: AdamState::with_betas(cfg.lr_d, cfg.beta1, 0.999, 1e-8)?,
            rng: stream(seed, "translator-train", 0),
            pools,
            banks: banks.to_vec(),
            classes,
            next_class: 0,
        })
    }

    /// Cycles through classes; draws an even share of the batch from every
    /// client holding that class and a uniform target per row.
    pub fn sample_batch(&mut self) -> Result<ClassBatch> {
        let m = self.banks.len();
        let class = self.classes[self.next_class % self.classes.len()];
        self.next_class += 1;
        let holders: Vec<usize> = (0..m).filter(|&d| !self.pools[class][d].is_empty()).collect();
        let per = self.cfg.batch.div_ceil(holders.len()).max(1);
        let p = self.banks[0].latent_dim();
        let mut values = Vec::with_capacity(per * holders.len() * p);
        let mut src = Vec::new();
        for &d in &holders {
            let pool = &self.pools[class][d];
            for _ in 0..per {
                let i = pool[self.rng.random_range(0..pool.len())];
                values.extend_from_slice(self.banks[d].row(i));
                src.push(d);
            }
        }
        if src.len() < 2 {
            // duplicate so batch statistics inside the nets stay defined
            values.extend_from_within(..p);
            src.push(src[0]);
        }
        let tgt = (0..src.len()).map(|_| self.rng.random_range(0..m)).collect();
        Ok(ClassBatch {
            class,
            z: Tensor::new(vec![src.len(), p], values)?,
            src,
            tgt,
        })
    }

    /// Minimizes `-L_adv + λ_clsd L_clsd`; the generator is frozen.
    pub fn discriminator_step(&mut self, batch: &ClassBatch) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let gv = self.generator.bind_frozen(&mut tape);
        let dv = self.discriminator.bind(&mut tape);
        let z = tape.leaf(&batch.z);
        let fake = self.generator.forward(&mut tape, &gv, z, &batch.src, &batch.tgt, Some(&mut self.rng))?;
        let (rs, rc) = self.discriminator.forward(&mut tape, &dv, z, Some(&mut self.rng))?;
        let (fs, _) = self.discriminator.forward(&mut tape, &dv, fake, Some(&mut self.rng))?;
        let adv = adv_term(&mut tape, rs, fs)?;
        let cls = tape.cross_entropy(rc, &batch.src)?;
        let neg_adv = tape.scale(adv, -1.0)?;
        let wcls = tape.scale(cls, self.cfg.lambda_clsd)?;
        let loss = tape.add(neg_adv, wcls)?;
        tape.backward(loss)?;
        self.discriminator.zero_grad();
        self.discriminator.absorb_grads(&tape, &dv)?;
        self.opt_d.step(&mut self.discriminator.params_mut())?;
        Ok(StepLosses {
            adv: tape.scalar(adv),
            cls: tape.scalar(cls),
            rec: 0.0,
        })
    }

    /// Minimizes `L_adv + λ_clsg L_clsg + λ_rec L_rec`; the discriminator is
    /// frozen and run without dropout.
    pub fn generator_step(&mut self, batch: &ClassBatch) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let gv = self.generator.bind(&mut tape);
        let dv = self.discriminator.bind_frozen(&mut tape);
        let z = tape.leaf(&batch.z);
        let fake = self.generator.forward(&mut tape, &gv, z, &batch.src, &batch.tgt, Some(&mut self.rng))?;
        let (rs, _) = self.discriminator.forward(&mut tape, &dv, z, None)?;
        let (fs, fc) = self.discriminator.forward(&mut tape, &dv, fake, None)?;
        let adv = adv_term(&mut tape, rs, fs)?;
        let cls = tape.cross_entropy(fc, &batch.tgt)?;
        let back = self.generator.forward(&mut tape, &gv, fake, &batch.tgt, &batch.src, Some(&mut self.rng))?;
        let rec = l1_term(&mut tape, z, back)?;
        let wcls = tape.scale(cls, self.cfg.lambda_clsg)?;
        let wrec = tape.scale(rec, self.cfg.lambda_rec)?;
        let s = tape.add(adv, wcls)?;
        let loss = tape.add(s, wrec)?;
        tape.backward(loss)?;
        self.generator.zero_grad();
        self.generator.absorb_grads(&tape, &gv)?;
        self.opt_g.step(&mut self.generator.params_mut())?;
        Ok(StepLosses {
            adv: tape.scalar(adv),
            cls: tape.scalar(cls),
            rec: tape.scalar(rec),
        })
    }

    /// Runs `cfg.steps` alternating updates.
    pub fn train(&mut self) -> Result<()> {
        for step in 0..self.cfg.steps {
            let batch = self.sample_batch()?;
            let d = self.discriminator_step(&batch).map_err(|e| abort(step, e))?;
            let g = self.generator_step(&batch).map_err(|e| abort(step, e))?;
            if step % 500 == 0 {
                log::debug!(
                    "translator step {step}: d_adv {:.4} d_cls {:.4} g_cls {:.4} g_rec {:.4}",
                    d.adv,
                    d.cls,
                    g.cls,
                    g.rec
                );
            }
        }
        Ok(())
    }

    pub fn into_generator(self) -> GeneratorNet {
        self.generator
    }
}

fn abort(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("translator step {step}: {msg}")),
        e => e,
    }
}

/// Trains `G` on the pooled banks and discards the discriminator.
pub fn train_translator(banks: &[SynthBank], cfg: &GanConfig, seed: u64) -> Result<GeneratorNet> {
    let mut t = TranslatorTrainer::new(banks, cfg, seed)?;
    t.train()?;
    Ok(t.into_generator())
}

/// Per-coordinate mean absolute gap between client bank centroids, averaged
/// over client pairs. Same units as the reconstruction loss.
pub fn mean_inter_client_distance(banks: &[SynthBank]) -> f64 {
    let centroids: Vec<Vec<f64>> = banks
        .iter()
        .map(|b| {
            let p = b.latent_dim();
            let mut c = vec![0.0; p];
            for i in 0..b.len() {
                for (cj, v) in c.iter_mut().zip(b.row(i)) {
                    *cj += v / b.len() as f64;
                }
            }
            c
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            total += centroids[a].iter().zip(&centroids[b]).map(|(x, y)| (x - y).abs()).sum::<f64>() / centroids[a].len().max(1) as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Shuffled copy of `idx`, for callers that need a held-out split.
pub fn shuffled(idx: &[usize], seed: u64) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.shuffle(&mut stream(seed, "shuffle", 0));
    v
}
