//! Client/server orchestration: local training, the one-off inversion and
//! translator stages, and the communication rounds.
//!
//! Every model transfer is encoded into a frame, pushed through a transport
//! channel and decoded on the other side, so the receiver always works with
//! 32-bit rounded parameters exactly as they crossed the wire.

mod aggregate;
mod local;

pub use aggregate::{aggregate, aggregate_models, broadcast, compute_importance, normalize_importance, ImportanceVector, NORMALIZE_FLOOR};
pub use local::{di_term, encode_examples, evaluate, local_train_stage1, local_train_stage4, loss_di, sample_targets};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{minibatch_iter, Batcher, DomainDataset, FederationSplit, LabeledExample};
use crate::error::{Error, Result};
use crate::inversion::{synthesize, BankStore, SynthBank, SynthConfig};
use crate::nn::{ClassifierHead, MlpEncoder, Module};
use crate::rng::{derive_seed, stream, SimRng};
use crate::translator::{train_translator, GanConfig, GeneratorNet};
use crate::transport::{
    channel, encode_params, relay, CommsLedger, Direction, Frame, FrameReceiver, FrameSender, MsgType, PartId, TransportKind, SERVER,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Lsi,
    Fedavg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lsi => "lsi",
            Method::Fedavg => "fedavg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsi" => Ok(Method::Lsi),
            "fedavg" => Ok(Method::Fedavg),
            other => Err(Error::Config(format!("unknown method '{other}' (lsi|fedavg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Uniform,
    Importance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub rounds: usize,
    /// Local epochs, both before the rounds and within each round.
    pub epochs: usize,
    pub lambda_di: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub use_di: bool,
    pub use_importance: bool,
    /// Differentiate the squared output norm for importance.
    pub squared_norm: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            epochs: 10,
            lambda_di: 1.0,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 32,
            use_di: true,
            use_importance: true,
            squared_norm: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.epochs == 0 {
            return Err(Error::Config("rounds and epochs must be at least 1".into()));
        }
        if !(self.lambda_di.is_finite() && self.lambda_di >= 0.0) {
            return Err(Error::Config(format!("lambda_di must be >= 0, got {}", self.lambda_di)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        Ok(())
    }

    pub fn aggregation(&self) -> AggregationMode {
        if self.use_importance {
            AggregationMode::Importance
        } else {
            AggregationMode::Uniform
        }
    }
}

/// Encoder hidden widths and latent width; input width and class count come
/// from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            latent: 16,
        }
    }
}

/// Everything a single federated run needs besides data and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelDims,
    pub round: RoundConfig,
    pub synth: SynthConfig,
    pub gan: GanConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.latent == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.round.validate()?;
        self.synth.validate()?;
        self.gan.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub transport: TransportKind,
    /// Train clients on the rayon pool.
    pub parallel: bool,
}

/// Encoder and head shared by all clients after a broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub encoder: MlpEncoder,
    pub head: ClassifierHead,
}

impl GlobalModel {
    pub fn init(input: usize, dims: &ModelDims, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "global-init", 0);
        let mut widths = vec![input];
        widths.extend_from_slice(&dims.hidden);
        widths.push(dims.latent);
        Ok(Self {
            encoder: MlpEncoder::new(&widths, &mut rng)?,
            head: ClassifierHead::new(dims.latent, classes, &mut rng),
        })
    }
}

/// One participant. `id` is its index among the training clients, which is
/// also its translator domain index.
pub struct ClientState {
    pub id: usize,
    pub encoder: MlpEncoder,
    pub head: ClassifierHead,
    pub data: DomainDataset,
    pub generator: Option<GeneratorNet>,
    batcher: Batcher,
    di_rng: SimRng,
}

impl ClientState {
    pub fn new(id: usize, model: &GlobalModel, data: DomainDataset, batch: usize, seed: u64) -> Result<Self> {
        let labels: Vec<usize> = data.examples.iter().map(|e| e.label).collect();
        Ok(Self {
            id,
            encoder: model.encoder.clone(),
            head: model.head.clone(),
            batcher: minibatch_iter(&labels, batch, derive_seed(seed, "client-batches", id as u64), false, false)?,
            di_rng: stream(seed, "client-di", id as u64),
            data,
            generator: None,
        })
    }
}

/// Evaluation of one model on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub loss: f64,
}

impl From<(f64, f64)> for Score {
    fn from((accuracy, loss): (f64, f64)) -> Self {
        Self { accuracy, loss }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Global model on the pooled training data.
    pub train: Score,
    pub val: Option<Score>,
    pub unseen: Score,
    /// Each client's locally trained model on its own training data, before
    /// aggregation.
    pub local: Vec<Score>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub unseen_domain: usize,
    pub records: Vec<RoundRecord>,
    /// Round chosen by best validation accuracy, earliest on ties.
    pub best_round: usize,
    pub ledger: CommsLedger,
    pub model: GlobalModel,
    pub generator_params: usize,
    pub clients: usize,
}

impl ExperimentReport {
    pub fn best(&self) -> &RoundRecord {
        &self.records[self.best_round - 1]
    }

    /// Unseen accuracy of the checkpoint picked on validation.
    pub fn selected_unseen_accuracy(&self) -> f64 {
        self.best().unseen.accuracy
    }

    pub fn final_unseen_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.unseen.accuracy)
    }

    pub fn unseen_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.unseen.accuracy).collect()
    }

    pub fn encoder_params(&self) -> usize {
        self.model.encoder.num_params()
    }

    pub fn head_state_len(&self) -> usize {
        self.model.head.state_len()
    }
}

/// First round (1-based) whose value reaches `fraction` of the final value.
pub fn rounds_to_fraction(curve: &[f64], fraction: f64) -> Option<usize> {
    let last = *curve.last()?;
    curve.iter().position(|&a| a >= fraction * last).map(|i| i + 1)
}

/// Index (1-based) of the best value, earliest on ties.
pub fn select_best_round(val: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in val.iter().enumerate() {
        if v > val[best] {
            best = i;
        }
    }
    best + 1
}

struct Link {
    up: (FrameSender, FrameReceiver),
    down: (FrameSender, FrameReceiver),
}

/// A run in progress: clients, server-side view and the wires between them.
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub template: GlobalModel,
    pub ledger: CommsLedger,
    cfg: PipelineConfig,
    seed: u64,
    opts: RunOptions,
    links: Vec<Link>,
}

impl Federation {
    pub fn new(split: &FederationSplit, cfg: &PipelineConfig, seed: u64, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        if split.num_clients() < 2 {
            return Err(Error::invalid("federation needs at least 2 clients"));
        }
        let input = split.clients[0]
            .feature_dim()
            .ok_or_else(|| Error::invalid("first client has no data"))?;
        let template = GlobalModel::init(input, &cfg.model, split.classes, seed)?;
        let clients = split
            .clients
            .iter()
            .enumerate()
            .map(|(i, ds)| ClientState::new(i, &template, ds.clone(), cfg.round.batch, seed))
            .collect::<Result<Vec<_>>>()?;
        let links = (0..clients.len())
            .map(|_| {
                Ok(Link {
                    up: channel(opts.transport)?,
                    down: channel(opts.transport)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clients,
            template,
            ledger: CommsLedger::new(),
            cfg: cfg.clone(),
            seed,
            opts,
            links,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn each_client<T, F>(&mut self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut ClientState) -> Result<T> + Sync + Send,
    {
        if self.opts.parallel {
            self.clients.par_iter_mut().map(f).collect()
        } else {
            self.clients.iter_mut().map(f).collect()
        }
    }

    /// Moves a blob across client `d`'s link and returns what arrived.
    fn transfer(&mut self, d: usize, round: u32, direction: Direction, msg: MsgType, part: PartId, values: &[f64]) -> Result<Vec<f64>> {
        let from = match direction {
            Direction::ClientToServer => d as u32,
            Direction::ServerToClient => SERVER,
        };
        let blob = encode_params(part, from, round, values)?;
        let link = &mut self.links[d];
        let (tx, rx) = match direction {
            Direction::ClientToServer => (&link.up.0, &mut link.up.1),
            Direction::ServerToClient => (&link.down.0, &mut link.down.1),
        };
        let got = relay(tx, rx, &Frame::params(msg, &blob))?;
        if got.msg_type != msg {
            return Err(Error::Protocol(format!("expected {msg:?}, received {:?}", got.msg_type)));
        }
        let received = got.blob()?;
        if received.part != part || received.client != from || received.round != round {
            return Err(Error::Protocol("received blob does not match what was sent".into()));
        }
        self.ledger.record_transfer(round, direction, d as u32, &received);
        Ok(received.to_f64())
    }

    /// Stage 1: every client trains on cross entropy.
    pub fn stage1(&mut self) -> Result<()> {
        let cfg = self.cfg.round.clone();
        self.each_client(|c| local_train_stage1(c, cfg.epochs, &cfg))
            .map_err(|e| e.at_stage("stage1-local-training"))?;
        Ok(())
    }

    /// Clients upload their heads; the server reconstructs them.
    pub fn upload_heads(&mut self) -> Result<Vec<ClassifierHead>> {
        let mut heads = Vec::with_capacity(self.clients.len());
        for d in 0..self.clients.len() {
            let state = self.clients[d].head.state_vector();
            let got = self.transfer(d, 0, Direction::ClientToServer, MsgType::ParamUpload, PartId::Head, &state)?;
            let mut h = self.template.head.clone();
            h.load_state_vector(&got)?;
            heads.push(h);
        }
        Ok(heads)
    }

    /// Stage 2 on the server: one bank per received head. Label targets
    /// follow each client's label distribution.
    pub fn synthesize_banks(&self, heads: &[ClassifierHead]) -> Result<Vec<SynthBank>> {
        self.synthesize_banks_with(heads, &self.cfg.synth)
    }

    /// As [`Federation::synthesize_banks`] with a different objective, for
    /// projection ablations.
    pub fn synthesize_banks_with(&self, heads: &[ClassifierHead], synth: &SynthConfig) -> Result<Vec<SynthBank>> {
        synth.validate()?;
        let seed = self.seed;
        let data: Vec<&DomainDataset> = self.clients.iter().map(|c| &c.data).collect();
        let job = |(d, head): (usize, &ClassifierHead)| -> Result<SynthBank> {
            let mut bank = synthesize(head, data[d], synth, derive_seed(seed, "inversion", d as u64))?;
            bank.client = d;
            Ok(bank)
        };
        let banks: Result<Vec<SynthBank>> = if self.opts.parallel {
            heads.par_iter().enumerate().map(job).collect()
        } else {
            heads.iter().enumerate().map(job).collect()
        };
        banks.map_err(|e| e.at_stage("stage2-inversion"))
    }

    /// Stage 3 on the server.
    pub fn train_generator(&self, banks: &[SynthBank]) -> Result<GeneratorNet> {
        train_translator(banks, &self.cfg.gan, derive_seed(self.seed, "translator", 0)).map_err(|e| e.at_stage("stage3-translator"))
    }

    /// Sends the generator to every client.
    pub fn deliver_generator(&mut self, g: &GeneratorNet) -> Result<()> {
        let flat = g.flat_params();
        for d in 0..self.clients.len() {
            let got = self.transfer(d, 0, Direction::ServerToClient, MsgType::GeneratorDelivery, PartId::Generator, &flat)?;
            let mut local = g.clone();
            local.load_flat_params(&got)?;
            self.clients[d].generator = Some(local);
        }
        Ok(())
    }

    /// Stages 2 and 3 end to end; banks are purged before returning.
    pub fn stages_2_3(&mut self) -> Result<usize> {
        let heads = self.upload_heads()?;
        let banks = self.synthesize_banks(&heads)?;
        let mut store = BankStore::new(banks, 2);
        let g = self.train_generator(store.banks()?)?;
        store.purge(3);
        self.deliver_generator(&g)?;
        Ok(g.num_params())
    }

    /// One communication round: local training, upload, aggregation,
    /// broadcast, evaluation.
    pub fn round(&mut self, round: usize, method: Method, eval: &EvalSets) -> Result<RoundRecord> {
        let mut cfg = self.cfg.round.clone();
        if method == Method::Fedavg {
            cfg.use_di = false;
            cfg.use_importance = false;
        }
        let r = round as u32;
        let outcomes = self
            .each_client(|c| {
                local_train_stage4(c, c.generator.clone().as_ref(), &cfg)?;
                let local = Score::from(evaluate(&c.encoder, &c.head, &c.data.examples)?);
                let imp = if cfg.use_importance {
                    Some(compute_importance(c, cfg.squared_norm)?)
                } else {
                    None
                };
                Ok((local, imp))
            })
            .map_err(|e| e.at_stage("stage4-local-training"))?;

        let mut encoders = Vec::with_capacity(self.clients.len());
        let mut heads = Vec::with_capacity(self.clients.len());
        let mut importance = Vec::new();
        for (d, (_, imp)) in outcomes.iter().enumerate() {
            let enc = self.clients[d].encoder.flat_params();
            let head = self.clients[d].head.state_vector();
            encoders.push(self.transfer(d, r, Direction::ClientToServer, MsgType::ParamUpload, PartId::Encoder, &enc)?);
            heads.push(self.transfer(d, r, Direction::ClientToServer, MsgType::ParamUpload, PartId::Head, &head)?);
            if let Some(imp) = imp {
                let mut v = imp.encoder.clone();
                v.extend_from_slice(&imp.head);
                let got = self.transfer(d, r, Direction::ClientToServer, MsgType::ParamUpload, PartId::Importance, &v)?;
                let (e, h) = got.split_at(imp.encoder.len());
                importance.push(ImportanceVector {
                    encoder: e.to_vec(),
                    head: h.to_vec(),
                });
            }
        }
        let weights = cfg.use_importance.then_some(importance.as_slice());
        let global = aggregate_models(&self.template, &encoders, &heads, weights).map_err(|e| e.at_stage("stage5-aggregation"))?;

        let enc = global.encoder.flat_params();
        let head = global.head.state_vector();
        for d in 0..self.clients.len() {
            let e = self.transfer(d, r, Direction::ServerToClient, MsgType::ParamBroadcast, PartId::Encoder, &enc)?;
            let h = self.transfer(d, r, Direction::ServerToClient, MsgType::ParamBroadcast, PartId::Head, &head)?;
            let c = &mut self.clients[d];
            c.encoder.load_flat_params(&e)?;
            c.head.load_state_vector(&h)?;
        }

        let c0 = &self.clients[0];
        let score = |ex: &[LabeledExample]| evaluate(&c0.encoder, &c0.head, ex).map(Score::from);
        Ok(RoundRecord {
            round,
            train: score(&eval.train)?,
            val: if eval.val.is_empty() { None } else { Some(score(&eval.val)?) },
            unseen: score(&eval.unseen)?,
            local: outcomes.iter().map(|(s, _)| *s).collect(),
        })
    }

    /// The model every client currently holds.
    pub fn current_model(&self) -> GlobalModel {
        GlobalModel {
            encoder: self.clients[0].encoder.clone(),
            head: self.clients[0].head.clone(),
        }
    }
}

/// Pooled evaluation sets of a split.
pub struct EvalSets {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub unseen: Vec<LabeledExample>,
}

impl EvalSets {
    pub fn from_split(split: &FederationSplit) -> Result<Self> {
        if split.unseen.examples.is_empty() {
            return Err(Error::invalid("unseen domain has no examples"));
        }
        Ok(Self {
            train: split.clients.iter().flat_map(|c| c.examples.iter().cloned()).collect(),
            val: split.clients.iter().flat_map(|c| c.val.iter().cloned()).collect(),
            unseen: split.unseen.examples.clone(),
        })
    }
}

/// Runs one method end to end.
pub fn run_method(split: &FederationSplit, cfg: &PipelineConfig, method: Method, seed: u64, opts: RunOptions) -> Result<ExperimentReport> {
    let eval = EvalSets::from_split(split)?;
    let mut fed = Federation::new(split, cfg, seed, opts)?;
    fed.stage1()?;
    // the translator only feeds the invariance loss, so without it stages
    // 2 and 3 are skipped entirely
    let generator_params = match method {
        Method::Lsi if cfg.round.use_di => fed.stages_2_3()?,
        _ => 0,
    };
    let mut records = Vec::with_capacity(cfg.round.rounds);
    for r in 1..=cfg.round.rounds {
        let rec = fed.round(r, method, &eval)?;
        log::debug!(
            "{method} seed {seed} unseen {} round {r}: unseen acc {:.4}",
            split.unseen.domain,
            rec.unseen.accuracy
        );
        records.push(rec);
    }
    let best_round = if eval.val.is_empty() {
        records.len()
    } else {
        select_best_round(&records.iter().map(|r| r.val.map_or(0.0, |v| v.accuracy)).collect::<Vec<_>>())
    };
    Ok(ExperimentReport {
        method,
        seed,
        unseen_domain: split.unseen.domain,
        records,
        best_round,
        model: fed.current_model(),
        generator_params,
        clients: fed.clients.len(),
        ledger: fed.ledger,
    })
}

/// Full five-stage pipeline.
pub fn run_pipeline(split: &FederationSplit, cfg: &PipelineConfig, seed: u64, opts: RunOptions) -> Result<ExperimentReport> {
    run_method(split, cfg, Method::Lsi, seed, opts)
}

/// Cross entropy only, uniform averaging, no inversion or translator.
pub fn run_fedavg(split: &FederationSplit, cfg: &PipelineConfig, seed: u64, opts: RunOptions) -> Result<ExperimentReport> {
    run_method(split, cfg, Method::Fedavg, seed, opts)
}

/// A generator with the same shape as one trained for `clients` clients.
pub fn generator_template(latent: usize, clients: usize, gan: &GanConfig) -> Result<GeneratorNet> {
    GeneratorNet::new(latent, clients, gan, &mut SimRng::seed_from_u64(0))
}
