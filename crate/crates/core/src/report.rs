//! Experiment configuration, metrics files, summaries and the drivers behind
//! the `fedlsi` command-line tool.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{generate_rotated_blobs, leave_one_out_split, load_csv, write_csv, DomainDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{encode_examples, run_method, select_best_round, ExperimentReport, Federation, Method, ModelDims, PipelineConfig, RoundConfig, RunOptions};
use crate::inversion::{SynthBank, SynthConfig};
use crate::nn::{fit_linear_probe, probe_accuracy, Tensor};
use crate::translator::GanConfig;
use crate::transport::TransportKind;

pub const METRICS_HEADER: &str = "method,seed,unseen,round,split,accuracy,loss";
pub const COMMS_HEADER: &str = "method,seed,unseen,round,direction,client,part,params,bytes";

/// Which domain(s) to hold out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "UnseenRepr", into = "UnseenRepr")]
pub enum Unseen {
    #[default]
    All,
    Id(usize),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum UnseenRepr {
    Id(usize),
    Name(String),
}

impl TryFrom<UnseenRepr> for Unseen {
    type Error = Error;
    fn try_from(r: UnseenRepr) -> Result<Self> {
        match r {
            UnseenRepr::Id(i) => Ok(Unseen::Id(i)),
            UnseenRepr::Name(s) => s.parse(),
        }
    }
}

impl From<Unseen> for UnseenRepr {
    fn from(u: Unseen) -> Self {
        match u {
            Unseen::All => UnseenRepr::Name("all".into()),
            Unseen::Id(i) => UnseenRepr::Id(i),
        }
    }
}

impl FromStr for Unseen {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Unseen::All);
        }
        s.parse()
            .map(Unseen::Id)
            .map_err(|_| Error::Config(format!("unseen must be a domain id or \"all\", got {s:?}")))
    }
}

impl fmt::Display for Unseen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unseen::All => f.write_str("all"),
            Unseen::Id(i) => write!(f, "{i}"),
        }
    }
}

/// A whole experiment as read from a TOML document. Every key is optional;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Synthetic rotated-blobs domains, used unless `data_csv` is set. Each
    /// run seed draws its own sample.
    pub data: SyntheticSpec,
    /// `domain,label,f0,..` file; relative paths resolve against the config
    /// file's directory.
    pub data_csv: Option<PathBuf>,
    pub unseen: Unseen,
    /// Stratified per-client validation share used for model selection.
    pub val_fraction: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub transport: TransportKind,
    /// Train clients concurrently; results do not depend on it.
    pub parallel: bool,
    pub model: ModelDims,
    pub round: RoundConfig,
    pub synth: SynthConfig,
    pub gan: GanConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            data_csv: None,
            unseen: Unseen::All,
            val_fraction: 0.1,
            seeds: vec![0],
            out: PathBuf::from("out"),
            transport: TransportKind::Memory,
            parallel: false,
            model: ModelDims::default(),
            round: RoundConfig::default(),
            synth: SynthConfig::default(),
            gan: GanConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0,1)", self.val_fraction)));
        }
        if self.data_csv.is_none() {
            self.data.validate().map_err(|e| Error::Config(format!("data: {e}")))?;
            if let Unseen::Id(i) = self.unseen {
                if i >= self.data.domains.len() {
                    return Err(Error::Config(format!("unseen domain {i} out of range 0..{}", self.data.domains.len())));
                }
            }
        }
        self.pipeline().validate()
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            round: self.round.clone(),
            synth: self.synth.clone(),
            gan: self.gan.clone(),
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            transport: self.transport,
            parallel: self.parallel,
        }
    }

    /// The domains for one seed.
    pub fn datasets(&self, seed: u64) -> Result<Vec<DomainDataset>> {
        match &self.data_csv {
            Some(path) => load_csv(path),
            None => generate_rotated_blobs(&self.data, seed),
        }
    }

    /// Domain ids to hold out, in ascending order.
    pub fn unseen_domains(&self, datasets: &[DomainDataset]) -> Result<Vec<usize>> {
        let ids: Vec<usize> = datasets.iter().map(|d| d.domain).collect();
        match self.unseen {
            Unseen::All => Ok(ids),
            Unseen::Id(i) if ids.contains(&i) => Ok(vec![i]),
            Unseen::Id(i) => Err(Error::Config(format!("unseen domain {i} not in data (domains {ids:?})"))),
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let mut cfg = parse_config_str(&std::fs::read_to_string(path)?)?;
    if let (Some(csv), Some(dir)) = (&cfg.data_csv, path.parent()) {
        if csv.is_relative() {
            cfg.data_csv = Some(dir.join(csv));
        }
    }
    Ok(cfg)
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub unseen: usize,
    pub round: usize,
    /// `train`, `val`, `unseen` or `local-client-<d>`.
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
}

/// All rows of one run: pooled train, validation and unseen scores of the
/// global model plus each client's pre-aggregation score, per round.
pub fn rows_for(label: &str, report: &ExperimentReport) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    let mut push = |round: usize, split: String, acc: f64, loss: f64| {
        rows.push(MetricsRow {
            method: label.to_string(),
            seed: report.seed,
            unseen: report.unseen_domain,
            round,
            split,
            accuracy: acc,
            loss,
        })
    };
    for r in &report.records {
        push(r.round, "train".into(), r.train.accuracy, r.train.loss);
        if let Some(v) = r.val {
            push(r.round, "val".into(), v.accuracy, v.loss);
        }
        push(r.round, "unseen".into(), r.unseen.accuracy, r.unseen.loss);
        for (d, s) in r.local.iter().enumerate() {
            push(r.round, format!("local-client-{d}"), s.accuracy, s.loss);
        }
    }
    rows
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.method, r.seed, r.unseen, r.round, r.split, r.accuracy, r.loss
        ));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows))?;
    Ok(())
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => return Err(Error::Parse(format!("bad metrics header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("metrics line {}: expected 7 fields", n + 2)));
        }
        let bad = |what: &str| Error::Parse(format!("metrics line {}: bad {what}", n + 2));
        let accuracy: f64 = f[5].parse().map_err(|_| bad("accuracy"))?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(bad("accuracy"));
        }
        rows.push(MetricsRow {
            method: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad("seed"))?,
            unseen: f[2].parse().map_err(|_| bad("unseen"))?,
            round: f[3].parse().map_err(|_| bad("round"))?,
            split: f[4].to_string(),
            accuracy,
            loss: f[6].parse().map_err(|_| bad("loss"))?,
        });
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    parse_metrics_csv(&std::fs::read_to_string(path)?)
}

/// Comms ledger rows of one run, prefixed with the run's identity.
pub fn comms_rows(label: &str, report: &ExperimentReport) -> String {
    let mut s = String::new();
    for e in report.ledger.entries() {
        s.push_str(&format!(
            "{label},{},{},{},{},{},{},{},{}\n",
            report.seed,
            report.unseen_domain,
            e.round,
            e.direction.as_str(),
            e.client,
            e.part.as_str(),
            e.params,
            e.bytes
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

/// Outcome of one (method, seed, unseen domain) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub unseen: usize,
    pub rounds: usize,
    /// Round picked by validation accuracy, earliest on ties.
    pub best_round: usize,
    pub selected_accuracy: f64,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCell {
    pub unseen: usize,
    pub accuracy: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub domains: Vec<DomainCell>,
    /// `mean` is the mean of the per-domain means; `std` spreads the
    /// per-seed cross-domain averages.
    pub average: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub complete: bool,
    pub error: Option<String>,
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunResult>,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Recomputes the report from metrics rows alone.
pub fn summarize(rows: &[MetricsRow]) -> Summary {
    type Key = (String, u64, usize);
    let mut val: BTreeMap<Key, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut unseen: BTreeMap<Key, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        let key = (r.method.clone(), r.seed, r.unseen);
        match r.split.as_str() {
            "val" => {
                val.entry(key).or_default().insert(r.round, r.accuracy);
            }
            "unseen" => {
                unseen.entry(key).or_default().insert(r.round, r.accuracy);
            }
            _ => {}
        }
    }
    let mut runs = Vec::new();
    for (key, curve) in &unseen {
        let rounds: Vec<usize> = curve.keys().copied().collect();
        let accs: Vec<f64> = curve.values().copied().collect();
        let best_idx = match val.get(key) {
            Some(v) if rounds.iter().all(|r| v.contains_key(r)) => {
                select_best_round(&rounds.iter().map(|r| v[r]).collect::<Vec<_>>()) - 1
            }
            _ => accs.len() - 1,
        };
        runs.push(RunResult {
            method: key.0.clone(),
            seed: key.1,
            unseen: key.2,
            rounds: rounds.len(),
            best_round: rounds[best_idx],
            selected_accuracy: accs[best_idx],
            final_accuracy: accs[accs.len() - 1],
        });
    }
    let methods = order
        .iter()
        .map(|m| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| &r.method == m).collect();
            let mut by_domain: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for r in &mine {
                by_domain.entry(r.unseen).or_default().push(r.selected_accuracy);
                by_seed.entry(r.seed).or_default().push(r.selected_accuracy);
            }
            let domains: Vec<DomainCell> = by_domain
                .iter()
                .map(|(&unseen, v)| DomainCell {
                    unseen,
                    accuracy: MeanStd::of(v),
                })
                .collect();
            let cell_means: Vec<f64> = domains.iter().map(|c| c.accuracy.mean).collect();
            let per_seed: Vec<f64> = by_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let spread = MeanStd::of(&per_seed);
            MethodSummary {
                method: m.clone(),
                domains,
                average: MeanStd {
                    mean: MeanStd::of(&cell_means).mean,
                    std: spread.std,
                    n: spread.n,
                },
            }
        })
        .collect();
    Summary {
        complete: true,
        error: None,
        methods,
        runs,
    }
}

/// Plain-text table of a summary, one line per method.
pub fn render_summary(summary: &Summary) -> String {
    let mut domains: Vec<usize> = summary.methods.iter().flat_map(|m| m.domains.iter().map(|c| c.unseen)).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut s = format!("{:<24}", "method");
    for d in &domains {
        s.push_str(&format!(" {:>16}", format!("unseen {d}")));
    }
    s.push_str(&format!(" {:>16}\n", "avg"));
    for m in &summary.methods {
        s.push_str(&format!("{:<24}", m.method));
        for d in &domains {
            let cell = m.domains.iter().find(|c| c.unseen == *d);
            let txt = cell.map_or("-".to_string(), |c| pct(&c.accuracy));
            s.push_str(&format!(" {txt:>16}"));
        }
        s.push_str(&format!(" {:>16}\n", pct(&m.average)));
    }
    if !summary.complete {
        s.push_str(&format!("INCOMPLETE: {}\n", summary.error.as_deref().unwrap_or("unknown error")));
    }
    s
}

fn pct(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

/// Everything a batch of runs produced.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub comms: String,
    pub summary: Summary,
}

/// Runs every (seed, unseen domain) pair for each labelled variant. Stops at
/// the first failure and returns what finished alongside the error.
fn run_all(cfg: &ExperimentConfig, variants: &[(String, Method, PipelineConfig)]) -> (RunOutput, Option<Error>) {
    let mut out = RunOutput::default();
    let opts = cfg.run_options();
    let result = (|| -> Result<()> {
        for &seed in &cfg.seeds {
            let data = cfg.datasets(seed)?;
            for unseen in cfg.unseen_domains(&data)? {
                let split = leave_one_out_split(&data, unseen, cfg.val_fraction, seed)?;
                for (label, method, pipeline) in variants {
                    log::info!("{label}: seed {seed}, unseen domain {unseen}");
                    let report = run_method(&split, pipeline, *method, seed, opts)?;
                    out.rows.extend(rows_for(label, &report));
                    out.comms.push_str(&comms_rows(label, &report));
                }
            }
        }
        Ok(())
    })();
    out.summary = summarize(&out.rows);
    let err = result.err();
    if let Some(e) = &err {
        out.summary.complete = false;
        out.summary.error = Some(e.to_string());
    }
    (out, err)
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(&out.rows, dir.join("metrics.csv"))?;
    std::fs::write(dir.join("comms.csv"), format!("{COMMS_HEADER}\n{}", out.comms))?;
    write_summary(dir, &out.summary)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    Ok(())
}

fn finish(dir: &Path, out: RunOutput, err: Option<Error>) -> Result<RunOutput> {
    write_outputs(dir, &out)?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Leave-one-domain-out runs of one method over all configured seeds.
/// Writes `metrics.csv`, `comms.csv` and `report.json` into `cfg.out`, also
/// when a run fails (the report is then marked incomplete).
pub fn cmd_run(cfg: &ExperimentConfig, method: Method) -> Result<RunOutput> {
    cfg.validate()?;
    let (out, err) = run_all(cfg, &[(method.to_string(), method, cfg.pipeline())]);
    finish(&cfg.out, out, err)
}

/// The 2x2 grid over (use_di, use_importance), in the order
/// No/No, Yes/No, No/Yes, Yes/Yes.
pub fn ablation_variants(base: &PipelineConfig) -> Vec<(String, Method, PipelineConfig)> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(di, imp)| {
            let mut p = base.clone();
            p.round.use_di = di;
            p.round.use_importance = imp;
            (ablation_label(di, imp), Method::Lsi, p)
        })
        .collect()
}

pub fn ablation_label(use_di: bool, use_importance: bool) -> String {
    let yn = |b: bool| if b { "yes" } else { "no" };
    format!("di-{}_imp-{}", yn(use_di), yn(use_importance))
}

/// One row of an ablation or sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub key: String,
    pub domains: Vec<(usize, f64)>,
    pub average: MeanStd,
}

pub fn table_rows(summary: &Summary, labels: &[(String, String)]) -> Vec<TableRow> {
    labels
        .iter()
        .filter_map(|(label, key)| {
            summary.method(label).map(|m| TableRow {
                key: key.clone(),
                domains: m.domains.iter().map(|c| (c.unseen, c.accuracy.mean)).collect(),
                average: m.average,
            })
        })
        .collect()
}

pub fn table_to_csv(key_header: &str, rows: &[TableRow]) -> String {
    let mut domains: Vec<usize> = rows.iter().flat_map(|r| r.domains.iter().map(|d| d.0)).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut s = key_header.to_string();
    for d in &domains {
        s.push_str(&format!(",unseen_{d}"));
    }
    s.push_str(",avg,avg_std\n");
    for r in rows {
        s.push_str(&r.key);
        for d in &domains {
            match r.domains.iter().find(|x| x.0 == *d) {
                Some((_, v)) => s.push_str(&format!(",{v:.6}")),
                None => s.push(','),
            }
        }
        s.push_str(&format!(",{:.6},{:.6}\n", r.average.mean, r.average.std));
    }
    s
}

pub struct TableOutput {
    pub run: RunOutput,
    pub table: Vec<TableRow>,
}

/// Runs the toggle grid from shared seeds and writes `ablation.csv` next to
/// the usual outputs.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<TableOutput> {
    cfg.validate()?;
    let variants = ablation_variants(&cfg.pipeline());
    let (out, err) = run_all(cfg, &variants);
    let labels: Vec<(String, String)> = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(di, imp)| {
            let yn = |b: bool| if b { "Yes" } else { "No" };
            (ablation_label(di, imp), format!("{},{}", yn(di), yn(imp)))
        })
        .collect();
    let table = table_rows(&out.summary, &labels);
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("ablation.csv"), table_to_csv("use_di,use_importance", &table))?;
    let run = finish(&cfg.out, out, err)?;
    Ok(TableOutput { run, table })
}

/// The λ_di grid searched for the invariance weight.
pub const DEFAULT_SWEEP: [f64; 6] = [10.0, 1.0, 0.1, 0.01, 0.001, 0.0001];

/// Sorted descending with duplicates removed; rejects empty, negative and
/// non-finite grids.
pub fn sweep_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config("sweep values must be finite and >= 0".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    Ok(v)
}

/// One full-pipeline run set per λ_di value, written to `sweep.csv` in
/// descending order.
pub fn cmd_sweep(cfg: &ExperimentConfig, values: &[f64]) -> Result<TableOutput> {
    cfg.validate()?;
    let values = sweep_values(values)?;
    let variants: Vec<(String, Method, PipelineConfig)> = values
        .iter()
        .map(|&v| {
            let mut p = cfg.pipeline();
            p.round.lambda_di = v;
            (format!("lsi_lambda-di-{v}"), Method::Lsi, p)
        })
        .collect();
    let (out, err) = run_all(cfg, &variants);
    let labels: Vec<(String, String)> = values.iter().zip(&variants).map(|(v, (l, _, _))| (l.clone(), format!("{v}"))).collect();
    let table = table_rows(&out.summary, &labels);
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("sweep.csv"), table_to_csv("lambda_di", &table))?;
    let run = finish(&cfg.out, out, err)?;
    Ok(TableOutput { run, table })
}

/// Rebuilds `report.json` from an existing `metrics.csv`.
pub fn cmd_report(dir: impl AsRef<Path>) -> Result<Summary> {
    let dir = dir.as_ref();
    let summary = summarize(&read_metrics_csv(dir.join("metrics.csv"))?);
    write_summary(dir, &summary)?;
    Ok(summary)
}

/// Writes one seed's domains as a CSV the `data_csv` key can point at.
pub fn cmd_gen_data(cfg: &ExperimentConfig, seed: u64, path: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    cfg.validate()?;
    let data = generate_rotated_blobs(&cfg.data, seed)?;
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(&data, path)?;
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Synthesized,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Synthesized => "synthesized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub source: Source,
    pub client: usize,
    pub label: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Two-component PCA of the pooled original and synthesized latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionExport {
    pub variant: String,
    pub variance_explained: [f64; 2],
    /// Training accuracy of a linear probe on the synthesized vectors' labels.
    pub synth_probe_accuracy: f64,
    pub rows: Vec<ProjectionRow>,
}

impl ProjectionExport {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# variant={} variance_explained={:.6},{:.6} synth_probe_accuracy={:.6}\nsource,client,label,pc1,pc2\n",
            self.variant, self.variance_explained[0], self.variance_explained[1], self.synth_probe_accuracy
        );
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.source.as_str(), r.client, r.label, r.pc1, r.pc2));
        }
        s
    }
}

/// Projects the rows of `x` onto its two leading principal components.
/// Each component's sign is fixed so its largest-magnitude loading is
/// positive. Returns the projections and each component's share of the
/// total variance.
pub fn pca_2d(x: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n < 2 || p < 2 {
        return Err(Error::invalid("PCA needs at least 2 rows and 2 columns"));
    }
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::shape("PCA rows have different lengths"));
    }
    let mut m = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    for j in 0..p {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = (m.transpose() * &m) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (k, &i) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v = -v;
        }
        explained[k] = if total > 0.0 { eig.eigenvalues[i].max(0.0) / total } else { 0.0 };
        comps.push(v);
    }
    let proj = (0..n)
        .map(|r| {
            let row = m.row(r);
            [row.dot(&comps[0].transpose()), row.dot(&comps[1].transpose())]
        })
        .collect();
    Ok((proj, explained))
}

/// Builds a projection export from client latents and banks.
pub fn project(variant: &str, originals: &[(usize, Tensor, Vec<usize>)], banks: &[SynthBank], classes: usize, seed: u64) -> Result<ProjectionExport> {
    if banks.iter().all(SynthBank::is_empty) {
        return Err(Error::invalid("cannot project an empty bank"));
    }
    let mut points = Vec::new();
    let mut meta = Vec::new();
    for (client, z, labels) in originals {
        for (i, &y) in labels.iter().enumerate() {
            points.push(z.row(i).to_vec());
            meta.push((Source::Original, *client, y));
        }
    }
    let mut synth_rows = Vec::new();
    let mut synth_labels = Vec::new();
    for b in banks {
        for i in 0..b.len() {
            points.push(b.row(i).to_vec());
            synth_rows.push(b.row(i).to_vec());
            meta.push((Source::Synthesized, b.client, b.labels[i]));
            synth_labels.push(b.labels[i]);
        }
    }
    let (proj, variance_explained) = pca_2d(&points)?;
    let zs = Tensor::from_rows(&synth_rows)?;
    let probe = fit_linear_probe(&zs, &synth_labels, classes, 300, seed)?;
    Ok(ProjectionExport {
        variant: variant.to_string(),
        variance_explained,
        synth_probe_accuracy: probe_accuracy(&probe, &zs, &synth_labels)?,
        rows: meta
            .into_iter()
            .zip(proj)
            .map(|((source, client, label), [pc1, pc2])| ProjectionRow {
                source,
                client,
                label,
                pc1,
                pc2,
            })
            .collect(),
    })
}

/// Which loss terms to drop in extra re-synthesis passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectVariants {
    pub without_clsz: bool,
    pub without_bn: bool,
    pub without_norm: bool,
}

impl ProjectVariants {
    pub fn all() -> Self {
        Self {
            without_clsz: true,
            without_bn: true,
            without_norm: true,
        }
    }
}

/// Trains the clients locally for one seed and unseen domain, inverts their
/// heads and exports PCA projections of real and synthesized latents:
/// `projections.csv` for the full objective plus one file per requested
/// ablation.
pub fn cmd_project(cfg: &ExperimentConfig, seed: u64, unseen: usize, variants: ProjectVariants) -> Result<Vec<ProjectionExport>> {
    cfg.validate()?;
    let data = cfg.datasets(seed)?;
    let split = leave_one_out_split(&data, unseen, cfg.val_fraction, seed)?;
    let pipeline = cfg.pipeline();
    let mut fed = Federation::new(&split, &pipeline, seed, cfg.run_options())?;
    fed.stage1()?;
    let heads = fed.upload_heads()?;
    let originals = fed
        .clients
        .iter()
        .map(|c| Ok((c.id, encode_examples(&c.encoder, &c.data.examples)?, c.data.labels())))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = vec![("full", pipeline.synth.clone())];
    if variants.without_clsz {
        jobs.push(("no-clsz", SynthConfig { use_clsz: false, ..pipeline.synth.clone() }));
    }
    if variants.without_bn {
        jobs.push(("no-bn", SynthConfig { lambda_bn: 0.0, ..pipeline.synth.clone() }));
    }
    if variants.without_norm {
        jobs.push(("no-norm", SynthConfig { lambda_norm: 0.0, ..pipeline.synth.clone() }));
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut exports = Vec::with_capacity(jobs.len());
    for (name, synth) in jobs {
        let banks = fed.synthesize_banks_with(&heads, &synth)?;
        let export = project(name, &originals, &banks, split.classes, seed)?;
        let file = if name == "full" {
            "projections.csv".to_string()
        } else {
            format!("projections_{}.csv", name.replace('-', "_"))
        };
        std::fs::write(cfg.out.join(file), export.to_csv())?;
        exports.push(export);
    }
    Ok(exports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.round.lambda_di, 1.0);
        assert_eq!(cfg.synth.lambda_bn, 0.001);
        assert_eq!(cfg.synth.lambda_norm, 0.0001);
        assert_eq!((cfg.round.batch, cfg.round.epochs, cfg.round.rounds), (32, 10, 20));
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn typo_key_is_named() {
        let err = parse_config_str("[round]\nlamda_di = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("lamda_di"), "{err}");
        let err = parse_config_str("sedes = [1]\n").unwrap_err().to_string();
        assert!(err.contains("sedes"), "{err}");
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(parse_config_str("[round]\nlambda_di = -1.0\n").is_err());
        assert!(parse_config_str("seeds = []\n").is_err());
        assert!(parse_config_str("unseen = 9\n").is_err());
    }

    #[test]
    fn unseen_accepts_id_or_all() {
        assert_eq!(parse_config_str("unseen = 2").unwrap().unseen, Unseen::Id(2));
        assert_eq!(parse_config_str("unseen = \"all\"").unwrap().unseen, Unseen::All);
        assert!(parse_config_str("unseen = \"some\"").is_err());
        assert_eq!("3".parse::<Unseen>().unwrap(), Unseen::Id(3));
    }

    #[test]
    fn nested_sections_parse() {
        let text = "seeds = [1, 2]\n[data]\nclasses = 2\nnoise_sigma = 1.0\n[[data.domains]]\nangle_deg = 0.0\n[[data.domains]]\nangle_deg = 45.0\n[[data.domains]]\nangle_deg = 90.0\n[synth]\nlr = 0.05\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.data.classes, 2);
        assert_eq!(cfg.data.domains.len(), 3);
        assert_eq!(cfg.data.samples_per_domain, 300);
        assert_eq!(cfg.synth.lr, 0.05);
        assert_eq!(cfg.seeds, vec![1, 2]);
        // a serialized config parses back to itself
        let back = parse_config_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    fn row(method: &str, seed: u64, unseen: usize, round: usize, split: &str, acc: f64) -> MetricsRow {
        MetricsRow {
            method: method.into(),
            seed,
            unseen,
            round,
            split: split.into(),
            accuracy: acc,
            loss: 0.5,
        }
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![row("lsi", 0, 1, 1, "val", 0.25), row("lsi", 0, 1, 1, "local-client-0", 1.0)];
        let text = metrics_to_csv(&rows);
        assert!(text.contains(",0.250000,0.500000\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert_eq!(metrics_to_csv(&[]), format!("{METRICS_HEADER}\n"));
        assert!(parse_metrics_csv("method,seed\n").is_err());
        assert!(parse_metrics_csv(&format!("{METRICS_HEADER}\nlsi,0,1,1,val,1.5,0.1\n")).is_err());
    }

    #[test]
    fn summary_selects_on_validation() {
        let rows = vec![
            row("lsi", 0, 0, 1, "val", 0.5),
            row("lsi", 0, 0, 1, "unseen", 0.7),
            row("lsi", 0, 0, 2, "val", 0.9),
            row("lsi", 0, 0, 2, "unseen", 0.6),
            row("lsi", 0, 0, 3, "val", 0.9),
            row("lsi", 0, 0, 3, "unseen", 0.8),
        ];
        let s = summarize(&rows);
        assert_eq!(s.runs[0].best_round, 2);
        assert_eq!(s.runs[0].selected_accuracy, 0.6);
        assert_eq!(s.runs[0].final_accuracy, 0.8);
    }

    #[test]
    fn summary_without_validation_uses_last_round() {
        let rows = vec![row("f", 0, 0, 1, "unseen", 0.7), row("f", 0, 0, 2, "unseen", 0.6)];
        assert_eq!(summarize(&rows).runs[0].best_round, 2);
    }

    #[test]
    fn average_is_mean_of_cells() {
        let mut rows = Vec::new();
        for (seed, a, b) in [(0, 0.5, 0.9), (1, 0.7, 1.0), (2, 0.6, 0.8)] {
            rows.push(row("lsi", seed, 0, 1, "unseen", a));
            rows.push(row("lsi", seed, 3, 1, "unseen", b));
        }
        let s = summarize(&rows);
        let m = s.method("lsi").unwrap();
        assert!((m.domains[0].accuracy.mean - 0.6).abs() < 1e-12);
        assert!((m.domains[0].accuracy.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.average.mean - (0.6 + 0.9) / 2.0).abs() < 1e-12);
        assert_eq!(m.average.n, 3);
        assert!(render_summary(&s).contains("75.00"));
    }

    #[test]
    fn sweep_grid_sorted_descending() {
        assert_eq!(sweep_values(&[0.1, 10.0, 0.0, 1.0, 0.1]).unwrap(), vec![10.0, 1.0, 0.1, 0.0]);
        assert!(sweep_values(&[]).is_err());
        assert!(sweep_values(&[-1.0]).is_err());
        assert_eq!(sweep_values(&DEFAULT_SWEEP).unwrap(), DEFAULT_SWEEP.to_vec());
    }

    #[test]
    fn ablation_grid_order() {
        let v = ablation_variants(&PipelineConfig::default());
        let toggles: Vec<(bool, bool)> = v.iter().map(|(_, _, p)| (p.round.use_di, p.round.use_importance)).collect();
        assert_eq!(toggles, vec![(false, false), (true, false), (false, true), (true, true)]);
        assert_eq!(v[0].0, "di-no_imp-no");
    }

    #[test]
    fn pca_on_a_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let (proj, ev) = pca_2d(&x).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-9 && ev[1].abs() < 1e-9);
        // distances along the line are preserved
        let d = proj[9][0] - proj[0][0];
        assert!((d.abs() - 9.0 * 5f64.sqrt()).abs() < 1e-9);
        assert!(pca_2d(&x[..1]).is_err());
    }

    #[test]
    fn pca_variance_shares() {
        // independent axes with variances 4 and 1
        let x = vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let (_, ev) = pca_2d(&x).unwrap();
        assert!((ev[0] - 0.8).abs() < 1e-12 && (ev[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn table_csv_layout() {
        let rows = vec![TableRow {
            key: "No,No".into(),
            domains: vec![(0, 0.5), (3, 1.0)],
            average: MeanStd::of(&[0.75]),
        }];
        assert_eq!(
            table_to_csv("use_di,use_importance", &rows),
            "use_di,use_importance,unseen_0,unseen_3,avg,avg_std\nNo,No,0.500000,1.000000,0.750000,0.000000\n"
        );
    }
}
