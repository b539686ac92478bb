use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fedlsi_core::federation::Method;
use fedlsi_core::report::{self, ExperimentConfig, ProjectVariants, Unseen, DEFAULT_SWEEP};
use fedlsi_core::transport::TransportKind;

#[derive(Parser)]
#[command(name = "fedlsi", version, about = "Federated domain generalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one seed's synthetic domains to <out>/data.csv.
    GenData(Common),
    /// Leave-one-domain-out runs of one method.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "lsi")]
        method: Method,
    },
    /// The 2x2 grid over the invariance loss and importance aggregation.
    Ablation(Common),
    /// Full pipeline over a grid of invariance weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma separated; defaults to 10,1,0.1,0.01,0.001,0.0001.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// PCA projections of real and synthesized latents.
    Project {
        #[command(flatten)]
        common: Common,
        /// Also re-synthesize without the class term.
        #[arg(long)]
        no_clsz: bool,
        /// Also re-synthesize without the batch-norm term.
        #[arg(long)]
        no_bn: bool,
        /// Also re-synthesize without the norm term.
        #[arg(long)]
        no_norm: bool,
        /// All three ablations.
        #[arg(long)]
        ablations: bool,
    },
    /// Rebuild report.json from <out>/metrics.csv.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Domain id to hold out, or "all".
    #[arg(long)]
    unseen: Option<Unseen>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    transport: Option<TransportKind>,
    /// Train clients on a thread pool.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => report::parse_config(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(u) = self.unseen {
            cfg.unseen = u;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = self.transport {
            cfg.transport = t;
        }
        cfg.parallel |= self.parallel;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let path = cfg.out.join("data.csv");
            let data = report::cmd_gen_data(&cfg, cfg.seeds[0], &path)?;
            let n: usize = data.iter().map(|d| d.len()).sum();
            println!("wrote {} domains, {n} examples to {}", data.len(), path.display());
        }
        Command::Run { common, method } => {
            let cfg = common.load()?;
            let out = report::cmd_run(&cfg, method)?;
            print!("{}", report::render_summary(&out.summary));
            println!("outputs in {}", cfg.out.display());
        }
        Command::Ablation(common) => {
            let cfg = common.load()?;
            let out = report::cmd_ablation(&cfg)?;
            print!("{}", report::table_to_csv("use_di,use_importance", &out.table));
        }
        Command::Sweep { common, values } => {
            let cfg = common.load()?;
            let values = if values.is_empty() { DEFAULT_SWEEP.to_vec() } else { values };
            let out = report::cmd_sweep(&cfg, &values)?;
            print!("{}", report::table_to_csv("lambda_di", &out.table));
        }
        Command::Project {
            common,
            no_clsz,
            no_bn,
            no_norm,
            ablations,
        } => {
            let cfg = common.load()?;
            let unseen = match cfg.unseen {
                Unseen::Id(i) => i,
                Unseen::All => bail!("project needs a single --unseen domain id"),
            };
            let variants = if ablations {
                ProjectVariants::all()
            } else {
                ProjectVariants {
                    without_clsz: no_clsz,
                    without_bn: no_bn,
                    without_norm: no_norm,
                }
            };
            for e in report::cmd_project(&cfg, cfg.seeds[0], unseen, variants)? {
                println!(
                    "{:<8} variance explained {:.3}/{:.3}, synthesized probe accuracy {:.3}",
                    e.variant, e.variance_explained[0], e.variance_explained[1], e.synth_probe_accuracy
                );
            }
        }
        Command::Report { out } => {
            let summary = report::cmd_report(&out)?;
            print!("{}", report::render_summary(&summary));
        }
    }
    Ok(())
}
