use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use incseg::experiment::{self, ExperimentConfig, Method, Overrides, OUTPUT_ROOT_ENV};
use incseg::model::ConnectionPoint;
use incseg::routing::Arbitration;

/// Class-incremental segmentation experiments: frozen backbone, per-step
/// parallel units, and the fine-tuning / joint-training references.
#[derive(Parser, Debug)]
#[command(name = "incseg", version, about)]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model on the base classes and start a run.
    TrainBase(ConfigArgs),
    /// Run one incremental step of a method.
    TrainIncremental {
        #[arg(long)]
        run_id: String,
        #[arg(long)]
        step: usize,
        #[arg(long, default_value = "parallel")]
        method: Method,
    },
    /// Run every remaining step; starts a new run when given a config.
    RunProtocol {
        /// Resume an existing run.
        #[arg(long, conflicts_with = "config")]
        run_id: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Methods to run (repeatable). Defaults to parallel, finetune and joint.
        #[arg(long = "method")]
        methods: Vec<Method>,
    },
    /// Sweep the routing threshold on the held-out split.
    SweepTau {
        #[arg(long)]
        run_id: String,
        /// Comma-separated, strictly increasing thresholds.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Record this threshold as the routing default instead of the swept one.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Compare attaching the incremental unit at P, I and D.
    AblateConnection(ConfigArgs),
    /// Tables, trajectory plots and sample masks for a run.
    Report {
        #[arg(long)]
        run_id: String,
        /// Skip exporting routed masks.
        #[arg(long)]
        no_masks: bool,
    },
    /// Write the synthetic splits as image/label directories.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment config; the built-in synthetic benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run id to use instead of the config's.
    #[arg(long)]
    set_run_id: Option<String>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Class schedule, `B-N` or `B-NxS` (e.g. 6-1).
    #[arg(long)]
    protocol: Option<String>,
    /// Backbone branch the incremental units mirror: P, I or D.
    #[arg(long)]
    connection_point: Option<ConnectionPoint>,
    #[arg(long)]
    base_epochs: Option<usize>,
    #[arg(long)]
    incremental_epochs: Option<usize>,
    /// Routing threshold used until a sweep records one.
    #[arg(long)]
    tau: Option<f64>,
    /// max_confidence or latest_step_first.
    #[arg(long)]
    arbitration: Option<Arbitration>,
}

impl ConfigArgs {
    fn load(&self) -> incseg::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::benchmark(),
        };
        config.apply(&Overrides {
            run_id: self.set_run_id.clone(),
            seed: self.seed,
            protocol: self.protocol.clone(),
            connection_point: self.connection_point,
            base_epochs: self.base_epochs,
            incremental_epochs: self.incremental_epochs,
            tau: self.tau,
            arbitration: self.arbitration,
        })?;
        Ok(config)
    }
}

fn print_metrics(label: &str, m: &incseg::metrics::MetricsReport) {
    let novel = m.novel_miou.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into());
    println!(
        "{label}: overall {:.2}  base {:.2}  novel {novel}",
        m.overall_miou * 100.0,
        m.base_miou * 100.0
    );
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_path();
    match cli.command {
        Command::TrainBase(args) => {
            let config = args.load()?;
            let (id, m) = experiment::cmd_train_base(root, &config)?;
            println!("run {id}");
            print_metrics("step 0", &m);
        }
        Command::TrainIncremental { run_id, step, method } => {
            let m = experiment::cmd_train_incremental(root, &run_id, step, method)?;
            print_metrics(&format!("{method} step {step}"), &m);
        }
        Command::RunProtocol { run_id, config, methods } => {
            let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods };
            let id = match run_id {
                Some(id) => id,
                None => {
                    let config = config.load()?;
                    if run_exists(root, &config.run.id) {
                        config.run.id
                    } else {
                        let (id, m) = experiment::cmd_train_base(root, &config)?;
                        print_metrics("step 0", &m);
                        id
                    }
                }
            };
            for (method, m) in experiment::cmd_run_protocol(root, &id, &methods)? {
                print_metrics(&format!("{method} step {}", m.step_index), &m);
            }
            println!("run {id}");
        }
        Command::SweepTau { run_id, grid, tau } => {
            let s = experiment::cmd_sweep_tau(root, &run_id, grid.as_deref(), tau)?;
            print!("{}", s.table);
            println!("routing default tau = {} ({:?})", s.chosen_tau, s.source);
        }
        Command::AblateConnection(args) => {
            let config = args.load()?;
            let r = experiment::cmd_ablate_connection(root, &config)?;
            print!("{}", r.table);
        }
        Command::Report { run_id, no_masks } => {
            let r = experiment::cmd_report(root, &run_id, !no_masks)?;
            print!("{}", r.table);
            if !r.masks.is_empty() {
                println!("{} mask images written", r.masks.len());
            }
        }
        Command::GenerateData { config, out } => {
            let config = config.load()?;
            let (n_train, n_test) =
                experiment::cmd_generate_data(&config, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {n_train} training and {n_test} held-out scenes to {}", out.display());
        }
    }
    Ok(())
}

fn run_exists(root: &Path, id: &str) -> bool {
    experiment::RunDir::new(root, id).map(|r| r.exists()).unwrap_or(false)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<incseg::Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
