use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flexrel_core::experiments::{emit_curves, run_sweep, CurveKind, ExperimentConfig, Overrides, ResultTable};
use flexrel_core::splitsim::{protocol_breakdowns, write_breakdown_csv};
use flexrel_core::{run_protocol, Checkpoint, Result, Technique, Workload};

/// Structured pruning by magnitude, relevance, or both, with a split-learning
/// cost model.
#[derive(Parser, Debug)]
#[command(name = "flexrel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one protocol (dense, score, prune, retrain) and write its artifacts.
    Train(Common),
    /// Run every configured cell and write results.csv and targets.csv.
    Sweep(Common),
    /// Turn a sweep directory into curve data files.
    Emit {
        /// accuracy_vs_rho, time_vs_target, accuracy_vs_delta, or all
        kind: String,
        /// Sweep output directory holding results.csv and targets.csv.
        #[arg(long, default_value = "results")]
        results: PathBuf,
        /// Destination directory; defaults to <results>/curves.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    technique: Option<Technique>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// `synthetic` or a directory with the four MNIST-style IDX files.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    cut_index: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            out_dir: self.out.clone(),
            seed: self.seed,
            technique: self.technique,
            rho: self.rho,
            delta: self.delta,
            dataset: self.dataset.clone(),
            cut_index: self.cut_index,
        })?;
        Ok(cfg)
    }
}

/// Single run using the first entry of every sweep list.
fn train(cfg: &ExperimentConfig) -> Result<()> {
    let train = flexrel_core::TrainConfig {
        seed: cfg.seeds[0],
        technique: cfg.techniques[0],
        rho: cfg.rhos[0],
        delta: cfg.deltas.first().copied().unwrap_or(cfg.train.delta),
        ..cfg.train.clone()
    };
    let data = cfg.load_dataset()?;
    let net = cfg.build_network(&data, train.seed)?;
    let outcome = run_protocol(net, &data, &train)?;

    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    outcome.log.write_csv(BufWriter::new(File::create(out.join("metrics.csv"))?))?;
    outcome.scores.write_csv(BufWriter::new(File::create(out.join("scores.csv"))?))?;
    let workload = Workload::new(data.train.len(), train.batch_size, train.scoring_batch);
    let breakdowns = protocol_breakdowns(
        &outcome.dense,
        &outcome.network,
        train.epochs_dense,
        train.epochs_pruned,
        train.technique,
        &cfg.split,
        &workload,
    )?;
    write_breakdown_csv(&breakdowns, BufWriter::new(File::create(out.join("breakdown.csv"))?))?;
    Checkpoint {
        network: outcome.network.clone(),
        epoch: train.total_epochs() as u64,
        optimizer: outcome.optimizer.clone(),
    }
    .save(out.join("model.fxpr"))?;

    println!(
        "{} rho={} delta={} seed={}: pruned {:.4} of prunable parameters, final accuracy {:.4}",
        train.technique,
        train.rho,
        train.delta,
        train.seed,
        outcome.plan.achieved_fraction,
        outcome.log.final_accuracy().unwrap_or(f64::NAN)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<bool> {
    let table = run_sweep(cfg)?;
    let failed = table.failed();
    println!(
        "{} cells, {} failed; results in {}",
        table.rows.len(),
        failed,
        cfg.out_dir.display()
    );
    for r in table.rows.iter().filter(|r| !r.is_ok()) {
        eprintln!("failed {}: {:?}", r.key.file_stem(), r.status);
    }
    Ok(failed == 0)
}

fn emit(kind: &str, results: &Path, out: Option<&Path>) -> Result<()> {
    let kinds = if kind == "all" {
        CurveKind::ALL.to_vec()
    } else {
        vec![kind.parse()?]
    };
    let table = ResultTable::load(results)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| results.join("curves"));
    for k in kinds {
        for path in emit_curves(&table, k, &dir)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => train(&c.resolve()?).map(|_| true),
        Command::Sweep(c) => sweep(&c.resolve()?),
        Command::Emit { kind, results, out } => emit(&kind, &results, out.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
