use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use gridcrf::config::RunConfig;
use gridcrf::workflow;
use gridcrf::CrfError;

#[derive(Parser)]
#[command(name = "gridcrf", version, about = "Grid CRFs with CNN unaries, trained by sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic train/test dataset.
    Gen(Common),
    /// Cross-entropy pretraining of the unary network.
    Pretrain(Common),
    /// Sampling-based likelihood training of the CRF.
    Train(TrainArgs),
    /// Max-marginal inference; writes one label map per image.
    Infer(Common),
    /// Foreground accuracy of the network alone and with the CRF.
    Eval(Common),
    /// Exact summary of a tiny instance given as JSON.
    Oracle {
        /// Instance file.
        instance: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations (pretraining or CRF training).
    #[arg(long)]
    iters: Option<usize>,
    /// Initial step size (pretraining or network part of CRF training).
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory. For `gen` this is the dataset root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root for gen/pretrain/train; a single split for infer/eval.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// cd1, cd2, cd5 or pcd.
    #[arg(long)]
    variant: Option<String>,
    /// Train only the pairwise tables.
    #[arg(long, conflicts_with = "joint")]
    separate: bool,
    /// Train tables and network together.
    #[arg(long)]
    joint: bool,
    #[arg(long)]
    table_rate: Option<f64>,
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(b) = common.burn_in {
        config.burn_in = b;
    }
    if let Some(s) = common.samples {
        config.samples = s;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(c) = &common.checkpoint {
        config.checkpoint = c.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let mut config = load_config(&common)?;
            if let Some(root) = common.out.or(common.data) {
                config.data_dir = root;
            }
            let (train, test) = workflow::command_gen(&config)?;
            println!("wrote {train} training and {test} test samples to {}", config.data_dir.display());
        }
        Command::Pretrain(common) => {
            let mut config = load_config(&common)?;
            if let Some(root) = common.data {
                config.data_dir = root;
            }
            if let Some(m) = common.iters {
                config.pretrain_iters = m;
            }
            if let Some(r) = common.rate {
                config.pretrain_rate = r;
            }
            let losses = workflow::command_pretrain(&config)?;
            match losses.last() {
                Some(loss) => println!("pretrained {} iterations, last loss {loss:.6}", losses.len()),
                None => println!("pretrained 0 iterations"),
            }
            println!("checkpoint {}", config.checkpoint.display());
        }
        Command::Train(args) => {
            let mut config = load_config(&args.common)?;
            if let Some(root) = args.common.data {
                config.data_dir = root;
            }
            if let Some(m) = args.common.iters {
                config.iterations = m;
            }
            if let Some(r) = args.common.rate {
                config.base_rate = r;
            }
            if let Some(r) = args.table_rate {
                config.table_rate = r;
            }
            if let Some(v) = args.variant {
                config.variant = v;
            }
            if args.separate {
                config.separate = true;
            }
            if args.joint {
                config.separate = false;
            }
            let out = workflow::command_train(&config)?;
            println!("checkpoint {}", out.display());
        }
        Command::Infer(common) => {
            let config = load_config(&common)?;
            let data = common.data.unwrap_or_else(|| workflow::test_dir(&config.data_dir));
            let maps = workflow::command_infer(&config, &data)?;
            println!("wrote {} label maps to {}", maps.len(), config.out_dir.display());
        }
        Command::Eval(common) => {
            let config = load_config(&common)?;
            let data = common.data.unwrap_or_else(|| workflow::test_dir(&config.data_dir));
            println!("{:<10} {:>9} {:>9} {:>9}", "method", "accuracy", "correct", "total");
            for row in workflow::command_eval(&config, &data)? {
                let acc = row.accuracy.map_or("undefined".to_string(), |a| format!("{:.2}%", 100.0 * a));
                println!("{:<10} {:>9} {:>9} {:>9}", row.method, acc, row.correct, row.total);
            }
        }
        Command::Oracle { instance } => {
            let text = std::fs::read_to_string(&instance).with_context(|| format!("reading {}", instance.display()))?;
            println!("{}", workflow::oracle_report(&text)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<CrfError>())
                .map_or("error", CrfError::kind);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {message}");
            ExitCode::FAILURE
        }
    }
}
