use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use csrfcn::detector::{load_checkpoint, ReportNodes};
use csrfcn::evaluator::{evaluate, EvalConfig, DEFAULT_PROPOSAL_COUNTS};
use csrfcn::pipeline::{labelled_ancestors, run_demo, write_run};
use csrfcn::synthworld::{generate_dataset, load_dataset, save_dataset, WorldConfig};
use csrfcn::taxonomy::Taxonomy;
use csrfcn::trainer::{train, TrainConfig};

const DEFAULT_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "csrfcn", version, about = "Cross-supervised detection on a synthetic shape world")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset and write its manifest, rasters and taxonomy.
    GenData(GenDataArgs),
    /// Train a model and write per-epoch checkpoints and log.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the CSV report.
    Eval(EvalArgs),
    /// Validate a taxonomy file and print its size.
    TaxonomyCheck {
        /// `child<TAB>parent` file.
        file: PathBuf,
    },
    /// gen-data, train and eval with small defaults.
    Demo {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "demo_out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenDataArgs {
    /// World description as JSON; the built-in world when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the world config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// key=value training config; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the training config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config whose detector settings were used for the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PROPOSAL_COUNTS)]
    proposal_counts: Vec<usize>,
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    })
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut world = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<WorldConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => WorldConfig::default(),
    };
    if let Some(seed) = args.seed {
        world.seed = seed;
    }
    let taxonomy = world.validate()?;
    let dataset = generate_dataset(&world)?;
    let manifest = save_dataset(&dataset, &args.out)?;
    std::fs::write(args.out.join("taxonomy.tree"), taxonomy.to_text())?;
    println!(
        "wrote {} training and {} evaluation images to {}",
        dataset.train.len(),
        dataset.eval.len(),
        manifest.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut config = train_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let taxonomy = Taxonomy::from_file(&args.taxonomy)?;
    let dataset = load_dataset(&args.data)?;
    log::info!("training on {} images with {}", dataset.train.len(), taxonomy);
    let outcome = train(&dataset, &taxonomy, &config)?;
    let art = write_run(&args.out, &taxonomy, &outcome, None)?;
    let last = outcome.log.last().map(|e| e.loss.l_cross).unwrap_or(f64::NAN);
    println!(
        "{} iterations, final l_cross {last:.4}; {} checkpoints in {}",
        outcome.stats.iterations,
        art.checkpoints.len(),
        args.out.join("checkpoints").display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let config = train_config(args.config.as_deref())?;
    let taxonomy = Taxonomy::from_file(&args.taxonomy)?;
    let dataset = load_dataset(&args.data)?;
    let params = load_checkpoint(&args.ckpt, &taxonomy)?;
    let mut categories: Vec<String> = taxonomy.leaf_names().iter().map(|s| s.to_string()).collect();
    categories.extend(labelled_ancestors(&dataset, &taxonomy));
    let eval_config = EvalConfig {
        proposal_counts: args.proposal_counts.clone(),
        report: ReportNodes::AllNodes,
        categories: Some(categories),
        ..EvalConfig::default()
    };
    let report = evaluate(
        &params,
        &taxonomy,
        &taxonomy,
        &dataset.eval,
        &dataset.category_splits(&taxonomy),
        &config.detector,
        &eval_config,
    )?;
    report.write(&args.out)?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::TaxonomyCheck { file } => {
            let t = Taxonomy::from_file(&file)?;
            println!("{t}");
            Ok(())
        }
        Command::Demo { seed, out } => {
            std::fs::create_dir_all(&out)?;
            let result = run_demo(seed, &out)?;
            print!("{}", result.report.summary_csv());
            print!("{}", result.report.proposal_csv());
            println!("artifacts in {}", out.display());
            Ok(())
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CSRF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("CSRF_THREADS must be a non-negative integer, got `{v}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
    let outcome = init_threads().and_then(|_| run(cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
