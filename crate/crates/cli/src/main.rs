//! `deephoyer` experiment runner.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 invalid
//! configuration, 3 I/O error (including a missing checkpoint or dataset).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deephoyer::descent::{hoyer_square_descent, DescentConfig};
use deephoyer::gradcheck::{self, Fault, GradcheckOptions};
use deephoyer::pipeline::{DataSource, Experiment, ExperimentConfig, Stage, StageResult};
use deephoyer::Error;

#[derive(Parser)]
#[command(name = "deephoyer", version, about = "Hoyer-regularized sparsification of LeNet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model (or load `pretrain.checkpoint`).
    Pretrain(StageArgs),
    /// Train with the sparsity-inducing objective.
    Sparsify(StageArgs),
    /// Threshold-prune a sparsified checkpoint.
    Prune(StageArgs),
    /// Masked finetuning of a pruned checkpoint.
    Finetune(StageArgs),
    /// Run all four stages.
    Pipeline(ExperimentArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Gradient descent on Hoyer-Square alone; writes the trajectory CSV.
    DescentDemo(DescentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's, else `runs/<config name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with the MNIST IDX files; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Checkpoint to start from (defaults to the previous stage's
    /// checkpoint in the output directory).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the analytic gradient of one item (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct DescentArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    /// Record every N-th step.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "runs/descent")]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(args) => run_stage(Stage::Pretrain, args),
        Command::Sparsify(args) => run_stage(Stage::Sparsify, args),
        Command::Prune(args) => run_stage(Stage::Prune, args),
        Command::Finetune(args) => run_stage(Stage::Finetune, args),
        Command::Pipeline(args) => run_pipeline(args),
        Command::Gradcheck(args) => return run_gradcheck(args),
        Command::DescentDemo(args) => run_descent(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn experiment(args: &ExperimentArgs) -> deephoyer::Result<Experiment> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.data {
        config.data = match config.data {
            DataSource::Mnist { train_limit, .. } => DataSource::Mnist {
                dir: dir.clone(),
                train_limit,
            },
            DataSource::Synthetic { .. } => DataSource::Mnist {
                dir: dir.clone(),
                train_limit: None,
            },
        };
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| {
            let stem = args.config.file_stem().unwrap_or_default();
            Path::new("runs").join(stem)
        });
    config.output_dir = Some(out);
    let mut experiment = Experiment::new(config)?;
    experiment.verbose = !args.quiet;
    Ok(experiment)
}

fn output_dir(experiment: &Experiment) -> &Path {
    experiment.output_dir.as_deref().expect("set by experiment()")
}

fn summarize(result: &StageResult) {
    let r = &result.report;
    println!(
        "{}: accuracy {:.4}  nonzero {}/{} ({:.2}%)  structure {}  flops {} ({:.2}%)",
        r.stage,
        r.test_accuracy.unwrap_or(f64::NAN),
        r.total_nonzero,
        r.total_weights,
        r.nonzero_percent,
        r.structure_string(),
        r.flops,
        r.flops_percent
    );
}

fn run_stage(stage: Stage, args: StageArgs) -> deephoyer::Result<()> {
    let exp = experiment(&args.experiment)?;
    let previous = match stage {
        Stage::Pretrain => None,
        Stage::Sparsify => Some(Stage::Pretrain),
        Stage::Prune => Some(Stage::Sparsify),
        Stage::Finetune => Some(Stage::Prune),
    };
    let result = match previous {
        None => exp.pretrain()?,
        Some(prev) => {
            let input = args.input.clone().unwrap_or_else(|| prev.checkpoint_path(output_dir(&exp)));
            let (net, meta) = exp.load_stage_input(&input)?;
            let baseline = meta.baseline_accuracy.or(meta.accuracy);
            match stage {
                Stage::Sparsify => exp.sparsify(net, baseline)?,
                Stage::Prune => exp.prune(net, baseline)?,
                Stage::Finetune => exp.finetune(net, baseline)?,
                Stage::Pretrain => unreachable!(),
            }
        }
    };
    summarize(&result);
    Ok(())
}

fn run_pipeline(args: ExperimentArgs) -> deephoyer::Result<()> {
    let exp = experiment(&args)?;
    let dir = output_dir(&exp).to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_copy = dir.join("config.json");
    fs::write(&config_copy, exp.config.to_json()? + "\n").map_err(|e| Error::io(&config_copy, e))?;
    for result in exp.run()? {
        summarize(&result);
    }
    println!("report: {}", dir.join("report.json").display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> ExitCode {
    let options = GradcheckOptions {
        probes: args.probes,
        seed: args.seed,
        fault: args.inject_fault.map(|item| Fault { item }),
    };
    let report = match gradcheck::run(&options) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(exit_code(&err));
        }
    };
    for item in &report.items {
        println!(
            "{:<22} probes {:>4}  max rel. error {:.3e}  (tol {:.0e})  {}",
            item.name,
            item.probes,
            item.max_rel_error,
            item.tolerance,
            if item.passed { "ok" } else { "FAILED" }
        );
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        let names: Vec<&str> = report.failures().map(|i| i.name.as_str()).collect();
        eprintln!("gradient check failed: {}", names.join(", "));
        ExitCode::from(1)
    }
}

fn run_descent(args: DescentArgs) -> deephoyer::Result<()> {
    let config = DescentConfig {
        dim: args.dim,
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        stride: args.stride,
    };
    let trace = hoyer_square_descent(&config)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("trajectory.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    trace.write_csv(std::io::BufWriter::new(file))?;
    println!(
        "{} of {} coordinates below 1e-2; largest coordinate kept {:.1}% of its magnitude",
        trace.count_below(1e-2),
        config.dim,
        100.0 * trace.dominant_retention()
    );
    println!("trajectory: {}", path.display());
    Ok(())
}
