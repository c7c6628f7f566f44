use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use multicsr_cli::{run_all, run_stage, run_sweep, Overrides, PipelineConfig, Stage, SweepKind};

#[derive(Parser)]
#[command(
    name = "multicsr",
    version,
    about = "Three-stage corpus refinement for contrastive sentence embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Bound on per-stage worker parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Force direct (logit-less) generation: the two-stage pipeline.
    #[arg(long)]
    direct: bool,
    /// Pipe generated triplets straight into scoring.
    #[arg(long)]
    fused: bool,
    /// Smoothing coefficient for contrastive generation.
    #[arg(long)]
    omega: Option<f64>,
    /// Curation threshold on the entailment score.
    #[arg(long)]
    alpha: Option<f64>,
    /// Curation threshold on the contradiction score.
    #[arg(long)]
    beta: Option<f64>,
    /// Curation margin between the two scores.
    #[arg(long)]
    gamma: Option<f64>,
    /// Mask indicator threshold.
    #[arg(long)]
    sigma: Option<f64>,
    /// InfoNCE temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Training batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    /// Demonstration count L.
    #[arg(long)]
    demos: Option<usize>,
    /// Demonstration similarity floor.
    #[arg(long)]
    demo_lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKindArg {
    Policy,
    Omega,
    Sigma,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: generate entailment/contradiction hypotheses per premise.
    Generate(CommonArgs),
    /// Stage 2a: score each triplet's pairs with the LLM.
    Score(CommonArgs),
    /// Stage 2b: keep triplets passing the alpha/beta/gamma predicate.
    Curate(CommonArgs),
    /// Stage 3: train the encoder with masked in-batch contrastive loss.
    Train(CommonArgs),
    /// Evaluate a checkpoint on an STS file (and optional retrieval pairs).
    Eval(CommonArgs),
    /// Sweep harnesses over curation policies, omega, or sigma.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "policy")]
        kind: SweepKindArg,
    },
    /// Run generate, score, curate, train, and eval in order.
    RunAll {
        #[command(flatten)]
        common: CommonArgs,
        /// Skip stages whose outputs already exist and validate.
        #[arg(long)]
        resume: bool,
    },
}

fn overrides(args: &CommonArgs) -> Overrides {
    Overrides {
        workers: args.workers,
        seed: args.seed,
        direct: args.direct,
        fused: args.fused,
        omega: args.omega,
        alpha: args.alpha,
        beta: args.beta,
        gamma: args.gamma,
        sigma: args.sigma,
        tau: args.tau,
        batch: args.batch,
        epochs: args.epochs,
        lr: args.lr,
        demos: args.demos,
        demo_lambda: args.demo_lambda,
    }
}

fn load(args: &CommonArgs) -> Result<PipelineConfig, multicsr_cli::StageError> {
    let mut config = PipelineConfig::load(&args.config)?;
    config.apply(&overrides(args));
    Ok(config)
}

fn dispatch(command: Command) -> Result<(), multicsr_cli::StageError> {
    match command {
        Command::Generate(args) => print_one(run_stage(Stage::Generate, &load(&args)?)?),
        Command::Score(args) => print_one(run_stage(Stage::Score, &load(&args)?)?),
        Command::Curate(args) => print_one(run_stage(Stage::Curate, &load(&args)?)?),
        Command::Train(args) => print_one(run_stage(Stage::Train, &load(&args)?)?),
        Command::Eval(args) => print_one(run_stage(Stage::Eval, &load(&args)?)?),
        Command::Sweep { common, kind } => {
            let kind = match kind {
                SweepKindArg::Policy => SweepKind::Policy,
                SweepKindArg::Omega => SweepKind::Omega,
                SweepKindArg::Sigma => SweepKind::Sigma,
            };
            print_one(run_sweep(kind, &load(&common)?)?)
        }
        Command::RunAll { common, resume } => {
            for summary in run_all(&load(&common)?, resume)? {
                print_one(summary);
            }
        }
    }
    Ok(())
}

fn print_one(summary: multicsr_cli::StageSummary) {
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("multicsr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
