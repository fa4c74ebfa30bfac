//! `widen`: merge, validate and analyze safetensors checkpoints.
//!
//! Exit codes: 0 success, 1 checkpoints not homologous (`validate`),
//! 2 configuration or usage error, 3 checkpoint error, 4 numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use widen_core::analysis::{analyze, write_analysis, AnalysisConfig, ScoreComponent, TierScope};
use widen_core::checkpoint::{validate_homologous, CheckpointHandle, DtypePolicy};
use widen_core::engine::{run_grid, run_merge, MergeRecipe, Method, RecipeDoc, RecipeOverrides, Threads};
use widen_core::widen::Variant;
use widen_core::{Error, ErrorKind};

const THREADS_ENV: &str = "WIDEN_THREADS";

#[derive(Parser)]
#[command(name = "widen", version, about = "Merge homologous checkpoints", propagate_version = true)]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one merge described by a recipe.
    Merge(MergeArgs),
    /// Check that checkpoints share tensor names and shapes.
    Validate(ValidateArgs),
    /// Compare importance scores of two variants and summarize deltas.
    Analyze(AnalyzeArgs),
    /// Run every combination of list-valued recipe parameters.
    Grid(MergeArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct MergeArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RecipeArgs {
    /// Recipe JSON file; flags below override its values.
    #[arg(long)]
    recipe: PathBuf,
    /// widen, average, task_arithmetic, slerp, model_stock, ties, breadcrumbs,
    /// dare_task_arithmetic or magnitude_prune_task_arithmetic.
    #[arg(long)]
    method: Option<Method>,
    /// Crucial-column threshold multiple; negative marks every column crucial.
    #[arg(long)]
    t: Option<f64>,
    /// Score given to crucial columns.
    #[arg(long)]
    s: Option<f64>,
    /// Task-vector scaling.
    #[arg(long)]
    lambda: Option<f64>,
    /// SLERP interpolation factor in [0, 1].
    #[arg(long)]
    phi: Option<f64>,
    /// Fraction of delta entries kept (TIES, Breadcrumbs).
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Fraction of largest-magnitude entries masked (Breadcrumbs).
    #[arg(long)]
    mask_top: Option<f64>,
    /// Drop probability (DARE) or pruned fraction (magnitude pruning).
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Global seed for DARE.
    #[arg(long)]
    seed: Option<u64>,
    /// full, no_wd, no_rank or no_sc.
    #[arg(long)]
    variant: Option<Variant>,
    /// Worker threads, or "auto". Defaults to $WIDEN_THREADS when the recipe leaves it unset.
    #[arg(long)]
    threads: Option<Threads>,
    /// preserve-input, force-fp32 or force-bf16.
    #[arg(long)]
    dtype_policy: Option<DtypePolicy>,
    /// Output checkpoint path.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Reference checkpoint first, then the checkpoints to compare with it.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct AnalyzeArgs {
    #[command(flatten)]
    recipe: RecipeArgs,
    /// Directory for analysis.json and the CSV tables.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Variant whose tiers are the rows of the transition matrix.
    #[arg(long, default_value = "no_sc")]
    from: Variant,
    /// Variant whose tiers are the columns.
    #[arg(long, default_value = "full")]
    to: Variant,
    /// Assign tiers over the whole model or per tensor.
    #[arg(long, default_value = "model")]
    scope: TierScope,
    #[arg(long, default_value = "combined")]
    component: ScoreComponent,
}

enum Failure {
    Usage(String),
    NotHomologous,
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl RecipeArgs {
    fn load(&self) -> Result<RecipeDoc, Failure> {
        let mut doc = RecipeDoc::from_file(&self.recipe)?;
        RecipeOverrides {
            method: self.method,
            t: self.t,
            s: self.s,
            lambda: self.lambda,
            phi: self.phi,
            keep_ratio: self.keep_ratio,
            mask_top: self.mask_top,
            drop_rate: self.drop_rate,
            seed: self.seed,
            variant: self.variant,
            threads: self.threads,
            dtype_policy: self.dtype_policy,
            output: self.output.clone(),
        }
        .apply(&mut doc);
        if self.threads.is_none() && doc.threads == Threads::Auto {
            if let Ok(value) = std::env::var(THREADS_ENV) {
                doc.threads = value
                    .parse()
                    .map_err(|e| Failure::Usage(format!("{THREADS_ENV}: {e}")))?;
            }
        }
        Ok(doc)
    }
}

fn print_json(value: &impl serde::Serialize, file: Option<&PathBuf>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    if let Some(path) = file {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let progress = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Merge(args) => {
            let recipe = MergeRecipe::from_doc(&args.recipe.load()?)?;
            progress(format!(
                "merging {} model(s) into {} with {}",
                recipe.models.len(),
                recipe.output.display(),
                recipe.method
            ));
            let report = run_merge(&recipe)?;
            progress(format!(
                "wrote {} tensors in {:.2}s",
                report.tensors.len(),
                report.wall_time_secs
            ));
            print_json(&report, args.report.as_ref())
        }
        Command::Grid(args) => {
            let doc = args.recipe.load()?;
            let (manifest, failure) = run_grid(&doc)?;
            progress(format!(
                "{} grid point(s) completed, manifest at {}",
                manifest.entries.iter().filter(|e| e.error.is_none()).count(),
                manifest.manifest_path.display()
            ));
            print_json(&manifest, args.report.as_ref())?;
            failure.map_or(Ok(()), |e| Err(e.into()))
        }
        Command::Validate(args) => {
            if args.paths.len() < 2 {
                return Err(Failure::Usage("validate needs at least two checkpoints".into()));
            }
            let handles = args
                .paths
                .iter()
                .map(CheckpointHandle::open)
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&CheckpointHandle> = handles.iter().collect();
            let report = validate_homologous(&refs);
            print_json(&report, None)?;
            if report.homologous {
                Ok(())
            } else {
                progress(report.summary());
                Err(Failure::NotHomologous)
            }
        }
        Command::Analyze(args) => {
            let recipe = MergeRecipe::from_doc(&args.recipe.load()?)?;
            let config = AnalysisConfig {
                bins: args.bins,
                from: args.from,
                to: args.to,
                scope: args.scope,
                component: args.component,
            };
            progress(format!("analyzing {} against {}", config.from, config.to));
            let report = analyze(&recipe, &config)?;
            let written = write_analysis(&report, &args.out_dir)?;
            for path in &written {
                progress(format!("wrote {}", path.display()));
            }
            print_json(&report, None)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotHomologous) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Checkpoint => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
