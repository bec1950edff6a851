use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use l2smerge_core::metrics::{read_responses, CorpusAccumulator, Matching, MetricsReport};
use l2smerge_core::recipe::{diff_checkpoints, inspect_checkpoint, run_merge, MergeRecipe, Scale, SweepSpec};
use l2smerge_core::{load_checkpoint, Error};

/// Merge quick- and slow-thinking checkpoints and measure long-to-short behavior.
#[derive(Parser)]
#[command(name = "l2smerge", version, about)]
struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true, env = "L2SMERGE_THREADS")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a merge recipe.
    Merge(MergeArgs),
    /// List the tensors of a checkpoint.
    Inspect(InspectArgs),
    /// Compare two checkpoints with the same tensor manifest.
    Diff(DiffArgs),
    /// Length, reflection and accuracy statistics for a response corpus.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    recipe: PathBuf,
    /// Output directory, overriding the recipe's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid over one parameter, e.g. `alpha=0.5:0.8:0.05`; one output per point.
    #[arg(long)]
    sweep: Option<SweepSpec>,
    /// Model scale used for defaults (1.5b, 7b, 14b, 32b) instead of detection.
    #[arg(long)]
    scale: Option<Scale>,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Also report value statistics for this tensor.
    #[arg(long)]
    tensor: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write a markdown summary here.
    #[arg(long)]
    markdown: Option<PathBuf>,
    /// Match keywords on word boundaries only.
    #[arg(long)]
    strict_boundaries: bool,
}

fn merge(args: MergeArgs) -> Result<()> {
    let mut draft = MergeRecipe::load(&args.recipe)?;
    if let Some(out) = args.out {
        draft.output = Some(out);
    }
    if let Some(scale) = args.scale {
        draft.scale = Some(scale);
    }
    let recipes = match &args.sweep {
        Some(spec) => spec.expand(&draft)?,
        None => vec![draft.finalize()?],
    };
    for recipe in &recipes {
        let m = run_merge(recipe)?;
        println!(
            "{}  {}  {:.2}s",
            m.output.path.display(),
            m.output.content_fingerprint,
            m.wall_time_secs
        );
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let report = inspect_checkpoint(&args.checkpoint, args.tensor.as_deref())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("{} parameters (scale {})", report.params, report.detected_scale);
    for t in &report.tensors {
        println!("{:<6} {:<20} {}", t.dtype, format!("{:?}", t.shape), t.name);
    }
    if let Some(s) = &report.summary {
        println!(
            "\n{}: min {:.6} max {:.6} mean {:.6} std {:.6} mean|x| {:.6} non-finite {}",
            s.name, s.min, s.max, s.mean, s.std, s.mean_abs, s.non_finite
        );
    }
    Ok(())
}

fn diff(args: DiffArgs) -> Result<()> {
    let a = load_checkpoint(&args.a)?;
    let b = load_checkpoint(&args.b)?;
    let report = diff_checkpoints(&a, &b, args.top)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!(
        "mean |a-b| {:.6e}  max {:.6e}  tensors with mean shift > {}: {}/{}",
        report.global_mean_abs,
        report.global_max_abs,
        report.shift_threshold,
        report.tensors_above_threshold,
        report.tensors.len()
    );
    for t in &report.top {
        println!("{:.6e}  {:.6e}  {}", t.mean_abs, t.max_abs, t.name);
    }
    println!("\n|a-b| histogram:");
    for bin in &report.histogram {
        println!("[{:e}, {:e})  {}", bin.lower, bin.upper, bin.count);
    }
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let matching = if args.strict_boundaries {
        Matching::WordBoundary
    } else {
        Matching::Substring
    };
    let load = |path: &PathBuf| -> Result<_> {
        let mut acc = CorpusAccumulator::new(matching);
        read_responses(path, &mut acc)?;
        Ok(acc.finish()?)
    };
    let candidate = load(&args.responses)?;
    let baseline = args.baseline.as_ref().map(load).transpose()?;
    let report = MetricsReport::new(candidate, baseline)?;
    let markdown = report.to_markdown();
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.markdown {
        fs::write(path, &markdown).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{markdown}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return e.exit_code() as u8;
    }
    if err.chain().any(|c| c.is::<std::io::Error>()) {
        return 3;
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, Error::validation("threads", "must be at least 1"));
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker threads")?;
    pool.install(|| match cli.command {
        Command::Merge(a) => merge(a),
        Command::Inspect(a) => inspect(a),
        Command::Diff(a) => diff(a),
        Command::Metrics(a) => metrics(a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
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
