use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlpp::diagnostics::{DEFAULT_ESS_THRESHOLD, DEFAULT_RHAT_THRESHOLD};
use mlpp::fpca::{DEFAULT_MIN_COMPONENT_SHARE, DEFAULT_VAR_THRESHOLD};
use mlpp::hyperparams::{Scenario, DEFAULT_BOOT_REPS};
use mlpp::partitions::ExpectedVi;
use mlpp::pipeline::{self, FitPaths, ModelOptions};
use mlpp::sampler::{InitMode, SamplerConfig};
use mlpp::simgen::SimDesign;
use mlpp::{Error, Result};

/// Bayesian functional PCA with multilevel partition priors.
///
/// Set MLPP_THREADS to cap the number of worker threads.
#[derive(Parser, Debug)]
#[command(name = "mlpp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic multi-subject, multi-channel datasets with known partitions.
    Simulate(SimulateArgs),
    /// Smooth, extract fPC scores, estimate hyperparameters and run the sampler.
    Fit(FitArgs),
    /// Split R-hat, ESS, trace and density exports for a run directory.
    Diagnose(DiagnoseArgs),
    /// Partition point estimates, credible balls and similarity matrices for a run directory.
    Summarize(SummarizeArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 40)]
    subjects: usize,
    #[arg(long, default_value_t = 50)]
    channels: usize,
    #[arg(long, default_value_t = 150)]
    timepoints: usize,
    /// Signal-to-noise variance ratio; `inf` gives noiseless curves.
    #[arg(long, default_value_t = 6.0)]
    snr: f64,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Subjects in group A (the first ones); default is half.
    #[arg(long)]
    group_a: Option<usize>,
    #[arg(long)]
    cluster_sd: Option<f64>,
    /// Comma-separated 1-based outlier subjects; default is the first two and last two.
    #[arg(long, value_delimiter = ',')]
    outliers: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory, overwriting files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset CSV, one row per curve: subject_id, channel_id, group_code, then one value per time point.
    #[arg(long)]
    data: PathBuf,
    /// One-column CSV of time points.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 10_000)]
    burnin: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sensitivity scenario S1..S6 applied after estimation.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Hyperparameter override `key=value`, repeatable; applied after the scenario.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Load hyperparameters from JSON instead of estimating them.
    #[arg(long)]
    hyperparams: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VAR_THRESHOLD)]
    var_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_COMPONENT_SHARE)]
    min_share: f64,
    /// Retain exactly this many components.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    basis_size: Option<usize>,
    /// Roughness penalty; selected by GCV when absent.
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long)]
    no_smooth: bool,
    #[arg(long, default_value_t = DEFAULT_BOOT_REPS)]
    boot_reps: usize,
    /// `empirical` or `prior`.
    #[arg(long, default_value = "empirical")]
    init: InitMode,
    #[arg(long, default_value_t = 0)]
    audit_every: usize,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from checkpoints already in --out.
    #[arg(long)]
    resume: bool,
    /// Update subject-level labels conditionally on the current recording labels.
    #[arg(long)]
    uncollapsed: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    run_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RHAT_THRESHOLD)]
    rhat_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_ESS_THRESHOLD)]
    ess_threshold: f64,
    #[arg(long, default_value_t = 40)]
    bins: usize,
    /// Defaults to RUN_DIR/diagnostics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    run_dir: PathBuf,
    /// truth.json written by `simulate`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Use the exact posterior expected VI instead of its lower bound.
    #[arg(long)]
    exact_vi: bool,
    /// Defaults to RUN_DIR/summary.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("MLPP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Config(format!("MLPP_THREADS must be a positive integer, got `{v}`"))),
            Ok(n) => Ok(Some(n)),
        },
        Err(_) => Ok(None),
    }
}

fn simulate(args: SimulateArgs, threads: Option<usize>) -> Result<()> {
    let mut design = SimDesign::scaled(args.subjects, args.channels, args.timepoints);
    design.snr = args.snr;
    design.seed = args.seed;
    if let Some(a) = args.group_a {
        design.n_group_a = a;
    }
    if let Some(sd) = args.cluster_sd {
        design.cluster_sd = sd;
    }
    if let Some(o) = args.outliers {
        design.outlier_subjects = o;
    }
    let dirs = pipeline::simulate_to_dir(&design, args.replicates, &args.out, args.force, threads)?;
    println!("wrote {} dataset(s) under {}", dirs.len(), args.out.display());
    Ok(())
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))
        })
        .collect()
}

fn fit(args: FitArgs, threads: Option<usize>) -> Result<()> {
    let opts = ModelOptions {
        smooth: !args.no_smooth,
        basis_size: args.basis_size,
        penalty: args.penalty,
        var_threshold: args.var_threshold,
        min_component_share: args.min_share,
        n_components: args.components,
        boot_reps: args.boot_reps,
        scenario: args.scenario,
        overrides: parse_overrides(&args.set)?,
        sampler: SamplerConfig {
            n_iter: args.iters,
            burn_in: args.burnin,
            thin: args.thin,
            n_chains: args.chains,
            seed: args.seed,
            init_mode: args.init,
            audit_every: args.audit_every,
            checkpoint_every: args.checkpoint_every,
            collapsed_g: !args.uncollapsed,
            likelihood: true,
        },
    };
    let paths = FitPaths {
        data: args.data,
        grid: args.grid,
        hyperparams: args.hyperparams,
        out: args.out,
        force: args.force,
        resume: args.resume,
    };
    let meta = pipeline::fit_to_dir(&paths, &opts, threads)?;
    println!(
        "fitted {} subjects x {} channels, K = {}, {} chain(s) of {} draws into {}",
        meta.n_subjects,
        meta.n_channels,
        meta.k,
        opts.sampler.n_chains,
        meta.draws_per_chain,
        paths.out.display()
    );
    Ok(())
}

fn default_out(run_dir: &Path, out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| run_dir.join(sub))
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let out = default_out(&args.run_dir, args.out, "diagnostics");
    let report = pipeline::diagnose_run(
        &args.run_dir,
        &out,
        args.force,
        args.rhat_threshold,
        args.ess_threshold,
        args.bins,
    )?;
    println!("{:<24} {:>10} {:>12}  flag", "parameter", "rhat", "ess");
    for p in &report.parameters {
        println!(
            "{:<24} {:>10.4} {:>12.1}  {}",
            p.parameter,
            p.rhat,
            p.ess,
            if p.flagged { "*" } else { "" }
        );
    }
    println!("{} of {} parameters flagged; files in {}", report.n_flagged, report.parameters.len(), out.display());
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let out = default_out(&args.run_dir, args.out, "summary");
    let method = if args.exact_vi { ExpectedVi::Exact } else { ExpectedVi::LowerBound };
    pipeline::summarize_run(&args.run_dir, &out, args.force, args.truth.as_deref(), args.level, method)?;
    let table = std::fs::read_to_string(out.join("table.txt")).map_err(|e| Error::io(out.join("table.txt"), e))?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads_from_env().and_then(|threads| match cli.command {
        Command::Simulate(a) => simulate(a, threads),
        Command::Fit(a) => fit(a, threads),
        Command::Diagnose(a) => diagnose(a),
        Command::Summarize(a) => summarize(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
