//! `microcorr`: simulate, estimate, test and network subcommands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microcorr::inference::MedianRule;
use microcorr::simulation::{ConfounderFamily, PhiScenario};
use microcorr::Error;

use crate::config::{Command, InputPaths, Overrides, RunConfig, SmootherOverrides};

#[derive(Parser, Debug)]
#[command(
    name = "microcorr",
    version,
    about = "Confounder-adjusted microbial correlation between metabolites"
)]
struct Cli {
    /// TOML run configuration; flags given here override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed for splits and simulated data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and the run manifest.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Monte-Carlo grid of rejection rates and biases.
    Simulate(SimulateArgs),
    /// Plug-in and single-split calibrated estimates for every metabolite pair.
    Estimate(StudyArgs),
    /// Multi-split calibrated tests with FDR control for every metabolite pair.
    Test(TestArgs),
    /// Edge list from an existing result table.
    Network(NetworkArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Confounder families: linear, exponential, triangular.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<ConfounderFamily>>,
    /// Φ scenarios: identity, upper-triangular-d.
    #[arg(long = "phi", value_delimiter = ',')]
    phi_scenarios: Option<Vec<PhiScenario>>,
    /// Paired sample sizes; the external cohort is 10x larger.
    #[arg(long = "n", value_delimiter = ',')]
    sample_sizes: Option<Vec<usize>>,
    /// True correlations to simulate.
    #[arg(long = "r", value_delimiter = ',', allow_hyphen_values = true)]
    r_values: Option<Vec<f64>>,
    /// Null boundary R₀ of the test H₀: |R| ≤ R₀.
    #[arg(long)]
    r0_test: Option<f64>,
    /// Replications per grid cell.
    #[arg(long)]
    replications: Option<usize>,
    #[command(flatten)]
    smoother: SmootherArgs,
}

#[derive(Args, Debug, Default)]
struct SmootherArgs {
    /// Even kernel order m (default 4).
    #[arg(long)]
    kernel_order: Option<usize>,
    /// Paired-cohort bandwidth a.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Paired-cohort density cutoff b.
    #[arg(long)]
    cutoff: Option<f64>,
    /// External-cohort bandwidth.
    #[arg(long)]
    external_bandwidth: Option<f64>,
    /// External-cohort density cutoff.
    #[arg(long)]
    external_cutoff: Option<f64>,
    /// Drop each point's own weight from kernel sums.
    #[arg(long)]
    leave_one_out: Option<bool>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Paired-cohort taxon abundances (TSV, samples x taxa).
    #[arg(long)]
    abundance: Option<PathBuf>,
    /// Paired-cohort metabolite levels (TSV, NA for missing).
    #[arg(long)]
    metabolites: Option<PathBuf>,
    /// Paired-cohort confounders (TSV).
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// External-cohort taxon abundances.
    #[arg(long)]
    external_abundance: Option<PathBuf>,
    /// External-cohort confounders, same columns as --covariates.
    #[arg(long)]
    external_covariates: Option<PathBuf>,
    /// Taxonomic rank to aggregate to (e.g. family).
    #[arg(long)]
    rank: Option<String>,
    /// Keep taxa present in at least this fraction of samples.
    #[arg(long)]
    min_prevalence: Option<f64>,
    /// Added to every abundance before log-ratios.
    #[arg(long)]
    pseudocount: Option<f64>,
    /// Use ALR against this taxon instead of CLR.
    #[arg(long)]
    alr_reference: Option<String>,
    /// Drop metabolites missing in at least this fraction of samples.
    #[arg(long)]
    max_missing: Option<f64>,
    #[command(flatten)]
    smoother: SmootherArgs,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Random sample splits per pair.
    #[arg(long)]
    n_splits: Option<usize>,
    /// Null boundary R₀ of the test H₀: |R| ≤ R₀.
    #[arg(long)]
    r0: Option<f64>,
    /// FDR level.
    #[arg(long)]
    alpha: Option<f64>,
    /// median-split or median-estimate.
    #[arg(long, value_parser = parse_rule)]
    median_rule: Option<MedianRule>,
}

#[derive(Args, Debug)]
struct NetworkArgs {
    /// Result table written by `test`.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Edges with |r| at or above this are drawn solid.
    #[arg(long)]
    solid_threshold: Option<f64>,
}

fn parse_rule(s: &str) -> Result<MedianRule, String> {
    match s {
        "median-split" => Ok(MedianRule::MedianSplit),
        "median-estimate" => Ok(MedianRule::MedianEstimate),
        other => Err(format!(
            "unknown median rule {other}; use median-split or median-estimate"
        )),
    }
}

impl SmootherArgs {
    fn overrides(&self) -> SmootherOverrides {
        SmootherOverrides {
            kernel_order: self.kernel_order,
            bandwidth: self.bandwidth,
            cutoff: self.cutoff,
            external_bandwidth: self.external_bandwidth,
            external_cutoff: self.external_cutoff,
            leave_one_out: self.leave_one_out,
        }
    }
}

impl StudyArgs {
    fn fill(&self, o: &mut Overrides) {
        o.inputs = InputPaths {
            abundance: self.abundance.clone(),
            metabolites: self.metabolites.clone(),
            covariates: self.covariates.clone(),
            external_abundance: self.external_abundance.clone(),
            external_covariates: self.external_covariates.clone(),
            results: None,
        };
        o.smoother = self.smoother.overrides();
        o.rank.clone_from(&self.rank);
        o.min_prevalence = self.min_prevalence;
        o.pseudocount = self.pseudocount;
        o.alr_reference.clone_from(&self.alr_reference);
        o.max_missing = self.max_missing;
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } => 3,
        e if e.is_numerical() => 4,
        _ => 2,
    }
}

fn build(cli: &Cli) -> microcorr::Result<(Command, RunConfig)> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut o = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out_dir: cli.out.clone(),
        ..Default::default()
    };
    let command = match &cli.command {
        Sub::Simulate(a) => {
            o.families.clone_from(&a.families);
            o.phi_scenarios.clone_from(&a.phi_scenarios);
            o.sample_sizes.clone_from(&a.sample_sizes);
            o.r_values.clone_from(&a.r_values);
            o.r0_test = a.r0_test;
            o.replications = a.replications;
            o.smoother = a.smoother.overrides();
            Command::Simulate
        }
        Sub::Estimate(a) => {
            a.fill(&mut o);
            Command::Estimate
        }
        Sub::Test(a) => {
            a.study.fill(&mut o);
            o.n_splits = a.n_splits;
            o.r0 = a.r0;
            o.alpha = a.alpha;
            o.median_rule = a.median_rule;
            Command::Test
        }
        Sub::Network(a) => {
            o.inputs.results.clone_from(&a.results);
            o.solid_threshold = a.solid_threshold;
            Command::Network
        }
    };
    config.apply(&o);
    config.manifest = None;
    config.validate(command)?;
    Ok((command, config))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = build(&cli).and_then(|(command, config)| {
        if config.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build_global()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        }
        commands::run(command, &config)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
