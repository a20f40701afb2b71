//! `faircal` — command-line front end for the fairness-calibration toolkit.
//!
//! Three subcommands cover the whole workflow:
//!
//! - `synth` generates a seeded synthetic verification dataset (pair
//!   manifest CSV + embedding store) with controllable per-subgroup bias;
//! - `run` cross-validates calibration methods on a dataset and writes a
//!   metrics report (JSON or CSV);
//! - `report` prints a single table of a saved report as CSV.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit
//! failure, 5 I/O error. The `FAIRCAL_THREADS` environment variable caps
//! worker parallelism (0 = one worker per logical CPU).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use faircal_core::calib::Calibrator;
use faircal_core::data::Dataset;
use faircal_core::harness::{run_cross_validation, RunConfig};
use faircal_core::methods::MethodKind;
use faircal_core::report::MetricsReport;
use faircal_core::synth::{generate, SubgroupSpec, SynthSpec};
use faircal_core::{exec, Error};

#[derive(Parser)]
#[command(
    name = "faircal",
    version,
    about = "Post-hoc fairness calibration for embedding-based verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased verification dataset.
    Synth(SynthArgs),
    /// Cross-validate calibration methods and write a metrics report.
    Run(RunArgs),
    /// Print one table of a saved report as CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// `key = value` spec file; explicit flags override its fields.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,

    /// Subgroup descriptor `name:noise[:identities[:images[:spread]]]`;
    /// repeat the flag for several subgroups. Replaces the spec file's list.
    #[arg(long = "subgroup", value_name = "DESC")]
    subgroups: Vec<SubgroupSpec>,

    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,

    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,

    /// Genuine pairs drawn per identity.
    #[arg(long)]
    genuine_pairs_per_id: Option<usize>,

    /// Same-subgroup imposter pairs drawn per identity.
    #[arg(long)]
    imposter_pairs_per_id: Option<usize>,

    /// Name of the sensitive-attribute column in the manifest.
    #[arg(long)]
    attribute: Option<String>,

    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Also draw cross-subgroup imposter pairs.
    #[arg(long)]
    inter_pairs: bool,

    /// Output pair manifest (CSV).
    #[arg(long, value_name = "FILE")]
    out_pairs: PathBuf,

    /// Output embedding store (binary).
    #[arg(long, value_name = "FILE")]
    out_emb: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Pair manifest (CSV).
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,

    /// Embedding store (binary or headerless CSV).
    #[arg(long, value_name = "FILE")]
    embeddings: PathBuf,

    /// Comma-separated methods: baseline, faircal, oracle, fsn, gst.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<MethodKind>,

    /// Calibration family fitted by the probability methods.
    #[arg(long, default_value = "beta")]
    calibrator: Calibrator,

    /// Cluster count K for faircal and fsn.
    #[arg(long, default_value_t = 100)]
    clusters: usize,

    /// Expected fold count; must match the dataset.
    #[arg(long, default_value_t = 5)]
    folds: usize,

    /// Comma-separated target global FPRs.
    #[arg(long = "fpr", value_delimiter = ',', default_values_t = [0.001, 0.01])]
    fprs: Vec<f64>,

    /// Comma-separated sensitive-attribute columns (oracle and gst need
    /// at least one).
    #[arg(long, value_delimiter = ',')]
    attributes: Vec<String>,

    /// Seed for clustering and fit retries.
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Beta-calibrate fsn/gst score outputs so their KS/ECE/Brier can be
    /// reported alongside the probability methods.
    #[arg(long)]
    post_calibrate_scores: bool,

    /// Report output path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Report file format.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,

    /// L2-normalize embeddings before clustering and scoring.
    #[arg(long)]
    normalize: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Saved JSON report.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,

    /// Table to print: accuracy, ks, fpr-dev, fnr-dev or fpr-curve.
    #[arg(long)]
    table: String,

    /// Output format (tables are only available as csv).
    #[arg(long, default_value = "csv")]
    format: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_cap_from_env().and_then(|cap| {
        exec::configure_threads(cap);
        match cli.command {
            Command::Synth(args) => cmd_synth(args),
            Command::Run(args) => cmd_run(args),
            Command::Report(args) => cmd_report(args),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn thread_cap_from_env() -> Result<usize, Error> {
    match std::env::var("FAIRCAL_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::Config(format!(
                "FAIRCAL_THREADS must be a non-negative integer, got `{v}`"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::Config("FAIRCAL_THREADS is not valid UTF-8".into()))
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let mut spec = match &args.spec {
        Some(path) => SynthSpec::from_file(path)?,
        None => SynthSpec::default(),
    };
    if !args.subgroups.is_empty() {
        spec.subgroups = args.subgroups;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.folds {
        spec.folds = v;
    }
    if let Some(v) = args.genuine_pairs_per_id {
        spec.genuine_pairs_per_id = v;
    }
    if let Some(v) = args.imposter_pairs_per_id {
        spec.imposter_pairs_per_id = v;
    }
    if let Some(v) = args.attribute {
        spec.attribute = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if args.inter_pairs {
        spec.inter_pairs = true;
    }
    if spec.subgroups.is_empty() {
        return Err(Error::Config(
            "no subgroups defined; pass --subgroup or a --spec file that lists them".into(),
        ));
    }

    let ds = generate(&spec)?;
    ds.write_pairs(&args.out_pairs)?;
    ds.write_embeddings_binary(&args.out_emb)?;
    eprintln!(
        "wrote {} pairs to {} and {} embeddings to {}",
        ds.pairs.len(),
        args.out_pairs.display(),
        ds.embedding_count(),
        args.out_emb.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut ds = Dataset::load(&args.pairs, &args.embeddings)?;
    if ds.dropped_pairs > 0 {
        eprintln!(
            "warning: dropped {} pairs referencing ids with no embedding",
            ds.dropped_pairs
        );
    }
    if args.normalize {
        ds.normalize_embeddings();
    }

    let cfg = RunConfig {
        methods: args.methods,
        calibrator: args.calibrator,
        clusters: args.clusters,
        target_fprs: args.fprs,
        attributes: args.attributes,
        folds: args.folds,
        seed: args.seed,
        post_calibrate_scores: args.post_calibrate_scores,
    };
    let report = run_cross_validation(&ds, &cfg)?;

    match args.format {
        ReportFormat::Json => report.write_json(&args.out)?,
        ReportFormat::Csv => report.write_csv(&args.out)?,
    }
    eprintln!("wrote {}", args.out.display());

    let mut fit_failed = false;
    for (method, rep) in &report.methods {
        for w in &rep.warnings {
            eprintln!("warning: {method}: {w}");
        }
        for e in &rep.errors {
            eprintln!("error: {method}: {e}");
            fit_failed = true;
        }
    }
    if fit_failed {
        // The report is still written; the exit code flags that at least one
        // method could not be fitted.
        return Err(Error::Fit(
            "one or more methods failed to fit; see the report's error records".into(),
        ));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    if args.format != "csv" {
        return Err(Error::Config(format!(
            "unsupported table format `{}` (tables are csv)",
            args.format
        )));
    }
    let report = MetricsReport::read_json(&args.input)?;
    print!("{}", report.table(&args.table)?);
    Ok(())
}
