//! Command-line front end: evaluate methods over seeded episode draws,
//! generate synthetic feature stores, inspect store files, and run the
//! feature-Gaussianity diagnostics.
//!
//! Exit codes: 0 on success, 2 for flag or configuration errors, 1 for
//! runtime failures (missing or corrupt files, failed episodes).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fewshot_ot::{
    concat_stores, evaluate, gaussianity_pass_rate, generate_synthetic_store,
    load_feature_store, write_feature_store, BmsConfig, CenterMode, EpisodeSpec, FeatureStore,
    FileFormat, Method, PreprocessConfig, SkewMode, StatsTransform,
};

#[derive(Parser)]
#[command(
    name = "fewshot-ot",
    about = "Few-shot episode evaluation on precomputed feature vectors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a method over N seeded episodes and report accuracy.
    Run(RunArgs),
    /// Generate a synthetic feature store and write it to disk.
    Synth(SynthArgs),
    /// Per-class per-dimension normality tests over a store.
    Stats(StatsArgs),
    /// Print a store's header: dimension, classes, counts.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Csv,
}

impl From<FormatArg> for FileFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Binary => FileFormat::Binary,
            FormatArg::Csv => FileFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ncm,
    Bms,
    #[value(name = "bms_star", alias = "bms-star")]
    BmsStar,
}

impl From<MethodArg> for Method {
    fn from(value: MethodArg) -> Self {
        match value {
            MethodArg::Ncm => Method::Ncm,
            MethodArg::Bms => Method::Bms,
            MethodArg::BmsStar => Method::BmsStar,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    Base,
    Novel,
    None,
}

#[derive(Args)]
struct RunArgs {
    /// Novel-class feature store to sample episodes from.
    #[arg(long)]
    features: PathBuf,
    /// Base-class feature store (required for --center base).
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Classes per episode (n-way).
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Labelled samples per class (s-shot).
    #[arg(long, default_value_t = 1)]
    s: usize,
    /// Unlabelled query samples per class.
    #[arg(long, default_value_t = 15)]
    q: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entropic regularization strength.
    #[arg(long, default_value_t = 8.5)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    outer_iters: usize,
    #[arg(long, default_value_t = 50)]
    sinkhorn_iters: usize,
    /// Logistic-regression epochs; omitted means the shot-dependent
    /// schedule (0 or 20 for 1-shot, 40 otherwise).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    momentum: f64,
    /// Initial logit temperature.
    #[arg(long, default_value_t = 10.0)]
    kappa: f64,
    /// Power-transform exponent.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Projection center; defaults to base when a base store is given to
    /// an NCM run, novel otherwise.
    #[arg(long, value_enum)]
    center: Option<CenterArg>,
    /// Skip the per-episode QR reduction.
    #[arg(long)]
    no_qr: bool,
    /// Pin support rows of the allocation to their labels (ablation).
    #[arg(long)]
    clamp_support: bool,
    /// Explicit per-class counts for bms_star, comma-separated.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<f64>>,
    /// Episode-parallel worker count; 0 = default pool. Falls back to
    /// FEWSHOT_OT_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Where the JSON report goes.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 600)]
    per_class: usize,
    /// Pairwise distance scale between class centers.
    #[arg(long, default_value_t = 5.3)]
    separation: f64,
    /// Marginal shape: gaussian or relu (right-skewed squares).
    #[arg(long, default_value = "gaussian")]
    skew: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    /// Optional preprocessing before testing: p (power transform) or pe
    /// (power transform + normalization).
    #[arg(long)]
    transform: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Write the per-cell TSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
}

/// Usage errors exit 2 like clap's own; runtime failures exit 1.
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<fewshot_ot::Error> for CliError {
    fn from(err: fewshot_ot::Error) -> Self {
        match err {
            fewshot_ot::Error::InvalidConfig(_) | fewshot_ot::Error::InfeasibleSpec(_) => {
                CliError::Usage(err.to_string())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("FEWSHOT_OT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

/// Input paths are flag values: a path that does not exist is a usage
/// error (exit 2), while an existing but unreadable or corrupt file is a
/// runtime failure (exit 1).
fn load_store_arg(path: &PathBuf, format: FileFormat) -> Result<FeatureStore, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("no such file: {}", path.display())));
    }
    Ok(load_feature_store(path, format)?)
}

/// Bulk writes to stdout treat a closed pipe (`... | head`) as a normal
/// early exit instead of a panic.
fn print_or_pipe_end(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    match std::io::stdout().write_all(text.as_bytes()) {
        Ok(()) => Ok(()),
        Err(err) if err.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(err) => Err(err.into()),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let format: FileFormat = args.format.into();
    let method: Method = args.method.into();

    if args.n == 0 || args.s == 0 || args.q == 0 || args.episodes == 0 {
        return Err(CliError::Usage(
            "--n, --s, --q and --episodes must be positive".into(),
        ));
    }

    let store = load_store_arg(&args.features, format)?;
    let base = args
        .base
        .as_ref()
        .map(|p| load_store_arg(p, format))
        .transpose()?;

    let center_mode = match args.center {
        Some(CenterArg::Base) => CenterMode::BaseMean,
        Some(CenterArg::Novel) => CenterMode::NovelMean,
        Some(CenterArg::None) => CenterMode::None,
        None => match (method, &base) {
            (Method::Ncm, Some(_)) => CenterMode::BaseMean,
            _ => CenterMode::NovelMean,
        },
    };
    if center_mode == CenterMode::BaseMean && base.is_none() {
        return Err(CliError::Usage(
            "--center base needs --base <store>".into(),
        ));
    }

    let prep = PreprocessConfig {
        beta: args.beta,
        epsilon: 1e-6,
        center_mode,
        apply_qr: !args.no_qr,
    };

    if let Some(targets) = &args.targets {
        if method != Method::BmsStar {
            return Err(CliError::Usage("--targets only applies to bms_star".into()));
        }
        if targets.len() != args.n {
            return Err(CliError::Usage(format!(
                "--targets lists {} classes, episode has {}",
                targets.len(),
                args.n
            )));
        }
        let total: f64 = targets.iter().sum();
        let expected = (args.n * (args.s + args.q)) as f64;
        if (total - expected).abs() > 1e-6 {
            return Err(CliError::Usage(format!(
                "--targets sum to {total}, episode holds {expected} samples"
            )));
        }
    }

    let bms_cfg = BmsConfig {
        lambda: args.lambda,
        outer_iters: args.outer_iters,
        sinkhorn_iters: args.sinkhorn_iters,
        epochs: args.epochs,
        lr: args.lr,
        momentum: args.momentum,
        kappa_init: args.kappa,
        exact_targets: args.targets.clone(),
        clamp_support: args.clamp_support,
        ..BmsConfig::default()
    };

    let spec = EpisodeSpec {
        n_way: args.n,
        shots: args.s,
        queries_per_class: args.q,
        seed: args.seed,
    };

    let report = evaluate(
        &store,
        base.as_ref(),
        &spec,
        &prep,
        method,
        Some(&bms_cfg),
        args.episodes,
        args.seed,
        resolve_threads(args.threads),
    )?;

    std::fs::write(&args.out, report.to_json())?;
    println!("{}", report.tsv_line());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let skew = match args.skew.as_str() {
        "gaussian" => SkewMode::Gaussian,
        "relu" | "relu_skewed" => SkewMode::ReluSkewed,
        other => {
            return Err(CliError::Usage(format!(
                "unknown --skew {other:?}; use gaussian or relu"
            )))
        }
    };
    let store = generate_synthetic_store(
        args.classes,
        args.dim,
        args.per_class,
        args.separation,
        skew,
        args.seed,
    )?;
    write_feature_store(&store, &args.out, args.format.into())?;
    println!(
        "wrote {} classes x {} vectors x dim {} to {}",
        store.num_classes(),
        args.per_class,
        store.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let transform = match args.transform.as_deref() {
        None | Some("none") => None,
        Some("p") => Some(StatsTransform::Power {
            beta: args.beta,
            epsilon: 1e-6,
        }),
        Some("pe") => Some(StatsTransform::PowerNormalize {
            beta: args.beta,
            epsilon: 1e-6,
        }),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown --transform {other:?}; use p or pe"
            )))
        }
    };

    let store = load_store_arg(&args.features, args.format.into())?;
    let report = gaussianity_pass_rate(&store, transform, args.alpha)?;

    match &args.out {
        Some(path) => {
            std::fs::write(path, report.to_tsv())?;
            println!(
                "pass_rate\t{:.6}\tcells\t{}\talpha\t{:e}",
                report.pass_rate,
                report.cells.len(),
                report.alpha
            );
        }
        None => {
            print_or_pipe_end(&report.to_tsv())?;
            eprintln!(
                "pass_rate\t{:.6}\tcells\t{}\talpha\t{:e}",
                report.pass_rate,
                report.cells.len(),
                report.alpha
            );
        }
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let format: FileFormat = args.format.into();
    let stores: Vec<FeatureStore> = args
        .features
        .iter()
        .map(|p| load_store_arg(p, format))
        .collect::<Result<_, _>>()?;
    let store = if stores.len() == 1 {
        stores.into_iter().next().expect("one store")
    } else {
        concat_stores(&stores)?
    };

    let mut out = String::new();
    out.push_str(&format!("dim\t{}\n", store.dim()));
    out.push_str(&format!("classes\t{}\n", store.num_classes()));
    out.push_str(&format!("min_class_count\t{}\n", store.min_class_count()));
    out.push_str(&format!("total_vectors\t{}\n", store.total_vectors()));
    for block in store.classes() {
        out.push_str(&format!("class\t{}\tcount\t{}\n", block.class_id, block.count()));
    }
    print_or_pipe_end(&out)
}
