//! `dgmdr`: train, benchmark, and report on domain-generalization runs.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 missing data,
//! 1 anything else. Failures print one machine-readable JSON record to
//! stderr.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_domains, resolve, Overrides};
use dgmdr_core::augment::synth::{
    generate_pretrain_pool, generate_synthetic_domains, SyntheticDomainSpec,
};
use dgmdr_core::harness::{prepare_oracle, rerender_reports, run_benchmark, run_fold};
use dgmdr_core::{Error, Real, Result};

#[derive(Parser)]
#[command(
    name = "dgmdr",
    version,
    about = "Domain-generalization training and leave-one-domain-out benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one fold (one target domain, one seed).
    Train(TrainArgs),
    /// Run the full leave-one-domain-out x seeds matrix and aggregate.
    Benchmark(BenchmarkArgs),
    /// Re-render reports from stored results without retraining.
    Report(ReportArgs),
    /// Materialize synthetic domains and their manifests.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory the manifests' image paths are relative to.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output root; run directories live under `<out>/runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Regularization coefficient override (0 forces the ERM objective).
    #[arg(long)]
    lambda: Option<f64>,
    /// Objective override: erm, dgmdr, or dgmdr_swad.
    #[arg(long)]
    algorithm: Option<String>,
    /// Task override: multiclass or binary.
    #[arg(long)]
    task: Option<String>,
    /// Skip already-completed runs instead of failing on them.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Held-out target domain.
    #[arg(long)]
    target: String,
    /// Run seed (controls splits, initialization, batching, augmentation).
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Restrict the benchmark to a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel fold workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for images and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Number of benchmark domains.
    #[arg(long, default_value_t = 4)]
    domains: usize,
    /// Classes per domain (shapes double as grades).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Samples per class per domain.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Square image edge length in pixels.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Hue offset between consecutive domain styles, degrees.
    #[arg(long, default_value_t = 50.0)]
    shift: f64,
    /// Master generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra styles pooled into the oracle pretraining manifest
    /// (`pretrain.csv`); 0 skips it.
    #[arg(long, default_value_t = 2)]
    pretrain_styles: usize,
}

fn overrides(common: &CommonArgs, seed: Option<u64>, jobs: Option<usize>) -> Overrides {
    Overrides {
        data_root: common.data_root.clone(),
        out: common.out.clone(),
        lambda: common.lambda,
        algorithm: common.algorithm.clone(),
        task: common.task.clone(),
        seed,
        jobs,
        resume: common.resume,
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let manifest = resolve(&args.common.config, &overrides(&args.common, Some(args.seed), None))?;
    let domains = load_domains(&manifest)?;
    let oracle = prepare_oracle::<Real>(&manifest.settings)?;
    let record = run_fold::<Real>(
        &manifest.settings,
        &domains,
        &args.target,
        args.seed,
        oracle.as_ref(),
    )?;
    let fold_dir = manifest.settings.fold_dir(&args.target, args.seed);
    println!(
        "{} target={} seed={} accuracy={:.4} selected_step={} -> {}",
        record.algorithm_label,
        record.target_domain,
        record.seed,
        record.accuracy,
        record.selected_step,
        fold_dir.join("result.json").display()
    );
    Ok(())
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let manifest =
        resolve(&args.common.config, &overrides(&args.common, args.seed, Some(args.jobs)))?;
    let domains = load_domains(&manifest)?;
    let output = run_benchmark::<Real>(&manifest.settings, &domains)?;
    print!("{}", dgmdr_core::harness::emit_report(&output.report, dgmdr_core::harness::ReportFormat::Markdown));
    println!("reports: {} {}", output.report_md.display(), output.report_csv.display());
    println!("matrix: {}", output.benchmark_json.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let manifest = resolve(&args.common.config, &overrides(&args.common, None, None))?;
    let run_root = manifest.settings.run_root();
    let report = rerender_reports(&run_root, manifest.settings.algorithm.label())?;
    print!(
        "{}",
        dgmdr_core::harness::emit_report(&report, dgmdr_core::harness::ReportFormat::Markdown)
    );
    println!("reports re-rendered under {}", run_root.display());
    Ok(())
}

fn cmd_synth_data(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticDomainSpec {
        num_classes: args.classes,
        samples_per_class: args.per_class,
        domain_color_shift: args.shift,
        background_texture_seed: args.seed,
        image_size: args.image_size,
    };
    let domains = generate_synthetic_domains(&spec, args.domains, &args.out)?;
    for d in &domains {
        println!(
            "wrote {} ({} samples) -> {}",
            d.name(),
            d.len(),
            args.out.join(format!("{}.csv", d.name())).display()
        );
    }
    if args.pretrain_styles > 0 {
        let pool =
            generate_pretrain_pool(&spec, args.pretrain_styles, args.domains, &args.out, "pretrain")?;
        println!(
            "wrote {} ({} samples, {} styles) -> {}",
            pool.name(),
            pool.len(),
            args.pretrain_styles,
            args.out.join("pretrain.csv").display()
        );
    }
    Ok(())
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Data(_) => ("data", 3),
        Error::Io { .. } => ("io", 1),
        Error::Contract(_) => ("contract", 1),
        Error::Numeric(_) => ("numeric", 1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Report(args) => cmd_report(args),
        Command::SynthData(args) => cmd_synth_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let record = serde_json::json!({ "kind": kind, "error": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
