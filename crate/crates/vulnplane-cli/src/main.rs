//! Command-line front end: one subcommand per pipeline stage plus
//! `pipeline` for the whole chain. Exit codes: 0 success, 1 validation
//! error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vulnplane_cli::config::{AttackMethod, PipelineConfig};
use vulnplane_cli::pipeline::{run_stages, RunReport, Stage};
use vulnplane_cli::CliError;

#[derive(Parser)]
#[command(
    name = "vulnplane",
    version,
    about = "Per-sample membership-vulnerability dynamics experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap; falls back to VULNPLANE_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Attack engine.
    #[arg(long, value_parser = parse_method)]
    method: Option<AttackMethod>,
    /// LiRA variance estimation mode.
    #[arg(long, value_parser = parse_variance)]
    variance: Option<vulnplane::attack::VarianceMode>,
    /// Log-likelihood-ratio decision cutoff.
    #[arg(long)]
    threshold: Option<f64>,
}

fn parse_method(s: &str) -> Result<AttackMethod, String> {
    match s {
        "lira" => Ok(AttackMethod::Lira),
        "shokri" => Ok(AttackMethod::Shokri),
        other => Err(format!("unknown method `{other}` (expected lira|shokri)")),
    }
}

fn parse_variance(s: &str) -> Result<vulnplane::attack::VarianceMode, String> {
    match s {
        "global" => Ok(vulnplane::attack::VarianceMode::Global),
        "per-sample" => Ok(vulnplane::attack::VarianceMode::PerSample),
        other => Err(format!("unknown variance mode `{other}` (expected global|per-sample)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the sample pool and membership plan.
    GenData(Common),
    /// Train the shadow population and record scores and checkpoints.
    Train(Common),
    /// Estimate per-sample vulnerability states from the shadow population.
    Attack(AttackArgs),
    /// Compute transition, motion, information and clustering metrics.
    Dynamics(Common),
    /// Compute per-sample hardness metrics.
    Hardness(Common),
    /// Correlate hardness metrics with vulnerability.
    Correlate(Common),
    /// Render the vulnerability plane and metric curves as SVG.
    Report(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

fn out_dir(common: &Common, cfg: &PipelineConfig) -> Result<PathBuf, CliError> {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))
}

fn execute(common: &Common, stages: &[Stage], tweak: impl FnOnce(&mut PipelineConfig)) -> Result<RunReport, CliError> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    tweak(&mut cfg);
    let out = out_dir(common, &cfg)?;
    let report = run_stages(&cfg, &out, stages, common.threads)?;
    for stage in &report.skipped {
        eprintln!("{stage}: up to date, skipped");
    }
    for stage in &report.executed {
        let ms = report.manifest.stages[*stage].wall_time_ms;
        eprintln!("{stage}: completed in {ms} ms");
    }
    Ok(report)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(c) => execute(c, &[Stage::GenData], |_| {})?,
        Command::Train(c) => execute(c, &[Stage::Train], |_| {})?,
        Command::Attack(a) => execute(&a.common, &[Stage::Attack], |cfg| {
            if let Some(m) = a.method {
                cfg.attack.method = m;
            }
            if let Some(v) = a.variance {
                cfg.attack.variance_mode = v;
            }
            if let Some(t) = a.threshold {
                cfg.attack.threshold = t;
            }
        })?,
        Command::Dynamics(c) => execute(c, &[Stage::Dynamics], |_| {})?,
        Command::Hardness(c) => execute(c, &[Stage::Hardness], |_| {})?,
        Command::Correlate(c) => execute(c, &[Stage::Correlate], |_| {})?,
        Command::Report(c) => execute(c, &[Stage::Report], |_| {})?,
        Command::Pipeline(c) => execute(c, &Stage::ALL, |_| {})?,
    };
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
