use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use geoclip::accountant::{epsilon_of, PrivacySpec};
use geoclip::harness::{self, DataConfig, RunConfig};
use geoclip::modeling::{gen_synthetic_classification, gen_synthetic_regression, write_csv};

#[derive(Parser)]
#[command(name = "geoclip", version, about = "Differentially private SGD with geometry-aware clipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write per-seed metrics.
    Run(RunArgs),
    /// Grid-search learning rate and h2 per strategy and budget.
    Sweep(RunArgs),
    /// Print ε for T steps of the Poisson-subsampled Gaussian mechanism.
    Accountant {
        sigma: f64,
        sample_rate: f64,
        steps: u64,
        delta: f64,
    },
    /// Write a synthetic dataset described by a `[data]`-style TOML spec.
    GenData { spec: PathBuf, out: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Override a config key, e.g. `--set train.learning_rate=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds as `a..b` (exclusive) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target ε; σ is solved for it.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for item in &self.set {
            let (k, v) = item.split_once('=').with_context(|| format!("expected KEY=VALUE, got `{item}`"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seeds) = &self.seeds {
            out.push(("train.seeds".into(), format!("{:?}", parse_seeds(seeds)?)));
        }
        if let Some(out_dir) = &self.out {
            out.push(("output.dir".into(), format!("{:?}", out_dir.display().to_string())));
        }
        if let Some(eps) = self.epsilon {
            out.push(("privacy.epsilon".into(), eps.to_string()));
        }
        if let Some(lr) = self.learning_rate {
            out.push(("train.learning_rate".into(), lr.to_string()));
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(&self.config, &self.overrides()?)?)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range `{text}`");
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed `{s}`"))).collect()
}

fn run(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let records = harness::run(&config)?;
    let written = harness::emit(&records, config.privacy.epsilon, &config.output.dir)?;
    if let Some(row) = harness::summarize(&records, config.privacy.epsilon) {
        println!(
            "{} σ={:.4} η={} seeds={} step={} metric={:.6}±{:.6} ε={:.4}",
            row.strategy, row.sigma, row.learning_rate, row.seeds, row.step, row.metric_mean, row.metric_std, row.epsilon
        );
    }
    println!("wrote {} files to {}", written.len(), config.output.dir.display());
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let result = harness::sweep(&config)?;
    harness::emit_sweep(&result, &config.output.dir)?;
    for cell in &result.cells {
        if let Some(row) = harness::summarize(&cell.records, cell.budget) {
            let budget = cell.budget.map_or("-".to_string(), |b| b.to_string());
            println!(
                "{:<16} ε_target={:<6} σ={:.4} η={} h2={} metric={:.6}±{:.6}",
                row.strategy, budget, row.sigma, row.learning_rate, row.h2, row.metric_mean, row.metric_std
            );
        }
    }
    println!("wrote {}", config.output.dir.display());
    Ok(())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let data: DataConfig = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    let Some(synthetic) = data.synthetic_spec() else { bail!("{}: source must be synthetic", spec.display()) };
    let dataset = match data.source {
        harness::DataSource::SyntheticRegression => gen_synthetic_regression(&synthetic)?,
        _ => gen_synthetic_classification(&synthetic)?,
    };
    write_csv(&dataset, out)?;
    println!("wrote {} rows × {} features to {}", dataset.len(), dataset.input_dim(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::Accountant { sigma, sample_rate, steps, delta } => {
            PrivacySpec::new(*sigma, *sample_rate, *steps, *delta).and_then(|s| epsilon_of(&s)).map(|eps| println!("{eps}")).map_err(Into::into)
        }
        Command::GenData { spec, out } => gen_data(spec, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
