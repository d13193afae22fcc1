use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rlseg_core::config::RunConfig;
use rlseg_core::dataset::save_dataset;
use rlseg_core::report::{run_comparison, train_policy_from_config, write_report, RunManifest};
use rlseg_core::runner::Benchmark;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "RLSEG_OUT";

#[derive(Parser)]
#[command(name = "rlseg", version, about = "Region-based active learning for segmentation")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark datasets.
    Gen(RunArgs),
    /// Train a query policy and save its checkpoint.
    TrainPolicy(RunArgs),
    /// Run every configured method over every seed and write a report.
    Compare(RunArgs),
    /// Regenerate CSVs and plots from a run directory.
    Report {
        /// Run directory containing manifest.json.
        run_dir: PathBuf,
    },
    /// Print a preset configuration as TOML.
    Preset { name: String },
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or the name of a shipped preset.
    #[arg(long)]
    config: String,
    /// Overrides the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to RLSEG_OUT, the config, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let path = Path::new(&self.config);
        let mut cfg = if path.exists() {
            RunConfig::load(path)?
        } else if let Some(cfg) = RunConfig::preset(&self.config) {
            cfg
        } else {
            bail!("config `{}` is neither a readable file nor a preset", self.config);
        };
        if let Some(seed) = self.seed {
            cfg.evaluation.seeds = vec![seed];
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn run_dir(&self, cfg: &RunConfig) -> PathBuf {
        let root = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.output.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        match self.seed {
            Some(s) => root.join(format!("{}-seed{s}", cfg.name)),
            None => root.join(&cfg.name),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let dir = args.run_dir(&cfg);
    create_dir(&dir)?;
    write_config(&cfg, &dir)?;
    let bench = Benchmark::build(&cfg.benchmark)?;
    save_dataset(&bench.data, &dir.join("data/pool"))?;
    save_dataset(&bench.test, &dir.join("data/test"))?;
    save_dataset(&bench.source, &dir.join("data/source"))?;
    let splits = serde_json::to_string_pretty(&bench.splits)?;
    std::fs::write(dir.join("data/splits.json"), splits + "\n")?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_train_policy(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let seed = args.seed.unwrap_or(cfg.agent.seed);
    let dir = args.run_dir(&cfg);
    create_dir(&dir)?;
    write_config(&cfg, &dir)?;
    let (policy, theta0) = train_policy_from_config(&cfg, seed)?;
    theta0.save_checkpoint(&dir.join("learner.bin"))?;
    policy.agent.save(&dir.join("agent.bin"))?;
    let mut rows = String::from("episode,return\n");
    for (e, r) in policy.returns().iter().enumerate() {
        rows.push_str(&format!("{e},{r:.6}\n"));
    }
    std::fs::write(dir.join("returns.csv"), rows)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let dir = args.run_dir(&cfg);
    create_dir(&dir)?;
    write_config(&cfg, &dir)?;
    let (manifest, theta0) = run_comparison(&cfg)?;
    theta0.save_checkpoint(&dir.join("learner.bin"))?;
    manifest.save(&dir.join("manifest.json"))?;
    write_report(&manifest, &dir)?;
    print_summary(&manifest);
    println!("{}", dir.display());
    Ok(())
}

fn print_summary(manifest: &RunManifest) {
    for row in rlseg_core::report::summarize(&manifest.comparison.records) {
        println!(
            "{:<12} budget {:>5}  mIoU {:.4} +- {:.4}  label entropy {:.4}",
            row.method, row.budget, row.miou_mean, row.miou_std, row.entropy_mean
        );
    }
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    let manifest = RunManifest::load(&run_dir.join("manifest.json"))?;
    for path in write_report(&manifest, run_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainPolicy(a) => cmd_train_policy(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Report { run_dir } => cmd_report(run_dir),
        Command::Preset { name } => {
            let cfg = RunConfig::preset(name).with_context(|| format!("unknown preset `{name}`"))?;
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
