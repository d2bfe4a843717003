use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2lab::config::ExperimentConfig;
use s2lab::experiments::{cmd_eval, cmd_plot, cmd_repro, cmd_sample, cmd_sweep, cmd_train, ReproTarget, SweepAxis};
use s2lab::{Error, Result};

#[derive(Parser)]
#[command(name = "s2lab", version, about = "Guidance experiments on toy Gaussian mixtures")]
struct Cli {
    /// Worker threads for the dense kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser (and the weak model when a method needs it).
    Train(Common),
    /// Draw samples with one guidance method, or all configured ones.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Name of a `[[guidance]]` entry.
        #[arg(long)]
        guidance: Option<String>,
        /// Checkpoint directory; trained there if empty (default: OUT/models).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score the samples of a `sample` run directory (given by --out).
    Eval(Common),
    /// Vary one guidance parameter and tabulate the metrics.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        guidance: String,
        /// lambda, omega, drop_count or n_subnets.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Render a plot spec (TOML) to SVG.
    Plot {
        spec: PathBuf,
    },
    /// Run a canned experiment end to end.
    Repro {
        /// fig3_1d, fig3_2d, fig8_traj, fig9_naive_vs_s2 or ablations.
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replaces the built-in configuration of the experiment.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint cache (default: OUT/cache).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Train(c) => {
            let m = cmd_train(&c.load()?, &c.out)?;
            for (k, v) in &m.scalars {
                println!("{k} = {v:.5}");
            }
        }
        Command::Sample {
            common,
            guidance,
            models,
        } => {
            let cfg = common.load()?;
            let models = models.unwrap_or_else(|| common.out.join("models"));
            let m = cmd_sample(&cfg, &models, &common.out, guidance.as_deref())?;
            for (name, c) in &m.call_counts {
                println!("{name}: {} denoiser calls", c.total());
            }
        }
        Command::Eval(c) => {
            let m = cmd_eval(&c.load()?, &c.out)?;
            for (name, r) in &m.metrics {
                println!("{name}: {}", r.csv_row());
            }
        }
        Command::Sweep {
            common,
            guidance,
            axis,
            values,
            models,
        } => {
            let cfg = common.load()?;
            let axis: SweepAxis = axis.parse()?;
            let models = models.unwrap_or_else(|| common.out.join("models"));
            cmd_sweep(&cfg, &models, &common.out, &guidance, axis, &values)?;
        }
        Command::Plot { spec } => {
            let out = cmd_plot(&spec)?;
            println!("{}", out.display());
        }
        Command::Repro {
            name,
            out,
            seed,
            config,
            cache,
        } => {
            let target: ReproTarget = name.parse()?;
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => target.config(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cache = cache.unwrap_or_else(|| out.join("cache"));
            let m = cmd_repro(target, &cfg, &out, &cache)?;
            println!("{} done in {:.1}s, {} files", target.name(), m.wall_time_secs, m.outputs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
