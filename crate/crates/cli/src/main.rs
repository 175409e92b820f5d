use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frost::dynamics::ModelKind;
use frost::harness::{
    analyze_checkpoint, evaluate_checkpoint, run_experiment, sketch_bench, verify, RunConfig, VerifyOptions,
    DEFAULT_SEED,
};
use frost::Result;

#[derive(Parser)]
#[command(name = "frost", version, about = "Stationary contractive refinement with quantile-calibrated halting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in `--config`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    kind: Option<ModelKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        if let Some(k) = self.kind {
            cfg.model.kind = k;
        }
        if let Some(lr) = self.lr {
            cfg.training.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.training.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, calibrate and evaluate; writes CSV/JSON artifacts and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also train the single-loss ablation arms.
        #[arg(long)]
        ablation: bool,
    },
    /// Evaluate a checkpoint over the quantile grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Contraction, error-decay, gradient-bound and scaling reports for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every property suite; exit status 3 if any fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Negative control: feed a negative lambda to the positivity suite.
        #[arg(long)]
        inject_negative_lambda: bool,
    },
    /// Measured sketch rank error against an exact sort.
    SketchBench {
        #[arg(long, value_delimiter = ',', default_value = "8,50,200,400")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Print the effective configuration as JSON.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, ablation } => {
            let mut cfg = common.resolve()?;
            cfg.ablation |= ablation;
            let s = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s.trends)?);
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let s = evaluate_checkpoint(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&s.quantiles)?);
        }
        Command::Analyze { common, checkpoint } => {
            let cfg = common.resolve()?;
            let s = analyze_checkpoint(&cfg, &checkpoint)?;
            println!(
                "decay violations: {}, gradient-bound violations: {}, scaling pass: {}",
                s.decay_violations, s.gradient_violations, s.scaling.pass
            );
        }
        Command::Verify {
            common,
            inject_negative_lambda,
        } => {
            let cfg = common.resolve()?;
            let outcome = verify(&cfg, &VerifyOptions { inject_negative_lambda })?;
            for s in &outcome.suites {
                println!("{:<20} {}", s.name, if s.pass { "pass" } else { "FAIL" });
            }
            outcome.into_result()?;
        }
        Command::SketchBench { k, n, trials, seed } => {
            let rows = sketch_bench(&k, n, trials, seed)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::PrintConfig { common } => {
            println!("{}", common.resolve()?.to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
