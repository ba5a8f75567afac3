use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use verbose_lab::harness::{Check, ExperimentConfig, Harness, Outcome, Suite};

#[derive(Parser, Debug)]
#[command(name = "verbose-lab", version, about = "Verbose-image attacks on a toy captioner")]
struct Cli {
    /// Experiment config (TOML); every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides data.seed and experiment.seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides paths.output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the core count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a captioner on the dataset.
    Train,
    /// Craft verbose images and baselines for the held-out set.
    Attack,
    /// Evaluate clean held-out images, or a directory of VFT1 images.
    Eval {
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Run one ablation suite: losses, schedule, epsilon, policy or maxlen.
    Ablate { suite: String },
    /// Craft on the primary model and evaluate on transfer.model_b.
    Transfer,
    /// Forced-length cost sweep.
    Meter,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.experiment.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = o.clone();
    }
    Ok(cfg)
}

fn print_checks<'a>(checks: impl IntoIterator<Item = &'a Check>) {
    for c in checks {
        let tag = match (c.passed, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "note",
        };
        println!("{tag} {}: {}", c.name, c.detail);
    }
}

fn finish<O: Outcome>(o: &O) -> bool {
    print_checks(o.checks());
    o.passed()
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let harness = Harness::new(cfg, cli.jobs)?;
    let out = harness.output_dir().display().to_string();
    Ok(match &cli.command {
        Command::GenData { n } => {
            let dir = harness.gen_data(*n, None)?;
            println!("dataset written to {}", dir.display());
            true
        }
        Command::Train => {
            let o = harness.train()?;
            println!(
                "final loss {:.4}, held-out mean length {:.2}, well-formed {:.2}",
                o.report.final_loss(),
                o.held_out.mean_len,
                o.held_out.well_formed
            );
            finish(&o)
        }
        Command::Attack => {
            let r = harness.attack()?;
            print!("{}", r.summary_text());
            println!("report written to {out}/attack");
            finish(&r)
        }
        Command::Eval { images } => {
            let r = harness.eval(images.as_deref())?;
            print!("{}", r.summary_text());
            finish(&r)
        }
        Command::Ablate { suite } => {
            let suite: Suite = suite.parse()?;
            let o = harness.ablate(suite).with_context(|| format!("ablation suite {suite}"))?;
            for c in &o.table {
                println!(
                    "{:<16} original {:>7.2}  verbose {:>7.2}  ratio {:>6.2}",
                    c.cell, c.original_mean, c.verbose_mean, c.ratio
                );
            }
            finish(&o)
        }
        Command::Transfer => {
            let r = harness.transfer()?;
            print!("{}", r.summary_text());
            finish(&r)
        }
        Command::Meter => {
            let o = harness.meter_sweep()?;
            for s in &o.sweeps {
                println!(
                    "flops R2 {:.6}, wall R2 {:.4}",
                    s.flops_fit.r_squared, s.wall_fit.r_squared
                );
            }
            finish(&o)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
