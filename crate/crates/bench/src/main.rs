use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use anchorseg_bench::{ablate, data, report, train};
use anchorseg_core::checks;
use anchorseg_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "anchorseg", about = "Anchor-query segmentation toy benchmark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split. The run's `config.toml`
    /// is read from the checkpoint's directory unless `--config` is given.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the ablation grid and write one metrics row per run.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in 64-bit precision.
    GradCheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Summarize an ablation CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Directory for PGM similarity maps; needs `--checkpoint` and `--data`.
        #[arg(long, requires_all = ["checkpoint", "data"])]
        dump_prior: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<train::Prepared> {
    let ds = data::Dataset::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(train::Prepared::new(&ds, cfg)?)
}

fn run_config_for(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    match explicit {
        Some(p) => load_config(p),
        None => {
            let sibling = checkpoint.with_file_name("config.toml");
            if !sibling.exists() {
                bail!("no config.toml next to {}; pass --config", checkpoint.display());
            }
            load_config(&sibling)
        }
    }
}

fn print_scores(s: &anchorseg_bench::metrics::Scores) {
    println!("giou    {:.4}", s.giou);
    println!("ciou    {:.4}", s.ciou);
    println!("prec05  {:.4}", s.prec05);
    match s.nacc {
        Some(v) => println!("nacc    {v:.4}"),
        None => println!("nacc    n/a"),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config)?;
            let ds = data::generate_dataset(&cfg.dims, &cfg.data, seed)?;
            ds.save(&out).with_context(|| format!("writing {}", out.display()))?;
            let nulls = ds.samples.iter().filter(|s| s.is_null).count();
            println!("wrote {} samples ({nulls} null) to {}", ds.samples.len(), out.display());
        }
        Command::Train { config, data, out_dir } => {
            let cfg = load_config(&config)?;
            let prepared = load_data(&data, &cfg)?;
            let outcome = train::train(&cfg, &prepared)?;
            train::write_run(&out_dir, &cfg, &outcome)?;
            print_scores(&outcome.eval.scores);
            println!("localization {:.4}", outcome.eval.localization);
            println!("run written to {}", out_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
        } => {
            let cfg = run_config_for(&checkpoint, config.as_deref())?;
            let prepared = load_data(&data, &cfg)?;
            let model = train::restore(&cfg, &checkpoint)?;
            let eval = train::evaluate(&model, &prepared, &cfg)?;
            print_scores(&eval.scores);
            println!("localization {:.4}", eval.localization);
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(&config)?;
            let prepared = load_data(&data, &cfg)?;
            let jobs = ablate::grid(&cfg);
            let rows = ablate::run_jobs(&cfg, &prepared, &jobs, ablate::threads_from_env()?)?;
            let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            ablate::write_csv(&rows, std::io::BufWriter::new(file))?;
            print!("{}", report::format_table(&report::summarize(&rows)));
        }
        Command::GradCheck { module } => {
            let outcomes = checks::grad_suite(module.as_deref())?;
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.passed() { "ok" } else { "FAIL" };
                let kind = if o.negative_control { " (control)" } else { "" };
                println!(
                    "{status:<4} {:<10} {:<24} max_rel {:.3e} over {} entries{kind}",
                    o.module, o.name, o.max_rel_error, o.entries
                );
                failed += !o.passed() as usize;
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Report {
            metrics,
            svg,
            dump_prior,
            checkpoint,
            data,
        } => {
            let rows = report::read_metrics(&metrics)?;
            let summaries = report::summarize(&rows);
            print!("{}", report::format_table(&summaries));
            if let Some(path) = svg {
                std::fs::write(&path, report::render_svg(&summaries))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let (Some(dir), Some(checkpoint), Some(data)) = (dump_prior, checkpoint, data) {
                let cfg = run_config_for(&checkpoint, None)?;
                let prepared = load_data(&data, &cfg)?;
                let model = train::restore(&cfg, &checkpoint)?;
                let written = report::dump_prior_maps(&model, &prepared, &cfg, &dir)?;
                println!("wrote {} maps to {}", written.len(), dir.display());
            }
        }
    }
    Ok(())
}
