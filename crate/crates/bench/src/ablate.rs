//! Ablation grid: query-bank sizes and component toggles, three seeds each.

use std::io::Write;

use rayon::prelude::*;

use anchorseg_core::config::{RunConfig, Toggles};

use crate::error::{BenchError, Result};
use crate::train::{train, Prepared};

pub const BANK_SIZES: [usize; 4] = [4, 8, 16, 32];
pub const SEEDS_PER_CONFIG: u64 = 3;
pub const HEADER: &str = "run_id,ablation_id,seed,giou,ciou,prec05,nacc";

/// One grid configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub id: String,
    pub n_bank: usize,
    pub toggles: Toggles,
}

fn toggles(prior: bool, tmcc: bool, contextual: bool) -> Toggles {
    Toggles {
        use_prior: prior,
        use_tmcc: tmcc,
        use_contextual: contextual,
        ..Toggles::default()
    }
}

/// Component rows: `exp1` has neither prior nor cycle loss, `exp5` has
/// everything.
pub fn experiments(n_bank: usize) -> Vec<Variant> {
    [
        ("exp1", toggles(false, false, true)),
        ("exp2", toggles(false, true, true)),
        ("exp3", toggles(true, false, true)),
        ("exp4", toggles(true, true, false)),
        ("exp5", toggles(true, true, true)),
    ]
    .into_iter()
    .map(|(id, t)| Variant {
        id: id.into(),
        n_bank,
        toggles: t,
    })
    .collect()
}

pub fn variants(base: &RunConfig) -> Vec<Variant> {
    let mut out: Vec<Variant> = BANK_SIZES
        .iter()
        .map(|&n| Variant {
            id: format!("nbank{n}"),
            n_bank: n,
            toggles: base.ablation,
        })
        .collect();
    out.extend(experiments(base.dims.n_bank));
    out
}

/// A single (variant, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub variant: Variant,
    pub seed: u64,
}

impl Job {
    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.variant.id, self.seed)
    }

    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = self.seed;
        cfg.dims.n_bank = self.variant.n_bank;
        cfg.ablation = self.variant.toggles;
        cfg
    }
}

pub fn grid(base: &RunConfig) -> Vec<Job> {
    variants(base)
        .into_iter()
        .flat_map(|variant| {
            (0..SEEDS_PER_CONFIG).map(move |k| Job {
                variant: variant.clone(),
                seed: base.seed + k,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub ablation_id: String,
    pub seed: u64,
    pub giou: f64,
    pub ciou: f64,
    pub prec05: f64,
    pub nacc: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{}",
            self.run_id,
            self.ablation_id,
            self.seed,
            self.giou,
            self.ciou,
            self.prec05,
            self.nacc.map(|v| format!("{v:.6}")).unwrap_or_default()
        )
    }
}

pub fn run_job(base: &RunConfig, data: &Prepared, job: &Job) -> Result<MetricsRow> {
    let cfg = job.config(base);
    let s = train(&cfg, data)?.eval.scores;
    Ok(MetricsRow {
        run_id: job.run_id(),
        ablation_id: job.variant.id.clone(),
        seed: job.seed,
        giou: s.giou,
        ciou: s.ciou,
        prec05: s.prec05,
        nacc: s.nacc,
    })
}

/// Runs `jobs` on up to `threads` workers; rows come back in job order.
pub fn run_jobs(base: &RunConfig, data: &Prepared, jobs: &[Job], threads: usize) -> Result<Vec<MetricsRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| BenchError::Metric(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|job| run_job(base, data, job)).collect())
}

/// Worker count from `ANCHORSEG_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("ANCHORSEG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(anchorseg_core::Error::Config(format!("ANCHORSEG_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}

pub fn write_csv(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv_line())?;
    }
    Ok(())
}
