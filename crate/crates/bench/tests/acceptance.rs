//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anchorseg_bench::ablate::{experiments, Job, MetricsRow};
use anchorseg_bench::data::generate_dataset;
use anchorseg_bench::metrics::{ciou, giou, n_acc, prec_at_05, Mask};
use anchorseg_bench::report::{parse_pgm, spread};
use anchorseg_bench::train::{self, Prepared, TrainOutcome};
use anchorseg_core::checks::grad_suite;
use anchorseg_core::config::{Dims, LossWeights, RunConfig};
use anchorseg_core::grounding::{build_spatial_prior, ConvHeadParams};
use anchorseg_core::imaging::{parse_interp_oracle, GaussianSpec, GridMap, Resampler};
use anchorseg_core::objectives::{downsample_target, loss_m2t, loss_t2m};
use anchorseg_core::tensor::{ParamStore, Tape, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match grad_suite(None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let checks: Vec<_> = results.iter().filter(|o| !o.negative_control).collect();
    let controls: Vec<_> = results.iter().filter(|o| o.negative_control).collect();
    let worst = checks.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let weakest_control = controls.iter().map(|o| o.max_rel_error).fold(f64::INFINITY, f64::min);
    let failed: Vec<String> = results.iter().filter(|o| !o.passed()).map(|o| format!("{}/{}", o.module, o.name)).collect();
    outcome(
        failed.is_empty() && !controls.is_empty() && within(elapsed, 60.0),
        format!(
            "{} checks, max rel error {worst:.2e}; {} controls, min {weakest_control:.2e}; {:.1}s{}",
            checks.len(),
            controls.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn interpolation_suite() -> Outcome {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/interp_oracle.bin");
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("{}: {e}", path.display())),
    };
    let records = match parse_interp_oracle(&bytes) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("fixture parse: {e}")),
    };
    let mut worst = 0f64;
    for r in &records {
        match r.evaluate() {
            Ok(got) => {
                for (a, b) in got.data.iter().zip(&r.expected) {
                    worst = worst.max((a - b).abs() as f64);
                }
            }
            Err(e) => return outcome(false, format!("record evaluation: {e}")),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut property_failures = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..30), rng.gen_range(1..30));
        let (oh, ow) = (rng.gen_range(1..50), rng.gen_range(1..50));
        let aa = rng.gen_bool(0.5);
        let value: f64 = rng.gen_range(-3.0..3.0);
        for (i, o) in [(h, oh), (w, ow)] {
            let r = Resampler::<f64>::bilinear(i, o, aa).unwrap();
            for k in 0..o {
                let total: f64 = r.taps(k).map(|(_, w)| w).sum();
                property_failures += ((total - 1.0).abs() > 1e-12) as usize;
            }
        }
        let m = GridMap::plane(h, w, vec![value; h * w]).unwrap();
        let out = anchorseg_core::imaging::bilinear_resize(&m, oh, ow, aa).unwrap();
        property_failures += out.data.iter().filter(|&&x| (x - value).abs() > 1e-12).count();
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-5 && property_failures == 0 && within(elapsed, 10.0),
        format!(
            "{} fixtures, max abs error {worst:.2e}; 1000 random resizes, {property_failures} property violations; {:.2}s",
            records.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn shape_suite() -> Outcome {
    let start = Instant::now();
    let dims = Dims::paper_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let head = ConvHeadParams::init(&mut store, &dims, &mut rng);
    let tape = Tape::new();
    let v = store.bind_frozen(&tape);
    let raw = tape.constant(Tensor::randn([dims.n_tokens()], 1.0, &mut rng));
    let trace = match build_spatial_prior(raw, &dims, &head, &v) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("pipeline error: {e}")),
    };
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("normalize", vec![576]),
        ("grid", vec![24, 24]),
        ("upsample", vec![336, 336]),
        ("crop", vec![252, 336]),
        ("restore", vec![480, 640]),
        ("long_side_pad", vec![1, 256, 256]),
        ("head.conv1", vec![4, 128, 128]),
        ("head.conv2", vec![16, 64, 64]),
        ("head.conv3", vec![256, 64, 64]),
        ("prior", vec![256, 64, 64]),
    ];
    let padded = trace.padded.value();
    let (hs, ws) = trace.scaled;
    let pad_nonzero = (0..256 * 256)
        .filter(|&i| (i / 256 >= hs || i % 256 >= ws) && padded.data()[i].to_bits() != 0)
        .count();
    let elapsed = start.elapsed();
    let shapes_ok = trace.shapes == expected;
    outcome(
        shapes_ok && trace.similarity.crop == (252, 336) && (hs, ws) == (192, 256) && pad_nonzero == 0 && within(elapsed, 5.0),
        format!(
            "{} stages {}, crop {:?}, scaled {:?}, {pad_nonzero} non-zero pad entries; {:.2}s",
            trace.shapes.len(),
            if shapes_ok { "as expected" } else { "MISMATCH" },
            trace.similarity.crop,
            trace.scaled,
            elapsed.as_secs_f64()
        ),
    )
}

fn tmcc_suite() -> Outcome {
    let start = Instant::now();
    let w = LossWeights::default();
    let floor = 2.0 * -(1.0f64 - 1e-7).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_equal, mut probe_decreases, mut leaked) = (0f64, 0usize, 0usize);
    for _ in 0..40 {
        let (h, wd) = (24, 32);
        let (y0, x0) = (rng.gen_range(0..12), rng.gen_range(0..16));
        let (y1, x1) = (rng.gen_range(y0 + 1..=h), rng.gen_range(x0 + 1..=wd));
        let mask = GridMap::plane(
            h,
            wd,
            (0..h * wd).map(|i| ((y0..y1).contains(&(i / wd)) && (x0..x1).contains(&(i % wd))) as u8 as f64).collect(),
        )
        .unwrap();
        let grid = downsample_target(&mask, 8, 32, &GaussianSpec { sigma: 1.0, ksize: 1 }).unwrap();
        let tape = Tape::new();
        let m = tape.leaf(Tensor::new([h, wd], mask.data.clone()).unwrap());
        let g = tape.leaf(Tensor::new([64], grid.clone()).unwrap());
        let s_up = tape.leaf(Tensor::new([h, wd], mask.data.clone()).unwrap());
        let s = tape.leaf(Tensor::new([64], grid.clone()).unwrap());
        let t2m = loss_t2m(s_up, m, &w).unwrap();
        let m2t = loss_m2t(s, g, &w).unwrap();
        worst_equal = worst_equal
            .max(t2m.value().item().unwrap() - floor)
            .max(m2t.value().item().unwrap() - floor);
        let grads = tape.backward(t2m.add(m2t).unwrap()).unwrap();
        leaked += grads.wrt(&m).data().iter().chain(grads.wrt(&g).data()).filter(|&&x| x != 0.0).count();

        let eval = |values: &[f64]| {
            let tape = Tape::new();
            let a = tape.constant(Tensor::new([64], values.to_vec()).unwrap());
            let b = tape.constant(Tensor::new([64], grid.clone()).unwrap());
            loss_m2t(a, b, &w).unwrap().value().item().unwrap()
        };
        let base = eval(&grid);
        for i in 0..64 {
            for sign in [-1e-3, 1e-3] {
                let mut p = grid.clone();
                p[i] = (p[i] + sign).clamp(0.0, 1.0);
                probe_decreases += (eval(&p) < base) as usize;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_equal <= 1e-3 && probe_decreases == 0 && leaked == 0 && within(elapsed, 30.0),
        format!(
            "binary targets: loss at equality ≤ floor + {worst_equal:.1e}; {probe_decreases} probe decreases over 5120 moves; {leaked} non-zero target gradients; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Pixel-set oracle for one pair.
fn sets(pred: &Mask, gt: &Mask) -> (usize, usize) {
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i]).collect();
    (p.intersection(&g).count(), p.union(&g).count())
}

fn metric_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n_samples = rng.gen_range(1..6);
        let (mut preds, mut gts, mut nulls) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n_samples {
            let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let density: f64 = rng.gen_range(0.0..1.0);
            let is_null = rng.gen_bool(0.3);
            let p: Mask = (0..h * w).map(|_| rng.gen_bool(density)).collect();
            let g: Mask = (0..h * w).map(|_| !is_null && rng.gen_bool(density)).collect();
            preds.push(p);
            gts.push(g);
            nulls.push(is_null);
        }
        let pairs: Vec<(usize, usize)> = preds.iter().zip(&gts).map(|(p, g)| sets(p, g)).collect();
        let per: Vec<f64> = pairs.iter().map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 }).collect();
        let oracle_giou = per.iter().sum::<f64>() / per.len() as f64;
        let (si, su) = pairs.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        let oracle_ciou = if su == 0 { 1.0 } else { si as f64 / su as f64 };
        let eligible: Vec<f64> = per.iter().zip(&gts).filter(|(_, g)| g.iter().any(|&x| x)).map(|(v, _)| *v).collect();
        let oracle_prec = (!eligible.is_empty())
            .then(|| eligible.iter().filter(|&&v| v >= 0.5).count() as f64 / eligible.len() as f64);
        let null_preds: Vec<&Mask> = preds.iter().zip(&nulls).filter(|(_, &n)| n).map(|(p, _)| p).collect();
        let oracle_nacc = (!null_preds.is_empty())
            .then(|| null_preds.iter().filter(|p| p.iter().all(|&x| !x)).count() as f64 / null_preds.len() as f64);

        mismatches += (giou(&preds, &gts).unwrap() != oracle_giou) as usize;
        mismatches += (ciou(&preds, &gts).unwrap() != oracle_ciou) as usize;
        mismatches += (prec_at_05(&preds, &gts).ok() != oracle_prec) as usize;
        mismatches += (n_acc(&preds, &gts, &nulls).unwrap() != oracle_nacc) as usize;
    }

    let gt8: Mask = (0..16).map(|i| i < 8).collect();
    let p4: Mask = (0..16).map(|i| i < 4).collect();
    let one: Mask = vec![true];
    let worked_giou = giou(&[p4.clone(), gt8.clone()], &[gt8.clone(), gt8.clone()]).unwrap();
    let worked_ciou = ciou(&[p4, one.clone()], &[gt8, one]).unwrap();
    let examples_ok = worked_giou == 0.75 && (worked_ciou - 5.0 / 9.0).abs() < 1e-15;
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && examples_ok && within(elapsed, 5.0),
        format!(
            "500 random batches, {mismatches} mismatches; worked gIoU {worked_giou}, cIoU {worked_ciou:.4}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

struct Benchmark {
    data: Prepared,
    dataset_path: tempfile::TempPath,
    rows: Vec<MetricsRow>,
    slowest: Duration,
    /// The full configuration at the base seed, kept for the localization check.
    full: (RunConfig, TrainOutcome),
}

fn toy_benchmark() -> anchorseg_bench::Result<Benchmark> {
    let base = RunConfig::default();
    let ds = generate_dataset(&base.dims, &base.data, 2024)?;
    let file = tempfile::NamedTempFile::new()?;
    ds.save(file.path())?;
    let data = Prepared::new(&ds, &base)?;
    let (mut rows, mut slowest, mut full) = (Vec::new(), Duration::ZERO, None);
    for variant in experiments(base.dims.n_bank) {
        if !["exp1", "exp3", "exp5"].contains(&variant.id.as_str()) {
            continue;
        }
        for seed in base.seed..base.seed + 3 {
            let job = Job { variant: variant.clone(), seed };
            let cfg = job.config(&base);
            let start = Instant::now();
            let run = train::train(&cfg, &data)?;
            slowest = slowest.max(start.elapsed());
            let s = &run.eval.scores;
            rows.push(MetricsRow {
                run_id: job.run_id(),
                ablation_id: variant.id.clone(),
                seed,
                giou: s.giou,
                ciou: s.ciou,
                prec05: s.prec05,
                nacc: s.nacc,
            });
            if variant.id == "exp5" && seed == base.seed {
                full = Some((cfg, run));
            }
        }
    }
    Ok(Benchmark {
        data,
        dataset_path: file.into_temp_path(),
        rows,
        slowest,
        full: full.expect("exp5 is part of the grid"),
    })
}

fn median_giou(rows: &[MetricsRow], id: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.ablation_id == id).map(|r| r.giou).collect();
    spread(&v).map_or(f64::NAN, |s| s.median)
}

fn directionality(bench: &Benchmark) -> Outcome {
    let (e1, e3, e5) = (
        median_giou(&bench.rows, "exp1"),
        median_giou(&bench.rows, "exp3"),
        median_giou(&bench.rows, "exp5"),
    );
    outcome(
        e5 > e1 && e3 > e1 && within(bench.slowest, 1800.0),
        format!(
            "median gIoU exp5 {e5:.4}, exp3 {e3:.4}, exp1 {e1:.4} (need exp5 > exp1 and exp3 > exp1); slowest run {:.0}s",
            bench.slowest.as_secs_f64()
        ),
    )
}

fn localization(bench: &Benchmark) -> anchorseg_bench::Result<Outcome> {
    let (cfg, outcome_run) = &bench.full;
    let dir = tempfile::tempdir()?;
    let run_dir = dir.path().join("run");
    train::write_run(&run_dir, cfg, outcome_run)?;
    let metrics = dir.path().join("metrics.csv");
    std::fs::write(&metrics, format!("{}\n", anchorseg_bench::ablate::HEADER))?;
    let maps = dir.path().join("maps");
    let status = Command::new(env!("CARGO_BIN_EXE_anchorseg"))
        .args(["report", "--metrics"])
        .arg(&metrics)
        .arg("--dump-prior")
        .arg(&maps)
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint.asgc"))
        .arg("--data")
        .arg(&bench.dataset_path)
        .output()?;
    if !status.status.success() {
        return Ok(outcome(false, format!("report failed: {}", String::from_utf8_lossy(&status.stderr))));
    }
    let (mut hits, mut eligible) = (0, 0);
    for i in bench.data.eval_range() {
        if bench.data.null_flags[i] {
            continue;
        }
        let text = std::fs::read_to_string(maps.join(format!("sample_{i:04}_similarity.pgm")))?;
        let (_, _, levels) = parse_pgm(&text)?;
        let arg = levels.iter().enumerate().fold(0, |b, (j, &x)| if x > levels[b] { j } else { b });
        eligible += 1;
        hits += bench.data.masks[i][arg] as usize;
    }
    let rate = hits as f64 / eligible.max(1) as f64;
    Ok(outcome(
        rate >= 0.7,
        format!("similarity argmax inside the target for {hits}/{eligible} = {rate:.3} of non-null eval samples (need ≥ 0.70)"),
    ))
}

fn determinism() -> anchorseg_bench::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.steps = 3;
    cfg.data.n_samples = 30;
    let config = dir.path().join("config.toml");
    std::fs::write(&config, cfg.to_toml())?;
    let data = dir.path().join("data.asg");
    let bin = env!("CARGO_BIN_EXE_anchorseg");
    let gen = Command::new(bin)
        .args(["gen-data", "--seed", "7", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&data)
        .output()?;
    if !gen.status.success() {
        return Ok(outcome(false, format!("gen-data failed: {}", String::from_utf8_lossy(&gen.stderr))));
    }
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("ablate{k}.csv"));
        let run = Command::new(bin)
            .env("ANCHORSEG_THREADS", threads)
            .arg("ablate")
            .arg("--config")
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .output()?;
        if !run.status.success() {
            return Ok(outcome(false, format!("ablate failed: {}", String::from_utf8_lossy(&run.stderr))));
        }
        outputs.push(std::fs::read(&out)?);
    }
    let rows = String::from_utf8_lossy(&outputs[0]).lines().count().saturating_sub(1);
    Ok(outcome(
        outputs[0] == outputs[1] && rows == 27,
        format!(
            "two ablate invocations (1 and 2 threads), {rows} rows, {} bytes, {}",
            outputs[0].len(),
            if outputs[0] == outputs[1] { "byte-identical" } else { "DIFFERENT" }
        ),
    ))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    let as_outcome = |r: anchorseg_bench::Result<Outcome>| r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));

    if wanted(1) {
        record(1, "gradient suite", gradient_suite());
    }
    if wanted(2) {
        record(2, "interpolation oracle", interpolation_suite());
    }
    if wanted(3) {
        record(3, "prior shape trace", shape_suite());
    }
    if wanted(4) {
        record(4, "cycle consistency", tmcc_suite());
    }
    if wanted(5) {
        record(5, "metric oracle", metric_suite());
    }
    if wanted(6) || wanted(7) {
        match toy_benchmark() {
            Ok(bench) => {
                if wanted(6) {
                    record(6, "ablation directionality", directionality(&bench));
                }
                if wanted(7) {
                    record(7, "similarity localization", as_outcome(localization(&bench)));
                }
            }
            Err(e) => {
                for (n, name) in [(6, "ablation directionality"), (7, "similarity localization")] {
                    if wanted(n) {
                        record(n, name, outcome(false, format!("benchmark error: {e}")));
                    }
                }
            }
        }
    }
    if wanted(8) {
        record(8, "ablate determinism", as_outcome(determinism()));
    }

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.passed).map(|(n, _, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
