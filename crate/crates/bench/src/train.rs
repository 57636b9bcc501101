//! Training loop and held-out evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use anchorseg_core::config::RunConfig;
use anchorseg_core::imaging::GridMap;
use anchorseg_core::model::{Model, SampleInputs, SampleTargets};
use anchorseg_core::tensor::{AdamW, Tape, Tensor};

use crate::data::Dataset;
use crate::encode::{FeatureEncoder, SceneEncoder};
use crate::error::{BenchError, Result};
use crate::metrics::{score, threshold_logits, Mask, Scores};

/// Encoded inputs and targets, reusable by every run with the same dims.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: Vec<SampleInputs<f32>>,
    pub targets: Vec<SampleTargets<f32>>,
    pub masks: Vec<Mask>,
    pub null_flags: Vec<bool>,
    pub n_train: usize,
}

impl Prepared {
    pub fn new(ds: &Dataset, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        ds.check_dims(&cfg.dims)?;
        let dims = &cfg.dims;
        let scene = SceneEncoder::new(dims, cfg.encoder_seed)?;
        let features = FeatureEncoder::new(dims, cfg.encoder_seed)?;
        let mut out = Self {
            inputs: Vec::with_capacity(ds.samples.len()),
            targets: Vec::with_capacity(ds.samples.len()),
            masks: Vec::with_capacity(ds.samples.len()),
            null_flags: Vec::with_capacity(ds.samples.len()),
            n_train: ((ds.samples.len() as f64) * cfg.data.train_fraction).round() as usize,
        };
        for s in &ds.samples {
            if let Some(&bad) = s.symbols.iter().find(|&&t| t as usize >= dims.vocab) {
                return Err(anchorseg_core::Error::Config(format!(
                    "symbol {bad} outside the vocabulary of {}",
                    dims.vocab
                ))
                .into());
            }
            out.inputs.push(SampleInputs {
                tokens: scene.encode(&s.image)?,
                features: features.encode(&s.image)?,
                symbols: s.symbols.clone(),
            });
            let mask = GridMap::plane(dims.h, dims.w, s.mask.iter().map(|&m| m as f32).collect())?;
            out.targets.push(SampleTargets::from_mask(&mask, dims, &cfg.gaussian)?);
            out.masks.push(s.mask.iter().map(|&m| m == 1).collect());
            out.null_flags.push(s.is_null);
        }
        if out.n_train == 0 || out.n_train >= ds.samples.len() {
            return Err(anchorseg_core::Error::Config(format!(
                "train fraction leaves {} of {} samples for training",
                out.n_train,
                ds.samples.len()
            ))
            .into());
        }
        Ok(out)
    }

    pub fn eval_range(&self) -> std::ops::Range<usize> {
        self.n_train..self.inputs.len()
    }
}

/// Held-out results of one model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Scores,
    /// Fraction of non-null samples whose similarity-map argmax lies inside
    /// the target.
    pub localization: f64,
    pub predictions: Vec<Mask>,
}

pub fn evaluate(model: &Model<f32>, data: &Prepared, cfg: &RunConfig) -> Result<Evaluation> {
    let range = data.eval_range();
    let mut predictions = Vec::with_capacity(range.len());
    let (mut hits, mut eligible) = (0usize, 0usize);
    for i in range.clone() {
        let tape = Tape::new();
        let v = model.store.bind_frozen(&tape);
        let fwd = model.forward(&tape, &v, &data.inputs[i], &cfg.ablation)?;
        predictions.push(threshold_logits(fwd.logits.value().data()));
        if !data.null_flags[i] {
            eligible += 1;
            let sim = fwd.similarity[0].upsampled.value();
            if data.masks[i][argmax(sim.data())] {
                hits += 1;
            }
        }
    }
    let scores = score(&predictions, &data.masks[range.clone()], &data.null_flags[range])?;
    Ok(Evaluation {
        scores,
        localization: if eligible == 0 { 0.0 } else { hits as f64 / eligible as f64 },
        predictions,
    })
}

/// First index of the maximum.
pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// `(step, evaluation)` for periodic evaluations.
    pub history: Vec<(usize, Scores)>,
    pub eval: Evaluation,
}

/// One optimizer step over `batch`; returns the mean total loss.
fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    data: &Prepared,
    batch: &[usize],
    cfg: &RunConfig,
    step: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let v = model.store.bind(&tape);
    let mut total = None;
    let mut parts = Vec::with_capacity(batch.len());
    for &i in batch {
        let fwd = model.forward(&tape, &v, &data.inputs[i], &cfg.ablation)?;
        let terms = model.loss(&tape, &fwd, &data.targets[i], &cfg.loss, &cfg.ablation)?;
        parts.push((
            i,
            terms.mask.value().data()[0],
            terms.tmcc.map(|t| t.value().data()[0]),
            terms.total.value().data()[0],
        ));
        total = Some(match total {
            None => terms.total,
            Some(acc) => terms.total.add(acc)?,
        });
    }
    let mean = total.expect("batch is not empty").scale(1.0 / batch.len() as f32);
    let value = mean.value().data()[0] as f64;
    if !value.is_finite() {
        let detail = parts
            .iter()
            .map(|(i, m, t, tot)| format!("sample {i}: mask {m}, tmcc {t:?}, total {tot}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(BenchError::Diverged { step, detail });
    }
    let grads = tape.backward(mean)?;
    model.store.zero_grad();
    model.store.accumulate(&grads, &v);
    let norm = opt.step(&mut model.store);
    if !norm.is_finite() {
        return Err(BenchError::Diverged {
            step,
            detail: format!("gradient norm {norm}"),
        });
    }
    Ok(value)
}

pub fn train(cfg: &RunConfig, data: &Prepared) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(&cfg.dims, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1e);
    let mut order: Vec<usize> = (0..data.n_train).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut history = Vec::new();
    let batch_size = cfg.batch_size.min(data.n_train);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        losses.push(train_step(&mut model, &mut opt, data, &batch, cfg, step)?);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps {
            history.push((step, evaluate(&model, data, cfg)?.scores));
        }
    }
    let eval = evaluate(&model, data, cfg)?;
    history.push((cfg.steps, eval.scores));
    Ok(TrainOutcome {
        model,
        losses,
        history,
        eval,
    })
}

/// Writes `checkpoint.asgc`, `config.toml`, `loss.csv` and `metrics.csv`.
pub fn write_run(out_dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    crate::checkpoint::save(&outcome.model.store, &out_dir.join("checkpoint.asgc"))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut loss = csv::Writer::from_path(out_dir.join("loss.csv")).map_err(csv_err)?;
    loss.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in outcome.losses.iter().enumerate() {
        loss.write_record([(i + 1).to_string(), format!("{l:.6}")]).map_err(csv_err)?;
    }
    loss.flush()?;
    let mut metrics = csv::Writer::from_path(out_dir.join("metrics.csv")).map_err(csv_err)?;
    metrics
        .write_record(["step", "giou", "ciou", "prec05", "nacc"])
        .map_err(csv_err)?;
    for (step, s) in &outcome.history {
        metrics
            .write_record([
                step.to_string(),
                format!("{:.6}", s.giou),
                format!("{:.6}", s.ciou),
                format!("{:.6}", s.prec05),
                s.nacc.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
    }
    metrics.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> BenchError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BenchError::Io(io),
        other => BenchError::Metric(format!("csv: {other:?}")),
    }
}

/// Model restored from a checkpoint.
pub fn restore(cfg: &RunConfig, checkpoint: &Path) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(&cfg.dims, cfg.seed)?;
    model.load(crate::checkpoint::load(checkpoint)?)?;
    Ok(model)
}

/// Raw responses of the first anchor reshaped to `[G, G]`.
pub fn similarity_grid(model: &Model<f32>, inputs: &SampleInputs<f32>, cfg: &RunConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let tape = Tape::new();
    let v = model.store.bind_frozen(&tape);
    let fwd = model.forward(&tape, &v, inputs, &cfg.ablation)?;
    let s = &fwd.similarity[0];
    Ok((s.grid.value().as_ref().clone(), s.upsampled.value().as_ref().clone()))
}
