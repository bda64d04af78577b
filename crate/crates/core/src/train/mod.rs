//! Optimisation, training loop, evaluation, and checkpoints.

mod adam;
pub mod checkpoint;

pub use adam::{Adam, DEFAULT_LEARNING_RATE};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_indices, Sample, SampleBatch};
use crate::error::{Error, Result};
use crate::loss::bce;
use crate::metrics::{Mask, MetricsReport, SampleMetrics};
use crate::model::{vessel_channel, TransCC};
use crate::nn::zero_grad;
use crate::tensor::Tensor;

/// Foreground probability above which a pixel is labelled vessel.
pub const THRESHOLD: f64 = 0.5;
pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.tcc";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 900,
            batch_size: 4,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} invalid", self.learning_rate)));
        }
        Ok(())
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.tcc")
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains `model` on `samples` and returns the per-iteration loss.
///
/// Batch order and dropout masks depend only on `cfg.seed`. With a run
/// directory, the loss trace is written to `loss.csv`, intermediate
/// checkpoints every `checkpoint_every` iterations, and the final model to
/// `model.tcc`.
pub fn train(
    model: &mut TransCC<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let size = model.config.image_size;
    if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width) != (size, size)) {
        return Err(Error::shape(
            "train",
            format!("{} is {}x{} but the model expects {size}x{size}", s.id, s.image.height, s.image.width),
        ));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let picked: Vec<&Sample> = batch_indices(samples.len(), cfg.batch_size, cfg.seed, it)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let batch = SampleBatch::collate(&picked)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64 + 1);
        let probs = model.forward(&batch.images, true, &mut rng)?;
        let loss = bce(&vessel_channel(&probs)?, &batch.targets)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(Error::NanLoss(it + 1));
        }
        loss.backward()?;
        drop((loss, probs));
        adam.step(model)?;
        zero_grad(model);
        losses.push(value);
        on_iteration(it + 1, value);
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(checkpoint_name(it + 1)), model)?;
                write_file(&dir.join(LOSS_CSV), &loss_csv(&losses))?;
            }
        }
    }
    if let Some(dir) = run_dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), model)?;
        write_file(&dir.join(LOSS_CSV), &loss_csv(&losses))?;
    }
    Ok(losses)
}

/// Metrics of the binarised predictions of `predict`, which maps images
/// `[B, 1, H, W]` to foreground probabilities `[B, H, W]`.
pub fn evaluate_with(
    samples: &[Sample],
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = SampleBatch::collate(&chunk.iter().collect::<Vec<_>>())?;
        let probs = predict(&batch.images)?;
        let [_, h, w] = match *probs.shape() {
            [b, h, w] if b == chunk.len() => [b, h, w],
            _ => return Err(Error::shape("evaluate", format!("prediction shape {:?}", probs.shape()))),
        };
        for (s, p) in chunk.iter().zip(probs.data().chunks(h * w)) {
            let pred = Mask::threshold(h, w, p, THRESHOLD)?;
            rows.push(SampleMetrics::compute(&s.id, &pred, &s.mask)?);
        }
    }
    MetricsReport::new(rows)
}

/// Evaluates `model` in inference mode.
pub fn evaluate(model: &mut TransCC<f32>, samples: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    evaluate_with(samples, batch_size, |x| model.predict(x))
}
