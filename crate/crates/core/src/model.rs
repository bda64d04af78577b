//! The assembled segmentation network.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::fie::Embedding;
use crate::nn::{join, parameter_count, Module, TensorRole};
use crate::tensor::{no_grad, Element, Tensor};

/// Trainable parameter counts per top-level module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

impl fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12}", "embedding", self.embedding)?;
        writeln!(f, "{:<10} {:>12}", "encoder", self.encoder)?;
        writeln!(f, "{:<10} {:>12}", "decoder", self.decoder)?;
        write!(f, "{:<10} {:>12}", "total", self.total)
    }
}

#[derive(Clone, Debug)]
pub struct TransCC<T: Element = f32> {
    pub config: ModelConfig,
    pub embedding: Embedding<T>,
    pub encoder: EncoderStack<T>,
    pub decoder: Decoder<T>,
}

impl<T: Element> TransCC<T> {
    /// Builds a freshly initialised network; weights depend only on `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(TransCC {
            embedding: Embedding::new(config, &mut rng)?,
            encoder: EncoderStack::new(config, &mut rng)?,
            decoder: Decoder::new(config, &mut rng)?,
            config: config.clone(),
        })
    }

    /// Class probabilities `[B, classes, H, W]`. `rng` drives dropout and is
    /// only consumed in training mode.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let emb = self.embedding.forward(x, train, rng)?;
        let enc = self.encoder.forward(&emb.tokens, emb.grid, train)?;
        self.decoder.forward(&enc.bottleneck, &enc.taps, &emb.stem, emb.grid, train)
    }

    /// Eval-mode vessel probabilities `[B, H, W]` without recording a tape.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        no_grad(|| vessel_channel(&self.forward(x, false, &mut rng)?))
    }

    pub fn count_params(&self) -> ParamCounts {
        let embedding = parameter_count(&self.embedding);
        let encoder = parameter_count(&self.encoder);
        let decoder = parameter_count(&self.decoder);
        ParamCounts {
            embedding,
            encoder,
            decoder,
            total: embedding + encoder + decoder,
        }
    }
}

/// Foreground (channel 1) slice of `[B, classes, H, W]` probabilities.
pub fn vessel_channel<T: Element>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    match *probs.shape() {
        [b, c, h, w] if c >= 2 => probs.narrow(1, 1, 1)?.reshape(&[b, h, w]),
        _ => Err(Error::shape("vessel_channel", format!("{:?}", probs.shape()))),
    }
}

impl<T: Element> Module<T> for TransCC<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}
