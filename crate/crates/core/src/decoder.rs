//! Convolutional decoder that climbs from the token grid back to the input
//! resolution, fusing encoder taps and the half-resolution stem on the way.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fie::tokens_to_map;
use crate::nn::{join, BatchNorm2d, Conv2d, ConvTranspose2d, Module, TensorRole};
use crate::tensor::{Element, Tensor};

/// `conv 3x3 -> BatchNorm -> ReLU`, width-changing.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> ConvBlock<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(c_in, c_out, 3, 1, 1, 1, rng)?,
            bn: BatchNorm2d::new(c_out),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu())
    }
}

impl<T: Element> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// `deconv 2x2/s2` followed by a [`ConvBlock`].
#[derive(Clone, Debug)]
pub struct UpBlock<T: Element> {
    pub up: ConvTranspose2d<T>,
    pub block: ConvBlock<T>,
}

impl<T: Element> UpBlock<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(UpBlock {
            up: ConvTranspose2d::upsample2(c_in, c_out, rng),
            block: ConvBlock::new(c_out, c_out, rng)?,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.block.forward(&self.up.forward(x)?, train)
    }
}

impl<T: Element> Module<T> for UpBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.block.visit(&join(prefix, "block"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
    }
}

/// Where a decoder stage takes its skip features from.
#[derive(Clone, Debug)]
pub enum Skip<T: Element> {
    /// Encoder tap at the given depth, lifted by a chain of up-blocks.
    Tap { depth: usize, chain: Vec<UpBlock<T>> },
    /// Half-resolution stem features, lifted by a single deconvolution.
    Stem(ConvTranspose2d<T>),
    None,
}

impl<T: Element> Skip<T> {
    fn channels(&self) -> usize {
        match self {
            Skip::Tap { chain, .. } => chain.last().map_or(0, |b| b.block.conv.out_channels()),
            Skip::Stem(up) => up.out_channels(),
            Skip::None => 0,
        }
    }
}

impl<T: Element> Module<T> for Skip<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        match self {
            Skip::Tap { chain, .. } => chain.visit(&join(prefix, "tap"), f),
            Skip::Stem(up) => up.visit(&join(prefix, "stem"), f),
            Skip::None => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        match self {
            Skip::Tap { chain, .. } => chain.visit_mut(&join(prefix, "tap"), f),
            Skip::Stem(up) => up.visit_mut(&join(prefix, "stem"), f),
            Skip::None => {}
        }
    }
}

/// One doubling of resolution: upsample the running map, concatenate the
/// skip, fuse.
#[derive(Clone, Debug)]
pub struct DecoderStage<T: Element> {
    pub up: ConvTranspose2d<T>,
    pub skip: Skip<T>,
    pub fuse: ConvBlock<T>,
}

impl<T: Element> Module<T> for DecoderStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.skip.visit(&join(prefix, "skip"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.skip.visit_mut(&join(prefix, "skip"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Element> {
    pub stages: Vec<DecoderStage<T>>,
    pub head: Conv2d<T>,
}

impl<T: Element> Decoder<T> {
    /// Stage `i` (0-based, coarsest first) draws its skip from the tap
    /// `len(taps) - 2 - i` through `i + 1` up-blocks while such a tap
    /// exists; the last stage always fuses the stem features.
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let stages = cfg.stages();
        if cfg.decoder_channels.len() != stages {
            return Err(Error::InvalidConfig(format!(
                "{} decoder widths for {stages} stages",
                cfg.decoder_channels.len()
            )));
        }
        let skip_taps = cfg.taps.len().saturating_sub(1);
        if stages == 0 || cfg.skip_channels.len() != skip_taps || skip_taps >= stages {
            return Err(Error::InvalidConfig(format!(
                "{} skip widths for {} taps and {stages} stages",
                cfg.skip_channels.len(),
                cfg.taps.len()
            )));
        }
        let mut out = Vec::with_capacity(stages);
        let mut c_prev = cfg.embed_dim;
        for (i, &c_stage) in cfg.decoder_channels.iter().enumerate() {
            let up = ConvTranspose2d::upsample2(c_prev, c_stage, rng);
            let skip = if i + 1 == stages {
                Skip::Stem(ConvTranspose2d::upsample2(cfg.stem_channels(), cfg.stem_channels(), rng))
            } else if i < skip_taps {
                let width = cfg.skip_channels[i];
                let mut chain = Vec::with_capacity(i + 1);
                let mut c = cfg.embed_dim;
                for _ in 0..=i {
                    chain.push(UpBlock::new(c, width, rng)?);
                    c = width;
                }
                Skip::Tap {
                    depth: cfg.taps[skip_taps - 1 - i],
                    chain,
                }
            } else {
                Skip::None
            };
            let fuse = ConvBlock::new(c_stage + skip.channels(), c_stage, rng)?;
            out.push(DecoderStage { up, skip, fuse });
            c_prev = c_stage;
        }
        Ok(Decoder {
            stages: out,
            head: Conv2d::new(c_prev, cfg.num_classes, 1, 1, 0, 1, rng)?,
        })
    }

    /// Per-pixel class logits `[B, classes, H, W]`.
    pub fn logits(
        &mut self,
        bottleneck: &Tensor<T>,
        taps: &BTreeMap<usize, Tensor<T>>,
        stem: &Tensor<T>,
        grid: (usize, usize),
        train: bool,
    ) -> Result<Tensor<T>> {
        let mut x = tokens_to_map(bottleneck, grid)?;
        for stage in &mut self.stages {
            let up = stage.up.forward(&x)?;
            let fused_in = match &mut stage.skip {
                Skip::Tap { depth, chain } => {
                    let tap = taps
                        .get(depth)
                        .ok_or_else(|| Error::shape("decoder", format!("missing encoder tap {depth}")))?;
                    let mut s = tokens_to_map(tap, grid)?;
                    for block in chain.iter_mut() {
                        s = block.forward(&s, train)?;
                    }
                    Tensor::concat(&[&up, &s], 1)?
                }
                Skip::Stem(lift) => Tensor::concat(&[&up, &lift.forward(stem)?], 1)?,
                Skip::None => up,
            };
            x = stage.fuse.forward(&fused_in, train)?;
        }
        self.head.forward(&x)
    }

    /// Per-pixel class probabilities (softmax over the channel axis).
    pub fn forward(
        &mut self,
        bottleneck: &Tensor<T>,
        taps: &BTreeMap<usize, Tensor<T>>,
        stem: &Tensor<T>,
        grid: (usize, usize),
        train: bool,
    ) -> Result<Tensor<T>> {
        self.logits(bottleneck, taps, stem, grid, train)?.softmax(1)
    }
}

impl<T: Element> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.stages.visit(&join(prefix, "stages"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.stages.visit_mut(&join(prefix, "stages"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(size: usize) -> ModelConfig {
        ModelConfig {
            image_size: size,
            embed_dim: 16,
            num_heads: 2,
            depth: 4,
            fie_channels: vec![4, 6, 8, 10],
            decoder_channels: vec![12, 8, 6, 4],
            skip_channels: vec![8, 6, 4],
            taps: vec![1, 2, 3, 4],
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, BTreeMap<usize, Tensor<f32>>, Tensor<f32>) {
        let g = cfg.grid();
        let taps: BTreeMap<_, _> = cfg
            .taps
            .iter()
            .map(|&d| (d, random_tensor(&[b, g * g, cfg.embed_dim], 1.0, rng).cast()))
            .collect();
        let bottleneck = taps[cfg.taps.last().unwrap()].clone();
        let half = cfg.image_size / 2;
        let stem = random_tensor(&[b, cfg.stem_channels(), half, half], 1.0, rng).cast();
        (bottleneck, taps, stem)
    }

    #[test]
    fn output_is_full_resolution_simplex() {
        for size in [32, 48] {
            let cfg = small_cfg(size);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut dec = Decoder::<f32>::new(&cfg, &mut rng).unwrap();
            let (z, taps, stem) = inputs(&cfg, 2, &mut rng);
            let g = cfg.grid();
            let p = dec.forward(&z, &taps, &stem, (g, g), true).unwrap();
            assert_eq!(p.shape(), &[2, 2, size, size]);
            let plane = size * size;
            for b in 0..2 {
                for i in 0..plane {
                    let (a, c) = (p.data()[b * 2 * plane + i], p.data()[b * 2 * plane + plane + i]);
                    assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&c));
                    assert!(((a + c) as f64 - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_inputs_and_biases_give_uniform_output() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = Decoder::<f32>::new(&cfg, &mut rng).unwrap();
        let (z, taps, stem) = inputs(&cfg, 1, &mut rng);
        let zero = |t: &Tensor<f32>| Tensor::<f32>::zeros(t.shape());
        let taps: BTreeMap<_, _> = taps.iter().map(|(k, t)| (*k, zero(t))).collect();
        let p = dec.forward(&zero(&z), &taps, &zero(&stem), (2, 2), false).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn skip_chains_follow_tap_depths() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoder::<f32>::new(
            &ModelConfig {
                embed_dim: 24,
                num_heads: 2,
                decoder_channels: vec![8, 8, 8, 8],
                skip_channels: vec![4, 4, 4],
                fie_channels: vec![2, 2, 2, 2],
                ..cfg
            },
            &mut rng,
        )
        .unwrap();
        let layout: Vec<(usize, usize)> = dec
            .stages
            .iter()
            .map(|s| match &s.skip {
                Skip::Tap { depth, chain } => (*depth, chain.len()),
                Skip::Stem(_) => (0, 1),
                Skip::None => (0, 0),
            })
            .collect();
        assert_eq!(layout, vec![(9, 1), (6, 2), (3, 3), (0, 1)]);
    }

    #[test]
    fn missing_tap_is_an_error() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dec = Decoder::<f32>::new(&cfg, &mut rng).unwrap();
        let (z, mut taps, stem) = inputs(&cfg, 1, &mut rng);
        taps.remove(&3);
        assert!(dec.forward(&z, &taps, &stem, (2, 2), true).is_err());
    }
}
