//! Token embeddings: the stacked-convolution feature interaction extractor
//! and the fixed-patch linear embedding it replaces.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Dropout, Module, TensorRole};
use crate::tensor::{Element, Tensor};

/// Token sequence plus the half-resolution stem activation for the decoder.
#[derive(Clone, Debug)]
pub struct Embedded<T: Element> {
    /// `[B, L, C]`, token-major.
    pub tokens: Tensor<T>,
    /// `[B, C_stem, H/2, W/2]`.
    pub stem: Tensor<T>,
    /// Token grid `(H/p, W/p)`.
    pub grid: (usize, usize),
}

/// `[B, C, h, w]` feature map to `[B, h·w, C]` tokens.
pub fn map_to_tokens<T: Element>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = match *map.shape() {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::shape("map_to_tokens", format!("{:?}", map.shape()))),
    };
    map.reshape(&[b, c, h * w])?.transpose(1, 2)
}

/// `[B, h·w, C]` tokens to a `[B, C, h, w]` feature map.
pub fn tokens_to_map<T: Element>(tokens: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let [b, l, c] = match *tokens.shape() {
        [b, l, c] => [b, l, c],
        _ => return Err(Error::shape("tokens_to_map", format!("{:?}", tokens.shape()))),
    };
    if l != grid.0 * grid.1 {
        return Err(Error::TokenCountMismatch {
            tokens: l,
            grid_h: grid.0,
            grid_w: grid.1,
        });
    }
    tokens.transpose(1, 2)?.reshape(&[b, c, grid.0, grid.1])
}

fn check_input<T: Element>(x: &Tensor<T>, cfg_channels: usize, patch: usize) -> Result<(usize, usize)> {
    let [_, c, h, w] = match *x.shape() {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::shape("embedding", format!("expected [B, C, H, W], got {:?}", x.shape()))),
    };
    if c != cfg_channels {
        return Err(Error::shape("embedding", format!("{c} input channels, expected {cfg_channels}")));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::IndivisibleInput {
            height: h,
            width: w,
            patch,
        });
    }
    Ok((h / patch, w / patch))
}

fn add_position<T: Element>(tokens: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    if tokens.shape()[1..] != *pos.shape() {
        return Err(Error::shape(
            "positional embedding",
            format!("tokens {:?} vs embedding {:?}", tokens.shape(), pos.shape()),
        ));
    }
    tokens.add(pos)
}

/// One `conv 3x3/s2 -> ReLU -> BatchNorm` stage.
#[derive(Clone, Debug)]
pub struct FieStage<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Stacked-convolution embedding: `len(fie_channels)` stride-2 stages, a
/// `1x1` projection to the embedding width, dropout, then a learnable
/// additive positional embedding.
#[derive(Clone, Debug)]
pub struct Fie<T: Element> {
    pub stages: Vec<FieStage<T>>,
    pub proj: Conv2d<T>,
    pub proj_bn: BatchNorm2d<T>,
    pub dropout: Dropout,
    pub pos_embed: Tensor<T>,
    patch: usize,
    in_channels: usize,
}

impl<T: Element> Fie<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = cfg.in_channels;
        for &c_out in &cfg.fie_channels {
            stages.push(FieStage {
                conv: Conv2d::new(c_in, c_out, 3, 2, 1, 1, rng)?,
                bn: BatchNorm2d::new(c_out),
            });
            c_in = c_out;
        }
        Ok(Fie {
            stages,
            proj: Conv2d::new(c_in, cfg.embed_dim, 1, 1, 0, 1, rng)?,
            proj_bn: BatchNorm2d::new(cfg.embed_dim),
            dropout: Dropout::new(cfg.dropout)?,
            pos_embed: Tensor::zeros(&[cfg.tokens(), cfg.embed_dim]).requires_grad(),
            patch: cfg.patch_size,
            in_channels: cfg.in_channels,
        })
    }

    /// `Z_0` tokens and the stem activation, in one pass.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<Embedded<T>> {
        let grid = check_input(x, self.in_channels, self.patch)?;
        let mut h = x.clone();
        let mut stem = None;
        for stage in &mut self.stages {
            let act = stage.conv.forward(&h)?.relu();
            if stem.is_none() {
                stem = Some(act.clone());
            }
            h = stage.bn.forward(&act, train)?;
        }
        let h = self.proj_bn.forward(&self.proj.forward(&h)?, train)?.relu();
        let h = self.dropout.forward(&h, train, rng)?;
        let tokens = add_position(&map_to_tokens(&h)?, &self.pos_embed)?;
        Ok(Embedded {
            tokens,
            stem: stem.expect("at least one stage"),
            grid,
        })
    }

    /// Post-ReLU output of the first convolution stage.
    pub fn stem_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.stages[0].conv.forward(x)?.relu())
    }
}

impl<T: Element> Module<T> for Fie<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            s.conv.visit(&join(&p, "conv"), f);
            s.bn.visit(&join(&p, "bn"), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
        self.proj_bn.visit(&join(prefix, "proj_bn"), f);
        f(&join(prefix, "pos_embed"), TensorRole::Parameter, &self.pos_embed);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            s.conv.visit_mut(&join(&p, "conv"), f);
            s.bn.visit_mut(&join(&p, "bn"), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.proj_bn.visit_mut(&join(prefix, "proj_bn"), f);
        f(&join(prefix, "pos_embed"), TensorRole::Parameter, &mut self.pos_embed);
    }
}

/// Non-overlapping `p x p` patch projection (a stride-`p` convolution) plus
/// positional embedding. A separate `3x3/s2` stem convolution supplies the
/// decoder's half-resolution skip so both embeddings feed the same decoder.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T: Element> {
    pub proj: Conv2d<T>,
    pub stem: Conv2d<T>,
    pub dropout: Dropout,
    pub pos_embed: Tensor<T>,
    patch: usize,
    in_channels: usize,
}

impl<T: Element> PatchEmbed<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(PatchEmbed {
            proj: Conv2d::new(cfg.in_channels, cfg.embed_dim, p, p, 0, 1, rng)?,
            stem: Conv2d::new(cfg.in_channels, cfg.stem_channels(), 3, 2, 1, 1, rng)?,
            dropout: Dropout::new(cfg.dropout)?,
            pos_embed: Tensor::zeros(&[cfg.tokens(), cfg.embed_dim]).requires_grad(),
            patch: p,
            in_channels: cfg.in_channels,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<Embedded<T>> {
        let grid = check_input(x, self.in_channels, self.patch)?;
        let h = self.dropout.forward(&self.proj.forward(x)?, train, rng)?;
        let tokens = add_position(&map_to_tokens(&h)?, &self.pos_embed)?;
        Ok(Embedded {
            tokens,
            stem: self.stem.forward(x)?.relu(),
            grid,
        })
    }
}

impl<T: Element> Module<T> for PatchEmbed<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.stem.visit(&join(prefix, "stem"), f);
        f(&join(prefix, "pos_embed"), TensorRole::Parameter, &self.pos_embed);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.stem.visit_mut(&join(prefix, "stem"), f);
        f(&join(prefix, "pos_embed"), TensorRole::Parameter, &mut self.pos_embed);
    }
}

/// The embedding selected by the model variant.
#[derive(Clone, Debug)]
pub enum Embedding<T: Element> {
    Fie(Fie<T>),
    Patch(PatchEmbed<T>),
}

impl<T: Element> Embedding<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(if cfg.variant.conv_embedding() {
            Embedding::Fie(Fie::new(cfg, rng)?)
        } else {
            Embedding::Patch(PatchEmbed::new(cfg, rng)?)
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<Embedded<T>> {
        match self {
            Embedding::Fie(m) => m.forward(x, train, rng),
            Embedding::Patch(m) => m.forward(x, train, rng),
        }
    }

    pub fn pos_embed_mut(&mut self) -> &mut Tensor<T> {
        match self {
            Embedding::Fie(m) => &mut m.pos_embed,
            Embedding::Patch(m) => &mut m.pos_embed,
        }
    }
}

impl<T: Element> Module<T> for Embedding<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        match self {
            Embedding::Fie(m) => m.visit(&join(prefix, "fie"), f),
            Embedding::Patch(m) => m.visit(&join(prefix, "patch"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        match self {
            Embedding::Fie(m) => m.visit_mut(&join(prefix, "fie"), f),
            Embedding::Patch(m) => m.visit_mut(&join(prefix, "patch"), f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameters;
    use rand::SeedableRng;

    fn small_cfg(size: usize) -> ModelConfig {
        ModelConfig {
            image_size: size,
            embed_dim: 24,
            num_heads: 2,
            depth: 4,
            fie_channels: vec![4, 6, 8, 10],
            decoder_channels: vec![8, 6, 4, 4],
            skip_channels: vec![6, 4, 4],
            taps: vec![1, 2, 3, 4],
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn input(b: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * size * size;
        Tensor::from_vec(&[b, 1, size, size], (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn token_count_follows_grid() {
        for size in [32, 48, 64] {
            let cfg = small_cfg(size);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut fie = Fie::<f32>::new(&cfg, &mut rng).unwrap();
            let out = fie.forward(&input(2, size, 1), true, &mut rng).unwrap();
            let g = size / 16;
            assert_eq!(out.tokens.shape(), &[2, g * g, 24]);
            assert_eq!(out.grid, (g, g));
            assert_eq!(out.stem.shape(), &[2, 4, size / 2, size / 2]);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fie = Fie::<f32>::new(&cfg, &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 40, 32]);
        assert!(matches!(fie.forward(&x, false, &mut rng), Err(Error::IndivisibleInput { .. })));
    }

    #[test]
    fn zero_weights_give_zero_tokens() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fie = Fie::<f32>::new(&cfg, &mut rng).unwrap();
        fie.visit_mut("", &mut |_, role, t| {
            if role == TensorRole::Parameter {
                t.update_data(|d| d.iter_mut().for_each(|v| *v = 0.0));
            }
        });
        let out = fie.forward(&input(1, 32, 2), false, &mut rng).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_gives_zero_stem() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fie = Fie::<f32>::new(&cfg, &mut rng).unwrap();
        let stem = fie.stem_features(&Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        assert_eq!(stem.shape(), &[2, 4, 16, 16]);
        assert!(stem.data().iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn stem_halves_any_even_size(h in 2usize..12, w in 2usize..12) {
            let cfg = small_cfg(32);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let fie = Fie::<f32>::new(&cfg, &mut rng).unwrap();
            let stem = fie.stem_features(&Tensor::zeros(&[1, 1, 2 * h, 2 * w])).unwrap();
            proptest::prop_assert_eq!(stem.shape(), &[1, 4, h, w]);
        }
    }

    #[test]
    fn positional_embedding_is_additive() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fie = Fie::<f64>::new(&cfg, &mut rng).unwrap();
        let x: Tensor<f64> = input(2, 32, 6).cast();
        let base = fie.forward(&x, false, &mut rng).unwrap().tokens.to_vec();
        let pos: Vec<f64> = (0..4 * 24).map(|i| (i as f64 * 0.37).sin()).collect();
        fie.pos_embed.assign(&pos).unwrap();
        let shifted = fie.forward(&x, false, &mut rng).unwrap().tokens.to_vec();
        for (i, (a, b)) in base.iter().zip(&shifted).enumerate() {
            assert!((b - a - pos[i % pos.len()]).abs() < 1e-12, "additivity at {i}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = small_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut fie = Fie::<f64>::new(&cfg, &mut rng).unwrap();
        let out = fie.forward(&input(2, 32, 8).cast(), true, &mut rng).unwrap();
        crate::gradcheck::project(&out.tokens, 1).unwrap().backward().unwrap();
        for (name, p) in parameters(&fie) {
            let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} gradient identically zero");
        }
    }

    #[test]
    fn token_map_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::<f32>::from_vec(&[2, 3, 4, 5], (0..120).map(|_| rng.gen()).collect()).unwrap();
        let t = map_to_tokens(&m).unwrap();
        assert_eq!(t.shape(), &[2, 20, 3]);
        assert_eq!(tokens_to_map(&t, (4, 5)).unwrap().to_vec(), m.to_vec());
        assert!(matches!(tokens_to_map(&t, (4, 4)), Err(Error::TokenCountMismatch { .. })));
    }
}
