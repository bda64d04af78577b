//! Transformer encoder: pre-norm multi-head self-attention followed by either
//! the locality-enhanced feed-forward block or a plain two-layer MLP.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fie::{map_to_tokens, tokens_to_map};
use crate::nn::{join, BatchNorm2d, Conv2d, LayerNorm, Linear, Module, TensorRole};
use crate::tensor::{Element, Tensor};

fn check_tokens<T: Element>(op: &'static str, z: &Tensor<T>, width: usize) -> Result<[usize; 3]> {
    match *z.shape() {
        [b, l, c] if c == width => Ok([b, l, c]),
        _ => Err(Error::shape(op, format!("expected [B, L, {width}], got {:?}", z.shape()))),
    }
}

/// Multi-head self-attention with a pre-norm and residual connection.
#[derive(Clone, Debug)]
pub struct Msa<T: Element> {
    pub norm: LayerNorm<T>,
    pub q_proj: Linear<T>,
    pub k_proj: Linear<T>,
    pub v_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub heads: usize,
}

impl<T: Element> Msa<T> {
    pub fn new(width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Msa {
            norm: LayerNorm::new(width),
            q_proj: Linear::new(width, width, rng),
            k_proj: Linear::new(width, width, rng),
            v_proj: Linear::new(width, width, rng),
            out_proj: Linear::new(width, width, rng),
            heads,
        })
    }

    fn width(&self) -> usize {
        self.q_proj.d_in()
    }

    /// `[B, L, C]` to `[B, heads, L, C / heads]`.
    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, l, c] = check_tokens("split_heads", x, self.width())?;
        x.reshape(&[b, l, self.heads, c / self.heads])?.permute(&[0, 2, 1, 3])
    }

    fn qkv(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let n = self.norm.forward(z)?;
        Ok((
            self.split_heads(&self.q_proj.forward(&n)?)?,
            self.split_heads(&self.k_proj.forward(&n)?)?,
            self.split_heads(&self.v_proj.forward(&n)?)?,
        ))
    }

    fn scores_to_weights(&self, q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
        let head_dim = self.width() / self.heads;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        q.matmul(&k.transpose(2, 3)?)?.scale(scale).softmax(3)
    }

    /// Attention weights `[B, heads, L, L]`; each row is a probability vector.
    pub fn attention(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (q, k, _) = self.qkv(z)?;
        self.scores_to_weights(&q, &k)
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, l, c] = check_tokens("msa", z, self.width())?;
        let (q, k, v) = self.qkv(z)?;
        let heads = self.scores_to_weights(&q, &k)?.matmul(&v)?;
        let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[b, l, c])?;
        self.out_proj.forward(&merged)?.add(z)
    }
}

impl<T: Element> Module<T> for Msa<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.q_proj.visit(&join(prefix, "q_proj"), f);
        self.k_proj.visit(&join(prefix, "k_proj"), f);
        self.v_proj.visit(&join(prefix, "v_proj"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.q_proj.visit_mut(&join(prefix, "q_proj"), f);
        self.k_proj.visit_mut(&join(prefix, "k_proj"), f);
        self.v_proj.visit_mut(&join(prefix, "v_proj"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

/// Locality-enhanced feed-forward block: tokens are expanded, laid back out
/// on the token grid, filtered by a depthwise `3x3` convolution, and
/// projected back to the embedding width.
#[derive(Clone, Debug)]
pub struct Mep<T: Element> {
    pub norm: LayerNorm<T>,
    pub linear1: Linear<T>,
    pub dwconv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub linear2: Linear<T>,
}

impl<T: Element> Mep<T> {
    pub fn new(width: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = width * ratio;
        Ok(Mep {
            norm: LayerNorm::new(width),
            linear1: Linear::new(width, hidden, rng),
            dwconv: Conv2d::new(hidden, hidden, 3, 1, 1, hidden, rng)?,
            bn: BatchNorm2d::new(hidden),
            linear2: Linear::new(hidden, width, rng),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.linear1.d_out()
    }

    pub fn forward(&mut self, z: &Tensor<T>, grid: (usize, usize), train: bool) -> Result<Tensor<T>> {
        check_tokens("mep", z, self.linear1.d_in())?;
        let expanded = self.linear1.forward(&self.norm.forward(z)?)?.gelu();
        let map = tokens_to_map(&expanded, grid)?;
        let filtered = self.bn.forward(&self.dwconv.forward(&map)?, train)?.gelu();
        self.linear2.forward(&map_to_tokens(&filtered)?)?.add(z)
    }
}

impl<T: Element> Module<T> for Mep<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.linear1.visit(&join(prefix, "linear1"), f);
        self.dwconv.visit(&join(prefix, "dwconv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.linear2.visit(&join(prefix, "linear2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.linear1.visit_mut(&join(prefix, "linear1"), f);
        self.dwconv.visit_mut(&join(prefix, "dwconv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.linear2.visit_mut(&join(prefix, "linear2"), f);
    }
}

/// Plain pre-norm MLP: `Linear2(GELU(Linear1(Norm(z)))) + z`.
#[derive(Clone, Debug)]
pub struct Mlp<T: Element> {
    pub norm: LayerNorm<T>,
    pub linear1: Linear<T>,
    pub linear2: Linear<T>,
}

impl<T: Element> Mlp<T> {
    pub fn new(width: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            norm: LayerNorm::new(width),
            linear1: Linear::new(width, width * ratio, rng),
            linear2: Linear::new(width * ratio, width, rng),
        }
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_tokens("mlp", z, self.linear1.d_in())?;
        let hidden = self.linear1.forward(&self.norm.forward(z)?)?.gelu();
        self.linear2.forward(&hidden)?.add(z)
    }
}

impl<T: Element> Module<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.linear1.visit(&join(prefix, "linear1"), f);
        self.linear2.visit(&join(prefix, "linear2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.linear1.visit_mut(&join(prefix, "linear1"), f);
        self.linear2.visit_mut(&join(prefix, "linear2"), f);
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum FeedForward<T: Element> {
    Mep(Mep<T>),
    Mlp(Mlp<T>),
}

impl<T: Element> FeedForward<T> {
    pub fn forward(&mut self, z: &Tensor<T>, grid: (usize, usize), train: bool) -> Result<Tensor<T>> {
        match self {
            FeedForward::Mep(m) => m.forward(z, grid, train),
            FeedForward::Mlp(m) => m.forward(z),
        }
    }

    /// Width of the expanded hidden layer.
    pub fn hidden_dim(&self) -> usize {
        match self {
            FeedForward::Mep(m) => m.hidden_dim(),
            FeedForward::Mlp(m) => m.linear1.d_out(),
        }
    }

    /// The projection whose zeroing turns the block into the identity.
    pub fn linear2_mut(&mut self) -> &mut Linear<T> {
        match self {
            FeedForward::Mep(m) => &mut m.linear2,
            FeedForward::Mlp(m) => &mut m.linear2,
        }
    }
}

impl<T: Element> Module<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        match self {
            FeedForward::Mep(m) => m.visit(&join(prefix, "mep"), f),
            FeedForward::Mlp(m) => m.visit(&join(prefix, "mlp"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        match self {
            FeedForward::Mep(m) => m.visit_mut(&join(prefix, "mep"), f),
            FeedForward::Mlp(m) => m.visit_mut(&join(prefix, "mlp"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T: Element> {
    pub msa: Msa<T>,
    pub ff: FeedForward<T>,
}

impl<T: Element> Block<T> {
    pub fn forward(&mut self, z: &Tensor<T>, grid: (usize, usize), train: bool) -> Result<Tensor<T>> {
        let z = self.msa.forward(z)?;
        self.ff.forward(&z, grid, train)
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.msa.visit(&join(prefix, "msa"), f);
        self.ff.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.msa.visit_mut(&join(prefix, "msa"), f);
        self.ff.visit_mut(prefix, f);
    }
}

/// Final output plus the intermediate outputs at the tap depths (1-based).
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Element> {
    pub bottleneck: Tensor<T>,
    pub taps: BTreeMap<usize, Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderStack<T: Element> {
    pub blocks: Vec<Block<T>>,
    pub taps: Vec<usize>,
}

impl<T: Element> EncoderStack<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let msa = Msa::new(cfg.embed_dim, cfg.num_heads, rng)?;
            let ff = if cfg.variant.local_feed_forward() {
                FeedForward::Mep(Mep::new(cfg.embed_dim, cfg.mlp_ratio, rng)?)
            } else {
                FeedForward::Mlp(Mlp::new(cfg.embed_dim, cfg.mlp_ratio, rng))
            };
            blocks.push(Block { msa, ff });
        }
        let taps = cfg.taps.clone();
        if taps.windows(2).any(|w| w[0] >= w[1]) || taps.first() == Some(&0) || taps.last() > Some(&cfg.depth) {
            return Err(Error::InvalidConfig(format!("taps {taps:?} invalid for depth {}", cfg.depth)));
        }
        Ok(EncoderStack { blocks, taps })
    }

    pub fn forward(&mut self, z0: &Tensor<T>, grid: (usize, usize), train: bool) -> Result<EncoderOutput<T>> {
        let mut z = z0.clone();
        let mut taps = BTreeMap::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            z = block.forward(&z, grid, train)?;
            if self.taps.contains(&(i + 1)) {
                taps.insert(i + 1, z.clone());
            }
        }
        Ok(EncoderOutput { bottleneck: z, taps })
    }

    /// Zeroes every `out_proj` and `linear2` weight and bias, which reduces
    /// each block, and therefore the stack, to the identity.
    pub fn zero_residual_branches(&mut self) {
        let zero = |t: &mut Tensor<T>| t.update_data(|d| d.iter_mut().for_each(|v| *v = T::zero()));
        for block in &mut self.blocks {
            zero(&mut block.msa.out_proj.weight);
            zero(&mut block.msa.out_proj.bias);
            let l2 = block.ff.linear2_mut();
            zero(&mut l2.weight);
            zero(&mut l2.bias);
        }
    }
}

impl<T: Element> Module<T> for EncoderStack<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &Tensor<T>)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<T>)) {
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
    }
}
