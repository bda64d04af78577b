//! Architecture hyperparameters and the flat `key = value` text format shared
//! by config files and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which embedding and feed-forward design the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Convolutional embedding with locality-enhanced feed-forward blocks.
    Full,
    /// Convolutional embedding with plain feed-forward blocks.
    FieOnly,
    /// Fixed-patch embedding with locality-enhanced feed-forward blocks.
    MepOnly,
    /// Fixed-patch embedding with plain feed-forward blocks.
    VitBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::FieOnly, Variant::MepOnly, Variant::VitBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FieOnly => "fie-only",
            Variant::MepOnly => "mep-only",
            Variant::VitBaseline => "vit-baseline",
        }
    }

    pub fn conv_embedding(self) -> bool {
        matches!(self, Variant::Full | Variant::FieOnly)
    }

    pub fn local_feed_forward(self) -> bool {
        matches!(self, Variant::Full | Variant::MepOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Every architecture hyperparameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub fie_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub skip_channels: Vec<usize>,
    pub taps: Vec<usize>,
    pub num_classes: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            in_channels: 1,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            dropout: 0.1,
            fie_channels: vec![64, 128, 256, 512],
            decoder_channels: vec![512, 256, 128, 64],
            skip_channels: vec![512, 256, 128],
            taps: vec![3, 6, 9, 12],
            num_classes: 2,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Number of stride-2 stages between the input and the token grid.
    pub fn stages(&self) -> usize {
        self.fie_channels.len()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Width of the half-resolution stem feature handed to the decoder.
    pub fn stem_channels(&self) -> usize {
        self.fie_channels[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let stages = self.stages();
        if stages == 0 || self.patch_size != 1 << stages {
            return bad(format!(
                "patch size {} must equal 2^{} (one stride-2 conv per embedding stage)",
                self.patch_size, stages
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.num_classes < 2 {
            return bad("channel counts must be positive and num_classes >= 2".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("{} heads do not divide embedding {}", self.num_heads, self.embed_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.taps.is_empty()
            || self.taps.windows(2).any(|w| w[0] >= w[1])
            || self.taps[0] == 0
            || *self.taps.last().unwrap() != self.depth
        {
            return bad(format!(
                "taps {:?} must be strictly increasing, >= 1, and end at depth {}",
                self.taps, self.depth
            ));
        }
        if self.decoder_channels.len() != stages {
            return bad(format!("need {stages} decoder widths, got {:?}", self.decoder_channels));
        }
        if self.skip_channels.len() + 1 != self.taps.len() || self.taps.len() > stages {
            return bad(format!(
                "{} taps need {} skip widths and at most {stages} taps; got {:?}",
                self.taps.len(),
                self.taps.len().saturating_sub(1),
                self.skip_channels
            ));
        }
        let all = self.fie_channels.iter().chain(&self.decoder_channels).chain(&self.skip_channels);
        if all.copied().any(|c| c == 0) {
            return bad("zero channel width".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = BTreeMap::new();
        kv.insert("model.decoder_channels".into(), list(&self.decoder_channels));
        kv.insert("model.depth".into(), self.depth.to_string());
        kv.insert("model.dropout".into(), format_float(self.dropout));
        kv.insert("model.embed_dim".into(), self.embed_dim.to_string());
        kv.insert("model.fie_channels".into(), list(&self.fie_channels));
        kv.insert("model.image_size".into(), self.image_size.to_string());
        kv.insert("model.in_channels".into(), self.in_channels.to_string());
        kv.insert("model.mlp_ratio".into(), self.mlp_ratio.to_string());
        kv.insert("model.num_classes".into(), self.num_classes.to_string());
        kv.insert("model.num_heads".into(), self.num_heads.to_string());
        kv.insert("model.patch_size".into(), self.patch_size.to_string());
        kv.insert("model.skip_channels".into(), list(&self.skip_channels));
        kv.insert("model.taps".into(), list(&self.taps));
        kv.insert("model.variant".into(), self.variant.to_string());
        kv
    }

    /// Applies one `model.*` key. Returns `false` for keys outside the
    /// `model.` namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("model.") else {
            return Ok(false);
        };
        match field {
            "image_size" => self.image_size = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "fie_channels" => self.fie_channels = parse_list(key, value)?,
            "decoder_channels" => self.decoder_channels = parse_list(key, value)?,
            "skip_channels" => self.skip_channels = parse_list(key, value)?,
            "taps" => self.taps = parse_list(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(true)
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in kv {
            if !cfg.set(k, v)? {
                return Err(Error::InvalidConfig(format!("unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical textual form (see [`write_kv`]).
    pub fn to_text(&self) -> String {
        write_kv(&self.to_kv())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
        let k = k.trim().to_string();
        if kv.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate key {k:?}")));
        }
    }
    Ok(kv)
}

/// One `key = value` line per entry, in key order.
pub fn write_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
