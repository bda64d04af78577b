//! Flat `key = value` configuration covering the model, the phantom
//! generator, and the training loop.
//!
//! Keys are namespaced `model.*`, `data.*`, and `train.*`; the canonical
//! text form lists every key in sorted order.

use std::collections::BTreeMap;

use crate::config::{format_float, parse, parse_kv, write_kv, ModelConfig};
use crate::data::PhantomConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: PhantomConfig,
    pub train: TrainConfig,
}

fn unknown(key: &str) -> Error {
    Error::InvalidConfig(format!("unknown key {key:?}"))
}

fn set_data(cfg: &mut PhantomConfig, key: &str, value: &str) -> Result<()> {
    match key.strip_prefix("data.").ok_or_else(|| unknown(key))? {
        "image_size" => cfg.image_size = parse(key, value)?,
        "min_vessels" => cfg.min_vessels = parse(key, value)?,
        "max_vessels" => cfg.max_vessels = parse(key, value)?,
        "min_width" => cfg.min_width = parse(key, value)?,
        "max_width" => cfg.max_width = parse(key, value)?,
        "contrast" => cfg.contrast = parse(key, value)?,
        "noise_sigma" => cfg.noise_sigma = parse(key, value)?,
        "distractors" => cfg.distractors = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        _ => return Err(unknown(key)),
    }
    Ok(())
}

fn set_train(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key.strip_prefix("train.").ok_or_else(|| unknown(key))? {
        "iterations" => cfg.iterations = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
        _ => return Err(unknown(key)),
    }
    Ok(())
}

impl RunConfig {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = self.model.to_kv();
        let d = &self.data;
        for (k, v) in [
            ("image_size", d.image_size.to_string()),
            ("min_vessels", d.min_vessels.to_string()),
            ("max_vessels", d.max_vessels.to_string()),
            ("min_width", format_float(d.min_width)),
            ("max_width", format_float(d.max_width)),
            ("contrast", format_float(d.contrast)),
            ("noise_sigma", format_float(d.noise_sigma)),
            ("distractors", d.distractors.to_string()),
            ("seed", d.seed.to_string()),
        ] {
            kv.insert(format!("data.{k}"), v);
        }
        let t = &self.train;
        for (k, v) in [
            ("iterations", t.iterations.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", format_float(t.learning_rate)),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ] {
            kv.insert(format!("train.{k}"), v);
        }
        kv
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key.split_once('.').map(|(ns, _)| ns) {
            Some("data") => set_data(&mut self.data, key, value),
            Some("train") => set_train(&mut self.train, key, value),
            _ => Err(unknown(key)),
        }
    }

    /// Applies every entry of a `key = value` text and returns the keys it
    /// contained.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let kv = parse_kv(text)?;
        for (k, v) in &kv {
            self.set(k, v)?;
        }
        Ok(kv.into_keys().collect())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        write_kv(&self.to_kv())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.variant", "mep-only").unwrap();
        cfg.set("data.noise_sigma", "0.05").unwrap();
        cfg.set("train.learning_rate", "0.0003").unwrap();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.model.variant, Variant::MepOnly);
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), 14 + 9 + 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for key in ["model.width", "data.colour", "train.momentum", "optimizer.lr", "seed"] {
            let err = RunConfig::default().set(key, "1").unwrap_err();
            assert!(matches!(err, Error::InvalidConfig(_)), "{key}");
        }
        assert!(RunConfig::from_text("train.epochs = 3\n").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::default().set("train.iterations", "many").is_err());
        assert!(RunConfig::from_text("train.batch_size = 0\n").is_err());
        assert!(RunConfig::from_text("data.image_size = 200\n").is_err());
        assert!(RunConfig::from_text("model.variant = unet\n").is_err());
    }

    #[test]
    fn partial_text_keeps_defaults() {
        let mut cfg = RunConfig::default();
        let keys = cfg.apply_text("# comment\ntrain.iterations = 7\n").unwrap();
        assert_eq!(keys, vec!["train.iterations".to_string()]);
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.model, ModelConfig::default());
    }
}
