use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::AlignMode;
use crate::backbone::EncoderConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub mode: AlignMode,
    pub lambda: f64,
    /// Fraction of all optimizer steps over which lambda ramps linearly from 0.
    pub warmup_frac: f64,
    pub discriminator_hidden: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::Cgrl,
            lambda: 1.0,
            warmup_frac: 0.0,
            discriminator_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; synthetic presets are generated in memory when absent.
    pub manifest: Option<PathBuf>,
    pub primary_id: u32,
    /// Auxiliary domain ids to use from the manifest (all others when absent).
    pub aux_ids: Option<Vec<u32>>,
    /// Synthetic auxiliary presets, in order.
    pub aux_presets: Vec<String>,
    /// Synthetic images per domain before the 70/10/20 split.
    pub primary_count: usize,
    pub aux_count: usize,
    pub primary_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            primary_id: 0,
            aux_ids: None,
            aux_presets: vec!["aux1".into(), "aux2".into(), "aux3".into()],
            primary_count: 57,
            aux_count: 57,
            primary_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Learning rate at `lr_ref_images` primary training images; scales
    /// inversely with the actual count.
    pub lr_ref: f64,
    pub lr_ref_images: usize,
    pub decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub fine_on_primary_only: bool,
    /// Epochs of full-model training on the held-out `pretrain` preset before
    /// the base is frozen; 0 keeps the seeded random base.
    pub pretrain_epochs: usize,
    pub pretrain_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
            lr_ref: 2e-4,
            lr_ref_images: 40,
            decay: 0.98,
            clip_norm: 5.0,
            fine_on_primary_only: false,
            pretrain_epochs: 0,
            pretrain_count: 40,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: EncoderConfig,
    pub align: AlignConfig,
    pub decoder: DecoderConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl Config {
    /// Desk-scale configuration used by the ablation protocols.
    pub fn ablation_preset() -> Self {
        let mut c = Self::default();
        c.model.image_size = 32;
        c.model.patch_size = 4;
        c.model.layers = 2;
        c.model.embed_dim = 32;
        c.model.adapter_hidden = 8;
        c.decoder.embed_dim = 32;
        // A random frozen base leaves the adapters nothing to steer.
        c.train.pretrain_epochs = 10;
        c
    }

    /// Geometry for the high-resolution split: native 64 with an 8-pixel
    /// patch, so the base decoder works at 32 and the slice decoder at 128.
    pub fn hr_split_preset() -> Self {
        let mut c = Self::ablation_preset();
        c.model.image_size = 64;
        c.model.patch_size = 8;
        c
    }

    /// `text` is TOML; each override is a dotted `section.key` and a value.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override {key:?} must look like section.key")))?;
            let table = root
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let table = table
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{section} is not a section")))?;
            table.insert(field.to_string(), parse_value(raw));
        }
        let config: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decoder.validate()?;
        let t = &self.train;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if t.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if !(t.alpha >= 0.0 && t.beta >= 0.0) {
            return bad("train.alpha and train.beta must be non-negative");
        }
        if !(t.lr_ref > 0.0 && t.lr_ref_images > 0 && t.decay > 0.0) {
            return bad("train.lr_ref, train.lr_ref_images and train.decay must be positive");
        }
        if t.batch_size == 0 || !(t.clip_norm >= 0.0) {
            return bad("train.batch_size must be positive and train.clip_norm non-negative");
        }
        if !(self.align.lambda >= 0.0) || !(0.0..=1.0).contains(&self.align.warmup_frac) {
            return bad("align.lambda must be non-negative and align.warmup_frac in [0, 1]");
        }
        if self.align.discriminator_hidden == 0 {
            return bad("align.discriminator_hidden must be positive");
        }
        if !(0.0..=1.0).contains(&self.data.primary_fraction) {
            return bad("data.primary_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}
