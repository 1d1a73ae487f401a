use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::adversarial::{AdaptiveWeightConfig, DiscriminatorConfig};
use crate::codec::CodecConfig;
use crate::perceptual::BackboneSource;
use crate::{Error, Result};

pub const VGG_WEIGHTS_FILE: &str = "vgg16_lpips.safetensors";
pub const CRAFT_WEIGHTS_FILE: &str = "craft_mlt_25k.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backbones {
    /// Backbone of the LPIPS term and of the FID features.
    pub vgg: BackboneSource,
    pub ocr: BackboneSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Manifest of the training split.
    pub corpus: PathBuf,
    /// Run directory: checkpoints, logs and metadata.
    pub output: PathBuf,
    /// Directory for relative backbone weight files. Falls back to `OCR_VQGAN_WEIGHTS_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many steps have run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub learning_rate: f64,
    pub optimizer: AdamConfig,
    pub w_ocr: f64,
    pub w_vgg: f64,
    pub w_pixel: f64,
    pub disc_start_step: u64,
    pub seed: u64,
    pub codec: CodecConfig,
    pub codebook_size: usize,
    pub beta: f64,
    pub discriminator: DiscriminatorConfig,
    pub adaptive: AdaptiveWeightConfig,
    pub backbones: Backbones,
    pub paths: Paths,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings: 384px figures, f = 16, 16,384 codes.
    pub fn paper() -> Self {
        Self {
            image_size: 384,
            batch_size: 16,
            epochs: 20,
            max_steps: None,
            learning_rate: 4.5e-4,
            optimizer: AdamConfig::default(),
            w_ocr: 1.0,
            w_vgg: 0.2,
            w_pixel: 1.0,
            // one epoch of the 81,194-figure training split
            disc_start_step: 5_075,
            seed: 0,
            codec: CodecConfig::default(),
            codebook_size: 16_384,
            beta: crate::quantizer::DEFAULT_BETA,
            discriminator: DiscriminatorConfig::default(),
            adaptive: AdaptiveWeightConfig::default(),
            backbones: Backbones {
                vgg: BackboneSource::Pretrained {
                    file: VGG_WEIGHTS_FILE.into(),
                },
                ocr: BackboneSource::Pretrained {
                    file: CRAFT_WEIGHTS_FILE.into(),
                },
            },
            paths: Paths {
                corpus: "corpus/train.manifest".into(),
                output: "runs/paper".into(),
                weights_dir: None,
            },
            checkpoint_every: 5_000,
            log_every: 50,
        }
    }

    /// Single-CPU profile: 64px synthetic figures, 128 codes, random frozen backbones.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            batch_size: 8,
            epochs: 40,
            max_steps: Some(2_000),
            // one epoch of 500 figures
            disc_start_step: 62,
            codec: CodecConfig {
                base_width: 8,
                channel_multipliers: vec![1, 2, 2, 4],
                num_downsample_levels: 3,
                num_res_blocks: 1,
                latent_dim: 32,
                norm_groups: 4,
                ..CodecConfig::default()
            },
            codebook_size: 128,
            discriminator: DiscriminatorConfig {
                num_layers: 3,
                base_width: 16,
                input_channels: 3,
            },
            backbones: Backbones {
                vgg: BackboneSource::Random {
                    seed: 1,
                    width_divisor: 8,
                },
                ocr: BackboneSource::Random {
                    seed: 2,
                    width_divisor: 8,
                },
            },
            paths: Paths {
                corpus: "corpus/train.manifest".into(),
                output: "runs/desk".into(),
                weights_dir: None,
            },
            checkpoint_every: 500,
            log_every: 10,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides. Keys are dotted field paths; values are TOML
    /// literals, with bare words taken as strings. The result is type-checked.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
            set_path(&mut doc, key.trim(), parse_literal(value.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, w) in [("w_ocr", self.w_ocr), ("w_vgg", self.w_vgg), ("w_pixel", self.w_pixel)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        if self.batch_size == 0 || self.image_size == 0 {
            return bad("batch_size and image_size must be positive".into());
        }
        if self.codebook_size == 0 || self.codebook_size > u32::MAX as usize {
            return bad(format!("codebook_size {} is out of range", self.codebook_size));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        let f = self.codec.downsampling_factor();
        if self.image_size % f != 0 {
            return bad(format!(
                "image_size {} is not divisible by the downsampling factor {f}",
                self.image_size
            ));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.codec.validate()
    }

    /// `paths.weights_dir`, else the `OCR_VQGAN_WEIGHTS_DIR` environment variable.
    pub fn weights_dir(&self) -> Option<PathBuf> {
        self.paths
            .weights_dir
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
    }
}

pub const WEIGHTS_DIR_ENV: &str = "OCR_VQGAN_WEIGHTS_DIR";

fn parse_literal(text: &str) -> toml::Value {
    // wrap in a one-key document so any TOML value literal parses
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{key}`"));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(unknown)?;
    let mut cur = doc;
    for p in parts {
        cur = cur.get_mut(p).ok_or_else(unknown)?;
    }
    let table = cur.as_table_mut().ok_or_else(unknown)?;
    match table.get(last) {
        Some(old) => {
            let value = coerce(old, value);
            table.insert(last.to_string(), value);
            Ok(())
        }
        // optional fields are skipped when unset; serde rejects anything truly unknown
        None => {
            table.insert(last.to_string(), value);
            Ok(())
        }
    }
}

// Integer literals assigned to float fields stay floats, so `w_ocr=1` works.
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, &new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => new,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.image_size, 384);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.learning_rate, 4.5e-4);
        assert_eq!((c.w_ocr, c.w_vgg), (1.0, 0.2));
        assert_eq!(c.codebook_size, 16_384);
        assert_eq!(c.codec.latent_dim, 256);
        assert_eq!(c.codec.downsampling_factor(), 16);
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        for c in [TrainConfig::paper(), TrainConfig::desk()] {
            let text = c.to_toml_string().unwrap();
            assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn overrides_are_type_checked() {
        let c = TrainConfig::desk();
        let o = c
            .with_overrides(&["w_vgg=0.5", "w_ocr=0", "codec.latent_dim=16", "paths.output=runs/x", "max_steps=3"])
            .unwrap();
        assert_eq!(o.w_vgg, 0.5);
        assert_eq!(o.w_ocr, 0.0);
        assert_eq!(o.codec.latent_dim, 16);
        assert_eq!(o.paths.output, PathBuf::from("runs/x"));
        assert_eq!(o.max_steps, Some(3));
        let o = c.with_overrides(&["backbones.ocr.width_divisor=4"]).unwrap();
        assert_eq!(o.backbones.ocr, BackboneSource::Random { seed: 2, width_divisor: 4 });

        assert!(matches!(c.with_overrides(&["no_such_key=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["codec.nope=1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["w_vgg=heavy"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["w_vgg"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["w_vgg=-1"]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides(&["learning_rate=0"]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let mut text = TrainConfig::desk().to_toml_string().unwrap();
        text.insert_str(0, "surprise = 1\n");
        assert!(matches!(TrainConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn image_size_must_match_factor() {
        let mut c = TrainConfig::desk();
        c.image_size = 60;
        assert!(c.validate().is_err());
    }
}
