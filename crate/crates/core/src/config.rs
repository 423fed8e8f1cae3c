//! Plain-text run configuration.
//!
//! ```text
//! seed = 7
//! [backbone]
//! widths = 24,32,48,64
//! [loss]
//! radius = 0.5
//! ```
//!
//! A `[section]` header prefixes the keys below it. Keys may also be written
//! fully qualified (`loss.radius = 0.5`) anywhere. Unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{AugmentationSpec, ColorJitter, GaussianBlur, SceneSpec};
use crate::encoder::{BackboneConfig, EncoderConfig, HeadConfig, ModelKind};
use crate::engine::AdamConfig;
use crate::error::{Result, SfcError};
use crate::geometry::CropSampler;
use crate::propagation::PropagationConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Positive radius in units of mean cell spacing.
    pub radius: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the global term in joint training.
    pub alpha: f64,
    pub symmetrize: bool,
    pub queue: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub ema_m0: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip: bool,
    pub color_jitter: bool,
    pub blur: bool,
    pub grayscale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset root; empty means synthetic scenes.
    pub dir: String,
    pub frame_size: usize,
    pub frames: usize,
    pub videos: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub sprite_min: f64,
    pub sprite_max: f64,
    pub max_speed: f64,
    pub scale_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagateConfig {
    pub top_k: usize,
    pub context: usize,
    pub radius: usize,
    pub temperature: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub propagate: PropagateConfig,
}

impl Default for Config {
    fn default() -> Self {
        let p = PropagationConfig::single();
        Config {
            seed: 0,
            backbone: BackboneConfig::fc_small(),
            heads: HeadConfig::default(),
            loss: LossConfig {
                radius: 0.5,
                tau: 0.07,
                alpha: 1.0,
                symmetrize: false,
                queue: 1024,
            },
            optim: OptimConfig {
                lr: 1e-3,
                steps: 2000,
                batch: 8,
                ema_m0: 0.99,
                log_every: 10,
            },
            augment: AugmentConfig {
                scale_min: 0.0,
                scale_max: 1.0,
                hflip: false,
                color_jitter: false,
                blur: false,
                grayscale: false,
            },
            data: DataConfig {
                dir: String::new(),
                frame_size: 64,
                frames: 24,
                videos: 64,
                sprites_min: 1,
                sprites_max: 3,
                sprite_min: 14.0,
                sprite_max: 28.0,
                max_speed: 1.5,
                scale_rate: 0.0,
                seed: 1000,
            },
            propagate: PropagateConfig {
                top_k: p.top_k,
                context: p.context,
                radius: p.radius,
                temperature: p.temperature,
                lambda: 1.75,
            },
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_val<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| SfcError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_val(key, v)).collect()
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $kind:ident),* $(,)?) => {
        /// Every accepted key, in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Config {
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(keys!(@show $kind, self.$($field).+)),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { self.$($field).+ = keys!(@parse $kind, key, value); })*
                    _ => return Err(SfcError::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }
        }
    };
    (@show list, $e:expr) => { list(&$e) };
    (@show str, $e:expr) => { $e.clone() };
    (@show val, $e:expr) => { $e.to_string() };
    (@parse list, $k:expr, $v:expr) => { parse_list($k, $v)? };
    (@parse str, $k:expr, $v:expr) => { $v.trim().to_string() };
    (@parse val, $k:expr, $v:expr) => { parse_val($k, $v)? };
}

keys! {
    "seed" => seed: val,
    "backbone.widths" => backbone.widths: list,
    "backbone.strides" => backbone.strides: list,
    "backbone.kernels" => backbone.kernels: list,
    "backbone.input_size" => backbone.input_size: val,
    "backbone.residual" => backbone.residual: val,
    "heads.hidden" => heads.hidden: val,
    "heads.out" => heads.out: val,
    "loss.radius" => loss.radius: val,
    "loss.tau" => loss.tau: val,
    "loss.alpha" => loss.alpha: val,
    "loss.symmetrize" => loss.symmetrize: val,
    "loss.queue" => loss.queue: val,
    "optim.lr" => optim.lr: val,
    "optim.steps" => optim.steps: val,
    "optim.batch" => optim.batch: val,
    "optim.ema_m0" => optim.ema_m0: val,
    "optim.log_every" => optim.log_every: val,
    "augment.scale_min" => augment.scale_min: val,
    "augment.scale_max" => augment.scale_max: val,
    "augment.hflip" => augment.hflip: val,
    "augment.color_jitter" => augment.color_jitter: val,
    "augment.blur" => augment.blur: val,
    "augment.grayscale" => augment.grayscale: val,
    "data.dir" => data.dir: str,
    "data.frame_size" => data.frame_size: val,
    "data.frames" => data.frames: val,
    "data.videos" => data.videos: val,
    "data.sprites_min" => data.sprites_min: val,
    "data.sprites_max" => data.sprites_max: val,
    "data.sprite_min" => data.sprite_min: val,
    "data.sprite_max" => data.sprite_max: val,
    "data.max_speed" => data.max_speed: val,
    "data.scale_rate" => data.scale_rate: val,
    "data.seed" => data.seed: val,
    "propagate.top_k" => propagate.top_k: val,
    "propagate.context" => propagate.context: val,
    "propagate.radius" => propagate.radius: val,
    "propagate.temperature" => propagate.temperature: val,
    "propagate.lambda" => propagate.lambda: val,
}

/// Keys that determine the network architecture.
const ARCH_PREFIXES: &[&str] = &["backbone.", "heads."];

impl Config {
    /// Defaults for one training branch; the semantic branch turns on
    /// flips, color jitter and blur.
    pub fn for_kind(kind: ModelKind) -> Self {
        let mut c = Config::default();
        if kind == ModelKind::Semantic {
            c.augment.hflip = true;
            c.augment.color_jitter = true;
            c.augment.blur = true;
        }
        c
    }

    /// Apply `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str, context: &str) -> Result<()> {
        let mut section = String::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.split('#').next().unwrap_or("").trim();
            let err = |detail: &str| SfcError::Parse {
                context: context.to_string(),
                offset,
                detail: detail.to_string(),
            };
            if body.is_empty() {
            } else if let Some(name) = body.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?;
                section = name.trim().to_string();
            } else {
                let (k, v) = body.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
                let k = k.trim();
                let key = if section.is_empty() || k.contains('.') {
                    k.to_string()
                } else {
                    format!("{section}.{k}")
                };
                self.set(&key, v)?;
            }
            offset += line.len();
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.merge_text(text, "config")?;
        Ok(c)
    }

    /// Sectioned text that parses back to an equal config.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                out.push_str(&format!("\n[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    /// First 8 bytes of SHA-256 over the architecture keys.
    pub fn architecture_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| ARCH_PREFIXES.iter().any(|p| k.starts_with(p))) {
            h.update(format!("{key}={}\n", self.get(key).expect("listed key")).as_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.heads.hidden == 0 || self.heads.out == 0 {
            return Err(SfcError::Config("head widths must be >= 1".into()));
        }
        if self.optim.batch < 2 {
            return Err(SfcError::Config(format!(
                "optim.batch must be >= 2 for batch norm, got {}",
                self.optim.batch
            )));
        }
        if !(self.optim.lr >= 0.0) || !(0.0..=1.0).contains(&self.optim.ema_m0) {
            return Err(SfcError::Config("optim.lr must be >= 0 and optim.ema_m0 in [0,1]".into()));
        }
        if !(self.loss.radius >= 0.0) || !(self.loss.tau > 0.0) || !(self.loss.alpha >= 0.0) || self.loss.queue == 0 {
            return Err(SfcError::Config(
                "need loss.radius >= 0, loss.tau > 0, loss.alpha >= 0, loss.queue >= 1".into(),
            ));
        }
        self.sampler()?;
        self.propagation().validate()?;
        if self.data.dir.is_empty() {
            let spec = self.scene_spec();
            spec.validate()?;
        }
        Ok(())
    }

    pub fn encoder(&self, kind: ModelKind) -> EncoderConfig {
        EncoderConfig {
            backbone: self.backbone.clone(),
            head: self.heads,
            kind,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            ..AdamConfig::default()
        }
    }

    pub fn sampler(&self) -> Result<CropSampler> {
        let g = self.backbone.grid()?;
        CropSampler::new(
            (self.augment.scale_min, self.augment.scale_max),
            self.backbone.input_size,
            (g, g),
        )
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            hflip: self.augment.hflip,
            color_jitter: self.augment.color_jitter.then(ColorJitter::default),
            blur: self.augment.blur.then(GaussianBlur::default),
            grayscale: self.augment.grayscale,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.data.frame_size,
            width: self.data.frame_size,
            frames: self.data.frames,
            sprites: (self.data.sprites_min, self.data.sprites_max),
            sprite_size: (self.data.sprite_min, self.data.sprite_max),
            max_speed: self.data.max_speed,
            max_scale_rate: self.data.scale_rate,
            ..SceneSpec::default()
        }
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            top_k: self.propagate.top_k,
            context: self.propagate.context,
            radius: self.propagate.radius,
            temperature: self.propagate.temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults_and_edits() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.serialize()).unwrap(), c);
        let mut d = Config::for_kind(ModelKind::Semantic);
        d.set("loss.radius", "0.1").unwrap();
        d.set("backbone.strides", "2,2,2,1").unwrap();
        d.set("data.dir", "/tmp/x y").unwrap();
        assert_eq!(Config::parse(&d.serialize()).unwrap(), d);
        assert_ne!(c.architecture_hash(), d.architecture_hash());
        d.set("loss.radius", "0.7").unwrap();
        d.set("backbone.strides", "2,1,2,1").unwrap();
        assert_eq!(c.architecture_hash(), d.architecture_hash());
    }

    #[test]
    fn sections_comments_and_errors() {
        let c = Config::parse("seed = 3 # trailing\n[optim]\nsteps = 5\n\n[loss]\nloss.alpha = 0.5\n").unwrap();
        assert_eq!((c.seed, c.optim.steps, c.loss.alpha), (3, 5, 0.5));
        assert!(matches!(Config::parse("[optim]\nstesp = 5\n"), Err(SfcError::Config(_))));
        assert!(matches!(Config::parse("optim.steps = five"), Err(SfcError::Config(_))));
        match Config::parse("seed = 1\nnot a pair\n") {
            Err(SfcError::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation() {
        assert!(Config::default().validate().is_ok());
        let mut c = Config::default();
        c.optim.batch = 1;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.data.sprite_max = 100.0;
        assert!(c.validate().is_err());
    }
}
