//! Run configuration: one flat `key = value` file (TOML syntax) plus
//! `key=value` overrides, resolved into the model, training, data and
//! evaluation settings of a run. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Background, MotionClass, ShapeKind, SynthSpec};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_IOU_THRESHOLD;
use crate::model::ModelConfig;
use crate::training::{streams, InitMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    /// 16×128×128 RGB clips, `[2, 8, 8, 256]` bottleneck.
    Full,
    /// 16×64×64 RGB clips, CPU-sized.
    Desk,
    /// 4×16×16 greyscale clips, for tests.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitName {
    Random,
    Autoencoder,
    Disentangle,
}

/// Every setting of a run. Field names are the configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Random flips during pretraining.
    pub augment: bool,
    /// Random flips during fine-tuning. Off by default: reversing or
    /// mirroring a clip changes the direction of motion, which is the
    /// label of synthetic clips.
    pub finetune_augment: bool,

    pub model: ModelPreset,
    pub num_classes: usize,

    /// Dataset archive read by training and evaluation commands.
    pub data: Option<PathBuf>,
    /// Checkpoint read by `finetune` (encoder source), `eval` and `reconstruct`.
    pub checkpoint: Option<PathBuf>,
    pub init: InitName,

    pub clips_per_class: usize,
    pub num_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub motion_classes: Vec<MotionClass>,
    pub background: Background,

    pub iou_threshold: f64,
    /// Dataset item rendered by `reconstruct`.
    pub clip_index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthSpec::default();
        RunConfig {
            seed: t.seed,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            early_stop_patience: t.early_stop_patience,
            grad_clip: t.grad_clip,
            val_fraction: t.val_fraction,
            augment: t.augment,
            finetune_augment: false,
            model: ModelPreset::Full,
            num_classes: MotionClass::ALL.len(),
            data: None,
            checkpoint: None,
            init: InitName::Random,
            clips_per_class: 100,
            num_shapes: s.num_shapes,
            shape_kinds: s.shape_kinds,
            motion_classes: s.motion_classes,
            background: s.background,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            clip_index: 0,
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{origin}: {}", e.message())))
}

/// Parses one `key=value` override. Values are read as TOML; anything that
/// does not parse as a TOML value is taken as a bare string, so
/// `model=desk` and `model="desk"` mean the same.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.contains('.') {
        return Err(Error::Config(format!("override `{s}` has an invalid key")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

impl RunConfig {
    /// Defaults, then the file (if any), then each override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => toml::Table::new(),
        };
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("key `{k}`: sections are not supported, keys are flat")));
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = RunConfig::deserialize(table).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved configuration as TOML; reading it back yields `self`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.model_config().validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.iou_threshold >= 0.0) {
            return Err(Error::Config(format!("iou_threshold must be >= 0, got {}", self.iou_threshold)));
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed: self.seed,
            early_stop_patience: self.early_stop_patience,
            grad_clip: self.grad_clip,
            val_fraction: self.val_fraction,
            augment: self.augment,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.model {
            ModelPreset::Full => ModelConfig::full(self.num_classes),
            ModelPreset::Desk => ModelConfig::desk(self.num_classes),
            ModelPreset::Tiny => ModelConfig::tiny(self.num_classes),
        }
    }

    /// Generator settings; clip extents follow the model preset so generated
    /// data always fits the network.
    pub fn synth_spec(&self) -> SynthSpec {
        let [t, h, _, c] = self.model_config().input_dims;
        SynthSpec {
            num_shapes: self.num_shapes,
            shape_kinds: self.shape_kinds.clone(),
            motion_classes: self.motion_classes.clone(),
            frame_size: h,
            frames: t,
            channels: c,
            background: self.background,
            seed: derive_seed(self.seed, streams::DATA),
        }
    }

    pub fn init_mode(&self) -> Result<InitMode> {
        let ckpt = || {
            self.checkpoint.clone().ok_or_else(|| {
                Error::Config(format!(
                    "init = {:?} needs the `checkpoint` key",
                    self.init
                ))
            })
        };
        Ok(match self.init {
            InitName::Random => InitMode::Random,
            InitName::Autoencoder => InitMode::AutoencoderPretrained(ckpt()?),
            InitName::Disentangle => InitMode::DisentanglePretrained(ckpt()?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_published_defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 40);
        assert_eq!(c.epochs, 125);
        assert_eq!(c.weight_decay, 1e-3);
        assert_eq!(c.model_config(), ModelConfig::full(8));
        assert_eq!(c.synth_spec().frame_size, 128);
    }

    #[test]
    fn overrides_take_precedence_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "epochs = 7\nmodel = \"desk\"\n").unwrap();
        let c = RunConfig::resolve(Some(&p), &["epochs=2".into(), "model=tiny".into()]).unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.model, ModelPreset::Tiny);
        let c = RunConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!(c.epochs, 7);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = RunConfig::resolve(None, &["foo=1".into()]).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = RunConfig::resolve(None, &["epochs=many".into()]).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        assert!(RunConfig::resolve(None, &["epochs".into()]).is_err());
        assert!(RunConfig::resolve(None, &["learning_rate=0".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::resolve(None, &["seed=9".into(), "data=/tmp/x.dsa".into(), "motion_classes=[\"right\"]".into()])
            .unwrap();
        assert_eq!(RunConfig::from_toml(&c.echo()).unwrap(), c);
    }

    #[test]
    fn pretrained_init_requires_checkpoint() {
        let c = RunConfig::resolve(None, &["init=disentangle".into()]).unwrap();
        assert!(c.init_mode().is_err());
        let c = RunConfig::resolve(None, &["init=disentangle".into(), "checkpoint=a.ckpt".into()]).unwrap();
        assert_eq!(c.init_mode().unwrap(), InitMode::DisentanglePretrained("a.ckpt".into()));
    }
}
