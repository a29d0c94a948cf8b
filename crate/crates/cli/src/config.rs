//! Run configuration: a flat `key = value` file over a nested schema.
//!
//! ```text
//! # comment
//! seed = 7
//! preset = assembly
//! scene.num_frames = 40
//! scene.sprite_size = [16, 40]
//! model.cell.kind = learned_align
//! finetune.max_steps = 3000
//! ```
//!
//! Keys are dotted paths into [`RunConfig`]; values are JSON literals, except that string-valued
//! keys also accept bare words. `preset` is applied before any `scene.*` key. Unless set
//! explicitly, `model.detector.num_classes` follows `scene.num_classes`, `model.cell.channels`
//! follows the last backbone width, and the stage seeds are derived from `seed`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use occtrack::detector::DetectorConfig;
use occtrack::memory::{CellConfig, CellKind};
use occtrack::seed::derive_seed;
use occtrack::synth::{OccluderStyle, Preset, SceneSpec};
use occtrack::video::{Direction, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

const PRETRAIN_TAG: u64 = 0x7072;
const FINETUNE_TAG: u64 = 0x6674;
const DATA_TAG: u64 = 0x6461;
const MODEL_TAG: u64 = 0x6d6f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the generated splits; `null` uses the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Test sequences whose occluders all look like the background.
    pub untextured_test_sequences: usize,
    /// Static composite images for pretraining.
    pub composites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub detector: DetectorConfig,
    pub cell: CellConfig,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

/// Detector sized for CPU training on 128x128 frames.
pub fn desk_detector() -> DetectorConfig {
    DetectorConfig {
        backbone_channels: [8, 16, 32, 32],
        rpn_channels: 32,
        head_hidden: 64,
        ..DetectorConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = Preset::Assembly;
        let scene = SceneSpec::preset(preset);
        let detector = DetectorConfig {
            num_classes: scene.num_classes,
            ..desk_detector()
        };
        let cell = CellConfig {
            channels: detector.feature_channels(),
            ..CellConfig::default()
        };
        let seed = 0;
        RunConfig {
            seed,
            preset,
            scene,
            data: DataConfig {
                seed: None,
                train_sequences: 100,
                test_sequences: 20,
                untextured_test_sequences: 20,
                composites: 1000,
            },
            model: ModelSection {
                detector,
                cell,
                direction: Direction::Forward,
            },
            pretrain: TrainConfig {
                bptt_steps: 1,
                max_steps: 3000,
                eval_every: 100,
                seed: derive_seed(seed, &[PRETRAIN_TAG]),
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                bptt_steps: 5,
                max_steps: 3000,
                eval_every: 100,
                lr_drop_fraction: Some(2.0 / 3.0),
                seed: derive_seed(seed, &[FINETUNE_TAG]),
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                iou_threshold: 0.5,
                score_threshold: 0.5,
            },
        }
    }
}

/// Split names and the seed stream of each.
pub const SPLITS: [&str; 4] = ["train", "test", "test_untextured", "composites"];

impl RunConfig {
    /// Parses a config file and applies `overrides` (`key=value`) on top of it.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| occtrack::Error::io(path, e))?;
            pairs.extend(parse_pairs(&text, &path.display().to_string())?);
        }
        for (i, o) in overrides.iter().enumerate() {
            pairs.extend(parse_pairs(o, &format!("override {}", i + 1))?);
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.preset = v.trim_matches('"').parse().map_err(usage)?;
            cfg.scene = SceneSpec::preset(cfg.preset);
            cfg.model.detector.num_classes = cfg.scene.num_classes;
        }
        let mut tree = serde_json::to_value(&cfg).expect("config serialises");
        let mut explicit = BTreeSet::new();
        for (key, raw) in pairs {
            if key == "preset" {
                continue;
            }
            set_path(&mut tree, key, raw)?;
            explicit.insert(key.as_str());
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if !explicit.contains("model.detector.num_classes") {
            cfg.model.detector.num_classes = cfg.scene.num_classes;
        }
        if !explicit.contains("model.cell.channels") {
            cfg.model.cell.channels = cfg.model.detector.feature_channels();
        }
        if !explicit.contains("pretrain.seed") {
            cfg.pretrain.seed = derive_seed(cfg.seed, &[PRETRAIN_TAG]);
        }
        if !explicit.contains("finetune.seed") {
            cfg.finetune.seed = derive_seed(cfg.seed, &[FINETUNE_TAG]);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scene.validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        self.finetune.validate().map_err(usage)?;
        self.model_config(self.model.cell.kind, self.model.direction).validate().map_err(usage)?;
        if self.model.detector.num_classes < self.scene.num_classes {
            return Err(CliError::Usage(format!(
                "model.detector.num_classes = {} cannot cover scene.num_classes = {}",
                self.model.detector.num_classes, self.scene.num_classes
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, kind: CellKind, direction: Direction) -> ModelConfig {
        ModelConfig {
            detector: self.model.detector.clone(),
            cell: CellConfig {
                kind,
                ..self.model.cell.clone()
            },
            direction,
        }
    }

    /// Scene of a split: the untextured test split swaps the occluder style.
    pub fn split_scene(&self, split: &str) -> SceneSpec {
        match split {
            "test_untextured" => SceneSpec {
                occluder_style: OccluderStyle::Untextured,
                ..self.scene.clone()
            },
            _ => self.scene.clone(),
        }
    }

    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.data.train_sequences,
            "test" => self.data.test_sequences,
            "test_untextured" => self.data.untextured_test_sequences,
            _ => self.data.composites,
        }
    }

    pub fn split_seed(&self, split: &str) -> u64 {
        let i = SPLITS.iter().position(|s| *s == split).unwrap_or(SPLITS.len()) as u64;
        derive_seed(self.data.seed.unwrap_or(self.seed), &[DATA_TAG, i])
    }

    /// Initialisation seed of a model trained from this config.
    pub fn model_seed(&self, kind: CellKind) -> u64 {
        derive_seed(self.seed, &[MODEL_TAG, kind as u64])
    }

    /// Every leaf as a `key = value` line, in schema order.
    pub fn to_flat(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset);
        let mut tree = serde_json::to_value(self).expect("config serialises");
        tree.as_object_mut().expect("object").remove("preset");
        flatten("", &tree, &mut out);
        out
    }
}

fn usage(e: occtrack::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

/// Splits `text` into `(key, value)` pairs; `#` starts a comment.
pub fn parse_pairs(text: &str, source: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{source}:{}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(CliError::Usage(format!("{source}:{}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> CliResult<()> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    if node.is_object() {
        return Err(CliError::Usage(format!("config key `{key}` is a section, not a value")));
    }
    *node = if node.is_string() && !raw.starts_with('"') {
        Value::String(raw.to_string())
    } else {
        serde_json::from_str(raw).map_err(|e| CliError::Usage(format!("config key `{key}`: bad value `{raw}`: {e}")))?
    };
    Ok(())
}
