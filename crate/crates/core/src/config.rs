//! Run configuration: `key=value` lines, `#` comments, every key optional.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::BoundarySupervision;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;
use crate::synthdata::{scene_collection, ClipEntry, SceneSpec, Split, TextureKind};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 8,
            eval_clips: 2,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub threshold: f64,
    /// Boundary tolerance in px; `None` uses the diagonal rule.
    pub tolerance: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            tolerance: None,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_list4(v: &str) -> std::result::Result<[usize; 4], String> {
    let items = v.split(',').map(|s| parse::<usize>(s.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
    items.try_into().map_err(|_| format!("expected 4 comma-separated values, got {v:?}"))
}

fn list4(v: &[usize; 4]) -> String {
    v.map(|x| x.to_string()).join(",")
}

/// Every recognized key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "backbone.channels",
    "backbone.strides",
    "backbone.convs_per_stage",
    "mat.layers",
    "mat.reduction",
    "mat.transposed_transition",
    "bridge.ssa",
    "decoder.width",
    "decoder.boundary_supervision",
    "train.lr_encoder_bridge",
    "train.lr_decoder",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.iterations",
    "train.hflip",
    "train.rotation_deg",
    "train.checkpoint_every",
    "data.train_clips",
    "data.eval_clips",
    "data.frames",
    "data.height",
    "data.width",
    "data.object_size",
    "data.contrast",
    "data.texture_amplitude",
    "data.speed_x",
    "data.speed_y",
    "data.scale_drift",
    "data.background",
    "data.background_amplitude",
    "loss.hem_radius",
    "eval.threshold",
    "eval.tolerance",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.data.scene;
        match key {
            "seed" => {
                self.seed = parse(v)?;
                t.seed = self.seed;
            }
            "backbone.channels" => m.backbone.stage_channels = parse_list4(v)?,
            "backbone.strides" => m.backbone.stage_strides = parse_list4(v)?,
            "backbone.convs_per_stage" => m.backbone.convs_per_stage = parse(v)?,
            "mat.layers" => m.mat.layers = parse(v)?,
            "mat.reduction" => m.mat.reduction = parse(v)?,
            "mat.transposed_transition" => m.mat.transposed_transition = parse_bool(v)?,
            "bridge.ssa" => m.use_ssa = parse_bool(v)?,
            "decoder.width" => m.decoder_width = parse(v)?,
            "decoder.boundary_supervision" => {
                m.supervision = BoundarySupervision::parse(v).ok_or_else(|| format!("expected downsample or upsample, got {v:?}"))?
            }
            "train.lr_encoder_bridge" => t.lr_encoder_bridge = parse(v)?,
            "train.lr_decoder" => t.lr_decoder = parse(v)?,
            "train.momentum" => t.momentum = parse(v)?,
            "train.weight_decay" => t.weight_decay = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.iterations" => t.iterations = parse(v)?,
            "train.hflip" => t.hflip = parse_bool(v)?,
            "train.rotation_deg" => t.max_rotation_deg = parse(v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(v)?,
            "data.train_clips" => self.data.train_clips = parse(v)?,
            "data.eval_clips" => self.data.eval_clips = parse(v)?,
            "data.frames" => s.num_frames = parse(v)?,
            "data.height" => s.height = parse(v)?,
            "data.width" => s.width = parse(v)?,
            "data.object_size" => s.object.size = parse(v)?,
            "data.contrast" => s.object.contrast = parse(v)?,
            "data.texture_amplitude" => s.object.texture_amplitude = parse(v)?,
            "data.speed_x" => s.motion.dx = parse(v)?,
            "data.speed_y" => s.motion.dy = parse(v)?,
            "data.scale_drift" => s.motion.scale_drift = parse(v)?,
            "data.background" => {
                s.background.texture = TextureKind::parse(v).ok_or_else(|| format!("unknown texture {v:?}"))?
            }
            "data.background_amplitude" => s.background.amplitude = parse(v)?,
            "loss.hem_radius" => {
                s.hem_radius = parse(v)?;
                t.hem_radius = s.hem_radius;
            }
            "eval.threshold" => self.threshold = parse(v)?,
            "eval.tolerance" => {
                self.tolerance = if v == "auto" { None } else { Some(parse(v)?) };
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.data.scene;
        Some(match key {
            "seed" => self.seed.to_string(),
            "backbone.channels" => list4(&m.backbone.stage_channels),
            "backbone.strides" => list4(&m.backbone.stage_strides),
            "backbone.convs_per_stage" => m.backbone.convs_per_stage.to_string(),
            "mat.layers" => m.mat.layers.to_string(),
            "mat.reduction" => m.mat.reduction.to_string(),
            "mat.transposed_transition" => m.mat.transposed_transition.to_string(),
            "bridge.ssa" => m.use_ssa.to_string(),
            "decoder.width" => m.decoder_width.to_string(),
            "decoder.boundary_supervision" => m.supervision.name().to_string(),
            "train.lr_encoder_bridge" => format!("{:?}", t.lr_encoder_bridge),
            "train.lr_decoder" => format!("{:?}", t.lr_decoder),
            "train.momentum" => format!("{:?}", t.momentum),
            "train.weight_decay" => format!("{:?}", t.weight_decay),
            "train.batch_size" => t.batch_size.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.hflip" => t.hflip.to_string(),
            "train.rotation_deg" => format!("{:?}", t.max_rotation_deg),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "data.train_clips" => self.data.train_clips.to_string(),
            "data.eval_clips" => self.data.eval_clips.to_string(),
            "data.frames" => s.num_frames.to_string(),
            "data.height" => s.height.to_string(),
            "data.width" => s.width.to_string(),
            "data.object_size" => format!("{:?}", s.object.size),
            "data.contrast" => format!("{:?}", s.object.contrast),
            "data.texture_amplitude" => format!("{:?}", s.object.texture_amplitude),
            "data.speed_x" => format!("{:?}", s.motion.dx),
            "data.speed_y" => format!("{:?}", s.motion.dy),
            "data.scale_drift" => format!("{:?}", s.motion.scale_drift),
            "data.background" => s.background.texture.name().to_string(),
            "data.background_amplitude" => format!("{:?}", s.background.amplitude),
            "loss.hem_radius" => s.hem_radius.to_string(),
            "eval.threshold" => format!("{:?}", self.threshold),
            "eval.tolerance" => self.tolerance.map_or("auto".into(), |t| t.to_string()),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config { line: i + 1, detail };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|d| err(format!("{key}: {d}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Named scene specs of both splits, train first.
    pub fn clips(&self) -> Vec<(ClipEntry, SceneSpec)> {
        let mut out = Vec::new();
        for (split, count, salt) in [
            (Split::Train, self.data.train_clips, 0x7EA1),
            (Split::Eval, self.data.eval_clips, 0xE7A1),
        ] {
            for (i, spec) in scene_collection(&self.data.scene, self.seed ^ salt, count).into_iter().enumerate() {
                let entry = ClipEntry {
                    name: format!("{}_{i:03}", split.name()),
                    split,
                    frames: spec.num_frames,
                };
                out.push((entry, spec));
            }
        }
        out
    }
}
