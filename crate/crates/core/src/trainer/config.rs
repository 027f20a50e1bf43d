use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parse_kv, ModelConfig, MotionInput};

/// The network variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Appearance-only segmentation network.
    SegOnly1Stream,
    /// Two-stream segmentation network.
    Seg2Stream,
    /// Shared encoder, both heads, tasks alternated per step.
    Joint2Stream,
    /// Two-stream segmentation network and a detection network trained apart.
    Separate2Stream,
    /// Joint training with a stacked image pair as motion input.
    ImagePairVariant,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::SegOnly1Stream,
        TrainMode::Seg2Stream,
        TrainMode::Joint2Stream,
        TrainMode::Separate2Stream,
        TrainMode::ImagePairVariant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SegOnly1Stream => "seg_only_1stream",
            TrainMode::Seg2Stream => "seg_2stream",
            TrainMode::Joint2Stream => "joint_2stream",
            TrainMode::Separate2Stream => "separate_2stream",
            TrainMode::ImagePairVariant => "image_pair_variant",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::SegOnly1Stream => "RGB (1-stream)",
            TrainMode::Seg2Stream => "RGB+OF (2-stream)",
            TrainMode::Joint2Stream => "RGB+OF joint",
            TrainMode::Separate2Stream => "RGB+OF separate",
            TrainMode::ImagePairVariant => "RGB+image pair joint",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where motion masks and static/moving labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// `masks/` and `labels/` written by the scene generator.
    Generated,
    /// `mod_masks/` and `mod_labels/` written by the annotator.
    Annotated,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Generated => "generated",
            LabelSource::Annotated => "annotated",
        }
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generated" => Ok(LabelSource::Generated),
            "annotated" => Ok(LabelSource::Annotated),
            _ => Err(Error::Config(format!("unknown label source {s:?}"))),
        }
    }
}

/// One training run.
///
/// Text form is `key = value` lines. Keys prefixed `model.` override the
/// network topology; the heads, streams, motion input and dropout are set
/// by `mode` and `dropout` and cannot be overridden.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of drawing the segmentation task on a joint step.
    pub p_seg: f64,
    pub data: PathBuf,
    pub labels: LabelSource,
    pub train_split: String,
    pub eval_split: String,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Smoothing factor of the exponential loss average.
    pub ema: f64,
    pub model: BTreeMap<String, String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Joint2Stream,
            lr: 1e-5,
            l2: 5e-4,
            dropout: 0.5,
            epochs: 30,
            batch_size: 4,
            seed: 42,
            p_seg: 0.5,
            data: PathBuf::from("data"),
            labels: LabelSource::Generated,
            train_split: "train".into(),
            eval_split: "val".into(),
            eval_every: 0,
            ema: 0.9,
            model: BTreeMap::new(),
        }
    }
}

const FIXED_MODEL_KEYS: [&str; 5] = ["seg_head", "det_head", "motion_stream", "motion_input", "dropout_p"];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if !(0.0..=1.0).contains(&self.p_seg) {
            return bad(format!("p_seg {} not in [0, 1]", self.p_seg));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return bad(format!("ema {} not in [0, 1)", self.ema));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for k in self.model.keys() {
            if FIXED_MODEL_KEYS.contains(&k.as_str()) {
                return bad(format!("model.{k} is set by mode/dropout"));
            }
        }
        for cfg in self.model_configs()? {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Network configs the mode trains: one model, or segmentation then
    /// detection for `separate_2stream`.
    pub fn model_configs(&self) -> Result<Vec<ModelConfig>> {
        let mut base = ModelConfig::default();
        let unknown = base.apply_kv(&self.model)?;
        if let Some(k) = unknown.first() {
            return Err(Error::Config(format!("unknown model key model.{k}")));
        }
        base.dropout_p = self.dropout;
        let with = |seg: bool, det: bool, motion: bool, input: MotionInput| ModelConfig {
            seg_head: seg,
            det_head: det,
            motion_stream: motion,
            motion_input: input,
            ..base.clone()
        };
        let flow = MotionInput::OpticalFlowRgb;
        Ok(match self.mode {
            TrainMode::SegOnly1Stream => vec![with(true, false, false, flow)],
            TrainMode::Seg2Stream => vec![with(true, false, true, flow)],
            TrainMode::Joint2Stream => vec![with(true, true, true, flow)],
            TrainMode::Separate2Stream => vec![with(true, false, true, flow), with(false, true, false, flow)],
            TrainMode::ImagePairVariant => vec![with(true, true, true, MotionInput::ImagePair)],
        })
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("mode", self.mode.to_string());
        put("lr", self.lr.to_string());
        put("l2", self.l2.to_string());
        put("dropout", self.dropout.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("p_seg", self.p_seg.to_string());
        put("data", self.data.display().to_string());
        put("labels", self.labels.as_str().to_string());
        put("train_split", self.train_split.clone());
        put("eval_split", self.eval_split.clone());
        put("eval_every", self.eval_every.to_string());
        put("ema", self.ema.to_string());
        for (k, v) in &self.model {
            put(&format!("model.{k}"), v.clone());
        }
        s
    }

    /// Parses the text form. A relative `data` path is resolved against
    /// `base_dir` when one is given.
    pub fn from_kv(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "mode" => c.mode = v.parse()?,
                "lr" => c.lr = parse(&k, &v)?,
                "l2" => c.l2 = parse(&k, &v)?,
                "dropout" => c.dropout = parse(&k, &v)?,
                "epochs" => c.epochs = parse(&k, &v)?,
                "batch_size" => c.batch_size = parse(&k, &v)?,
                "seed" => c.seed = parse(&k, &v)?,
                "p_seg" => c.p_seg = parse(&k, &v)?,
                "data" => c.data = PathBuf::from(v),
                "labels" => c.labels = v.parse()?,
                "train_split" => c.train_split = v,
                "eval_split" => c.eval_split = v,
                "eval_every" => c.eval_every = parse(&k, &v)?,
                "ema" => c.ema = parse(&k, &v)?,
                _ => match k.strip_prefix("model.") {
                    Some(mk) => {
                        c.model.insert(mk.to_string(), v);
                    }
                    None => return Err(Error::Config(format!("unknown key {k:?}"))),
                },
            }
        }
        if let Some(base) = base_dir {
            if c.data.is_relative() {
                c.data = base.join(&c.data);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text, path.parent())
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}
