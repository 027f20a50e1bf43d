use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the motion stream consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionInput {
    /// Color-wheel encoded optical flow (3 channels).
    OpticalFlowRgb,
    /// Current and previous RGB frames stacked (6 channels).
    ImagePair,
}

impl MotionInput {
    pub fn channels(self) -> usize {
        match self {
            MotionInput::OpticalFlowRgb => 3,
            MotionInput::ImagePair => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionInput::OpticalFlowRgb => "optical_flow_rgb",
            MotionInput::ImagePair => "image_pair",
        }
    }
}

impl FromStr for MotionInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optical_flow_rgb" => Ok(MotionInput::OpticalFlowRgb),
            "image_pair" => Ok(MotionInput::ImagePair),
            _ => Err(Error::Config(format!("unknown motion_input {s:?}"))),
        }
    }
}

/// Network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stages: usize,
    pub channels_per_stage: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dropout_p: f64,
    pub rezoom_enabled: bool,
    pub motion_input: MotionInput,
    /// Without a motion stream the segmentation decoder reads appearance only.
    pub motion_stream: bool,
    pub seg_head: bool,
    pub det_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 192,
            stages: 3,
            channels_per_stage: vec![16, 32, 64],
            convs_per_stage: vec![2, 2, 2],
            grid_h: 8,
            grid_w: 24,
            dropout_p: 0.5,
            rezoom_enabled: true,
            motion_input: MotionInput::OpticalFlowRgb,
            motion_stream: true,
            seg_head: true,
            det_head: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(out)
}

impl ModelConfig {
    /// Cell size in pixels.
    pub fn cell_size(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.channels_per_stage.len() != self.stages || self.convs_per_stage.len() != self.stages {
            return bad(format!(
                "channels_per_stage ({}) and convs_per_stage ({}) need one entry per stage ({})",
                self.channels_per_stage.len(),
                self.convs_per_stage.len(),
                self.stages
            ));
        }
        if self.channels_per_stage.contains(&0) || self.convs_per_stage.contains(&0) {
            return bad("stage channels and conv counts must be positive".into());
        }
        let cell = self.cell_size();
        if !self.input_h.is_multiple_of(cell) || self.input_h / cell != self.grid_h {
            return bad(format!(
                "input_h {} / 2^{} must equal grid_h {}",
                self.input_h, self.stages, self.grid_h
            ));
        }
        if !self.input_w.is_multiple_of(cell) || self.input_w / cell != self.grid_w {
            return bad(format!(
                "input_w {} / 2^{} must equal grid_w {}",
                self.input_w, self.stages, self.grid_w
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if !self.seg_head && !self.det_head {
            return bad("at least one head must be enabled".into());
        }
        Ok(())
    }

    /// Flat `key = value` text, one key per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("input_h", self.input_h.to_string());
        put("input_w", self.input_w.to_string());
        put("stages", self.stages.to_string());
        put("channels_per_stage", join(&self.channels_per_stage));
        put("convs_per_stage", join(&self.convs_per_stage));
        put("grid_h", self.grid_h.to_string());
        put("grid_w", self.grid_w.to_string());
        put("dropout_p", self.dropout_p.to_string());
        put("rezoom_enabled", self.rezoom_enabled.to_string());
        put("motion_input", self.motion_input.as_str().to_string());
        put("motion_stream", self.motion_stream.to_string());
        put("seg_head", self.seg_head.to_string());
        put("det_head", self.det_head.to_string());
        s
    }

    /// Applies recognised keys from `map` on top of `self`; unknown keys are
    /// returned so callers can reject or reuse them.
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, v) in map {
            match k.as_str() {
                "input_h" => self.input_h = parse(k, v)?,
                "input_w" => self.input_w = parse(k, v)?,
                "stages" => self.stages = parse(k, v)?,
                "channels_per_stage" => self.channels_per_stage = parse_list(k, v)?,
                "convs_per_stage" => self.convs_per_stage = parse_list(k, v)?,
                "grid_h" => self.grid_h = parse(k, v)?,
                "grid_w" => self.grid_w = parse(k, v)?,
                "dropout_p" => self.dropout_p = parse(k, v)?,
                "rezoom_enabled" => self.rezoom_enabled = parse(k, v)?,
                "motion_input" => self.motion_input = v.parse()?,
                "motion_stream" => self.motion_stream = parse(k, v)?,
                "seg_head" => self.seg_head = parse(k, v)?,
                "det_head" => self.det_head = parse(k, v)?,
                _ => unknown.push(k.clone()),
            }
        }
        Ok(unknown)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let unknown = cfg.apply_kv(&parse_kv(text)?)?;
        if let Some(k) = unknown.first() {
            return Err(Error::Config(format!("unknown model key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}
