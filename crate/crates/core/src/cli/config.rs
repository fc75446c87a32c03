//! Flat `key=value` run configuration.

use std::path::{Path, PathBuf};

use crate::attention::{MechanismFlags, ShiftConfig};
use crate::error::{Error, Result};
use crate::model::{Mechanisms, ModelDims};
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum LogitScale {
    /// `1/√head_dim`
    Auto,
    Fixed(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Defaults to `4 · model_dim`.
    pub ff_dim: Option<usize>,
    pub channels: usize,
    pub prompt_len: usize,
    pub ref_height: usize,
    pub ref_width: usize,
    pub target_height: usize,
    pub target_width: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights_seed: u64,
    pub input_seed: u64,
    pub alpha1: f32,
    pub alpha2: f32,
    pub shift: bool,
    pub reweight: bool,
    pub blend: bool,
    pub literal_blend: bool,
    /// `None` applies the edits in every block.
    pub enabled_blocks: Option<Vec<usize>>,
    pub logit_scale: LogitScale,
    pub prompt: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub reference_mask: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            blocks: 4,
            ff_dim: None,
            channels: 4,
            prompt_len: 8,
            ref_height: 8,
            ref_width: 8,
            target_height: 8,
            target_width: 8,
            steps: 10,
            seed: 0,
            weights_seed: 0,
            input_seed: 0,
            alpha1: 0.5,
            alpha2: 0.5,
            shift: true,
            reweight: true,
            blend: true,
            literal_blend: false,
            enabled_blocks: None,
            logit_scale: LogitScale::Auto,
            prompt: None,
            reference: None,
            target: None,
            mask: None,
            reference_mask: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            channels: self.channels,
            model_dim: self.model_dim,
            heads: self.heads,
            blocks: self.blocks,
            ff_dim: self.ff_dim.unwrap_or(4 * self.model_dim),
        }
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let mut s = SamplerConfig::new(self.steps, self.seed)?;
        s.blend = self.blend;
        s.literal_blend = self.literal_blend;
        Ok(s)
    }

    pub fn mechanisms(&self) -> Result<Mechanisms> {
        Ok(Mechanisms {
            shift: ShiftConfig::new(self.alpha1, self.alpha2)?,
            flags: MechanismFlags {
                shift: self.shift,
                reweight: self.reweight,
            },
            enabled_blocks: self.enabled_blocks.clone(),
        })
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "model_dim" => self.model_dim = positive(key, value)?,
            "heads" => self.heads = positive(key, value)?,
            "blocks" => self.blocks = positive(key, value)?,
            "ff_dim" => self.ff_dim = Some(positive(key, value)?),
            "channels" => self.channels = positive(key, value)?,
            "prompt_len" => self.prompt_len = positive(key, value)?,
            "ref_height" => self.ref_height = positive(key, value)?,
            "ref_width" => self.ref_width = positive(key, value)?,
            "target_height" => self.target_height = positive(key, value)?,
            "target_width" => self.target_width = positive(key, value)?,
            "steps" => self.steps = positive(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "weights_seed" => self.weights_seed = parse(key, value)?,
            "input_seed" => self.input_seed = parse(key, value)?,
            "alpha1" => self.alpha1 = strength(key, value)?,
            "alpha2" => self.alpha2 = strength(key, value)?,
            "shift" => self.shift = flag(key, value)?,
            "reweight" => self.reweight = flag(key, value)?,
            "blend" => self.blend = flag(key, value)?,
            "literal_blend" => self.literal_blend = flag(key, value)?,
            "enabled_blocks" => {
                self.enabled_blocks = if value == "all" {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|v| parse::<usize>(key, v.trim()))
                            .collect::<std::result::Result<_, _>>()?,
                    )
                }
            }
            "logit_scale" => {
                self.logit_scale = if value == "auto" {
                    LogitScale::Auto
                } else {
                    let v: f32 = parse(key, value)?;
                    if !v.is_finite() || v <= 0.0 {
                        return Err(format!("{key} must be positive or 'auto', got {value}"));
                    }
                    LogitScale::Fixed(v)
                }
            }
            "prompt" => self.prompt = Some(path(key, value)?),
            "reference" => self.reference = Some(path(key, value)?),
            "target" => self.target = Some(path(key, value)?),
            "mask" => self.mask = Some(path(key, value)?),
            "reference_mask" => self.reference_mask = Some(path(key, value)?),
            "out_dir" => self.out_dir = path(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Checks relations between keys.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ref_height != self.target_height {
            return Err(format!(
                "ref_height {} must equal target_height {}",
                self.ref_height, self.target_height
            ));
        }
        if let Some(list) = &self.enabled_blocks {
            if let Some(b) = list.iter().find(|&&b| b >= self.blocks) {
                return Err(format!(
                    "enabled_blocks names block {b} but only {} exist",
                    self.blocks
                ));
            }
        }
        let given = [&self.prompt, &self.reference, &self.target, &self.mask]
            .iter()
            .filter(|p| p.is_some())
            .count();
        if given != 0 && given != 4 {
            return Err("prompt, reference, target and mask must be given together".into());
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn positive(key: &str, value: &str) -> std::result::Result<usize, String> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(format!("{key} must be at least 1, got {value}"));
    }
    Ok(v)
}

fn strength(key: &str, value: &str) -> std::result::Result<f32, String> {
    let v: f32 = parse(key, value)?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("{key} must be a finite value >= 0, got {value}"));
    }
    Ok(v)
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected on/off, got '{value}'")),
    }
}

fn path(key: &str, value: &str) -> std::result::Result<PathBuf, String> {
    if value.is_empty() {
        return Err(format!("{key}: empty path"));
    }
    Ok(PathBuf::from(value))
}

/// Parses config text. `origin` only labels errors.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let err = |line: usize, message: String| Error::Config {
        path: origin.to_path_buf(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected key=value, got '{line}'")));
        };
        cfg.set(key.trim(), value.trim())
            .map_err(|m| err(line_no, m))?;
    }
    cfg.validate().map_err(|m| err(0, m))?;
    Ok(cfg)
}

/// Reads and parses a config file. Relative input paths stay relative to the
/// working directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path)
}
