//! Effective run settings: defaults, then the `key = value` config file, then flags.
//!
//! Every key is also a long flag of the same name, and the reproducibility
//! header is written in config-file syntax so a run can be replayed with
//! `--config`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde_json::Value;
use wrnet::dataio::{FrameFormat, TripletMode};
use wrnet::model::TrainOptions;
use wrnet::{AttentionRoles, Tvl1Params, WrNetConfig};

/// Config keys, in header order, with their flag help text.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "Seed for model initialisation and training"),
    ("tau", "TV-L1 dual time step"),
    ("lambda", "TV-L1 data attachment weight"),
    ("theta", "TV-L1 coupling weight"),
    ("warps-per-level", "TV-L1 warps per pyramid level"),
    ("iters-per-warp", "TV-L1 iterations per warp"),
    ("stop-epsilon", "TV-L1 inner-loop stopping threshold"),
    ("pyramid-factor", "TV-L1 pyramid downscale factor"),
    ("pyramid-min-dim", "TV-L1 smallest pyramid side"),
    (
        "median-filter",
        "TV-L1 3x3 median filtering of the flow (true|false)",
    ),
    (
        "intensity-scale",
        "Multiplier applied to [0,1] intensities before TV-L1",
    ),
    (
        "alpha",
        "Interpolation time in [0,1]; repeat for several outputs",
    ),
    (
        "steps",
        "Training steps (train) or rollout steps (extrapolate)",
    ),
    ("checkpoint", "Model checkpoint to load"),
    ("crop", "Training crop as HxW"),
    ("format", "Output frame format (pgm16|rawf32)"),
    ("batch-size", "Training batch size"),
    ("lr", "Adam learning rate"),
    ("mode", "Training triplets (interpolation|future)"),
    ("frames", "Frames written by synth"),
    ("embed-channels", "Model: attention embedding channels"),
    ("enc-levels", "Model: U-Net encoder levels"),
    (
        "base-channels",
        "Model: channels of the first encoder level",
    ),
    (
        "attention-downsample",
        "Model: block averaging before attention",
    ),
    (
        "residual-output",
        "Model: add the head output to the warped frame (true|false)",
    ),
    (
        "attention-roles",
        "Model: attention role assignment (standard|warped-query)",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub tvl1: Tvl1Params,
    pub alphas: Vec<f32>,
    /// `None` means the subcommand's default.
    pub steps: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub format: FrameFormat,
    pub train: TrainOptions,
    pub frames: usize,
    pub model: WrNetConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            tvl1: Tvl1Params::default(),
            alphas: vec![0.5],
            steps: None,
            checkpoint: None,
            format: FrameFormat::Pgm16,
            train: TrainOptions::default(),
            frames: 10,
            model: WrNetConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn boolean(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

/// Enum values use the library's serde names.
fn named<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(v.to_string()))
        .map_err(|_| format!("{key}: unknown value {v:?}"))
}

fn label<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

fn parse_crop(v: &str) -> Result<(usize, usize), String> {
    let (h, w) = v
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("crop: expected HxW, got {v:?}"))?;
    let h: usize = num("crop", h.trim())?;
    let w: usize = num("crop", w.trim())?;
    if h == 0 || w == 0 {
        return Err("crop: sides must be >= 1".into());
    }
    Ok((w, h))
}

impl Settings {
    /// Applies one key; errors name the key and the offending value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "tau" => self.tvl1.tau = num(key, v)?,
            "lambda" => self.tvl1.lambda = num(key, v)?,
            "theta" => self.tvl1.theta = num(key, v)?,
            "warps-per-level" => self.tvl1.warps_per_level = num(key, v)?,
            "iters-per-warp" => self.tvl1.iters_per_warp = num(key, v)?,
            "stop-epsilon" => self.tvl1.stop_epsilon = num(key, v)?,
            "pyramid-factor" => self.tvl1.pyramid_factor = num(key, v)?,
            "pyramid-min-dim" => self.tvl1.pyramid_min_dim = num(key, v)?,
            "median-filter" => self.tvl1.median_filter = boolean(key, v)?,
            "intensity-scale" => self.tvl1.intensity_scale = num(key, v)?,
            "alpha" => {
                self.alphas = v
                    .split(',')
                    .map(|a| num(key, a.trim()))
                    .collect::<Result<_, _>>()?;
            }
            // Empty means the subcommand default.
            "steps" => {
                self.steps = if v.is_empty() {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "checkpoint" => {
                self.checkpoint = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "crop" => self.train.crop = parse_crop(v)?,
            "format" => self.format = named(key, v)?,
            "batch-size" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.adam.lr = num(key, v)?,
            "mode" => self.train.mode = named::<TripletMode>(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "embed-channels" => self.model.embed_channels = num(key, v)?,
            "enc-levels" => self.model.enc_levels = num(key, v)?,
            "base-channels" => self.model.base_channels = num(key, v)?,
            "attention-downsample" => self.model.attention_downsample = num(key, v)?,
            "residual-output" => self.model.residual_output = boolean(key, v)?,
            "attention-roles" => self.model.attention_roles = named::<AttentionRoles>(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax accepted by [`Settings::set`].
    pub fn get(&self, key: &str) -> String {
        let t = &self.tvl1;
        match key {
            "seed" => self.seed.to_string(),
            "tau" => t.tau.to_string(),
            "lambda" => t.lambda.to_string(),
            "theta" => t.theta.to_string(),
            "warps-per-level" => t.warps_per_level.to_string(),
            "iters-per-warp" => t.iters_per_warp.to_string(),
            "stop-epsilon" => t.stop_epsilon.to_string(),
            "pyramid-factor" => t.pyramid_factor.to_string(),
            "pyramid-min-dim" => t.pyramid_min_dim.to_string(),
            "median-filter" => t.median_filter.to_string(),
            "intensity-scale" => t.intensity_scale.to_string(),
            "alpha" => self
                .alphas
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(", "),
            "steps" => self.steps.map(|s| s.to_string()).unwrap_or_default(),
            "checkpoint" => self
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "crop" => format!("{}x{}", self.train.crop.1, self.train.crop.0),
            "format" => label(&self.format),
            "batch-size" => self.train.batch_size.to_string(),
            "lr" => self.train.adam.lr.to_string(),
            "mode" => label(&self.train.mode),
            "frames" => self.frames.to_string(),
            "embed-channels" => self.model.embed_channels.to_string(),
            "enc-levels" => self.model.enc_levels.to_string(),
            "base-channels" => self.model.base_channels.to_string(),
            "attention-downsample" => self.model.attention_downsample.to_string(),
            "residual-output" => self.model.residual_output.to_string(),
            "attention-roles" => label(&self.model.attention_roles),
            _ => unreachable!("get called with unknown key {key:?}"),
        }
    }

    /// Applies a config file and returns the keys it set. Blank lines and
    /// `#` comments are skipped; unknown and repeated keys are errors.
    pub fn apply_file(&mut self, text: &str) -> Result<HashSet<String>, String> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(format!("line {}: duplicate key {k:?}", i + 1));
            }
            self.set(k, v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(seen)
    }

    /// The header body: every effective value as `key = value`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    /// Training options with the run seed and the train-specific step default.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps.unwrap_or(self.train.steps),
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_the_header() {
        let mut s = Settings::default();
        s.apply_file(
            "seed = 7\ntau = 0.2\nalpha = 0.25, 0.75\ncrop = 32x48\nformat = rawf32\n\
             mode = future\nattention-roles = warped-query\nmedian-filter = false\ncheckpoint = m.json\n",
        )
        .unwrap();
        let mut replay = Settings::default();
        replay.apply_file(&s.render()).unwrap();
        assert_eq!(replay, s);
        assert_eq!(s.train.crop, (48, 32));
        assert_eq!(s.alphas, vec![0.25, 0.75]);
    }

    #[test]
    fn set_and_get_cover_the_key_table() {
        let s = Settings::default();
        for (k, _) in KEYS {
            let mut t = Settings::default();
            t.set(k, &s.get(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(t, s, "{k}");
        }
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let mut s = Settings::default();
        let e = s
            .apply_file("# comment\n\nseed = 1\nbogus = 3\n")
            .unwrap_err();
        assert!(e.contains("line 4") && e.contains("bogus"), "{e}");
        let e = s.apply_file("seed = 1\nseed = 2\n").unwrap_err();
        assert!(e.contains("duplicate"), "{e}");
        assert!(s.apply_file("seed 1\n").is_err());
        assert!(s.clone().set("crop", "32").is_err());
        assert!(s.clone().set("format", "png").is_err());
        assert!(s.clone().set("median-filter", "yes").is_err());
    }
}
