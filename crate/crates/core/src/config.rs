//! Run configuration: one flat `key = value` file covering every module,
//! with `#` comments and dotted keys. Parsing and serialization are exact
//! inverses, so a written config reloads to an identical value.

use crate::encoder::EncoderConfig;
use crate::propagate::PropagationConfig;
use crate::regressor::RegressorConfig;
use crate::transition::TransitionConfig;
use crate::walkloss::{CycleConfig, SmoothnessConfig};
use std::fmt;

/// Which objective the training loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Matcher only: cycle walk loss plus smoothness.
    Nonparametric,
    /// Matcher plus the residual flow heads and their losses.
    Regressor,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Nonparametric => "nonparametric",
            ModelKind::Regressor => "regressor",
        })
    }
}

/// Where training sequences come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Generated on the fly from the run seed.
    Synthetic,
    /// Numbered frames read from `data.dir`.
    Directory,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Directory => "dir",
        })
    }
}

/// Synthetic scene family to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Translation,
    Occlusion,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::Translation => "translation",
            SceneKind::Occlusion => "occlusion",
        })
    }
}

/// Optimization schedule and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; gradients above it are rescaled.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps_per_stage: usize,
    /// Frames per walk for each curriculum stage, strictly increasing,
    /// starting at 2 or more.
    pub curriculum: Vec<usize>,
    pub seed: u64,
    pub model: ModelKind,
    pub out_dir: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-4,
            momentum: 0.9,
            clip_norm: 10.0,
            batch_size: 2,
            steps_per_stage: 200,
            curriculum: vec![2],
            seed: 0,
            model: ModelKind::Nonparametric,
            out_dir: "out".to_string(),
        }
    }
}

/// Training data parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: DataSource,
    pub dir: String,
    pub size: usize,
    pub max_shift: usize,
    pub texture_scale: f64,
    pub scene: SceneKind,
    pub jitter_brightness: f64,
    pub jitter_hue: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            source: DataSource::Synthetic,
            dir: String::new(),
            size: 64,
            max_shift: 6,
            texture_scale: 4.0,
            scene: SceneKind::Translation,
            jitter_brightness: 0.0,
            jitter_hue: 0.0,
        }
    }
}

/// Every knob of a run, grouped by module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub transition: TransitionConfig,
    pub cycle: CycleConfig,
    pub smoothness: SmoothnessConfig,
    pub regressor: RegressorConfig,
    pub propagation: PropagationConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

/// A rejected config, always naming the offending key.
#[derive(Clone, Debug, PartialEq)]
pub enum ConfigError {
    UnknownKey { line: usize, key: String },
    BadValue { key: String, value: String, expected: &'static str },
    MissingSeparator { line: usize, text: String },
    Invalid { key: String, why: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { line, key } => {
                write!(f, "line {line}: unknown config key `{key}`")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "key `{key}`: cannot read `{value}` as {expected}")
            }
            ConfigError::MissingSeparator { line, text } => {
                write!(f, "line {line}: `{text}` is not a `key = value` pair")
            }
            ConfigError::Invalid { key, why } => write!(f, "key `{key}`: {why}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn scalar<T: std::str::FromStr>(key: &str, v: &str, expected: &'static str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: v.to_string(),
        expected,
    })
}

fn list<T: std::str::FromStr>(key: &str, v: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    if v == "auto" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| scalar(key, s.trim(), expected)).collect()
}

fn fmt_list<T: fmt::Display>(xs: &[T]) -> String {
    if xs.is_empty() {
        return "auto".to_string();
    }
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a full config text. Defaults fill everything a key does not
    /// override; any unknown key, unreadable value, or broken invariant is
    /// an error naming the key.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MissingSeparator { line: i + 1, text: line.to_string() });
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "encoder.levels" => self.encoder.levels = scalar(key, v, "a positive integer")?,
            "encoder.embed_dim" => self.encoder.embed_dim = scalar(key, v, "a positive integer")?,
            "encoder.base_channels" => self.encoder.base_channels = scalar(key, v, "a positive integer")?,

            "transition.window" => self.transition.window = scalar(key, v, "an odd integer")?,
            "transition.temperature" => self.transition.temperature = scalar(key, v, "a real")?,
            "transition.prune_threshold" => self.transition.prune_threshold = scalar(key, v, "a real")?,
            "transition.bilinear_attention" => self.transition.bilinear_attention = scalar(key, v, "true or false")?,

            "cycle.subcycles" => self.cycle.subcycles = scalar(key, v, "true or false")?,
            "cycle.level_weights" => self.cycle.level_weights = list(key, v, "a comma list of reals")?,
            "cycle.pixel_sum" => self.cycle.pixel_sum = scalar(key, v, "true or false")?,

            "smoothness.lambda_c" => self.smoothness.lambda_c = scalar(key, v, "a real")?,
            "smoothness.weight" => self.smoothness.weight = scalar(key, v, "a real")?,

            "regressor.hidden_channels" => self.regressor.hidden_channels = scalar(key, v, "a positive integer")?,
            "regressor.depth" => self.regressor.depth = scalar(key, v, "a positive integer")?,
            "regressor.feature_weight" => self.regressor.feature_weight = scalar(key, v, "a real")?,
            "regressor.agreement_weight" => self.regressor.agreement_weight = scalar(key, v, "a real")?,
            "regressor.boundary_weight" => self.regressor.boundary_weight = scalar(key, v, "a real")?,
            "regressor.crop_margin" => self.regressor.crop_margin = scalar(key, v, "an integer")?,
            "regressor.fb_threshold_abs" => self.regressor.fb_threshold_abs = scalar(key, v, "a real")?,
            "regressor.fb_threshold_rel" => self.regressor.fb_threshold_rel = scalar(key, v, "a real")?,
            "regressor.charbonnier" => self.regressor.charbonnier = scalar(key, v, "true or false")?,
            "regressor.charbonnier_eps" => self.regressor.charbonnier_eps = scalar(key, v, "a real")?,

            "propagation.context_size" => self.propagation.context_size = scalar(key, v, "a positive integer")?,
            "propagation.top_k" => self.propagation.top_k = scalar(key, v, "a positive integer")?,
            "propagation.query_level" => {
                self.propagation.query_level =
                    if v == "auto" { None } else { Some(scalar(key, v, "`auto` or an integer")?) }
            }
            "propagation.hypercolumn_levels" => {
                self.propagation.hypercolumn_levels = list(key, v, "`auto` or a comma list of integers")?
            }

            "train.learning_rate" => self.train.learning_rate = scalar(key, v, "a real")?,
            "train.momentum" => self.train.momentum = scalar(key, v, "a real")?,
            "train.clip_norm" => self.train.clip_norm = scalar(key, v, "a real")?,
            "train.batch_size" => self.train.batch_size = scalar(key, v, "a positive integer")?,
            "train.steps_per_stage" => self.train.steps_per_stage = scalar(key, v, "an integer")?,
            "train.curriculum" => self.train.curriculum = list(key, v, "a comma list of integers")?,
            "train.seed" => self.train.seed = scalar(key, v, "an unsigned integer")?,
            "train.model" => {
                self.train.model = match v {
                    "nonparametric" => ModelKind::Nonparametric,
                    "regressor" => ModelKind::Regressor,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "`nonparametric` or `regressor`",
                        })
                    }
                }
            }
            "train.out_dir" => self.train.out_dir = v.to_string(),

            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "dir" => DataSource::Directory,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "`synthetic` or `dir`",
                        })
                    }
                }
            }
            "data.dir" => self.data.dir = v.to_string(),
            "data.size" => self.data.size = scalar(key, v, "a positive integer")?,
            "data.max_shift" => self.data.max_shift = scalar(key, v, "an integer")?,
            "data.texture_scale" => self.data.texture_scale = scalar(key, v, "a real")?,
            "data.scene" => {
                self.data.scene = match v {
                    "translation" => SceneKind::Translation,
                    "occlusion" => SceneKind::Occlusion,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "`translation` or `occlusion`",
                        })
                    }
                }
            }
            "data.jitter_brightness" => self.data.jitter_brightness = scalar(key, v, "a real")?,
            "data.jitter_hue" => self.data.jitter_hue = scalar(key, v, "a real")?,

            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.to_string() }),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.train.curriculum;
        if c.is_empty() {
            return Err(ConfigError::Invalid {
                key: "train.curriculum".to_string(),
                why: "needs at least one stage".to_string(),
            });
        }
        if c[0] < 2 {
            return Err(ConfigError::Invalid {
                key: "train.curriculum".to_string(),
                why: format!("first stage must use at least 2 frames, got {}", c[0]),
            });
        }
        if c.windows(2).any(|p| p[1] <= p[0]) {
            return Err(ConfigError::Invalid {
                key: "train.curriculum".to_string(),
                why: format!("stages must strictly increase, got {c:?}"),
            });
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid {
                key: "train.batch_size".to_string(),
                why: "must be at least 1".to_string(),
            });
        }
        Ok(())
    }

    /// Writes every key in a fixed order; `parse` of the result reproduces
    /// this config exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };

        kv("encoder.levels", self.encoder.levels.to_string());
        kv("encoder.embed_dim", self.encoder.embed_dim.to_string());
        kv("encoder.base_channels", self.encoder.base_channels.to_string());

        kv("transition.window", self.transition.window.to_string());
        kv("transition.temperature", self.transition.temperature.to_string());
        kv("transition.prune_threshold", self.transition.prune_threshold.to_string());
        kv("transition.bilinear_attention", self.transition.bilinear_attention.to_string());

        kv("cycle.subcycles", self.cycle.subcycles.to_string());
        kv("cycle.level_weights", fmt_list(&self.cycle.level_weights));
        kv("cycle.pixel_sum", self.cycle.pixel_sum.to_string());

        kv("smoothness.lambda_c", self.smoothness.lambda_c.to_string());
        kv("smoothness.weight", self.smoothness.weight.to_string());

        kv("regressor.hidden_channels", self.regressor.hidden_channels.to_string());
        kv("regressor.depth", self.regressor.depth.to_string());
        kv("regressor.feature_weight", self.regressor.feature_weight.to_string());
        kv("regressor.agreement_weight", self.regressor.agreement_weight.to_string());
        kv("regressor.boundary_weight", self.regressor.boundary_weight.to_string());
        kv("regressor.crop_margin", self.regressor.crop_margin.to_string());
        kv("regressor.fb_threshold_abs", self.regressor.fb_threshold_abs.to_string());
        kv("regressor.fb_threshold_rel", self.regressor.fb_threshold_rel.to_string());
        kv("regressor.charbonnier", self.regressor.charbonnier.to_string());
        kv("regressor.charbonnier_eps", self.regressor.charbonnier_eps.to_string());

        kv("propagation.context_size", self.propagation.context_size.to_string());
        kv("propagation.top_k", self.propagation.top_k.to_string());
        kv(
            "propagation.query_level",
            self.propagation.query_level.map_or("auto".to_string(), |l| l.to_string()),
        );
        kv("propagation.hypercolumn_levels", fmt_list(&self.propagation.hypercolumn_levels));

        kv("train.learning_rate", self.train.learning_rate.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.clip_norm", self.train.clip_norm.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.steps_per_stage", self.train.steps_per_stage.to_string());
        kv("train.curriculum", fmt_list(&self.train.curriculum));
        kv("train.seed", self.train.seed.to_string());
        kv("train.model", self.train.model.to_string());
        kv("train.out_dir", self.train.out_dir.clone());

        kv("data.source", self.data.source.to_string());
        kv("data.dir", self.data.dir.clone());
        kv("data.size", self.data.size.to_string());
        kv("data.max_shift", self.data.max_shift.to_string());
        kv("data.texture_scale", self.data.texture_scale.to_string());
        kv("data.scene", self.data.scene.to_string());
        kv("data.jitter_brightness", self.data.jitter_brightness.to_string());
        kv("data.jitter_hue", self.data.jitter_hue.to_string());

        s
    }
}

#[cfg(test)]
mod tests;
