//! Flat `key = value` run configuration covering model, training, data and
//! evaluation settings. Every key has a default, unknown keys are errors and
//! the resolved form prints every key so a run can be replayed from it.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::objectives::Similarity;
use crate::train::{Precision, TrainConfig};
use crate::vision::PretrainMode;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    Value { key: String, value: String },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Synthetic topic-keyed recall corpus.
    Recall,
    /// Synthetic in-context episodes.
    Icl,
    /// One sample per line of `data.path`.
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: String,
    pub samples: usize,
    pub eval_samples: usize,
    pub recall_topics: usize,
    pub recall_topic_words: usize,
    pub recall_keys: usize,
    pub recall_function_share: f64,
    /// Words of distant prose per sample.
    pub recall_words: usize,
    /// Key-value pairs per sample.
    pub recall_pairs: usize,
    pub icl_task: String,
    pub icl_max_n_e: usize,
    pub icl_max_n_d: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Recall,
            path: String::new(),
            samples: 256,
            eval_samples: 32,
            recall_topics: 8,
            recall_topic_words: 6,
            recall_keys: 12,
            recall_function_share: 0.5,
            recall_words: 600,
            recall_pairs: 80,
            icl_task: "pooled".into(),
            icl_max_n_e: 8,
            icl_max_n_d: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub last_k: usize,
    pub ratios: Vec<f64>,
    pub icl_seeds: Vec<u64>,
    pub icl_episodes: usize,
    pub n_e: usize,
    pub n_d: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            last_k: 128,
            ratios: (0..=10).map(|i| i as f64 / 10.0).collect(),
            icl_seeds: vec![42, 43, 44],
            icl_episodes: 64,
            n_e: 8,
            n_d: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// A config value with a text form that parses back to itself.
trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, f32, bool, String);

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|x| T::parse(x.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                <$t>::parse(s)
            }
            fn show(&self) -> String {
                self.as_str().to_string()
            }
        }
    )*};
}

enum_value!(PretrainMode, Similarity, Precision, DataKind);

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Recall => "recall",
            DataKind::Icl => "icl",
            DataKind::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "recall" => Some(Self::Recall),
            "icl" => Some(Self::Icl),
            "text" => Some(Self::Text),
            _ => None,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            /// Every accepted key, in snapshot order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = || ConfigError::Value { key: key.into(), value: value.into() };
                match key {
                    $($key => self.$($field).+ = Value::parse(value).ok_or_else(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                Ok(())
            }

            /// Text form of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.show()),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "seed" => seed,
    "render.strip_height" => model.render.strip_height,
    "render.strip_width" => model.render.strip_width,
    "render.channels" => model.render.channels,
    "render.fold_side" => model.render.fold_side,
    "render.patch_size" => model.render.patch_size,
    "render.glyph_advance" => model.render.glyph_advance,
    "render.background_level" => model.render.background_level,
    "render.ink_level" => model.render.ink_level,
    "render.empty_threshold" => model.render.empty_threshold,
    "render.tokens_per_image" => model.render.tokens_per_image,
    "vision.dim" => model.vision.dim,
    "vision.layers" => model.vision.layers,
    "vision.heads" => model.vision.heads,
    "vision.mlp_ratio" => model.vision.mlp_ratio,
    "vision.frozen" => model.vision.frozen,
    "vision.pretrain_mode" => model.vision.pretrain_mode,
    "resampler.latents" => model.resampler.latents,
    "resampler.depth" => model.resampler.depth,
    "resampler.heads" => model.resampler.heads,
    "resampler.latent_self_attention" => model.resampler.latent_self_attention,
    "decoder.vocab_size" => model.decoder.vocab_size,
    "decoder.dim" => model.decoder.dim,
    "decoder.layers" => model.decoder.layers,
    "decoder.heads" => model.decoder.heads,
    "decoder.max_positions" => model.decoder.max_positions,
    "decoder.cross_stride" => model.decoder.cross_stride,
    "decoder.gate_init" => model.decoder.gate_init,
    "decoder.cross_attend_cls" => model.decoder.cross_attend_cls,
    "decoder.mlp_ratio" => model.decoder.mlp_ratio,
    "decoder.train_self" => model.train_decoder_self,
    "pve.tau" => model.pve.tau,
    "pve.lambda" => model.pve.lambda,
    "pve.mask_rate" => model.pve.mask_rate,
    "pve.mask_kappa" => model.pve.mask_kappa,
    "pve.similarity" => model.pve.similarity,
    "pve.symmetric" => model.pve.symmetric,
    "pve.text_grad" => model.pve.text_grad,
    "train.t_e" => train.t_e,
    "train.t_d" => train.t_d,
    "train.batch" => train.batch,
    "train.lr" => train.lr,
    "train.beta1" => train.beta1,
    "train.beta2" => train.beta2,
    "train.weight_decay" => train.weight_decay,
    "train.warmup" => train.warmup,
    "train.total_steps" => train.total_steps,
    "train.precision" => train.precision,
    "train.checkpoint_every" => train.checkpoint_every,
    "pretrain.steps" => train.pretrain.steps,
    "pretrain.batch" => train.pretrain.batch,
    "pretrain.lr" => train.pretrain.lr,
    "pretrain.hide_ratio" => train.pretrain.hide_ratio,
    "data.kind" => data.kind,
    "data.path" => data.path,
    "data.samples" => data.samples,
    "data.eval_samples" => data.eval_samples,
    "data.recall_topics" => data.recall_topics,
    "data.recall_topic_words" => data.recall_topic_words,
    "data.recall_keys" => data.recall_keys,
    "data.recall_function_share" => data.recall_function_share,
    "data.recall_words" => data.recall_words,
    "data.recall_pairs" => data.recall_pairs,
    "data.icl_task" => data.icl_task,
    "data.icl_max_n_e" => data.icl_max_n_e,
    "data.icl_max_n_d" => data.icl_max_n_d,
    "eval.last_k" => eval.last_k,
    "eval.ratios" => eval.ratios,
    "eval.icl_seeds" => eval.icl_seeds,
    "eval.icl_episodes" => eval.icl_episodes,
    "eval.n_e" => eval.n_e,
    "eval.n_d" => eval.n_d,
}

/// Splits `key=value` (or `key = value`).
pub fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k, v.trim()))
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.into(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = split_pair(o.as_ref()).ok_or_else(|| ConfigError::Override(o.as_ref().into()))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Fills derived fields and checks every section.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        self.model.sync();
        self.train.seed = self.seed;
        self.train.pretrain.seed = self.seed;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.t_d > self.model.decoder.max_positions {
            return Err(ConfigError::Invalid(format!(
                "train.t_d {} exceeds decoder.max_positions {}",
                self.train.t_d, self.model.decoder.max_positions
            )));
        }
        if self.eval.last_k == 0 || self.eval.last_k > self.train.t_d {
            return Err(ConfigError::Invalid(format!(
                "eval.last_k {} must lie in 1..=train.t_d ({})",
                self.eval.last_k, self.train.t_d
            )));
        }
        if let Some(r) = self.eval.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(ConfigError::Invalid(format!("eval ratio {r} outside [0, 1]")));
        }
        if self.data.kind == DataKind::Text && self.data.path.is_empty() {
            return Err(ConfigError::Invalid("data.kind = text needs data.path".into()));
        }
        Ok(self)
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["decoder.dim=64", "pve.similarity = dot", "eval.ratios=0.2,0.4", "train.lr=0.0003"])
            .unwrap();
        let text = c.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.eval.ratios, vec![0.2, 0.4]);
    }

    #[test]
    fn errors_name_the_problem() {
        let mut c = RunConfig::default();
        assert_eq!(c.set("decoder.width", "3"), Err(ConfigError::UnknownKey("decoder.width".into())));
        assert!(matches!(c.set("decoder.dim", "wide"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.apply_overrides(&["nonsense"]), Err(ConfigError::Override(_))));
        assert!(matches!(RunConfig::from_text("# ok\n\nseed 3"), Err(ConfigError::Syntax { line: 3, .. })));
    }

    #[test]
    fn resolve_derives_and_checks() {
        let c = RunConfig::from_text("seed = 9\nvision.dim = 32\nvision.heads = 2\nresampler.heads = 2").unwrap().resolve().unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.model.decoder.visual_dim, 32);
        assert!(RunConfig::from_text("eval.last_k = 999").unwrap().resolve().is_err());
    }
}
