//! Flat run configuration, read from TOML and overridable key by key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WorldSpec;
use crate::decoder::DecoderConfig;
use crate::stgraph::HeadAssignment;
use crate::{Error, Result};

/// Every hyperparameter of a run. Keys follow the model's symbols, so the
/// head count is `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Hidden width.
    pub d: usize,
    /// Attention heads in every GAT and decoder attention.
    #[serde(rename = "K")]
    pub heads: usize,
    /// Appearance feature width.
    pub d_v: usize,
    pub tau_s: f64,
    pub tau_t: f64,
    pub distances: Vec<usize>,
    pub heads_per_distance: Vec<usize>,
    /// Residual connection around GN-GAT.
    pub gngat_residual: bool,
    pub decoder_layers: usize,
    /// Position-wise feed-forward sublayer (width 4d) in each decoder block.
    pub decoder_ffn: bool,
    /// Rows of the positional table; bounds every text sequence.
    pub max_positions: usize,
    /// Gumbel-Softmax temperature.
    pub temperature: f64,

    pub warmup: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub seed: u64,
    /// Greedy-decode the validation split after every epoch.
    pub eval_decode: bool,

    pub beam: usize,
    pub length_penalty: f64,

    pub frames: usize,
    pub objects: usize,
    pub rounds: usize,
    pub drift: f64,
    pub appearance_noise: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub data_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            d_v: 32,
            tau_s: crate::stgraph::DEFAULT_TAU_S,
            tau_t: crate::stgraph::DEFAULT_TAU_T,
            distances: vec![1, 2, 3, 4],
            heads_per_distance: vec![1, 1, 2, 4],
            gngat_residual: true,
            decoder_layers: 1,
            decoder_ffn: true,
            max_positions: 64,
            temperature: 1.0,
            warmup: 400,
            lr_scale: 0.15,
            dropout: 0.3,
            batch_size: 8,
            epochs: 40,
            max_steps: 0,
            seed: 1,
            eval_decode: true,
            beam: 5,
            length_penalty: 1.0,
            frames: 6,
            objects: 3,
            rounds: 5,
            drift: 0.05,
            appearance_noise: 0.1,
            train_samples: 500,
            eval_samples: 100,
            data_seed: 7,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one key. `value` is read as a TOML value, falling back to a
    /// bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_overrides(&[format!("{key}={value}")])
    }

    /// Applies `key=value` overrides in order and validates the result once,
    /// so coupled keys can change together. On error nothing is applied.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            if !table.contains_key(key) {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let updated: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!(
                "d = {} must be a positive multiple of K = {}",
                self.d, self.heads
            ));
        }
        if self.d_v == 0 {
            return fail("d_v must be positive".into());
        }
        if !(self.tau_s > 0.0 && self.tau_t > 0.0) {
            return fail("tau_s and tau_t must be positive".into());
        }
        let assignment = self.head_assignment()?;
        if assignment.total_heads() != self.heads {
            return fail(format!(
                "heads_per_distance sums to {} but K = {}",
                assignment.total_heads(),
                self.heads
            ));
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers must be at least 1".into());
        }
        if self.max_positions <= crate::decoder::MAX_DECODE_LEN {
            return fail(format!(
                "max_positions must exceed the decode limit of {}",
                crate::decoder::MAX_DECODE_LEN
            ));
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive".into());
        }
        if self.warmup == 0 || !(self.lr_scale > 0.0) {
            return fail("warmup and lr_scale must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.beam == 0 {
            return fail("beam must be at least 1".into());
        }
        if !self.length_penalty.is_finite() {
            return fail("length_penalty must be finite".into());
        }
        self.world_spec().validate()
    }

    pub fn head_assignment(&self) -> Result<HeadAssignment> {
        HeadAssignment::new(&self.distances, &self.heads_per_distance)
    }

    pub fn decoder_config(&self, vocab_len: usize) -> DecoderConfig {
        DecoderConfig {
            d: self.d,
            heads: self.heads,
            layers: self.decoder_layers,
            ffn: self.decoder_ffn,
            vocab_len,
        }
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            frames: self.frames,
            objects: self.objects,
            d_v: self.d_v,
            rounds: self.rounds,
            drift: self.drift,
            tau_t: self.tau_t,
            appearance_noise: self.appearance_noise,
            ..WorldSpec::default()
        }
    }
}
