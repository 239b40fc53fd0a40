use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::synth::Benchmark;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrlMode {
    /// One backward pass; the reversal gate flips the gradient into the
    /// feature path.
    SinglePass,
    /// Update `D` first, then recompute and update everything else.
    Alternating,
}

/// Every knob of a training run. Field names double as config-file keys and
/// `--key value` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the alignment and expert losses.
    pub alpha: f64,
    /// Weight on the auxiliary-classifier loss.
    pub beta: f64,
    /// Pruning quantile in `[0, 1)`; the percentile is `100 m`.
    pub m: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub batch_size_per_domain: usize,
    pub seed: u64,
    /// Fractions of `total_steps`, strictly increasing in `(0, 1]`.
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    pub grl_mode: GrlMode,
    pub use_mask: bool,
    pub mask_warmup_steps: usize,
    /// Channel dropout on the final feature map; 0 disables.
    pub dropout_rate: f64,
    pub snapshot_every: usize,
    pub conv_channels: usize,
    pub feature_channels: usize,
    pub approx_hidden: usize,
    pub kernel_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 3.0,
            m: 0.4,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            total_steps: 5000,
            batch_size_per_domain: 32,
            seed: 0,
            lr_decay_points: vec![0.7, 0.9],
            lr_decay_factor: 0.1,
            grl_mode: GrlMode::SinglePass,
            use_mask: true,
            mask_warmup_steps: 0,
            dropout_rate: 0.0,
            snapshot_every: 100,
            conv_channels: 16,
            feature_channels: 32,
            approx_hidden: 64,
            kernel_size: 3,
        }
    }
}

impl TrainConfig {
    /// Plain empirical risk minimization: no alignment, no auxiliary loss,
    /// no pruning.
    pub fn erm() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            use_mask: false,
            ..Self::default()
        }
    }

    pub fn quantile(&self) -> f64 {
        100.0 * self.m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.m) {
            return bad(format!("m must be in [0, 1), got {}", self.m));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        let mut prev = 0.0;
        for &p in &self.lr_decay_points {
            if !(p > prev && p <= 1.0) {
                return bad(format!(
                    "lr_decay_points must be strictly increasing in (0, 1], got {:?}",
                    self.lr_decay_points
                ));
            }
            prev = p;
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.batch_size_per_domain == 0 || self.snapshot_every == 0 {
            return bad("batch_size_per_domain and snapshot_every must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one field by name. `value` is read as a TOML literal, or as
    /// a bare string when it does not parse as one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        // Integers are accepted where floats are expected.
        let parsed = match (&table[key], parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::Array(_), toml::Value::Array(a)) => toml::Value::Array(
                a.into_iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) => toml::Value::Float(i as f64),
                        v => v,
                    })
                    .collect(),
            ),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed);
        let next: Self = table.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("{key} = {value}: {}", e.message()))
        })?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Network sizes for `benchmark`: input shape, classes and source count
    /// come from the data, the rest from this config.
    pub fn architecture(&self, benchmark: &Benchmark) -> Result<Architecture> {
        let arch = Architecture {
            input_height: benchmark.height,
            input_width: benchmark.width,
            input_channels: benchmark.channels,
            conv_channels: self.conv_channels,
            feature_channels: self.feature_channels,
            classes: benchmark.classes,
            domains: benchmark.sources.len(),
            approx_hidden: self.approx_hidden,
            kernel_size: self.kernel_size,
        };
        arch.validate()?;
        Ok(arch)
    }
}
