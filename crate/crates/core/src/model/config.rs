use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CapaError, Result};

/// Architecture hyperparameters of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub const fn toy() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 256,
            seed: 42,
        }
    }

    /// LLaVA-1.5-7B sized constants, used only by the analytical cost model.
    pub const fn llava7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            d_ff: 11008,
            n_heads: 32,
            vocab_size: 32000,
            max_seq: 4096,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CapaError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CapaError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `key = value` text, one field per line, fixed field order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self {
            n_layers: 0,
            d_model: 0,
            d_ff: 0,
            n_heads: 0,
            vocab_size: 0,
            max_seq: 0,
            seed: 0,
        };
        let mut seen = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CapaError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let parse = |v: &str| {
                v.parse::<u64>().map_err(|_| {
                    CapaError::Config(format!("line {}: bad value for {k}: {v}", lineno + 1))
                })
            };
            let n = parse(v)?;
            match k {
                "n_layers" => cfg.n_layers = n as usize,
                "d_model" => cfg.d_model = n as usize,
                "d_ff" => cfg.d_ff = n as usize,
                "n_heads" => cfg.n_heads = n as usize,
                "vocab_size" => cfg.vocab_size = n as usize,
                "max_seq" => cfg.max_seq = n as usize,
                "seed" => cfg.seed = n,
                other => {
                    return Err(CapaError::Config(format!("unknown config key {other}")));
                }
            }
            seen.push(k.to_string());
        }
        for (k, _) in Self::toy().fields() {
            if !seen.iter().any(|s| s == k) {
                return Err(CapaError::Config(format!("missing config key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn fields(&self) -> [(&'static str, u64); 7] {
        [
            ("n_layers", self.n_layers as u64),
            ("d_model", self.d_model as u64),
            ("d_ff", self.d_ff as u64),
            ("n_heads", self.n_heads as u64),
            ("vocab_size", self.vocab_size as u64),
            ("max_seq", self.max_seq as u64),
            ("seed", self.seed),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let cfg = ModelConfig {
            seed: 9,
            ..ModelConfig::toy()
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 63,
            ..ModelConfig::toy()
        };
        assert!(matches!(cfg.validate(), Err(CapaError::Config(_))));
    }

    #[test]
    fn rejects_missing_and_unknown_keys() {
        assert!(ModelConfig::from_text("n_layers = 2\n").is_err());
        let mut t = ModelConfig::toy().to_text();
        t.push_str("bogus = 1\n");
        assert!(ModelConfig::from_text(&t).is_err());
    }
}
