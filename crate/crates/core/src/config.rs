//! JSON run configuration.
//!
//! ```json
//! {
//!   "model":    { "d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 128,
//!                 "vocab_size": 256, "max_seq_len": 64 },
//!   "train":    { "total_steps": 3000, "lr_max": 0.003 },
//!   "sparsify": { "target_prune_ratio": 0.25 },
//!   "lora":     { "r_lora": 8 },
//!   "data":     { "source": "copy(8,256)" },
//!   "output":   "runs/copy"
//! }
//! ```
//!
//! Defaults: `model.seed` 0, `model.rms_eps` 1e-6; `train.batch_size` 16,
//! `train.seq_len` 64, `train.lr_max` 3e-4, `train.s0` floor(T/3),
//! `train.seed` 0, `train.checkpoint_every` 0 (off), `train.grad_clip` 1.0,
//! `train.mode` "pat"; `sparsify.r_hio` max(4, round(0.05·d)),
//! `sparsify.eps_temp` 1e-3, `sparsify.target_prune_ratio` 0;
//! `lora.r_lora` 8, `lora.alpha` 2·r_lora; `data.seed` = `train.seed`;
//! `output` "runs/default"; `init_from` none. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::model::{default_hio_rank, ModelConfig, PatOptions};
use crate::sparsify::DEFAULT_EPS_TEMP;
use crate::trainer::TrainConfig;

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_hio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_temp: Option<f64>,
    #[serde(default)]
    pub target_prune_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_lora: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `copy(len,vocab)`, `mod_add(modulus)` or a UTF-8 text file.
    pub source: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sparsify: SparsifySection,
    #[serde(default)]
    pub lora: LoraSection,
    pub data: DataSection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Checkpoint whose base weights replace the random init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.train.target_prune_ratio = cfg.sparsify.target_prune_ratio;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_json(&text)?, text))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = self.model.d_model;
        self.train.validate(d)?;
        if let Some(r) = self.sparsify.r_hio {
            if r == 0 || 2 * r >= d {
                return Err(Error::config(format!("sparsify.r_hio: need 1 <= r < d/2, got {r} for d {d}")));
            }
        }
        if let Some(e) = self.sparsify.eps_temp {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::config("sparsify.eps_temp: must be positive"));
            }
        }
        if self.lora.r_lora == Some(0) {
            return Err(Error::config("lora.r_lora: must be at least 1"));
        }
        let need = self.data.source.vocab_size();
        if need > self.model.vocab_size {
            return Err(Error::config(format!(
                "model.vocab_size: data {} needs {need} tokens, model has {}",
                self.data.source, self.model.vocab_size
            )));
        }
        if let DataSpec::File(p) = &self.data.source {
            if !p.is_file() {
                return Err(Error::config(format!("data.source: cannot read {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn r_lora(&self) -> usize {
        self.lora.r_lora.unwrap_or(8)
    }

    pub fn pat_options(&self) -> PatOptions {
        let d = self.model.d_model;
        let r_lora = self.r_lora();
        PatOptions {
            r_hio: self.sparsify.r_hio.unwrap_or_else(|| default_hio_rank(d)),
            r_lora,
            lora_alpha: self.lora.alpha.unwrap_or(2.0 * r_lora as f64),
            s0: self.train.s0(),
            eps_temp: self.sparsify.eps_temp.unwrap_or(DEFAULT_EPS_TEMP),
            n_target: self.train.n_target(d),
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    /// Replaces every seed in the config.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.seed = Some(seed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "vocab_size": 8, "max_seq_len": 16},
        "train": {"total_steps": 30},
        "data": {"source": "mod_add(7)"}
    }"#;

    #[test]
    fn defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let o = c.pat_options();
        assert_eq!((o.r_hio, o.r_lora, o.lora_alpha, o.s0, o.n_target), (4, 8, 16.0, 10, 16));
        assert_eq!(o.eps_temp, 1e-3);
        assert_eq!(c.output, PathBuf::from("runs/default"));
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn prune_ratio_reaches_the_trainer() {
        let text = MINIMAL.replace(r#""data""#, r#""sparsify": {"target_prune_ratio": 0.25}, "data""#);
        let c = RunConfig::from_json(&text).unwrap();
        assert_eq!(c.train.n_target(16), 12);
        assert_eq!(c.pat_options().n_target, 12);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_bad_fields() {
        let unknown = MINIMAL.replace(r#""total_steps": 30"#, r#""total_steps": 30, "warmup": 3"#);
        let msg = RunConfig::from_json(&unknown).unwrap_err().to_string();
        assert!(msg.contains("warmup"), "{msg}");
        let small_vocab = MINIMAL.replace(r#""vocab_size": 8"#, r#""vocab_size": 7"#);
        assert!(RunConfig::from_json(&small_vocab).unwrap_err().to_string().contains("model.vocab_size"));
        let missing = MINIMAL.replace("mod_add(7)", "/nonexistent/corpus.txt");
        assert!(RunConfig::from_json(&missing).unwrap_err().to_string().contains("/nonexistent/corpus.txt"));
        assert!(RunConfig::from_json("{ nope").is_err());
    }
}
