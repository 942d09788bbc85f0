//! Experiment configuration: one TOML file with a root seed and one section
//! per stage. Unknown keys are rejected. Section seeds left out of the file
//! are derived from the root seed by section name, so the resolved config
//! always carries every seed explicitly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::TrainConfig;
use crate::data::{validate_batch_config, DataConfig};
use crate::dhno::{DpcConfig, Stage2Objective};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::prompts::{check_omega, PromptInit};
use crate::rng::derive_seed;

/// Sections that carry their own seed.
pub const SEEDED_SECTIONS: [&str; 5] = ["data", "encoder", "prompt", "backbone", "dpc"];

/// Seeds are stored as TOML integers, which are signed 64-bit.
const SEED_MASK: u64 = i64::MAX as u64;

/// Section seed derived from the root seed.
pub fn section_seed(root: u64, section: &str) -> u64 {
    derive_seed(root, section) & SEED_MASK
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Text prompt rows.
    pub text_len: usize,
    /// Visual prompt rows; 0 turns visual prompting off.
    pub visual_len: usize,
    pub init: PromptInit,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            text_len: 4,
            visual_len: 2,
            init: PromptInit::Gaussian,
            seed: 0,
        }
    }
}

/// Inference-time switches for the two halves of weighting-decoupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Off: base classes use the parallel prompt as is (`omega_base = 1`).
    pub weighting: bool,
    /// Off: new classes use the same mixed prompt as base classes.
    pub decoupling: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            weighting: true,
            decoupling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub backbone: TrainConfig,
    pub dpc: DpcConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_root_seed(0)
    }
}

impl ExperimentConfig {
    /// Defaults with every section seed derived from `root`.
    pub fn with_root_seed(root: u64) -> Self {
        let mut cfg = Self {
            seed: root,
            output_dir: "runs/default".into(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            backbone: TrainConfig::default(),
            dpc: DpcConfig::default(),
            inference: InferenceConfig::default(),
        };
        cfg.reseed(root);
        cfg
    }

    /// Replaces the root seed and every section seed derived from it.
    pub fn reseed(&mut self, root: u64) {
        self.seed = root;
        self.data.seed = section_seed(root, "data");
        self.encoder.seed = section_seed(root, "encoder");
        self.prompt.seed = section_seed(root, "prompt");
        self.backbone.seed = section_seed(root, "backbone");
        self.dpc.seed = section_seed(root, "dpc");
    }

    /// Parses TOML, fills in missing section seeds and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let root = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(v) => {
                return Err(Error::Config(format!(
                    "seed must be a non-negative integer, got {v}"
                )))
            }
        };
        table.insert("seed".into(), toml::Value::Integer(root as i64));
        for section in SEEDED_SECTIONS {
            let entry = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("[{section}] must be a table")));
            };
            t.entry("seed")
                .or_insert(toml::Value::Integer(section_seed(root, section) as i64));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(reason) => Error::Config(format!("{}: {reason}", path.display())),
            e => e,
        })
    }

    /// The resolved config, every default and seed written out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// sha256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::data::hex(&Sha256::digest(
            self.to_toml_string()?.as_bytes(),
        )))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.backbone.validate("backbone")?;
        self.dpc.train().validate("dpc")?;
        if self.prompt.text_len == 0 {
            return Err(Error::Config("prompt.text_len must be at least 1".into()));
        }
        for (name, omega) in [
            ("omega_base", self.dpc.omega_base),
            ("omega_new", self.dpc.omega_new),
        ] {
            check_omega(omega).map_err(|e| Error::Config(format!("dpc.{name}: {e}")))?;
        }
        if self.dpc.objective != Stage2Objective::CrossEntropy {
            validate_batch_config(self.data.n_base(), self.dpc.batch_size, self.dpc.top_k)?;
        }
        let seeds = [
            ("seed", self.seed),
            ("data.seed", self.data.seed),
            ("encoder.seed", self.encoder.seed),
            ("prompt.seed", self.prompt.seed),
            ("backbone.seed", self.backbone.seed),
            ("dpc.seed", self.dpc.seed),
        ];
        for (name, s) in seeds {
            if s > SEED_MASK {
                return Err(Error::Config(format!("{name} {s} exceeds {SEED_MASK}")));
            }
        }
        Ok(())
    }

    /// Stage-2 settings with the inference switches folded into the weights.
    pub fn effective_dpc(&self) -> DpcConfig {
        let mut dpc = self.dpc.clone();
        if !self.inference.weighting {
            dpc.omega_base = 1.0;
        }
        if !self.inference.decoupling {
            dpc.omega_new = dpc.omega_base;
        }
        dpc
    }

    /// Splits a total epoch budget between the stages, backbone first.
    pub fn with_epoch_budget(mut self, total: usize) -> Result<Self> {
        if total < 2 {
            return Err(Error::Config(format!(
                "epoch budget {total} must be at least 2"
            )));
        }
        self.backbone.epochs = total.div_ceil(2);
        self.dpc.epochs = total / 2;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.data.n_classes, 128);
        assert_eq!(cfg.dpc.top_k, 8);
        assert_eq!(cfg.dpc.batch_size, 4);
    }

    #[test]
    fn missing_seeds_are_derived_and_given_ones_kept() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\n[dpc]\nseed = 99\n").unwrap();
        assert_eq!(cfg.dpc.seed, 99);
        assert_eq!(cfg.data.seed, section_seed(7, "data"));
        assert_eq!(cfg.backbone.seed, section_seed(7, "backbone"));
        assert_ne!(cfg.data.seed, cfg.encoder.seed);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::with_root_seed(u64::MAX >> 1);
        cfg.dpc.lr = 0.1 + 0.2;
        cfg.prompt.init = PromptInit::Template;
        cfg.inference.decoupling = false;
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[data]\nn_clases = 10",
            "[extra]\nx = 1",
            "[dpc]\nk = 4",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "seed = -1",
            "[dpc]\nomega_base = 1.5",
            "[dpc]\ntop_k = 40",
            "[backbone]\nepochs = 0",
            "[data]\nn_classes = 2",
            "[prompt]\ntext_len = 0",
            "[encoder]\ntower_noise = 2.0",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
        let err = ExperimentConfig::from_toml_str("[dpc]\ntop_k = 40").unwrap_err();
        assert!(matches!(
            err,
            Error::BatchExceedsBaseClasses {
                suggested_k: 15,
                ..
            }
        ));
    }

    #[test]
    fn cross_entropy_stage_two_skips_the_sampler_constraint() {
        let cfg =
            ExperimentConfig::from_toml_str("[dpc]\ntop_k = 40\nobjective = \"cross_entropy\"")
                .unwrap();
        assert_eq!(cfg.dpc.objective, Stage2Objective::CrossEntropy);
    }

    #[test]
    fn epoch_budget_splits() {
        let split = |t| {
            let c = ExperimentConfig::default().with_epoch_budget(t).unwrap();
            (c.backbone.epochs, c.dpc.epochs)
        };
        assert_eq!(split(40), (20, 20));
        assert_eq!(split(10), (5, 5));
        assert_eq!(split(7), (4, 3));
        assert!(ExperimentConfig::default().with_epoch_budget(1).is_err());
    }

    #[test]
    fn inference_switches_fold_into_weights() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.effective_dpc(), cfg.dpc);
        cfg.inference.decoupling = false;
        assert_eq!(cfg.effective_dpc().omega_new, cfg.dpc.omega_base);
        cfg.inference.weighting = false;
        let d = cfg.effective_dpc();
        assert_eq!((d.omega_base, d.omega_new), (1.0, 1.0));
    }

    #[test]
    fn section_seeds_fit_in_toml_integers() {
        for root in [0, 1, u64::MAX, 0xdead_beef] {
            for s in SEEDED_SECTIONS {
                assert!(section_seed(root, s) <= i64::MAX as u64);
            }
        }
    }
}
