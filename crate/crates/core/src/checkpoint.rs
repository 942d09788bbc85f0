//! Versioned TOML checkpoints for both training stages.
//!
//! Prompt values are written as TOML floats in their shortest round-trip
//! form, so loading gives back the exact bits. The resolved experiment config
//! rides along, which is enough to rebuild the encoders and the dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::prompts::{check_omega, DualPromptState, PromptState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    Dpc,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Dpc => "dpc",
        }
    }
}

/// One prompt as plain rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRows {
    pub text: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<Vec<Vec<f64>>>,
}

impl PromptRows {
    pub fn from_prompt(p: &PromptState) -> Self {
        Self {
            text: p.text.to_rows(),
            visual: p.visual.as_ref().map(Matrix::to_rows),
        }
    }

    pub fn to_prompt(&self) -> Result<PromptState> {
        let visual = self.visual.as_deref().map(Matrix::from_rows).transpose()?;
        Ok(PromptState::new(Matrix::from_rows(&self.text)?, visual)?.frozen())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub d_e: usize,
    pub text_len: usize,
    pub visual_len: usize,
    pub omega_base: f64,
    pub omega_new: f64,
    /// Checksum of the dataset the prompts were trained on.
    pub dataset_checksum: String,
    pub tuned: PromptRows,
    /// Present for the dpc stage only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel: Option<PromptRows>,
    pub training: Vec<TrainingMeta>,
    pub config: ExperimentConfig,
}

impl Checkpoint {
    pub fn backbone(
        config: &ExperimentConfig,
        tuned: &PromptState,
        steps: usize,
        dataset_checksum: &str,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            stage: Stage::Backbone,
            d_e: tuned.text.cols(),
            text_len: tuned.text.rows(),
            visual_len: tuned.visual.as_ref().map_or(0, Matrix::rows),
            omega_base: 0.0,
            omega_new: 0.0,
            dataset_checksum: dataset_checksum.to_string(),
            tuned: PromptRows::from_prompt(tuned),
            parallel: None,
            training: vec![TrainingMeta {
                stage: Stage::Backbone,
                epochs: config.backbone.epochs,
                lr: config.backbone.lr,
                seed: config.backbone.seed,
                steps,
            }],
            config: config.clone(),
        }
    }

    /// Extends a backbone checkpoint with the stage-2 result.
    pub fn dpc(
        backbone: &Checkpoint,
        config: &ExperimentConfig,
        dual: &DualPromptState,
        steps: usize,
    ) -> Self {
        let mut training = backbone.training.clone();
        training.push(TrainingMeta {
            stage: Stage::Dpc,
            epochs: config.dpc.epochs,
            lr: config.dpc.lr,
            seed: config.dpc.seed,
            steps,
        });
        Self {
            stage: Stage::Dpc,
            omega_base: dual.omega_base,
            omega_new: dual.omega_new,
            tuned: PromptRows::from_prompt(&dual.tuned),
            parallel: Some(PromptRows::from_prompt(&dual.parallel)),
            training,
            config: config.clone(),
            ..backbone.clone()
        }
    }

    pub fn tuned_prompt(&self) -> Result<PromptState> {
        self.tuned.to_prompt()
    }

    /// Both prompts and weights. A backbone checkpoint yields `P' = P`, so
    /// every weight reproduces the backbone.
    pub fn dual(&self) -> Result<DualPromptState> {
        let tuned = self.tuned_prompt()?;
        let parallel = match &self.parallel {
            Some(rows) => rows.to_prompt()?,
            None => crate::prompts::clone_parallel(&tuned),
        };
        Ok(DualPromptState {
            tuned,
            parallel,
            omega_base: self.omega_base,
            omega_new: self.omega_new,
        })
    }

    pub fn encoders(&self) -> Result<FrozenEncoders> {
        FrozenEncoders::new(self.config.encoder.clone())
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.format_version != FORMAT_VERSION {
            return Err(format!(
                "format_version {} unsupported, expected {FORMAT_VERSION}",
                self.format_version
            ));
        }
        if self.d_e != self.config.encoder.d_e {
            return Err(format!(
                "d_e {} disagrees with encoder d_e {}",
                self.d_e, self.config.encoder.d_e
            ));
        }
        match (self.stage, &self.parallel) {
            (Stage::Backbone, Some(_)) => {
                return Err("backbone checkpoint carries a parallel prompt".into())
            }
            (Stage::Dpc, None) => return Err("dpc checkpoint lacks a parallel prompt".into()),
            _ => {}
        }
        for w in [self.omega_base, self.omega_new] {
            check_omega(w).map_err(|e| e.to_string())?;
        }
        let shape_ok = |rows: &PromptRows| {
            rows.text.len() == self.text_len
                && rows.visual.as_ref().map_or(0, Vec::len) == self.visual_len
                && rows
                    .text
                    .iter()
                    .chain(rows.visual.iter().flatten())
                    .all(|r| r.len() == self.d_e && r.iter().all(|v| v.is_finite()))
        };
        if !shape_ok(&self.tuned) || !self.parallel.as_ref().is_none_or(shape_ok) {
            return Err(format!(
                "prompt values must be finite with shape ({}, {}) text and ({}, {}) visual",
                self.text_len, self.d_e, self.visual_len, self.d_e
            ));
        }
        self.config.validate().map_err(|e| e.to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let format = |reason: String| Error::Format {
            path: origin.to_string(),
            reason,
        };
        let ckpt: Self = toml::from_str(text).map_err(|e| format(e.message().to_string()))?;
        ckpt.check().map_err(format)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }
}
