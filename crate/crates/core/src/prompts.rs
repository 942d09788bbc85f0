//! Prompt state, the parallel-prompt clone, and weighting/decoupling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::rng::SeededRng;

/// Std of the Gaussian prompt init.
pub const PROMPT_INIT_STD: f64 = 0.02;
pub const DEFAULT_OMEGA_BASE: f64 = 0.2;
pub const DEFAULT_OMEGA_NEW: f64 = 1e-6;

/// Learnable prompt tokens for the text tower and, optionally, the image tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub text: Matrix,
    pub visual: Option<Matrix>,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// `N(0, 0.02^2)` entries.
    #[default]
    Gaussian,
    /// Every text row set to the mean class token.
    Template,
}

impl PromptState {
    pub fn new(text: Matrix, visual: Option<Matrix>) -> Result<Self> {
        if text.rows() == 0 {
            return Err(Error::shape("PromptState", "at least one text row", 0));
        }
        if let Some(v) = &visual {
            if v.cols() != text.cols() || v.rows() == 0 {
                return Err(Error::shape(
                    "PromptState",
                    format!("(>=1, {})", text.cols()),
                    format!("{:?}", v.shape()),
                ));
            }
        }
        Ok(Self {
            text,
            visual,
            frozen: false,
        })
    }

    /// Fresh prompt. `visual_len = 0` disables the visual prompt.
    pub fn init(
        rng: &mut SeededRng,
        text_len: usize,
        visual_len: usize,
        d_e: usize,
        init: PromptInit,
        class_tokens: &Matrix,
    ) -> Result<Self> {
        let text = match init {
            PromptInit::Gaussian => rng.gaussian_matrix(text_len, d_e, PROMPT_INIT_STD),
            PromptInit::Template => {
                if class_tokens.cols() != d_e || class_tokens.rows() == 0 {
                    return Err(Error::shape("PromptState::init", d_e, class_tokens.cols()));
                }
                let mean = class_tokens
                    .sum_rows()
                    .scale(1.0 / class_tokens.rows() as f64);
                let rows = vec![mean.data().to_vec(); text_len];
                Matrix::from_rows(&rows)?
            }
        };
        let visual =
            (visual_len > 0).then(|| rng.gaussian_matrix(visual_len, d_e, PROMPT_INIT_STD));
        Self::new(text, visual)
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn same_shape(&self, other: &PromptState) -> bool {
        self.text.shape() == other.text.shape()
            && self.visual.as_ref().map(Matrix::shape) == other.visual.as_ref().map(Matrix::shape)
    }

    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.visual.as_ref().is_none_or(Matrix::is_finite)
    }

    /// Largest absolute entry difference over both modalities.
    pub fn max_abs_diff(&self, other: &PromptState) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "PromptState::max_abs_diff",
                "equal shapes",
                "different shapes",
            ));
        }
        let mut d = self.text.max_abs_diff(&other.text)?;
        if let (Some(a), Some(b)) = (&self.visual, &other.visual) {
            d = d.max(a.max_abs_diff(b)?);
        }
        Ok(d)
    }

    pub fn bit_eq(&self, other: &PromptState) -> bool {
        self.text.bit_eq(&other.text)
            && match (&self.visual, &other.visual) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            }
    }
}

/// `P' := P`, as an active copy.
pub fn clone_parallel(tuned: &PromptState) -> PromptState {
    PromptState {
        frozen: false,
        ..tuned.clone()
    }
}

/// Frozen tuned prompt `P`, learnable parallel prompt `P'` and the two
/// inference weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPromptState {
    pub tuned: PromptState,
    pub parallel: PromptState,
    pub omega_base: f64,
    pub omega_new: f64,
}

pub fn check_omega(omega: f64) -> Result<()> {
    if (0.0..=1.0).contains(&omega) {
        Ok(())
    } else {
        Err(Error::OmegaOutOfRange(omega))
    }
}

fn mix(omega: f64, parallel: &Matrix, tuned: &Matrix) -> Result<Matrix> {
    if omega == 0.0 {
        return Ok(tuned.clone());
    }
    if omega == 1.0 {
        return Ok(parallel.clone());
    }
    parallel.scale(omega).add(&tuned.scale(1.0 - omega))
}

fn unmix(omega: f64, mixed: &Matrix, tuned: &Matrix) -> Result<Matrix> {
    if omega == 1.0 {
        return Ok(mixed.clone());
    }
    Ok(mixed.sub(&tuned.scale(1.0 - omega))?.map(|v| v / omega))
}

impl DualPromptState {
    /// Starts stage 2 from a finished backbone prompt.
    pub fn from_tuned(tuned: PromptState, omega_base: f64, omega_new: f64) -> Result<Self> {
        check_omega(omega_base)?;
        check_omega(omega_new)?;
        let tuned = tuned.frozen();
        let parallel = clone_parallel(&tuned);
        Ok(Self {
            tuned,
            parallel,
            omega_base,
            omega_new,
        })
    }

    /// `omega P' + (1 - omega) P` per modality. `omega = 0` returns `P` and
    /// `omega = 1` returns `P'` bit for bit.
    pub fn weight_mix(&self, omega: f64) -> Result<PromptState> {
        check_omega(omega)?;
        let text = mix(omega, &self.parallel.text, &self.tuned.text)?;
        let visual = match (&self.parallel.visual, &self.tuned.visual) {
            (Some(p), Some(t)) => Some(mix(omega, p, t)?),
            (None, None) => None,
            _ => {
                return Err(Error::shape(
                    "weight_mix",
                    "matching modalities",
                    "mismatch",
                ))
            }
        };
        Ok(PromptState {
            text,
            visual,
            frozen: true,
        })
    }

    /// Inverse of [`Self::weight_mix`]: `(mixed - (1 - omega) P) / omega`.
    pub fn decouple(&self, mixed: &PromptState, omega: f64) -> Result<PromptState> {
        check_omega(omega)?;
        if omega == 0.0 {
            return Err(Error::OmegaZero);
        }
        if !mixed.same_shape(&self.tuned) {
            return Err(Error::shape(
                "decouple",
                "tuned prompt shape",
                "different shape",
            ));
        }
        let text = unmix(omega, &mixed.text, &self.tuned.text)?;
        let visual = match (&mixed.visual, &self.tuned.visual) {
            (Some(m), Some(t)) => Some(unmix(omega, m, t)?),
            _ => None,
        };
        Ok(PromptState {
            text,
            visual,
            frozen: false,
        })
    }

    pub fn base_prompt(&self) -> Result<PromptState> {
        self.weight_mix(self.omega_base)
    }

    /// `omega_n P' + (1 - omega_n) P`; exactly `P` at `omega_n = 0`.
    pub fn new_class_prompt(&self) -> Result<PromptState> {
        self.weight_mix(self.omega_new)
    }
}

/// Taped weighting: `omega P' + (1 - omega) P` with `P` constant.
pub fn weight_mix_var(tape: &mut Tape, parallel: Var, tuned: &Matrix, omega: f64) -> Result<Var> {
    check_omega(omega)?;
    let p = tape.constant(tuned.scale(1.0 - omega));
    let w = tape.scale(parallel, omega);
    tape.add(w, p)
}

/// Taped decoupling: `(mixed - (1 - omega) P) / omega`.
pub fn decouple_var(tape: &mut Tape, mixed: Var, tuned: &Matrix, omega: f64) -> Result<Var> {
    check_omega(omega)?;
    if omega == 0.0 {
        return Err(Error::OmegaZero);
    }
    let p = tape.constant(tuned.scale(1.0 - omega));
    let d = tape.sub(mixed, p)?;
    Ok(tape.scale(d, 1.0 / omega))
}
