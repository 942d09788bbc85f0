//! Stage 1: cross-entropy prompt tuning on the base few-shot split.

use serde::{Deserialize, Serialize};

use crate::data::{Image, SyntheticDataset};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::numerics::{check_temperature, neg_log_softmax, Dual, Matrix, Tape, Var};
use crate::prompts::PromptState;
use crate::rng::SeededRng;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.002,
            batch_size: 4,
            momentum: 0.9,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!(
                "{section}.epochs must be at least 1"
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "{section}.lr must be finite and >= 0"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{section}.batch_size must be at least 1"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "{section}.momentum must lie in [0, 1)"
            )));
        }
        check_temperature(self.temperature)
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Dual]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            *v = v.scale(self.momentum).add(&p.grad)?;
            p.value = p.value.sub(&v.scale(self.lr))?;
        }
        Ok(())
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy_loss",
            logits.rows(),
            labels.len(),
        ));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                n: row.len(),
            });
        }
        total += neg_log_softmax(row, y);
    }
    Ok(total / labels.len() as f64)
}

/// Prompt leaves on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub text: Var,
    pub visual: Option<Var>,
}

impl PromptVars {
    pub fn params(tape: &mut Tape, prompt: &PromptState) -> Self {
        Self {
            text: tape.param(prompt.text.clone()),
            visual: prompt.visual.as_ref().map(|v| tape.param(v.clone())),
        }
    }

    pub fn constants(tape: &mut Tape, prompt: &PromptState) -> Self {
        Self {
            text: tape.constant(prompt.text.clone()),
            visual: prompt.visual.as_ref().map(|v| tape.constant(v.clone())),
        }
    }
}

/// Patch sums of `images`, one row each.
pub fn patch_sums(images: &[&Image]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = images.iter().map(|i| i.patch_sum.as_slice()).collect();
    Matrix::stack(&rows)
}

/// Unit-norm image features for `images` on the tape.
pub fn image_features_var(
    tape: &mut Tape,
    enc: &FrozenEncoders,
    visual: Option<Var>,
    images: &[&Image],
) -> Result<Var> {
    let n_patches = images.first().ok_or(Error::EmptySplit)?.patches.rows();
    let feats = enc.image_features_var(tape, visual, &patch_sums(images)?, n_patches)?;
    tape.normalize_rows(feats)
}

/// Unit-norm image features, plain forward.
pub fn image_features(
    enc: &FrozenEncoders,
    visual: Option<&Matrix>,
    images: &[&Image],
) -> Result<Matrix> {
    let n_patches = images.first().ok_or(Error::EmptySplit)?.patches.rows();
    let feats = enc.encode_pooled_images(visual, &patch_sums(images)?, n_patches)?;
    crate::numerics::l2_normalize_rows(&feats)
}

/// Cross-entropy of `images` against all rows of `class_tokens`, built on
/// `tape`. Labels index rows of `class_tokens`.
pub fn cross_entropy_var(
    tape: &mut Tape,
    enc: &FrozenEncoders,
    prompt: PromptVars,
    class_tokens: &Matrix,
    images: &[&Image],
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let text = enc.text_features_var(tape, prompt.text, class_tokens)?;
    let text = tape.normalize_rows(text)?;
    let img = image_features_var(tape, enc, prompt.visual, images)?;
    let sims = tape.matmul_t(img, text)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    tape.cross_entropy(logits, labels)
}

/// Learnable prompt as optimizer parameters.
pub struct PromptParams {
    pub text: Dual,
    pub visual: Option<Dual>,
}

impl PromptParams {
    pub fn new(prompt: &PromptState) -> Self {
        Self {
            text: Dual::new(prompt.text.clone()),
            visual: prompt.visual.clone().map(Dual::new),
        }
    }

    pub fn zero_grad(&mut self) {
        self.text.zero_grad();
        if let Some(v) = &mut self.visual {
            v.zero_grad();
        }
    }

    pub fn track(&self, tape: &mut Tape) -> PromptVars {
        PromptVars {
            text: self.text.track(tape),
            visual: self.visual.as_ref().map(|v| v.track(tape)),
        }
    }

    pub fn collect(&mut self, vars: PromptVars, grads: &crate::numerics::Gradients) -> Result<()> {
        self.text.collect(vars.text, grads)?;
        if let (Some(d), Some(v)) = (&mut self.visual, vars.visual) {
            d.collect(v, grads)?;
        }
        Ok(())
    }

    pub fn step(&mut self, opt: &mut Sgd) -> Result<()> {
        match &mut self.visual {
            Some(v) => opt.step(&mut [&mut self.text, v]),
            None => opt.step(&mut [&mut self.text]),
        }
    }

    pub fn to_prompt(&self) -> PromptState {
        PromptState {
            text: self.text.value.clone(),
            visual: self.visual.as_ref().map(|v| v.value.clone()),
            frozen: false,
        }
    }
}

pub(crate) fn check_loss(stage: &'static str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergedLoss { stage, step, loss })
    }
}

#[derive(Clone, Debug)]
pub struct BackboneRun {
    /// The tuned prompt, frozen.
    pub prompt: PromptState,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

/// Tunes `init` with cross-entropy over shuffled few-shot batches.
pub fn train_backbone(
    dataset: &SyntheticDataset,
    enc: &FrozenEncoders,
    init: &PromptState,
    config: &TrainConfig,
) -> Result<BackboneRun> {
    config.validate("backbone")?;
    let tokens = dataset.split_tokens(crate::data::Split::Base);
    let mut pairs = dataset.few_shot_split().pairs;
    let mut rng = SeededRng::new(config.seed);
    let mut params = PromptParams::new(init);
    let mut opt = Sgd::new(config.lr, config.momentum);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        rng.shuffle(&mut pairs);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in pairs.chunks(config.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|r| dataset.image(*r)).collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|r| {
                    dataset
                        .base_index(r.class)
                        .expect("few-shot pairs are base classes")
                })
                .collect();
            let mut tape = Tape::new();
            let vars = params.track(&mut tape);
            let loss = cross_entropy_var(
                &mut tape,
                enc,
                vars,
                &tokens,
                &images,
                &labels,
                config.temperature,
            )?;
            let value = tape.scalar(loss);
            check_loss("backbone", step, value)?;
            params.zero_grad();
            params.collect(vars, &tape.backward(loss)?)?;
            params.step(&mut opt)?;
            total += value;
            batches += 1;
            step += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    let prompt = params.to_prompt().frozen();
    if !prompt.is_finite() {
        return Err(Error::DivergedLoss {
            stage: "backbone",
            step,
            loss: f64::NAN,
        });
    }
    Ok(BackboneRun {
        prompt,
        loss_curve,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::encoders::EncoderConfig;
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use crate::prompts::PromptInit;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::zeros(1, 4);
        assert!((cross_entropy_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let l = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        let want = -(e / (e + 1.0)).ln();
        assert!((cross_entropy_loss(&l, &[0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.3133).abs() < 1e-4);
        let margins: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&m| {
                cross_entropy_loss(&Matrix::from_rows(&[vec![m, 0.0]]).unwrap(), &[0]).unwrap()
            })
            .collect();
        assert!(margins[0] > margins[1] && margins[1] > margins[2] && margins[2] < 1e-40);
        assert!(matches!(
            cross_entropy_loss(&l, &[2]),
            Err(Error::LabelOutOfRange { label: 2, n: 2 })
        ));
    }

    fn toy(seed: u64) -> (SyntheticDataset, FrozenEncoders, PromptState) {
        let data = DataConfig {
            n_classes: 8,
            shots: 4,
            test_per_class: 4,
            seed,
            ..DataConfig::default()
        };
        let enc_cfg = EncoderConfig {
            seed: seed + 1,
            ..EncoderConfig::default()
        };
        let ds = SyntheticDataset::generate(&data, enc_cfg.d_e).unwrap();
        let enc = FrozenEncoders::new(enc_cfg).unwrap();
        let mut rng = SeededRng::new(seed + 2);
        let init =
            PromptState::init(&mut rng, 4, 2, 16, PromptInit::Gaussian, ds.class_tokens()).unwrap();
        (ds, enc, init)
    }

    #[test]
    fn zero_lr_leaves_prompt_unchanged() {
        let (ds, enc, init) = toy(1);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let run = train_backbone(&ds, &enc, &init, &cfg).unwrap();
        assert!(run.prompt.bit_eq(&init));
        assert!(run.prompt.frozen);
    }

    #[test]
    fn training_is_deterministic_and_touches_only_the_prompt() {
        let (ds, enc, init) = toy(2);
        let before = (enc.clone(), ds.clone());
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train_backbone(&ds, &enc, &init, &cfg).unwrap();
        let b = train_backbone(&ds, &enc, &init, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(a.prompt.bit_eq(&b.prompt));
        assert_eq!(before, (enc, ds));
        assert_eq!(a.steps, 3 * 4 * 4 / 4);
    }

    #[test]
    fn one_step_moves_prompt_by_lr_times_gradient() {
        let (ds, enc, init) = toy(3);
        // Two classes, two images: recompute the step by hand.
        let tokens = ds.class_tokens().select_rows(&ds.base_ids()[..2]);
        let images: Vec<&Image> = ds.base_ids()[..2]
            .iter()
            .map(|&c| &ds.train_images(c)[0])
            .collect();
        let labels = [0, 1];
        let lr = 0.05;
        let loss_at = |p: &PromptState| {
            let mut t = Tape::new();
            let vars = PromptVars::constants(&mut t, p);
            let l = cross_entropy_var(&mut t, &enc, vars, &tokens, &images, &labels, 0.01).unwrap();
            t.scalar(l)
        };
        let numeric_text = finite_diff_grad(
            |m| {
                loss_at(&PromptState {
                    text: m.clone(),
                    ..init.clone()
                })
            },
            &init.text,
            1e-6,
        );
        let mut params = PromptParams::new(&init);
        let mut tape = Tape::new();
        let vars = params.track(&mut tape);
        let l = cross_entropy_var(&mut tape, &enc, vars, &tokens, &images, &labels, 0.01).unwrap();
        params.collect(vars, &tape.backward(l).unwrap()).unwrap();
        assert!(max_rel_err(&params.text.grad, &numeric_text) < 1e-4);
        let grad = params.text.grad.clone();
        let mut opt = Sgd::new(lr, 0.9);
        params.step(&mut opt).unwrap();
        let want = init.text.sub(&grad.scale(lr)).unwrap();
        assert!(params.text.value.bit_eq(&want));

        // Second step: velocity = 0.9 v + g.
        params.zero_grad();
        params.text.grad = grad.clone();
        let before = params.text.value.clone();
        params.step(&mut opt).unwrap();
        let v = grad.scale(0.9).add(&grad).unwrap();
        assert!(params.text.value.bit_eq(&before.sub(&v.scale(lr)).unwrap()));
    }

    #[test]
    fn rejects_bad_config() {
        let (ds, enc, init) = toy(4);
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                temperature: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(train_backbone(&ds, &enc, &init, &cfg).is_err());
        }
    }

    #[test]
    fn overflowing_prompt_reports_divergence() {
        // Saturated cosine logits keep the loss bounded, so force a NaN
        // through overflow in the pooled tokens instead.
        let (ds, enc, mut init) = toy(5);
        init.text = Matrix::filled(4, 16, f64::MAX);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = train_backbone(&ds, &enc, &init, &cfg).unwrap_err();
        assert!(matches!(
            err,
            Error::DivergedLoss {
                stage: "backbone",
                step: 0,
                ..
            }
        ));
    }
}
