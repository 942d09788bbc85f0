//! Frozen toy text and image encoders.
//!
//! Both towers are `W2 * tanh(W1 * meanpool(tokens))`. The text tower pools
//! `[prompt rows; class token]`, the image tower pools
//! `[visual prompt rows; patches]`. Pooling is permutation invariant, so only
//! the sum of the prompt rows reaches the encoder.
//!
//! The image tower is drawn correlated with the text tower,
//! `U = sqrt(1 - rho^2) W + rho G`, which keeps every entry marginally
//! `N(0, 1/fan_in)` while standing in for the alignment a pretrained
//! dual encoder would have. `rho = 1` gives independent towers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, l2_normalize_rows, Matrix, Tape, Var};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token embedding width.
    pub d_e: usize,
    /// Hidden width.
    pub d_h: usize,
    /// Output feature width.
    pub d: usize,
    /// Share of the image tower drawn independently of the text tower.
    pub tower_noise: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_e: 16,
            d_h: 32,
            d: 8,
            tower_noise: 0.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_h == 0 || self.d == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tower_noise) {
            return Err(Error::Config(format!(
                "encoder.tower_noise {} outside [0, 1]",
                self.tower_noise
            )));
        }
        Ok(())
    }
}

/// Whether a token sequence feeds the text or the image tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Image,
}

/// Encoder input: `[prompt rows; content rows]`.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub kind: TokenKind,
}

impl TokenSequence {
    /// `[p]_1 ... [p]_M [CLASS]`.
    pub fn text(prompt: &Matrix, class_token: &[f64]) -> Result<Self> {
        if class_token.len() != prompt.cols() {
            return Err(Error::shape(
                "TokenSequence::text",
                prompt.cols(),
                class_token.len(),
            ));
        }
        let mut rows: Vec<&[f64]> = (0..prompt.rows()).map(|r| prompt.row(r)).collect();
        rows.push(class_token);
        Ok(Self {
            tokens: Matrix::stack(&rows)?,
            kind: TokenKind::Text,
        })
    }

    /// `(P_v, V)`: optional visual prompt rows ahead of the patches.
    pub fn image(visual_prompt: Option<&Matrix>, patches: &Matrix) -> Result<Self> {
        let mut rows: Vec<&[f64]> = Vec::new();
        if let Some(vp) = visual_prompt {
            if vp.cols() != patches.cols() {
                return Err(Error::shape(
                    "TokenSequence::image",
                    patches.cols(),
                    vp.cols(),
                ));
            }
            rows.extend((0..vp.rows()).map(|r| vp.row(r)));
        }
        rows.extend((0..patches.rows()).map(|r| patches.row(r)));
        Ok(Self {
            tokens: Matrix::stack(&rows)?,
            kind: TokenKind::Image,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Frozen weights of both towers. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoders {
    config: EncoderConfig,
    text_in: Matrix,
    text_out: Matrix,
    image_in: Matrix,
    image_out: Matrix,
}

impl FrozenEncoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let EncoderConfig { d_e, d_h, d, .. } = config;
        let mut rng = SeededRng::new(config.seed);
        let in_std = 1.0 / (d_e as f64).sqrt();
        let out_std = 1.0 / (d_h as f64).sqrt();
        let text_in = rng.gaussian_matrix(d_h, d_e, in_std);
        let text_out = rng.gaussian_matrix(d, d_h, out_std);
        let rho = config.tower_noise;
        let keep = (1.0 - rho * rho).sqrt();
        let image_in = text_in
            .scale(keep)
            .add(&rng.gaussian_matrix(d_h, d_e, in_std).scale(rho))?;
        let image_out = text_out
            .scale(keep)
            .add(&rng.gaussian_matrix(d, d_h, out_std).scale(rho))?;
        Ok(Self {
            config,
            text_in,
            text_out,
            image_in,
            image_out,
        })
    }

    /// Encoders from explicit weights, for hand-built cases.
    pub fn from_weights(
        config: EncoderConfig,
        text_in: Matrix,
        text_out: Matrix,
        image_in: Matrix,
        image_out: Matrix,
    ) -> Result<Self> {
        let (d_e, d_h, d) = (config.d_e, config.d_h, config.d);
        for (name, m, shape) in [
            ("text_in", &text_in, (d_h, d_e)),
            ("text_out", &text_out, (d, d_h)),
            ("image_in", &image_in, (d_h, d_e)),
            ("image_out", &image_out, (d, d_h)),
        ] {
            if m.shape() != shape {
                return Err(Error::shape(
                    name,
                    format!("{shape:?}"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            text_in,
            text_out,
            image_in,
            image_out,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weights(&self) -> [&Matrix; 4] {
        [
            &self.text_in,
            &self.text_out,
            &self.image_in,
            &self.image_out,
        ]
    }

    fn check_width(&self, op: &'static str, m: &Matrix) -> Result<()> {
        if m.cols() != self.config.d_e {
            return Err(Error::shape(op, self.config.d_e, m.cols()));
        }
        Ok(())
    }

    fn tower(&self, pooled: &Matrix, w_in: &Matrix, w_out: &Matrix) -> Result<Matrix> {
        pooled.matmul_t(w_in)?.map(f64::tanh).matmul_t(w_out)
    }

    /// Text features for each row of `class_tokens` under one shared prompt.
    pub fn encode_texts(&self, prompt: &Matrix, class_tokens: &Matrix) -> Result<Matrix> {
        self.check_width("encode_texts", prompt)?;
        self.check_width("encode_texts", class_tokens)?;
        if prompt.rows() == 0 {
            return Err(Error::shape("encode_texts", "at least one prompt row", 0));
        }
        let pooled = class_tokens
            .add_row(&prompt.sum_rows())?
            .scale(1.0 / (prompt.rows() + 1) as f64);
        self.tower(&pooled, &self.text_in, &self.text_out)
    }

    pub fn encode_text(&self, prompt: &Matrix, class_token: &[f64]) -> Result<Vec<f64>> {
        let tokens = Matrix::row_vector(class_token)?;
        Ok(self.encode_texts(prompt, &tokens)?.into_data())
    }

    /// Image features from per-image patch sums (one row per image).
    pub fn encode_pooled_images(
        &self,
        visual_prompt: Option<&Matrix>,
        patch_sums: &Matrix,
        n_patches: usize,
    ) -> Result<Matrix> {
        self.check_width("encode_images", patch_sums)?;
        let pooled = match visual_prompt {
            Some(vp) => {
                self.check_width("encode_images", vp)?;
                patch_sums
                    .add_row(&vp.sum_rows())?
                    .scale(1.0 / (vp.rows() + n_patches) as f64)
            }
            None => patch_sums.scale(1.0 / n_patches as f64),
        };
        self.tower(&pooled, &self.image_in, &self.image_out)
    }

    pub fn encode_image(
        &self,
        visual_prompt: Option<&Matrix>,
        patches: &Matrix,
    ) -> Result<Vec<f64>> {
        if patches.rows() == 0 {
            return Err(Error::shape("encode_image", "at least one patch", 0));
        }
        let sums = patches.sum_rows();
        Ok(self
            .encode_pooled_images(visual_prompt, &sums, patches.rows())?
            .into_data())
    }

    /// `cos(g(P, c_i), f) / tau` for every class token row.
    pub fn class_logits(
        &self,
        text_prompt: &Matrix,
        class_tokens: &Matrix,
        image_feature: &[f64],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        crate::numerics::check_temperature(temperature)?;
        if class_tokens.rows() < 2 {
            return Err(Error::shape(
                "class_logits",
                "at least 2 classes",
                class_tokens.rows(),
            ));
        }
        let texts = self.encode_texts(text_prompt, class_tokens)?;
        (0..texts.rows())
            .map(|i| Ok(cosine_sim(texts.row(i), image_feature)? / temperature))
            .collect()
    }

    /// Taped [`Self::encode_texts`]; bit-identical forward values.
    pub fn text_features_var(
        &self,
        tape: &mut Tape,
        prompt: Var,
        class_tokens: &Matrix,
    ) -> Result<Var> {
        let m = tape.value(prompt).rows();
        self.check_width("text_features_var", tape.value(prompt))?;
        self.check_width("text_features_var", class_tokens)?;
        let tokens = tape.constant(class_tokens.clone());
        let s = tape.sum_rows(prompt);
        let pooled = tape.add_row(tokens, s)?;
        let pooled = tape.scale(pooled, 1.0 / (m + 1) as f64);
        self.tower_var(tape, pooled, &self.text_in, &self.text_out)
    }

    /// Taped [`Self::encode_pooled_images`].
    pub fn image_features_var(
        &self,
        tape: &mut Tape,
        visual_prompt: Option<Var>,
        patch_sums: &Matrix,
        n_patches: usize,
    ) -> Result<Var> {
        self.check_width("image_features_var", patch_sums)?;
        let sums = tape.constant(patch_sums.clone());
        let pooled = match visual_prompt {
            Some(vp) => {
                let mv = tape.value(vp).rows();
                let s = tape.sum_rows(vp);
                let p = tape.add_row(sums, s)?;
                tape.scale(p, 1.0 / (mv + n_patches) as f64)
            }
            None => tape.scale(sums, 1.0 / n_patches as f64),
        };
        self.tower_var(tape, pooled, &self.image_in, &self.image_out)
    }

    fn tower_var(
        &self,
        tape: &mut Tape,
        pooled: Var,
        w_in: &Matrix,
        w_out: &Matrix,
    ) -> Result<Var> {
        let w_in = tape.constant(w_in.clone());
        let w_out = tape.constant(w_out.clone());
        let h = tape.matmul_t(pooled, w_in)?;
        let h = tape.tanh(h);
        tape.matmul_t(h, w_out)
    }
}

/// Unit-norm text features for every class token under `prompt`.
pub fn normalized_texts(
    enc: &FrozenEncoders,
    prompt: &Matrix,
    class_tokens: &Matrix,
) -> Result<Matrix> {
    l2_normalize_rows(&enc.encode_texts(prompt, class_tokens)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_err};

    fn small(seed: u64) -> FrozenEncoders {
        FrozenEncoders::new(EncoderConfig {
            d_e: 8,
            d_h: 16,
            d: 4,
            tower_noise: 0.3,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        assert_eq!(small(7), small(7));
        assert_ne!(small(7), small(8));
    }

    #[test]
    fn prompt_equal_to_class_token_pools_to_that_token() {
        let enc = small(7);
        let c: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let prompt = Matrix::row_vector(&c).unwrap();
        let out = enc.encode_text(&prompt, &c).unwrap();
        let pooled = Matrix::row_vector(&c).unwrap();
        let direct = pooled
            .matmul_t(enc.weights()[0])
            .unwrap()
            .map(f64::tanh)
            .matmul_t(enc.weights()[1])
            .unwrap();
        assert_eq!(out, direct.into_data());
    }

    #[test]
    fn zero_inputs_give_zero_features() {
        let enc = small(1);
        let out = enc.encode_text(&Matrix::zeros(3, 8), &[0.0; 8]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_random_prompt_is_deterministic() {
        let run = || {
            let enc = small(7);
            let mut rng = SeededRng::new(99);
            let prompt = rng.gaussian_matrix(4, 8, 0.5);
            let c = rng.gaussian_matrix(1, 8, 1.0);
            enc.encode_text(&prompt, c.row(0)).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn single_patch_without_prompt() {
        let enc = small(3);
        let p: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let patches = Matrix::row_vector(&p).unwrap();
        let out = enc.encode_image(None, &patches).unwrap();
        let direct = patches
            .matmul_t(enc.weights()[2])
            .unwrap()
            .map(f64::tanh)
            .matmul_t(enc.weights()[3])
            .unwrap();
        assert_eq!(out, direct.into_data());
        let with_prompt = enc.encode_image(Some(&patches), &patches).unwrap();
        assert_eq!(out, with_prompt);
    }

    #[test]
    fn image_features_are_deterministic() {
        let run = || {
            let enc = small(4);
            let mut rng = SeededRng::new(5);
            let vp = rng.gaussian_matrix(2, 8, 0.3);
            let patches = rng.gaussian_matrix(3, 8, 1.0);
            enc.encode_image(Some(&vp), &patches).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let enc = small(1);
        assert!(matches!(
            enc.encode_text(&Matrix::zeros(2, 5), &[0.0; 5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(enc.encode_image(None, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn logits_for_collinear_and_orthogonal_classes() {
        // Identity towers (d_e = d_h = d = 2): text feature = tanh(pooled).
        let cfg = EncoderConfig {
            d_e: 2,
            d_h: 2,
            d: 2,
            tower_noise: 0.0,
            seed: 0,
        };
        let i2 = Matrix::identity(2);
        let enc =
            FrozenEncoders::from_weights(cfg, i2.clone(), i2.clone(), i2.clone(), i2).unwrap();
        let prompt = Matrix::zeros(1, 2);
        let tokens = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let image = [3.0, 0.0];
        let l1 = enc.class_logits(&prompt, &tokens, &image, 0.01).unwrap();
        assert!((l1[0] - 100.0).abs() < 1e-9);
        assert_eq!(l1[1], 0.0);
        let l2 = enc.class_logits(&prompt, &tokens, &image, 0.02).unwrap();
        assert!((l1[0] - 2.0 * l2[0]).abs() < 1e-9);
    }

    #[test]
    fn three_class_logits_softmax_to_one() {
        let enc = small(2);
        let mut rng = SeededRng::new(8);
        let prompt = rng.gaussian_matrix(4, 8, 0.02);
        let tokens = rng.gaussian_matrix(3, 8, 1.0);
        let image = enc
            .encode_image(None, &rng.gaussian_matrix(2, 8, 1.0))
            .unwrap();
        let logits = enc.class_logits(&prompt, &tokens, &image, 0.01).unwrap();
        let p = crate::numerics::softmax_rows(&Matrix::row_vector(&logits).unwrap(), 1.0).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permuting_prompt_rows_changes_nothing() {
        let enc = small(6);
        let mut rng = SeededRng::new(1);
        let prompt = rng.gaussian_matrix(4, 8, 0.5);
        let c = rng.gaussian_matrix(1, 8, 1.0);
        let perm = prompt.select_rows(&[2, 0, 3, 1]);
        let a = enc.encode_text(&prompt, c.row(0)).unwrap();
        let b = enc.encode_text(&perm, c.row(0)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let enc = small(9);
        let mut rng = SeededRng::new(2);
        let prompt = rng.gaussian_matrix(4, 8, 0.5);
        let tokens = rng.gaussian_matrix(5, 8, 1.0);
        let vp = rng.gaussian_matrix(2, 8, 0.5);
        let sums = rng.gaussian_matrix(3, 8, 2.0);
        let mut tape = Tape::new();
        let p = tape.param(prompt.clone());
        let v = tape.param(vp.clone());
        let t = enc.text_features_var(&mut tape, p, &tokens).unwrap();
        let i = enc
            .image_features_var(&mut tape, Some(v), &sums, 4)
            .unwrap();
        assert!(tape
            .value(t)
            .bit_eq(&enc.encode_texts(&prompt, &tokens).unwrap()));
        assert!(tape
            .value(i)
            .bit_eq(&enc.encode_pooled_images(Some(&vp), &sums, 4).unwrap()));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for seed in 0..20 {
            let enc = small(seed);
            let mut rng = SeededRng::new(seed + 100);
            let prompt = rng.gaussian_matrix(4, 8, 0.5);
            let tokens = rng.gaussian_matrix(3, 8, 1.0);
            let weights = rng.gaussian_matrix(3, 4, 1.0);
            let text_loss = |t: &mut Tape, p: Var| {
                let f = enc.text_features_var(t, p, &tokens).unwrap();
                let w = t.constant(weights.clone());
                let prod = t.matmul_t(f, w).unwrap();
                t.sum(prod)
            };
            let mut tape = Tape::new();
            let p = tape.param(prompt.clone());
            let l = text_loss(&mut tape, p);
            let g = tape.backward(l).unwrap().get_or_zeros(p, prompt.shape());
            let num = finite_diff_grad(
                |q| {
                    let mut t = Tape::new();
                    let v = t.constant(q.clone());
                    let l = text_loss(&mut t, v);
                    t.scalar(l)
                },
                &prompt,
                1e-6,
            );
            assert!(max_rel_err(&g, &num) < 1e-4);

            let sums = rng.gaussian_matrix(3, 8, 2.0);
            let vp = rng.gaussian_matrix(2, 8, 0.5);
            let image_loss = |t: &mut Tape, v: Var| {
                let f = enc.image_features_var(t, Some(v), &sums, 3).unwrap();
                let f = t.normalize_rows(f).unwrap();
                let w = t.constant(weights.clone());
                let prod = t.matmul_t(f, w).unwrap();
                t.sum_squares(prod)
            };
            let mut tape = Tape::new();
            let v = tape.param(vp.clone());
            let l = image_loss(&mut tape, v);
            let g = tape.backward(l).unwrap().get_or_zeros(v, vp.shape());
            let num = finite_diff_grad(
                |q| {
                    let mut t = Tape::new();
                    let v = t.constant(q.clone());
                    let l = image_loss(&mut t, v);
                    t.scalar(l)
                },
                &vp,
                1e-6,
            );
            assert!(max_rel_err(&g, &num) < 1e-4);
        }
    }
}
