//! Stage 2: hard-negative contrastive tuning of the parallel prompt.
//!
//! Each step ranks the base classes for every ground-truth image with the
//! frozen tuned prompt, keeps the Top-K as a candidate set, and trains the
//! parallel prompt with a symmetric InfoNCE loss over the deduplicated
//! candidates and one image per candidate.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    check_loss, cross_entropy_var, image_features_var, PromptParams, PromptVars, Sgd, TrainConfig,
};
use crate::data::{validate_batch_config, Image, ImageRef, Split, SyntheticDataset};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, neg_log_softmax, Matrix, Tape, Var};
use crate::prompts::{decouple_var, weight_mix_var, DualPromptState, PromptState};
use crate::rng::SeededRng;

pub const DEFAULT_TOP_K: usize = 8;

/// Deduplicated candidate classes with one image each.
#[derive(Clone, Debug, PartialEq)]
pub struct HardNegativeBatch {
    /// Global class ids, ground truths first, then negatives in rank order.
    pub classes: Vec<usize>,
    /// Position of each class within the base split.
    pub base_index: Vec<usize>,
    pub images: Vec<ImageRef>,
    pub positive: Vec<bool>,
}

impl HardNegativeBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn push(&mut self, class: usize, base_index: usize, image: ImageRef, positive: bool) {
        self.classes.push(class);
        self.base_index.push(base_index);
        self.images.push(image);
        self.positive.push(positive);
    }
}

/// One-hot row gather `Q` of shape `L x n_base`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMatrix {
    indices: Vec<usize>,
    n_base: usize,
}

impl SelectionMatrix {
    pub fn new(indices: Vec<usize>, n_base: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_base) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n: n_base,
            });
        }
        Ok(Self { indices, n_base })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut q = Matrix::zeros(self.indices.len(), self.n_base);
        for (r, &c) in self.indices.iter().enumerate() {
            q.set(r, c, 1.0);
        }
        q
    }

    /// `Q m`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.to_matrix().matmul(m)
    }
}

/// Encodes all base classes with `parallel`, normalizes rows, then gathers
/// the selected rows.
pub fn filter_features(
    enc: &FrozenEncoders,
    parallel: &Matrix,
    base_tokens: &Matrix,
    selection: &SelectionMatrix,
) -> Result<Matrix> {
    if selection.n_base != base_tokens.rows() {
        return Err(Error::shape(
            "filter_features",
            base_tokens.rows(),
            selection.n_base,
        ));
    }
    let all = l2_normalize_rows(&enc.encode_texts(parallel, base_tokens)?)?;
    selection.apply(&all)
}

/// Symmetric InfoNCE. Row `i` of `text_feats` (unit rows) pairs with row `i`
/// of `image_feats`, which are normalized here.
pub fn infonce_loss(text_feats: &Matrix, image_feats: &Matrix, temperature: f64) -> Result<f64> {
    crate::numerics::check_temperature(temperature)?;
    let l = text_feats.rows();
    if image_feats.rows() != l || text_feats.cols() != image_feats.cols() {
        return Err(Error::shape(
            "infonce_loss",
            format!("{:?}", text_feats.shape()),
            format!("{:?}", image_feats.shape()),
        ));
    }
    if l < 2 {
        return Err(Error::DegenerateBatch(l));
    }
    let images = l2_normalize_rows(image_feats)?;
    let sims = images.matmul_t(text_feats)?.scale(1.0 / temperature);
    let cols = sims.transpose();
    let mut total = 0.0;
    for i in 0..l {
        total += neg_log_softmax(sims.row(i), i);
        total += neg_log_softmax(cols.row(i), i);
    }
    Ok(total / l as f64)
}

/// Taped [`infonce_loss`] over already-normalized features.
pub fn infonce_var(tape: &mut Tape, text: Var, images: Var, temperature: f64) -> Result<Var> {
    let l = tape.value(text).rows();
    if l < 2 {
        return Err(Error::DegenerateBatch(l));
    }
    let labels: Vec<usize> = (0..l).collect();
    let sims = tape.matmul_t(images, text)?;
    let sims = tape.scale(sims, 1.0 / temperature);
    let image_to_text = tape.cross_entropy(sims, &labels)?;
    let cols = tape.transpose(sims);
    let text_to_image = tape.cross_entropy(cols, &labels)?;
    tape.add_scalars(image_to_text, text_to_image)
}

/// Top-K ranking with the frozen tuned prompt.
pub struct NegativeSampler<'a> {
    dataset: &'a SyntheticDataset,
    enc: &'a FrozenEncoders,
    visual: Option<Matrix>,
    /// Unit text features of every base class under the tuned prompt.
    base_text: Matrix,
    temperature: f64,
    batch: usize,
    k: usize,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(
        dataset: &'a SyntheticDataset,
        enc: &'a FrozenEncoders,
        tuned: &PromptState,
        batch: usize,
        k: usize,
        temperature: f64,
    ) -> Result<Self> {
        validate_batch_config(dataset.base_ids().len(), batch, k)?;
        let base_text =
            l2_normalize_rows(&enc.encode_texts(&tuned.text, &dataset.split_tokens(Split::Base))?)?;
        Ok(Self {
            dataset,
            enc,
            visual: tuned.visual.clone(),
            base_text,
            temperature,
            batch,
            k,
        })
    }

    pub fn base_text(&self) -> &Matrix {
        &self.base_text
    }

    /// Base-local class indices, highest logit first, ties to the lower id.
    pub fn rank(&self, image: &Image) -> Result<Vec<usize>> {
        let feat = crate::backbone::image_features(self.enc, self.visual.as_ref(), &[image])?;
        let logits = self
            .base_text
            .matmul_t(&feat)?
            .scale(1.0 / self.temperature)
            .into_data();
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Ok(order)
    }

    /// Builds the candidate batch for up to `b` ground-truth images.
    pub fn sample(
        &self,
        ground_truth: &[ImageRef],
        rng: &mut SeededRng,
    ) -> Result<HardNegativeBatch> {
        if ground_truth.len() > self.batch {
            return Err(Error::BatchExceedsBaseClasses {
                n_base: self.dataset.base_ids().len(),
                batch: ground_truth.len(),
                k: self.k,
                suggested_k: (self.dataset.base_ids().len() - 1) / ground_truth.len(),
            });
        }
        let mut out = HardNegativeBatch {
            classes: Vec::new(),
            base_index: Vec::new(),
            images: Vec::new(),
            positive: Vec::new(),
        };
        let mut seen = vec![false; self.base_text.rows()];
        let mut negatives = Vec::new();
        for gt in ground_truth {
            let idx = self
                .dataset
                .base_index(gt.class)
                .ok_or(Error::LabelOutOfRange {
                    label: gt.class,
                    n: self.dataset.n_classes(),
                })?;
            let ranked = self.rank(self.dataset.image(*gt))?;
            let top = &ranked[..self.k];
            if top.contains(&idx) {
                negatives.extend(top.iter().copied().filter(|&c| c != idx));
            } else {
                negatives.extend_from_slice(&ranked[..self.k - 1]);
            }
            if !seen[idx] {
                seen[idx] = true;
                out.push(gt.class, idx, *gt, true);
            }
        }
        let shots = self.dataset.config().shots;
        for idx in negatives {
            if seen[idx] {
                continue;
            }
            seen[idx] = true;
            let class = self.dataset.base_ids()[idx];
            let image = ImageRef {
                class,
                index: rng.below(shots),
            };
            out.push(class, idx, image, false);
        }
        debug_assert!(out.classes.iter().all(|&c| self.dataset.is_base(c)));
        debug_assert!(out.len() <= ground_truth.len() * self.k);
        Ok(out)
    }

    /// Mean pairwise cosine between the tuned text features of `indices`.
    pub fn mean_pairwise_similarity(&self, indices: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                total += dot(self.base_text.row(i), self.base_text.row(j));
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

/// What stage 2 optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Objective {
    /// Symmetric InfoNCE over hard-negative batches.
    #[default]
    Contrastive,
    /// Cross-entropy over all base classes on the hard-negative batch images.
    HardCrossEntropy,
    /// Plain cross-entropy on shuffled few-shot batches, no sampler.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpcConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Ground truths per step.
    pub batch_size: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub seed: u64,
    pub top_k: usize,
    pub omega_base: f64,
    pub omega_new: f64,
    pub objective: Stage2Objective,
}

impl Default for DpcConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: 4,
            momentum: t.momentum,
            temperature: t.temperature,
            seed: 0,
            top_k: DEFAULT_TOP_K,
            omega_base: crate::prompts::DEFAULT_OMEGA_BASE,
            omega_new: crate::prompts::DEFAULT_OMEGA_NEW,
            objective: Stage2Objective::Contrastive,
        }
    }
}

impl DpcConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

/// Per-step sampler audit: candidate-set similarity against a random set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub epoch: usize,
    pub step: usize,
    pub size: usize,
    pub hard_similarity: f64,
    pub random_similarity: f64,
}

#[derive(Clone, Debug)]
pub struct DpcRun {
    pub dual: DualPromptState,
    pub loss_curve: Vec<f64>,
    pub audit: Vec<AuditRow>,
    pub steps: usize,
}

/// The parallel prompt on the tape, routed through weighting and decoupling
/// at `omega` so gradients follow the mixed-prompt path.
fn exposed_parallel(
    tape: &mut Tape,
    vars: PromptVars,
    tuned: &PromptState,
    omega: f64,
) -> Result<PromptVars> {
    if omega == 0.0 {
        return Ok(vars);
    }
    let route = |tape: &mut Tape, v: Var, p: &Matrix| -> Result<Var> {
        let mixed = weight_mix_var(tape, v, p, omega)?;
        decouple_var(tape, mixed, p, omega)
    };
    let text = route(tape, vars.text, &tuned.text)?;
    let visual = match (vars.visual, &tuned.visual) {
        (Some(v), Some(p)) => Some(route(tape, v, p)?),
        _ => None,
    };
    Ok(PromptVars { text, visual })
}

/// Contrastive loss of a hard batch under the parallel prompt.
pub fn hard_batch_loss_var(
    tape: &mut Tape,
    dataset: &SyntheticDataset,
    enc: &FrozenEncoders,
    parallel: PromptVars,
    base_tokens: &Matrix,
    batch: &HardNegativeBatch,
    temperature: f64,
) -> Result<Var> {
    let selection = SelectionMatrix::new(batch.base_index.clone(), base_tokens.rows())?;
    let text = enc.text_features_var(tape, parallel.text, base_tokens)?;
    let text = tape.normalize_rows(text)?;
    let q = tape.constant(selection.to_matrix());
    let text = tape.matmul(q, text)?;
    let images: Vec<&Image> = batch.images.iter().map(|r| dataset.image(*r)).collect();
    let images = image_features_var(tape, enc, parallel.visual, &images)?;
    infonce_var(tape, text, images, temperature)
}

/// Trains the parallel prompt from a frozen tuned prompt.
pub fn train_dpc(
    dataset: &SyntheticDataset,
    enc: &FrozenEncoders,
    tuned: &PromptState,
    config: &DpcConfig,
) -> Result<DpcRun> {
    let cfg = &config.train();
    cfg.validate("dpc")?;
    let dual = DualPromptState::from_tuned(tuned.clone(), config.omega_base, config.omega_new)?;
    let sampler = match config.objective {
        Stage2Objective::CrossEntropy => None,
        _ => Some(NegativeSampler::new(
            dataset,
            enc,
            &dual.tuned,
            cfg.batch_size,
            config.top_k,
            cfg.temperature,
        )?),
    };
    let base_tokens = dataset.split_tokens(Split::Base);
    let n_base = base_tokens.rows();
    let mut pairs = dataset.few_shot_split().pairs;
    let mut shuffle = SeededRng::new(cfg.seed);
    let mut draws = SeededRng::stream(cfg.seed, "negatives");
    let mut audit_rng = SeededRng::stream(cfg.seed, "audit");
    let mut params = PromptParams::new(&dual.parallel);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut audit = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut pairs);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in pairs.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = params.track(&mut tape);
            let exposed = exposed_parallel(&mut tape, vars, &dual.tuned, config.omega_base)?;
            let loss = match &sampler {
                None => {
                    let images: Vec<&Image> = chunk.iter().map(|r| dataset.image(*r)).collect();
                    let labels: Vec<usize> = chunk
                        .iter()
                        .map(|r| {
                            dataset
                                .base_index(r.class)
                                .expect("few-shot pairs are base classes")
                        })
                        .collect();
                    cross_entropy_var(
                        &mut tape,
                        enc,
                        exposed,
                        &base_tokens,
                        &images,
                        &labels,
                        cfg.temperature,
                    )?
                }
                Some(sampler) => {
                    let batch = sampler.sample(chunk, &mut draws)?;
                    let mut random: Vec<usize> = (0..n_base).collect();
                    audit_rng.shuffle(&mut random);
                    audit.push(AuditRow {
                        epoch,
                        step,
                        size: batch.len(),
                        hard_similarity: sampler.mean_pairwise_similarity(&batch.base_index),
                        random_similarity: sampler.mean_pairwise_similarity(&random[..batch.len()]),
                    });
                    if config.objective == Stage2Objective::Contrastive {
                        hard_batch_loss_var(
                            &mut tape,
                            dataset,
                            enc,
                            exposed,
                            &base_tokens,
                            &batch,
                            cfg.temperature,
                        )?
                    } else {
                        let images: Vec<&Image> =
                            batch.images.iter().map(|r| dataset.image(*r)).collect();
                        cross_entropy_var(
                            &mut tape,
                            enc,
                            exposed,
                            &base_tokens,
                            &images,
                            &batch.base_index,
                            cfg.temperature,
                        )?
                    }
                }
            };
            let value = tape.scalar(loss);
            check_loss("dpc", step, value)?;
            params.zero_grad();
            params.collect(vars, &tape.backward(loss)?)?;
            params.step(&mut opt)?;
            total += value;
            batches += 1;
            step += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    let parallel = params.to_prompt();
    if !parallel.is_finite() {
        return Err(Error::DivergedLoss {
            stage: "dpc",
            step,
            loss: f64::NAN,
        });
    }
    Ok(DpcRun {
        dual: DualPromptState { parallel, ..dual },
        loss_curve,
        audit,
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
    fn infonce_closed_forms() {
        let eye = Matrix::identity(2);
        let e = std::f64::consts::E;
        let want = -2.0 * (e / (e + 1.0)).ln();
        assert!((infonce_loss(&eye, &eye, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.6265).abs() < 1e-4);
        let same = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert!((infonce_loss(&same, &same, 1.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let one = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            infonce_loss(&one, &one, 1.0),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn infonce_is_symmetric_under_swap() {
        let mut rng = SeededRng::new(4);
        for _ in 0..20 {
            let t = l2_normalize_rows(&rng.gaussian_matrix(5, 4, 1.0)).unwrap();
            let v = l2_normalize_rows(&rng.gaussian_matrix(5, 4, 1.0)).unwrap();
            let a = infonce_loss(&t, &v, 0.1).unwrap();
            let b = infonce_loss(&v, &t, 0.1).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_infonce_matches_plain() {
        let mut rng = SeededRng::new(8);
        let t = l2_normalize_rows(&rng.gaussian_matrix(4, 3, 1.0)).unwrap();
        let v = rng.gaussian_matrix(4, 3, 1.0);
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let vv = tape.constant(v.clone());
        let vn = tape.normalize_rows(vv).unwrap();
        let l = infonce_var(&mut tape, tv, vn, 0.05).unwrap();
        assert!((tape.scalar(l) - infonce_loss(&t, &v, 0.05).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn selection_matrix_gathers_rows() {
        let rows = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let q = SelectionMatrix::new(vec![2, 0], 3).unwrap();
        assert_eq!(
            q.apply(&rows).unwrap().to_rows(),
            vec![vec![0.6, 0.8], vec![1.0, 0.0]]
        );
        let id = SelectionMatrix::new(vec![0, 1, 2], 3).unwrap();
        assert!(id.apply(&rows).unwrap().bit_eq(&rows));
        let m = q.to_matrix();
        for r in 0..m.rows() {
            assert_eq!(m.row(r).iter().sum::<f64>(), 1.0);
        }
        assert!(SelectionMatrix::new(vec![3], 3).is_err());
    }

    struct Toy {
        ds: SyntheticDataset,
        enc: FrozenEncoders,
        prompt: PromptState,
    }

    fn toy(seed: u64, n_classes: usize) -> Toy {
        let enc_cfg = EncoderConfig {
            seed,
            ..EncoderConfig::default()
        };
        let ds = SyntheticDataset::generate(
            &DataConfig {
                n_classes,
                shots: 4,
                test_per_class: 2,
                seed,
                ..DataConfig::default()
            },
            enc_cfg.d_e,
        )
        .unwrap();
        let enc = FrozenEncoders::new(enc_cfg).unwrap();
        let mut rng = SeededRng::new(seed);
        let prompt =
            PromptState::init(&mut rng, 4, 2, 16, PromptInit::Gaussian, ds.class_tokens()).unwrap();
        Toy { ds, enc, prompt }
    }

    #[test]
    fn filter_paths_agree() {
        let t = toy(1, 12);
        let tokens = t.ds.split_tokens(Split::Base);
        let sel = SelectionMatrix::new(vec![4, 1, 3], tokens.rows()).unwrap();
        let filtered = filter_features(&t.enc, &t.prompt.text, &tokens, &sel).unwrap();
        for (r, &i) in sel.indices().iter().enumerate() {
            let single = t.enc.encode_text(&t.prompt.text, tokens.row(i)).unwrap();
            let single = l2_normalize_rows(&Matrix::row_vector(&single).unwrap()).unwrap();
            for (a, b) in filtered.row(r).iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((crate::numerics::norm(filtered.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_dedups_and_stays_in_base() {
        let t = toy(2, 40);
        let sampler = NegativeSampler::new(&t.ds, &t.enc, &t.prompt, 4, 4, 0.01).unwrap();
        let pairs = t.ds.few_shot_split().pairs;
        let mut rng = SeededRng::new(0);
        for chunk in pairs.chunks(4) {
            let b = sampler.sample(chunk, &mut rng).unwrap();
            assert!(b.len() <= chunk.len() * 4);
            let mut sorted = b.classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), b.len());
            for (i, &c) in b.classes.iter().enumerate() {
                assert!(t.ds.is_base(c));
                assert_eq!(b.images[i].class, c);
                assert!(b.images[i].index < t.ds.config().shots);
                assert_eq!(t.ds.base_ids()[b.base_index[i]], c);
            }
            assert!(b.positive.iter().take_while(|&&p| p).count() >= 1);
        }
    }

    #[test]
    fn sampler_single_item_takes_runner_up() {
        let t = toy(3, 12);
        let sampler = NegativeSampler::new(&t.ds, &t.enc, &t.prompt, 1, 2, 0.01).unwrap();
        let gt = t.ds.few_shot_split().pairs[0];
        let ranked = sampler.rank(t.ds.image(gt)).unwrap();
        let idx = t.ds.base_index(gt.class).unwrap();
        let b = sampler.sample(&[gt], &mut SeededRng::new(1)).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.base_index[0], idx);
        assert!(b.positive[0] && !b.positive[1]);
        let expected = if ranked[..2].contains(&idx) {
            *ranked[..2].iter().find(|&&c| c != idx).unwrap()
        } else {
            ranked[0]
        };
        assert_eq!(b.base_index[1], expected);
    }

    #[test]
    fn sampler_rejects_oversized_config() {
        let t = toy(4, 10);
        assert!(matches!(
            NegativeSampler::new(&t.ds, &t.enc, &t.prompt, 2, 8, 0.01),
            Err(Error::BatchExceedsBaseClasses { suggested_k: 2, .. })
        ));
    }

    #[test]
    fn hard_batch_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let t = toy(10 + seed, 12);
            let tokens = t.ds.split_tokens(Split::Base);
            let sampler = NegativeSampler::new(&t.ds, &t.enc, &t.prompt, 1, 3, 0.01).unwrap();
            let gt = t.ds.few_shot_split().pairs[seed as usize % 24];
            let batch = sampler.sample(&[gt], &mut SeededRng::new(seed)).unwrap();
            assert_eq!(batch.len(), 3);
            let loss_at = |p: &PromptState, tape: &mut Tape, vars: PromptVars| {
                let exposed = exposed_parallel(tape, vars, p, 0.2).unwrap();
                hard_batch_loss_var(tape, &t.ds, &t.enc, exposed, &tokens, &batch, 0.01).unwrap()
            };
            let mut tape = Tape::new();
            let vars = PromptVars::params(&mut tape, &t.prompt);
            let l = loss_at(&t.prompt, &mut tape, vars);
            let g = tape.backward(l).unwrap();
            let analytic = g.get_or_zeros(vars.text, t.prompt.text.shape());
            let numeric = finite_diff_grad(
                |m| {
                    let p = PromptState {
                        text: m.clone(),
                        ..t.prompt.clone()
                    };
                    let mut tape = Tape::new();
                    let vars = PromptVars::constants(&mut tape, &p);
                    let l = loss_at(&t.prompt, &mut tape, vars);
                    tape.scalar(l)
                },
                &t.prompt.text,
                1e-6,
            );
            assert!(max_rel_err(&analytic, &numeric) < 1e-4, "seed {seed}");
        }
    }

    fn dpc_config(lr: f64, objective: Stage2Objective) -> DpcConfig {
        DpcConfig {
            epochs: 1,
            lr,
            batch_size: 2,
            top_k: 3,
            objective,
            ..DpcConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parallel_equal_to_tuned() {
        let t = toy(5, 16);
        let run = train_dpc(
            &t.ds,
            &t.enc,
            &t.prompt,
            &dpc_config(0.0, Stage2Objective::Contrastive),
        )
        .unwrap();
        assert!(run.dual.parallel.bit_eq(&t.prompt));
        assert!(run.dual.tuned.frozen && !run.dual.parallel.frozen);
    }

    #[test]
    fn training_moves_only_the_parallel_prompt() {
        let t = toy(6, 16);
        for objective in [
            Stage2Objective::Contrastive,
            Stage2Objective::HardCrossEntropy,
            Stage2Objective::CrossEntropy,
        ] {
            let cfg = dpc_config(0.002, objective);
            let a = train_dpc(&t.ds, &t.enc, &t.prompt, &cfg).unwrap();
            let b = train_dpc(&t.ds, &t.enc, &t.prompt, &cfg).unwrap();
            assert!(a.dual.tuned.bit_eq(&t.prompt));
            assert!(!a.dual.parallel.bit_eq(&t.prompt));
            assert!(a.dual.parallel.bit_eq(&b.dual.parallel));
            assert_eq!(a.loss_curve, b.loss_curve);
            assert_eq!(
                a.audit.is_empty(),
                objective == Stage2Objective::CrossEntropy
            );
        }
    }
}
