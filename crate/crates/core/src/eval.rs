//! Base/new accuracy, harmonic mean, weight sweeps, the component ablation
//! grid and prompt feature-map statistics.

use serde::{Deserialize, Serialize};

use crate::backbone::image_features;
use crate::data::{Image, Split, SyntheticDataset};
use crate::dhno::{train_dpc, DpcConfig, Stage2Objective};
use crate::encoders::{normalized_texts, FrozenEncoders};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_sim, Matrix};
use crate::prompts::{check_omega, DualPromptState, PromptState};

pub const OMEGA_BASE_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0];
pub const OMEGA_NEW_GRID: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2];

/// Predicted and true global class ids for every test image of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub split: Split,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl Predictions {
    /// Fraction correct in `[0, 1]`.
    pub fn accuracy(&self) -> f64 {
        let hits = self
            .truth
            .iter()
            .zip(&self.predicted)
            .filter(|(t, p)| t == p)
            .count();
        hits as f64 / self.truth.len() as f64
    }

    pub fn per_class(&self, dataset: &SyntheticDataset) -> Vec<ClassScore> {
        dataset
            .split_ids(self.split)
            .iter()
            .map(|&class| {
                let (mut hits, mut total) = (0, 0);
                for (t, p) in self.truth.iter().zip(&self.predicted) {
                    if *t == class {
                        total += 1;
                        hits += usize::from(p == t);
                    }
                }
                ClassScore {
                    class,
                    split: self.split,
                    accuracy: percent(hits as f64 / total.max(1) as f64),
                }
            })
            .collect()
    }
}

/// Rounds a fraction to a percentage with two decimals.
pub fn percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

/// Scores the split's test images against the split's classes only.
pub fn classify_with_prompt(
    enc: &FrozenEncoders,
    prompt: &PromptState,
    dataset: &SyntheticDataset,
    split: Split,
    temperature: f64,
) -> Result<Predictions> {
    crate::numerics::check_temperature(temperature)?;
    let ids = dataset.split_ids(split);
    let images: Vec<&Image> = dataset.split_test_images(split).collect();
    if ids.is_empty() || images.is_empty() {
        return Err(Error::EmptySplit);
    }
    let text = normalized_texts(enc, &prompt.text, &dataset.split_tokens(split))?;
    let feats = image_features(enc, prompt.visual.as_ref(), &images)?;
    let logits = feats.matmul_t(&text)?.scale(1.0 / temperature);
    let predicted = (0..logits.rows())
        .map(|r| ids[argmax(logits.row(r))])
        .collect();
    Ok(Predictions {
        split,
        truth: images.iter().map(|i| i.label).collect(),
        predicted,
    })
}

/// Base split under the base-mixed prompt, new split under the new-class prompt.
pub fn classify(
    enc: &FrozenEncoders,
    dual: &DualPromptState,
    dataset: &SyntheticDataset,
    split: Split,
    temperature: f64,
) -> Result<Predictions> {
    let prompt = match split {
        Split::Base => dual.base_prompt()?,
        Split::New => dual.new_class_prompt()?,
    };
    classify_with_prompt(enc, &prompt, dataset, split, temperature)
}

/// `2 b n / (b + n)` over percentages.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    for v in [base, new] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Config(format!("accuracy {v} outside [0, 100]")));
        }
    }
    if base == 0.0 && new == 0.0 {
        return Err(Error::BothZero);
    }
    Ok(2.0 * base * new / (base + new))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub split: Split,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
    pub omega_base: f64,
    pub omega_new: f64,
    pub seed: u64,
    pub per_class: Vec<ClassScore>,
    /// Resolved experiment config.
    pub config: serde_json::Value,
}

/// Accuracy pair in percent with its harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub base: f64,
    pub new: f64,
    pub hm: f64,
}

impl Scores {
    pub fn from_fractions(base: f64, new: f64) -> Self {
        let (base, new) = (percent(base), percent(new));
        let hm = harmonic_mean(base, new).unwrap_or(0.0);
        Self { base, new, hm }
    }
}

/// Scores with separate prompts for the two splits.
pub fn score_prompts(
    enc: &FrozenEncoders,
    dataset: &SyntheticDataset,
    base_prompt: &PromptState,
    new_prompt: &PromptState,
    temperature: f64,
) -> Result<(Scores, Predictions, Predictions)> {
    let base = classify_with_prompt(enc, base_prompt, dataset, Split::Base, temperature)?;
    let new = classify_with_prompt(enc, new_prompt, dataset, Split::New, temperature)?;
    Ok((
        Scores::from_fractions(base.accuracy(), new.accuracy()),
        base,
        new,
    ))
}

pub fn evaluate(
    enc: &FrozenEncoders,
    dual: &DualPromptState,
    dataset: &SyntheticDataset,
    temperature: f64,
    stage: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let (scores, base, new) = score_prompts(
        enc,
        dataset,
        &dual.base_prompt()?,
        &dual.new_class_prompt()?,
        temperature,
    )?;
    let mut per_class = base.per_class(dataset);
    per_class.extend(new.per_class(dataset));
    Ok(EvalReport {
        stage: stage.to_string(),
        base_acc: scores.base,
        new_acc: scores.new,
        hm: scores.hm,
        omega_base: dual.omega_base,
        omega_new: dual.omega_new,
        seed,
        per_class,
        config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub split: Split,
    pub rows: Vec<SweepRow>,
    /// Consecutive pairs where accuracy went up.
    pub rises: usize,
    /// Consecutive pairs where accuracy went down.
    pub falls: usize,
}

impl SweepTable {
    pub fn is_non_increasing(&self) -> bool {
        self.rises == 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,omega,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.2}\n",
                self.split.name(),
                r.omega,
                r.accuracy
            ));
        }
        out
    }
}

/// Accuracy of one split as the mixing weight for that split varies.
pub fn sweep_omega(
    enc: &FrozenEncoders,
    dual: &DualPromptState,
    dataset: &SyntheticDataset,
    omegas: &[f64],
    split: Split,
    temperature: f64,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        check_omega(omega)?;
        let prompt = dual.weight_mix(omega)?;
        let acc = classify_with_prompt(enc, &prompt, dataset, split, temperature)?.accuracy();
        rows.push(SweepRow {
            omega,
            accuracy: percent(acc),
        });
    }
    let rises = rows
        .windows(2)
        .filter(|w| w[1].accuracy > w[0].accuracy)
        .count();
    let falls = rows
        .windows(2)
        .filter(|w| w[1].accuracy < w[0].accuracy)
        .count();
    Ok(SweepTable {
        split,
        rows,
        rises,
        falls,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapRow {
    pub row: usize,
    pub tuned_vs_parallel: f64,
    pub tuned_vs_random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapReport {
    pub rows: Vec<FeatureMapRow>,
    pub mean_tuned_vs_parallel: f64,
    pub mean_tuned_vs_random: f64,
}

impl FeatureMapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,tuned_vs_parallel,tuned_vs_random\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.row, r.tuned_vs_parallel, r.tuned_vs_random
            ));
        }
        out
    }
}

/// Row-wise cosine between the tuned prompt and the parallel prompt, and
/// between the tuned prompt and a fresh random prompt.
pub fn feature_map_report(
    tuned: &Matrix,
    parallel: &Matrix,
    random: &Matrix,
) -> Result<FeatureMapReport> {
    if tuned.shape() != parallel.shape() || tuned.shape() != random.shape() {
        return Err(Error::shape(
            "feature_map_report",
            format!("{:?}", tuned.shape()),
            format!("{:?} / {:?}", parallel.shape(), random.shape()),
        ));
    }
    let rows = (0..tuned.rows())
        .map(|r| {
            Ok(FeatureMapRow {
                row: r,
                tuned_vs_parallel: cosine_sim(tuned.row(r), parallel.row(r))?,
                tuned_vs_random: cosine_sim(tuned.row(r), random.row(r))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(FeatureMapReport {
        mean_tuned_vs_parallel: rows.iter().map(|r| r.tuned_vs_parallel).sum::<f64>() / n,
        mean_tuned_vs_random: rows.iter().map(|r| r.tuned_vs_random).sum::<f64>() / n,
        rows,
    })
}

/// Which components an ablation row enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub two_stage: bool,
    pub dhno: bool,
    pub weighting: bool,
    pub decoupling: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub components: Components,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,two_stage,dhno,weighting,decoupling,base_acc,new_acc,hm\n");
        for r in &self.rows {
            let c = r.components;
            out.push_str(&format!(
                "{},{},{},{},{},{:.2},{:.2},{:.2}\n",
                r.label,
                u8::from(c.two_stage),
                u8::from(c.dhno),
                u8::from(c.weighting),
                u8::from(c.decoupling),
                r.scores.base,
                r.scores.new,
                r.scores.hm
            ));
        }
        out
    }
}

/// The component grid, starting from a finished backbone prompt.
///
/// Rows without the hard-negative optimizer train the parallel prompt with
/// plain cross-entropy at `ce_batch_size`; the rest share one contrastive
/// run. Inference per row:
///
/// * backbone: `P` on both splits;
/// * (1) continued cross-entropy tuning, used on both splits;
/// * (2) contrastive parallel prompt on both splits;
/// * (3) base-weighted mix on both splits;
/// * (4) cross-entropy parallel prompt with weighting and decoupling;
/// * (5) the full method.
pub fn ablation_matrix(
    enc: &FrozenEncoders,
    dataset: &SyntheticDataset,
    tuned: &PromptState,
    dpc: &DpcConfig,
    ce_batch_size: usize,
) -> Result<AblationTable> {
    let tau = dpc.temperature;
    let contrastive = DpcConfig {
        objective: Stage2Objective::Contrastive,
        ..dpc.clone()
    };
    let mut ce = DpcConfig {
        objective: Stage2Objective::CrossEntropy,
        ..dpc.clone()
    };
    ce.batch_size = ce_batch_size;
    let hard = train_dpc(dataset, enc, tuned, &contrastive)?.dual;
    let plain = train_dpc(dataset, enc, tuned, &ce)?.dual;
    let score = |base: PromptState, new: PromptState| -> Result<Scores> {
        Ok(score_prompts(enc, dataset, &base, &new, tau)?.0)
    };
    let row = |label: &str, c: (bool, bool, bool, bool), scores: Scores| AblationRow {
        label: label.to_string(),
        components: Components {
            two_stage: c.0,
            dhno: c.1,
            weighting: c.2,
            decoupling: c.3,
        },
        scores,
    };
    let p = hard.tuned.clone();
    let hard_base = hard.base_prompt()?;
    Ok(AblationTable {
        rows: vec![
            row(
                "backbone",
                (false, false, false, false),
                score(p.clone(), p)?,
            ),
            row(
                "(1)",
                (true, false, false, false),
                score(plain.parallel.clone(), plain.parallel.clone())?,
            ),
            row(
                "(2)",
                (true, true, false, false),
                score(hard.parallel.clone(), hard.parallel.clone())?,
            ),
            row(
                "(3)",
                (true, true, true, false),
                score(hard_base.clone(), hard_base.clone())?,
            ),
            row(
                "(4)",
                (true, false, true, true),
                score(plain.base_prompt()?, plain.new_class_prompt()?)?,
            ),
            row(
                "(5)",
                (true, true, true, true),
                score(hard_base, hard.new_class_prompt()?)?,
            ),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::encoders::EncoderConfig;
    use crate::prompts::PromptInit;
    use crate::rng::SeededRng;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(81.98, 68.84).unwrap() - 74.84).abs() < 0.005);
        assert!((harmonic_mean(86.10, 74.78).unwrap() - 80.04).abs() < 0.005);
        assert_eq!(harmonic_mean(55.5, 55.5).unwrap(), 55.5);
        assert!(matches!(harmonic_mean(0.0, 0.0), Err(Error::BothZero)));
        assert!(harmonic_mean(101.0, 3.0).is_err());
        assert_eq!(harmonic_mean(0.0, 50.0).unwrap(), 0.0);
    }

    #[test]
    fn harmonic_mean_bounds_on_grid() {
        for b in (1..=100).step_by(3) {
            for n in (1..=100).step_by(7) {
                let (b, n) = (b as f64, n as f64);
                let h = harmonic_mean(b, n).unwrap();
                assert!(h <= (b + n) / 2.0 + 1e-12);
                assert!(h >= b.min(n) - 1e-12);
            }
        }
    }

    fn setup(sigma: f64, seed: u64) -> (SyntheticDataset, FrozenEncoders, PromptState) {
        let enc = FrozenEncoders::new(EncoderConfig {
            seed,
            ..EncoderConfig::default()
        })
        .unwrap();
        let ds = SyntheticDataset::generate(
            &DataConfig {
                n_classes: 12,
                shots: 2,
                test_per_class: 5,
                sigma,
                seed,
                ..DataConfig::default()
            },
            16,
        )
        .unwrap();
        let p = PromptState::init(
            &mut SeededRng::new(seed),
            4,
            0,
            16,
            PromptInit::Gaussian,
            ds.class_tokens(),
        )
        .unwrap();
        (ds, enc, p)
    }

    /// Scores every image against every split class one at a time.
    fn naive_accuracy(
        enc: &FrozenEncoders,
        p: &PromptState,
        ds: &SyntheticDataset,
        split: Split,
    ) -> f64 {
        let ids = ds.split_ids(split);
        let (mut hits, mut total) = (0, 0);
        for &c in ids {
            for img in ds.test_images(c) {
                let f = enc.encode_image(p.visual.as_ref(), &img.patches).unwrap();
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &k in ids {
                    let t = enc.encode_text(&p.text, ds.class_tokens().row(k)).unwrap();
                    let s = cosine_sim(&t, &f).unwrap() / 0.01;
                    if s > best.0 {
                        best = (s, k);
                    }
                }
                hits += usize::from(best.1 == c);
                total += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn classify_matches_naive_scorer() {
        for seed in 0..3 {
            let (ds, enc, p) = setup(0.6, seed);
            for split in [Split::Base, Split::New] {
                let fast = classify_with_prompt(&enc, &p, &ds, split, 0.01).unwrap();
                assert!(fast
                    .predicted
                    .iter()
                    .all(|c| ds.split_ids(split).contains(c)));
                assert!((fast.accuracy() - naive_accuracy(&enc, &p, &ds, split)).abs() < 1e-12);
                let again = classify_with_prompt(&enc, &p, &ds, split, 0.01).unwrap();
                assert_eq!(fast, again);
            }
        }
    }

    #[test]
    fn zero_new_weight_reproduces_backbone_predictions() {
        let (ds, enc, p) = setup(0.6, 4);
        let mut dual = DualPromptState::from_tuned(p.clone(), 0.2, 0.0).unwrap();
        dual.parallel.text = SeededRng::new(9).gaussian_matrix(4, 16, 1.0);
        let a = classify(&enc, &dual, &ds, Split::New, 0.01).unwrap();
        let b = classify_with_prompt(&enc, &p, &ds, Split::New, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_zero_row_is_backbone() {
        let (ds, enc, p) = setup(0.6, 5);
        let mut dual = DualPromptState::from_tuned(p.clone(), 0.2, 1e-6).unwrap();
        dual.parallel.text = SeededRng::new(2).gaussian_matrix(4, 16, 0.5);
        let t = sweep_omega(&enc, &dual, &ds, &OMEGA_BASE_GRID, Split::Base, 0.01).unwrap();
        let backbone = classify_with_prompt(&enc, &p, &ds, Split::Base, 0.01).unwrap();
        assert_eq!(t.rows[0].accuracy, percent(backbone.accuracy()));
        assert_eq!(t.rows.len(), 6);
        assert!(t.rises + t.falls <= 5);
        assert!(t.to_csv().starts_with("split,omega,accuracy\nbase,0,"));
        assert!(sweep_omega(&enc, &dual, &ds, &[1.2], Split::Base, 0.01).is_err());
    }

    #[test]
    fn feature_map_cases() {
        let mut rng = SeededRng::new(1);
        let p = rng.gaussian_matrix(4, 16, 1.0);
        let r = rng.gaussian_matrix(4, 16, 1.0);
        let rep = feature_map_report(&p, &p, &r).unwrap();
        assert!(rep
            .rows
            .iter()
            .all(|row| (row.tuned_vs_parallel - 1.0).abs() < 1e-12));
        assert!(rep.mean_tuned_vs_random.abs() < 0.5);
        assert!(feature_map_report(&p, &Matrix::zeros(3, 16), &r).is_err());
    }

    #[test]
    fn random_prompt_cosine_is_small_in_monte_carlo() {
        // Threshold for the tuned-vs-random statistic: |mean cosine| of four
        // independent 16-d Gaussian rows stays below 0.5 essentially always.
        let mut over = 0;
        for seed in 0..1000 {
            let mut rng = SeededRng::new(seed);
            let a = rng.gaussian_matrix(4, 16, 1.0);
            let b = rng.gaussian_matrix(4, 16, 1.0);
            let rep = feature_map_report(&a, &a, &b).unwrap();
            over += usize::from(rep.mean_tuned_vs_random.abs() >= 0.5);
        }
        assert!(over <= 5, "{over} of 1000 exceed 0.5");
    }

    #[test]
    fn noiseless_images_get_one_prediction_per_class() {
        let (ds, enc, p) = setup(0.0, 6);
        let preds = classify_with_prompt(&enc, &p, &ds, Split::Base, 0.01).unwrap();
        for score in preds.per_class(&ds) {
            assert!(score.accuracy == 0.0 || score.accuracy == 100.0);
        }
    }
}
