//! Finite-difference checks of every taped gradient path the trainers use.

use serde::{Deserialize, Serialize};

use crate::backbone::{cross_entropy_var, PromptVars};
use crate::config::ExperimentConfig;
use crate::data::{Image, Split, SyntheticDataset};
use crate::dhno::{hard_batch_loss_var, NegativeSampler};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, max_rel_err, Gradients, Matrix, Tape, Var};
use crate::pipeline::prepare;
use crate::prompts::PromptState;
use crate::rng::SeededRng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Step for central differences. Contrastive losses at temperature 0.01 sit
/// around 10-30 on random probes, so smaller steps let rounding in the loss
/// swamp gradient entries near the 1e-6 error floor.
pub const GRADCHECK_EPS: f64 = 1e-4;
/// Spread of the random prompts probed.
const PROBE_STD: f64 = 0.3;

pub const OPS: [&str; 4] = [
    "cross_entropy_loss",
    "infonce_loss",
    "encode_text",
    "encode_image",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub probes: usize,
    pub max_rel_err: f64,
    /// Probe index with the largest error.
    pub worst_probe: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    /// `Err(GradCheckFailed)` naming each failing op.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let failing: Vec<String> = self
            .ops
            .iter()
            .filter(|o| !o.passed)
            .map(|o| {
                format!(
                    "{} (max rel err {:e} at probe {})",
                    o.op, o.max_rel_err, o.worst_probe
                )
            })
            .collect();
        Err(Error::GradCheckFailed(failing.join(", ")))
    }
}

/// Scalar loss of prompt variables on a fresh tape.
type LossFn<'a> = Box<dyn Fn(&mut Tape, PromptVars) -> Result<Var> + 'a>;

/// Worst relative error over the text and visual prompt gradients.
fn check_probe(prompt: &PromptState, loss: &LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = PromptVars::params(&mut tape, prompt);
    let l = loss(&mut tape, vars)?;
    let grads: Gradients = tape.backward(l)?;
    let eval_at = |p: &PromptState| -> f64 {
        let mut t = Tape::new();
        let vars = PromptVars::constants(&mut t, p);
        match loss(&mut t, vars) {
            Ok(l) => t.scalar(l),
            Err(_) => f64::NAN,
        }
    };
    let text_num = finite_diff_grad(
        |m| {
            eval_at(&PromptState {
                text: m.clone(),
                ..prompt.clone()
            })
        },
        &prompt.text,
        GRADCHECK_EPS,
    );
    let mut worst = max_rel_err(
        &grads.get_or_zeros(vars.text, prompt.text.shape()),
        &text_num,
    );
    if let (Some(v), Some(vp)) = (vars.visual, &prompt.visual) {
        let num = finite_diff_grad(
            |m| {
                eval_at(&PromptState {
                    visual: Some(m.clone()),
                    ..prompt.clone()
                })
            },
            vp,
            GRADCHECK_EPS,
        );
        worst = worst.max(max_rel_err(&grads.get_or_zeros(v, vp.shape()), &num));
    }
    if worst.is_nan() {
        return Ok(f64::INFINITY);
    }
    Ok(worst)
}

fn probe_prompt(cfg: &ExperimentConfig, rng: &mut SeededRng) -> Result<PromptState> {
    let d_e = cfg.encoder.d_e;
    let text = rng.gaussian_matrix(cfg.prompt.text_len, d_e, PROBE_STD);
    let visual = (cfg.prompt.visual_len > 0)
        .then(|| rng.gaussian_matrix(cfg.prompt.visual_len, d_e, PROBE_STD));
    PromptState::new(text, visual)
}

fn op_loss<'a>(
    op: &str,
    ds: &'a SyntheticDataset,
    enc: &'a FrozenEncoders,
    prompt: &PromptState,
    cfg: &ExperimentConfig,
    rng: &mut SeededRng,
) -> Result<LossFn<'a>> {
    let tokens = ds.split_tokens(Split::Base);
    let pairs = ds.few_shot_split().pairs;
    let b = cfg.dpc.batch_size.min(pairs.len());
    let chunk: Vec<_> = (0..b).map(|_| pairs[rng.below(pairs.len())]).collect();
    let tau = cfg.dpc.temperature;
    let weights = rng.gaussian_matrix(tokens.rows(), cfg.encoder.d, 1.0);
    Ok(match op {
        "cross_entropy_loss" => {
            let labels: Vec<usize> = chunk
                .iter()
                .map(|r| {
                    ds.base_index(r.class)
                        .expect("few-shot pairs are base classes")
                })
                .collect();
            Box::new(move |t: &mut Tape, v: PromptVars| {
                let images: Vec<&Image> = chunk.iter().map(|r| ds.image(*r)).collect();
                cross_entropy_var(t, enc, v, &tokens, &images, &labels, tau)
            })
        }
        "infonce_loss" => {
            let sampler = NegativeSampler::new(ds, enc, prompt, b, cfg.dpc.top_k, tau)?;
            let batch = sampler.sample(&chunk, rng)?;
            Box::new(move |t: &mut Tape, v: PromptVars| {
                hard_batch_loss_var(t, ds, enc, v, &tokens, &batch, tau)
            })
        }
        "encode_text" => Box::new(move |t: &mut Tape, v: PromptVars| {
            let f = enc.text_features_var(t, v.text, &tokens)?;
            let f = t.normalize_rows(f)?;
            let w = t.constant(weights.clone());
            let prod = t.matmul_t(f, w)?;
            Ok(t.sum_squares(prod))
        }),
        "encode_image" => {
            let images: Vec<&Image> = chunk.iter().map(|r| ds.image(*r)).collect();
            let sums = crate::backbone::patch_sums(&images)?;
            let n_patches = ds.config().n_patches;
            let weights: Matrix = rng.gaussian_matrix(b, cfg.encoder.d, 1.0);
            Box::new(move |t: &mut Tape, v: PromptVars| {
                let f = enc.image_features_var(t, v.visual, &sums, n_patches)?;
                let f = t.normalize_rows(f)?;
                let w = t.constant(weights.clone());
                let prod = t.matmul_t(f, w)?;
                Ok(t.sum_squares(prod))
            })
        }
        other => return Err(Error::Config(format!("unknown gradcheck op {other}"))),
    })
}

/// Checks each op on `n_probes` seeded probes: a random prompt and a random
/// batch from the config's dataset. Optimizer settings play no part.
pub fn gradcheck(cfg: &ExperimentConfig, n_probes: usize) -> Result<GradCheckReport> {
    if n_probes == 0 {
        return Err(Error::Config("gradcheck needs at least one probe".into()));
    }
    let (ds, enc) = prepare(cfg)?;
    let mut ops = Vec::with_capacity(OPS.len());
    for op in OPS {
        let mut rng = SeededRng::stream(cfg.seed, &format!("gradcheck-{op}"));
        let (mut worst, mut worst_probe) = (0.0f64, 0);
        for probe in 0..n_probes {
            let prompt = probe_prompt(cfg, &mut rng)?;
            let loss = op_loss(op, &ds, &enc, &prompt, cfg, &mut rng)?;
            let err = check_probe(&prompt, &loss)?;
            if err > worst {
                worst = err;
                worst_probe = probe;
            }
        }
        ops.push(OpCheck {
            op: op.to_string(),
            probes: n_probes,
            max_rel_err: worst,
            worst_probe,
            passed: worst < GRADCHECK_TOLERANCE,
        });
    }
    Ok(GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        ops,
    })
}
