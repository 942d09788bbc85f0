//! Stage wiring: dataset, backbone tuning, stage-2 tuning, evaluation, and
//! the artifacts a full run leaves on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{train_backbone, BackboneRun};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::ExperimentConfig;
use crate::data::{hex, DatasetFile, Split, SyntheticDataset};
use crate::dhno::{train_dpc, AuditRow, DpcRun};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_matrix, evaluate, feature_map_report, score_prompts, sweep_omega, AblationTable,
    EvalReport, FeatureMapReport, SweepTable, OMEGA_BASE_GRID, OMEGA_NEW_GRID,
};
use crate::prompts::{DualPromptState, PromptState};
use crate::rng::SeededRng;

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Dataset and frozen encoders for a config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(SyntheticDataset, FrozenEncoders)> {
    let enc = FrozenEncoders::new(cfg.encoder.clone()).map_err(|e| e.in_stage("encoders"))?;
    let ds =
        SyntheticDataset::generate(&cfg.data, cfg.encoder.d_e).map_err(|e| e.in_stage("data"))?;
    Ok((ds, enc))
}

/// The untrained prompt the backbone starts from.
pub fn initial_prompt(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<PromptState> {
    PromptState::init(
        &mut SeededRng::new(cfg.prompt.seed),
        cfg.prompt.text_len,
        cfg.prompt.visual_len,
        cfg.encoder.d_e,
        cfg.prompt.init,
        &ds.split_tokens(Split::Base),
    )
}

/// A second prompt from the same init distribution, for feature-map baselines.
pub fn random_prompt(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<PromptState> {
    PromptState::init(
        &mut SeededRng::stream(cfg.prompt.seed, "random-prompt"),
        cfg.prompt.text_len,
        cfg.prompt.visual_len,
        cfg.encoder.d_e,
        crate::prompts::PromptInit::Gaussian,
        &ds.split_tokens(Split::Base),
    )
}

pub fn run_backbone(
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    enc: &FrozenEncoders,
) -> Result<(BackboneRun, Checkpoint)> {
    let stage = |e: Error| e.in_stage("backbone");
    let init = initial_prompt(cfg, ds).map_err(stage)?;
    let run = train_backbone(ds, enc, &init, &cfg.backbone).map_err(stage)?;
    let ckpt = Checkpoint::backbone(cfg, &run.prompt, run.steps, &ds.checksum());
    Ok((run, ckpt))
}

pub fn run_dpc(
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    enc: &FrozenEncoders,
    backbone: &Checkpoint,
) -> Result<(DpcRun, Checkpoint)> {
    let stage = |e: Error| e.in_stage("dpc");
    check_dataset(backbone, ds).map_err(stage)?;
    if backbone.stage != Stage::Backbone {
        return Err(stage(Error::Config(
            "stage 2 needs a backbone checkpoint".into(),
        )));
    }
    let tuned = backbone.tuned_prompt().map_err(stage)?;
    let run = train_dpc(ds, enc, &tuned, &cfg.effective_dpc()).map_err(stage)?;
    let ckpt = Checkpoint::dpc(backbone, cfg, &run.dual, run.steps);
    Ok((run, ckpt))
}

/// Fails unless `ds` is the dataset the checkpoint was trained on.
pub fn check_dataset(ckpt: &Checkpoint, ds: &SyntheticDataset) -> Result<()> {
    let sum = ds.checksum();
    if sum != ckpt.dataset_checksum {
        return Err(Error::Config(format!(
            "dataset checksum {sum} does not match checkpoint {}",
            ckpt.dataset_checksum
        )));
    }
    Ok(())
}

fn stage_temperature(ckpt: &Checkpoint) -> f64 {
    match ckpt.stage {
        Stage::Backbone => ckpt.config.backbone.temperature,
        Stage::Dpc => ckpt.config.dpc.temperature,
    }
}

/// Base/new report for a checkpoint, with its config embedded.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &SyntheticDataset) -> Result<EvalReport> {
    let stage = |e: Error| e.in_stage("eval");
    check_dataset(ckpt, ds).map_err(stage)?;
    let enc = ckpt.encoders().map_err(stage)?;
    let dual = ckpt.dual().map_err(stage)?;
    evaluate(
        &enc,
        &dual,
        ds,
        stage_temperature(ckpt),
        ckpt.stage.name(),
        ckpt.config.seed,
        ckpt.config.to_json(),
    )
    .map_err(stage)
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("epoch,step,size,hard_similarity,random_similarity\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch + 1,
            r.step,
            r.size,
            r.hard_similarity,
            r.random_similarity
        ));
    }
    out
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports are plain data");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

/// Index of a run directory: config hash, every seed, and a checksum per
/// artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.message().to_string(),
        })
    }

    /// Recomputes every checksum under `dir`; lists the mismatches.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            let bytes = std::fs::read(dir.join(&a.path))?;
            if sha256_hex(&bytes) != a.sha256 {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}

fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    [
        ("root", cfg.seed),
        ("data", cfg.data.seed),
        ("encoder", cfg.encoder.seed),
        ("prompt", cfg.prompt.seed),
        ("backbone", cfg.backbone.seed),
        ("dpc", cfg.dpc.seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Writes files into one directory and remembers their checksums.
struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        log::info!("wrote {}", self.dir.join(name).display());
        self.entries.push(ArtifactEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }
}

/// Everything a full run produced, besides the files themselves.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub backbone_report: EvalReport,
    pub report: EvalReport,
    pub base_sweep: SweepTable,
    pub new_sweep: SweepTable,
    pub feature_map: FeatureMapReport,
    pub audit: Vec<AuditRow>,
}

/// Backbone, stage 2 and evaluation, with every artifact written to `out`.
/// Artifacts do not depend on `out`, so runs are comparable across
/// directories.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mut w = ArtifactWriter::new(out)?;
    w.write("config.toml", &cfg.to_toml_string()?)?;

    let (ds, enc) = prepare(cfg)?;
    let dataset_toml =
        toml::to_string(&DatasetFile::describe(&ds)).map_err(|e| Error::Config(e.to_string()))?;
    w.write("dataset.toml", &dataset_toml)?;

    log::info!("backbone: {} epochs", cfg.backbone.epochs);
    let (bb, bb_ckpt) = run_backbone(cfg, &ds, &enc)?;
    w.write("backbone.ckpt.toml", &bb_ckpt.to_toml_string()?)?;
    w.write("loss_curve.csv", &loss_curve_csv(&bb.loss_curve))?;
    let backbone_report = evaluate_checkpoint(&bb_ckpt, &ds)?;
    w.write("report_backbone.json", &to_json_pretty(&backbone_report))?;

    log::info!("dpc: {} epochs", cfg.dpc.epochs);
    let (dpc, dpc_ckpt) = run_dpc(cfg, &ds, &enc, &bb_ckpt)?;
    w.write("dpc.ckpt.toml", &dpc_ckpt.to_toml_string()?)?;
    w.write("dpc_loss_curve.csv", &loss_curve_csv(&dpc.loss_curve))?;
    w.write("sampler_audit.csv", &audit_csv(&dpc.audit))?;
    let report = evaluate_checkpoint(&dpc_ckpt, &ds)?;
    w.write("report.json", &to_json_pretty(&report))?;

    let tau = cfg.dpc.temperature;
    let sweep = |omegas: &[f64], split| {
        sweep_omega(&enc, &dpc.dual, &ds, omegas, split, tau).map_err(|e| e.in_stage("eval"))
    };
    let base_sweep = sweep(&OMEGA_BASE_GRID, Split::Base)?;
    let new_sweep = sweep(&OMEGA_NEW_GRID, Split::New)?;
    w.write("sweep_omega_base.csv", &base_sweep.to_csv())?;
    w.write("sweep_omega_new.csv", &new_sweep.to_csv())?;

    let random = random_prompt(cfg, &ds)?;
    let feature_map =
        feature_map_report(&dpc.dual.tuned.text, &dpc.dual.parallel.text, &random.text)
            .map_err(|e| e.in_stage("eval"))?;
    w.write("feature_map.csv", &feature_map.to_csv())?;

    let manifest = Manifest {
        format_version: 1,
        config_hash: cfg.hash()?,
        seeds: seeds(cfg),
        artifacts: w.entries.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join(MANIFEST_FILE), text)?;
    Ok(RunSummary {
        manifest,
        backbone_report,
        report,
        base_sweep,
        new_sweep,
        feature_map,
        audit: dpc.audit,
    })
}

/// What a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    OmegaBase,
    OmegaNew,
    TopK,
    Epochs,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::OmegaBase => "omega_base",
            SweepParam::OmegaNew => "omega_new",
            SweepParam::TopK => "k",
            SweepParam::Epochs => "epochs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "omega_base" => Ok(SweepParam::OmegaBase),
            "omega_new" => Ok(SweepParam::OmegaNew),
            "k" => Ok(SweepParam::TopK),
            "epochs" => Ok(SweepParam::Epochs),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter {s}; expected omega_base, omega_new, k or epochs"
            ))),
        }
    }

    /// `cfg` with the parameter set to `value`, validated.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = cfg.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} must be a positive integer, got {value}",
                    self.name()
                )))
            }
        };
        match self {
            SweepParam::OmegaBase => cfg.dpc.omega_base = value,
            SweepParam::OmegaNew => cfg.dpc.omega_new = value,
            SweepParam::TopK => cfg.dpc.top_k = count()?,
            SweepParam::Epochs => cfg.dpc.epochs = count()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
    pub seed: u64,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("param,value,base_acc,new_acc,hm,seed\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{}\n",
            p.param, p.value, p.base_acc, p.new_acc, p.hm, p.seed
        ));
    }
    out
}

/// The config reseeded from each root seed; `cfg` itself when `roots` is empty.
pub fn seeded_configs(cfg: &ExperimentConfig, roots: &[u64]) -> Vec<ExperimentConfig> {
    if roots.is_empty() {
        return vec![cfg.clone()];
    }
    roots
        .iter()
        .map(|&r| {
            let mut c = cfg.clone();
            c.reseed(r);
            c
        })
        .collect()
}

/// Full two-stage runs over a parameter grid. The inference weight for new
/// classes never touches training, so that sweep reuses one stage-2 run per
/// seed; the other parameters retrain stage 2 per value.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    roots: &[u64],
) -> Result<Vec<SweepPoint>> {
    for &v in values {
        param.apply(cfg, v)?;
    }
    let mut points = Vec::new();
    for seeded in seeded_configs(cfg, roots) {
        let (ds, enc) = prepare(&seeded)?;
        let (_, bb) = run_backbone(&seeded, &ds, &enc)?;
        let shared = match param {
            SweepParam::OmegaNew => Some(run_dpc(&seeded, &ds, &enc, &bb)?.0.dual),
            _ => None,
        };
        for &value in values {
            let c = param.apply(&seeded, value)?;
            let dual = match &shared {
                Some(d) => DualPromptState {
                    omega_new: c.effective_dpc().omega_new,
                    ..d.clone()
                },
                None => run_dpc(&c, &ds, &enc, &bb)?.0.dual,
            };
            let (scores, _, _) = score_prompts(
                &enc,
                &ds,
                &dual.base_prompt()?,
                &dual.new_class_prompt()?,
                c.dpc.temperature,
            )
            .map_err(|e| e.in_stage("eval"))?;
            points.push(SweepPoint {
                param: param.name().to_string(),
                value,
                base_acc: scores.base,
                new_acc: scores.new,
                hm: scores.hm,
                seed: seeded.seed,
            });
        }
    }
    Ok(points)
}

/// The component grid for each root seed.
pub fn ablate(cfg: &ExperimentConfig, roots: &[u64]) -> Result<Vec<(u64, AblationTable)>> {
    seeded_configs(cfg, roots)
        .into_iter()
        .map(|c| {
            let (ds, enc) = prepare(&c)?;
            let (bb, _) = run_backbone(&c, &ds, &enc)?;
            let table = ablation_matrix(
                &enc,
                &ds,
                &bb.prompt,
                &c.effective_dpc(),
                c.backbone.batch_size,
            )
            .map_err(|e| e.in_stage("ablate"))?;
            Ok((c.seed, table))
        })
        .collect()
}

/// One CSV over seeds, followed by the per-row means.
pub fn ablation_csv(tables: &[(u64, AblationTable)]) -> String {
    let mut out = String::from("seed,row,base_acc,new_acc,hm\n");
    for (seed, t) in tables {
        for r in &t.rows {
            out.push_str(&format!(
                "{seed},{},{:.2},{:.2},{:.2}\n",
                r.label, r.scores.base, r.scores.new, r.scores.hm
            ));
        }
    }
    if let Some((_, first)) = tables.first() {
        let n = tables.len() as f64;
        for r in &first.rows {
            let mean = |f: fn(&crate::eval::Scores) -> f64| {
                tables
                    .iter()
                    .filter_map(|(_, t)| t.row(&r.label))
                    .map(|row| f(&row.scores))
                    .sum::<f64>()
                    / n
            };
            out.push_str(&format!(
                "mean,{},{:.2},{:.2},{:.2}\n",
                r.label,
                mean(|s| s.base),
                mean(|s| s.new),
                mean(|s| s.hm)
            ));
        }
    }
    out
}
