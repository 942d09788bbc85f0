use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dpc_core::checkpoint::Checkpoint;
use dpc_core::config::ExperimentConfig;
use dpc_core::data::{DatasetFile, SyntheticDataset};
use dpc_core::gradcheck::gradcheck;
use dpc_core::pipeline::{
    ablate, ablation_csv, audit_csv, evaluate_checkpoint, loss_curve_csv, prepare, run_backbone,
    run_dpc, run_pipeline, sweep, sweep_csv, to_json_pretty, SweepParam,
};
use dpc_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "dpc",
    version,
    about = "Dual-prompt collaboration on a toy dual encoder"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset file (generator parameters and checksum).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: tune a prompt with cross-entropy on the base split.
    TrainBackbone {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the parallel prompt against hard negatives.
    TrainDpc {
        #[arg(long)]
        backbone: PathBuf,
        /// Defaults to the config embedded in the backbone checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        omega_base: Option<f64>,
    },
    /// Base/new accuracy and harmonic mean of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Full two-stage runs over one parameter; CSV to --out or stdout.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// omega_base, omega_new, k or epochs.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        /// Root seeds; defaults to the config's own.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The component ablation grid; CSV to --out or stdout.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Backbone, stage 2, evaluation and manifest in one output directory.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total epochs, split between the stages with the backbone taking
        /// the larger half.
        #[arg(long)]
        epoch_budget: Option<usize>,
        /// Output directory. Falls back to $DPC_OUT_DIR, then the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> dpc_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Aligns the config's data section with a dataset file.
fn adopt_dataset(cfg: &mut ExperimentConfig, ds: &SyntheticDataset) -> dpc_core::Result<()> {
    if ds.d_e() != cfg.encoder.d_e {
        return Err(Error::Config(format!(
            "dataset token width {} differs from encoder d_e {}",
            ds.d_e(),
            cfg.encoder.d_e
        )));
    }
    cfg.data = ds.config().clone();
    cfg.validate()
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

fn emit(out: Option<&Path>, contents: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = SyntheticDataset::generate(&cfg.data, cfg.encoder.d_e)?;
            ensure_parent(&out)?;
            DatasetFile::describe(&ds).save(&out)?;
            println!("{} classes, checksum {}", ds.n_classes(), ds.checksum());
        }
        Command::TrainBackbone {
            config,
            dataset,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let ds = DatasetFile::load(&dataset)?;
            adopt_dataset(&mut cfg, &ds)?;
            let (_, enc) = prepare(&cfg)?;
            let (run, ckpt) = run_backbone(&cfg, &ds, &enc)?;
            ensure_parent(&out)?;
            ckpt.save(&out)?;
            write(
                &sibling(&out, "loss_curve.csv"),
                &loss_curve_csv(&run.loss_curve),
            )?;
            println!(
                "backbone: {} steps, final loss {:.6}",
                run.steps,
                run.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainDpc {
            backbone,
            config,
            dataset,
            out,
            k,
            batch,
            omega_base,
        } => {
            let bb = Checkpoint::load(&backbone)?;
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => bb.config.clone(),
            };
            if let Some(k) = k {
                cfg.dpc.top_k = k;
            }
            if let Some(b) = batch {
                cfg.dpc.batch_size = b;
            }
            if let Some(w) = omega_base {
                cfg.dpc.omega_base = w;
            }
            let ds = DatasetFile::load(&dataset)?;
            adopt_dataset(&mut cfg, &ds)?;
            if cfg.encoder != bb.config.encoder {
                return Err(Error::Config(
                    "encoder section differs from the backbone checkpoint".into(),
                )
                .into());
            }
            let (_, enc) = prepare(&cfg)?;
            let (run, ckpt) = run_dpc(&cfg, &ds, &enc, &bb)?;
            ensure_parent(&out)?;
            ckpt.save(&out)?;
            write(
                &sibling(&out, "dpc_loss_curve.csv"),
                &loss_curve_csv(&run.loss_curve),
            )?;
            write(&sibling(&out, "sampler_audit.csv"), &audit_csv(&run.audit))?;
            println!(
                "dpc: {} steps, final loss {:.6}",
                run.steps,
                run.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            ckpt,
            dataset,
            report,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = DatasetFile::load(&dataset)?;
            let r = evaluate_checkpoint(&ckpt, &ds)?;
            write(&report, &to_json_pretty(&r))?;
            println!(
                "{}: base {:.2} new {:.2} hm {:.2}",
                r.stage, r.base_acc, r.new_acc, r.hm
            );
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let param = SweepParam::parse(&param)?;
            let points = sweep(&cfg, param, &values, &seeds)?;
            emit(out.as_deref(), &sweep_csv(&points))?;
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            let tables = ablate(&cfg, &seeds)?;
            emit(out.as_deref(), &ablation_csv(&tables))?;
        }
        Command::Gradcheck {
            config,
            probes,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            let r = gradcheck(&cfg, probes)?;
            for op in &r.ops {
                println!(
                    "{:<20} {} max rel err {:.3e} over {} probes",
                    op.op,
                    if op.passed { "PASS" } else { "FAIL" },
                    op.max_rel_err,
                    op.probes
                );
            }
            if let Some(p) = report {
                write(&p, &to_json_pretty(&r))?;
            }
            r.into_result()?;
        }
        Command::Run {
            config,
            epoch_budget,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(total) = epoch_budget {
                cfg = cfg.with_epoch_budget(total)?;
            }
            let dir = out
                .or_else(|| std::env::var_os("DPC_OUT_DIR").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let s = run_pipeline(&cfg, &dir)?;
            println!(
                "backbone: base {:.2} new {:.2} hm {:.2}",
                s.backbone_report.base_acc, s.backbone_report.new_acc, s.backbone_report.hm
            );
            println!(
                "dpc:      base {:.2} new {:.2} hm {:.2}",
                s.report.base_acc, s.report.new_acc, s.report.hm
            );
            println!("artifacts in {}", dir.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.downcast_ref::<Error>() else {
        return 1;
    };
    match e.root() {
        Error::DivergedLoss { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::GradCheckFailed(_) => EXIT_GRADCHECK,
        Error::Config(_)
        | Error::Format { .. }
        | Error::Io(_)
        | Error::BatchExceedsBaseClasses { .. }
        | Error::TooFewClasses(_)
        | Error::OmegaOutOfRange(_)
        | Error::NonPositiveTemperature(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
