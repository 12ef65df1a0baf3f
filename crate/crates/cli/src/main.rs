//! `dcer`: data generation, training, evaluation sweeps, reconstruction
//! dumps, uncertainty reports and diagnostics.
//!
//! Exit codes: 0 success, 1 invalid input or configuration (including usage
//! errors), 2 numeric divergence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use dcer_core::checkpoint;
use dcer_core::container::{write_container, TensorContainer};
use dcer_core::dataset::{load_split, load_splits, read_spec, write_dataset};
use dcer_core::eval::{
    apply_missing, mask_variance_experiment, band_structured_signal, mean_over, report, sweep, uncertainty_report,
    sample_rng, Evaluator, SweepGrid, SWEEP_HEADER,
};
use dcer_core::gradcheck::GradCheckConfig;
use dcer_core::gradsuite::run_suite;
use dcer_core::metrics::LABEL_RANGE;
use dcer_core::synthetic::generate;
use dcer_core::train::Trainer;
use dcer_core::{DcerError, DcerModel, MaskingProtocol, MissingMode, Presence, RunConfig, Sample};

#[derive(Debug, Parser, Serialize)]
#[command(name = "dcer", version, about = "Frequency-compressed multimodal fusion with energy-based reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize, Clone)]
struct Common {
    /// JSON run configuration with `model`, `train`, `recon`, `data` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.lr=1e-4`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory for artifacts and the effective-config echo.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write a synthetic dataset (manifests plus tensor containers).
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; logs per-epoch metrics and writes checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated in memory from `data` config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint under one missing-modality setting.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0.0)]
        mr: f32,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long, default_value = "zero")]
        protocol: String,
        #[arg(long, default_value = "a+v+t")]
        modalities: String,
        #[arg(long, default_value = "reconstruct")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cartesian evaluation over missing rates, step counts, protocols,
    /// modality subsets and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9")]
        mrs: Vec<f32>,
        #[arg(long = "Ts", value_delimiter = ',', default_value = "0,3,5")]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "zero,noise")]
        protocols: Vec<String>,
        /// Modality subsets such as `a+v+t,a+t`.
        #[arg(long, value_delimiter = ',', default_value = "a+v+t")]
        modalities: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "reconstruct")]
        mode: String,
    },
    /// Dump per-sample reconstructions and energy trajectories as JSON lines,
    /// optionally with the reconstructed encodings in a tensor container.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0.5)]
        mr: f32,
        #[arg(long = "T")]
        steps: Option<usize>,
        #[arg(long, default_value = "zero")]
        protocol: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the reconstructed encodings.
        #[arg(long)]
        with_encodings: bool,
    },
    /// Energy-error correlation and selective-prediction report.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0.5)]
        mr: f32,
        #[arg(long, default_value = "zero")]
        protocol: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Variance of a band statistic under time-step versus DCT-coefficient masking.
    MaskVariance {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        r: f32,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the registered finite-difference gradient checks.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1e-2)]
        tol: f32,
    },
}

#[derive(Debug, Args, Serialize, Clone)]
struct Target {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<DcerError>(), Some(DcerError::Divergence { .. })));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}

fn out_dir(common: &Common, default: &str) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes the resolved configuration and the exact invocation, enough to
/// rerun the command.
fn echo(dir: &Path, cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    let doc = json!({
        "argv": std::env::args().collect::<Vec<_>>(),
        "command": cli.command,
        "config": cfg,
    });
    let path = dir.join("effective_config.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn resolve(common: &Common, extra: &[String]) -> anyhow::Result<RunConfig> {
    let mut overrides = extra.to_vec();
    overrides.extend(common.overrides.iter().cloned());
    Ok(RunConfig::resolve(common.config.as_deref(), &overrides)?)
}

/// Model and configuration from a checkpoint; the dataset spec supplies the
/// `data` section when present. `--config` is not consulted.
fn load_target(target: &Target, common: &Common, extra: &[String]) -> anyhow::Result<(DcerModel, RunConfig, Vec<Sample>)> {
    if common.config.is_some() {
        bail!(DcerError::Config("--config does not apply to checkpoint commands; use --set".into()));
    }
    let side = checkpoint::read_sidecar(&target.checkpoint)?;
    let base = RunConfig {
        model: side.model,
        train: side.train,
        recon: side.recon,
        data: read_spec(&target.data).unwrap_or_default(),
    };
    let mut overrides = extra.to_vec();
    overrides.extend(common.overrides.iter().cloned());
    let cfg = base.with_overrides(&overrides)?;
    cfg.model.validate()?;
    cfg.recon.validate()?;
    let model = checkpoint::load_model(&target.checkpoint)?;
    let samples = load_split(&target.data, &target.split, LABEL_RANGE)?;
    if samples.is_empty() {
        bail!(DcerError::Input(format!("split {} is empty", target.split)));
    }
    Ok((model, cfg, samples))
}

fn steps_override(steps: Option<usize>) -> Vec<String> {
    steps.map(|t| vec![format!("recon.steps={t}")]).unwrap_or_default()
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::GenerateData { common, n, seed } => {
            let mut extra = Vec::new();
            if let Some(n) = n {
                extra.push(format!("data.n={n}"));
            }
            if let Some(s) = seed {
                extra.push(format!("data.seed={s}"));
            }
            let cfg = resolve(common, &extra)?;
            let dir = out_dir(common, "data")?;
            echo(&dir, cli, &cfg)?;
            let splits = write_dataset(&dir, &cfg.data)?;
            let summary = json!({
                "train": splits.train.len(),
                "val": splits.val.len(),
                "test": splits.test.len(),
                "dir": dir,
            });
            write_json(&dir.join("report.json"), &summary)?;
            println!("{summary}");
        }
        Command::Train {
            common,
            data,
            epochs,
            seed,
        } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            let mut cfg = resolve(common, &extra)?;
            let splits = match data {
                Some(dir) => {
                    if let Ok(spec) = read_spec(dir) {
                        cfg.data = spec;
                    }
                    load_splits(dir, LABEL_RANGE)?
                }
                None => generate(&cfg.data)?,
            };
            let dir = out_dir(common, "train")?;
            echo(&dir, cli, &cfg)?;
            let started = Instant::now();
            let model = DcerModel::new(cfg.model.clone())?;
            let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.recon)?;
            let report = trainer.fit(&splits.train, &splits.val, Some(&dir))?;
            for row in &report.history {
                eprintln!("{}", row.csv_row());
            }
            let ev = Evaluator::new(&trainer.model, &splits.test)?;
            let clean = apply_missing(&splits.test, 0.0, MaskingProtocol::Zero, Presence::ALL, cfg.model.vocab, 0)?;
            let test = report_of(&ev, &clean, Presence::ALL, MissingMode::Reconstruct, &cfg, 0)?;
            let summary = json!({
                "best_epoch": report.best_epoch,
                "best_val_mae": report.best_val_mae,
                "stopped_early": report.stopped_early,
                "epochs_run": trainer.epoch,
                "seconds": started.elapsed().as_secs_f64(),
                "test": test,
                "checkpoint": dir.join("best.dctc"),
            });
            write_json(&dir.join("report.json"), &summary)?;
            println!("{summary}");
        }
        Command::Eval {
            common,
            target,
            mr,
            steps,
            protocol,
            modalities,
            mode,
            seed,
        } => {
            let (model, cfg, samples) = load_target(target, common, &steps_override(*steps))?;
            let dir = out_dir(common, "eval")?;
            echo(&dir, cli, &cfg)?;
            let protocol = MaskingProtocol::parse(protocol)?;
            let subset = Presence::parse(modalities)?;
            let mode = MissingMode::parse(mode)?;
            let ev = Evaluator::new(&model, &samples)?;
            let masked = apply_missing(&samples, *mr, protocol, subset, model.config.vocab, *seed)?;
            let metrics = report_of(&ev, &masked, subset, mode, &cfg, *seed)?;
            write_json(&dir.join("report.json"), &metrics)?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Sweep {
            common,
            target,
            mrs,
            steps,
            protocols,
            modalities,
            seeds,
            mode,
        } => {
            let (model, cfg, samples) = load_target(target, common, &[])?;
            let dir = out_dir(common, "sweep")?;
            echo(&dir, cli, &cfg)?;
            let grid = SweepGrid {
                mrs: mrs.clone(),
                steps: steps.clone(),
                protocols: protocols.iter().map(|p| MaskingProtocol::parse(p)).collect::<Result<_, _>>()?,
                subsets: modalities.iter().map(|m| Presence::parse(m)).collect::<Result<_, _>>()?,
                seeds: seeds.clone(),
                mode: MissingMode::parse(mode)?,
            };
            let ev = Evaluator::new(&model, &samples)?;
            let rows = sweep(&ev, &grid, &cfg.recon)?;
            let path = dir.join("sweep.csv");
            let mut f = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            writeln!(f, "{SWEEP_HEADER}")?;
            for r in &rows {
                writeln!(f, "{}", r.csv_row())?;
            }
            f.flush()?;
            let path = dir.join("sweep_mean.csv");
            let mut f = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            writeln!(f, "mr,T,protocol,modalities,seeds,mae,corr,acc7,acc5,acc3,acc2,f1")?;
            let mut cells: Vec<(f32, usize, MaskingProtocol, String)> = Vec::new();
            for r in &rows {
                let key = (r.mr, r.steps, r.protocol, r.modalities.clone());
                if !cells.contains(&key) {
                    cells.push(key);
                }
            }
            for (mr, t, p, m) in cells {
                let sel = |r: &dcer_core::eval::SweepRow| r.mr == mr && r.steps == t && r.protocol == p && r.modalities == m;
                let line = format!(
                    "{mr},{t},{},{m},{},{},{},{},{},{},{},{}",
                    p.name(),
                    rows.iter().filter(|r| sel(r)).count(),
                    mean_over(&rows, sel, |x| x.mae),
                    mean_over(&rows, sel, |x| x.pearson_corr),
                    mean_over(&rows, sel, |x| x.acc7),
                    mean_over(&rows, sel, |x| x.acc5),
                    mean_over(&rows, sel, |x| x.acc3),
                    mean_over(&rows, sel, |x| x.acc2),
                    mean_over(&rows, sel, |x| x.f1),
                );
                println!("{line}");
                writeln!(f, "{line}")?;
            }
            f.flush()?;
        }
        Command::Reconstruct {
            common,
            target,
            mr,
            steps,
            protocol,
            seed,
            with_encodings,
        } => {
            let (model, cfg, samples) = load_target(target, common, &steps_override(*steps))?;
            let dir = out_dir(common, "reconstruct")?;
            echo(&dir, cli, &cfg)?;
            let protocol = MaskingProtocol::parse(protocol)?;
            let ev = Evaluator::new(&model, &samples)?;
            let masked = apply_missing(&samples, *mr, protocol, Presence::ALL, model.config.vocab, *seed)?;
            let path = dir.join("reconstructions.jsonl");
            let mut f = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            let mut tensors = TensorContainer::new();
            for (i, s) in samples.iter().enumerate() {
                let presence = masked.presence[i];
                let mut rng = sample_rng(*seed, i);
                let inf = model.infer(ev.encodings(i), presence, Presence::ALL, MissingMode::Reconstruct, &cfg.recon, &mut rng)?;
                let mut recs = Vec::new();
                for (m, r) in &inf.reconstructions {
                    let truth = ev.encodings(i)[m.index()].as_ref().expect("clean encoding");
                    let mse = r.h.data().iter().zip(truth.data()).map(|(a, b)| ((a - b) * (a - b)) as f64).sum::<f64>()
                        / r.h.numel() as f64;
                    recs.push(json!({
                        "modality": m.name(),
                        "final_energy": r.final_energy,
                        "trajectory": r.trajectory,
                        "mse_to_clean": mse,
                    }));
                    if *with_encodings {
                        tensors.insert(format!("{}/{}", s.id, m.name()), r.h.clone())?;
                    }
                }
                let missing: Vec<&str> = presence.missing().iter().map(|m| m.name()).collect();
                let line = json!({
                    "id": s.id,
                    "label": s.label,
                    "missing_modalities": missing,
                    "final_energy": inf.uncertainty,
                    "prediction": inf.prediction,
                    "reconstructions": recs,
                });
                writeln!(f, "{line}")?;
            }
            f.flush()?;
            println!("{}", path.display());
            if *with_encodings {
                let tpath = dir.join("reconstructions.dctc");
                write_container(&tpath, &tensors)?;
                println!("{}", tpath.display());
            }
        }
        Command::Uncertainty {
            common,
            target,
            mr,
            protocol,
            seeds,
        } => {
            let (model, cfg, samples) = load_target(target, common, &[])?;
            let dir = out_dir(common, "uncertainty")?;
            echo(&dir, cli, &cfg)?;
            let protocol = MaskingProtocol::parse(protocol)?;
            let ev = Evaluator::new(&model, &samples)?;
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let masked = apply_missing(&samples, *mr, protocol, Presence::ALL, model.config.vocab, seed)?;
                let out = ev.evaluate(&masked, Presence::ALL, MissingMode::Reconstruct, &cfg.recon, seed)?;
                let rep = uncertainty_report(&out)?;
                per_seed.push(json!({"seed": seed, "report": rep}));
            }
            let doc = json!({ "mr": mr, "protocol": protocol, "per_seed": per_seed });
            write_json(&dir.join("report.json"), &doc)?;
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::MaskVariance {
            common,
            r,
            trials,
            len,
            seed,
        } => {
            let cfg = resolve(common, &[])?;
            let dir = out_dir(common, "mask-variance")?;
            echo(&dir, cli, &cfg)?;
            let signal = band_structured_signal(*len, *seed);
            let res = mask_variance_experiment(&signal, *r, *trials, *seed)?;
            write_json(&dir.join("report.json"), &res)?;
            println!("{}", serde_json::to_string(&res)?);
        }
        Command::GradCheck { common, seeds, tol } => {
            let cfg = resolve(common, &[])?;
            let dir = out_dir(common, "grad-check")?;
            echo(&dir, cli, &cfg)?;
            let gc = GradCheckConfig {
                tol: *tol,
                ..GradCheckConfig::default()
            };
            let path = dir.join("grad_check.csv");
            let mut f = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            writeln!(f, "seed,check,rel_err,worst_index,probed,passed")?;
            let (mut total, mut failed) = (0usize, 0usize);
            for &seed in seeds {
                for c in run_suite(seed, gc)? {
                    total += 1;
                    let ok = c.report.passed();
                    if !ok {
                        failed += 1;
                        eprintln!("FAIL seed {seed} {}: rel err {:.3e}", c.name, c.report.rel_err);
                    }
                    writeln!(
                        f,
                        "{seed},{},{},{},{},{ok}",
                        c.name, c.report.rel_err, c.report.worst_index, c.report.probed
                    )?;
                }
            }
            f.flush()?;
            println!("{} of {total} gradient checks passed", total - failed);
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report_of(
    ev: &Evaluator,
    masked: &dcer_core::ModalityBatch,
    subset: Presence,
    mode: MissingMode,
    cfg: &RunConfig,
    seed: u64,
) -> anyhow::Result<dcer_core::MetricReport> {
    let out = ev.evaluate(masked, subset, mode, &cfg.recon, seed)?;
    Ok(report(&out))
}
