//! The composite objective, train-time missing simulation, and the
//! optimisation loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batch::{Modality, Presence, Sample};
use crate::checkpoint;
use crate::energy::{momentum_descent, perturb, LearnedEnergy, ReconConfig};
use crate::error::{DcerError, Result};
use crate::losses::{loss_energy, loss_joint, loss_pred, loss_recon};
use crate::metrics::{MetricReport, LABEL_RANGE};
use crate::model::DcerModel;
use crate::optim::AdamW;
use crate::params::GradBuffer;
use crate::runtime::{derive_seed, pool};

const STEP_STREAM: u64 = 1;
const EPOCH_STREAM: u64 = 2;

/// Samples processed sequentially per work item; chunk gradients are merged
/// in chunk order so the sum does not depend on the worker count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_miss: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Descent steps inside the training-time reconstruction.
    pub recon_steps: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.05,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            p_miss: 0.3,
            weight_decay: 0.01,
            seed: 0,
            recon_steps: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    /// Low-learning-rate long schedule: lr 1e-5 for 40 epochs.
    pub fn slow_schedule() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DcerError::Config(m));
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) || !w.is_finite() {
                return err(format!("{name} must be a finite non-negative weight, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return err(format!("p_miss must be in [0,1), got {}", self.p_miss));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Batch-level objective terms; `total = pred + α·recon + β·energy + γ·joint`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub recon: f64,
    pub energy: f64,
    pub joint: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.pred, self.recon, self.energy, self.joint, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Drops each modality independently with probability `p_miss`; a sample
/// losing all three gets one uniformly chosen modality back.
pub fn sample_missing_mask<R: Rng + ?Sized>(batch_size: usize, p_miss: f32, rng: &mut R) -> Vec<Presence> {
    (0..batch_size)
        .map(|_| {
            let mut flags = [true; 3];
            for f in &mut flags {
                *f = rng.gen::<f32>() >= p_miss;
            }
            if flags.iter().all(|f| !f) {
                flags[rng.gen_range(0..3)] = true;
            }
            Presence(flags)
        })
        .collect()
}

/// Seeded form of [`sample_missing_mask`].
pub fn sample_missing_mask_seeded(batch_size: usize, p_miss: f32, seed: u64) -> Vec<Presence> {
    sample_missing_mask(batch_size, p_miss, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-sample weights that turn per-sample terms into batch means.
#[derive(Debug, Clone, Copy)]
struct Normaliser {
    batch: f32,
    pairs: f32,
    joint: f32,
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleTerms {
    pred: f64,
    recon: f64,
    energy: f64,
    joint: f64,
}

struct SampleOutput {
    terms: SampleTerms,
    prediction: f32,
}

fn weighted(g: &mut Graph, acc: Option<Var>, term: Var, w: f32) -> Result<Option<Var>> {
    if w == 0.0 {
        return Ok(acc);
    }
    let t = g.scale(term, w);
    Ok(Some(match acc {
        Some(a) => g.add(a, t)?,
        None => t,
    }))
}

fn sample_pass(
    model: &DcerModel,
    sample: &Sample,
    sim: Presence,
    cfg: &TrainConfig,
    recon_cfg: &ReconConfig,
    norm: Normaliser,
    seed: u64,
    grads: &mut GradBuffer,
) -> Result<SampleOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::with_params(&model.params, true);
    let enc = model.encode_present(&mut g, sample, Presence::ALL)?;
    let z_full = model.fuse(&mut g, &enc)?;
    let y_hat = model.fusion.predict(&mut g, z_full)?;
    let prediction = g.scalar(y_hat);
    let pred = loss_pred(&mut g, y_hat, &[sample.label])?;
    let mut terms = SampleTerms {
        pred: g.scalar(pred) as f64,
        ..SampleTerms::default()
    };
    let mut total = weighted(&mut g, None, pred, 1.0 / norm.batch)?;

    let missing = sim.missing();
    if !missing.is_empty() {
        let mut partial = enc;
        for m in &missing {
            partial[m.index()] = None;
        }
        let observed: Vec<Var> = partial.iter().flatten().copied().collect();
        let z_partial = model.fuse(&mut g, &partial)?;
        let z_value = g.tensor(z_partial);
        let z_const = g.detach(z_partial);
        let mut completed = partial;
        let mut pairs = Vec::new();
        let mut energies = Vec::new();
        for &m in &missing {
            let mu = model.init[m.index()].forward(&mut g, z_partial, &observed)?;
            let mu_value = g.tensor(mu);
            let mut h0 = mu_value.clone();
            perturb(&mut h0, recon_cfg.sigma, &mut rng);
            let net = &model.energy[m.index()];
            let landscape = LearnedEnergy {
                net,
                params: &model.params,
                z: &z_value,
            };
            let r = momentum_descent(&landscape, h0, recon_cfg.steps, recon_cfg.eta, recon_cfg.rho)?;
            // straight-through: the value is h^T, the gradient reaches μ only
            let shift: Vec<f32> = r.h.data().iter().zip(mu_value.data()).map(|(a, b)| a - b).collect();
            let shift = g.constant_from(mu_value.shape().to_vec(), shift)?;
            let h_hat = g.add(mu, shift)?;
            let target = g.detach(enc[m.index()].expect("all modalities encoded"));
            pairs.push((target, h_hat));
            let h_final = g.constant(&r.h);
            energies.push(net.energy(&mut g, h_final, z_const)?);
            completed[m.index()] = Some(h_hat);
        }
        let recon = loss_recon(&mut g, &pairs)?;
        let energy = loss_energy(&mut g, &energies)?;
        let z_recon = model.fuse(&mut g, &completed)?;
        let z_target = g.detach(z_full);
        let joint = loss_joint(&mut g, z_target, z_recon)?;
        let n = missing.len() as f64;
        terms.recon = g.scalar(recon) as f64 * n;
        terms.energy = g.scalar(energy) as f64 * n;
        terms.joint = g.scalar(joint) as f64;
        let share = missing.len() as f32 / norm.pairs;
        total = weighted(&mut g, total, recon, cfg.alpha * share)?;
        total = weighted(&mut g, total, energy, cfg.beta * share)?;
        total = weighted(&mut g, total, joint, cfg.gamma / norm.joint)?;
    }
    let total = total.expect("prediction term always present");
    g.backward(total)?.accumulate_into(grads);
    Ok(SampleOutput { terms, prediction })
}

/// Result of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Predictions made before the update, in batch order.
    pub predictions: Vec<f32>,
    pub masks: Vec<Presence>,
}

/// Forward, backward and update on one batch. The step's randomness is a
/// function of `(cfg.seed, optimiser step)` only. The inner reconstruction
/// uses `recon` with its step count replaced by `cfg.recon_steps`.
pub fn train_step(
    model: &mut DcerModel,
    opt: &mut AdamW,
    batch: &[&Sample],
    cfg: &TrainConfig,
    recon: &ReconConfig,
) -> Result<StepOutput> {
    cfg.validate()?;
    recon.validate()?;
    let recon_cfg = ReconConfig {
        steps: cfg.recon_steps,
        ..*recon
    };
    if batch.is_empty() {
        return Err(DcerError::Input("empty batch".into()));
    }
    let step = opt.step + 1;
    let step_seed = derive_seed(cfg.seed, &[STEP_STREAM, step]);
    let masks = sample_missing_mask_seeded(batch.len(), cfg.p_miss, step_seed);
    let pairs: usize = masks.iter().map(|p| 3 - p.count()).sum();
    let joint = masks.iter().filter(|p| !p.is_complete()).count();
    let norm = Normaliser {
        batch: batch.len() as f32,
        pairs: pairs.max(1) as f32,
        joint: joint.max(1) as f32,
    };

    let model_ref: &DcerModel = model;
    let chunks: Vec<Result<(GradBuffer, Vec<SampleOutput>)>> = pool().install(|| {
        batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut grads = GradBuffer::new(&model_ref.params);
                let mut outs = Vec::with_capacity(chunk.len());
                for (j, sample) in chunk.iter().enumerate() {
                    let i = c * CHUNK + j;
                    let seed = derive_seed(step_seed, &[i as u64]);
                    outs.push(sample_pass(model_ref, sample, masks[i], cfg, &recon_cfg, norm, seed, &mut grads)?);
                }
                Ok((grads, outs))
            })
            .collect()
    });

    let mut grads = GradBuffer::new(&model.params);
    let mut sums = SampleTerms::default();
    let mut predictions = Vec::with_capacity(batch.len());
    for chunk in chunks {
        let (g, outs) = chunk?;
        grads.merge(&g);
        for o in outs {
            sums.pred += o.terms.pred;
            sums.recon += o.terms.recon;
            sums.energy += o.terms.energy;
            sums.joint += o.terms.joint;
            predictions.push(o.prediction);
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let mut losses = LossBreakdown {
        pred: mean(sums.pred, batch.len()),
        recon: mean(sums.recon, pairs),
        energy: mean(sums.energy, pairs),
        joint: mean(sums.joint, joint),
        total: 0.0,
    };
    losses.total = losses.pred
        + cfg.alpha as f64 * losses.recon
        + cfg.beta as f64 * losses.energy
        + cfg.gamma as f64 * losses.joint;
    if !losses.is_finite() || !grads.global_norm().is_finite() {
        return Err(DcerError::Divergence {
            step: step as usize,
            what: format!("non-finite loss {losses:?}"),
        });
    }
    opt.update(&mut model.params, &grads)?;
    Ok(StepOutput {
        losses,
        predictions,
        masks,
    })
}

/// Predictions with every modality present, parameters frozen.
pub fn predict_complete(model: &DcerModel, samples: &[Sample]) -> Result<Vec<f32>> {
    pool().install(|| {
        samples
            .par_iter()
            .map(|s| {
                let enc = model.encode_values(s, Presence::ALL)?;
                Ok(model.fuse_values(&[enc[0].as_ref(), enc[1].as_ref(), enc[2].as_ref()])?.1)
            })
            .collect()
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub metrics: MetricReport,
    /// Absent for validation rows, which are scored without simulation.
    pub losses: Option<LossBreakdown>,
}

pub const LOG_HEADER: &str = "epoch,split,mae,corr,acc7,acc2,f1,loss_pred,loss_recon,loss_energy,loss_joint";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        let losses = match &self.losses {
            Some(l) => format!("{},{},{},{}", l.pred, l.recon, l.energy, l.joint),
            None => ",,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.split, m.mae, m.pearson_corr, m.acc7, m.acc2, m.f1, losses
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

/// Model plus optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DcerModel,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub recon: ReconConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: DcerModel, config: TrainConfig, recon: ReconConfig) -> Result<Self> {
        config.validate()?;
        recon.validate()?;
        let opt = AdamW::new(&model.params, config.lr, config.weight_decay);
        Ok(Trainer {
            model,
            opt,
            config,
            recon,
            epoch: 0,
        })
    }

    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepOutput> {
        train_step(&mut self.model, &mut self.opt, batch, &self.config, &self.recon)
    }

    /// Runs one epoch over `train` in a seed-determined order.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[EPOCH_STREAM, self.epoch as u64]));
        order.shuffle(&mut rng);
        let mut weighted = LossBreakdown::default();
        let mut preds = Vec::with_capacity(train.len());
        let mut labels = Vec::with_capacity(train.len());
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let out = self.step(&batch)?;
            let w = batch.len() as f64 / train.len() as f64;
            weighted.pred += w * out.losses.pred;
            weighted.recon += w * out.losses.recon;
            weighted.energy += w * out.losses.energy;
            weighted.joint += w * out.losses.joint;
            weighted.total += w * out.losses.total;
            preds.extend(out.predictions);
            labels.extend(batch.iter().map(|s| s.label));
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            split: "train".into(),
            metrics: MetricReport::compute(&preds, &labels, LABEL_RANGE),
            losses: Some(weighted),
        })
    }

    /// Trains with early stopping on validation MAE, restoring the best
    /// parameters at the end. With `out_dir`, writes `metrics.csv`,
    /// `last.dctc` every epoch and `best.dctc` on improvement.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<TrainReport> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| DcerError::io(dir, e))?;
                let path = dir.join("metrics.csv");
                let mut f = fs::File::create(&path).map_err(|e| DcerError::io(&path, e))?;
                writeln!(f, "{LOG_HEADER}").map_err(|e| DcerError::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        let mut history = Vec::new();
        let mut best = (f64::INFINITY, 0usize, self.model.params.clone());
        let mut stale = 0;
        let mut stopped_early = false;
        while self.epoch < self.config.epochs {
            let train_row = self.run_epoch(train)?;
            let val_metrics = if val.is_empty() {
                train_row.metrics.clone()
            } else {
                let preds = predict_complete(&self.model, val)?;
                let labels: Vec<f32> = val.iter().map(|s| s.label).collect();
                MetricReport::compute(&preds, &labels, LABEL_RANGE)
            };
            let val_row = EpochLog {
                epoch: self.epoch,
                split: "val".into(),
                metrics: val_metrics,
                losses: None,
            };
            if let Some((path, f)) = &mut log {
                for row in [&train_row, &val_row] {
                    writeln!(f, "{}", row.csv_row()).map_err(|e| DcerError::io(&*path, e))?;
                }
                f.flush().map_err(|e| DcerError::io(&*path, e))?;
            }
            let improved = val_row.metrics.mae < best.0;
            if let Some(dir) = out_dir {
                checkpoint::save(&dir.join("last.dctc"), self)?;
                if improved {
                    checkpoint::save(&dir.join("best.dctc"), self)?;
                }
            }
            if improved {
                best = (val_row.metrics.mae, self.epoch, self.model.params.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            history.push(train_row);
            history.push(val_row);
            if stale >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        if best.1 > 0 {
            self.model.params = best.2;
        }
        Ok(TrainReport {
            history,
            best_epoch: best.1,
            best_val_mae: best.0,
            stopped_early,
        })
    }
}

/// Modalities simulated missing across a set of masks, for reporting.
pub fn missing_counts(masks: &[Presence]) -> [usize; 3] {
    let mut out = [0; 3];
    for p in masks {
        for m in Modality::ALL {
            if !p.has(m) {
                out[m.index()] += 1;
            }
        }
    }
    out
}
