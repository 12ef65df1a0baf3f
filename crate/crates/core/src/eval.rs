//! Missing-modality simulation, sweeps, energy-based uncertainty reports, and
//! the time- versus frequency-masking variance experiment.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Modality, ModalityBatch, Presence, Sample, TextInput};
use crate::dct::dct_matrix;
use crate::energy::ReconConfig;
use crate::error::{DcerError, Result};
use crate::metrics::{acc2_f1, correlation_p_value, pearson, spearman, MetricReport, LABEL_RANGE};
use crate::model::{DcerModel, Encodings, MissingMode};
use crate::runtime::{derive_seed, pool};
use crate::tensor::Tensor;

const MASK_STREAM: u64 = 11;
const FILL_STREAM: u64 = 12;
const RECON_STREAM: u64 = 13;

/// Reconstruction rng of sample `i`; independent of thread scheduling.
pub fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[RECON_STREAM, i as u64]))
}

/// How dropped raw features are replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingProtocol {
    Zero,
    /// Unit-variance Gaussian noise.
    Noise,
}

impl MaskingProtocol {
    pub const NOISE_STD: f32 = 1.0;

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero" => Ok(MaskingProtocol::Zero),
            "noise" | "gaussian" | "gaussian-noise" => Ok(MaskingProtocol::Noise),
            other => Err(DcerError::Input(format!("unknown masking protocol {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskingProtocol::Zero => "zero",
            MaskingProtocol::Noise => "noise",
        }
    }
}

/// Drops each modality of `active` independently with probability `mr`;
/// modalities outside `active` are always absent. If every active modality
/// drops, one of them is restored uniformly at random.
pub fn draw_presence<R: Rng + ?Sized>(mr: f32, active: Presence, rng: &mut R) -> Presence {
    let mut flags = [false; 3];
    for m in Modality::ALL {
        // one draw per modality regardless of `active`, so subsets share
        // the same underlying pattern
        let keep = rng.gen::<f32>() >= mr;
        flags[m.index()] = active.has(m) && keep;
    }
    if flags.iter().all(|f| !f) {
        let choices = active.present();
        flags[choices[rng.gen_range(0..choices.len())].index()] = true;
    }
    Presence(flags)
}

fn replace_features<R: Rng + ?Sized>(sample: &mut Sample, m: Modality, protocol: MaskingProtocol, vocab: usize, rng: &mut R) {
    let noise = Normal::new(0.0, MaskingProtocol::NOISE_STD).expect("std");
    let mut fill = |t: &mut Tensor| match protocol {
        MaskingProtocol::Zero => t.data_mut().iter_mut().for_each(|v| *v = 0.0),
        MaskingProtocol::Noise => t.data_mut().iter_mut().for_each(|v| *v = noise.sample(rng)),
    };
    match m {
        Modality::Audio => fill(&mut sample.audio),
        Modality::Video => fill(&mut sample.video),
        Modality::Text => match &mut sample.text {
            TextInput::Embeddings(e) => fill(e),
            // token ids have no zero vector: the zero protocol writes id 0,
            // the noise protocol draws ids uniformly
            TextInput::Tokens(ids) => match protocol {
                MaskingProtocol::Zero => ids.iter_mut().for_each(|i| *i = 0),
                MaskingProtocol::Noise => ids.iter_mut().for_each(|i| *i = rng.gen_range(0..vocab)),
            },
        },
    }
}

/// Applies missing-modality simulation to raw inputs. The drop pattern
/// depends on `(seed, mr, active)` only, so protocols and step counts are
/// compared on identical patterns.
pub fn apply_missing(
    samples: &[Sample],
    mr: f32,
    protocol: MaskingProtocol,
    active: Presence,
    vocab: usize,
    seed: u64,
) -> Result<ModalityBatch> {
    if !(0.0..=1.0).contains(&mr) {
        return Err(DcerError::Config(format!("missing rate must be in [0,1], got {mr}")));
    }
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[MASK_STREAM, mr.to_bits() as u64]));
    let mut fill_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[FILL_STREAM, mr.to_bits() as u64]));
    let mut out = Vec::with_capacity(samples.len());
    let mut presence = Vec::with_capacity(samples.len());
    for s in samples {
        let p = draw_presence(mr, active, &mut mask_rng);
        let mut masked = s.clone();
        for m in p.missing() {
            replace_features(&mut masked, m, protocol, vocab, &mut fill_rng);
        }
        out.push(masked);
        presence.push(p);
    }
    Ok(ModalityBatch {
        samples: out,
        presence,
    })
}

/// Per-sample inference outcome.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub prediction: f32,
    pub label: f32,
    pub presence: Presence,
    pub uncertainty: Option<f32>,
}

/// Caches clean encodings so repeated evaluations only pay for fusion and
/// reconstruction.
pub struct Evaluator<'m> {
    pub model: &'m DcerModel,
    pub samples: &'m [Sample],
    cache: Vec<Encodings>,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m DcerModel, samples: &'m [Sample]) -> Result<Self> {
        let cache = pool().install(|| {
            samples
                .par_iter()
                .map(|s| model.encode_values(s, Presence::ALL))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Evaluator { model, samples, cache })
    }

    pub fn encodings(&self, i: usize) -> &Encodings {
        &self.cache[i]
    }

    /// Evaluates a masked copy of `self.samples`. Present modalities are
    /// untouched by masking, so their cached encodings are reused; dropped
    /// ones are reconstructed or omitted per `mode`, or, for
    /// [`MissingMode::Blind`], encoded from the masked raw features.
    pub fn evaluate(
        &self,
        masked: &ModalityBatch,
        active: Presence,
        mode: MissingMode,
        recon: &ReconConfig,
        seed: u64,
    ) -> Result<Vec<Outcome>> {
        if masked.len() != self.samples.len() {
            return Err(DcerError::Input("masked batch does not match evaluator samples".into()));
        }
        pool().install(|| {
            (0..masked.len())
                .into_par_iter()
                .map(|i| {
                    let presence = masked.presence[i];
                    let sample = &masked.samples[i];
                    let mut rng = sample_rng(seed, i);
                    let inf = match mode {
                        MissingMode::Blind => {
                            let mut enc: Encodings = [None, None, None];
                            for m in active.present() {
                                enc[m.index()] = Some(if presence.has(m) {
                                    self.cache[i][m.index()].clone().expect("cached")
                                } else {
                                    self.model.encode_values(sample, Presence::only(m))?[m.index()]
                                        .take()
                                        .expect("encoded")
                                });
                            }
                            self.model.infer(&enc, active, active, mode, recon, &mut rng)?
                        }
                        _ => {
                            debug_assert!(presence.present().iter().all(|&m| same_input(
                                sample,
                                &self.samples[i],
                                m
                            )));
                            self.model.infer(&self.cache[i], presence, active, mode, recon, &mut rng)?
                        }
                    };
                    Ok(Outcome {
                        prediction: inf.prediction,
                        label: sample.label,
                        presence,
                        uncertainty: inf.uncertainty,
                    })
                })
                .collect()
        })
    }
}

fn same_input(a: &Sample, b: &Sample, m: Modality) -> bool {
    match m {
        Modality::Audio => a.audio == b.audio,
        Modality::Video => a.video == b.video,
        Modality::Text => a.text == b.text,
    }
}

pub fn report(outcomes: &[Outcome]) -> MetricReport {
    let pred: Vec<f32> = outcomes.iter().map(|o| o.prediction).collect();
    let y: Vec<f32> = outcomes.iter().map(|o| o.label).collect();
    MetricReport::compute(&pred, &y, LABEL_RANGE)
}

/// The cartesian grid evaluated by [`sweep`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub mrs: Vec<f32>,
    pub steps: Vec<usize>,
    pub protocols: Vec<MaskingProtocol>,
    pub subsets: Vec<Presence>,
    pub seeds: Vec<u64>,
    pub mode: MissingMode,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            mrs: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            steps: vec![0, 3, 5],
            protocols: vec![MaskingProtocol::Zero, MaskingProtocol::Noise],
            subsets: vec![Presence::ALL],
            seeds: (0..5).collect(),
            mode: MissingMode::Reconstruct,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub mr: f32,
    pub steps: usize,
    pub protocol: MaskingProtocol,
    pub modalities: String,
    pub seed: u64,
    pub metrics: MetricReport,
}

pub const SWEEP_HEADER: &str = "mr,T,protocol,modalities,seed,n,mae,corr,acc7,acc5,acc3,acc2,f1";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mr,
            self.steps,
            self.protocol.name(),
            self.modalities,
            self.seed,
            m.n,
            m.mae,
            m.pearson_corr,
            m.acc7,
            m.acc5,
            m.acc3,
            m.acc2,
            m.f1
        )
    }
}

/// Evaluates every `(mr, T, protocol, subset, seed)` cell.
pub fn sweep(ev: &Evaluator, grid: &SweepGrid, recon: &ReconConfig) -> Result<Vec<SweepRow>> {
    let vocab = ev.model.config.vocab;
    let mut rows = Vec::new();
    for &subset in &grid.subsets {
        for &mr in &grid.mrs {
            for &protocol in &grid.protocols {
                for &seed in &grid.seeds {
                    let masked = apply_missing(ev.samples, mr, protocol, subset, vocab, seed)?;
                    for &steps in &grid.steps {
                        let cfg = ReconConfig { steps, ..*recon };
                        let out = ev.evaluate(&masked, subset, grid.mode, &cfg, seed)?;
                        rows.push(SweepRow {
                            mr,
                            steps,
                            protocol,
                            modalities: subset.label(),
                            seed,
                            metrics: report(&out),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Mean of a metric over rows matching a predicate.
pub fn mean_over<F, G>(rows: &[SweepRow], select: F, metric: G) -> f64
where
    F: Fn(&SweepRow) -> bool,
    G: Fn(&MetricReport) -> f64,
{
    let picked: Vec<f64> = rows.iter().filter(|r| select(r)).map(|r| metric(&r.metrics)).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Samples with at least one missing modality.
    pub n: usize,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub pearson_rho: f64,
    pub acc_high_energy_quintile: f64,
    pub acc_low_energy_quintile: f64,
    pub acc_all: f64,
    pub acc_after_reject_20pct: f64,
    pub acc_delta_at_reject_20pct: f64,
}

/// Acc-2 after discarding the `reject` fraction with the highest energy.
pub fn selective_acc2(pred: &[f32], y: &[f32], energy: &[f32], reject: f32) -> f64 {
    let order = energy_order(energy);
    let drop = (reject * pred.len() as f32).round() as usize;
    let keep = &order[drop.min(order.len())..];
    let p: Vec<f32> = keep.iter().map(|&i| pred[i]).collect();
    let t: Vec<f32> = keep.iter().map(|&i| y[i]).collect();
    acc2_f1(&p, &t).0
}

/// Indices sorted by energy, highest first; ties keep index order.
fn energy_order(energy: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..energy.len()).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]));
    order
}

pub fn uncertainty_report(outcomes: &[Outcome]) -> Result<UncertaintyReport> {
    let picked: Vec<&Outcome> = outcomes.iter().filter(|o| !o.presence.is_complete()).collect();
    let energy: Vec<f32> = picked
        .iter()
        .map(|o| {
            o.uncertainty
                .ok_or_else(|| DcerError::Contract("uncertainty requires reconstruction mode".into()))
        })
        .collect::<Result<_>>()?;
    let pred: Vec<f32> = picked.iter().map(|o| o.prediction).collect();
    let y: Vec<f32> = picked.iter().map(|o| o.label).collect();
    let err: Vec<f32> = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).collect();
    let n = picked.len();
    let rho = spearman(&energy, &err)?;
    let order = energy_order(&energy);
    let q = (n as f32 * 0.2).round() as usize;
    let subset_acc = |idx: &[usize]| {
        let p: Vec<f32> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<f32> = idx.iter().map(|&i| y[i]).collect();
        acc2_f1(&p, &t).0
    };
    let acc_all = acc2_f1(&pred, &y).0;
    let acc_after = selective_acc2(&pred, &y, &energy, 0.2);
    Ok(UncertaintyReport {
        n,
        spearman_rho: rho,
        spearman_p: correlation_p_value(rho, n),
        pearson_rho: pearson(&energy, &err)?,
        acc_high_energy_quintile: subset_acc(&order[..q]),
        acc_low_energy_quintile: subset_acc(&order[n - q..]),
        acc_all,
        acc_after_reject_20pct: acc_after,
        acc_delta_at_reject_20pct: acc_after - acc_all,
    })
}

/// Variances of the retained target-band energy fraction under random
/// time-step masking and random DCT-coefficient masking.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskVarianceResult {
    pub var_time: f64,
    pub var_freq: f64,
    pub mean_time: f64,
    pub mean_freq: f64,
    pub trials: usize,
}

/// Two-band test signal of length `n`: a smooth low-band background over
/// the whole window plus a short high-band burst. The target band is the
/// upper half of the DCT spectrum.
pub fn band_structured_signal(n: usize, seed: u64) -> Vec<f32> {
    use std::f32::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n / 16).max(2);
    let start = rng.gen_range(0..n - width);
    let f_hi = 0.4 + 0.05 * rng.gen::<f32>();
    (0..n)
        .map(|t| {
            let tf = t as f32;
            let low = (PI * 1.5 * (tf + 0.5) / n as f32).cos() + 0.5 * (PI * 3.0 * (tf + 0.5) / n as f32).cos();
            let burst = if (start..start + width).contains(&t) {
                2.0 * (2.0 * PI * f_hi * tf).cos()
            } else {
                0.0
            };
            low + burst
        })
        .collect()
}

fn dct1(basis: &Tensor, x: &[f32]) -> Vec<f32> {
    let n = x.len();
    (0..n)
        .map(|k| basis.row(k).iter().zip(x).map(|(c, v)| c * v).sum())
        .collect()
}

fn band_energy(coeffs: &[f32], band: std::ops::Range<usize>) -> f64 {
    coeffs[band].iter().map(|&c| (c as f64) * (c as f64)).sum()
}

fn variance(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Masks `round(r·N)` time steps versus `round(r·N)` DCT coefficients of
/// `signal` over `trials` random draws.
pub fn mask_variance_experiment(signal: &[f32], r: f32, trials: usize, seed: u64) -> Result<MaskVarianceResult> {
    if !(0.0..=1.0).contains(&r) {
        return Err(DcerError::Config(format!("mask fraction must be in [0,1], got {r}")));
    }
    let n = signal.len();
    if n < 4 || trials == 0 {
        return Err(DcerError::Input("need a signal of length >= 4 and at least one trial".into()));
    }
    let basis = dct_matrix(n);
    let band = n / 2..n;
    let coeffs = dct1(&basis, signal);
    let reference = band_energy(&coeffs, band.clone());
    if reference == 0.0 {
        return Err(DcerError::Input("signal has no energy in the target band".into()));
    }
    let k = (r * n as f32).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut time = Vec::with_capacity(trials);
    let mut freq = Vec::with_capacity(trials);
    for _ in 0..trials {
        idx.shuffle(&mut rng);
        let mut x = signal.to_vec();
        for &t in &idx[..k] {
            x[t] = 0.0;
        }
        time.push(band_energy(&dct1(&basis, &x), band.clone()) / reference);
        idx.shuffle(&mut rng);
        let mut c = coeffs.clone();
        for &j in &idx[..k] {
            c[j] = 0.0;
        }
        freq.push(band_energy(&c, band.clone()) / reference);
    }
    let (mean_time, var_time) = variance(&time);
    let (mean_freq, var_freq) = variance(&freq);
    Ok(MaskVarianceResult {
        var_time,
        var_freq,
        mean_time,
        mean_freq,
        trials,
    })
}
