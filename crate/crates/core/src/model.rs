//! The full model: three encoders, the fusion bottleneck, and per-modality
//! energy nets and initialisers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batch::{Modality, ModalityBatch, Presence, Sample};
use crate::dct::NUM_BANDS;
use crate::encoders::{AudioEncoder, TextEncoder, VideoEncoder};
use crate::energy::{momentum_descent, perturb, EnergyNet, Initializer, LearnedEnergy, ReconConfig, ReconResult};
use crate::error::{DcerError, Result};
use crate::fusion::Bottleneck;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Tokens,
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub bottleneck_tokens: usize,
    pub fusion_layers: usize,
    pub ffn_mult: usize,
    pub wavelet_levels: usize,
    pub audio_len: usize,
    pub audio_dim: usize,
    pub video_len: usize,
    pub video_dim: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub text_source: TextSource,
    pub text_embed_dim: usize,
    pub band_tau: f32,
    pub lambda_e: f32,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            bottleneck_tokens: 4,
            fusion_layers: 6,
            ffn_mult: 4,
            wavelet_levels: 3,
            audio_len: 64,
            audio_dim: 8,
            video_len: 16,
            video_dim: 12,
            text_len: 12,
            vocab: 32,
            text_dim: 128,
            text_source: TextSource::Tokens,
            text_embed_dim: 768,
            band_tau: 0.05,
            lambda_e: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Encoded sequence length per modality.
    pub fn encoded_len(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio_len,
            Modality::Video => NUM_BANDS * self.video_len,
            Modality::Text => self.text_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(DcerError::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} must split across {} heads", self.d_model, self.heads));
        }
        if self.wavelet_levels == 0 || self.audio_len % (1 << self.wavelet_levels) != 0 {
            return err(format!(
                "audio_len {} must be divisible by 2^{}",
                self.audio_len, self.wavelet_levels
            ));
        }
        if self.audio_len >> (self.wavelet_levels - 1) < crate::wavelet::FILTER_TAPS {
            return err(format!(
                "audio_len {} too short for {} wavelet levels",
                self.audio_len, self.wavelet_levels
            ));
        }
        if self.audio_dim == 0 || self.video_len == 0 || self.video_dim == 0 || self.text_len == 0 {
            return err("modality dimensions must be positive".into());
        }
        let total: usize = Modality::ALL.iter().map(|&m| self.encoded_len(m)).sum();
        if self.bottleneck_tokens == 0 || 4 * self.bottleneck_tokens > total {
            return err(format!(
                "bottleneck of {} tokens is not small against {} modality tokens",
                self.bottleneck_tokens, total
            ));
        }
        if !(self.band_tau > 0.0) {
            return err("band_tau must be positive".into());
        }
        Ok(())
    }
}

/// How inference treats modalities flagged missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingMode {
    /// Reconstruct the encoding by energy descent, then re-fuse.
    Reconstruct,
    /// Omit the modality from the fused sequence.
    Drop,
    /// Ignore presence flags: masked raw features are encoded and fused as
    /// if observed.
    Blind,
}

impl MissingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reconstruct" => Ok(MissingMode::Reconstruct),
            "drop" => Ok(MissingMode::Drop),
            "blind" => Ok(MissingMode::Blind),
            other => Err(DcerError::Input(format!("unknown missing mode {other:?}"))),
        }
    }
}

/// Encodings of one sample, `None` where the modality is absent.
pub type Encodings = [Option<Tensor>; 3];

#[derive(Debug, Clone)]
pub struct Inference {
    pub prediction: f32,
    /// Mean final energy over reconstructed modalities; 0 when complete,
    /// `None` in drop mode.
    pub uncertainty: Option<f32>,
    pub z: Tensor,
    pub reconstructions: Vec<(Modality, ReconResult)>,
}

/// Outputs of a full forward pass over a batch.
#[derive(Debug, Clone)]
pub struct FullOutput {
    pub predictions: Vec<f32>,
    pub z: Vec<Tensor>,
    pub encodings: Vec<Encodings>,
}

#[derive(Debug, Clone)]
pub struct DcerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub audio: AudioEncoder,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub fusion: Bottleneck,
    pub energy: Vec<EnergyNet>,
    pub init: Vec<Initializer>,
}

impl DcerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let audio = AudioEncoder::new(&mut params, &config, &mut rng);
        let video = VideoEncoder::new(&mut params, &config, &mut rng);
        let text = TextEncoder::new(&mut params, &config, &mut rng);
        let fusion = Bottleneck::new(&mut params, &config, &mut rng);
        let energy = Modality::ALL
            .iter()
            .map(|&m| EnergyNet::new(&mut params, m, &config, &mut rng))
            .collect();
        let init = Modality::ALL
            .iter()
            .map(|&m| Initializer::new(&mut params, m, config.encoded_len(m), &config, &mut rng))
            .collect();
        Ok(DcerModel {
            config,
            params,
            audio,
            video,
            text,
            fusion,
            energy,
            init,
        })
    }

    /// Parameter-name prefixes belonging to the reconstruction machinery.
    pub fn is_recon_param(name: &str) -> bool {
        name.starts_with("energy.") || name.starts_with("init.")
    }

    pub fn encode(&self, g: &mut Graph, m: Modality, sample: &Sample) -> Result<Var> {
        match m {
            Modality::Audio => {
                let x = g.constant(&sample.audio);
                self.audio.forward(g, x)
            }
            Modality::Video => {
                let x = g.constant(&sample.video);
                self.video.forward(g, x)
            }
            Modality::Text => self.text.forward(g, &sample.text),
        }
    }

    pub fn encode_present(&self, g: &mut Graph, sample: &Sample, presence: Presence) -> Result<[Option<Var>; 3]> {
        let mut out = [None; 3];
        for m in presence.present() {
            out[m.index()] = Some(self.encode(g, m, sample)?);
        }
        Ok(out)
    }

    /// Encodings of the present modalities as plain values.
    pub fn encode_values(&self, sample: &Sample, presence: Presence) -> Result<Encodings> {
        let mut out: Encodings = [None, None, None];
        for m in presence.present() {
            let mut g = Graph::with_params(&self.params, false);
            let h = self.encode(&mut g, m, sample)?;
            out[m.index()] = Some(g.tensor(h));
        }
        Ok(out)
    }

    pub fn fuse(&self, g: &mut Graph, encodings: &[Option<Var>; 3]) -> Result<Var> {
        let h = self.fusion.concat_modalities(g, encodings)?;
        self.fusion.fusion_forward(g, h)
    }

    /// `Z` and `ŷ` from value encodings, parameters frozen.
    pub fn fuse_values(&self, encodings: &[Option<&Tensor>; 3]) -> Result<(Tensor, f32)> {
        let mut g = Graph::with_params(&self.params, false);
        let vars = encodings.map(|e| e.map(|t| g.constant(t)));
        let z = self.fuse(&mut g, &vars)?;
        let y = self.fusion.predict(&mut g, z)?;
        Ok((g.tensor(z), g.scalar(y)))
    }

    /// Encode, fuse and predict over a batch with every modality present.
    pub fn forward_full(&self, batch: &ModalityBatch) -> Result<FullOutput> {
        let mut out = FullOutput {
            predictions: Vec::with_capacity(batch.len()),
            z: Vec::with_capacity(batch.len()),
            encodings: Vec::with_capacity(batch.len()),
        };
        for sample in &batch.samples {
            let enc = self.encode_values(sample, Presence::ALL)?;
            let (z, y) = self.fuse_values(&[enc[0].as_ref(), enc[1].as_ref(), enc[2].as_ref()])?;
            out.predictions.push(y);
            out.z.push(z);
            out.encodings.push(enc);
        }
        Ok(out)
    }

    /// Reconstructs modality `m` given the partial bottleneck and the
    /// observed encodings.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        m: Modality,
        z_partial: &Tensor,
        observed: &[&Tensor],
        cfg: &ReconConfig,
        rng: &mut R,
    ) -> Result<ReconResult> {
        cfg.validate()?;
        let mut h0 = self.initial_guess(m, z_partial, observed)?;
        perturb(&mut h0, cfg.sigma, rng);
        let landscape = LearnedEnergy {
            net: &self.energy[m.index()],
            params: &self.params,
            z: z_partial,
        };
        momentum_descent(&landscape, h0, cfg.steps, cfg.eta, cfg.rho)
    }

    /// `μ(Z, h_obs)` as a value.
    pub fn initial_guess(&self, m: Modality, z: &Tensor, observed: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params, false);
        let zv = g.constant(z);
        let obs: Vec<Var> = observed.iter().map(|t| g.constant(t)).collect();
        let mu = self.init[m.index()].forward(&mut g, zv, &obs)?;
        Ok(g.tensor(mu))
    }

    /// Fills every modality of `active` that `presence` marks missing from
    /// one partial bottleneck, then re-fuses. Modalities outside `active`
    /// take no part. Samples with nothing to fill get uncertainty 0.
    pub fn fill_missing<R: Rng + ?Sized>(
        &self,
        encodings: &Encodings,
        presence: Presence,
        active: Presence,
        cfg: &ReconConfig,
        rng: &mut R,
    ) -> Result<Inference> {
        let presence = presence.intersect(active);
        let observed: Vec<&Tensor> = presence
            .present()
            .iter()
            .map(|m| {
                encodings[m.index()]
                    .as_ref()
                    .ok_or_else(|| DcerError::Contract(format!("{} flagged present but not encoded", m.name())))
            })
            .collect::<Result<_>>()?;
        if observed.is_empty() {
            return Err(DcerError::Contract("all modalities missing".into()));
        }
        let partial = presence_view(encodings, presence);
        let (z_partial, y_partial) = self.fuse_values(&partial)?;
        if presence == active {
            return Ok(Inference {
                prediction: y_partial,
                uncertainty: Some(0.0),
                z: z_partial,
                reconstructions: Vec::new(),
            });
        }
        let mut reconstructions = Vec::new();
        for m in active.present().into_iter().filter(|&m| !presence.has(m)) {
            let r = self.reconstruct(m, &z_partial, &observed, cfg, rng)?;
            reconstructions.push((m, r));
        }
        let mut completed = partial;
        for (m, r) in &reconstructions {
            completed[m.index()] = Some(&r.h);
        }
        let (z, prediction) = self.fuse_values(&completed)?;
        let uncertainty =
            reconstructions.iter().map(|(_, r)| r.final_energy).sum::<f32>() / reconstructions.len() as f32;
        Ok(Inference {
            prediction,
            uncertainty: Some(uncertainty),
            z,
            reconstructions,
        })
    }

    /// Inference on pre-computed encodings under the given missing mode,
    /// restricted to the `active` modalities. In blind mode `encodings`
    /// must hold every active modality.
    pub fn infer<R: Rng + ?Sized>(
        &self,
        encodings: &Encodings,
        presence: Presence,
        active: Presence,
        mode: MissingMode,
        cfg: &ReconConfig,
        rng: &mut R,
    ) -> Result<Inference> {
        match mode {
            MissingMode::Reconstruct => self.fill_missing(encodings, presence, active, cfg, rng),
            MissingMode::Drop | MissingMode::Blind => {
                let presence = if mode == MissingMode::Blind {
                    active
                } else {
                    presence.intersect(active)
                };
                if presence.count() == 0 {
                    return Err(DcerError::Contract("all modalities missing".into()));
                }
                let (z, prediction) = self.fuse_values(&presence_view(encodings, presence))?;
                Ok(Inference {
                    prediction,
                    uncertainty: None,
                    z,
                    reconstructions: Vec::new(),
                })
            }
        }
    }
}

/// Borrowed encodings restricted to the present modalities.
pub fn presence_view(encodings: &Encodings, presence: Presence) -> [Option<&Tensor>; 3] {
    let mut out = [None; 3];
    for m in presence.present() {
        out[m.index()] = encodings[m.index()].as_ref();
    }
    out
}
