//! Within-modality encoders: wavelet pyramid for audio, DCT bands for video,
//! token embeddings for text. Each maps raw features to `T_m × D`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::batch::TextInput;
use crate::dct::{self, NUM_BANDS};
use crate::error::{DcerError, Result};
use crate::model::{ModelConfig, TextSource};
use crate::nn::{sinusoidal_positions, AttentionBlock, Linear};
use crate::params::{Decay, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::{self, WaveletFilter, WaveletPyramid};

fn embedding_table<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    dim: usize,
    std: f32,
    rng: &mut R,
) -> ParamId {
    store.add(name, Tensor::randn(vec![rows, dim], std, rng), Decay::Exempt)
}

/// Adds row `index` of an embedding table to every row of `x`.
fn add_tag(g: &mut Graph, x: Var, table: Var, index: usize) -> Result<Var> {
    let row = g.slice_rows(table, index, 1)?;
    g.add_row(x, row)
}

/// `h_a = Proj(CrossScaleAttn(W(x_a)))`.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub low_pass: ParamId,
    pub high_pass: ParamId,
    pub levels: usize,
    pub scale_proj: Vec<Linear>,
    pub scale_emb: ParamId,
    pub block: AttentionBlock,
    pub proj: Linear,
}

impl AudioEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let filt = WaveletFilter::db4();
        let d = cfg.d_model;
        let scales = cfg.wavelet_levels + 1;
        AudioEncoder {
            low_pass: store.add("audio.wavelet.low", filt.low_tensor(), Decay::Exempt),
            high_pass: store.add("audio.wavelet.high", filt.high_tensor(), Decay::Exempt),
            levels: cfg.wavelet_levels,
            scale_proj: (0..scales)
                .map(|i| Linear::new(store, &format!("audio.scale{i}"), cfg.audio_dim, d, rng))
                .collect(),
            scale_emb: embedding_table(store, "audio.scale_emb", scales, d, 0.1, rng),
            block: AttentionBlock::new(store, "audio.attn", d, cfg.heads, rng),
            proj: Linear::new(store, "audio.proj", d, d, rng),
        }
    }

    pub fn pyramid(&self, g: &mut Graph, x: Var) -> Result<WaveletPyramid> {
        let low = g.param(self.low_pass);
        let high = g.param(self.high_pass);
        wavelet::dwt_multi(g, x, low, high, self.levels)
    }

    /// Projects each scale to `D`, tags it with its scale embedding,
    /// concatenates along time and mixes scales with one attention block.
    pub fn cross_scale_attention(&self, g: &mut Graph, pyramid: &WaveletPyramid) -> Result<Var> {
        let scales = pyramid.scales();
        if scales.is_empty() {
            return Err(DcerError::Contract("empty wavelet pyramid".into()));
        }
        let table = g.param(self.scale_emb);
        let mut parts = Vec::with_capacity(scales.len());
        for (i, &s) in scales.iter().enumerate() {
            let p = self.scale_proj[i].forward(g, s)?;
            parts.push(add_tag(g, p, table, i)?);
        }
        let seq = g.concat_rows(&parts)?;
        self.block.forward(g, seq)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pyr = self.pyramid(g, x)?;
        let mixed = self.cross_scale_attention(g, &pyr)?;
        self.proj.forward(g, mixed)
    }
}

/// `h_v = Proj(FreqAttn(D(x_v)))`.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    /// Unconstrained band increments; see [`dct::boundaries_from_increments`].
    pub band_raw: ParamId,
    pub band_proj: Linear,
    pub band_emb: ParamId,
    pub block: AttentionBlock,
    pub proj: Linear,
    pub tau: f32,
    c_rows: Tensor,
    c_cols: Tensor,
    radii: Vec<f32>,
}

impl VideoEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        VideoEncoder {
            // equal increments give boundaries (0.25, 0.5, 0.75)
            band_raw: store.add("video.band_raw", Tensor::zeros(vec![NUM_BANDS]), Decay::Exempt),
            band_proj: Linear::new(store, "video.band_proj", cfg.video_dim, d, rng),
            band_emb: embedding_table(store, "video.band_emb", NUM_BANDS, d, 0.1, rng),
            block: AttentionBlock::new(store, "video.attn", d, cfg.heads, rng),
            proj: Linear::new(store, "video.proj", d, d, rng),
            tau: cfg.band_tau,
            c_rows: dct::dct_matrix(cfg.video_len),
            c_cols: dct::dct_matrix(cfg.video_dim),
            radii: dct::radial_grid(cfg.video_len, cfg.video_dim),
        }
    }

    pub fn boundaries(&self, g: &mut Graph) -> Result<Var> {
        let raw = g.param(self.band_raw);
        dct::boundaries_from_increments(g, raw)
    }

    /// Band-limited maps `idct2(mask_k ⊙ dct2(x))`, each `T_v × D_v`.
    pub fn band_maps(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        if shape != [self.c_rows.rows(), self.c_cols.rows()] {
            return Err(DcerError::shape(
                "video_encode",
                &shape,
                &[self.c_rows.rows(), self.c_cols.rows()],
            ));
        }
        let coeffs = dct::dct2_graph(g, x, &self.c_rows, &self.c_cols)?;
        let b = self.boundaries(g)?;
        let masks = g.band_masks(b, &self.radii, self.tau);
        let mut maps = Vec::with_capacity(NUM_BANDS);
        for k in 0..NUM_BANDS {
            let m = g.slice_rows(masks, k, 1)?;
            let m = g.reshape(m, &shape)?;
            let masked = g.mul(coeffs, m)?;
            maps.push(dct::idct2_graph(g, masked, &self.c_rows, &self.c_cols)?);
        }
        Ok(maps)
    }

    /// Projects each band map along the feature axis, tags it with a band
    /// embedding, and mixes the `4·T_v` tokens with one attention block.
    pub fn freq_attention(&self, g: &mut Graph, maps: &[Var]) -> Result<Var> {
        let table = g.param(self.band_emb);
        let mut parts = Vec::with_capacity(maps.len());
        for (k, &m) in maps.iter().enumerate() {
            let p = self.band_proj.forward(g, m)?;
            parts.push(add_tag(g, p, table, k)?);
        }
        let seq = g.concat_rows(&parts)?;
        self.block.forward(g, seq)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let maps = self.band_maps(g, x)?;
        let mixed = self.freq_attention(g, &maps)?;
        self.proj.forward(g, mixed)
    }
}

/// Token-embedding text encoder, or a projection of precomputed embeddings.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub source: TextSource,
    pub table: Option<ParamId>,
    pub ingest: Option<Linear>,
    pub to_model: Option<Linear>,
    pub block: AttentionBlock,
    pub proj: Linear,
    pub vocab: usize,
    positions: Tensor,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let (table, ingest, width) = match cfg.text_source {
            TextSource::Tokens => (
                Some(embedding_table(store, "text.embedding", cfg.vocab, cfg.text_dim, 1.0, rng)),
                None,
                cfg.text_dim,
            ),
            TextSource::Embeddings => (
                None,
                Some(Linear::new(store, "text.ingest", cfg.text_embed_dim, d, rng)),
                d,
            ),
        };
        let to_model = (width != d).then(|| Linear::new(store, "text.to_model", width, d, rng));
        TextEncoder {
            source: cfg.text_source,
            table,
            ingest,
            to_model,
            block: AttentionBlock::new(store, "text.attn", d, cfg.heads, rng),
            proj: Linear::new(store, "text.proj", d, d, rng),
            vocab: cfg.vocab,
            positions: sinusoidal_positions(cfg.text_len.max(1), d),
        }
    }

    fn positions(&self, g: &mut Graph, len: usize) -> Result<Var> {
        let d = self.positions.cols();
        if len <= self.positions.rows() {
            let data = self.positions.data()[..len * d].to_vec();
            g.constant_from(vec![len, d], data)
        } else {
            let t = sinusoidal_positions(len, d);
            Ok(g.constant(&t))
        }
    }

    pub fn forward(&self, g: &mut Graph, input: &TextInput) -> Result<Var> {
        let x = match (input, self.table, &self.ingest) {
            (TextInput::Tokens(ids), Some(table), _) => {
                if ids.is_empty() {
                    return Err(DcerError::Input("empty token sequence".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
                    return Err(DcerError::Input(format!(
                        "token id {bad} outside vocabulary of {}",
                        self.vocab
                    )));
                }
                let t = g.param(table);
                g.embedding(t, ids)?
            }
            (TextInput::Embeddings(e), _, Some(ingest)) => {
                if e.shape().len() != 2 || e.cols() != ingest.in_dim {
                    return Err(DcerError::Input(format!(
                        "text embeddings must be T×{}, got {:?}",
                        ingest.in_dim,
                        e.shape()
                    )));
                }
                let ev = g.constant(e);
                ingest.forward(g, ev)?
            }
            (TextInput::Tokens(_), None, _) => {
                return Err(DcerError::Input("encoder expects precomputed text embeddings".into()))
            }
            (TextInput::Embeddings(_), _, None) => {
                return Err(DcerError::Input("encoder expects text token ids".into()))
            }
        };
        let x = match &self.to_model {
            Some(l) => l.forward(g, x)?,
            None => x,
        };
        let len = g.shape(x)[0];
        let pos = self.positions(g, len)?;
        let x = g.add(x, pos)?;
        let x = self.block.forward(g, x)?;
        self.proj.forward(g, x)
    }
}
