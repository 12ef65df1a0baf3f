//! Cross-modality bottleneck: `K` learned query tokens attend over the
//! concatenated modality encodings; a head reads the flattened tokens.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::batch::Modality;
use crate::error::{DcerError, Result};
use crate::model::ModelConfig;
use crate::nn::{CrossAttention, FeedForward, LayerNorm, Mlp, SelfAttention};
use crate::params::{Decay, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pre-norm fusion layer. The cross-attention sublayer normalises both its
/// queries and its context; the others normalise their single input.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub cross_norm_q: LayerNorm,
    pub cross_norm_kv: LayerNorm,
    pub cross: CrossAttention,
    pub self_norm: LayerNorm,
    pub self_attn: SelfAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// Attention maps recorded during one fusion pass, per layer and head.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub cross: Vec<Vec<Var>>,
    pub self_attn: Vec<Vec<Var>>,
}

impl FusionLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, i: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let out_std = 1.0 / ((d * 2 * cfg.fusion_layers) as f32).sqrt();
        let p = format!("fusion.layer{i}");
        FusionLayer {
            cross_norm_q: LayerNorm::new(store, &format!("{p}.cross.norm_q"), d),
            cross_norm_kv: LayerNorm::new(store, &format!("{p}.cross.norm_kv"), d),
            cross: CrossAttention::new(store, &format!("{p}.cross"), d, cfg.heads, out_std, rng),
            self_norm: LayerNorm::new(store, &format!("{p}.self.norm"), d),
            self_attn: SelfAttention::new(store, &format!("{p}.self"), d, cfg.heads, out_std, rng),
            ffn_norm: LayerNorm::new(store, &format!("{p}.ffn.norm"), d),
            ffn: FeedForward::new(
                store,
                &format!("{p}.ffn"),
                d,
                cfg.ffn_mult * d,
                out_std / (cfg.ffn_mult as f32).sqrt(),
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var, h: Var, trace: &mut AttentionTrace) -> Result<Var> {
        let zn = self.cross_norm_q.forward(g, z)?;
        let hn = self.cross_norm_kv.forward(g, h)?;
        let (c, maps) = self.cross.forward_traced(g, zn, hn)?;
        trace.cross.push(maps);
        let z = g.add(z, c)?;
        let zn = self.self_norm.forward(g, z)?;
        let (s, maps) = self.self_attn.forward_traced(g, zn)?;
        trace.self_attn.push(maps);
        let z = g.add(z, s)?;
        let zn = self.ffn_norm.forward(g, z)?;
        let f = self.ffn.forward(g, zn)?;
        g.add(z, f)
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub queries: ParamId,
    pub type_emb: ParamId,
    pub layers: Vec<FusionLayer>,
    pub head: Mlp,
    pub tokens: usize,
    pub dim: usize,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (k, d) = (cfg.bottleneck_tokens, cfg.d_model);
        Bottleneck {
            queries: store.add("fusion.queries", Tensor::randn(vec![k, d], 1.0, rng), Decay::Exempt),
            type_emb: store.add("fusion.type_emb", Tensor::randn(vec![3, d], 0.1, rng), Decay::Exempt),
            layers: (0..cfg.fusion_layers)
                .map(|i| FusionLayer::new(store, i, cfg, rng))
                .collect(),
            head: Mlp::new(store, "head", &[k * d, d, 1], rng),
            tokens: k,
            dim: d,
        }
    }

    /// `H = [h_a; h_v; h_t]` over the present modalities, each token tagged
    /// with its modality-type embedding.
    pub fn concat_modalities(&self, g: &mut Graph, encodings: &[Option<Var>; 3]) -> Result<Var> {
        let table = g.param(self.type_emb);
        let mut parts = Vec::new();
        for m in Modality::ALL {
            if let Some(h) = encodings[m.index()] {
                if g.shape(h).len() != 2 || g.shape(h)[1] != self.dim {
                    return Err(DcerError::shape("concat_modalities", g.shape(h), &[0, self.dim]));
                }
                let row = g.slice_rows(table, m.index(), 1)?;
                parts.push(g.add_row(h, row)?);
            }
        }
        if parts.is_empty() {
            return Err(DcerError::Contract("no modality present".into()));
        }
        g.concat_rows(&parts)
    }

    /// Runs the fusion stack from the learned queries over `H`.
    pub fn fusion_forward_traced(&self, g: &mut Graph, h: Var) -> Result<(Var, AttentionTrace)> {
        if g.shape(h)[0] == 0 {
            return Err(DcerError::Contract("empty modality sequence".into()));
        }
        let mut trace = AttentionTrace::default();
        let mut z = g.param(self.queries);
        for layer in &self.layers {
            z = layer.forward(g, z, h, &mut trace)?;
        }
        Ok((z, trace))
    }

    pub fn fusion_forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        Ok(self.fusion_forward_traced(g, h)?.0)
    }

    /// Reads only `Z`: flattened `K·D` floats through a GELU MLP to a scalar.
    pub fn predict(&self, g: &mut Graph, z: Var) -> Result<Var> {
        if g.shape(z) != [self.tokens, self.dim] {
            return Err(DcerError::shape("predict", g.shape(z), &[self.tokens, self.dim]));
        }
        let flat = g.reshape(z, &[1, self.tokens * self.dim])?;
        let y = self.head.forward(g, flat)?;
        g.reshape(y, &[1])
    }
}

/// Single cross-attention step `softmax(Q·Hᵀ/√d)·H` with the given weights,
/// per head. This is the sublayer each fusion layer applies to its queries.
pub fn bottleneck_attend(attn: &CrossAttention, g: &mut Graph, q: Var, h: Var) -> Result<(Var, Vec<Var>)> {
    attn.forward_traced(g, q, h)
}
