//! Layers built on the autodiff tape.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DcerError, Result};
use crate::params::{Decay, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, in_dim, out_dim, 1.0 / (in_dim as f32).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![in_dim, out_dim], std, rng),
            Decay::Apply,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), Decay::Exempt);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0), Decay::Exempt),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]), Decay::Exempt),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        out_std: f32,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must split evenly across heads");
        SelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::with_std(store, &format!("{name}.out"), dim, dim, out_std, rng),
            heads,
            dim,
        }
    }

    /// Returns the output and the per-head attention maps.
    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.qkv.forward(g, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, self.dim + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * self.dim + h * dh, dh)?;
            let s = g.matmul_t(q, k)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, v)?);
            maps.push(a);
        }
        let cat = g.concat_cols(&outs)?;
        Ok((self.out.forward(g, cat)?, maps))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.0)
    }
}

/// Multi-head cross-attention: `queries[q×D]` attend over `context[t×D]`.
///
/// Keys carry no bias (it would shift every logit of a query row equally).
/// When the context is longer than the query set the key and value
/// projections are re-associated onto the query side, so the context is
/// never projected token by token; both orders give the same result.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: ParamId,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        out_std: f32,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must split evenly across heads");
        let std = 1.0 / (dim as f32).sqrt();
        CrossAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: store.add(
                format!("{name}.k.weight"),
                Tensor::randn(vec![dim, dim], std, rng),
                Decay::Apply,
            ),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::with_std(store, &format!("{name}.out"), dim, dim, out_std, rng),
            heads,
            dim,
        }
    }

    pub fn forward_traced(&self, g: &mut Graph, queries: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        if g.shape(context)[0] == 0 {
            return Err(DcerError::Contract("cross-attention over empty context".into()));
        }
        let reassociate = g.shape(context)[0] > g.shape(queries)[0];
        self.forward_impl(g, queries, context, reassociate)
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Result<Var> {
        Ok(self.forward_traced(g, queries, context)?.0)
    }

    pub(crate) fn forward_impl(
        &self,
        g: &mut Graph,
        queries: Var,
        context: Var,
        reassociate: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = self.q.forward(g, queries)?;
        let wk = g.param(self.k);
        let wv = g.param(self.v.weight);
        let bv = g.param(self.v.bias);
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        if reassociate {
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let wk_h = g.slice_cols(wk, h * dh, dh)?;
                let wv_h = g.slice_cols(wv, h * dh, dh)?;
                let qk = g.matmul_t(qh, wk_h)?;
                let s = g.matmul_t(qk, context)?;
                let s = g.scale(s, scale);
                let a = g.softmax(s, 1)?;
                let ctx = g.matmul(a, context)?;
                outs.push(g.matmul(ctx, wv_h)?);
                maps.push(a);
            }
            let cat = g.concat_cols(&outs)?;
            let cat = g.add_row(cat, bv)?;
            Ok((self.out.forward(g, cat)?, maps))
        } else {
            let k = g.matmul(context, wk)?;
            let v = g.matmul(context, wv)?;
            let v = g.add_row(v, bv)?;
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let s = g.matmul_t(qh, kh)?;
                let s = g.scale(s, scale);
                let a = g.softmax(s, 1)?;
                outs.push(g.matmul(a, vh)?);
                maps.push(a);
            }
            let cat = g.concat_cols(&outs)?;
            Ok((self.out.forward(g, cat)?, maps))
        }
    }
}

/// Position-wise `D → hidden → D` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out_std: f32,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::with_std(store, &format!("{name}.down"), hidden, dim, out_std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// Pre-norm residual self-attention block: `x + Attn(LN(x))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub attn: SelfAttention,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let out_std = 0.5 / (dim as f32).sqrt();
        AttentionBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, out_std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        let a = self.attn.forward(g, n)?;
        g.add(x, a)
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f32.powf(2.0 * i as f32 / dim as f32);
            data[pos * dim + 2 * i] = (pos as f32 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f32 * freq).cos();
        }
    }
    Tensor::new(vec![len, dim], data).expect("positions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_attention_reassociation_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", 16, 4, 0.2, &mut rng);
        let q = Tensor::randn(vec![3, 16], 1.0, &mut rng);
        let ctx = Tensor::randn(vec![9, 16], 1.0, &mut rng);
        let mut g = Graph::with_params(&store, false);
        let qv = g.constant(&q);
        let cv = g.constant(&ctx);
        let (a, _) = ca.forward_impl(&mut g, qv, cv, true).unwrap();
        let (b, _) = ca.forward_impl(&mut g, qv, cv, false).unwrap();
        let diff = g.tensor(a).max_abs_diff(&g.tensor(b));
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn self_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, 2, 0.3, &mut rng);
        let x = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let mut g = Graph::with_params(&store, false);
        let xv = g.constant(&x);
        let (_, maps) = sa.forward_traced(&mut g, xv).unwrap();
        for m in maps {
            for row in g.value(m).chunks(5) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}
