//! The registered gradient-check suite: every differentiable tape op, the
//! four objective terms, and the learned model components, each compared
//! against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::batch::{Modality, Sample, TextInput};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_param, grad_check_with, GradCheckConfig, GradCheckReport};
use crate::losses::{loss_energy, loss_joint, loss_pred, loss_recon};
use crate::model::{DcerModel, ModelConfig};
use crate::nn::{CrossAttention, SelfAttention};
use crate::params::ParamStore;
use crate::runtime::derive_seed;
use crate::tensor::Tensor;

/// Stencil step for checks through whole model components.
pub const DEEP_STEP: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

fn weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// A small model whose parameter gradients are cheap to probe.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        bottleneck_tokens: 2,
        fusion_layers: 2,
        ffn_mult: 2,
        audio_len: 32,
        audio_dim: 3,
        video_len: 4,
        video_dim: 4,
        text_len: 5,
        vocab: 20,
        text_dim: 8,
        ..ModelConfig::default()
    }
}

fn small_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sample {
    Sample {
        id: "probe".into(),
        label: 0.5,
        audio: Tensor::randn(vec![cfg.audio_len, cfg.audio_dim], 1.0, rng),
        video: Tensor::randn(vec![cfg.video_len, cfg.video_dim], 1.0, rng),
        text: TextInput::Tokens((0..cfg.text_len).map(|_| rng.gen_range(0..cfg.vocab)).collect()),
    }
}

/// Runs every registered check with inputs drawn from `seed`.
pub fn run_suite(seed: u64, cfg: GradCheckConfig) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x67]));
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(NamedCheck {
            name: name.to_string(),
            report,
        })
    };

    // binary ops are checked with respect to each argument in turn
    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![4, 5], 1.0, &mut rng);
    let bt = Tensor::randn(vec![5, 4], 1.0, &mut rng);
    let same = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let row = Tensor::randn(vec![4], 1.0, &mut rng);
    let w35 = weights(&[3, 5], &mut rng);
    let w34 = weights(&[3, 4], &mut rng);
    let w43 = weights(&[4, 3], &mut rng);

    push("matmul.lhs", grad_check(|g, x| { let c = g.constant(&b); let y = g.matmul(x, c)?; project(g, y, &w35) }, &a, cfg)?);
    push("matmul.rhs", grad_check(|g, x| { let c = g.constant(&a); let y = g.matmul(c, x)?; project(g, y, &w35) }, &b, cfg)?);
    push("matmul_t.lhs", grad_check(|g, x| { let c = g.constant(&bt); let y = g.matmul_t(x, c)?; project(g, y, &w35) }, &a, cfg)?);
    push("matmul_t.rhs", grad_check(|g, x| { let c = g.constant(&a); let y = g.matmul_t(c, x)?; project(g, y, &w35) }, &bt, cfg)?);
    push("transpose", grad_check(|g, x| { let y = g.transpose(x)?; project(g, y, &w43) }, &a, cfg)?);
    push("add", grad_check(|g, x| { let c = g.constant(&same); let y = g.add(x, c)?; project(g, y, &w34) }, &a, cfg)?);
    push("sub.rhs", grad_check(|g, x| { let c = g.constant(&same); let y = g.sub(c, x)?; project(g, y, &w34) }, &a, cfg)?);
    push("mul", grad_check(|g, x| { let c = g.constant(&same); let y = g.mul(x, c)?; project(g, y, &w34) }, &a, cfg)?);
    push("mul.self", grad_check(|g, x| { let y = g.mul(x, x)?; project(g, y, &w34) }, &a, cfg)?);
    push("add_row.row", grad_check(|g, r| { let c = g.constant(&a); let y = g.add_row(c, r)?; project(g, y, &w34) }, &row, cfg)?);
    push("scale", grad_check(|g, x| { let y = g.scale(x, -1.7); project(g, y, &w34) }, &a, cfg)?);
    let denom = Tensor::new(vec![1], vec![1.3]).expect("scalar");
    push("div_scalar.num", grad_check(|g, x| { let d = g.constant(&denom); let y = g.div_scalar(x, d)?; project(g, y, &w34) }, &a, cfg)?);
    push("div_scalar.den", grad_check(|g, d| { let c = g.constant(&a); let y = g.div_scalar(c, d)?; project(g, y, &w34) }, &denom, cfg)?);
    push("gelu", grad_check(|g, x| { let y = g.gelu(x); project(g, y, &w34) }, &a, cfg)?);
    push("sigmoid", grad_check(|g, x| { let y = g.sigmoid(x); project(g, y, &w34) }, &a, cfg)?);
    push("softplus", grad_check(|g, x| { let y = g.softplus(x); project(g, y, &w34) }, &a, cfg)?);
    push("softmax.rows", grad_check(|g, x| { let y = g.softmax(x, 1)?; project(g, y, &w34) }, &a, cfg)?);
    push("softmax.cols", grad_check(|g, x| { let y = g.softmax(x, 0)?; project(g, y, &w34) }, &a, cfg)?);
    let gain = Tensor::randn(vec![4], 1.0, &mut rng);
    let bias = Tensor::randn(vec![4], 1.0, &mut rng);
    push("layer_norm.x", grad_check(|g, x| {
        let (gn, bs) = (g.constant(&gain), g.constant(&bias));
        let y = g.layer_norm(x, gn, bs)?;
        project(g, y, &w34)
    }, &a, cfg)?);
    push("layer_norm.gain", grad_check(|g, gn| {
        let (x, bs) = (g.constant(&a), g.constant(&bias));
        let y = g.layer_norm(x, gn, bs)?;
        project(g, y, &w34)
    }, &gain, cfg)?);
    push("layer_norm.bias", grad_check(|g, bs| {
        let (x, gn) = (g.constant(&a), g.constant(&gain));
        let y = g.layer_norm(x, gn, bs)?;
        project(g, y, &w34)
    }, &bias, cfg)?);
    let w64 = weights(&[6, 4], &mut rng);
    let w38 = weights(&[3, 8], &mut rng);
    push("concat_rows", grad_check(|g, x| { let c = g.constant(&same); let y = g.concat_rows(&[c, x])?; project(g, y, &w64) }, &a, cfg)?);
    push("concat_cols", grad_check(|g, x| { let c = g.constant(&same); let y = g.concat_cols(&[x, c])?; project(g, y, &w38) }, &a, cfg)?);
    let w24 = weights(&[2, 4], &mut rng);
    let w32 = weights(&[3, 2], &mut rng);
    push("slice_rows", grad_check(|g, x| { let y = g.slice_rows(x, 1, 2)?; project(g, y, &w24) }, &a, cfg)?);
    push("slice_cols", grad_check(|g, x| { let y = g.slice_cols(x, 2, 2)?; project(g, y, &w32) }, &a, cfg)?);
    let w26 = weights(&[2, 6], &mut rng);
    push("reshape", grad_check(|g, x| { let y = g.reshape(x, &[2, 6])?; project(g, y, &w26) }, &a, cfg)?);
    push("sum", grad_check(|g, x| { let y = g.mul(x, x)?; Ok(g.sum(y)) }, &a, cfg)?);
    push("mean", grad_check(|g, x| { let y = g.mul(x, x)?; Ok(g.mean(y)) }, &a, cfg)?);
    let w14 = weights(&[1, 4], &mut rng);
    push("mean_rows", grad_check(|g, x| { let y = g.mean_rows(x); project(g, y, &w14) }, &a, cfg)?);
    let table = Tensor::randn(vec![6, 4], 1.0, &mut rng);
    let ids = [0usize, 3, 3, 5, 1];
    let w54 = weights(&[5, 4], &mut rng);
    push("embedding.table", grad_check(|g, t| { let y = g.embedding(t, &ids)?; project(g, y, &w54) }, &table, cfg)?);

    let filt = crate::wavelet::WaveletFilter::db4();
    let (low, high) = (filt.low_tensor(), filt.high_tensor());
    let sig = Tensor::randn(vec![16, 3], 1.0, &mut rng);
    let w163 = weights(&[16, 3], &mut rng);
    push("dwt.x", grad_check(|g, x| { let (l, h) = (g.constant(&low), g.constant(&high)); let y = g.dwt(x, l, h)?; project(g, y, &w163) }, &sig, cfg)?);
    push("dwt.low", grad_check(|g, l| { let (x, h) = (g.constant(&sig), g.constant(&high)); let y = g.dwt(x, l, h)?; project(g, y, &w163) }, &low, cfg)?);
    push("dwt.high", grad_check(|g, h| { let (x, l) = (g.constant(&sig), g.constant(&low)); let y = g.dwt(x, l, h)?; project(g, y, &w163) }, &high, cfg)?);

    let radii = crate::dct::radial_grid(6, 5);
    let bounds = Tensor::new(vec![3], vec![0.27, 0.52, 0.71]).expect("bounds");
    let wb = weights(&[4, radii.len()], &mut rng);
    push("band_masks", grad_check(|g, b| { let y = g.band_masks(b, &radii, 0.05); project(g, y, &wb) }, &bounds, cfg)?);
    let raw = Tensor::randn(vec![4], 0.5, &mut rng);
    let w3 = weights(&[3], &mut rng);
    push("band_boundaries", grad_check(|g, r| { let y = crate::dct::boundaries_from_increments(g, r)?; project(g, y, &w3) }, &raw, cfg)?);

    // objective terms
    let preds = Tensor::randn(vec![5], 1.0, &mut rng);
    let targets: Vec<f32> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
    push("loss_pred", grad_check(|g, p| loss_pred(g, p, &targets), &preds, cfg)?);
    let h1 = Tensor::randn(vec![4, 6], 1.0, &mut rng);
    let h2 = Tensor::randn(vec![3, 6], 1.0, &mut rng);
    let h2_hat = Tensor::randn(vec![3, 6], 1.0, &mut rng);
    push("loss_recon", grad_check(|g, x| {
        let (t1, t2, r2) = (g.constant(&h1), g.constant(&h2), g.constant(&h2_hat));
        loss_recon(g, &[(t1, x), (t2, r2)])
    }, &Tensor::randn(vec![4, 6], 1.0, &mut rng), cfg)?);
    let energies = Tensor::randn(vec![3], 1.0, &mut rng);
    push("loss_energy", grad_check(|g, e| {
        let e = g.reshape(e, &[1, 3])?;
        let parts = (0..3).map(|i| g.slice_cols(e, i, 1)).collect::<Result<Vec<_>>>()?;
        loss_energy(g, &parts)
    }, &energies, cfg)?);
    let z_full = Tensor::randn(vec![2, 6], 1.0, &mut rng);
    push("loss_joint", grad_check(|g, z| { let f = g.constant(&z_full); loss_joint(g, f, z) }, &Tensor::randn(vec![2, 6], 1.0, &mut rng), cfg)?);

    // attention modules, with respect to their inputs
    let attn_cfg = GradCheckConfig { step: 3e-2, ..cfg };
    let mut store = ParamStore::new();
    let sa = SelfAttention::new(&mut store, "probe.self", 8, 2, 0.5, &mut rng);
    let ca = CrossAttention::new(&mut store, "probe.cross", 8, 2, 0.5, &mut rng);
    let xs = Tensor::randn(vec![5, 8], 1.0, &mut rng);
    let qs = Tensor::randn(vec![2, 8], 1.0, &mut rng);
    let w58 = weights(&[5, 8], &mut rng);
    let w28 = weights(&[2, 8], &mut rng);
    push("self_attention.x", grad_check_with(Some(&store), |g, x| { let y = sa.forward(g, x)?; project(g, y, &w58) }, &xs, attn_cfg)?);
    push("cross_attention.context", grad_check_with(Some(&store), |g, x| { let q = g.constant(&qs); let y = ca.forward(g, q, x)?; project(g, y, &w28) }, &xs, attn_cfg)?);
    push("cross_attention.query", grad_check_with(Some(&store), |g, q| { let x = g.constant(&xs); let y = ca.forward(g, q, x)?; project(g, y, &w28) }, &qs, attn_cfg)?);

    // learned model components, with respect to representative parameters;
    // the deep composition needs a wider stencil to rise above float32
    // rounding of the loss
    let deep = GradCheckConfig {
        step: DEEP_STEP,
        ..cfg
    };
    let mcfg = ModelConfig {
        init_seed: seed,
        ..small_model_config()
    };
    let model = DcerModel::new(mcfg.clone())?;
    let sample = small_sample(&mcfg, &mut rng);
    let y_pred = |g: &mut Graph| -> Result<Var> {
        let enc = model.encode_present(g, &sample, crate::batch::Presence::ALL)?;
        let z = model.fuse(g, &enc)?;
        let y = model.fusion.predict(g, z)?;
        loss_pred(g, y, &[sample.label])
    };
    // steps per parameter: wide enough to clear rounding noise, narrow
    // enough that curvature through the wavelet cascade stays negligible
    for (name, step) in [
        ("audio.wavelet.low", 1e-2),
        ("audio.scale0.weight", DEEP_STEP),
        ("video.band_raw", 3e-2),
        ("video.band_proj.weight", DEEP_STEP),
        ("text.embedding", DEEP_STEP),
        ("fusion.queries", DEEP_STEP),
        ("fusion.type_emb", 3e-2),
        ("fusion.layer0.cross.k.weight", DEEP_STEP),
        ("fusion.layer1.self.norm.gain", DEEP_STEP),
        ("head.1.weight", DEEP_STEP),
    ] {
        let id = model
            .params
            .id(name)
            .ok_or_else(|| crate::error::DcerError::Contract(format!("grad-check target {name} not registered")))?;
        let probe = GradCheckConfig { step, ..cfg };
        push(&format!("param.{name}"), grad_check_param(&model.params, id, &y_pred, probe)?);
    }
    let z = Tensor::randn(vec![mcfg.bottleneck_tokens, mcfg.d_model], 1.0, &mut rng);
    for m in Modality::ALL {
        let len = mcfg.encoded_len(m);
        let h = Tensor::randn(vec![len, mcfg.d_model], 1.0, &mut rng);
        let net = &model.energy[m.index()];
        push(&format!("energy.{}.h", m.name()), grad_check_with(Some(&model.params), |g, x| { let zv = g.constant(&z); net.energy(g, x, zv) }, &h, deep)?);
        let first = model.params.ids().find(|&id| model.params.name(id).starts_with(&format!("energy.{}.", m.name())));
        if let Some(id) = first {
            push(&format!("energy.{}.param", m.name()), grad_check_param(&model.params, id, |g| {
                let (hv, zv) = (g.constant(&h), g.constant(&z));
                net.energy(g, hv, zv)
            }, deep)?);
        }
    }
    Ok(out)
}
