//! Energy over candidate modality encodings, the learned initialiser, and
//! heavy-ball descent that reconstructs a missing encoding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batch::Modality;
use crate::error::{DcerError, Result};
use crate::model::ModelConfig;
use crate::nn::{CrossAttention, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Settings of the reconstruction loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Descent iterations `T`.
    pub steps: usize,
    /// Step size `η`.
    pub eta: f32,
    /// Momentum `ρ`.
    pub rho: f32,
    /// Initial noise std `σ`.
    pub sigma: f32,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            steps: 3,
            eta: 0.01,
            rho: 0.9,
            sigma: 0.01,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(DcerError::Config(format!("recon eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(DcerError::Config(format!("recon rho must be in [0,1), got {}", self.rho)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(DcerError::Config(format!("recon sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// `E(h, Z) = mean_t f(h − CrossAttn(h, Z)) + λ·mean_t g(h)`. `f` and `g`
/// end in `softplus(x) − ln 2`: zero at zero like a linear head, but bounded
/// below, since the energy objective only ever pushes energies down.
#[derive(Debug, Clone)]
pub struct EnergyNet {
    pub cross: CrossAttention,
    pub f: Mlp,
    pub g: Mlp,
    pub lambda: f32,
}

impl EnergyNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, m: Modality, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let p = format!("energy.{}", m.name());
        EnergyNet {
            cross: CrossAttention::new(store, &format!("{p}.cross"), d, cfg.heads, 1.0 / (d as f32).sqrt(), rng),
            f: Mlp::new(store, &format!("{p}.f"), &[d, d, 1], rng),
            g: Mlp::new(store, &format!("{p}.g"), &[d, d, 1], rng),
            lambda: cfg.lambda_e,
        }
    }

    pub fn energy(&self, g: &mut Graph, h: Var, z: Var) -> Result<Var> {
        let c = self.cross.forward(g, h, z)?;
        let r = g.sub(h, c)?;
        let fr = self.f.forward(g, r)?;
        let fr = g.softplus(fr);
        let fr = g.mean(fr);
        let gh = self.g.forward(g, h)?;
        let gh = g.softplus(gh);
        let gh = g.mean(gh);
        let gh = g.scale(gh, self.lambda);
        let e = g.add(fr, gh)?;
        // the shift commutes with the token means
        let shift = g.constant_from(g.shape(e).to_vec(), vec![-(1.0 + self.lambda) * std::f32::consts::LN_2])?;
        g.add(e, shift)
    }
}

/// `μ(Z, h_obs)`: maps `[flatten(Z); pooled(h_obs)]` to a `T_m × D` guess.
#[derive(Debug, Clone)]
pub struct Initializer {
    pub mlp: Mlp,
    pub len: usize,
    pub dim: usize,
}

impl Initializer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        m: Modality,
        len: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let k = cfg.bottleneck_tokens;
        Initializer {
            mlp: Mlp::new(store, &format!("init.{}", m.name()), &[k * d + d, d, len * d], rng),
            len,
            dim: d,
        }
    }

    /// `observed` are the encodings of present modalities; they are pooled by
    /// averaging each modality's token mean, so long sequences do not dominate.
    pub fn forward(&self, g: &mut Graph, z: Var, observed: &[Var]) -> Result<Var> {
        if observed.is_empty() {
            return Err(DcerError::Contract("initialiser needs an observed modality".into()));
        }
        let means: Vec<Var> = observed.iter().map(|&h| g.mean_rows(h)).collect();
        let stacked = g.concat_rows(&means)?;
        let pooled = g.mean_rows(stacked);
        let pooled = g.reshape(pooled, &[1, self.dim])?;
        let zf = g.reshape(z, &[1, g.value(z).len()])?;
        let input = g.concat_cols(&[zf, pooled])?;
        let out = self.mlp.forward(g, input)?;
        g.reshape(out, &[self.len, self.dim])
    }
}

/// Result of reconstructing one missing encoding.
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub h: Tensor,
    pub final_energy: f32,
    /// `E(h⁰), …, E(h^T)`.
    pub trajectory: Vec<f32>,
}

/// A scalar landscape the reconstruction loop can descend.
pub trait EnergyLandscape {
    fn energy_and_grad(&self, h: &Tensor) -> Result<(f32, Tensor)>;

    fn energy(&self, h: &Tensor) -> Result<f32> {
        Ok(self.energy_and_grad(h)?.0)
    }
}

/// `½‖h − h*‖²`, a test landscape with a known minimiser.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub target: Tensor,
}

impl EnergyLandscape for Quadratic {
    fn energy_and_grad(&self, h: &Tensor) -> Result<(f32, Tensor)> {
        if h.shape() != self.target.shape() {
            return Err(DcerError::shape("quadratic energy", h.shape(), self.target.shape()));
        }
        let diff: Vec<f32> = h.data().iter().zip(self.target.data()).map(|(a, b)| a - b).collect();
        let e = 0.5 * diff.iter().map(|d| (*d as f64) * (*d as f64)).sum::<f64>();
        Ok((e as f32, Tensor::new(h.shape().to_vec(), diff)?))
    }
}

/// A trained energy net with parameters frozen and `Z` fixed.
pub struct LearnedEnergy<'a> {
    pub net: &'a EnergyNet,
    pub params: &'a ParamStore,
    pub z: &'a Tensor,
}

impl EnergyLandscape for LearnedEnergy<'_> {
    fn energy_and_grad(&self, h: &Tensor) -> Result<(f32, Tensor)> {
        let mut g = Graph::with_params(self.params, false);
        let hv = g.input(h, true);
        let zv = g.constant(self.z);
        let e = self.net.energy(&mut g, hv, zv)?;
        let value = g.scalar(e);
        let grads = g.backward(e)?;
        let grad = grads
            .wrt(hv)
            .map(|d| Tensor::new(h.shape().to_vec(), d.to_vec()))
            .transpose()?
            .unwrap_or_else(|| Tensor::zeros(h.shape().to_vec()));
        Ok((value, grad))
    }

    fn energy(&self, h: &Tensor) -> Result<f32> {
        let mut g = Graph::with_params(self.params, false);
        let hv = g.constant(h);
        let zv = g.constant(self.z);
        let e = self.net.energy(&mut g, hv, zv)?;
        Ok(g.scalar(e))
    }
}

fn check_finite(step: usize, what: &str, v: &[f32]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DcerError::Divergence {
            step,
            what: what.to_string(),
        })
    }
}

/// Heavy-ball descent from `h0`:
/// `v^t = ρ·v^{t−1} + η·∇E(h^{t−1})`, `h^t = h^{t−1} − v^t`, `v⁰ = 0`.
pub fn momentum_descent<L: EnergyLandscape + ?Sized>(
    landscape: &L,
    h0: Tensor,
    steps: usize,
    eta: f32,
    rho: f32,
) -> Result<ReconResult> {
    let mut h = h0;
    let mut v = vec![0.0f32; h.numel()];
    let mut trajectory = Vec::with_capacity(steps + 1);
    for t in 1..=steps {
        let (e, grad) = landscape.energy_and_grad(&h)?;
        check_finite(t - 1, "energy", &[e])?;
        check_finite(t, "gradient", grad.data())?;
        trajectory.push(e);
        for ((vi, hi), gi) in v.iter_mut().zip(h.data_mut()).zip(grad.data()) {
            *vi = rho * *vi + eta * gi;
            *hi -= *vi;
        }
        check_finite(t, "iterate", h.data())?;
    }
    let e = landscape.energy(&h)?;
    check_finite(steps, "energy", &[e])?;
    trajectory.push(e);
    Ok(ReconResult {
        h,
        final_energy: e,
        trajectory,
    })
}

/// Adds `N(0, σ²)` noise in place.
pub fn perturb<R: Rng + ?Sized>(h: &mut Tensor, sigma: f32, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        h.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_steps_returns_start_and_its_energy() {
        let q = Quadratic {
            target: Tensor::zeros(vec![2, 3]),
        };
        let h0 = Tensor::full(vec![2, 3], 1.0);
        let r = momentum_descent(&q, h0.clone(), 0, 0.1, 0.9).unwrap();
        assert_eq!(r.h, h0);
        assert_eq!(r.trajectory, vec![3.0]);
        assert_eq!(r.final_energy, 3.0);
    }

    fn small_net(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> EnergyNet {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        EnergyNet::new(store, Modality::Audio, &cfg, rng)
    }

    #[test]
    fn zeroed_residual_head_leaves_only_the_prior_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = small_net(&mut store, &mut rng);
        let last = net.f.last().clone();
        store.get_mut(last.weight).data_mut().fill(0.0);
        store.get_mut(last.bias).data_mut().fill(0.0);
        let h = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let z = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let mut g = Graph::with_params(&store, false);
        let (hv, zv) = (g.constant(&h), g.constant(&z));
        let e = net.energy(&mut g, hv, zv).unwrap();
        let e = g.scalar(e) as f64;
        // independent oracle: λ · mean over tokens of softplus(g(h)) − ln 2
        let gh = net.g.forward(&mut g, hv).unwrap();
        let prior: f64 = g.value(gh).iter().map(|&x| (1.0 + (x as f64).exp()).ln() - 2f64.ln()).sum::<f64>() / 5.0;
        assert!((e - 0.1 * prior).abs() < 1e-5, "{e} vs {}", 0.1 * prior);
    }

    #[test]
    fn energy_is_bounded_below() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = small_net(&mut store, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 50.0);
        }
        let floor = -(1.0 + net.lambda) * std::f32::consts::LN_2;
        for _ in 0..20 {
            let h = Tensor::randn(vec![4, 8], 3.0, &mut rng);
            let z = Tensor::randn(vec![3, 8], 3.0, &mut rng);
            let mut g = Graph::with_params(&store, false);
            let (hv, zv) = (g.constant(&h), g.constant(&z));
            let e = net.energy(&mut g, hv, zv).unwrap();
            assert!(g.scalar(e) >= floor - 1e-5);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Quadratic {
            target: Tensor::zeros(vec![4]),
        };
        // η = 3 overshoots geometrically; f32 overflows after a few hundred steps
        let h0 = Tensor::randn(vec![4], 1.0, &mut rng);
        let err = momentum_descent(&q, h0, 2000, 3.0, 0.0).unwrap_err();
        match err {
            DcerError::Divergence { step, .. } => assert!(step > 0 && step < 2000),
            other => panic!("unexpected {other}"),
        }
    }
}
