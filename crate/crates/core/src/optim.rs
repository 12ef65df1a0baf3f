//! Adaptive-moment optimiser with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{DcerError, Result};
use crate::params::{Decay, GradBuffer, ParamStore};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f32>>,
    #[serde(skip)]
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        AdamW {
            lr,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters without a gradient this step are left
    /// untouched, including weight decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(DcerError::Contract("optimiser state does not match parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let decay = match params.decay(id) {
                Decay::Apply => self.weight_decay,
                Decay::Exempt => 0.0,
            };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + decay * p[i]);
            }
        }
        Ok(())
    }
}
