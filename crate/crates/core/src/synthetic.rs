//! Synthetic multimodal sentiment data whose signal sits in known frequency
//! bands while the noise is broadband.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{Sample, TextInput};
use crate::error::{DcerError, Result};
use crate::runtime::derive_seed;
use crate::tensor::Tensor;

/// First id of the negative and neutral token ranges.
pub const NEGATIVE_START: usize = 8;
pub const NEUTRAL_START: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub audio_len: usize,
    pub audio_dim: usize,
    pub video_len: usize,
    pub video_dim: usize,
    pub text_len: usize,
    pub vocab: usize,
    /// Broadband noise std of the raw audio features.
    pub audio_noise: f32,
    /// Broadband noise std of the raw video features.
    pub video_noise: f32,
    /// Std of the per-sample offset between the label and the sentiment each
    /// of audio and video actually expresses.
    pub view_noise: f32,
    /// Probability that a text token carries sentiment.
    pub sentiment_token_prob: f32,
    pub label_range: (f32, f32),
    pub seed: u64,
    /// Train / validation fractions; the rest is test.
    pub train_frac: f32,
    pub val_frac: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            audio_len: 64,
            audio_dim: 8,
            video_len: 16,
            video_dim: 12,
            text_len: 12,
            vocab: 32,
            audio_noise: 0.5,
            video_noise: 0.5,
            view_noise: 1.0,
            sentiment_token_prob: 0.75,
            label_range: (-3.0, 3.0),
            seed: 7,
            train_frac: 0.55,
            val_frac: 0.10,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DcerError::Config(m));
        if self.n == 0 {
            return err("n must be positive".into());
        }
        if self.audio_len % 8 != 0 || self.audio_len < 16 {
            return err(format!("audio_len {} must be a multiple of 8 and >= 16", self.audio_len));
        }
        if self.audio_dim == 0 || self.video_len < 4 || self.video_dim < 3 || self.text_len == 0 {
            return err("modality dimensions too small".into());
        }
        if self.vocab <= NEUTRAL_START {
            return err(format!("vocab must exceed {NEUTRAL_START}, got {}", self.vocab));
        }
        let (lo, hi) = self.label_range;
        if !(lo < hi) {
            return err(format!("empty label range {lo}..{hi}"));
        }
        for (name, v) in [
            ("audio_noise", self.audio_noise),
            ("video_noise", self.video_noise),
            ("view_noise", self.view_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return err(format!("{name} must be a finite non-negative std"));
            }
        }
        if !(0.0..=1.0).contains(&self.sentiment_token_prob) {
            return err("sentiment_token_prob must be in [0,1]".into());
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac < 1.0) {
            return err("split fractions must leave a non-empty test set".into());
        }
        Ok(())
    }

    /// `(train, val, test)` sample counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = (self.n as f32 * self.train_frac).round() as usize;
        let val = (self.n as f32 * self.val_frac).round() as usize;
        (train, val, self.n - train - val)
    }
}

/// Low-frequency spatial pattern for video: the (1,1) DCT basis, unit RMS.
fn video_pattern(i: usize, j: usize, rows: usize, cols: usize) -> f32 {
    use std::f32::consts::PI;
    2.0 * (PI * (i as f32 + 0.5) / rows as f32).cos() * (PI * (j as f32 + 0.5) / cols as f32).cos()
}

/// High-frequency nuisance pattern near the corner of the DCT grid.
fn video_nuisance(i: usize, j: usize, rows: usize, cols: usize) -> f32 {
    use std::f32::consts::PI;
    let (k1, k2) = ((rows - 3) as f32, (cols - 2) as f32);
    2.0 * (PI * (i as f32 + 0.5) * k1 / rows as f32).cos() * (PI * (j as f32 + 0.5) * k2 / cols as f32).cos()
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    use std::f32::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[index as u64]));
    let (lo, hi) = spec.label_range;
    let half = (hi - lo) / 2.0;
    let centre = (hi + lo) / 2.0;
    let y: f32 = rng.gen_range(lo..hi);
    let s = (y - centre) / half;
    let view = Normal::new(0.0, spec.view_noise.max(0.0)).expect("std");
    let s_a = s + view.sample(&mut rng) / half;
    let s_v = s + view.sample(&mut rng) / half;

    let audio_noise = Normal::new(0.0, spec.audio_noise).expect("std");
    let (ta, da) = (spec.audio_len, spec.audio_dim);
    // slow component: one cycle over the window, inside the coarsest scale;
    // mid component: 3/16 cycles per step, inside the second detail band
    let mid = 3.0 / 16.0;
    let mut audio = vec![0.0; ta * da];
    for t in 0..ta {
        for c in 0..da {
            let phase = TAU * c as f32 / da as f32;
            let slow = (TAU * t as f32 / ta as f32 + phase).sin();
            let band = (TAU * mid * t as f32 + 2.0 * phase).sin();
            audio[t * da + c] = s_a * slow + s_a.abs() * band + audio_noise.sample(&mut rng);
        }
    }

    let video_noise = Normal::new(0.0, spec.video_noise).expect("std");
    let (tv, dv) = (spec.video_len, spec.video_dim);
    let nuisance: f32 = rng.sample(rand_distr::StandardNormal);
    let mut video = vec![0.0; tv * dv];
    for i in 0..tv {
        for j in 0..dv {
            video[i * dv + j] = s_v * video_pattern(i, j, tv, dv)
                + nuisance * video_nuisance(i, j, tv, dv)
                + video_noise.sample(&mut rng);
        }
    }

    let p_pos = ((1.0 + s) / 2.0).clamp(0.0, 1.0);
    let tokens = (0..spec.text_len)
        .map(|_| {
            if rng.gen::<f32>() < spec.sentiment_token_prob {
                if rng.gen::<f32>() < p_pos {
                    rng.gen_range(0..NEGATIVE_START)
                } else {
                    rng.gen_range(NEGATIVE_START..NEUTRAL_START)
                }
            } else {
                rng.gen_range(NEUTRAL_START..spec.vocab)
            }
        })
        .collect();

    Sample {
        id: format!("s{index:05}"),
        label: y,
        audio: Tensor::new(vec![ta, da], audio).expect("audio shape"),
        video: Tensor::new(vec![tv, dv], video).expect("video shape"),
        text: TextInput::Tokens(tokens),
    }
}

/// Train / validation / test partitions of one generated dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// All samples in index order, split contiguously (samples are i.i.d.).
pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let (n_train, n_val, _) = spec.split_sizes();
    let mut all: Vec<Sample> = (0..spec.n).map(|i| generate_sample(spec, i)).collect();
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Splits { train: all, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let spec = SyntheticSpec {
            n: 20,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (11, 2, 7));
        let s = &a.train[0];
        assert_eq!(s.audio.shape(), &[64, 8]);
        assert_eq!(s.video.shape(), &[16, 12]);
        match &s.text {
            TextInput::Tokens(t) => assert!(t.len() == 12 && t.iter().all(|&i| i < 32)),
            _ => panic!("tokens expected"),
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let bad = SyntheticSpec {
            audio_len: 60,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&bad), Err(DcerError::Config(_))));
    }
}
