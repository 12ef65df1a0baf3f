//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use dcer_core::synthetic::Splits;
use dcer_core::{Sample, TextInput};
use nalgebra::{DMatrix, DVector};

/// Flattened raw audio and video plus a token histogram over the vocabulary.
pub fn flat_features(s: &Sample, vocab: usize) -> Vec<f64> {
    let mut x: Vec<f64> = s.audio.data().iter().chain(s.video.data()).map(|&v| v as f64).collect();
    match &s.text {
        TextInput::Tokens(ids) => {
            let mut hist = vec![0.0; vocab];
            for &id in ids {
                hist[id] += 1.0;
            }
            x.extend(hist);
        }
        TextInput::Embeddings(t) => x.extend(t.data().iter().map(|&v| v as f64)),
    }
    x
}

fn design(samples: &[Sample], vocab: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| flat_features(s, vocab)).collect();
    let p = rows[0].len() + 1;
    let x = DMatrix::from_fn(rows.len(), p, |i, j| if j + 1 == p { 1.0 } else { rows[i][j] });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.label as f64));
    (x, y)
}

/// Closed-form ridge `w = (XᵀX + λI)⁻¹Xᵀy`; the intercept is not penalised.
fn ridge_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let mut gram = x.transpose() * x;
    let p = gram.nrows();
    for i in 0..p - 1 {
        gram[(i, i)] += lambda;
    }
    let rhs = x.transpose() * y;
    gram.cholesky().expect("ridge system is positive definite").solve(&rhs)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Ridge oracle correlation on the test split; λ is chosen on validation
/// from a log grid.
pub fn ridge_oracle_corr(splits: &Splits, vocab: usize) -> f64 {
    let (xtr, ytr) = design(&splits.train, vocab);
    let (xva, yva) = design(&splits.val, vocab);
    let (xte, yte) = design(&splits.test, vocab);
    let mut best = (f64::NEG_INFINITY, 1.0);
    for e in -2..=5 {
        let lambda = 10f64.powi(e);
        let w = ridge_fit(&xtr, &ytr, lambda);
        let c = pearson((&xva * &w).as_slice(), yva.as_slice());
        if c > best.0 {
            best = (c, lambda);
        }
    }
    let w = ridge_fit(&xtr, &ytr, best.1);
    pearson((&xte * &w).as_slice(), yte.as_slice())
}
