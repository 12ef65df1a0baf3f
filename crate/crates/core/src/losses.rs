//! The four objective terms as tape functions.

use crate::autodiff::{Graph, Var};
use crate::error::{DcerError, Result};

/// `(1/B)·Σ (y_i − ŷ_i)²` for predictions `[B]`.
pub fn loss_pred(g: &mut Graph, predictions: Var, targets: &[f32]) -> Result<Var> {
    if g.value(predictions).len() != targets.len() {
        return Err(DcerError::shape("loss_pred", g.shape(predictions), &[targets.len()]));
    }
    let y = g.constant_from(g.shape(predictions).to_vec(), targets.to_vec())?;
    mean_square_diff(g, predictions, y)
}

/// Mean over pairs of the element-mean squared error; 0 for no pairs.
pub fn loss_recon(g: &mut Graph, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return g.constant_from(vec![1], vec![0.0]);
    }
    let terms = pairs
        .iter()
        .map(|&(h, h_hat)| mean_square_diff(g, h, h_hat))
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// Mean of final energies; 0 for none.
pub fn loss_energy(g: &mut Graph, energies: &[Var]) -> Result<Var> {
    if energies.is_empty() {
        return g.constant_from(vec![1], vec![0.0]);
    }
    mean_of(g, energies)
}

/// Element-mean squared difference between two bottleneck states.
pub fn loss_joint(g: &mut Graph, z_full: Var, z_recon: Var) -> Result<Var> {
    mean_square_diff(g, z_full, z_recon)
}

fn mean_square_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

fn mean_of(g: &mut Graph, scalars: &[Var]) -> Result<Var> {
    let rows = scalars
        .iter()
        .map(|&s| g.reshape(s, &[1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat_rows(&rows)?;
    Ok(g.mean(cat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hand_values() {
        let mut g = Graph::new();
        let p = g.constant(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let l = loss_pred(&mut g, p, &[1.0, -1.0]).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let same = loss_pred(&mut g, p, &[0.0, 0.0]).unwrap();
        assert_eq!(g.scalar(same), 0.0);

        let h = g.constant(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let h_hat = g.constant(&Tensor::zeros(vec![1, 2]));
        let r = loss_recon(&mut g, &[(h, h_hat)]).unwrap();
        assert_eq!(g.scalar(r), 0.5);
        let r0 = loss_recon(&mut g, &[(h, h)]).unwrap();
        assert_eq!(g.scalar(r0), 0.0);
        let none = loss_recon(&mut g, &[]).unwrap();
        assert_eq!(g.scalar(none), 0.0);

        let z1 = g.constant(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let z0 = g.constant(&Tensor::zeros(vec![1, 2]));
        let j = loss_joint(&mut g, z1, z0).unwrap();
        assert_eq!(g.scalar(j), 1.0);
        let j0 = loss_joint(&mut g, z1, z1).unwrap();
        assert_eq!(g.scalar(j0), 0.0);
    }
}
