//! Orthonormal 2-D DCT and soft radial frequency bands.

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{DcerError, Result};
use crate::tensor::Tensor;

/// Number of radial frequency bands.
pub const NUM_BANDS: usize = 4;

/// Default mask sharpness.
pub const DEFAULT_TAU: f32 = 0.05;

/// Orthonormal DCT-II matrix `C[k][n]`, so `X = C·x` and `x = Cᵀ·X`.
pub fn dct_matrix(n: usize) -> Tensor {
    let mut data = vec![0.0f32; n * n];
    let nf = n as f64;
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf);
            data[k * n + i] = (alpha * angle.cos()) as f32;
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

fn check_2d(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(DcerError::shape(op, s, &[2])),
    }
}

/// Type-II DCT along both axes of a `rows×cols` map.
pub fn dct2(x: &Tensor) -> Result<Tensor> {
    let (r, c) = check_2d("dct2", x)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = dct2_graph(&mut g, xv, &dct_matrix(r), &dct_matrix(c))?;
    Ok(g.tensor(out))
}

/// Exact inverse of [`dct2`].
pub fn idct2(coeffs: &Tensor) -> Result<Tensor> {
    let (r, c) = check_2d("idct2", coeffs)?;
    let mut g = Graph::new();
    let cv = g.constant(coeffs);
    let out = idct2_graph(&mut g, cv, &dct_matrix(r), &dct_matrix(c))?;
    Ok(g.tensor(out))
}

/// `C_r · x · C_cᵀ` on the tape.
pub fn dct2_graph(g: &mut Graph, x: Var, c_rows: &Tensor, c_cols: &Tensor) -> Result<Var> {
    let cr = g.constant(c_rows);
    let cc = g.constant(c_cols);
    let left = g.matmul(cr, x)?;
    g.matmul_t(left, cc)
}

/// `C_rᵀ · X · C_c` on the tape.
pub fn idct2_graph(g: &mut Graph, coeffs: Var, c_rows: &Tensor, c_cols: &Tensor) -> Result<Var> {
    let shape = g.shape(coeffs).to_vec();
    let cr = g.constant(c_rows);
    let cc = g.constant(c_cols);
    let crt = g.transpose(cr)?;
    let left = g.matmul(crt, coeffs)?;
    let out = g.matmul(left, cc)?;
    debug_assert_eq!(g.shape(out), shape.as_slice());
    Ok(out)
}

/// Normalised radial frequency `√((i/rows)² + (j/cols)²)/√2` for every grid
/// position, row-major.
pub fn radial_grid(rows: usize, cols: usize) -> Vec<f32> {
    let mut r = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let a = i as f32 / rows as f32;
            let b = j as f32 / cols as f32;
            r.push((a * a + b * b).sqrt() / std::f32::consts::SQRT_2);
        }
    }
    r
}

/// Telescoping sigmoid masks. With `boundaries = [b_1, …, b_{B-1}]`, band `k`
/// gets `σ((r − b_{k−1})/τ) − σ((r − b_k)/τ)` where `b_0 = −∞`, `b_B = +∞`.
/// Output is `[B, radii.len()]`, row-major.
pub fn soft_band_masks(radii: &[f32], boundaries: &[f32], tau: f32) -> Vec<f32> {
    let bands = boundaries.len() + 1;
    let n = radii.len();
    let mut out = vec![0.0; bands * n];
    for (p, &r) in radii.iter().enumerate() {
        let mut upper = 1.0;
        for k in 0..bands {
            let lower = if k < boundaries.len() {
                sigmoid((r - boundaries[k]) / tau)
            } else {
                0.0
            };
            out[k * n + p] = upper - lower;
            upper = lower;
        }
    }
    out
}

/// Maps unconstrained increments `u[0..B]` to ordered boundaries in `(0,1)`:
/// `b_k = Σ_{j≤k} softplus(u_j) / Σ_j softplus(u_j)` for `k < B−1`.
pub fn boundaries_from_increments(g: &mut Graph, raw: Var) -> Result<Var> {
    let n = g.value(raw).len();
    if n < 2 {
        return Err(DcerError::Config("need at least two band increments".into()));
    }
    let inc = g.softplus(raw);
    let inc = g.reshape(inc, &[n, 1])?;
    // strictly lower-triangular-inclusive cumulative sum, dropping the last
    let mut tri = vec![0.0; (n - 1) * n];
    for k in 0..n - 1 {
        for j in 0..=k {
            tri[k * n + j] = 1.0;
        }
    }
    let tri = g.constant_from(vec![n - 1, n], tri)?;
    let cum = g.matmul(tri, inc)?;
    let total = g.sum(inc);
    let b = g.div_scalar(cum, total)?;
    g.reshape(b, &[n - 1])
}

/// The DCT coefficient grid together with its soft band partition.
#[derive(Debug, Clone)]
pub struct DctBands {
    pub coefficients: Tensor,
    pub boundaries: Vec<f32>,
    /// `[B, rows·cols]` soft masks.
    pub band_masks: Tensor,
}

impl DctBands {
    pub fn num_bands(&self) -> usize {
        self.band_masks.shape()[0]
    }

    pub fn mask(&self, band: usize) -> &[f32] {
        let n = self.band_masks.shape()[1];
        &self.band_masks.data()[band * n..(band + 1) * n]
    }
}

/// Partitions a coefficient grid into soft radial bands.
pub fn band_partition(coeffs: &Tensor, boundaries: &[f32], tau: f32) -> Result<DctBands> {
    let (rows, cols) = check_2d("band_partition", coeffs)?;
    let ordered = boundaries.windows(2).all(|w| w[0] < w[1]);
    if !ordered || boundaries.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
        return Err(DcerError::Contract(format!(
            "band boundaries must be strictly increasing in (0,1), got {boundaries:?}"
        )));
    }
    let radii = radial_grid(rows, cols);
    let masks = soft_band_masks(&radii, boundaries, tau);
    Ok(DctBands {
        coefficients: coeffs.clone(),
        boundaries: boundaries.to_vec(),
        band_masks: Tensor::new(vec![boundaries.len() + 1, rows * cols], masks)?,
    })
}

/// Band-limited reconstructions `idct2(mask_k ⊙ X)` for each band, as plain
/// values. Used for inspection; the encoder builds the same thing on the tape.
pub fn band_limited_maps(bands: &DctBands) -> Result<Vec<Tensor>> {
    let shape = bands.coefficients.shape().to_vec();
    (0..bands.num_bands())
        .map(|k| {
            let masked: Vec<f32> = bands
                .coefficients
                .data()
                .iter()
                .zip(bands.mask(k))
                .map(|(c, m)| c * m)
                .collect();
            idct2(&Tensor::new(shape.clone(), masked)?)
        })
        .collect()
}
