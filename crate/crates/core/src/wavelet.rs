//! Learnable multi-level discrete wavelet transform along the time axis.

use crate::autodiff::{Graph, Var};
use crate::error::{DcerError, Result};
use crate::tensor::Tensor;

/// Daubechies-4 (8-tap, four vanishing moments) scaling filter.
pub const DB4_LOW: [f32; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

pub const FILTER_TAPS: usize = 8;

/// A low/high-pass analysis pair.
///
/// At construction the high-pass is the quadrature mirror of the low-pass,
/// `g[n] = (-1)^n h[7-n]`; once trained the two are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFilter {
    pub low_pass: [f32; FILTER_TAPS],
    pub high_pass: [f32; FILTER_TAPS],
}

impl WaveletFilter {
    pub fn db4() -> Self {
        WaveletFilter {
            low_pass: DB4_LOW,
            high_pass: quadrature_mirror(&DB4_LOW),
        }
    }

    pub fn low_tensor(&self) -> Tensor {
        Tensor::new(vec![FILTER_TAPS], self.low_pass.to_vec()).expect("filter shape")
    }

    pub fn high_tensor(&self) -> Tensor {
        Tensor::new(vec![FILTER_TAPS], self.high_pass.to_vec()).expect("filter shape")
    }
}

pub fn quadrature_mirror(low: &[f32; FILTER_TAPS]) -> [f32; FILTER_TAPS] {
    let mut g = [0.0; FILTER_TAPS];
    for (n, gn) in g.iter_mut().enumerate() {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        *gn = sign * low[FILTER_TAPS - 1 - n];
    }
    g
}

/// `{c_L, d_L, …, d_1}` as graph nodes; `details[0]` is the coarsest.
#[derive(Debug, Clone)]
pub struct WaveletPyramid {
    pub approx: Var,
    pub details: Vec<Var>,
    pub levels: usize,
}

impl WaveletPyramid {
    /// Scales from coarsest to finest: `c_L, d_L, …, d_1`.
    pub fn scales(&self) -> Vec<Var> {
        std::iter::once(self.approx)
            .chain(self.details.iter().copied())
            .collect()
    }

    pub fn total_len(&self, g: &Graph) -> usize {
        self.scales().iter().map(|&v| g.shape(v)[0]).sum()
    }
}

/// One analysis level along time for `x[t×d]` with periodic extension.
/// Returns `(approx, detail)`, each `[t/2 × d]`. Odd `t` is padded by
/// repeating the last row.
pub fn dwt_level(g: &mut Graph, x: Var, low: Var, high: Var) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(DcerError::shape("dwt_level", &shape, &[2]));
    }
    let taps = g.value(low).len();
    if shape[0] < taps {
        return Err(DcerError::InputTooShort {
            min: taps,
            got: shape[0],
        });
    }
    let x = if shape[0] % 2 == 1 {
        let last = g.slice_rows(x, shape[0] - 1, 1)?;
        g.concat_rows(&[x, last])?
    } else {
        x
    };
    let t = g.shape(x)[0];
    let both = g.dwt(x, low, high)?;
    let approx = g.slice_rows(both, 0, t / 2)?;
    let detail = g.slice_rows(both, t / 2, t / 2)?;
    Ok((approx, detail))
}

/// Applies [`dwt_level`] recursively to the approximation branch.
pub fn dwt_multi(
    g: &mut Graph,
    x: Var,
    low: Var,
    high: Var,
    levels: usize,
) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(DcerError::Config("wavelet levels must be >= 1".into()));
    }
    let t = g.shape(x)[0];
    if t < (1 << levels) {
        return Err(DcerError::InputTooShort {
            min: 1 << levels,
            got: t,
        });
    }
    let mut approx = x;
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = dwt_level(g, approx, low, high)?;
        details.push(d);
        approx = a;
    }
    details.reverse();
    Ok(WaveletPyramid {
        approx,
        details,
        levels,
    })
}

pub(crate) fn analysis_periodic(x: &[f32], t: usize, d: usize, low: &[f32], high: &[f32]) -> Vec<f32> {
    let half = t / 2;
    let mut out = vec![0.0; t * d];
    let (approx, detail) = out.split_at_mut(half * d);
    for n in 0..half {
        let a_row = &mut approx[n * d..(n + 1) * d];
        let d_row = &mut detail[n * d..(n + 1) * d];
        for (k, (&h, &gk)) in low.iter().zip(high).enumerate() {
            let src = &x[((2 * n + k) % t) * d..((2 * n + k) % t + 1) * d];
            for c in 0..d {
                a_row[c] += h * src[c];
                d_row[c] += gk * src[c];
            }
        }
    }
    out
}

pub(crate) fn analysis_periodic_backward(
    x: &[f32],
    t: usize,
    d: usize,
    low: &[f32],
    high: &[f32],
    grad: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let half = t / 2;
    let taps = low.len();
    let mut dx = vec![0.0; t * d];
    let mut dlow = vec![0.0; taps];
    let mut dhigh = vec![0.0; taps];
    let (ga, gd) = grad.split_at(half * d);
    for n in 0..half {
        let ga_row = &ga[n * d..(n + 1) * d];
        let gd_row = &gd[n * d..(n + 1) * d];
        for k in 0..taps {
            let row = (2 * n + k) % t;
            let src = &x[row * d..(row + 1) * d];
            let dst = &mut dx[row * d..(row + 1) * d];
            let mut sl = 0.0;
            let mut sh = 0.0;
            for c in 0..d {
                dst[c] += low[k] * ga_row[c] + high[k] * gd_row[c];
                sl += ga_row[c] * src[c];
                sh += gd_row[c] * src[c];
            }
            dlow[k] += sl;
            dhigh[k] += sh;
        }
    }
    (dx, dlow, dhigh)
}

/// Inverse of one periodic analysis level for an orthonormal filter pair.
/// `approx` and `detail` are `[t/2 × d]`; the result is `[t × d]`.
pub fn idwt_level(approx: &Tensor, detail: &Tensor, filt: &WaveletFilter) -> Result<Tensor> {
    if approx.shape() != detail.shape() || approx.shape().len() != 2 {
        return Err(DcerError::shape("idwt_level", approx.shape(), detail.shape()));
    }
    let half = approx.shape()[0];
    let d = approx.shape()[1];
    let t = 2 * half;
    let mut out = vec![0.0; t * d];
    for n in 0..half {
        for k in 0..FILTER_TAPS {
            let row = (2 * n + k) % t;
            for c in 0..d {
                out[row * d + c] += filt.low_pass[k] * approx.data()[n * d + c]
                    + filt.high_pass[k] * detail.data()[n * d + c];
            }
        }
    }
    Tensor::new(vec![t, d], out)
}

/// Inverse of a full pyramid given as `[c_L, d_L, …, d_1]` value tensors.
pub fn idwt_multi(scales: &[Tensor], filt: &WaveletFilter) -> Result<Tensor> {
    let (first, rest) = scales
        .split_first()
        .ok_or_else(|| DcerError::Contract("empty pyramid".into()))?;
    let mut approx = first.clone();
    for detail in rest {
        approx = idwt_level(&approx, detail, filt)?;
    }
    Ok(approx)
}
