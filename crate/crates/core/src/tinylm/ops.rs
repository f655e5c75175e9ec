//! Dense kernels used by the forward and backward passes.
//!
//! Every kernel processes rows independently and in a fixed order, so the
//! result for one row never depends on how many other rows share the call.
//! Speculative verification relies on this to be bit-identical with
//! one-token-at-a-time decoding.

pub(crate) const LN_EPS: f32 = 1e-5;

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

#[inline]
pub(crate) fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[n×m] = a[n×k] · w[k×m]`, plus `bias[m]` when given.
pub(crate) fn matmul(
    out: &mut [f32],
    a: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    k: usize,
    m: usize,
) {
    let n = a.len() / k;
    debug_assert_eq!(out.len(), n * m);
    debug_assert_eq!(w.len(), k * m);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        match bias {
            Some(b) => row.copy_from_slice(b),
            None => row.fill(0.0),
        }
        let ai = &a[i * k..(i + 1) * k];
        for (kk, &aik) in ai.iter().enumerate() {
            axpy(row, aik, &w[kk * m..(kk + 1) * m]);
        }
    }
}

/// `da[n×k] += dout[n×m] · wᵀ`
pub(crate) fn matmul_back_input(da: &mut [f32], dout: &[f32], w: &[f32], k: usize, m: usize) {
    let n = dout.len() / m;
    for i in 0..n {
        let drow = &dout[i * m..(i + 1) * m];
        let darow = &mut da[i * k..(i + 1) * k];
        for (kk, dak) in darow.iter_mut().enumerate() {
            *dak += dot(drow, &w[kk * m..(kk + 1) * m]);
        }
    }
}

/// `dw[k×m] += aᵀ · dout`
pub(crate) fn matmul_back_weight(dw: &mut [f32], a: &[f32], dout: &[f32], k: usize, m: usize) {
    let n = dout.len() / m;
    for i in 0..n {
        let drow = &dout[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                axpy(&mut dw[kk * m..(kk + 1) * m], aik, drow);
            }
        }
    }
}

/// `db[m] += Σ_rows dout`
pub(crate) fn bias_back(db: &mut [f32], dout: &[f32]) {
    for row in dout.chunks_exact(db.len()) {
        axpy(db, 1.0, row);
    }
}

/// Row-wise layer norm. Writes normalized rows into `xhat` and reciprocal
/// standard deviations into `rstd` when those buffers are provided.
pub(crate) fn layer_norm(
    out: &mut [f32],
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    mut xhat: Option<&mut [f32]>,
    mut rstd: Option<&mut [f32]>,
) {
    let d = gain.len();
    for (i, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            o[j] = xh * gain[j] + bias[j];
            if let Some(buf) = xhat.as_deref_mut() {
                buf[i * d + j] = xh;
            }
        }
        if let Some(buf) = rstd.as_deref_mut() {
            buf[i] = r;
        }
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain`, `dbias`.
pub(crate) fn layer_norm_back(
    dx: &mut [f32],
    dy: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gain: &[f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) {
    let d = gain.len();
    let mut dxhat = vec![0.0f32; d];
    for (i, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0f32;
        let mut mean_dxhat_xhat = 0.0f32;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_xhat /= d as f32;
        let r = rstd[i];
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dxr[j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax; returns log of the normalizer.
pub(crate) fn softmax_in_place(v: &mut [f32]) -> f32 {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
    max + sum.ln()
}

/// Log-softmax of a row, computed in f64 for stable log-probabilities.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max
        + logits
            .iter()
            .map(|&z| (z as f64 - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&z| z as f64 - lse).collect()
}
