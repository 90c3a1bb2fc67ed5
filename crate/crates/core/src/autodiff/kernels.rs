//! Raw row-major kernels. The tape and the tape-free inference path both
//! call these, so a hard-gated training forward and an assembled
//! deployment forward perform identical arithmetic.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{axpy, dot, expf, sqrtf};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `a[m,k] · b[k,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]^T`
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `acc[k,n] += a[m,k]^T · c[m,n]`
pub fn matmul_at_acc(a: &[f32], c: &[f32], m: usize, k: usize, n: usize, acc: &mut [f32]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, crow, &mut acc[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn add_row_inplace(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn softmax_rows(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(cols) {
        softmax_inplace(row);
    }
    out
}

pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = expf(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise layer normalization. Returns `(out, xhat, rstd)`.
pub fn layer_norm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    cols: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f32>() / cols as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let rs = 1.0 / sqrtf(var + LAYER_NORM_EPS);
        rstd[r] = rs;
        for c in 0..cols {
            let h = (xr[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

/// Gradients of layer normalization given the cached `xhat` and `rstd`.
/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dout: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    cols: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = rstd.len();
    let mut dx = vec![0.0; dout.len()];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let n = cols as f32;
    for r in 0..rows {
        let d = &dout[r * cols..(r + 1) * cols];
        let h = &xhat[r * cols..(r + 1) * cols];
        let mut sum_dh = 0.0f32;
        let mut sum_dh_h = 0.0f32;
        for c in 0..cols {
            dgamma[c] += d[c] * h[c];
            dbeta[c] += d[c];
            let dh = d[c] * gamma[c];
            sum_dh += dh;
            sum_dh_h += dh * h[c];
        }
        for c in 0..cols {
            let dh = d[c] * gamma[c];
            dx[r * cols + c] = rstd[r] * (dh - sum_dh / n - h[c] * sum_dh_h / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Multi-head causal self-attention over `q, k, v: [t, d]`.
/// Returns the `[t, d]` output and the per-head probabilities
/// `[heads, t, t]` (zero above the diagonal).
pub fn causal_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / sqrtf(dh as f32);
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            for (j, p) in prow.iter_mut().enumerate() {
                *p = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_inplace(prow);
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in prow.iter().enumerate() {
                axpy(p, &v[j * d + off..j * d + off + dh], orow);
            }
        }
    }
    (out, probs)
}

/// Backward of [`causal_attention`]. Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward(
    dout: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / sqrtf(dh as f32);
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0f32; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let doi = &dout[i * d + off..i * d + off + dh];
            let prow = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            let mut weighted = 0.0f32;
            for j in 0..=i {
                axpy(prow[j], doi, &mut dv[j * d + off..j * d + off + dh]);
                dp[j] = dot(doi, &v[j * d + off..j * d + off + dh]);
                weighted += prow[j] * dp[j];
            }
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds != 0.0 {
                    let kj = &k[j * d + off..j * d + off + dh];
                    axpy(ds, kj, &mut dq[i * d + off..i * d + off + dh]);
                    let qi = &q[i * d + off..i * d + off + dh];
                    axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// 1-D dilated causal convolution. `x: [t, cin]`, `w: [kernel, cin, cout]`,
/// `bias: [cout]`. Tap `j` reads position `s - (kernel - 1 - j) * dilation`;
/// positions before the start of the sequence read zeros.
pub fn dilated_causal_conv(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    t: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; t * cout];
    for s in 0..t {
        let orow = &mut out[s * cout..(s + 1) * cout];
        orow.copy_from_slice(bias);
        for j in 0..kernel {
            let back = (kernel - 1 - j) * dilation;
            if back > s {
                continue;
            }
            let xr = &x[(s - back) * cin..(s - back + 1) * cin];
            for (ci, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    let wrow = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    axpy(xv, wrow, orow);
                }
            }
        }
    }
    out
}

/// Backward of [`dilated_causal_conv`]. Returns `(dx, dw, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn dilated_causal_conv_backward(
    dout: &[f32],
    x: &[f32],
    w: &[f32],
    t: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; t * cin];
    let mut dw = vec![0.0; kernel * cin * cout];
    let mut db = vec![0.0; cout];
    for s in 0..t {
        let drow = &dout[s * cout..(s + 1) * cout];
        for (b, g) in db.iter_mut().zip(drow) {
            *b += g;
        }
        for j in 0..kernel {
            let back = (kernel - 1 - j) * dilation;
            if back > s {
                continue;
            }
            let src = s - back;
            for ci in 0..cin {
                let idx = (j * cin + ci) * cout;
                dx[src * cin + ci] += dot(drow, &w[idx..idx + cout]);
                let xv = x[src * cin + ci];
                if xv != 0.0 {
                    axpy(xv, drow, &mut dw[idx..idx + cout]);
                }
            }
        }
    }
    (dx, dw, db)
}
