//! Small layers built on the tape: affine maps and a gated recurrent unit.
//!
//! Inference reuses the same builders on a graph of constants, so the
//! device-side and training-side computations are the same arithmetic.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `x · w + b` with `w[in, out]`; `x` may be a vector or a matrix of rows.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Xavier-normal matrix `[fan_in, fan_out]`.
pub fn xavier(rng: &mut RngState, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let std = crate::math::sqrtf(2.0 / (fan_in + fan_out) as f32);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.normal_vec(n, std))
}

/// Uniform in `[-bound, bound]`.
pub fn uniform_init(rng: &mut RngState, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Gate order inside the packed matrices is reset, update, candidate.
pub const GRU_TENSORS: [&str; 4] = ["w_ih", "w_hh", "b_ih", "b_hh"];

pub fn gru_shapes(input: usize, hidden: usize) -> [Vec<usize>; 4] {
    [
        vec![input, 3 * hidden],
        vec![hidden, 3 * hidden],
        vec![3 * hidden],
        vec![3 * hidden],
    ]
}

pub fn gru_init(rng: &mut RngState, input: usize, hidden: usize) -> Vec<Tensor> {
    let bound = 1.0 / crate::math::sqrtf(hidden as f32);
    gru_shapes(input, hidden)
        .iter()
        .map(|s| uniform_init(rng, s, bound))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl GruVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_ih: v[0],
            w_hh: v[1],
            b_ih: v[2],
            b_hh: v[3],
        }
    }

    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.w_hh)[0]
    }
}

/// Runs the recurrence over the rows of `xs[t, input]` and returns the
/// final hidden state `[hidden]`. `h0` defaults to zeros.
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = n + z ⊙ (h − n)
/// ```
pub fn gru(g: &mut Graph, p: &GruVars, xs: Var, h0: Option<Var>) -> Result<Var> {
    let hid = p.hidden(g);
    let (steps, _) = g.value(xs).as_matrix();
    if steps == 0 || g.value(xs).numel() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut h = match h0 {
        Some(h) => {
            if g.shape(h) != [hid] {
                return Err(Error::ShapeMismatch {
                    op: "gru initial state",
                    lhs: g.shape(h).to_vec(),
                    rhs: vec![hid],
                });
            }
            h
        }
        None => g.constant(Tensor::zeros(&[hid]))?,
    };
    let xw = linear(g, xs, p.w_ih, p.b_ih)?;
    for t in 0..steps {
        let base = t * 3 * hid;
        let hw = linear(g, h, p.w_hh, p.b_hh)?;
        let x_rz = g.slice(xw, base, &[2 * hid])?;
        let h_rz = g.slice(hw, 0, &[2 * hid])?;
        let a_rz = g.add(x_rz, h_rz)?;
        let rz = g.sigmoid(a_rz)?;
        let r = g.slice(rz, 0, &[hid])?;
        let z = g.slice(rz, hid, &[hid])?;
        let x_n = g.slice(xw, base + 2 * hid, &[hid])?;
        let h_n = g.slice(hw, 2 * hid, &[hid])?;
        let gated = g.mul(r, h_n)?;
        let pre = g.add(x_n, gated)?;
        let n = g.tanh(pre)?;
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        h = g.add(n, zd)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_gru(x: &[Vec<f32>], w: &[Tensor], hid: usize) -> Vec<f64> {
        // scalar re-derivation in f64
        let (w_ih, w_hh, b_ih, b_hh) = (w[0].data(), w[1].data(), w[2].data(), w[3].data());
        let input = x[0].len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0f64; hid];
        for xt in x {
            let gate = |col: usize, hv: &[f64]| -> (f64, f64) {
                let xi: f64 = (0..input)
                    .map(|i| xt[i] as f64 * w_ih[i * 3 * hid + col] as f64)
                    .sum::<f64>()
                    + b_ih[col] as f64;
                let hh: f64 = (0..hid)
                    .map(|i| hv[i] * w_hh[i * 3 * hid + col] as f64)
                    .sum::<f64>()
                    + b_hh[col] as f64;
                (xi, hh)
            };
            let mut next = vec![0.0; hid];
            for j in 0..hid {
                let (xr, hr) = gate(j, &h);
                let (xz, hz) = gate(hid + j, &h);
                let (xn, hn) = gate(2 * hid + j, &h);
                let r = sig(xr + hr);
                let z = sig(xz + hz);
                let n = (xn + r * hn).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
        }
        h
    }

    #[test]
    fn gru_matches_scalar_reference() {
        let mut rng = RngState::new(3);
        let (input, hid, steps) = (5, 4, 6);
        let w = gru_init(&mut rng, input, hid);
        let x: Vec<Vec<f32>> = (0..steps).map(|_| rng.normal_vec(input, 1.0)).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = w.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let flat: Vec<f32> = x.iter().flatten().copied().collect();
        let xs = g
            .constant(Tensor::new(&[steps, input], flat).unwrap())
            .unwrap();
        let h = gru(&mut g, &GruVars::from_slice(&vars), xs, None).unwrap();
        let oracle = reference_gru(&x, &w, hid);
        for (a, b) in g.value(h).data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gru_rejects_empty_input() {
        let mut rng = RngState::new(3);
        let w = gru_init(&mut rng, 2, 2);
        let mut g = Graph::new();
        let vars: Vec<Var> = w.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let xs = g.constant(Tensor::zeros(&[0, 2])).unwrap();
        assert_eq!(
            gru(&mut g, &GruVars::from_slice(&vars), xs, None),
            Err(Error::EmptySequence)
        );
    }

    #[test]
    fn linear_on_vector_and_matrix() {
        let mut g = Graph::new();
        let w = g
            .constant(Tensor::new(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap())
            .unwrap();
        let b = g.constant(Tensor::vector(vec![0.5, 0.5, 0.5])).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.shape(y), &[3]);
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 0.5]);
    }
}
