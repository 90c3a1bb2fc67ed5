//! Structure controller: interaction sequence to per-block execute/skip.
//!
//! A GRU over the embedded sequence feeds a linear head with `2L` outputs,
//! read as rows `(β_l0, β_l1)`. Training relaxes the choice with Gumbel
//! noise and a temperature softmax, forwarding the hard one-hot sample and
//! back-propagating through the relaxation. Inference takes the argmax of
//! `β` directly, ties going to execute.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::backbone::GateIndicator;
use crate::error::{Error, Result};
use crate::math::{exp, lnf};
use crate::nn::{gru, gru_init, linear, xavier, GruVars};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Extractor `E` and logits head `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerWeights {
    /// `w_ih, w_hh, b_ih, b_hh`
    pub gru: Vec<Tensor>,
    /// `[d_c, 2L]`
    pub head_w: Tensor,
    /// `[2L]`
    pub head_b: Tensor,
}

impl ControllerWeights {
    pub fn init(rng: &mut RngState, d: usize, d_c: usize, n_blocks: usize) -> Self {
        Self {
            gru: gru_init(rng, d, d_c),
            head_w: xavier(rng, d_c, 2 * n_blocks, &[d_c, 2 * n_blocks]),
            head_b: Tensor::zeros(&[2 * n_blocks]),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.head_b.numel() / 2
    }
}

/// `β` as an `L×2` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureLogits {
    beta: Tensor,
}

impl StructureLogits {
    pub fn new(beta: Tensor) -> Result<Self> {
        if beta.rank() != 2 || beta.shape()[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "structure logits",
                lhs: beta.shape().to_vec(),
                rhs: vec![beta.numel() / 2, 2],
            });
        }
        if !beta.is_finite() {
            return Err(Error::NumericFault {
                op: "structure logits",
            });
        }
        Ok(Self { beta })
    }

    pub fn from_rows(rows: &[[f32; 2]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            beta: Tensor::from_parts(vec![rows.len(), 2], data),
        }
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn n_blocks(&self) -> usize {
        self.beta.shape()[0]
    }

    /// Row softmax of `β`.
    pub fn alpha(&self) -> Tensor {
        let data = self
            .beta
            .data()
            .chunks_exact(2)
            .flat_map(|r| {
                let (a0, a1) = softmax2(r[0] as f64, r[1] as f64);
                [a0 as f32, a1 as f32]
            })
            .collect();
        Tensor::from_parts(self.beta.shape().to_vec(), data)
    }
}

fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = (exp(a - m), exp(b - m));
    (ea / (ea + eb), eb / (ea + eb))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GumbelConfig {
    pub tau: f32,
    /// Sample noise at inference as well (study flag; deployment is noiseless).
    pub train_stochastic: bool,
}

impl GumbelConfig {
    pub fn new(tau: f32) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(alloc::format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self {
            tau,
            train_stochastic: false,
        })
    }
}

/// Graph-side controller: embedded rows `[T, d]` to `β` `[L, 2]`.
pub fn controller_logits(
    g: &mut Graph,
    gru_vars: &GruVars,
    head_w: Var,
    head_b: Var,
    emb: Var,
) -> Result<Var> {
    let h = gru(g, gru_vars, emb, None)?;
    let flat = linear(g, h, head_w, head_b)?;
    let l = g.shape(flat)[0] / 2;
    g.reshape(flat, &[l, 2])
}

pub fn bind(g: &mut Graph, w: &ControllerWeights) -> Result<(GruVars, Var, Var)> {
    let gv = w
        .gru
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        GruVars::from_slice(&gv),
        g.constant(w.head_w.clone())?,
        g.constant(w.head_b.clone())?,
    ))
}

/// `β = H(E(seq))` for an embedded sequence `[T, d]`.
pub fn extract_structure_logits(w: &ControllerWeights, emb: &Tensor) -> Result<StructureLogits> {
    if emb.numel() == 0 {
        return Err(Error::contract("controller needs a nonempty sequence"));
    }
    let mut g = Graph::new();
    let (gv, hw, hb) = bind(&mut g, w)?;
    let x = g.constant(emb.clone())?;
    let beta = controller_logits(&mut g, &gv, hw, hb, x)?;
    StructureLogits::new(g.value(beta).clone())
}

/// Gumbel noise `G = -ln(-ln U)` of shape `[n_blocks, 2]`.
pub fn gumbel_noise(rng: &mut RngState, n_blocks: usize) -> Tensor {
    let data = (0..2 * n_blocks)
        .map(|_| -lnf(-lnf(rng.uniform())))
        .collect();
    Tensor::from_parts(vec![n_blocks, 2], data)
}

/// Row index of the larger entry; ties go to 0.
fn hard_rows(m: &Tensor) -> GateIndicator {
    GateIndicator::from_execute(m.data().chunks_exact(2).map(|r| r[0] >= r[1]).collect())
}

/// `v' = softmax((β + G) / τ)` and its hard one-hot sample.
pub fn relax(beta: &Tensor, noise: &Tensor, tau: f32) -> Result<(Tensor, GateIndicator)> {
    if beta.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "gumbel relax",
            lhs: beta.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let data: Vec<f32> = beta
        .data()
        .chunks_exact(2)
        .zip(noise.data().chunks_exact(2))
        .flat_map(|(b, n)| {
            let t = tau as f64;
            let (v0, v1) = softmax2((b[0] + n[0]) as f64 / t, (b[1] + n[1]) as f64 / t);
            [v0 as f32, v1 as f32]
        })
        .collect();
    let v = Tensor::from_parts(beta.shape().to_vec(), data);
    let hard = hard_rows(&v);
    Ok((v, hard))
}

pub fn gumbel_relax(
    logits: &StructureLogits,
    rng: &mut RngState,
    cfg: &GumbelConfig,
) -> Result<(Tensor, GateIndicator)> {
    let noise = gumbel_noise(rng, logits.n_blocks());
    relax(logits.beta(), &noise, cfg.tau)
}

/// Graph-side relaxation: returns the straight-through gate var (forward
/// value exactly the hard sample) and the hard decision.
pub fn gumbel_straight_through(
    g: &mut Graph,
    beta: Var,
    noise: &Tensor,
    tau: f32,
) -> Result<(Var, GateIndicator)> {
    let nv = g.constant(noise.clone())?;
    let perturbed = g.add(beta, nv)?;
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    let soft = g.softmax(scaled)?;
    let hard = hard_rows(g.value(soft));
    let st = g.straight_through(hard.to_tensor(), soft)?;
    Ok((st, hard))
}

/// Execute iff `β_l0 ≥ β_l1`.
pub fn harden(logits: &StructureLogits) -> GateIndicator {
    hard_rows(logits.beta())
}
