//! Structural parameter mapper: latent interest to per-block weights.
//!
//! A second GRU `E'` reads the embedded sequence, conditioned on the
//! structure logits `β`, and its final state `h` feeds `L` independent
//! linear heads, head `k` emitting the flat parameter vector of block `k`.
//! By default `β` is projected into the initial hidden state; the
//! appended-token variant projects it to an extra input row instead.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::backbone::{
    block_param_count, flatten_block, init_block, unflatten_block, BackboneConfig,
};
use crate::controller::StructureLogits;
use crate::error::{Error, Result};
use crate::nn::{gru, gru_init, linear, xavier, GruVars};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// How `β` conditions the extractor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BetaInjection {
    #[default]
    InitialState,
    AppendedToken,
}

pub const DEFAULT_HEAD_SCALE: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct MapperWeights {
    pub injection: BetaInjection,
    /// `w_ih, w_hh, b_ih, b_hh`
    pub gru: Vec<Tensor>,
    /// `[2L, d_m]` for the initial state, `[2L, d]` for the appended token.
    pub seed_w: Tensor,
    pub seed_b: Tensor,
    /// `[d_m, P]` per block.
    pub heads_w: Vec<Tensor>,
    /// `[P]` per block.
    pub heads_b: Vec<Tensor>,
}

impl MapperWeights {
    /// Head matrices ~ N(0, head_scale²); each head bias is an independent
    /// reference initialization of its block.
    pub fn init(
        rng: &mut RngState,
        cfg: &BackboneConfig,
        d_m: usize,
        injection: BetaInjection,
        head_scale: f32,
    ) -> Self {
        let l = cfg.n_blocks;
        let p = block_param_count(cfg);
        let seed_out = match injection {
            BetaInjection::InitialState => d_m,
            BetaInjection::AppendedToken => cfg.d,
        };
        let gru = gru_init(rng, cfg.d, d_m);
        let seed_w = xavier(rng, 2 * l, seed_out, &[2 * l, seed_out]);
        let seed_b = Tensor::zeros(&[seed_out]);
        let mut heads_w = Vec::with_capacity(l);
        let mut heads_b = Vec::with_capacity(l);
        for k in 0..l {
            let mut hr = rng.fork(0x4845_4144 + k as u64);
            heads_w.push(Tensor::from_parts(
                alloc::vec![d_m, p],
                hr.normal_vec(d_m * p, head_scale),
            ));
            heads_b.push(Tensor::vector(flatten_block(&init_block(cfg, &mut hr))));
        }
        Self {
            injection,
            gru,
            seed_w,
            seed_b,
            heads_w,
            heads_b,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.heads_w.len()
    }

    pub fn d_m(&self) -> usize {
        self.gru[1].shape()[0]
    }

    /// Scalars in one head (matrix and bias).
    pub fn head_param_count(&self) -> usize {
        self.heads_w[0].numel() + self.heads_b[0].numel()
    }
}

/// Final hidden state of `E'`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentInterest {
    pub h: Tensor,
}

/// Flat per-block parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedWeights {
    pub blocks: Vec<Tensor>,
}

impl GeneratedWeights {
    pub fn block_tensors(&self, cfg: &BackboneConfig, k: usize) -> Result<Vec<Tensor>> {
        unflatten_block(cfg, self.blocks[k].data())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MapperVars {
    pub gru: GruVars,
    pub seed_w: Var,
    pub seed_b: Var,
}

pub fn bind(g: &mut Graph, w: &MapperWeights) -> Result<MapperVars> {
    let gv = w
        .gru
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MapperVars {
        gru: GruVars::from_slice(&gv),
        seed_w: g.constant(w.seed_w.clone())?,
        seed_b: g.constant(w.seed_b.clone())?,
    })
}

/// Graph-side `h = E'(emb; β)`. Without `β` the extractor starts from zeros.
pub fn latent(
    g: &mut Graph,
    mv: &MapperVars,
    injection: BetaInjection,
    emb: Var,
    beta: Option<Var>,
) -> Result<Var> {
    let Some(beta) = beta else {
        return gru(g, &mv.gru, emb, None);
    };
    let n = g.value(beta).numel();
    let flat = g.reshape(beta, &[n])?;
    let seed = linear(g, flat, mv.seed_w, mv.seed_b)?;
    match injection {
        BetaInjection::InitialState => gru(g, &mv.gru, emb, Some(seed)),
        BetaInjection::AppendedToken => {
            let d = g.shape(seed)[0];
            let row = g.reshape(seed, &[1, d])?;
            let x = g.concat(&[emb, row])?;
            gru(g, &mv.gru, x, None)
        }
    }
}

/// Graph-side head `k`: `W_k = h · H_k + b_k`.
pub fn head_output(g: &mut Graph, h: Var, head_w: Var, head_b: Var) -> Result<Var> {
    linear(g, h, head_w, head_b)
}

pub fn extract_latent(
    w: &MapperWeights,
    emb: &Tensor,
    logits: Option<&StructureLogits>,
) -> Result<LatentInterest> {
    if emb.numel() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut g = Graph::new();
    let mv = bind(&mut g, w)?;
    let x = g.constant(emb.clone())?;
    let beta = logits.map(|b| g.constant(b.beta().clone())).transpose()?;
    let h = latent(&mut g, &mv, w.injection, x, beta)?;
    Ok(LatentInterest {
        h: g.value(h).clone(),
    })
}

/// Head `k` alone; heads share nothing, so any evaluation order agrees.
pub fn generate_block(w: &MapperWeights, h: &LatentInterest, k: usize) -> Result<Tensor> {
    if !h.h.is_finite() {
        return Err(Error::NumericFault {
            op: "latent interest",
        });
    }
    let mut g = Graph::new();
    let hv = g.constant(h.h.clone())?;
    let hw = g.constant(w.heads_w[k].clone())?;
    let hb = g.constant(w.heads_b[k].clone())?;
    let out = head_output(&mut g, hv, hw, hb)?;
    Ok(g.value(out).clone())
}

pub fn generate_weights(w: &MapperWeights, h: &LatentInterest) -> Result<GeneratedWeights> {
    let blocks = (0..w.n_blocks())
        .map(|k| generate_block(w, h, k))
        .collect::<Result<_>>()?;
    Ok(GeneratedWeights { blocks })
}
