//! Stacked-block sequential recommenders with per-block gating.
//!
//! Two block families share one head: pre-norm self-attention blocks and
//! two-layer dilated causal convolution residual blocks. A gated stack
//! computes `h' = F(h)·I0 + h·I1` for every block (the gate multiplies the
//! whole residual block, a skipped block is a pure identity). The deploy
//! path evaluates kept blocks only and never touches skipped ones.
//!
//! Block tensors are stored flat in a fixed order, see [`block_layout`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{linear, xavier};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Family {
    Attention,
    CausalConv,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    pub family: Family,
    pub n_blocks: usize,
    pub d: usize,
    /// Attention heads (attention family).
    pub heads: usize,
    /// Convolution kernel width (conv family).
    pub kernel: usize,
    /// Base dilation per block; the second convolution uses twice the base.
    pub dilations: Vec<usize>,
    /// Feed-forward width as a multiple of `d`.
    pub ff_mult: usize,
    pub max_seq_len: usize,
    pub n_items: usize,
}

impl BackboneConfig {
    /// Six pre-norm attention blocks, width 32, two heads.
    pub fn attention(n_items: usize) -> Self {
        Self {
            family: Family::Attention,
            n_blocks: 6,
            d: 32,
            heads: 2,
            kernel: 3,
            dilations: vec![1; 6],
            ff_mult: 4,
            max_seq_len: 50,
            n_items,
        }
    }

    /// Twelve dilated residual blocks, width 32, kernel 3, dilation pairs
    /// (1, 2) and (4, 8) alternating.
    pub fn causal_conv(n_items: usize) -> Self {
        Self {
            family: Family::CausalConv,
            n_blocks: 12,
            d: 32,
            heads: 1,
            kernel: 3,
            dilations: (0..12).map(|i| if i % 2 == 0 { 1 } else { 4 }).collect(),
            ff_mult: 4,
            max_seq_len: 50,
            n_items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("n_blocks must be at least 1"));
        }
        if self.d == 0 || self.n_items == 0 || self.max_seq_len == 0 {
            return Err(Error::config("d, n_items and max_seq_len must be positive"));
        }
        match self.family {
            Family::Attention => {
                if self.heads == 0 || self.d % self.heads != 0 {
                    return Err(Error::config(alloc::format!(
                        "d = {} is not divisible by heads = {}",
                        self.d,
                        self.heads
                    )));
                }
                if self.ff_mult == 0 {
                    return Err(Error::config("ff_mult must be positive"));
                }
            }
            Family::CausalConv => {
                if self.kernel == 0 {
                    return Err(Error::config("kernel must be positive"));
                }
                if self.dilations.len() != self.n_blocks {
                    return Err(Error::config(alloc::format!(
                        "{} dilations given for {} blocks",
                        self.dilations.len(),
                        self.n_blocks
                    )));
                }
                if self.dilations.contains(&0) {
                    return Err(Error::config("dilations must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Hard per-block decision: row `l` is `[1, 0]` to execute, `[0, 1]` to skip.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GateIndicator {
    execute: Vec<bool>,
}

impl GateIndicator {
    pub fn from_execute(execute: Vec<bool>) -> Self {
        Self { execute }
    }

    pub fn all_execute(n: usize) -> Self {
        Self {
            execute: vec![true; n],
        }
    }

    pub fn all_skip(n: usize) -> Self {
        Self {
            execute: vec![false; n],
        }
    }

    /// Parses an `L×2` 0/1 matrix; any other row is rejected.
    pub fn from_matrix(m: &Tensor) -> Result<Self> {
        let (rows, cols) = m.as_matrix();
        if cols != 2 || m.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gate",
                lhs: m.shape().to_vec(),
                rhs: vec![rows, 2],
            });
        }
        let execute = (0..rows)
            .map(|r| match m.row(r) {
                [a, b] if *a == 1.0 && *b == 0.0 => Ok(true),
                [a, b] if *a == 0.0 && *b == 1.0 => Ok(false),
                _ => Err(Error::GateNotOneHot { row: r }),
            })
            .collect::<Result<_>>()?;
        Ok(Self { execute })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .execute
            .iter()
            .flat_map(|&e| if e { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        Tensor::from_parts(vec![self.execute.len(), 2], data)
    }

    pub fn len(&self) -> usize {
        self.execute.len()
    }

    pub fn is_empty(&self) -> bool {
        self.execute.is_empty()
    }

    pub fn executes(&self, block: usize) -> bool {
        self.execute[block]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.execute
    }

    pub fn executed_count(&self) -> usize {
        self.execute.iter().filter(|&&e| e).count()
    }

    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.execute
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: &'static str, shape: &[usize]) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors of one block in flattening order.
pub fn block_layout(cfg: &BackboneConfig) -> Vec<TensorSpec> {
    let d = cfg.d;
    match cfg.family {
        Family::Attention => {
            let ff = cfg.ff_mult * d;
            vec![
                TensorSpec::new("ln1.g", &[d]),
                TensorSpec::new("ln1.b", &[d]),
                TensorSpec::new("wq", &[d, d]),
                TensorSpec::new("bq", &[d]),
                TensorSpec::new("wk", &[d, d]),
                TensorSpec::new("bk", &[d]),
                TensorSpec::new("wv", &[d, d]),
                TensorSpec::new("bv", &[d]),
                TensorSpec::new("wo", &[d, d]),
                TensorSpec::new("bo", &[d]),
                TensorSpec::new("ln2.g", &[d]),
                TensorSpec::new("ln2.b", &[d]),
                TensorSpec::new("w1", &[d, ff]),
                TensorSpec::new("b1", &[ff]),
                TensorSpec::new("w2", &[ff, d]),
                TensorSpec::new("b2", &[d]),
            ]
        }
        Family::CausalConv => {
            let k = cfg.kernel;
            vec![
                TensorSpec::new("conv1.w", &[k, d, d]),
                TensorSpec::new("conv1.b", &[d]),
                TensorSpec::new("ln1.g", &[d]),
                TensorSpec::new("ln1.b", &[d]),
                TensorSpec::new("conv2.w", &[k, d, d]),
                TensorSpec::new("conv2.b", &[d]),
                TensorSpec::new("ln2.g", &[d]),
                TensorSpec::new("ln2.b", &[d]),
            ]
        }
    }
}

pub fn block_param_count(cfg: &BackboneConfig) -> usize {
    block_layout(cfg).iter().map(TensorSpec::numel).sum()
}

/// Item table, positional table and final norm.
pub fn head_param_count(cfg: &BackboneConfig) -> usize {
    cfg.n_items * cfg.d + cfg.max_seq_len * cfg.d + 2 * cfg.d
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamCount {
    pub per_block: usize,
    pub blocks: usize,
    pub head: usize,
    pub total: usize,
}

/// Trainable scalars of the blocks a gate keeps plus the shared head.
pub fn param_count(cfg: &BackboneConfig, gate: &GateIndicator) -> ParamCount {
    let per_block = block_param_count(cfg);
    let blocks = per_block * gate.executed_count();
    let head = head_param_count(cfg);
    ParamCount {
        per_block,
        blocks,
        head,
        total: blocks + head,
    }
}

// Linear per-element costs.
const LN_FLOPS: u64 = 5;
const SOFTMAX_FLOPS: u64 = 3;

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// One block's inference FLOPs at `seq_len` positions. Every block of a
/// configuration costs the same.
pub fn block_flops(cfg: &BackboneConfig, seq_len: usize) -> u64 {
    let (t, d) = (seq_len as u64, cfg.d as u64);
    let td = t * d;
    match cfg.family {
        Family::Attention => {
            let ff = (cfg.ff_mult * cfg.d) as u64;
            let norms = 2 * LN_FLOPS * td;
            let projections = 4 * (matmul_flops(seq_len, cfg.d, cfg.d) + td);
            let scores = matmul_flops(seq_len, cfg.d, seq_len);
            let softmax = SOFTMAX_FLOPS * cfg.heads as u64 * t * t;
            let mix = matmul_flops(seq_len, seq_len, cfg.d);
            let ffn = matmul_flops(seq_len, cfg.d, cfg.ff_mult * cfg.d)
                + 2 * t * ff
                + matmul_flops(seq_len, cfg.ff_mult * cfg.d, cfg.d)
                + td;
            let residual = 2 * td;
            norms + projections + scores + softmax + mix + ffn + residual
        }
        Family::CausalConv => {
            let conv = 2 * cfg.kernel as u64 * d * d * t + td;
            2 * conv + 2 * LN_FLOPS * td + 2 * td + td
        }
    }
}

/// Embedding sum, final norm and the last position's catalog scores.
pub fn head_flops(cfg: &BackboneConfig, seq_len: usize) -> u64 {
    let td = (seq_len * cfg.d) as u64;
    td + LN_FLOPS * td + matmul_flops(1, cfg.d, cfg.n_items)
}

pub fn flops_count(cfg: &BackboneConfig, gate: &GateIndicator, seq_len: usize) -> u64 {
    gate.executed_count() as u64 * block_flops(cfg, seq_len) + head_flops(cfg, seq_len)
}

/// Reference initialization of one block, in layout order.
pub fn init_block(cfg: &BackboneConfig, rng: &mut RngState) -> Vec<Tensor> {
    block_layout(cfg)
        .iter()
        .map(|spec| {
            let name = spec.name;
            if name.ends_with(".g") {
                Tensor::full(&spec.shape, 1.0)
            } else if spec.shape.len() == 1 {
                Tensor::zeros(&spec.shape)
            } else if spec.shape.len() == 3 {
                let (k, cin, cout) = (spec.shape[0], spec.shape[1], spec.shape[2]);
                xavier(rng, k * cin, cout, &spec.shape)
            } else {
                xavier(rng, spec.shape[0], spec.shape[1], &spec.shape)
            }
        })
        .collect()
}

pub fn flatten_block(tensors: &[Tensor]) -> Vec<f32> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Splits a flat parameter vector into named block tensors.
pub fn unflatten_block(cfg: &BackboneConfig, flat: &[f32]) -> Result<Vec<Tensor>> {
    let layout = block_layout(cfg);
    let total: usize = layout.iter().map(TensorSpec::numel).sum();
    if flat.len() != total {
        return Err(Error::ShapeMismatch {
            op: "unflatten_block",
            lhs: vec![flat.len()],
            rhs: vec![total],
        });
    }
    let mut off = 0;
    Ok(layout
        .iter()
        .map(|spec| {
            let n = spec.numel();
            let t = Tensor::from_parts(spec.shape.clone(), flat[off..off + n].to_vec());
            off += n;
            t
        })
        .collect())
}

/// Views a flat `[P]` block vector on the tape as its named tensors.
pub fn split_flat(g: &mut Graph, cfg: &BackboneConfig, flat: Var) -> Result<Vec<Var>> {
    let layout = block_layout(cfg);
    let mut off = 0;
    let mut out = Vec::with_capacity(layout.len());
    for spec in &layout {
        out.push(g.slice(flat, off, &spec.shape)?);
        off += spec.numel();
    }
    if off != g.value(flat).numel() {
        return Err(Error::ShapeMismatch {
            op: "split_flat",
            lhs: g.shape(flat).to_vec(),
            rhs: vec![off],
        });
    }
    Ok(out)
}

/// Shared embedding tables and final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedHead {
    pub item_emb: Tensor,
    pub pos_emb: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

impl SharedHead {
    pub fn init(cfg: &BackboneConfig, rng: &mut RngState) -> Self {
        let d = cfg.d;
        Self {
            item_emb: Tensor::from_parts(
                vec![cfg.n_items, d],
                rng.normal_vec(cfg.n_items * d, 0.1),
            ),
            pos_emb: Tensor::from_parts(
                vec![cfg.max_seq_len, d],
                rng.normal_vec(cfg.max_seq_len * d, 0.1),
            ),
            ln_g: Tensor::full(&[d], 1.0),
            ln_b: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<HeadVars> {
        Ok(HeadVars {
            item_emb: g.constant(self.item_emb.clone())?,
            pos_emb: g.constant(self.pos_emb.clone())?,
            ln_g: g.constant(self.ln_g.clone())?,
            ln_b: g.constant(self.ln_b.clone())?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub item_emb: Var,
    pub pos_emb: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

pub fn check_ids(cfg: &BackboneConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::contract(alloc::format!(
            "sequence of {} exceeds max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    match ids.iter().find(|&&id| id >= cfg.n_items) {
        Some(&id) => Err(Error::IdOutOfRange {
            id,
            n_items: cfg.n_items,
        }),
        None => Ok(()),
    }
}

/// `E[x_t] + P[t]` for every position.
pub fn embed(g: &mut Graph, cfg: &BackboneConfig, head: &HeadVars, ids: &[usize]) -> Result<Var> {
    check_ids(cfg, ids)?;
    let items = g.gather(head.item_emb, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather(head.pos_emb, &positions)?;
    g.add(items, pos)
}

/// `F(h)` for block `idx`, residual included.
pub fn block_forward(
    g: &mut Graph,
    cfg: &BackboneConfig,
    idx: usize,
    h: Var,
    w: &[Var],
) -> Result<Var> {
    match cfg.family {
        Family::Attention => {
            let a = g.layer_norm(h, w[0], w[1])?;
            let q = linear(g, a, w[2], w[3])?;
            let k = linear(g, a, w[4], w[5])?;
            let v = linear(g, a, w[6], w[7])?;
            let att = g.causal_attention(q, k, v, cfg.heads)?;
            let o = linear(g, att, w[8], w[9])?;
            let h1 = g.add(h, o)?;
            let b = g.layer_norm(h1, w[10], w[11])?;
            let f = linear(g, b, w[12], w[13])?;
            let f = g.relu(f)?;
            let f = linear(g, f, w[14], w[15])?;
            g.add(h1, f)
        }
        Family::CausalConv => {
            let dil = cfg.dilations[idx];
            let c1 = g.dilated_conv(h, w[0], w[1], dil)?;
            let n1 = g.layer_norm(c1, w[2], w[3])?;
            let r1 = g.relu(n1)?;
            let c2 = g.dilated_conv(r1, w[4], w[5], 2 * dil)?;
            let n2 = g.layer_norm(c2, w[6], w[7])?;
            let r2 = g.relu(n2)?;
            g.add(h, r2)
        }
    }
}

/// Runs every block. With `gate = Some(I)` (an `L×2` var, hard or
/// straight-through) each block output is `F(h)·I[l,0] + h·I[l,1]`; with
/// `None` the stack is ungated.
pub fn gated_stack(
    g: &mut Graph,
    cfg: &BackboneConfig,
    blocks: &[Vec<Var>],
    mut h: Var,
    gate: Option<Var>,
) -> Result<Var> {
    if blocks.len() != cfg.n_blocks {
        return Err(Error::contract(alloc::format!(
            "{} block weight sets for {} blocks",
            blocks.len(),
            cfg.n_blocks
        )));
    }
    if let Some(gv) = gate {
        if g.shape(gv) != [cfg.n_blocks, 2] {
            return Err(Error::ShapeMismatch {
                op: "gated_stack",
                lhs: g.shape(gv).to_vec(),
                rhs: vec![cfg.n_blocks, 2],
            });
        }
    }
    for (l, w) in blocks.iter().enumerate() {
        let f = block_forward(g, cfg, l, h, w)?;
        h = match gate {
            None => f,
            Some(gv) => {
                let g0 = g.slice(gv, 2 * l, &[1])?;
                let g1 = g.slice(gv, 2 * l + 1, &[1])?;
                let a = g.mul_scalar(f, g0)?;
                let b = g.mul_scalar(h, g1)?;
                g.add(a, b)?
            }
        };
    }
    Ok(h)
}

/// Final-normalized sequence representation.
pub fn finalize(g: &mut Graph, head: &HeadVars, h: Var) -> Result<Var> {
    g.layer_norm(h, head.ln_g, head.ln_b)
}

/// Catalog scores for rows `from..T` of the final representation.
pub fn scores_from(g: &mut Graph, head: &HeadVars, hf: Var, from: usize) -> Result<Var> {
    let (t, d) = g.value(hf).as_matrix();
    let rows = g.slice(hf, from * d, &[t - from, d])?;
    g.matmul_bt(rows, head.item_emb)
}

pub enum ForwardMode<'a> {
    /// All blocks computed, gate applied multiplicatively.
    TrainMasked {
        gate: &'a Tensor,
    },
    /// Kept blocks only; the gate must be hard.
    DeployAssembled {
        gate: &'a Tensor,
    },
    Ungated,
}

/// Per-position catalog scores `[T, n_items]` given explicit block weights.
pub fn gated_forward(
    cfg: &BackboneConfig,
    weights: &[Vec<Tensor>],
    shared: &SharedHead,
    ids: &[usize],
    mode: ForwardMode<'_>,
) -> Result<Tensor> {
    match mode {
        ForwardMode::DeployAssembled { gate } => {
            let gate = GateIndicator::from_matrix(gate)?;
            let kept: Vec<(usize, &[Tensor])> = gate.kept().map(|l| (l, &weights[l][..])).collect();
            let hf = deploy_hidden(cfg, shared, &kept, ids)?;
            let mut g = Graph::new();
            let head = shared.bind(&mut g)?;
            let hv = g.constant(hf)?;
            let s = scores_from(&mut g, &head, hv, 0)?;
            Ok(g.value(s).clone())
        }
        ForwardMode::TrainMasked { gate } => masked_forward(cfg, weights, shared, ids, Some(gate)),
        ForwardMode::Ungated => masked_forward(cfg, weights, shared, ids, None),
    }
}

fn masked_forward(
    cfg: &BackboneConfig,
    weights: &[Vec<Tensor>],
    shared: &SharedHead,
    ids: &[usize],
    gate: Option<&Tensor>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let head = shared.bind(&mut g)?;
    let blocks = weights
        .iter()
        .map(|ws| {
            ws.iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let gv = gate.map(|t| g.constant(t.clone())).transpose()?;
    let h = embed(&mut g, cfg, &head, ids)?;
    let h = gated_stack(&mut g, cfg, &blocks, h, gv)?;
    let hf = finalize(&mut g, &head, h)?;
    let s = scores_from(&mut g, &head, hf, 0)?;
    Ok(g.value(s).clone())
}

/// Assembled-model forward: evaluates the kept `(block index, weights)`
/// pairs in order and returns the final-normalized representation `[T, d]`.
pub fn deploy_hidden(
    cfg: &BackboneConfig,
    shared: &SharedHead,
    kept: &[(usize, &[Tensor])],
    ids: &[usize],
) -> Result<Tensor> {
    let layout = block_layout(cfg);
    let mut g = Graph::new();
    let head = shared.bind(&mut g)?;
    let mut h = embed(&mut g, cfg, &head, ids)?;
    for (idx, ws) in kept {
        if *idx >= cfg.n_blocks || ws.len() != layout.len() {
            return Err(Error::contract(alloc::format!(
                "malformed weights for block {idx}"
            )));
        }
        for (t, spec) in ws.iter().zip(&layout) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "deploy block",
                    lhs: t.shape().to_vec(),
                    rhs: spec.shape.clone(),
                });
            }
        }
        let vars = ws
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        h = block_forward(&mut g, cfg, *idx, h, &vars)?;
    }
    let hf = finalize(&mut g, &head, h)?;
    Ok(g.value(hf).clone())
}

/// Tensor names of block `l` in a parameter store.
pub fn block_tensor_names(cfg: &BackboneConfig, l: usize) -> Vec<String> {
    block_layout(cfg)
        .iter()
        .map(|s| alloc::format!("block{l}.{}", s.name))
        .collect()
}
