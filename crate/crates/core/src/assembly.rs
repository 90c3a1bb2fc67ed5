//! Device request, cloud-side assembly and cost accounting.
//!
//! The device uploads only `β` and `h`. The cloud hardens `β`, runs the
//! heads of kept blocks once and ships the resulting sub-model. Assembly
//! builds a tape of constants only, so no gradient can exist on it; the
//! returned [`AssemblyTrace`] records that.
//!
//! Wire lengths are computed here so the byte codec can be checked
//! against them.

use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::backbone::{
    block_flops, block_param_count, deploy_hidden, flops_count, head_flops, param_count,
    unflatten_block, BackboneConfig, GateIndicator, ParamCount, SharedHead,
};
use crate::controller::{extract_structure_logits, harden, StructureLogits};
use crate::error::{Error, Result};
use crate::mapper::{extract_latent, head_output, BetaInjection, LatentInterest, MapperWeights};
use crate::math::dot;
use crate::model::Model;
use crate::tensor::Tensor;

pub const PROTOCOL_VERSION: u16 = 1;
/// Magic, version, device id, `L`, `d_m`.
pub const REQUEST_HEADER_LEN: usize = 4 + 2 + 8 + 2 + 2;
/// Magic, version, `L`.
pub const MODEL_HEADER_LEN: usize = 4 + 2 + 2;
pub const CHECKSUM_LEN: usize = 4;

/// Uplink message: fixed-size float payload, no item identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceRequest {
    pub device_id: u64,
    pub version: u16,
    pub beta: StructureLogits,
    pub h: LatentInterest,
}

impl DeviceRequest {
    pub fn wire_len(&self) -> usize {
        request_wire_len(self.beta.n_blocks(), self.h.h.numel())
    }
}

pub fn request_wire_len(n_blocks: usize, d_m: usize) -> usize {
    REQUEST_HEADER_LEN + 4 * (2 * n_blocks + d_m)
}

/// The last `max_len` items; the device model never sees more.
pub fn recent(history: &[usize], max_len: usize) -> &[usize] {
    &history[history.len().saturating_sub(max_len)..]
}

/// `β` from the controller and `h` from the β-conditioned extractor.
pub fn device_prepare_request(
    model: &Model,
    device_id: u64,
    history: &[usize],
) -> Result<DeviceRequest> {
    if history.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (Some(ctrl), Some(mapper)) = (model.controller()?, model.mapper()?) else {
        return Err(Error::contract(alloc::format!(
            "mode {} has no controller and mapper to build a request",
            model.mode()
        )));
    };
    let emb = model.embed_items(recent(history, model.backbone().max_seq_len))?;
    let beta = extract_structure_logits(&ctrl, &emb)?;
    let h = extract_latent(&mapper, &emb, Some(&beta))?;
    Ok(DeviceRequest {
        device_id,
        version: PROTOCOL_VERSION,
        beta,
        h,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub params: ParamCount,
    pub param_bytes: usize,
    /// One inference at `max_seq_len`.
    pub flops: u64,
    pub uplink_bytes: usize,
    pub model_bytes: usize,
    pub candidate_bytes: usize,
    pub downlink_bytes: usize,
    /// Cloud-side head evaluations for the kept blocks.
    pub assembly_flops: u64,
}

impl CostReport {
    /// Adds a candidate-embedding payload of `n` items to the downlink.
    pub fn with_candidates(mut self, n: usize, d: usize) -> Self {
        self.candidate_bytes = candidate_wire_len(n, d);
        self.downlink_bytes = self.model_bytes + self.candidate_bytes;
        self
    }
}

/// Count, then `(u32 id, d floats)` per candidate.
pub fn candidate_wire_len(n: usize, d: usize) -> usize {
    4 + n * (4 + 4 * d)
}

/// Bytes of one serialized block: tensor count, then rank, extents and data per tensor.
pub fn block_wire_len(cfg: &BackboneConfig) -> usize {
    2 + crate::backbone::block_layout(cfg)
        .iter()
        .map(|s| 1 + 4 * s.shape.len() + 4 * s.numel())
        .sum::<usize>()
}

pub fn model_wire_len(cfg: &BackboneConfig, gate: &GateIndicator) -> usize {
    MODEL_HEADER_LEN
        + gate.len().div_ceil(8)
        + gate.executed_count() * block_wire_len(cfg)
        + CHECKSUM_LEN
}

/// A device-specific sub-model: kept blocks in order with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledModel {
    pub gate: GateIndicator,
    pub blocks: Vec<(usize, Vec<Tensor>)>,
    pub cost: CostReport,
}

impl AssembledModel {
    pub fn kept(&self) -> Vec<(usize, &[Tensor])> {
        self.blocks.iter().map(|(k, w)| (*k, &w[..])).collect()
    }

    /// Final representation `[T, d]` of `ids` (most recent `max_seq_len`).
    pub fn hidden(
        &self,
        cfg: &BackboneConfig,
        shared: &SharedHead,
        ids: &[usize],
    ) -> Result<Tensor> {
        deploy_hidden(cfg, shared, &self.kept(), recent(ids, cfg.max_seq_len))
    }

    /// Next-item scores for every catalog item.
    pub fn score_next(
        &self,
        cfg: &BackboneConfig,
        shared: &SharedHead,
        ids: &[usize],
    ) -> Result<Vec<f32>> {
        let hf = self.hidden(cfg, shared, ids)?;
        let last = hf.row(hf.shape()[0] - 1);
        Ok((0..cfg.n_items)
            .map(|i| dot(last, shared.item_emb.row(i)))
            .collect())
    }

    /// Scores of the given candidate rows `(id, embedding)`, on device.
    pub fn rerank(
        &self,
        cfg: &BackboneConfig,
        shared: &SharedHead,
        ids: &[usize],
        candidates: &[(usize, Vec<f32>)],
    ) -> Result<Vec<f32>> {
        let hf = self.hidden(cfg, shared, ids)?;
        let last = hf.row(hf.shape()[0] - 1);
        Ok(candidates.iter().map(|(_, e)| dot(last, e)).collect())
    }
}

/// Evidence that assembly ran forward only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssemblyTrace {
    pub nodes: usize,
    pub tracked_nodes: usize,
    pub backward_passes: u32,
}

/// Hardens `β` and generates the kept blocks; pure in `(request, mapper)`.
pub fn cloud_assemble(
    cfg: &BackboneConfig,
    mapper: &MapperWeights,
    req: &DeviceRequest,
) -> Result<(AssembledModel, AssemblyTrace)> {
    if req.version != PROTOCOL_VERSION {
        return Err(Error::VersionMismatch {
            expected: PROTOCOL_VERSION,
            got: req.version,
        });
    }
    if req.beta.n_blocks() != cfg.n_blocks || mapper.n_blocks() != cfg.n_blocks {
        return Err(Error::contract(alloc::format!(
            "request has {} blocks, backbone {}",
            req.beta.n_blocks(),
            cfg.n_blocks
        )));
    }
    if req.h.h.shape() != [mapper.d_m()] {
        return Err(Error::ShapeMismatch {
            op: "request h",
            lhs: req.h.h.shape().to_vec(),
            rhs: alloc::vec![mapper.d_m()],
        });
    }
    if !req.h.h.is_finite() {
        return Err(Error::NumericFault { op: "request h" });
    }
    let gate = harden(&req.beta);
    let mut g = Graph::new();
    let h = g.constant(req.h.h.clone())?;
    let mut blocks = Vec::with_capacity(gate.executed_count());
    for k in gate.kept() {
        let hw = g.constant(mapper.heads_w[k].clone())?;
        let hb = g.constant(mapper.heads_b[k].clone())?;
        let w = head_output(&mut g, h, hw, hb)?;
        blocks.push((k, unflatten_block(cfg, g.value(w).data())?));
    }
    let params = param_count(cfg, &gate);
    let model_bytes = model_wire_len(cfg, &gate);
    let cost = CostReport {
        param_bytes: 4 * params.total,
        params,
        flops: flops_count(cfg, &gate, cfg.max_seq_len),
        uplink_bytes: req.wire_len(),
        model_bytes,
        candidate_bytes: 0,
        downlink_bytes: model_bytes,
        assembly_flops: gate.executed_count() as u64
            * head_gen_flops(mapper.d_m(), block_param_count(cfg)),
    };
    let trace = AssemblyTrace {
        nodes: g.len(),
        tracked_nodes: g.tracked_count(),
        backward_passes: g.backward_calls(),
    };
    Ok((AssembledModel { gate, blocks, cost }, trace))
}

/// One GRU pass: two input projections, two gate activations, the
/// candidate and the interpolation.
pub fn gru_flops(steps: usize, input: usize, hidden: usize) -> u64 {
    let h = hidden as u64;
    steps as u64 * (6 * h * (input as u64 + h) + 19 * h)
}

/// `h·H_k + b_k` for one block.
pub fn head_gen_flops(d_m: usize, p: usize) -> u64 {
    (2 * d_m * p + p) as u64
}

/// FLOPs of one-forward adaptation for a `seq_len` history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptationFlops {
    pub controller: u64,
    pub extractor: u64,
    pub heads: u64,
    pub total: u64,
}

pub fn adaptation_flops(
    cfg: &BackboneConfig,
    d_c: usize,
    d_m: usize,
    injection: BetaInjection,
    gate: &GateIndicator,
    seq_len: usize,
) -> AdaptationFlops {
    let l = cfg.n_blocks;
    let controller = gru_flops(seq_len, cfg.d, d_c) + (2 * d_c * 2 * l + 2 * l) as u64;
    let extractor = match injection {
        BetaInjection::InitialState => {
            (2 * 2 * l * d_m + d_m) as u64 + gru_flops(seq_len, cfg.d, d_m)
        }
        BetaInjection::AppendedToken => {
            (2 * 2 * l * cfg.d + cfg.d) as u64 + gru_flops(seq_len + 1, cfg.d, d_m)
        }
    };
    let heads = gate.executed_count() as u64 * head_gen_flops(d_m, block_param_count(cfg));
    AdaptationFlops {
        controller,
        extractor,
        heads,
        total: controller + extractor + heads,
    }
}

/// One forward and backward pass of next-item training over a local
/// history of `seq_len` inputs on the full backbone, with catalog scores
/// and cross-entropy at every position. Backward counts as twice forward.
pub fn finetune_epoch_flops(cfg: &BackboneConfig, seq_len: usize) -> u64 {
    let (t, d, n) = (seq_len as u64, cfg.d as u64, cfg.n_items as u64);
    let forward = cfg.n_blocks as u64 * block_flops(cfg, seq_len)
        + t * d
        + 5 * t * d
        + 2 * t * d * n
        + 3 * t * n;
    3 * forward
}

/// Inference FLOPs of the full backbone at `seq_len`.
pub fn full_inference_flops(cfg: &BackboneConfig, seq_len: usize) -> u64 {
    cfg.n_blocks as u64 * block_flops(cfg, seq_len) + head_flops(cfg, seq_len)
}
