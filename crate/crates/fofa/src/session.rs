//! Device-cloud session protocol over a byte-counting channel.
//!
//! A refresh is one request up and one reply down (serialized sub-model
//! plus candidate embeddings). Between refreshes the device serves every
//! prediction from its cache: it reranks the cached candidates with the
//! cached sub-model and sends nothing.

use fofa_core::assembly::{
    cloud_assemble, device_prepare_request, recent, AssembledModel, AssemblyTrace, CostReport,
};
use fofa_core::backbone::{BackboneConfig, SharedHead};
use fofa_core::mapper::MapperWeights;
use fofa_core::math::dot;
use fofa_core::metrics::ndcg_at;
use fofa_core::model::Model;
use fofa_core::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{privacy_audit, AuditReport};
use crate::wire::{
    decode_candidates, decode_request, deserialize_model, encode_candidates, encode_request,
    serialize_model, ModelPayload,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    /// Refresh after every `s` interactions.
    EveryS { s: usize },
    /// Refresh when the cosine distance between the mean embedding of the
    /// last `window` items and the mean at the last refresh exceeds
    /// `threshold`.
    Drift { window: usize, threshold: f32 },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::EveryS { s: 0 } => Err(Error::Config("policy every-s needs s ≥ 1".into())),
            Policy::Drift { window, threshold }
                if window == 0 || !(0.0..=2.0).contains(&threshold) =>
            {
                Err(Error::Config(
                    "drift policy needs window ≥ 1 and a threshold in [0, 2]".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub policy: Policy,
    /// Candidate embeddings shipped per refresh.
    pub candidates: usize,
    pub k: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            policy: Policy::EveryS { s: 10 },
            candidates: 500,
            k: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    Request,
    Model,
    Candidates,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    /// Stream position the message precedes.
    pub t: usize,
    pub direction: Direction,
    pub kind: MessageKind,
    pub bytes: usize,
}

/// Cloud-side candidate scorer: a ridge readout from the uploaded `h` to
/// the full model's final representation, fitted on the cloud's own
/// training sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// `[d_m, d]`
    pub w: Tensor,
}

impl Readout {
    pub fn project(&self, h: &[f32]) -> Vec<f32> {
        let (dm, d) = self.w.as_matrix();
        let mut out = vec![0.0f32; d];
        for (r, &hr) in h.iter().enumerate().take(dm) {
            fofa_core::math::axpy(hr, self.w.row(r), &mut out);
        }
        out
    }
}

/// Fits `min ‖H·W − Z‖² + ridge‖W‖²` over `sequences`, where `h` comes
/// from each device's request and `z` is the last row of the
/// all-execute representation.
pub fn fit_readout(model: &Model, sequences: &[Vec<usize>], ridge: f64) -> Result<Readout> {
    let mapper = model
        .mapper()?
        .ok_or_else(|| Error::Config("candidate readout needs a mapper".into()))?;
    let cfg = model.backbone();
    let shared = model.shared_head()?;
    let (dm, d) = (mapper.d_m(), cfg.d);
    let mut xtx = DMatrix::<f64>::identity(dm, dm) * ridge;
    let mut xtz = DMatrix::<f64>::zeros(dm, d);
    for (i, seq) in sequences.iter().enumerate() {
        let req = device_prepare_request(model, i as u64, seq)?;
        let full = full_assembly(cfg, &mapper, &req)?;
        let z = full.hidden(cfg, &shared, seq)?;
        let z = z.row(z.shape()[0] - 1);
        let h = req.h.h.data();
        for a in 0..dm {
            for b in 0..dm {
                xtx[(a, b)] += h[a] as f64 * h[b] as f64;
            }
            for c in 0..d {
                xtz[(a, c)] += h[a] as f64 * z[c] as f64;
            }
        }
    }
    let w = xtx
        .cholesky()
        .ok_or_else(|| Error::Config("readout system is not positive definite".into()))?
        .solve(&xtz);
    let data: Vec<f32> = (0..dm)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| w[(r, c)] as f32)
        .collect();
    Ok(Readout {
        w: Tensor::new(&[dm, d], data)?,
    })
}

fn full_assembly(
    cfg: &BackboneConfig,
    mapper: &MapperWeights,
    req: &fofa_core::assembly::DeviceRequest,
) -> Result<AssembledModel> {
    let mut all = req.clone();
    let rows: Vec<[f32; 2]> = (0..cfg.n_blocks).map(|_| [1.0, 0.0]).collect();
    all.beta = fofa_core::controller::StructureLogits::from_rows(&rows);
    Ok(cloud_assemble(cfg, mapper, &all)?.0)
}

/// Cloud endpoint: decodes a request, assembles, picks candidates, encodes the reply.
pub struct Cloud {
    pub cfg: BackboneConfig,
    pub mapper: MapperWeights,
    pub item_emb: Tensor,
    pub readout: Readout,
    pub n_candidates: usize,
}

pub struct Reply {
    pub model: Vec<u8>,
    pub candidates: Vec<u8>,
    pub cost: CostReport,
    pub trace: AssemblyTrace,
}

impl Cloud {
    pub fn new(model: &Model, readout: Readout, n_candidates: usize) -> Result<Self> {
        let mapper = model
            .mapper()?
            .ok_or_else(|| Error::Config("cloud needs a mapper".into()))?;
        Ok(Self {
            cfg: model.backbone().clone(),
            mapper,
            item_emb: model.params.get("item_emb")?.clone(),
            readout,
            n_candidates: n_candidates.min(model.backbone().n_items),
        })
    }

    /// Top-N items by readout score; ties go to the lower id.
    pub fn candidates(&self, h: &[f32]) -> Vec<(usize, Vec<f32>)> {
        let q = self.readout.project(h);
        let mut scored: Vec<(f32, usize)> = (0..self.cfg.n_items)
            .map(|i| (dot(&q, self.item_emb.row(i)), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored[..self.n_candidates]
            .iter()
            .map(|&(_, i)| (i, self.item_emb.row(i).to_vec()))
            .collect()
    }

    pub fn handle(&self, request: &[u8]) -> Result<Reply> {
        let req = decode_request(request)?;
        let (model, trace) = cloud_assemble(&self.cfg, &self.mapper, &req)?;
        let cands = self.candidates(req.h.h.data());
        let bytes = serialize_model(&ModelPayload::from(&model));
        let candidates = encode_candidates(&cands);
        let cost = model.cost.clone().with_candidates(cands.len(), self.cfg.d);
        debug_assert_eq!(cost.model_bytes, bytes.len());
        debug_assert_eq!(cost.candidate_bytes, candidates.len());
        Ok(Reply {
            model: bytes,
            candidates,
            cost,
            trace,
        })
    }
}

/// Per-device cache between refreshes.
pub struct SessionState {
    pub model: AssembledModel,
    pub candidates: Vec<(usize, Vec<f32>)>,
    pub since_refresh: usize,
    pub reference: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub device: u64,
    pub interactions: usize,
    pub messages: Vec<Message>,
    /// Stream positions of refreshes.
    pub refreshes: Vec<usize>,
    /// Kept-block bitmap of each delivered model.
    pub kept: Vec<Vec<bool>>,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    pub inference_flops: u64,
    pub assembly_flops: u64,
    pub backward_passes: u32,
    pub hits: usize,
    pub ndcg_sum: f64,
    /// Predictions whose target was among the candidates.
    pub covered: usize,
    pub audit: AuditReport,
}

impl SessionTrace {
    /// Messages outside the refresh positions; zero by construction.
    pub fn messages_between_refreshes(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| !self.refreshes.contains(&m.t))
            .count()
    }
}

fn mean_embedding(item_emb: &Tensor, ids: &[usize]) -> Vec<f32> {
    let d = item_emb.shape()[1];
    let mut m = vec![0.0f32; d];
    for &i in ids {
        fofa_core::math::axpy(1.0 / ids.len() as f32, item_emb.row(i), &mut m);
    }
    m
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> f32 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

/// Device side of one session: `context` is the history before the
/// session, `stream` the interactions to serve. Refreshes happen before
/// position 0 and wherever the policy fires.
pub fn run_session(
    model: &Model,
    cloud: &Cloud,
    device: u64,
    context: &[usize],
    stream: &[usize],
    cfg: &SessionConfig,
) -> Result<SessionTrace> {
    cfg.policy.validate()?;
    if context.is_empty() {
        return Err(Error::Core(fofa_core::Error::EmptySequence));
    }
    let bb = model.backbone();
    let shared: SharedHead = model.shared_head()?;
    let mut history: Vec<usize> = context.to_vec();
    let mut trace = SessionTrace {
        device,
        interactions: stream.len(),
        audit: AuditReport {
            pass: true,
            findings: vec![],
        },
        ..Default::default()
    };
    let mut state: Option<SessionState> = None;
    for (t, &target) in stream.iter().enumerate() {
        let fire = match (&state, cfg.policy) {
            (None, _) => true,
            (Some(s), Policy::EveryS { s: every }) => s.since_refresh >= every,
            (Some(s), Policy::Drift { window, threshold }) => {
                let now = mean_embedding(&shared.item_emb, recent(&history, window));
                cosine_distance(&now, &s.reference) > threshold
            }
        };
        if fire {
            state = Some(refresh(model, cloud, device, &history, t, cfg, &mut trace)?);
        }
        let s = state
            .as_mut()
            .expect("refreshed before the first interaction");
        let scores = s.model.rerank(bb, &shared, &history, &s.candidates)?;
        trace.inference_flops += s.model.cost.flops;
        if let Some(pos) = s.candidates.iter().position(|(id, _)| *id == target) {
            trace.covered += 1;
            let st = scores[pos];
            let rank = 1 + scores
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > st || (v == st && s.candidates[j].0 < target))
                .count();
            trace.ndcg_sum += ndcg_at(rank, cfg.k);
            trace.hits += (rank <= cfg.k) as usize;
        }
        history.push(target);
        s.since_refresh += 1;
    }
    Ok(trace)
}

fn refresh(
    model: &Model,
    cloud: &Cloud,
    device: u64,
    history: &[usize],
    t: usize,
    cfg: &SessionConfig,
    trace: &mut SessionTrace,
) -> Result<SessionState> {
    let bb = model.backbone();
    let request = encode_request(&device_prepare_request(model, device, history)?);
    let audit = privacy_audit(&request, bb.n_blocks, cloud.mapper.d_m());
    if !audit.pass {
        trace.audit.pass = false;
        trace.audit.findings.extend(audit.findings);
    }
    let reply = cloud.handle(&request)?;
    let payload = deserialize_model(&reply.model)?;
    let candidates = decode_candidates(&reply.candidates, bb.d)?;
    for (kind, dir, bytes) in [
        (MessageKind::Request, Direction::Up, request.len()),
        (MessageKind::Model, Direction::Down, reply.model.len()),
        (
            MessageKind::Candidates,
            Direction::Down,
            reply.candidates.len(),
        ),
    ] {
        trace.messages.push(Message {
            t,
            direction: dir,
            kind,
            bytes,
        });
    }
    trace.uplink_bytes += request.len();
    trace.downlink_bytes += reply.model.len() + reply.candidates.len();
    trace.assembly_flops += reply.cost.assembly_flops;
    trace.backward_passes += reply.trace.backward_passes;
    trace.refreshes.push(t);
    trace.kept.push(payload.gate.as_slice().to_vec());
    let shared = model.shared_head()?;
    let window = match cfg.policy {
        Policy::Drift { window, .. } => window,
        Policy::EveryS { s } => s,
    };
    Ok(SessionState {
        model: AssembledModel {
            gate: payload.gate,
            blocks: payload.blocks,
            cost: reply.cost,
        },
        candidates,
        since_refresh: 0,
        reference: mean_embedding(&shared.item_emb, recent(history, window)),
    })
}
