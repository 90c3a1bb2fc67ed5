//! Whole-fleet simulation, parallel by device.

use fofa_core::data::SplitDataset;
use fofa_core::model::Model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::AuditReport;
use crate::session::{run_session, Cloud, Direction, MessageKind, SessionConfig, SessionTrace};

/// Worker threads: `FOFA_THREADS` when set, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FOFA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FleetDevice {
    pub id: u64,
    pub context: Vec<usize>,
    pub stream: Vec<usize>,
    /// Ground-truth regime switches inside `stream`, when known.
    pub switches: Option<usize>,
}

/// Each user's full sequence (train then test) split after `context_len` items.
pub fn fleet_from_dataset(
    data: &SplitDataset,
    context_len: usize,
    switches: Option<&[Vec<usize>]>,
) -> Vec<FleetDevice> {
    data.users
        .iter()
        .enumerate()
        .filter_map(|(u, s)| {
            let mut full = s.train.clone();
            full.push(s.test);
            if full.len() <= context_len || context_len == 0 {
                return None;
            }
            let stream = full.split_off(context_len);
            let sw = switches.map(|all| all[u].iter().filter(|&&p| p > context_len).count());
            Some(FleetDevice {
                id: u as u64,
                context: full,
                stream,
                switches: sw,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub devices: usize,
    pub interactions: usize,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    pub refreshes: usize,
    pub mean_refreshes: f64,
    /// Refreshes after the session-opening one.
    pub triggered_refreshes: usize,
    pub injected_switches: Option<usize>,
    pub hit: f64,
    pub ndcg: f64,
    pub coverage: f64,
    pub inference_flops: u64,
    pub assembly_flops: u64,
    pub backward_passes: u32,
    pub messages_between_refreshes: usize,
    pub block_usage: Vec<usize>,
    pub audit: AuditReport,
}

pub fn simulate_fleet(
    model: &Model,
    cloud: &Cloud,
    devices: &[FleetDevice],
    cfg: &SessionConfig,
    threads: usize,
) -> Result<(FleetReport, Vec<SessionTrace>)> {
    if devices.is_empty() {
        return Err(Error::Config("fleet has no devices".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let traces: Vec<SessionTrace> = pool.install(|| {
        devices
            .par_iter()
            .map(|d| run_session(model, cloud, d.id, &d.context, &d.stream, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((
        aggregate(&traces, devices, model.backbone().n_blocks),
        traces,
    ))
}

/// Sums per-device traces; every total is additive.
pub fn aggregate(traces: &[SessionTrace], devices: &[FleetDevice], n_blocks: usize) -> FleetReport {
    let mut r = FleetReport {
        devices: traces.len(),
        block_usage: vec![0; n_blocks],
        ..Default::default()
    };
    let (mut hits, mut ndcg, mut covered) = (0usize, 0.0f64, 0usize);
    let mut findings = Vec::new();
    let mut request_sizes = std::collections::BTreeSet::new();
    for t in traces {
        r.interactions += t.interactions;
        r.uplink_bytes += t.uplink_bytes;
        r.downlink_bytes += t.downlink_bytes;
        r.refreshes += t.refreshes.len();
        r.triggered_refreshes += t.refreshes.len().saturating_sub(1);
        r.inference_flops += t.inference_flops;
        r.assembly_flops += t.assembly_flops;
        r.backward_passes += t.backward_passes;
        r.messages_between_refreshes += t.messages_between_refreshes();
        hits += t.hits;
        ndcg += t.ndcg_sum;
        covered += t.covered;
        for kept in &t.kept {
            for (k, &on) in kept.iter().enumerate() {
                r.block_usage[k] += on as usize;
            }
        }
        findings.extend(
            t.audit
                .findings
                .iter()
                .map(|f| format!("device {}: {f}", t.device)),
        );
        for m in &t.messages {
            if m.direction == Direction::Up && m.kind == MessageKind::Request {
                request_sizes.insert(m.bytes);
            }
        }
    }
    if request_sizes.len() > 1 {
        findings.push(format!(
            "uplink request sizes vary across devices: {request_sizes:?}"
        ));
    }
    r.audit = AuditReport {
        pass: findings.is_empty(),
        findings,
    };
    let n = r.interactions.max(1) as f64;
    r.hit = hits as f64 / n;
    r.ndcg = ndcg / n;
    r.coverage = covered as f64 / n;
    r.mean_refreshes = r.refreshes as f64 / r.devices.max(1) as f64;
    r.injected_switches = devices.iter().map(|d| d.switches).sum();
    r
}
