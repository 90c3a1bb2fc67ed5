//! Adaptation cost: one forward pass of controller and mapper against a
//! fine-tuning epoch, and assembled against full model transfer size.

use fofa_core::assembly::{
    adaptation_flops, device_prepare_request, finetune_epoch_flops, model_wire_len, recent,
};
use fofa_core::backbone::{Family, GateIndicator};
use fofa_core::controller::harden;
use fofa_core::data::SplitDataset;
use fofa_core::model::Model;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptationReport {
    pub family: Family,
    pub devices: usize,
    pub mean_kept_blocks: f64,
    pub mean_controller_flops: f64,
    pub mean_extractor_flops: f64,
    pub mean_head_flops: f64,
    /// Forward-only adaptation per device.
    pub mean_adaptation_flops: f64,
    /// One forward and backward pass over the device's local history.
    pub mean_finetune_epoch_flops: f64,
    pub flops_ratio: f64,
    pub min_flops_ratio: f64,
    pub backward_passes: u64,
    pub mean_assembled_bytes: f64,
    pub full_model_bytes: usize,
    pub bytes_ratio: f64,
}

pub fn adaptation_cost_report(model: &Model, data: &SplitDataset) -> Result<AdaptationReport> {
    let cfg = model.backbone();
    let mapper = model
        .mapper()?
        .ok_or_else(|| Error::Config("adaptation report needs a mapper".into()))?;
    if data.users.is_empty() {
        return Err(Error::Core(fofa_core::Error::EmptyDataset));
    }
    let before = fofa_core::autodiff::backward_pass_count();
    let mut sums = [0.0f64; 6];
    let mut min_ratio = f64::INFINITY;
    for (u, s) in data.users.iter().enumerate() {
        let req = device_prepare_request(model, u as u64, &s.train)?;
        let gate = harden(&req.beta);
        let (_, trace) = fofa_core::assembly::cloud_assemble(cfg, &mapper, &req)?;
        debug_assert_eq!(trace.backward_passes, 0);
        let t = recent(&s.train, cfg.max_seq_len).len();
        let a = adaptation_flops(
            cfg,
            model.cfg.d_c,
            model.cfg.d_m,
            model.cfg.injection,
            &gate,
            t,
        );
        // training pairs from the local history: inputs x[..n-1] predict x[1..]
        let ft = finetune_epoch_flops(cfg, t.saturating_sub(1).max(1)) as f64;
        sums[0] += gate.executed_count() as f64;
        sums[1] += a.controller as f64;
        sums[2] += a.extractor as f64;
        sums[3] += a.heads as f64;
        sums[4] += ft;
        sums[5] += model_wire_len(cfg, &gate) as f64;
        min_ratio = min_ratio.min(ft / a.total as f64);
    }
    let n = data.users.len() as f64;
    let adaptation = (sums[1] + sums[2] + sums[3]) / n;
    let full_model_bytes = model_wire_len(cfg, &GateIndicator::all_execute(cfg.n_blocks));
    Ok(AdaptationReport {
        family: cfg.family,
        devices: data.users.len(),
        mean_kept_blocks: sums[0] / n,
        mean_controller_flops: sums[1] / n,
        mean_extractor_flops: sums[2] / n,
        mean_head_flops: sums[3] / n,
        mean_adaptation_flops: adaptation,
        mean_finetune_epoch_flops: sums[4] / n,
        flops_ratio: (sums[4] / n) / adaptation,
        min_flops_ratio: min_ratio,
        backward_passes: fofa_core::autodiff::backward_pass_count() - before,
        mean_assembled_bytes: sums[5] / n,
        full_model_bytes,
        bytes_ratio: full_model_bytes as f64 / (sums[5] / n),
    })
}
