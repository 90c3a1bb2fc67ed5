//! Experiment drivers behind the CLI commands and their artifacts.
//!
//! JSONL artifacts start with a `{"run_config": ...}` line; CSV artifacts
//! start with a `# run-config {...}` comment line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fofa_core::assembly::{cloud_assemble, device_prepare_request, recent};
use fofa_core::backbone::{gated_forward, ForwardMode};
use fofa_core::data::{
    preprocess, synthesize, synthetic_preprocess_config, ParseReport, SplitDataset, SyntheticLog,
};
use fofa_core::eval::{evaluate, EvalOptions, EvalRow, GatePolicy, SweepRow};
use fofa_core::mapper::generate_weights;
use fofa_core::model::Model;
use fofa_core::train::{EpochLog, Example, Trainer};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::ingest::ingest;
use crate::session::SessionTrace;

pub const CHECKPOINT_FILE: &str = "checkpoint.fofc";
pub const TRAIN_LOG: &str = "train.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const SWEEP_LOG: &str = "sweep.jsonl";
pub const TRACE_LOG: &str = "traces.jsonl";

pub struct Loaded {
    pub data: SplitDataset,
    /// Ground truth, for generated data only.
    pub synthetic: Option<SyntheticLog>,
    pub parse: Option<ParseReport>,
}

pub fn load_data(src: &DataSource) -> Result<Loaded> {
    match src {
        DataSource::Synthetic(spec) => {
            let syn = synthesize(spec)?;
            let data = preprocess(&syn.log, synthetic_preprocess_config(spec))?;
            Ok(Loaded {
                data,
                synthetic: Some(syn),
                parse: None,
            })
        }
        DataSource::File {
            path,
            preprocess: pp,
        } => {
            let (log, report) = ingest(path, None)?;
            Ok(Loaded {
                data: preprocess(&log, *pp)?,
                synthetic: None,
                parse: Some(report),
            })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigLine {
    run_config: RunConfig,
}

pub fn write_jsonl<T: Serialize>(path: &Path, cfg: &RunConfig, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    line(serde_json::to_string(&ConfigLine {
        run_config: cfg.clone(),
    })?)?;
    for r in rows {
        line(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(RunConfig, Vec<T>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Malformed(format!("{} is empty", path.display())))?;
    let head: ConfigLine = serde_json::from_str(&first.map_err(|e| Error::io(path, e))?)?;
    let mut rows = Vec::new();
    for l in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if !l.trim().is_empty() {
            rows.push(serde_json::from_str(&l)?);
        }
    }
    Ok((head.run_config, rows))
}

pub fn write_csv<T: Serialize>(path: &Path, cfg: &RunConfig, rows: &[T]) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# run-config {}", serde_json::to_string(cfg)?)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn init_model(cfg: &RunConfig, data: &SplitDataset) -> Result<Model> {
    Ok(Model::init(cfg.model_config(data.n_items())?, cfg.seed)?)
}

/// Trains from a fresh model; `on_epoch` sees every epoch's log.
pub fn train_model(
    cfg: &RunConfig,
    data: &SplitDataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Trainer, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(init_model(cfg, data)?, cfg.train.clone())?;
    let logs = trainer.fit(&Example::from_dataset(data), |l| on_epoch(l))?;
    Ok((trainer, logs))
}

/// One row per gate policy the model supports, learned first.
pub fn eval_table(model: &Model, data: &SplitDataset, opts: EvalOptions) -> Result<Vec<EvalRow>> {
    let policies: &[GatePolicy] = if model.mode().has_controller() {
        &GatePolicy::ALL
    } else {
        &[GatePolicy::Learned]
    };
    policies
        .iter()
        .map(|&p| Ok(evaluate(model, data, p, opts)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub devices: usize,
    pub max_abs_diff: f32,
    pub tolerance: f32,
    pub pass: bool,
}

/// Assembled predictions against the train-time masked forward under
/// `harden(β)`, for up to `devices` users.
pub fn fidelity_check(
    model: &Model,
    data: &SplitDataset,
    devices: usize,
    tolerance: f32,
) -> Result<FidelityReport> {
    let cfg = model.backbone();
    let Some(mapper) = model.mapper()? else {
        return Err(Error::Config("fidelity check needs a mapper".into()));
    };
    let shared = model.shared_head()?;
    let mut max = 0.0f32;
    let n = devices.min(data.users.len());
    for (u, s) in data.users.iter().take(n).enumerate() {
        let req = device_prepare_request(model, u as u64, &s.train)?;
        let (am, _) = cloud_assemble(cfg, &mapper, &req)?;
        let ids = recent(&s.train, cfg.max_seq_len);
        let deployed = am.score_next(cfg, &shared, ids)?;
        let gen = generate_weights(&mapper, &req.h)?;
        let all = (0..cfg.n_blocks)
            .map(|k| gen.block_tensors(cfg, k))
            .collect::<fofa_core::Result<Vec<_>>>()?;
        let gate = am.gate.to_tensor();
        let masked = gated_forward(
            cfg,
            &all,
            &shared,
            ids,
            ForwardMode::TrainMasked { gate: &gate },
        )?;
        for (a, b) in deployed.iter().zip(masked.row(ids.len() - 1)) {
            max = max.max((a - b).abs());
        }
    }
    Ok(FidelityReport {
        devices: n,
        max_abs_diff: max,
        tolerance,
        pass: max <= tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    /// Adjacent `λ` pairs, over all seeds, where executed blocks rose.
    pub executed_inversions: usize,
    pub flops_inversions: usize,
    pub allowed_inversions: usize,
    pub pass: bool,
}

/// Executed-block count and FLOPs must be non-increasing in `λ` within
/// each seed, with at most `allowed` rises per metric over all seeds.
pub fn compactness_trend(rows: &[SweepRow], allowed: usize) -> TrendCheck {
    let mut by_seed: BTreeMap<u64, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let (mut ex, mut fl) = (0, 0);
    for curve in by_seed.values_mut() {
        curve.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        for w in curve.windows(2) {
            ex += (w[1].mean_executed > w[0].mean_executed) as usize;
            fl += (w[1].mean_flops > w[0].mean_flops) as usize;
        }
    }
    TrendCheck {
        executed_inversions: ex,
        flops_inversions: fl,
        allowed_inversions: allowed,
        pass: ex <= allowed && fl <= allowed,
    }
}

/// Per-`λ` means over seeds, ascending in `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f32,
    pub seeds: usize,
    pub ndcg: f64,
    pub hit: f64,
    pub mean_flops: f64,
    pub mean_params: f64,
    pub mean_executed: f64,
}

pub fn lambda_curve(rows: &[SweepRow]) -> Vec<LambdaPoint> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)));
    let mut out: Vec<LambdaPoint> = Vec::new();
    for r in sorted {
        match out.last_mut() {
            Some(p) if p.lambda == r.lambda => {
                p.seeds += 1;
                p.ndcg += r.ndcg;
                p.hit += r.hit;
                p.mean_flops += r.mean_flops;
                p.mean_params += r.mean_params;
                p.mean_executed += r.mean_executed;
            }
            _ => out.push(LambdaPoint {
                lambda: r.lambda,
                seeds: 1,
                ndcg: r.ndcg,
                hit: r.hit,
                mean_flops: r.mean_flops,
                mean_params: r.mean_params,
                mean_executed: r.mean_executed,
            }),
        }
    }
    for p in &mut out {
        let n = p.seeds as f64;
        p.ndcg /= n;
        p.hit /= n;
        p.mean_flops /= n;
        p.mean_params /= n;
        p.mean_executed /= n;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockUsage {
    pub block: usize,
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    pub kept_blocks: usize,
    pub models: usize,
}

/// Recounts block usage and the kept-count distribution over every model a
/// fleet assembled.
pub fn usage_from_traces(
    traces: &[SessionTrace],
    n_blocks: usize,
) -> (Vec<BlockUsage>, Vec<BlockCount>) {
    let mut usage = vec![0usize; n_blocks];
    let mut counts = vec![0usize; n_blocks + 1];
    for gate in traces.iter().flat_map(|t| &t.kept) {
        for (k, &on) in gate.iter().enumerate() {
            usage[k] += on as usize;
        }
        counts[gate.iter().filter(|&&b| b).count()] += 1;
    }
    histograms(&usage, &counts)
}

fn histograms(usage: &[usize], counts: &[usize]) -> (Vec<BlockUsage>, Vec<BlockCount>) {
    (
        usage
            .iter()
            .enumerate()
            .map(|(block, &selected)| BlockUsage { block, selected })
            .collect(),
        counts
            .iter()
            .enumerate()
            .map(|(kept_blocks, &models)| BlockCount {
                kept_blocks,
                models,
            })
            .collect(),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub written: Vec<PathBuf>,
    /// Block-usage total equals the sum of kept counts, wherever both exist.
    pub consistent: bool,
    pub trend: Option<TrendCheck>,
}

/// Turns the artifacts found in `dir` into plot-ready CSVs next to them.
pub fn report(dir: &Path) -> Result<ReportSummary> {
    let mut s = ReportSummary {
        consistent: true,
        ..Default::default()
    };
    let sweep = dir.join(SWEEP_LOG);
    if sweep.exists() {
        let (cfg, rows): (RunConfig, Vec<SweepRow>) = read_jsonl(&sweep)?;
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)));
        let p = dir.join("lambda_runs.csv");
        write_csv(&p, &cfg, &sorted)?;
        s.written.push(p);
        let p = dir.join("lambda_curve.csv");
        write_csv(&p, &cfg, &lambda_curve(&rows))?;
        s.written.push(p);
        s.trend = Some(compactness_trend(&rows, 1));
    }
    let mut hist = None;
    let traces = dir.join(TRACE_LOG);
    let eval = dir.join(EVAL_LOG);
    if traces.exists() {
        let (cfg, rows): (RunConfig, Vec<SessionTrace>) = read_jsonl(&traces)?;
        let n_blocks = rows
            .iter()
            .flat_map(|t| t.kept.first())
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        hist = Some((cfg, usage_from_traces(&rows, n_blocks)));
    } else if eval.exists() {
        let (cfg, rows): (RunConfig, Vec<EvalRow>) = read_jsonl(&eval)?;
        if let Some(r) = rows.iter().find(|r| r.policy == GatePolicy::Learned) {
            hist = Some((cfg, histograms(&r.block_usage, &r.count_hist)));
        }
    }
    if let Some((cfg, (usage, counts))) = hist {
        let used: usize = usage.iter().map(|u| u.selected).sum();
        let kept: usize = counts.iter().map(|c| c.kept_blocks * c.models).sum();
        s.consistent = used == kept;
        for (name, write) in [
            (
                "block_usage.csv",
                write_csv(&dir.join("block_usage.csv"), &cfg, &usage),
            ),
            (
                "block_count.csv",
                write_csv(&dir.join("block_count.csv"), &cfg, &counts),
            ),
        ] {
            write?;
            s.written.push(dir.join(name));
        }
    }
    if s.written.is_empty() {
        return Err(Error::MissingArtifact(
            dir.join(format!("{{{SWEEP_LOG},{TRACE_LOG},{EVAL_LOG}}}")),
        ));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lambda: f32, seed: u64, executed: f64) -> SweepRow {
        SweepRow {
            lambda,
            seed,
            ndcg: 0.1,
            hit: 0.2,
            mean_flops: executed * 10.0,
            mean_params: 1.0,
            mean_executed: executed,
        }
    }

    #[test]
    fn trend_counts_rises_per_seed() {
        let mut rows = vec![row(0.0, 1, 6.0), row(0.1, 1, 3.0), row(0.01, 1, 5.0)];
        assert!(compactness_trend(&rows, 0).pass);
        rows.push(row(0.0, 2, 4.0));
        rows.push(row(0.01, 2, 4.5));
        let t = compactness_trend(&rows, 1);
        assert_eq!(
            (t.executed_inversions, t.flops_inversions, t.pass),
            (1, 1, true)
        );
        assert!(!compactness_trend(&rows, 0).pass);
    }

    #[test]
    fn curve_is_sorted_and_averaged() {
        let c = lambda_curve(&[row(0.1, 1, 2.0), row(0.0, 1, 6.0), row(0.1, 2, 4.0)]);
        assert_eq!(c.len(), 2);
        assert_eq!(
            (c[0].lambda, c[1].lambda, c[1].seeds, c[1].mean_executed),
            (0.0, 0.1, 2, 3.0)
        );
    }

    #[test]
    fn report_recounts_trace_histograms() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![
            SessionTrace {
                device: 0,
                kept: vec![vec![true, false, true], vec![true, true, true]],
                ..Default::default()
            },
            SessionTrace {
                device: 1,
                kept: vec![vec![false, false, false]],
                ..Default::default()
            },
        ];
        let cfg = RunConfig::default();
        write_jsonl(&dir.path().join(TRACE_LOG), &cfg, &traces).unwrap();
        let s = report(dir.path()).unwrap();
        assert!(s.consistent);
        let usage: Vec<BlockUsage> = read_csv(&dir.path().join("block_usage.csv")).unwrap();
        assert_eq!(
            usage.iter().map(|u| u.selected).collect::<Vec<_>>(),
            vec![2, 1, 2]
        );
        assert!(usage.iter().all(|u| u.selected <= 3));
        let counts: Vec<BlockCount> = read_csv(&dir.path().join("block_count.csv")).unwrap();
        assert_eq!(
            counts.iter().map(|c| c.models).collect::<Vec<_>>(),
            vec![1, 0, 1, 1]
        );
    }

    #[test]
    fn empty_run_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
