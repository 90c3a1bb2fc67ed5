use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fofa::checkpoint::Checkpoint;
use fofa::config::{Overrides, RunConfig};
use fofa::cost::adaptation_cost_report;
use fofa::error::{Error, Result};
use fofa::experiments::{self as ex, CHECKPOINT_FILE, EVAL_LOG, SWEEP_LOG, TRACE_LOG, TRAIN_LOG};
use fofa::fleet::{fleet_from_dataset, simulate_fleet, worker_threads};
use fofa::session::{fit_readout, Cloud, Policy};
use fofa_core::eval::{describe, evaluate, lambda_sweep, GatePolicy, Ranking};
use fofa_core::model::Mode;
use fofa_core::RngState;

#[derive(Parser)]
#[command(
    name = "fofa",
    about = "Structure-adaptive on-device recommendation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, a per-epoch log and test metrics.
    Train(Common),
    /// Evaluate a checkpoint under every gate policy it supports.
    Evaluate(Common),
    /// Run the device-cloud protocol over a fleet of devices.
    Simulate(Common),
    /// Train one model per (λ, seed) and check the compactness trend.
    Sweep(Common),
    /// Write plot-ready CSVs and the adaptation cost report for a run directory.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Ratings log (`user::item::rating::ts` or delimited).
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Use the generated multi-cluster dataset.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gate policy (evaluate) or refresh policy (simulate): `every-s:N`
    /// or `drift:WINDOW:THRESHOLD`.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long, conflicts_with = "sampled_negatives")]
    full_rank: bool,
    #[arg(long)]
    sampled_negatives: Option<usize>,
    /// Checkpoint to load; defaults to the one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn parse_session_policy(s: &str) -> Result<Policy> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || {
        Error::Config(format!(
            "--policy: cannot parse `{s}` as every-s:N or drift:WINDOW:THRESHOLD"
        ))
    };
    let p = match parts.as_slice() {
        ["every-s", n] => Policy::EveryS {
            s: n.parse().map_err(|_| bad())?,
        },
        ["drift", w, t] => Policy::Drift {
            window: w.parse().map_err(|_| bad())?,
            threshold: t.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    p.validate()?;
    Ok(p)
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let ranking = match (self.full_rank, self.sampled_negatives) {
            (true, _) => Some(Ranking::Full),
            (_, Some(n)) => Some(Ranking::Sampled { negatives: n }),
            _ => None,
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            mode: self.mode,
            lambda: self.lambda,
            tau: self.tau,
            dataset: self.dataset.clone(),
            synthetic: self.synthetic,
            out: self.out.clone(),
            ranking,
            epochs: self.epochs,
        });
        cfg.validate()?;
        ex::create_dir(&cfg.out)?;
        std::fs::write(cfg.out.join("run.toml"), cfg.to_toml()?)
            .map_err(|e| Error::io(&cfg.out, e))?;
        Ok(cfg)
    }

    fn checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let path = self
            .checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Checkpoint::load(&path)
    }
}

/// Outcome of a command: whether its acceptance-relevant checks held.
type Checked = Result<bool>;

fn train(c: &Common) -> Checked {
    let cfg = c.resolve()?;
    let loaded = ex::load_data(&cfg.data)?;
    eprintln!(
        "{} users, {} items, {} interactions",
        loaded.data.n_users(),
        loaded.data.n_items(),
        loaded.data.n_interactions()
    );
    let (trainer, logs) = ex::train_model(&cfg, &loaded.data, |l| {
        eprintln!(
            "epoch {} rec {:.4} lc {:.4} total {:.4} blocks {:.2}",
            l.epoch, l.loss.l_rec, l.loss.l_c, l.loss.total, l.loss.mean_executed
        )
    })?;
    ex::write_jsonl(&cfg.out.join(TRAIN_LOG), &cfg, &logs)?;
    Checkpoint {
        model: trainer.model.clone(),
        train: cfg.train.clone(),
        rng: RngState::new(cfg.seed),
        step: trainer.step_count(),
        epoch: trainer.epoch_count(),
    }
    .save(&cfg.out.join(CHECKPOINT_FILE))?;
    let row = evaluate(&trainer.model, &loaded.data, GatePolicy::Learned, cfg.eval)?;
    println!("{}", describe(&row));
    ex::write_jsonl(&cfg.out.join("metrics.jsonl"), &cfg, &[row])?;
    Ok(true)
}

fn evaluate_cmd(c: &Common) -> Checked {
    let cfg = c.resolve()?;
    let ck = c.checkpoint(&cfg)?;
    let data = ex::load_data(&cfg.data)?.data;
    let rows = match &c.policy {
        Some(p) => vec![evaluate(&ck.model, &data, GatePolicy::parse(p)?, cfg.eval)?],
        None => ex::eval_table(&ck.model, &data, cfg.eval)?,
    };
    for r in &rows {
        println!("{}", describe(r));
    }
    ex::write_jsonl(&cfg.out.join(EVAL_LOG), &cfg, &rows)?;
    ex::write_csv(
        &cfg.out.join("eval.csv"),
        &cfg,
        &rows.iter().map(EvalCsv::from).collect::<Vec<_>>(),
    )?;
    if ck.model.mode() != Mode::ForwardOfa {
        return Ok(true);
    }
    let fid = ex::fidelity_check(&ck.model, &data, 100, 1e-5)?;
    println!(
        "assembled vs masked: {} devices, max |Δ| {:.2e} ({})",
        fid.devices,
        fid.max_abs_diff,
        pass(fid.pass)
    );
    ex::write_jsonl(&cfg.out.join("fidelity.jsonl"), &cfg, &[&fid])?;
    Ok(fid.pass)
}

#[derive(serde::Serialize)]
struct EvalCsv {
    mode: &'static str,
    policy: &'static str,
    cases: usize,
    ndcg: f64,
    hit: f64,
    mean_flops: f64,
    mean_params: f64,
    mean_executed: f64,
}

impl From<&fofa_core::eval::EvalRow> for EvalCsv {
    fn from(r: &fofa_core::eval::EvalRow) -> Self {
        Self {
            mode: r.mode.name(),
            policy: r.policy.name(),
            cases: r.cases,
            ndcg: r.ndcg,
            hit: r.hit,
            mean_flops: r.mean_flops,
            mean_params: r.mean_params,
            mean_executed: r.mean_executed,
        }
    }
}

fn simulate(c: &Common) -> Checked {
    let mut cfg = c.resolve()?;
    if let Some(p) = &c.policy {
        cfg.session.policy = parse_session_policy(p)?;
    }
    let ck = c.checkpoint(&cfg)?;
    let loaded = ex::load_data(&cfg.data)?;
    let switches = loaded.synthetic.as_ref().map(|s| s.switches.as_slice());
    let mut devices = fleet_from_dataset(&loaded.data, cfg.fleet.context_len, switches);
    devices.truncate(cfg.fleet.devices);
    let contexts: Vec<Vec<usize>> = devices.iter().map(|d| d.context.clone()).collect();
    let readout = fit_readout(&ck.model, &contexts, cfg.fleet.ridge)?;
    let cloud = Cloud::new(&ck.model, readout, cfg.session.candidates)?;
    let (report, traces) =
        simulate_fleet(&ck.model, &cloud, &devices, &cfg.session, worker_threads())?;
    ex::write_jsonl(&cfg.out.join(TRACE_LOG), &cfg, &traces)?;
    ex::write_jsonl(&cfg.out.join("fleet.jsonl"), &cfg, &[&report])?;
    println!(
        "{} devices, {} interactions: hit@{} {:.4} ndcg {:.4} coverage {:.3}",
        report.devices,
        report.interactions,
        cfg.session.k,
        report.hit,
        report.ndcg,
        report.coverage
    );
    println!(
        "uplink {} B, downlink {} B, {:.2} refreshes per device, injected switches {:?}",
        report.uplink_bytes, report.downlink_bytes, report.mean_refreshes, report.injected_switches
    );
    println!("privacy audit: {}", pass(report.audit.pass));
    for f in &report.audit.findings {
        println!("  {f}");
    }
    let isolated = report.messages_between_refreshes == 0 && report.backward_passes == 0;
    Ok(report.audit.pass && isolated)
}

fn sweep(c: &Common) -> Checked {
    let cfg = c.resolve()?;
    let data = ex::load_data(&cfg.data)?.data;
    let mut grid = cfg.sweep.lambdas.clone();
    grid.sort_by(f32::total_cmp);
    grid.dedup();
    let mut rows = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let model_cfg = cfg.model_config(data.n_items())?;
        let train = fofa_core::train::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let opts = fofa_core::eval::EvalOptions { seed, ..cfg.eval };
        for r in lambda_sweep(&data, &grid, &model_cfg, &train, opts)? {
            println!(
                "λ {} seed {}: ndcg {:.4} blocks {:.2} flops {:.0}",
                r.lambda, r.seed, r.ndcg, r.mean_executed, r.mean_flops
            );
            rows.push(r);
        }
    }
    ex::write_jsonl(&cfg.out.join(SWEEP_LOG), &cfg, &rows)?;
    let trend = ex::compactness_trend(&rows, 1);
    println!(
        "compactness trend: {} ({} block, {} FLOPs inversions)",
        pass(trend.pass),
        trend.executed_inversions,
        trend.flops_inversions
    );
    Ok(trend.pass)
}

fn report(c: &Common) -> Checked {
    let cfg = c.resolve()?;
    let dir: &Path = &cfg.out;
    let mut ok = true;
    match ex::report(dir) {
        Ok(s) => {
            for p in &s.written {
                println!("wrote {}", p.display());
            }
            ok &= s.consistent && s.trend.as_ref().map_or(true, |t| t.pass);
        }
        Err(Error::MissingArtifact(_)) if c.checkpoint(&cfg).is_ok() => {}
        Err(e) => return Err(e),
    }
    if let Ok(ck) = c.checkpoint(&cfg) {
        if ck.model.mode().has_mapper() && ck.model.mode().has_controller() {
            let data = ex::load_data(&cfg.data)?.data;
            let r = adaptation_cost_report(&ck.model, &data)?;
            println!(
                "adaptation {:.0} FLOPs vs fine-tune epoch {:.0} FLOPs: ×{:.1}; model bytes {:.0} vs {} (×{:.2}); backward passes {}",
                r.mean_adaptation_flops,
                r.mean_finetune_epoch_flops,
                r.flops_ratio,
                r.mean_assembled_bytes,
                r.full_model_bytes,
                r.bytes_ratio,
                r.backward_passes
            );
            ex::write_jsonl(&dir.join("adaptation.jsonl"), &cfg, &[&r])?;
            ok &= r.backward_passes == 0 && r.flops_ratio >= 10.0;
        }
    }
    Ok(ok)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match &cli.command {
        Command::Train(c) => train(c),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::Simulate(c) => simulate(c),
        Command::Sweep(c) => sweep(c),
        Command::Report(c) => report(c),
    };
    match out {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
