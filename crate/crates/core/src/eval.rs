//! Leave-one-out evaluation under a gate policy, plus the λ sweep.
//!
//! Each user's training sequence (most recent `max_seq_len` items) is the
//! input and the held-out item the target. Blocks come from the mapper
//! when the model has one, conditioned on the controller's `β`, and only
//! the blocks the policy keeps are generated and run.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::assembly::recent;
use crate::backbone::{deploy_hidden, flops_count, param_count, unflatten_block, GateIndicator};
use crate::controller::{extract_structure_logits, harden, StructureLogits};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::mapper::{extract_latent, generate_block};
use crate::math::dot;
use crate::metrics::{rank_among, rank_of, RankAccumulator};
use crate::model::{Mode, Model, ModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{Example, TrainConfig, Trainer};

/// Which blocks run at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum GatePolicy {
    /// `harden(β)`, or every block for models without a controller.
    Learned,
    /// `k` blocks drawn uniformly, `k` being the learned kept count.
    RandomBlock,
    FirstK,
    LastK,
    AllExecute,
}

impl GatePolicy {
    pub const ALL: [GatePolicy; 5] = [
        GatePolicy::Learned,
        GatePolicy::RandomBlock,
        GatePolicy::FirstK,
        GatePolicy::LastK,
        GatePolicy::AllExecute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GatePolicy::Learned => "learned",
            GatePolicy::RandomBlock => "random-block",
            GatePolicy::FirstK => "first-k",
            GatePolicy::LastK => "last-k",
            GatePolicy::AllExecute => "all-execute",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        GatePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown gate policy `{s}`")))
    }

    fn needs_controller(self) -> bool {
        matches!(
            self,
            GatePolicy::RandomBlock | GatePolicy::FirstK | GatePolicy::LastK
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Ranking {
    Full,
    /// Target against this many distinct items drawn from the rest.
    Sampled {
        negatives: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvalOptions {
    pub k: usize,
    pub ranking: Ranking,
    /// Drives random-block gates and sampled negatives.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 10,
            ranking: Ranking::Full,
            seed: 1,
        }
    }
}

/// Outcome for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserOutcome {
    pub rank: usize,
    pub gate: GateIndicator,
    pub flops: u64,
    pub params: usize,
}

/// Per-worker sums; merging is associative.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPartial {
    pub acc: RankAccumulator,
    pub flops_sum: f64,
    pub params_sum: f64,
    pub executed_sum: usize,
    /// Times each block was kept.
    pub block_usage: Vec<usize>,
    /// Users by kept-block count, `0..=L`.
    pub count_hist: Vec<usize>,
}

impl EvalPartial {
    pub fn new(k: usize, n_blocks: usize) -> Self {
        Self {
            acc: RankAccumulator::new(k),
            flops_sum: 0.0,
            params_sum: 0.0,
            executed_sum: 0,
            block_usage: vec![0; n_blocks],
            count_hist: vec![0; n_blocks + 1],
        }
    }

    pub fn push(&mut self, o: &UserOutcome) {
        self.acc.push(o.rank);
        self.flops_sum += o.flops as f64;
        self.params_sum += o.params as f64;
        self.executed_sum += o.gate.executed_count();
        for k in o.gate.kept() {
            self.block_usage[k] += 1;
        }
        self.count_hist[o.gate.executed_count()] += 1;
    }

    pub fn merge(&mut self, other: &EvalPartial) {
        self.acc.merge(&other.acc);
        self.flops_sum += other.flops_sum;
        self.params_sum += other.params_sum;
        self.executed_sum += other.executed_sum;
        for (a, b) in self.block_usage.iter_mut().zip(&other.block_usage) {
            *a += b;
        }
        for (a, b) in self.count_hist.iter_mut().zip(&other.count_hist) {
            *a += b;
        }
    }

    pub fn finish(&self, mode: Mode, policy: GatePolicy) -> EvalRow {
        let n = self.acc.cases.max(1) as f64;
        EvalRow {
            mode,
            policy,
            cases: self.acc.cases,
            ndcg: self.acc.ndcg(),
            hit: self.acc.hit(),
            mean_flops: self.flops_sum / n,
            mean_params: self.params_sum / n,
            mean_executed: self.executed_sum as f64 / n,
            block_usage: self.block_usage.clone(),
            count_hist: self.count_hist.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRow {
    pub mode: Mode,
    pub policy: GatePolicy,
    pub cases: usize,
    pub ndcg: f64,
    pub hit: f64,
    pub mean_flops: f64,
    pub mean_params: f64,
    pub mean_executed: f64,
    pub block_usage: Vec<usize>,
    pub count_hist: Vec<usize>,
}

/// Unpacked model parts, built once per evaluation.
pub struct Evaluator<'a> {
    model: &'a Model,
    shared: crate::backbone::SharedHead,
    blocks: Option<Vec<Vec<Tensor>>>,
    controller: Option<crate::controller::ControllerWeights>,
    mapper: Option<crate::mapper::MapperWeights>,
    pub policy: GatePolicy,
    pub opts: EvalOptions,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a Model, policy: GatePolicy, opts: EvalOptions) -> Result<Self> {
        let controller = model.controller()?;
        if policy.needs_controller() && controller.is_none() {
            return Err(Error::config(format!(
                "policy {} needs a controller, mode {} has none",
                policy.name(),
                model.mode()
            )));
        }
        if opts.k == 0 {
            return Err(Error::config("k must be ≥ 1"));
        }
        Ok(Self {
            model,
            shared: model.shared_head()?,
            blocks: model.shared_blocks()?,
            controller,
            mapper: model.mapper()?,
            policy,
            opts,
        })
    }

    fn gate_for(&self, beta: Option<&StructureLogits>, rng: &mut RngState) -> GateIndicator {
        let l = self.model.backbone().n_blocks;
        let learned = beta
            .map(harden)
            .unwrap_or_else(|| GateIndicator::all_execute(l));
        let k = learned.executed_count();
        match self.policy {
            GatePolicy::Learned => learned,
            GatePolicy::AllExecute => GateIndicator::all_execute(l),
            GatePolicy::FirstK => GateIndicator::from_execute((0..l).map(|i| i < k).collect()),
            GatePolicy::LastK => GateIndicator::from_execute((0..l).map(|i| i >= l - k).collect()),
            GatePolicy::RandomBlock => {
                let mut idx: Vec<usize> = (0..l).collect();
                rng.shuffle(&mut idx);
                let mut exec = vec![false; l];
                for &i in &idx[..k] {
                    exec[i] = true;
                }
                GateIndicator::from_execute(exec)
            }
        }
    }

    /// Scores of every catalog item for the next position after `history`.
    pub fn scores(
        &self,
        history: &[usize],
        rng: &mut RngState,
    ) -> Result<(Vec<f32>, GateIndicator)> {
        let cfg = self.model.backbone();
        let ids = recent(history, cfg.max_seq_len);
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let needs_emb = self.controller.is_some() || self.mapper.is_some();
        let emb = if needs_emb {
            Some(self.model.embed_items(ids)?)
        } else {
            None
        };
        let beta = match (&self.controller, &emb) {
            (Some(c), Some(e)) => Some(extract_structure_logits(c, e)?),
            _ => None,
        };
        let gate = self.gate_for(beta.as_ref(), rng);
        let kept: Vec<(usize, Vec<Tensor>)> = match (&self.mapper, &self.blocks) {
            (Some(m), _) => {
                let h = extract_latent(
                    m,
                    emb.as_ref().expect("mapper needs embeddings"),
                    beta.as_ref(),
                )?;
                gate.kept()
                    .map(|k| Ok((k, unflatten_block(cfg, generate_block(m, &h, k)?.data())?)))
                    .collect::<Result<_>>()?
            }
            (None, Some(b)) => gate.kept().map(|k| (k, b[k].clone())).collect(),
            (None, None) => {
                return Err(Error::contract(
                    "model has neither shared nor generated blocks",
                ))
            }
        };
        let refs: Vec<(usize, &[Tensor])> = kept.iter().map(|(k, w)| (*k, &w[..])).collect();
        let hf = deploy_hidden(cfg, &self.shared, &refs, ids)?;
        let last = hf.row(hf.shape()[0] - 1);
        let scores = (0..cfg.n_items)
            .map(|i| dot(last, self.shared.item_emb.row(i)))
            .collect();
        Ok((scores, gate))
    }

    /// Rank of `target` after `history`; `key` fixes this user's randomness.
    pub fn user(&self, history: &[usize], target: usize, key: u64) -> Result<UserOutcome> {
        let cfg = self.model.backbone();
        if target >= cfg.n_items {
            return Err(Error::IdOutOfRange {
                id: target,
                n_items: cfg.n_items,
            });
        }
        let mut rng = RngState::new(self.opts.seed).fork(key);
        let (scores, gate) = self.scores(history, &mut rng)?;
        let rank = match self.opts.ranking {
            Ranking::Full => rank_of(&scores, target),
            Ranking::Sampled { negatives } => {
                let pool = cfg.n_items - 1;
                if negatives > pool {
                    return Err(Error::config(format!(
                        "{negatives} negatives from a catalog of {}",
                        cfg.n_items
                    )));
                }
                let mut others: Vec<usize> = (0..cfg.n_items).filter(|&i| i != target).collect();
                // partial Fisher-Yates: the first `negatives` slots are a uniform sample
                for i in 0..negatives {
                    let j = i + rng.below(pool - i);
                    others.swap(i, j);
                }
                rank_among(&scores, target, &others[..negatives])
            }
        };
        let t = recent(history, cfg.max_seq_len).len();
        Ok(UserOutcome {
            rank,
            flops: flops_count(cfg, &gate, t),
            params: param_count(cfg, &gate).total,
            gate,
        })
    }

    /// Users `range` of `data`, summed.
    pub fn partial(
        &self,
        data: &SplitDataset,
        users: core::ops::Range<usize>,
    ) -> Result<EvalPartial> {
        let mut p = EvalPartial::new(self.opts.k, self.model.backbone().n_blocks);
        for u in users {
            let s = &data.users[u];
            p.push(&self.user(&s.train, s.test, u as u64)?);
        }
        Ok(p)
    }
}

pub fn evaluate(
    model: &Model,
    data: &SplitDataset,
    policy: GatePolicy,
    opts: EvalOptions,
) -> Result<EvalRow> {
    if data.users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ev = Evaluator::new(model, policy, opts)?;
    Ok(ev
        .partial(data, 0..data.users.len())?
        .finish(model.mode(), policy))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub lambda: f32,
    pub seed: u64,
    pub ndcg: f64,
    pub hit: f64,
    pub mean_flops: f64,
    pub mean_params: f64,
    pub mean_executed: f64,
}

/// Trains one model per `λ` from the same seed and evaluates it.
pub fn lambda_sweep(
    data: &SplitDataset,
    grid: &[f32],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: EvalOptions,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config(format!(
            "λ grid must be non-empty and strictly ascending, got {grid:?}"
        )));
    }
    let examples = Example::from_dataset(data);
    grid.iter()
        .map(|&lambda| {
            let model = Model::init(model_cfg.clone(), train_cfg.seed)?;
            let mut t = Trainer::new(
                model,
                TrainConfig {
                    lambda,
                    ..train_cfg.clone()
                },
            )?;
            t.fit(&examples, |_| {})?;
            let row = evaluate(&t.model, data, GatePolicy::Learned, opts)?;
            Ok(SweepRow {
                lambda,
                seed: train_cfg.seed,
                ndcg: row.ndcg,
                hit: row.hit,
                mean_flops: row.mean_flops,
                mean_params: row.mean_params,
                mean_executed: row.mean_executed,
            })
        })
        .collect()
}

/// `name=value` pairs describing a row, for logs.
pub fn describe(row: &EvalRow) -> String {
    format!(
        "mode={} policy={} ndcg@10={:.4} hit@10={:.4} flops={:.0} params={:.0} blocks={:.2}",
        row.mode,
        row.policy.name(),
        row.ndcg,
        row.hit,
        row.mean_flops,
        row.mean_params,
        row.mean_executed
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::UserSequence;

    fn dataset(n_items: usize, users: usize, seed: u64) -> SplitDataset {
        let mut r = RngState::new(seed);
        SplitDataset {
            users: (0..users)
                .map(|u| UserSequence {
                    user: u as u64,
                    train: (0..12).map(|_| r.below(n_items)).collect(),
                    test: r.below(n_items),
                })
                .collect(),
            item_ids: (0..n_items as u64).collect(),
        }
    }

    fn model(mode: Mode, seed: u64) -> Model {
        let mut bb = BackboneConfig::attention(40);
        bb.n_blocks = 4;
        bb.d = 8;
        bb.max_seq_len = 10;
        let mut cfg = ModelConfig::new(bb, mode);
        cfg.head_scale = 0.05;
        Model::init(cfg, seed).unwrap()
    }

    #[test]
    fn first_k_with_all_blocks_equals_all_execute() {
        let m = model(Mode::ForwardOfa, 1);
        // force every block on
        let mut m = m;
        let b = m.params.get("ctrl.head.b").unwrap();
        let forced: Vec<f32> = (0..b.numel())
            .map(|i| if i % 2 == 0 { 50.0 } else { -50.0 })
            .collect();
        m.params
            .set("ctrl.head.b", Tensor::new(b.shape(), forced).unwrap())
            .unwrap();
        let data = dataset(40, 12, 2);
        let first = evaluate(&m, &data, GatePolicy::FirstK, EvalOptions::default()).unwrap();
        let all = evaluate(&m, &data, GatePolicy::AllExecute, EvalOptions::default()).unwrap();
        assert_eq!(
            (first.ndcg, first.hit, first.mean_flops),
            (all.ndcg, all.hit, all.mean_flops)
        );
        assert_eq!(first.mean_executed, 4.0);
    }

    #[test]
    fn random_block_is_reproducible_and_keeps_k() {
        let m = model(Mode::ForwardOfa, 3);
        let data = dataset(40, 15, 4);
        let a = evaluate(&m, &data, GatePolicy::RandomBlock, EvalOptions::default()).unwrap();
        let b = evaluate(&m, &data, GatePolicy::RandomBlock, EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        let learned = evaluate(&m, &data, GatePolicy::Learned, EvalOptions::default()).unwrap();
        assert_eq!(a.count_hist, learned.count_hist);
    }

    #[test]
    fn histograms_sum_to_kept_blocks() {
        let m = model(Mode::ControllerOnly, 5);
        let data = dataset(40, 20, 6);
        let row = evaluate(&m, &data, GatePolicy::Learned, EvalOptions::default()).unwrap();
        let kept: usize = row.count_hist.iter().enumerate().map(|(k, n)| k * n).sum();
        assert_eq!(row.block_usage.iter().sum::<usize>(), kept);
        assert_eq!(row.count_hist.iter().sum::<usize>(), 20);
        assert!(row.block_usage.iter().all(|&n| n <= 20));
    }

    #[test]
    fn partials_merge_to_the_whole() {
        let m = model(Mode::MapperOnly, 7);
        let data = dataset(40, 9, 8);
        let ev = Evaluator::new(&m, GatePolicy::Learned, EvalOptions::default()).unwrap();
        let whole = ev.partial(&data, 0..9).unwrap();
        let mut split = ev.partial(&data, 0..4).unwrap();
        split.merge(&ev.partial(&data, 4..9).unwrap());
        assert_eq!(split.acc.cases, whole.acc.cases);
        assert_eq!(split.acc.hits, whole.acc.hits);
        assert!((split.acc.ndcg_sum - whole.acc.ndcg_sum).abs() < 1e-12);
        assert_eq!(split.block_usage, whole.block_usage);
    }

    #[test]
    fn sampled_ranking_bounds_the_rank() {
        let m = model(Mode::DeviceRec, 9);
        let data = dataset(40, 10, 10);
        let opts = EvalOptions {
            ranking: Ranking::Sampled { negatives: 5 },
            ..Default::default()
        };
        let ev = Evaluator::new(&m, GatePolicy::Learned, opts).unwrap();
        for (u, s) in data.users.iter().enumerate() {
            let sampled = ev.user(&s.train, s.test, u as u64).unwrap().rank;
            assert!((1..=6).contains(&sampled));
        }
        let too_many = EvalOptions {
            ranking: Ranking::Sampled { negatives: 40 },
            ..Default::default()
        };
        assert!(evaluate(&m, &data, GatePolicy::Learned, too_many).is_err());
    }

    #[test]
    fn policies_needing_a_controller_are_rejected() {
        let m = model(Mode::DeviceRec, 11);
        assert!(Evaluator::new(&m, GatePolicy::LastK, EvalOptions::default()).is_err());
        assert!(Evaluator::new(&m, GatePolicy::AllExecute, EvalOptions::default()).is_ok());
    }

    #[test]
    fn sweep_rejects_unsorted_grid() {
        let m = model(Mode::ForwardOfa, 1);
        let data = dataset(40, 4, 1);
        let tc = TrainConfig::for_family(crate::backbone::Family::Attention);
        assert!(lambda_sweep(&data, &[0.1, 0.0], &m.cfg, &tc, EvalOptions::default()).is_err());
    }

    #[test]
    fn single_point_sweep_reports_blocks() {
        let m = model(Mode::ForwardOfa, 1);
        let data = dataset(40, 6, 1);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 3,
            ..TrainConfig::for_family(crate::backbone::Family::Attention)
        };
        let rows = lambda_sweep(&data, &[0.0], &m.cfg, &tc, EvalOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((0.0..=4.0).contains(&rows[0].mean_executed));
    }

    #[test]
    fn unknown_policy_is_a_config_error() {
        assert_eq!(GatePolicy::parse("first-k").unwrap(), GatePolicy::FirstK);
        assert!(matches!(
            GatePolicy::parse("middle-k"),
            Err(Error::Config(_))
        ));
    }
}
