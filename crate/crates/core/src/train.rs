//! Joint training: `L = L_rec + λ·L_c`, Adam, per-mode trainable leaves.
//!
//! Each example gets its own tape. In gated and mapper modes the extractors
//! read a prefix `x[..c]` of the input with `c` drawn from the upper half of
//! the sequence, and the recommendation loss covers positions `c-1..` only,
//! so the structure and weights are never conditioned on a target they are
//! scored against. Device-rec training scores every position.
//!
//! Mapper heads enter each tape as constants. The gradient at each
//! generated weight vector is read off the tape and the head update
//! `hᵀ·dW` is accumulated outside it, which keeps per-example tapes free of
//! the head matrices.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Graph, Var};
use crate::backbone::{
    embed, finalize, gated_stack, scores_from, split_flat, Family, GateIndicator, HeadVars,
};
use crate::controller::{
    controller_logits, gumbel_noise, gumbel_straight_through, StructureLogits,
};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::mapper::{head_output, latent, MapperVars};
use crate::math::{axpy, ln, sqrt};
use crate::model::{gru_names, head_names, Model};
use crate::nn::GruVars;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `α_{k,1}` is clamped here before the log.
pub const LOG_FLOOR: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lambda: f32,
    pub tau: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f32,
    /// Learning-rate multiplier for the mapper's head matrices. They start
    /// near zero and Adam steps are scale-free, so this sets how fast the
    /// behavior-dependent part of the generated weights can grow.
    pub head_lr_scale: f32,
}

impl TrainConfig {
    /// Learning rate, temperature and λ defaults of each backbone family.
    pub fn for_family(family: Family) -> Self {
        let (lr, tau, lambda) = match family {
            Family::Attention => (1e-3, 5.0, 0.005),
            Family::CausalConv => (2e-3, 12.0, 0.001),
        };
        Self {
            lambda,
            tau,
            lr,
            batch_size: 32,
            epochs: 20,
            seed: 1,
            clip_norm: 5.0,
            head_lr_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be > 0"));
        }
        if !(self.head_lr_scale > 0.0 && self.head_lr_scale.is_finite()) {
            return Err(Error::config(format!(
                "head_lr_scale must be > 0, got {}",
                self.head_lr_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_rec: f64,
    pub l_c: f64,
    pub total: f64,
    pub mean_executed: f64,
    /// Some `α_{k,1}` fell below [`LOG_FLOOR`].
    pub lc_clamped: bool,
}

/// Mean next-item cross-entropy of `scores[t, n_items]` against `targets`.
pub fn rec_loss(scores: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone())?;
    let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    let l = g.cross_entropy(s, &t)?;
    Ok(g.value(l).item() as f64)
}

/// `Σ_k −ln α_{k,1}` in f64 and whether any term was clamped.
pub fn compact_loss(logits: &StructureLogits) -> (f64, bool) {
    let alpha = logits.alpha();
    let mut clamped = false;
    let mut total = 0.0;
    for row in alpha.data().chunks_exact(2) {
        let a1 = row[1] as f64;
        if a1 < LOG_FLOOR as f64 {
            clamped = true;
        }
        total -= ln(a1.max(LOG_FLOOR as f64));
    }
    (total, clamped)
}

/// Tape version of [`compact_loss`].
pub fn compact_loss_graph(g: &mut Graph, beta: Var) -> Result<(Var, bool)> {
    let alpha = g.softmax(beta)?;
    let clamped = g
        .value(alpha)
        .data()
        .chunks_exact(2)
        .any(|r| r[1] < LOG_FLOOR);
    let logs = g.log_clamped(alpha, LOG_FLOOR)?;
    let rows = g.shape(beta)[0];
    let mask: Vec<f32> = (0..rows).flat_map(|_| [0.0, 1.0]).collect();
    let m = g.constant(Tensor::from_parts(vec![rows, 2], mask))?;
    let picked = g.mul(logs, m)?;
    let s = g.sum(picked)?;
    Ok((g.scale(s, -1.0)?, clamped))
}

/// One training sequence. `key` fixes its noise and context cut per step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub key: u64,
    pub seq: Vec<usize>,
}

impl Example {
    pub fn from_dataset(data: &SplitDataset) -> Vec<Example> {
        data.users
            .iter()
            .enumerate()
            .map(|(i, u)| Example {
                key: i as u64,
                seq: u.train.clone(),
            })
            .collect()
    }
}

/// Explicit `β` and noise for probing the straight-through path. With
/// `frozen` set, the gate is `I + v'(β) − v'₀` for fixed `I` and `v'₀`.
#[derive(Clone, Debug)]
pub struct BetaProbe {
    pub beta: Tensor,
    pub noise: Tensor,
    pub frozen: Option<(GateIndicator, Tensor)>,
}

fn is_head_matrix(name: &str) -> bool {
    name.starts_with("map.head") && name.ends_with(".w")
}

#[derive(Clone, Debug)]
struct Adam {
    b1: f32,
    b2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Per-leaf gradients in trainable order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub names: Vec<String>,
    pub grads: Vec<Vec<f32>>,
}

impl GradSet {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i][..])
    }

    pub fn global_norm(&self) -> f64 {
        sqrt(
            self.grads
                .iter()
                .flatten()
                .map(|&g| g as f64 * g as f64)
                .sum(),
        )
    }
}

struct Built {
    g: Graph,
    loss: Var,
    beta: Option<Var>,
    leaves: Vec<(usize, Var)>,
    heads: Vec<(usize, Var, Var)>,
    l_rec: f64,
    l_c: f64,
    executed: usize,
    clamped: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    trainable: Vec<(String, usize)>,
    adam: Adam,
    step: u64,
    epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: u64,
    pub steps: u64,
    pub loss: LossReport,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let trainable: Vec<(String, usize)> = model
            .trainable_names()
            .into_iter()
            .map(|n| {
                let pos = model
                    .params
                    .position(&n)
                    .expect("trainable name comes from the store");
                (n, pos)
            })
            .collect();
        let sizes: Vec<usize> = trainable
            .iter()
            .map(|(_, p)| {
                model
                    .params
                    .iter()
                    .nth(*p)
                    .map(|(_, t)| t.numel())
                    .unwrap_or(0)
            })
            .collect();
        let adam = Adam {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        };
        Ok(Self {
            model,
            cfg,
            trainable,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch_count(&self) -> u64 {
        self.epoch
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable.iter().map(|(n, _)| n.clone()).collect()
    }

    fn example_rng(&self, key: u64) -> RngState {
        RngState::new(self.cfg.seed)
            .fork(0x5354_4550 ^ self.step)
            .fork(key)
    }

    fn build(&self, ex: &Example, scale: f32, probe: Option<&BetaProbe>) -> Result<Built> {
        let model = &self.model;
        let bb = model.backbone();
        let mode = model.mode();
        let keep = bb.max_seq_len + 1;
        let seq = &ex.seq[ex.seq.len().saturating_sub(keep)..];
        if seq.len() < 2 {
            return Err(Error::contract(
                "a training sequence needs at least two items",
            ));
        }
        let n = seq.len() - 1;
        let (x, y) = (&seq[..n], &seq[1..]);
        let mut rng = self.example_rng(ex.key);
        let conditioned = mode.has_controller() || mode.has_mapper();
        let cut = if conditioned {
            let lo = n.div_ceil(2).max(1);
            lo + rng.below(n - lo + 1)
        } else {
            n
        };
        let from_row = if conditioned { cut - 1 } else { 0 };

        let mut g = Graph::new();
        let mut leaves = Vec::new();
        let trainable = &self.trainable;
        let mut bind = |g: &mut Graph, name: &str| -> Result<Var> {
            let t = model.params.get(name)?.clone();
            match trainable.iter().position(|(n, _)| n == name) {
                Some(i) => {
                    let v = g.param(t)?;
                    leaves.push((i, v));
                    Ok(v)
                }
                None => g.constant(t),
            }
        };
        let head = HeadVars {
            item_emb: bind(&mut g, "item_emb")?,
            pos_emb: bind(&mut g, "pos_emb")?,
            ln_g: bind(&mut g, "final_ln.g")?,
            ln_b: bind(&mut g, "final_ln.b")?,
        };
        let ctx = if conditioned {
            crate::backbone::check_ids(bb, x)?;
            Some(g.gather(head.item_emb, &x[..cut])?)
        } else {
            None
        };

        let mut beta = None;
        let mut gate = None;
        let mut lc = None;
        let mut executed = bb.n_blocks;
        let mut clamped = false;
        if mode.has_controller() {
            let b = match probe {
                Some(p) => g.param(p.beta.clone())?,
                None => {
                    let names = gru_names("ctrl");
                    let gv: Vec<Var> = names
                        .iter()
                        .map(|n| bind(&mut g, n))
                        .collect::<Result<_>>()?;
                    let hw = bind(&mut g, "ctrl.head.w")?;
                    let hb = bind(&mut g, "ctrl.head.b")?;
                    controller_logits(
                        &mut g,
                        &GruVars::from_slice(&gv),
                        hw,
                        hb,
                        ctx.expect("conditioned"),
                    )?
                }
            };
            let noise = match probe {
                Some(p) => p.noise.clone(),
                None => gumbel_noise(&mut rng, bb.n_blocks),
            };
            let (gv, hard) = match probe.and_then(|p| p.frozen.as_ref()) {
                Some((hard, soft0)) => {
                    let nv = g.constant(noise)?;
                    let pert = g.add(b, nv)?;
                    let sc = g.scale(pert, 1.0 / self.cfg.tau)?;
                    let soft = g.softmax(sc)?;
                    let s0 = g.constant(soft0.clone())?;
                    let delta = g.sub(soft, s0)?;
                    let hv = g.constant(hard.to_tensor())?;
                    (g.add(hv, delta)?, hard.clone())
                }
                None => gumbel_straight_through(&mut g, b, &noise, self.cfg.tau)?,
            };
            executed = hard.executed_count();
            let (l, c) = compact_loss_graph(&mut g, b)?;
            clamped = c;
            lc = Some(l);
            beta = Some(b);
            gate = Some(gv);
        }

        let mut heads = Vec::new();
        let blocks: Vec<Vec<Var>> = if mode.has_mapper() {
            let names = gru_names("map");
            let gv: Vec<Var> = names
                .iter()
                .map(|n| bind(&mut g, n))
                .collect::<Result<_>>()?;
            let mv = MapperVars {
                gru: GruVars::from_slice(&gv),
                seed_w: bind(&mut g, "map.seed.w")?,
                seed_b: bind(&mut g, "map.seed.b")?,
            };
            let h = latent(
                &mut g,
                &mv,
                model.cfg.injection,
                ctx.expect("conditioned"),
                beta,
            )?;
            let mut blocks = Vec::with_capacity(bb.n_blocks);
            for k in 0..bb.n_blocks {
                let (wn, bn) = head_names(k);
                let hw = g.constant(model.params.get(&wn)?.clone())?;
                let hb = g.constant(model.params.get(&bn)?.clone())?;
                let w = head_output(&mut g, h, hw, hb)?;
                heads.push((k, h, w));
                blocks.push(split_flat(&mut g, bb, w)?);
            }
            blocks
        } else {
            (0..bb.n_blocks)
                .map(|l| {
                    crate::backbone::block_tensor_names(bb, l)
                        .iter()
                        .map(|n| bind(&mut g, n))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        };

        let h0 = embed(&mut g, bb, &head, x)?;
        let hs = gated_stack(&mut g, bb, &blocks, h0, gate)?;
        let hf = finalize(&mut g, &head, hs)?;
        let scores = scores_from(&mut g, &head, hf, from_row)?;
        let targets: Vec<Option<usize>> = y[from_row..].iter().map(|&t| Some(t)).collect();
        let rec = g.cross_entropy(scores, &targets)?;
        let l_rec = g.value(rec).item() as f64;
        let (total, l_c) = match lc {
            Some(l) => {
                let l_c = g.value(l).item() as f64;
                let weighted = g.scale(l, self.cfg.lambda)?;
                (g.add(rec, weighted)?, l_c)
            }
            None => (rec, 0.0),
        };
        let loss = g.scale(total, scale)?;
        Ok(Built {
            g,
            loss,
            beta,
            leaves,
            heads,
            l_rec,
            l_c,
            executed,
            clamped,
        })
    }

    fn accumulate(&self, built: &Built, grads: &Gradients, acc: &mut [Vec<f32>]) {
        for &(i, v) in &built.leaves {
            if let Some(gv) = grads.get(v) {
                for (a, b) in acc[i].iter_mut().zip(gv) {
                    *a += b;
                }
            }
        }
        for &(k, h, w) in &built.heads {
            let Some(dw) = grads.get(w) else { continue };
            if dw.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (wn, bn) = head_names(k);
            let wi = self.trainable.iter().position(|(n, _)| *n == wn);
            let bi = self.trainable.iter().position(|(n, _)| *n == bn);
            if let Some(wi) = wi {
                let p = dw.len();
                for (r, &hv) in built.g.value(h).data().iter().enumerate() {
                    axpy(hv, dw, &mut acc[wi][r * p..(r + 1) * p]);
                }
            }
            if let Some(bi) = bi {
                for (a, b) in acc[bi].iter_mut().zip(dw) {
                    *a += b;
                }
            }
        }
    }

    fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.adam.m.iter().map(|m| vec![0.0; m.len()]).collect()
    }

    /// Mean-over-batch gradients of every trainable leaf, without updating.
    pub fn gradients(&self, batch: &[Example]) -> Result<(GradSet, LossReport)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let scale = 1.0 / batch.len() as f32;
        let mut acc = self.zero_grads();
        let mut report = LossReport::default();
        for ex in batch {
            let built = self.build(ex, scale, None).map_err(|e| self.abort(ex, e))?;
            let grads = built.g.backward(built.loss)?;
            self.accumulate(&built, &grads, &mut acc);
            report.l_rec += built.l_rec;
            report.l_c += built.l_c;
            report.mean_executed += built.executed as f64;
            report.lc_clamped |= built.clamped;
        }
        let b = batch.len() as f64;
        report.l_rec /= b;
        report.l_c /= b;
        report.mean_executed /= b;
        report.total = report.l_rec + self.cfg.lambda as f64 * report.l_c;
        if !report.total.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.step,
                detail: format!("non-finite loss {report:?}"),
            });
        }
        Ok((
            GradSet {
                names: self.trainable_names(),
                grads: acc,
            },
            report,
        ))
    }

    fn abort(&self, ex: &Example, e: Error) -> Error {
        match e {
            Error::NumericFault { op } => Error::TrainingAborted {
                step: self.step,
                detail: format!(
                    "{op} produced a non-finite value on example {} (len {})",
                    ex.key,
                    ex.seq.len()
                ),
            },
            other => other,
        }
    }

    /// Total loss of one example with an explicit `β` and its gradient.
    pub fn beta_probe(&self, ex: &Example, probe: &BetaProbe) -> Result<(f64, Tensor)> {
        if !self.model.mode().has_controller() {
            return Err(Error::contract("beta probe needs a mode with a controller"));
        }
        let built = self.build(ex, 1.0, Some(probe))?;
        let total = built.l_rec + self.cfg.lambda as f64 * built.l_c;
        let grads = built.g.backward(built.loss)?;
        Ok((total, grads.wrt(built.beta.expect("controller mode"))))
    }

    /// Total loss of one example at the current parameters.
    pub fn example_loss(&self, ex: &Example) -> Result<f64> {
        let built = self.build(ex, 1.0, None)?;
        Ok(built.l_rec + self.cfg.lambda as f64 * built.l_c)
    }

    /// One clipped Adam step on the batch.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<LossReport> {
        let (mut grads, report) = self.gradients(batch)?;
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.step,
                detail: "non-finite gradient norm".to_string(),
            });
        }
        if norm > self.cfg.clip_norm as f64 {
            let c = (self.cfg.clip_norm as f64 / norm) as f32;
            for gv in grads.grads.iter_mut() {
                for v in gv.iter_mut() {
                    *v *= c;
                }
            }
        }
        self.apply(&grads.grads)?;
        self.step += 1;
        Ok(report)
    }

    fn apply(&mut self, grads: &[Vec<f32>]) -> Result<()> {
        let a = &mut self.adam;
        a.t += 1;
        let bc1 = 1.0 - libm::powf(a.b1, a.t as f32);
        let bc2 = 1.0 - libm::powf(a.b2, a.t as f32);
        let lr = self.cfg.lr;
        for (i, (name, _)) in self.trainable.iter().enumerate() {
            let lr = if is_head_matrix(name) {
                lr * self.cfg.head_lr_scale
            } else {
                lr
            };
            let (m, v, g) = (&mut a.m[i], &mut a.v[i], &grads[i]);
            let old = self.model.params.get(name)?;
            let mut data = old.to_vec();
            for j in 0..data.len() {
                m[j] = a.b1 * m[j] + (1.0 - a.b1) * g[j];
                v[j] = a.b2 * v[j] + (1.0 - a.b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (crate::math::sqrtf(vh) + a.eps);
            }
            let t = Tensor::new(old.shape(), data)?;
            self.model.params.set(name, t)?;
        }
        Ok(())
    }

    /// One pass over `examples` in a seeded shuffled order.
    pub fn run_epoch(&mut self, examples: &[Example]) -> Result<EpochLog> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        RngState::new(self.cfg.seed)
            .fork(0x4550_4f43 ^ self.epoch)
            .shuffle(&mut order);
        let mut sum = LossReport::default();
        let mut steps = 0u64;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let r = self.train_step(&batch)?;
            sum.l_rec += r.l_rec;
            sum.l_c += r.l_c;
            sum.mean_executed += r.mean_executed;
            sum.lc_clamped |= r.lc_clamped;
            steps += 1;
        }
        let s = steps as f64;
        sum.l_rec /= s;
        sum.l_c /= s;
        sum.mean_executed /= s;
        sum.total = sum.l_rec + self.cfg.lambda as f64 * sum.l_c;
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            steps,
            loss: sum,
        })
    }

    /// Runs the configured number of epochs, reporting each.
    pub fn fit(
        &mut self,
        examples: &[Example],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let log = self.run_epoch(examples)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Restores optimizer progress counters from a checkpoint.
    pub fn set_progress(&mut self, step: u64, epoch: u64) {
        self.step = step;
        self.epoch = epoch;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::{Mode, ModelConfig};

    fn tiny_cfg(mode: Mode, n_items: usize) -> ModelConfig {
        let mut bb = BackboneConfig::attention(n_items);
        bb.n_blocks = 2;
        bb.d = 8;
        bb.max_seq_len = 12;
        ModelConfig::new(bb, mode)
    }

    fn examples(n: usize, n_items: usize, seed: u64) -> Vec<Example> {
        let mut r = RngState::new(seed);
        (0..n)
            .map(|k| Example {
                key: k as u64,
                seq: (0..10).map(|_| r.below(n_items)).collect(),
            })
            .collect()
    }

    #[test]
    fn uniform_scores_give_ln_n() {
        let s = Tensor::zeros(&[3, 7]);
        let l = rec_loss(&s, &[0, 3, 6]).unwrap();
        assert!((l - (7f64).ln()).abs() < 1e-6);
        let confident = Tensor::new(&[1, 3], vec![30.0, 0.0, 0.0]).unwrap();
        assert!(rec_loss(&confident, &[0]).unwrap() < 1e-9);
        assert!(rec_loss(&s, &[7, 0, 0]).is_err());
    }

    #[test]
    fn three_item_cross_entropy_oracle() {
        let logits = [0.3f64, -1.2, 2.1];
        let s = Tensor::new(&[1, 3], logits.iter().map(|&v| v as f32).collect()).unwrap();
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((rec_loss(&s, &[1]).unwrap() - (lse + 1.2)).abs() < 1e-6);
    }

    #[test]
    fn compact_loss_closed_forms() {
        let one = StructureLogits::from_rows(&[[-40.0, 40.0]; 3]);
        assert!(compact_loss(&one).0.abs() < 1e-12);
        let half = StructureLogits::from_rows(&[[0.0, 0.0]; 6]);
        assert!((compact_loss(&half).0 - 6.0 * core::f64::consts::LN_2).abs() < 1e-6);
        let b = StructureLogits::from_rows(&[[1.0, -1.0]; 4]);
        // −ln σ(−2) = ln(1 + e²)
        let oracle = 4.0 * (1.0 + 2f64.exp()).ln();
        assert!((compact_loss(&b).0 - oracle).abs() < 1e-5);
        let (_, clamped) = compact_loss(&StructureLogits::from_rows(&[[50.0, -50.0]]));
        assert!(clamped);
    }

    #[test]
    fn compact_loss_gradient_closed_form() {
        let rows = [[0.7f32, -0.2], [-1.0, 0.5], [0.0, 0.0]];
        let logits = StructureLogits::from_rows(&rows);
        let mut g = Graph::new();
        let b = g.param(logits.beta().clone()).unwrap();
        let (l, _) = compact_loss_graph(&mut g, b).unwrap();
        assert!((g.value(l).item() as f64 - compact_loss(&logits).0).abs() < 1e-5);
        let grad = g.backward(l).unwrap().wrt(b);
        let alpha = logits.alpha();
        for r in 0..3 {
            assert!((grad.row(r)[0] - alpha.row(r)[0]).abs() < 1e-6);
            assert!((grad.row(r)[1] - (alpha.row(r)[1] - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn report_identity_and_determinism() {
        let model = Model::init(tiny_cfg(Mode::ForwardOfa, 20), 3).unwrap();
        let cfg = TrainConfig {
            lambda: 0.01,
            batch_size: 4,
            ..TrainConfig::for_family(Family::Attention)
        };
        let ex = examples(8, 20, 1);
        let mut a = Trainer::new(model.clone(), cfg.clone()).unwrap();
        let mut b = Trainer::new(model, cfg).unwrap();
        for chunk in ex.chunks(4) {
            let ra = a.train_step(chunk).unwrap();
            let rb = b.train_step(chunk).unwrap();
            assert_eq!(ra, rb);
            assert!((ra.total - (ra.l_rec + 0.01 * ra.l_c)).abs() < 1e-6);
            assert!(ra.l_c >= 0.0);
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_lambda_drops_compact_gradient() {
        let model = Model::init(tiny_cfg(Mode::ForwardOfa, 20), 4).unwrap();
        let ex = &examples(1, 20, 2)[0];
        let cfg0 = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::for_family(Family::Attention)
        };
        let t = Trainer::new(model, cfg0).unwrap();
        let probe = BetaProbe {
            beta: Tensor::new(&[2, 2], vec![0.4, -0.1, -0.3, 0.2]).unwrap(),
            noise: Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.0]).unwrap(),
            frozen: None,
        };
        let (_, with_zero) = t.beta_probe(ex, &probe).unwrap();
        let mut t1 = t.clone();
        t1.cfg.lambda = 1.0;
        let (_, with_one) = t1.beta_probe(ex, &probe).unwrap();
        // the compact term contributes exactly (α0, α1 − 1) per row at λ = 1
        let alpha = StructureLogits::new(probe.beta.clone()).unwrap().alpha();
        for r in 0..2 {
            let diff0 = with_one.row(r)[0] - with_zero.row(r)[0];
            let diff1 = with_one.row(r)[1] - with_zero.row(r)[1];
            assert!((diff0 - alpha.row(r)[0]).abs() < 1e-5);
            assert!((diff1 - (alpha.row(r)[1] - 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn device_rec_reports_zero_compact_loss() {
        let model = Model::init(tiny_cfg(Mode::DeviceRec, 20), 5).unwrap();
        let mut t = Trainer::new(model, TrainConfig::for_family(Family::Attention)).unwrap();
        let r = t.train_step(&examples(4, 20, 3)).unwrap();
        assert_eq!(r.l_c, 0.0);
        assert_eq!(r.mean_executed, 2.0);
        assert_eq!(r.total, r.l_rec);
    }

    #[test]
    fn head_matrices_step_at_the_scaled_rate() {
        // Adam's first step moves every element with a nonzero gradient by ~lr.
        let model = Model::init(tiny_cfg(Mode::ForwardOfa, 16), 5).unwrap();
        let before = model.params.get("map.head0.w").unwrap().clone();
        let gru = model.params.get("map.gru.w_ih").unwrap().clone();
        let cfg = TrainConfig {
            lr: 1e-3,
            head_lr_scale: 4.0,
            ..TrainConfig::for_family(Family::Attention)
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        t.train_step(&examples(8, 16, 2)).unwrap();
        let max_move = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max)
        };
        let head = max_move(&before, t.model.params.get("map.head0.w").unwrap());
        let other = max_move(&gru, t.model.params.get("map.gru.w_ih").unwrap());
        assert!((head - 4e-3).abs() < 1e-4, "{head}");
        assert!((other - 1e-3).abs() < 1e-4, "{other}");
    }

    #[test]
    fn overfits_a_toy_set() {
        for seed in 1..=3 {
            let model = Model::init(tiny_cfg(Mode::ForwardOfa, 16), seed).unwrap();
            let cfg = TrainConfig {
                lambda: 0.0,
                lr: 1e-2,
                batch_size: 16,
                seed,
                ..TrainConfig::for_family(Family::Attention)
            };
            let ex = examples(16, 16, 10 + seed);
            let mut t = Trainer::new(model, cfg).unwrap();
            let first = t.train_step(&ex).unwrap().l_rec;
            let mut last = first;
            for _ in 1..200 {
                last = t.train_step(&ex).unwrap().l_rec;
            }
            assert!(last < 0.1 * first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn training_progress_is_deterministic_across_epochs() {
        let model = Model::init(tiny_cfg(Mode::ControllerOnly, 20), 6).unwrap();
        let cfg = TrainConfig {
            batch_size: 3,
            epochs: 2,
            ..TrainConfig::for_family(Family::Attention)
        };
        let ex = examples(7, 20, 4);
        let run = || {
            let mut t = Trainer::new(model.clone(), cfg.clone()).unwrap();
            t.fit(&ex, |_| {}).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = TrainConfig::for_family(Family::Attention);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }
}
