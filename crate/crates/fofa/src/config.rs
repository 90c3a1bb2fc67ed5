//! Run configuration: one TOML file plus command-line overrides. The
//! resolved config is embedded in every artifact a command writes.

use std::path::{Path, PathBuf};

use fofa_core::backbone::{BackboneConfig, Family};
use fofa_core::data::{PreprocessConfig, SyntheticSpec};
use fofa_core::eval::{EvalOptions, Ranking};
use fofa_core::mapper::BetaInjection;
use fofa_core::model::{Mode, ModelConfig};
use fofa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::SessionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// A ratings log; thresholds default to 20/20.
    File {
        path: PathBuf,
        #[serde(default)]
        preprocess: PreprocessConfig,
    },
}

/// Backbone shape; unset sizes take the family defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub family: Family,
    pub mode: Mode,
    pub n_blocks: Option<usize>,
    pub d: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub d_m: Option<usize>,
    pub injection: BetaInjection,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            family: Family::Attention,
            mode: Mode::ForwardOfa,
            n_blocks: None,
            d: None,
            max_seq_len: None,
            d_m: None,
            injection: BetaInjection::InitialState,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSettings {
    pub devices: usize,
    /// Items each device holds before its stream starts.
    pub context_len: usize,
    /// Ridge term of the candidate readout.
    pub ridge: f64,
}

impl Default for FleetSettings {
    fn default() -> Self {
        Self {
            devices: 100,
            context_len: 25,
            ridge: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambdas: Vec<f32>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 1e-3, 1e-2, 1e-1],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawRunConfig")]
pub struct RunConfig {
    /// Root seed: model init, training noise, evaluation sampling.
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub session: SessionConfig,
    pub fleet: FleetSettings,
    pub sweep: SweepSettings,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            model: ModelSettings::default(),
            train: desk_train_config(Family::Attention),
            eval: EvalOptions::default(),
            session: SessionConfig::default(),
            fleet: FleetSettings::default(),
            sweep: SweepSettings::default(),
            out: PathBuf::from("runs/latest"),
        }
    }
}

/// Family defaults with the small-batch schedule, `λ` and head rate used
/// at desk scale.
pub fn desk_train_config(family: Family) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lambda: 1e-3,
        head_lr_scale: 3.0,
        ..TrainConfig::for_family(family)
    }
}

/// Training fields a file sets; the rest are the family's desk defaults.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainPatch {
    lambda: Option<f32>,
    tau: Option<f32>,
    lr: Option<f32>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    clip_norm: Option<f32>,
    head_lr_scale: Option<f32>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawRunConfig {
    seed: u64,
    data: DataSource,
    model: ModelSettings,
    train: TrainPatch,
    eval: EvalOptions,
    session: SessionConfig,
    fleet: FleetSettings,
    sweep: SweepSettings,
    out: PathBuf,
}

impl Default for RawRunConfig {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            seed: d.seed,
            data: d.data,
            model: d.model,
            train: TrainPatch::default(),
            eval: d.eval,
            session: d.session,
            fleet: d.fleet,
            sweep: d.sweep,
            out: d.out,
        }
    }
}

impl From<RawRunConfig> for RunConfig {
    fn from(r: RawRunConfig) -> Self {
        let p = r.train;
        let d = desk_train_config(r.model.family);
        let train = TrainConfig {
            lambda: p.lambda.unwrap_or(d.lambda),
            tau: p.tau.unwrap_or(d.tau),
            lr: p.lr.unwrap_or(d.lr),
            batch_size: p.batch_size.unwrap_or(d.batch_size),
            epochs: p.epochs.unwrap_or(d.epochs),
            seed: p.seed.unwrap_or(d.seed),
            clip_norm: p.clip_norm.unwrap_or(d.clip_norm),
            head_lr_scale: p.head_lr_scale.unwrap_or(d.head_lr_scale),
        };
        Self {
            seed: r.seed,
            data: r.data,
            model: r.model,
            train,
            eval: r.eval,
            session: r.session,
            fleet: r.fleet,
            sweep: r.sweep,
            out: r.out,
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub lambda: Option<f32>,
    pub tau: Option<f32>,
    pub dataset: Option<PathBuf>,
    pub synthetic: bool,
    pub out: Option<PathBuf>,
    pub ranking: Option<Ranking>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.model.mode = m;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(t) = o.tau {
            self.train.tau = t;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(p) = &o.dataset {
            self.data = DataSource::File {
                path: p.clone(),
                preprocess: PreprocessConfig::default(),
            };
        }
        if o.synthetic && !matches!(self.data, DataSource::Synthetic(_)) {
            self.data = DataSource::Synthetic(SyntheticSpec::default());
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(r) = o.ranking {
            self.eval.ranking = r;
        }
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
    }

    /// Field-level validation; `n_items` comes from the loaded dataset.
    pub fn model_config(&self, n_items: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let mut bb = match m.family {
            Family::Attention => BackboneConfig::attention(n_items),
            Family::CausalConv => BackboneConfig::causal_conv(n_items),
        };
        if let Some(n) = m.n_blocks {
            if n != bb.n_blocks {
                bb.dilations = (0..n)
                    .map(|i| bb.dilations[i % bb.dilations.len()])
                    .collect();
            }
            bb.n_blocks = n;
        }
        if let Some(d) = m.d {
            bb.d = d;
        }
        if let Some(t) = m.max_seq_len {
            bb.max_seq_len = t;
        }
        let mut cfg = ModelConfig::new(bb, m.mode);
        if let Some(dm) = m.d_m {
            cfg.d_m = dm;
        }
        cfg.injection = m.injection;
        cfg.validate().map_err(|e| in_field("model", e.into()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| in_field("train", e.into()))?;
        self.session
            .policy
            .validate()
            .map_err(|e| in_field("session.policy", e))?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be ≥ 1".into()));
        }
        if let Ranking::Sampled { negatives: 0 } = self.eval.ranking {
            return Err(Error::Config(
                "eval.ranking: sampled ranking needs ≥ 1 negative".into(),
            ));
        }
        if self.session.k == 0 || self.session.candidates == 0 {
            return Err(Error::Config(
                "session: k and candidates must be ≥ 1".into(),
            ));
        }
        if self.fleet.devices == 0 || self.fleet.context_len == 0 {
            return Err(Error::Config(
                "fleet: devices and context_len must be ≥ 1".into(),
            ));
        }
        if !(self.fleet.ridge > 0.0) {
            return Err(Error::Config("fleet.ridge must be positive".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| in_field("data", e.into()))?;
        }
        Ok(())
    }
}

/// Prefixes a validation error with the config field it came from.
fn in_field(field: &str, e: Error) -> Error {
    let msg = match e {
        Error::Config(m) | Error::Core(fofa_core::Error::Config(m)) => m,
        other => other.to_string(),
    };
    Error::Config(format!("{field}: {msg}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults_and_flags_win() {
        let mut cfg = RunConfig::from_toml(
            r#"
            seed = 4
            [train]
            lambda = 0.02
            tau = 3.0
            [model]
            n_blocks = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.n_blocks, Some(2));
        assert_eq!(cfg.fleet, FleetSettings::default());
        cfg.apply(&Overrides {
            lambda: Some(0.5),
            ..Default::default()
        });
        assert_eq!(
            (cfg.train.lambda, cfg.train.tau, cfg.train.seed),
            (0.5, 3.0, 4)
        );
        assert_eq!(
            cfg.train.batch_size,
            desk_train_config(Family::Attention).batch_size
        );
        let mc = cfg.model_config(100).unwrap();
        assert_eq!((mc.backbone.n_blocks, mc.backbone.dilations.len()), (2, 2));
    }

    #[test]
    fn train_defaults_follow_the_family() {
        let cfg = RunConfig::from_toml(
            "[model]\nfamily = \"causal-conv\"\n[data]\nsource = \"synthetic\"\nusers = 50",
        )
        .unwrap();
        assert_eq!(cfg.train, desk_train_config(Family::CausalConv));
        assert!(
            matches!(cfg.data, DataSource::Synthetic(ref s) if s.users == 50 && s.clusters == 4)
        );
    }

    #[test]
    fn serialized_config_reloads() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = RunConfig::default();
        cfg.train.tau = 0.0;
        assert_eq!(
            cfg.validate().unwrap_err().to_string(),
            "invalid configuration: train: tau must be > 0, got 0"
        );
        assert!(RunConfig::from_toml("[fleet]\ndevicez = 3").is_err());
    }
}
