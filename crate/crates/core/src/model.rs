//! Named parameter store and the full model for each training mode.
//!
//! Tensor names:
//!
//! | prefix | contents |
//! |---|---|
//! | `item_emb`, `pos_emb`, `final_ln.{g,b}` | shared head |
//! | `block{l}.<tensor>` | shared block weights (modes without the mapper) |
//! | `ctrl.gru.*`, `ctrl.head.{w,b}` | structure controller |
//! | `map.gru.*`, `map.seed.{w,b}`, `map.head{k}.{w,b}` | structural mapper |

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::backbone::{block_layout, init_block, BackboneConfig, SharedHead};
use crate::controller::ControllerWeights;
use crate::error::{Error, Result};
use crate::mapper::{BetaInjection, MapperWeights, DEFAULT_HEAD_SCALE};
use crate::nn::GRU_TENSORS;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Mode {
    /// One shared backbone, every block executed.
    DeviceRec,
    /// Shared backbone gated by the controller.
    ControllerOnly,
    /// Mapper-generated blocks, every block executed, no structure input.
    MapperOnly,
    ForwardOfa,
    /// Controller plus mapper with the structure projection zeroed and frozen.
    NoStructuralVector,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::DeviceRec,
        Mode::ControllerOnly,
        Mode::MapperOnly,
        Mode::ForwardOfa,
        Mode::NoStructuralVector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::DeviceRec => "device-rec",
            Mode::ControllerOnly => "controller-only",
            Mode::MapperOnly => "mapper-only",
            Mode::ForwardOfa => "forward-ofa",
            Mode::NoStructuralVector => "no-structural-vector",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}`")))
    }

    pub fn has_controller(self) -> bool {
        matches!(
            self,
            Mode::ControllerOnly | Mode::ForwardOfa | Mode::NoStructuralVector
        )
    }

    pub fn has_mapper(self) -> bool {
        matches!(
            self,
            Mode::MapperOnly | Mode::ForwardOfa | Mode::NoStructuralVector
        )
    }
}

impl core::fmt::Display for Mode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mode: Mode,
    /// Controller hidden width.
    pub d_c: usize,
    /// Mapper hidden width.
    pub d_m: usize,
    pub injection: BetaInjection,
    pub head_scale: f32,
}

impl ModelConfig {
    /// `d_c = d`, `d_m = 2d`.
    pub fn new(backbone: BackboneConfig, mode: Mode) -> Self {
        let d = backbone.d;
        Self {
            backbone,
            mode,
            d_c: d,
            d_m: 2 * d,
            injection: BetaInjection::InitialState,
            head_scale: DEFAULT_HEAD_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.d_c == 0 || self.d_m == 0 {
            return Err(Error::config("d_c and d_m must be positive"));
        }
        if !(self.head_scale >= 0.0 && self.head_scale.is_finite()) {
            return Err(Error::config(
                "head_scale must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Replaces a tensor's data; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if self.entries[i].1.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                lhs: self.entries[i].1.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.entries[i].1 = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

pub fn gru_names(prefix: &str) -> Vec<String> {
    GRU_TENSORS
        .iter()
        .map(|t| format!("{prefix}.gru.{t}"))
        .collect()
}

pub fn head_names(k: usize) -> (String, String) {
    (format!("map.head{k}.w"), format!("map.head{k}.b"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(seed);
        let bb = &cfg.backbone;
        let mut params = ParamStore::new();

        let head = SharedHead::init(bb, &mut root.fork(1));
        params.insert("item_emb", head.item_emb);
        params.insert("pos_emb", head.pos_emb);
        params.insert("final_ln.g", head.ln_g);
        params.insert("final_ln.b", head.ln_b);

        if !cfg.mode.has_mapper() {
            let mut r = root.fork(2);
            for l in 0..bb.n_blocks {
                for (spec, t) in block_layout(bb).iter().zip(init_block(bb, &mut r)) {
                    params.insert(format!("block{l}.{}", spec.name), t);
                }
            }
        }
        if cfg.mode.has_controller() {
            let c = ControllerWeights::init(&mut root.fork(3), bb.d, cfg.d_c, bb.n_blocks);
            for (n, t) in gru_names("ctrl").into_iter().zip(c.gru) {
                params.insert(n, t);
            }
            params.insert("ctrl.head.w", c.head_w);
            params.insert("ctrl.head.b", c.head_b);
        }
        if cfg.mode.has_mapper() {
            let mut m = MapperWeights::init(
                &mut root.fork(4),
                bb,
                cfg.d_m,
                cfg.injection,
                cfg.head_scale,
            );
            if cfg.mode == Mode::NoStructuralVector {
                m.seed_w = Tensor::zeros(m.seed_w.shape());
            }
            for (n, t) in gru_names("map").into_iter().zip(m.gru) {
                params.insert(n, t);
            }
            params.insert("map.seed.w", m.seed_w);
            params.insert("map.seed.b", m.seed_b);
            for (k, (w, b)) in m.heads_w.into_iter().zip(m.heads_b).enumerate() {
                let (wn, bn) = head_names(k);
                params.insert(wn, w);
                params.insert(bn, b);
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.cfg.backbone
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    /// Leaves the optimizer updates in this model's mode.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !(self.cfg.mode == Mode::NoStructuralVector && n.starts_with("map.seed.")))
            .map(|n| n.to_string())
            .collect()
    }

    pub fn shared_head(&self) -> Result<SharedHead> {
        Ok(SharedHead {
            item_emb: self.params.get("item_emb")?.clone(),
            pos_emb: self.params.get("pos_emb")?.clone(),
            ln_g: self.params.get("final_ln.g")?.clone(),
            ln_b: self.params.get("final_ln.b")?.clone(),
        })
    }

    pub fn shared_blocks(&self) -> Result<Option<Vec<Vec<Tensor>>>> {
        if self.cfg.mode.has_mapper() {
            return Ok(None);
        }
        let bb = &self.cfg.backbone;
        let blocks = (0..bb.n_blocks)
            .map(|l| {
                block_layout(bb)
                    .iter()
                    .map(|s| self.params.get(&format!("block{l}.{}", s.name)).cloned())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(blocks))
    }

    pub fn controller(&self) -> Result<Option<ControllerWeights>> {
        if !self.cfg.mode.has_controller() {
            return Ok(None);
        }
        Ok(Some(ControllerWeights {
            gru: gru_names("ctrl")
                .iter()
                .map(|n| self.params.get(n).cloned())
                .collect::<Result<_>>()?,
            head_w: self.params.get("ctrl.head.w")?.clone(),
            head_b: self.params.get("ctrl.head.b")?.clone(),
        }))
    }

    pub fn mapper(&self) -> Result<Option<MapperWeights>> {
        if !self.cfg.mode.has_mapper() {
            return Ok(None);
        }
        let l = self.cfg.backbone.n_blocks;
        let mut heads_w = Vec::with_capacity(l);
        let mut heads_b = Vec::with_capacity(l);
        for k in 0..l {
            let (wn, bn) = head_names(k);
            heads_w.push(self.params.get(&wn)?.clone());
            heads_b.push(self.params.get(&bn)?.clone());
        }
        Ok(Some(MapperWeights {
            injection: self.cfg.injection,
            gru: gru_names("map")
                .iter()
                .map(|n| self.params.get(n).cloned())
                .collect::<Result<_>>()?,
            seed_w: self.params.get("map.seed.w")?.clone(),
            seed_b: self.params.get("map.seed.b")?.clone(),
            heads_w,
            heads_b,
        }))
    }

    /// Item-embedding rows of `ids`, the extractors' input.
    pub fn embed_items(&self, ids: &[usize]) -> Result<Tensor> {
        let table = self.params.get("item_emb")?;
        let d = self.cfg.backbone.d;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.cfg.backbone.n_items {
                return Err(Error::IdOutOfRange {
                    id,
                    n_items: self.cfg.backbone.n_items,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        Tensor::new(&[ids.len(), d], data)
    }

    /// Parameters that live on the device besides the backbone: the
    /// controller and the mapper's extractor with its seed projection.
    pub fn device_extra_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| {
                n.starts_with("ctrl.") || n.starts_with("map.gru.") || n.starts_with("map.seed.")
            })
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Mapper heads, held by the cloud.
    pub fn cloud_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("map.head"))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Mode) -> Model {
        let mut bb = BackboneConfig::attention(40);
        bb.n_blocks = 2;
        bb.d = 8;
        bb.max_seq_len = 10;
        Model::init(ModelConfig::new(bb, mode), 7).unwrap()
    }

    #[test]
    fn mapper_modes_have_no_block_leaves() {
        for mode in [Mode::MapperOnly, Mode::ForwardOfa, Mode::NoStructuralVector] {
            let m = small(mode);
            assert!(
                m.trainable_names().iter().all(|n| !n.starts_with("block")),
                "{mode}"
            );
            assert!(m.shared_blocks().unwrap().is_none());
        }
        let m = small(Mode::ControllerOnly);
        assert!(m.trainable_names().iter().any(|n| n.starts_with("block")));
    }

    #[test]
    fn forward_ofa_leaf_enumeration() {
        let m = small(Mode::ForwardOfa);
        let names = m.trainable_names();
        let allowed = [
            "item_emb",
            "pos_emb",
            "final_ln.",
            "ctrl.",
            "map.gru.",
            "map.seed.",
            "map.head",
        ];
        assert!(names
            .iter()
            .all(|n| allowed.iter().any(|p| n.starts_with(p))));
        assert!(names.contains(&"map.head1.w".into()));
    }

    #[test]
    fn no_structural_vector_freezes_zero_seed() {
        let m = small(Mode::NoStructuralVector);
        assert!(m
            .params
            .get("map.seed.w")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(!m
            .trainable_names()
            .iter()
            .any(|n| n.starts_with("map.seed")));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(Mode::ForwardOfa), small(Mode::ForwardOfa));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()).unwrap(), m);
        }
        assert!(Mode::parse("bogus").is_err());
    }
}
