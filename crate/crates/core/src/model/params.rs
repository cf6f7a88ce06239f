//! Learnable weights: creation, canonical naming, and tape binding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{AblationMode, NodeType, RelationKind};
use crate::numerics::{Rng, TensorId};
use crate::{Error, Result, Tape, Tensor};

/// Architecture hyperparameters the weight shapes depend on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub lambda: usize,
    pub theta: usize,
    pub ablation: AblationMode,
    /// One self transform shared by all node types instead of one per type.
    pub shared_self_transform: bool,
}

impl ModelConfig {
    pub fn new(dim: usize, lambda: usize, theta: usize, ablation: AblationMode) -> Self {
        ModelConfig {
            dim,
            lambda,
            theta,
            ablation,
            shared_self_transform: false,
        }
    }

    /// Node types with states in this configuration, in stacking order.
    pub fn node_types(&self) -> Vec<NodeType> {
        if self.ablation.has_pair_nodes() {
            vec![NodeType::Emotion, NodeType::Cause, NodeType::Pair, NodeType::Doc]
        } else {
            vec![NodeType::Emotion, NodeType::Cause, NodeType::Doc]
        }
    }
}

/// All model weights, kept as named tensors in a fixed canonical order; the
/// order drives optimizer registration and the model-file layout, so it must
/// never depend on anything but the configuration.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

pub fn self_w_name(layer: usize, ty: Option<NodeType>) -> String {
    match ty {
        Some(t) => format!("layer{layer}.self_w.{}", t.code()),
        None => format!("layer{layer}.self_w"),
    }
}

pub fn self_b_name(layer: usize, ty: Option<NodeType>) -> String {
    match ty {
        Some(t) => format!("layer{layer}.self_b.{}", t.code()),
        None => format!("layer{layer}.self_b"),
    }
}

pub fn rel_w_name(layer: usize, kind: RelationKind) -> String {
    format!("layer{layer}.rel_w.{kind}")
}

pub fn rel_b_name(layer: usize, kind: RelationKind) -> String {
    format!("layer{layer}.rel_b.{kind}")
}

impl ModelParams {
    /// Fresh weights: matrices from the symmetric uniform distribution with
    /// bound sqrt(6 / (fan_in + fan_out)), biases zero, embedding tables
    /// zero-mean with scale 0.02. Only tensors the configuration actually
    /// uses are created.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Self {
        let d = config.dim;
        let mut params = ModelParams {
            config: config.clone(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        };

        if config.ablation.uses_pair_generator() {
            params.insert("pg.w", glorot(d, 2 * d, rng));
            params.insert("pg.b", Tensor::zeros(vec![d]));
        }
        if config.ablation.has_pair_nodes() || config.ablation.uses_pair_generator() {
            let rows = 2 * config.lambda + 1;
            let data: Vec<f64> = (0..rows * d).map(|_| rng.normal(0.0, 0.02)).collect();
            params.insert("pg.rel_pos", Tensor::from_vec(vec![rows, d], data).unwrap());
        }

        for layer in 0..config.theta {
            if config.shared_self_transform {
                params.insert(&self_w_name(layer, None), glorot(d, d, rng));
                params.insert(&self_b_name(layer, None), Tensor::zeros(vec![d]));
            } else {
                for ty in config.node_types() {
                    params.insert(&self_w_name(layer, Some(ty)), glorot(d, d, rng));
                    params.insert(&self_b_name(layer, Some(ty)), Tensor::zeros(vec![d]));
                }
            }
            for kind in config.ablation.relation_kinds() {
                params.insert(&rel_w_name(layer, kind), glorot(d, d, rng));
                params.insert(&rel_b_name(layer, kind), Tensor::zeros(vec![d]));
            }
        }

        params.insert("head.pair_w1", glorot(d, 3 * d, rng));
        params.insert("head.pair_b1", Tensor::zeros(vec![d]));
        params.insert("head.pair_w2", glorot(1, d, rng));
        params.insert("head.pair_b2", Tensor::zeros(vec![1]));
        params.insert("head.emo_w", glorot(1, d, rng));
        params.insert("head.emo_b", Tensor::zeros(vec![1]));
        params.insert("head.cause_w", glorot(1, d, rng));
        params.insert("head.cause_b", Tensor::zeros(vec![1]));
        params
    }

    /// Rebuild from deserialized tensors; shapes are checked against a fresh
    /// initialization of the same configuration.
    pub fn from_tensors(
        config: ModelConfig,
        mut loaded: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut rng = Rng::new(0);
        let template = ModelParams::init(config.clone(), &mut rng);
        let mut params = ModelParams {
            config,
            tensors: Vec::new(),
            index: BTreeMap::new(),
        };
        for (name, t) in &template.tensors {
            let loaded_t = loaded.remove(name).ok_or_else(|| {
                Error::Format {
                    path: "model".into(),
                    message: format!("missing tensor `{name}`"),
                }
            })?;
            if loaded_t.shape() != t.shape() {
                return Err(Error::Format {
                    path: "model".into(),
                    message: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        loaded_t.shape(),
                        t.shape()
                    ),
                });
            }
            params.insert(name, loaded_t);
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(Error::Format {
                path: "model".into(),
                message: format!("unexpected tensor `{name}`"),
            });
        }
        Ok(params)
    }

    fn insert(&mut self, name: &str, t: Tensor) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_entries(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn glorot(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data: Vec<f64> = (0..out_dim * in_dim)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::from_vec(vec![out_dim, in_dim], data).unwrap()
}

/// Model weights registered on a tape for one forward/backward pass, keyed
/// by canonical name.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    /// Register every tensor (in canonical order) as a tape parameter.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.tensors() {
            ids.insert(name.to_string(), tape.param(t.clone()));
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(ablation: AblationMode) -> ModelConfig {
        ModelConfig::new(4, 3, 1, ablation)
    }

    #[test]
    fn full_config_creates_expected_shapes() {
        let mut rng = Rng::new(1);
        let p = ModelParams::init(cfg(AblationMode::None), &mut rng);
        assert_eq!(p.get("pg.w").unwrap().shape(), &[4, 8]);
        assert_eq!(p.get("pg.rel_pos").unwrap().shape(), &[7, 4]);
        assert_eq!(p.get("layer0.self_w.P").unwrap().shape(), &[4, 4]);
        assert_eq!(p.get("layer0.rel_w.EmoPair").unwrap().shape(), &[4, 4]);
        assert_eq!(p.get("head.pair_w1").unwrap().shape(), &[4, 12]);
        assert_eq!(p.get("head.emo_w").unwrap().shape(), &[1, 4]);
        // 3 pg + 4*2 self + 5*2 rel + 8 head
        assert_eq!(p.len(), 3 + 8 + 10 + 8);
    }

    #[test]
    fn ablations_omit_unused_tensors() {
        let mut rng = Rng::new(1);
        let no_pg = ModelParams::init(cfg(AblationMode::NoPG), &mut rng);
        assert!(no_pg.get("pg.w").is_none());
        assert!(no_pg.get("pg.rel_pos").is_some());

        let no_pair = ModelParams::init(cfg(AblationMode::NoPairNode), &mut rng);
        assert!(no_pair.get("layer0.rel_w.EmoPair").is_none());
        assert!(no_pair.get("layer0.self_w.P").is_none());
        assert!(no_pair.get("pg.w").is_some());

        let bare = ModelParams::init(cfg(AblationMode::NoPairNodeNoPG), &mut rng);
        assert!(bare.get("pg.w").is_none());
        assert!(bare.get("pg.rel_pos").is_none());
        assert!(bare.get("head.pair_w1").is_some());
    }

    #[test]
    fn shared_self_transform_collapses_the_four() {
        let mut rng = Rng::new(1);
        let mut c = cfg(AblationMode::None);
        c.shared_self_transform = true;
        let p = ModelParams::init(c, &mut rng);
        assert!(p.get("layer0.self_w").is_some());
        assert!(p.get("layer0.self_w.E").is_none());
    }

    #[test]
    fn init_is_deterministic_and_ordered() {
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        let a = ModelParams::init(cfg(AblationMode::None), &mut r1);
        let b = ModelParams::init(cfg(AblationMode::None), &mut r2);
        let names_a: Vec<&str> = a.tensors().map(|(n, _)| n).collect();
        let names_b: Vec<&str> = b.tensors().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
        for ((_, ta), (_, tb)) in a.tensors().zip(b.tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn biases_start_at_zero() {
        let mut rng = Rng::new(2);
        let p = ModelParams::init(cfg(AblationMode::None), &mut rng);
        for name in ["pg.b", "layer0.self_b.E", "layer0.rel_b.DocOther", "head.pair_b1"] {
            assert!(p.get(name).unwrap().data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn from_tensors_checks_shapes_and_names() {
        let mut rng = Rng::new(3);
        let p = ModelParams::init(cfg(AblationMode::None), &mut rng);
        let map: BTreeMap<String, Tensor> = p
            .tensors()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let back = ModelParams::from_tensors(p.config.clone(), map.clone()).unwrap();
        assert_eq!(back.len(), p.len());

        let mut missing = map.clone();
        missing.remove("pg.w");
        assert!(ModelParams::from_tensors(p.config.clone(), missing).is_err());

        let mut wrong = map;
        wrong.insert("pg.w".into(), Tensor::zeros(vec![2, 2]));
        assert!(ModelParams::from_tensors(p.config.clone(), wrong).is_err());
    }
}
