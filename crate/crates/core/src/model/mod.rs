//! The PBJE network: pair generator, heterogeneous relational graph
//! convolutions, classification heads and the joint loss.
//!
//! One forward pass works on a single document. Clause representations come
//! in as an [N x d] matrix; emotion-node, cause-node, pair-node and
//! document-node states are stacked into one [T x d] block (in that order)
//! and every layer transforms the whole block at once: a per-node-type self
//! transform plus, per relation, a mean over neighbors followed by the
//! relation's linear map. Relations with no neighbors at a node contribute
//! neither message nor bias there.

mod params;

pub use params::{
    rel_b_name, rel_w_name, self_b_name, self_w_name, BoundParams, ModelConfig, ModelParams,
};

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::corpus::ClauseLabels;
use crate::graph::{HeteroGraph, NodeType, PairCandidate, RelationKind};
use crate::numerics::{sigmoid, Rng, TensorId};
use crate::{Error, Result, Tape, Tensor};

/// Train records dropout; Eval is dropout-free and bit-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout rate and placements. The rate applies wherever a placement flag
/// is on; placement is configurable because the reference setup fixes only
/// the rate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub on_encoder_output: bool,
    pub between_layers: bool,
    pub on_pair_reps: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            rate: 0.2,
            on_encoder_output: true,
            between_layers: true,
            on_pair_reps: false,
        }
    }
}

/// A graph plus the per-relation neighbor groupings the layers consume,
/// built once per distinct graph and shared across passes.
#[derive(Debug, Clone)]
pub struct GraphLayout {
    pub graph: HeteroGraph,
    groups: Vec<(RelationKind, Arc<Vec<Vec<usize>>>, Arc<Vec<bool>>)>,
}

impl GraphLayout {
    pub fn new(graph: HeteroGraph) -> Self {
        let mut groups = Vec::new();
        for kind in graph.ablation.relation_kinds() {
            let g = graph.neighbor_groups(kind);
            let mask: Vec<bool> = g.iter().map(|n| !n.is_empty()).collect();
            groups.push((kind, Arc::new(g), Arc::new(mask)));
        }
        GraphLayout { graph, groups }
    }

    fn relation_groups(
        &self,
    ) -> impl Iterator<Item = (RelationKind, &Arc<Vec<Vec<usize>>>, &Arc<Vec<bool>>)> {
        self.groups.iter().map(|(k, g, m)| (*k, g, m))
    }
}

/// Tape handles produced by [`forward`]; logits are column vectors.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub e_states: TensorId,
    pub c_states: TensorId,
    /// Final pair representations fed to the head: last-layer pair-node
    /// states normally, the pair-generator output under NoPairNode, zeros
    /// under NoPairNodeNoPG.
    pub pair_states: TensorId,
    pub pair_logits: TensorId,
    pub emo_logits: TensorId,
    pub cause_logits: TensorId,
}

/// Initial pair representations (Pair Generator): row for (i, j) is
/// `W_p [h_i ; h_j] + b_p + rel_pos[i - j + lambda]`. Under NoPG the row is
/// the relative-position embedding alone, carrying no clause information.
pub fn pair_generator(
    tape: &mut Tape,
    h: TensorId,
    pairs: &[PairCandidate],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<TensorId> {
    let lambda = config.lambda as i64;
    let mut offset_rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let off = p.offset();
        if off.abs() > lambda {
            return Err(Error::Contract(format!(
                "pair ({}, {}) offset {off} outside the +/-{lambda} table",
                p.emo_idx, p.cause_idx
            )));
        }
        offset_rows.push((off + lambda) as usize);
    }
    let rel_pos = bound.id("pg.rel_pos")?;
    let rel_rows = tape.gather_rows(rel_pos, offset_rows)?;
    if !config.ablation.uses_pair_generator() {
        return Ok(rel_rows);
    }
    let emo_rows: Vec<usize> = pairs.iter().map(|p| p.emo_idx - 1).collect();
    let cause_rows: Vec<usize> = pairs.iter().map(|p| p.cause_idx - 1).collect();
    let h_e = tape.gather_rows(h, emo_rows)?;
    let h_c = tape.gather_rows(h, cause_rows)?;
    let joined = tape.concat_cols(&[h_e, h_c])?;
    let projected = tape.linear(joined, bound.id("pg.w")?, Some(bound.id("pg.b")?))?;
    tape.add(projected, rel_rows)
}

/// One relational graph convolution over the stacked states:
/// per-node-type self transform, plus per relation the neighbor mean pushed
/// through the relation's weight (bias only where neighbors exist), then
/// ReLU. Undirected edges deliver messages both ways through the same
/// weight.
pub fn rgcn_layer(
    tape: &mut Tape,
    layout: &GraphLayout,
    states: TensorId,
    layer: usize,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<TensorId> {
    let graph = &layout.graph;
    let mut total = self_transform(tape, graph, states, layer, bound, config)?;
    for (kind, groups, mask) in layout.relation_groups() {
        let agg = tape.group_mean_rows(states, Arc::clone(groups))?;
        let msg = tape.linear_masked(
            agg,
            bound.id(&rel_w_name(layer, kind))?,
            Some(bound.id(&rel_b_name(layer, kind))?),
            Some(Arc::clone(mask)),
        )?;
        total = tape.add(total, msg)?;
    }
    Ok(tape.relu(total))
}

fn self_transform(
    tape: &mut Tape,
    graph: &HeteroGraph,
    states: TensorId,
    layer: usize,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<TensorId> {
    if config.shared_self_transform {
        return tape.linear(
            states,
            bound.id(&self_w_name(layer, None))?,
            Some(bound.id(&self_b_name(layer, None))?),
        );
    }
    let n = graph.n_clauses;
    let p = graph.pair_node_count();
    let mut blocks: Vec<(NodeType, usize, usize)> = vec![
        (NodeType::Emotion, 0, n),
        (NodeType::Cause, n, 2 * n),
    ];
    if graph.has_pair_nodes {
        blocks.push((NodeType::Pair, 2 * n, 2 * n + p));
    }
    blocks.push((NodeType::Doc, 2 * n + p, 2 * n + p + 1));

    let mut parts = Vec::with_capacity(blocks.len());
    for (ty, start, end) in blocks {
        let slice = tape.slice_rows(states, start, end)?;
        parts.push(tape.linear(
            slice,
            bound.id(&self_w_name(layer, Some(ty)))?,
            Some(bound.id(&self_b_name(layer, Some(ty)))?),
        )?);
    }
    tape.concat_rows(&parts)
}

/// Full forward pass on one document's clause representations.
pub fn forward(
    tape: &mut Tape,
    h: TensorId,
    layout: &GraphLayout,
    bound: &BoundParams,
    config: &ModelConfig,
    dropout: &DropoutConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    let graph = &layout.graph;
    if graph.ablation != config.ablation {
        return Err(Error::Contract(format!(
            "graph built for ablation {}, model configured for {}",
            graph.ablation, config.ablation
        )));
    }
    let n = graph.n_clauses;
    let (h_rows, h_cols) = (tape.value(h).rows(), tape.value(h).cols());
    if h_rows != n || h_cols != config.dim {
        return Err(Error::Contract(format!(
            "clause representations are {h_rows}x{h_cols}, graph/model expect {n}x{}",
            config.dim
        )));
    }
    for pair in &graph.pairs {
        if pair.offset().unsigned_abs() as usize > config.lambda {
            return Err(Error::Contract(format!(
                "graph pair ({}, {}) exceeds model window {}",
                pair.emo_idx, pair.cause_idx, config.lambda
            )));
        }
    }

    let training = mode == Mode::Train;
    let h = if dropout.on_encoder_output {
        tape.dropout(h, dropout.rate, rng, training)?
    } else {
        h
    };

    // Initial pair block.
    let p0 = if config.ablation.uses_pair_generator() || config.ablation.has_pair_nodes() {
        let p = pair_generator(tape, h, &graph.pairs, bound, config)?;
        if dropout.on_pair_reps {
            tape.dropout(p, dropout.rate, rng, training)?
        } else {
            p
        }
    } else {
        tape.constant(Tensor::zeros(vec![graph.pairs.len(), config.dim]))
    };

    let h_doc = tape.mean_rows(h)?;
    let mut states = if graph.has_pair_nodes {
        tape.concat_rows(&[h, h, p0, h_doc])?
    } else {
        tape.concat_rows(&[h, h, h_doc])?
    };

    for layer in 0..config.theta {
        if layer > 0 && dropout.between_layers {
            states = tape.dropout(states, dropout.rate, rng, training)?;
        }
        states = rgcn_layer(tape, layout, states, layer, bound, config)?;
    }

    let e_states = tape.slice_rows(states, 0, n)?;
    let c_states = tape.slice_rows(states, n, 2 * n)?;
    let pair_states = if graph.has_pair_nodes {
        tape.slice_rows(states, 2 * n, 2 * n + graph.pairs.len())?
    } else {
        p0
    };

    let emo_rows: Vec<usize> = graph.pairs.iter().map(|p| p.emo_idx - 1).collect();
    let cause_rows: Vec<usize> = graph.pairs.iter().map(|p| p.cause_idx - 1).collect();
    let e_for_pairs = tape.gather_rows(e_states, emo_rows)?;
    let c_for_pairs = tape.gather_rows(c_states, cause_rows)?;
    let head_in = tape.concat_cols(&[pair_states, e_for_pairs, c_for_pairs])?;
    let hidden_lin = tape.linear(
        head_in,
        bound.id("head.pair_w1")?,
        Some(bound.id("head.pair_b1")?),
    )?;
    let hidden = tape.relu(hidden_lin);
    let pair_logits = tape.linear(
        hidden,
        bound.id("head.pair_w2")?,
        Some(bound.id("head.pair_b2")?),
    )?;
    let emo_logits = tape.linear(
        e_states,
        bound.id("head.emo_w")?,
        Some(bound.id("head.emo_b")?),
    )?;
    let cause_logits = tape.linear(
        c_states,
        bound.id("head.cause_w")?,
        Some(bound.id("head.cause_b")?),
    )?;

    Ok(ForwardOutput {
        e_states,
        c_states,
        pair_states,
        pair_logits,
        emo_logits,
        cause_logits,
    })
}

/// Joint objective: `alpha * L_pair + beta * L_emo + gamma * L_cause`, each
/// term a sum (not mean) of per-element binary cross entropies within the
/// document. Only instantiated (windowed) candidates carry pair terms; gold
/// pairs outside the window contribute nothing here.
pub fn joint_loss(
    tape: &mut Tape,
    output: &ForwardOutput,
    pairs: &[PairCandidate],
    labels: &ClauseLabels,
    gold_pairs: &BTreeSet<(usize, usize)>,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<TensorId> {
    let pair_targets: Vec<f64> = pairs
        .iter()
        .map(|p| f64::from(gold_pairs.contains(&(p.emo_idx, p.cause_idx))))
        .collect();
    let emo_targets: Vec<f64> = labels.y_emo.iter().map(|&b| f64::from(b)).collect();
    let cause_targets: Vec<f64> = labels.y_cause.iter().map(|&b| f64::from(b)).collect();

    let pair_terms = tape.bce_with_logits(output.pair_logits, pair_targets)?;
    let emo_terms = tape.bce_with_logits(output.emo_logits, emo_targets)?;
    let cause_terms = tape.bce_with_logits(output.cause_logits, cause_targets)?;

    let l_pair = tape.sum(pair_terms);
    let l_emo = tape.sum(emo_terms);
    let l_cause = tape.sum(cause_terms);

    let weighted_pair = tape.scale(l_pair, alpha);
    let weighted_emo = tape.scale(l_emo, beta);
    let weighted_cause = tape.scale(l_cause, gamma);
    let partial = tape.add(weighted_pair, weighted_emo)?;
    tape.add(partial, weighted_cause)
}

/// Concrete per-document predictions read off the tape.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub pairs: Vec<PairCandidate>,
    pub pair_logits: Vec<f64>,
    pub emo_logits: Vec<f64>,
    pub cause_logits: Vec<f64>,
}

impl Predictions {
    pub fn from_tape(tape: &Tape, output: &ForwardOutput, pairs: &[PairCandidate]) -> Self {
        Predictions {
            pairs: pairs.to_vec(),
            pair_logits: tape.value(output.pair_logits).data().to_vec(),
            emo_logits: tape.value(output.emo_logits).data().to_vec(),
            cause_logits: tape.value(output.cause_logits).data().to_vec(),
        }
    }

    pub fn pair_prob(&self, k: usize) -> f64 {
        sigmoid(self.pair_logits[k])
    }

    pub fn emo_prob(&self, clause0: usize) -> f64 {
        sigmoid(self.emo_logits[clause0])
    }

    pub fn cause_prob(&self, clause0: usize) -> f64 {
        sigmoid(self.cause_logits[clause0])
    }

    /// Logit for a specific (emotion, cause) couple, if instantiated.
    pub fn logit_for(&self, emo_idx: usize, cause_idx: usize) -> Option<f64> {
        self.pairs
            .iter()
            .position(|p| p.emo_idx == emo_idx && p.cause_idx == cause_idx)
            .map(|k| self.pair_logits[k])
    }
}
