//! Windowed pair-candidate enumeration and the heterogeneous undirected
//! graph the model convolves over: emotion-clause nodes, cause-clause nodes,
//! pair nodes and one document node, wired by five relation kinds (or fewer
//! under ablation).
//!
//! Self-loops are deliberately absent from the adjacency; each node type gets
//! its own self transform inside the model instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The four node types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeType {
    Emotion,
    Cause,
    Pair,
    Doc,
}

impl NodeType {
    pub fn code(self) -> &'static str {
        match self {
            NodeType::Emotion => "E",
            NodeType::Cause => "C",
            NodeType::Pair => "P",
            NodeType::Doc => "D",
        }
    }
}

/// Typed node address: a type and a 0-based index within that type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub ty: NodeType,
    pub idx: usize,
}

impl NodeRef {
    pub fn new(ty: NodeType, idx: usize) -> Self {
        NodeRef { ty, idx }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ty.code(), self.idx)
    }
}

/// Edge taxonomy. The first five are the standard inter-node kinds;
/// `ClauseClause` and `ClausePair` only appear as the merged relations of the
/// corresponding ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    EmoEmo,
    CauCau,
    EmoPair,
    CauPair,
    DocOther,
    ClauseClause,
    ClausePair,
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Graph/model variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AblationMode {
    #[default]
    None,
    /// One merged relation replaces the two clause-clause relations.
    MergeClauseClause,
    /// One merged relation replaces the two clause-pair relations.
    MergeClausePair,
    /// No pair nodes in the graph; pair-generator output classifies directly.
    NoPairNode,
    /// Pair nodes initialized from the relative-position table alone.
    NoPG,
    /// Neither pair nodes nor pair generator; heads see a zero pair block.
    NoPairNodeNoPG,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::None,
        AblationMode::MergeClauseClause,
        AblationMode::MergeClausePair,
        AblationMode::NoPairNode,
        AblationMode::NoPG,
        AblationMode::NoPairNodeNoPG,
    ];

    pub fn has_pair_nodes(self) -> bool {
        !matches!(
            self,
            AblationMode::NoPairNode | AblationMode::NoPairNodeNoPG
        )
    }

    pub fn uses_pair_generator(self) -> bool {
        !matches!(self, AblationMode::NoPG | AblationMode::NoPairNodeNoPG)
    }

    /// Relation kinds present in a graph built under this mode.
    pub fn relation_kinds(self) -> Vec<RelationKind> {
        use RelationKind::*;
        match self {
            AblationMode::None | AblationMode::NoPG => {
                vec![EmoEmo, CauCau, EmoPair, CauPair, DocOther]
            }
            AblationMode::MergeClauseClause => vec![ClauseClause, EmoPair, CauPair, DocOther],
            AblationMode::MergeClausePair => vec![EmoEmo, CauCau, ClausePair, DocOther],
            AblationMode::NoPairNode | AblationMode::NoPairNodeNoPG => {
                vec![EmoEmo, CauCau, DocOther]
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::MergeClauseClause => "merge-clause-clause",
            AblationMode::MergeClausePair => "merge-clause-pair",
            AblationMode::NoPairNode => "no-pair-node",
            AblationMode::NoPG => "no-pg",
            AblationMode::NoPairNodeNoPG => "no-pair-node-no-pg",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation mode `{s}` (expected one of: {})",
                    AblationMode::ALL.map(|m| m.label()).join(", ")
                ))
            })
    }
}

/// A windowed candidate: emotion clause i, cause clause j, both 1-based,
/// with |i-j| within the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairCandidate {
    pub emo_idx: usize,
    pub cause_idx: usize,
}

impl PairCandidate {
    /// Signed relative position i - j (indexes the position-embedding table).
    pub fn offset(self) -> i64 {
        self.emo_idx as i64 - self.cause_idx as i64
    }
}

/// All (i, j) with |i-j| <= lambda, ordered lexicographically by (i, j).
/// That ordering defines the pair-node index space and is part of the
/// public contract: prediction matrices index by it.
pub fn enumerate_pairs(n: usize, lambda: usize) -> Vec<PairCandidate> {
    let mut pairs = Vec::new();
    for i in 1..=n {
        let lo = i.saturating_sub(lambda).max(1);
        let hi = (i + lambda).min(n);
        for j in lo..=hi {
            pairs.push(PairCandidate {
                emo_idx: i,
                cause_idx: j,
            });
        }
    }
    pairs
}

/// The heterogeneous undirected graph. Each undirected edge is stored once;
/// consumers treat every stored edge as bidirectional.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub n_clauses: usize,
    pub pairs: Vec<PairCandidate>,
    pub has_doc_node: bool,
    pub has_pair_nodes: bool,
    pub ablation: AblationMode,
    relations: BTreeMap<RelationKind, Vec<(NodeRef, NodeRef)>>,
}

/// Build the graph for an n-clause document over the given candidates.
/// `pairs` must come from [`enumerate_pairs`] (lexicographic order).
pub fn build_graph(n: usize, pairs: &[PairCandidate], ablation: AblationMode) -> HeteroGraph {
    use NodeType::*;
    let e = |i: usize| NodeRef::new(Emotion, i);
    let c = |i: usize| NodeRef::new(Cause, i);
    let p = |k: usize| NodeRef::new(Pair, k);
    let doc = NodeRef::new(Doc, 0);

    let mut emo_emo = Vec::new();
    let mut cau_cau = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            emo_emo.push((e(i), e(j)));
            cau_cau.push((c(i), c(j)));
        }
    }
    let mut emo_pair = Vec::new();
    let mut cau_pair = Vec::new();
    if ablation.has_pair_nodes() {
        for (k, pair) in pairs.iter().enumerate() {
            emo_pair.push((e(pair.emo_idx - 1), p(k)));
            cau_pair.push((c(pair.cause_idx - 1), p(k)));
        }
    }
    let mut doc_other = Vec::new();
    for i in 0..n {
        doc_other.push((e(i), doc));
    }
    for i in 0..n {
        doc_other.push((c(i), doc));
    }
    if ablation.has_pair_nodes() {
        for k in 0..pairs.len() {
            doc_other.push((p(k), doc));
        }
    }

    let mut relations = BTreeMap::new();
    match ablation {
        AblationMode::None | AblationMode::NoPG => {
            relations.insert(RelationKind::EmoEmo, emo_emo);
            relations.insert(RelationKind::CauCau, cau_cau);
            relations.insert(RelationKind::EmoPair, emo_pair);
            relations.insert(RelationKind::CauPair, cau_pair);
        }
        AblationMode::MergeClauseClause => {
            let mut merged = emo_emo;
            merged.extend(cau_cau);
            relations.insert(RelationKind::ClauseClause, merged);
            relations.insert(RelationKind::EmoPair, emo_pair);
            relations.insert(RelationKind::CauPair, cau_pair);
        }
        AblationMode::MergeClausePair => {
            relations.insert(RelationKind::EmoEmo, emo_emo);
            relations.insert(RelationKind::CauCau, cau_cau);
            let mut merged = emo_pair;
            merged.extend(cau_pair);
            relations.insert(RelationKind::ClausePair, merged);
        }
        AblationMode::NoPairNode | AblationMode::NoPairNodeNoPG => {
            relations.insert(RelationKind::EmoEmo, emo_emo);
            relations.insert(RelationKind::CauCau, cau_cau);
        }
    }
    relations.insert(RelationKind::DocOther, doc_other);

    HeteroGraph {
        n_clauses: n,
        pairs: pairs.to_vec(),
        has_doc_node: true,
        has_pair_nodes: ablation.has_pair_nodes(),
        ablation,
        relations,
    }
}

impl HeteroGraph {
    pub fn pair_node_count(&self) -> usize {
        if self.has_pair_nodes {
            self.pairs.len()
        } else {
            0
        }
    }

    pub fn node_count(&self) -> usize {
        2 * self.n_clauses + self.pair_node_count() + usize::from(self.has_doc_node)
    }

    pub fn edge_count(&self, kind: RelationKind) -> usize {
        self.relations.get(&kind).map_or(0, Vec::len)
    }

    pub fn total_edges(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    pub fn relations(&self) -> impl Iterator<Item = (RelationKind, &[(NodeRef, NodeRef)])> {
        self.relations.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Global index in the stacked node space: emotion clauses first, then
    /// cause clauses, then pair nodes, then the document node.
    pub fn global_index(&self, node: NodeRef) -> usize {
        let n = self.n_clauses;
        match node.ty {
            NodeType::Emotion => node.idx,
            NodeType::Cause => n + node.idx,
            NodeType::Pair => {
                assert!(self.has_pair_nodes, "no pair nodes in this graph");
                2 * n + node.idx
            }
            NodeType::Doc => 2 * n + self.pair_node_count(),
        }
    }

    pub fn node_at(&self, global: usize) -> NodeRef {
        let n = self.n_clauses;
        if global < n {
            NodeRef::new(NodeType::Emotion, global)
        } else if global < 2 * n {
            NodeRef::new(NodeType::Cause, global - n)
        } else if global < 2 * n + self.pair_node_count() {
            NodeRef::new(NodeType::Pair, global - 2 * n)
        } else {
            NodeRef::new(NodeType::Doc, 0)
        }
    }

    /// Per-node neighbor lists for one relation, in global indices; entry u
    /// lists every v with an edge {u, v} of that kind. Lists are sorted so
    /// downstream reductions see a fixed order.
    pub fn neighbor_groups(&self, kind: RelationKind) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.node_count()];
        if let Some(edges) = self.relations.get(&kind) {
            for &(a, b) in edges {
                let ga = self.global_index(a);
                let gb = self.global_index(b);
                groups[ga].push(gb);
                groups[gb].push(ga);
            }
        }
        for g in &mut groups {
            g.sort_unstable();
        }
        groups
    }

    /// Edge list as text: one line per edge, `RELATION srcType:srcIdx
    /// dstType:dstIdx`, lexicographically sorted. Byte-stable for golden
    /// tests.
    pub fn dump_edges(&self) -> String {
        let mut lines: Vec<String> = Vec::with_capacity(self.total_edges());
        for (kind, edges) in self.relations() {
            for &(a, b) in edges {
                lines.push(format!("{kind} {a} {b}"));
            }
        }
        lines.sort_unstable();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    #[cfg(test)]
    pub(crate) fn remove_edge_for_test(&mut self, kind: RelationKind, index: usize) {
        self.relations.get_mut(&kind).unwrap().remove(index);
    }
}

/// Per-relation edge counts, as produced by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphReport {
    pub node_count: usize,
    pub edges: BTreeMap<RelationKind, usize>,
}

/// Check every structural invariant of the graph against a brute-force
/// reconstruction of what its (n, pairs, ablation) triple implies. Returns
/// the per-relation counts on success; names the violated invariant (and
/// node, where one is at fault) otherwise.
pub fn validate_graph(g: &HeteroGraph) -> Result<GraphReport> {
    let fail = |message: String, node: Option<NodeRef>| -> Result<GraphReport> {
        Err(Error::GraphInvariant { message, node })
    };

    for (kind, edges) in g.relations() {
        for &(a, b) in edges {
            if a == b {
                return fail(format!("self-edge in {kind}"), Some(a));
            }
        }
    }

    let expected = build_graph(g.n_clauses, &g.pairs, g.ablation);
    let expected_kinds: BTreeSet<RelationKind> =
        g.ablation.relation_kinds().into_iter().collect();
    let actual_kinds: BTreeSet<RelationKind> = g.relations().map(|(k, _)| k).collect();
    if expected_kinds != actual_kinds {
        return fail(
            format!("relation set {actual_kinds:?}, expected {expected_kinds:?}"),
            None,
        );
    }

    for (kind, edges) in expected.relations() {
        let want: BTreeSet<(NodeRef, NodeRef)> = edges
            .iter()
            .map(|&(a, b)| if a <= b { (a, b) } else { (b, a) })
            .collect();
        let got_edges = g.relations.get(&kind).cloned().unwrap_or_default();
        let got: BTreeSet<(NodeRef, NodeRef)> = got_edges
            .iter()
            .map(|&(a, b)| if a <= b { (a, b) } else { (b, a) })
            .collect();
        if got.len() != got_edges.len() {
            return fail(format!("{kind} stores a duplicate edge"), None);
        }
        if let Some(&(a, b)) = want.difference(&got).next() {
            return fail(format!("{kind} is missing edge {a}--{b}"), Some(a));
        }
        if let Some(&(a, b)) = got.difference(&want).next() {
            return fail(format!("{kind} has unexpected edge {a}--{b}"), Some(a));
        }
    }

    Ok(GraphReport {
        node_count: g.node_count(),
        edges: g
            .relations()
            .map(|(k, edges)| (k, edges.len()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pair_enumeration_n5_lambda3() {
        let pairs = enumerate_pairs(5, 3);
        assert_eq!(pairs.len(), 23);
        // Brute-force oracle over the full Cartesian product.
        let brute: Vec<(usize, usize)> = (1usize..=5)
            .flat_map(|i| (1usize..=5).map(move |j| (i, j)))
            .filter(|&(i, j)| i.abs_diff(j) <= 3)
            .collect();
        let got: Vec<(usize, usize)> =
            pairs.iter().map(|p| (p.emo_idx, p.cause_idx)).collect();
        assert_eq!(got, brute);
    }

    #[test]
    fn pair_enumeration_single_clause() {
        for lambda in [0, 1, 3, 10] {
            let pairs = enumerate_pairs(1, lambda);
            assert_eq!(pairs.len(), 1);
            assert_eq!((pairs[0].emo_idx, pairs[0].cause_idx), (1, 1));
        }
    }

    #[test]
    fn pair_enumeration_n3_lambda1() {
        let got: Vec<(usize, usize)> = enumerate_pairs(3, 1)
            .iter()
            .map(|p| (p.emo_idx, p.cause_idx))
            .collect();
        assert_eq!(
            got,
            vec![(1, 1), (1, 2), (2, 1), (2, 2), (2, 3), (3, 2), (3, 3)]
        );
    }

    #[test]
    fn full_window_gives_cartesian_product() {
        for n in 1..8usize {
            assert_eq!(enumerate_pairs(n, n - 1).len(), n * n);
            assert_eq!(enumerate_pairs(n, n + 3).len(), n * n);
        }
    }

    #[test]
    fn standard_graph_counts() {
        // 5 clauses, window 3: 5 E + 5 C + 23 P + 1 D nodes and
        // 10/10/23/23/33 edges across the five relations.
        let pairs = enumerate_pairs(5, 3);
        let g = build_graph(5, &pairs, AblationMode::None);
        assert_eq!(g.node_count(), 34);
        assert_eq!(g.edge_count(RelationKind::EmoEmo), 10);
        assert_eq!(g.edge_count(RelationKind::CauCau), 10);
        assert_eq!(g.edge_count(RelationKind::EmoPair), 23);
        assert_eq!(g.edge_count(RelationKind::CauPair), 23);
        assert_eq!(g.edge_count(RelationKind::DocOther), 33);
        assert_eq!(g.total_edges(), 99);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn degenerate_single_clause_graph() {
        let pairs = enumerate_pairs(1, 3);
        let g = build_graph(1, &pairs, AblationMode::None);
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edge_count(RelationKind::EmoEmo), 0);
        assert_eq!(g.edge_count(RelationKind::CauCau), 0);
        assert_eq!(g.edge_count(RelationKind::EmoPair), 1);
        assert_eq!(g.edge_count(RelationKind::CauPair), 1);
        assert_eq!(g.edge_count(RelationKind::DocOther), 3);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn no_pair_node_graph_counts() {
        let pairs = enumerate_pairs(5, 3);
        let g = build_graph(5, &pairs, AblationMode::NoPairNode);
        assert_eq!(g.node_count(), 11);
        assert_eq!(g.edge_count(RelationKind::EmoEmo), 10);
        assert_eq!(g.edge_count(RelationKind::CauCau), 10);
        assert_eq!(g.edge_count(RelationKind::DocOther), 10);
        assert_eq!(g.edge_count(RelationKind::EmoPair), 0);
        assert_eq!(g.edge_count(RelationKind::CauPair), 0);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn merged_clause_clause_has_combined_edges() {
        let pairs = enumerate_pairs(5, 3);
        let g = build_graph(5, &pairs, AblationMode::MergeClauseClause);
        assert_eq!(g.edge_count(RelationKind::ClauseClause), 20);
        assert_eq!(g.edge_count(RelationKind::EmoEmo), 0);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn merged_clause_pair_has_combined_edges() {
        let pairs = enumerate_pairs(5, 3);
        let g = build_graph(5, &pairs, AblationMode::MergeClausePair);
        assert_eq!(g.edge_count(RelationKind::ClausePair), 46);
        validate_graph(&g).unwrap();
    }

    #[test]
    fn validate_names_the_node_missing_an_edge() {
        let pairs = enumerate_pairs(3, 1);
        let mut g = build_graph(3, &pairs, AblationMode::None);
        g.remove_edge_for_test(RelationKind::CauPair, 2);
        let err = validate_graph(&g).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("CauPair") && msg.contains("missing"), "{msg}");
    }

    #[test]
    fn dump_is_sorted_and_stable() {
        let pairs = enumerate_pairs(5, 3);
        let g = build_graph(5, &pairs, AblationMode::None);
        let dump = g.dump_edges();
        assert_eq!(dump.lines().count(), 99);
        let mut lines: Vec<&str> = dump.lines().collect();
        let original = lines.clone();
        lines.sort_unstable();
        assert_eq!(lines, original);
        assert_eq!(dump, g.dump_edges());
        assert!(dump.lines().any(|l| l == "EmoPair E:0 P:0"), "{dump}");
    }

    #[test]
    fn global_indices_roundtrip() {
        let pairs = enumerate_pairs(4, 2);
        let g = build_graph(4, &pairs, AblationMode::None);
        for global in 0..g.node_count() {
            assert_eq!(g.global_index(g.node_at(global)), global);
        }
    }

    #[test]
    fn neighbor_groups_are_symmetric() {
        let pairs = enumerate_pairs(4, 2);
        let g = build_graph(4, &pairs, AblationMode::None);
        for kind in g.ablation.relation_kinds() {
            let groups = g.neighbor_groups(kind);
            for (u, neigh) in groups.iter().enumerate() {
                for &v in neigh {
                    assert!(groups[v].contains(&u), "{kind}: {u} -> {v} not mirrored");
                }
            }
        }
    }

    #[test]
    fn ablation_mode_labels_roundtrip() {
        for mode in AblationMode::ALL {
            assert_eq!(mode.label().parse::<AblationMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }

    proptest! {
        #[test]
        fn candidate_count_formula(n in 1usize..30, lambda in 0usize..6) {
            let count = enumerate_pairs(n, lambda).len();
            let expect = if n > lambda {
                (2 * lambda + 1) * n - lambda * (lambda + 1)
            } else {
                n * n
            };
            prop_assert_eq!(count, expect);
        }

        #[test]
        fn doc_node_touches_every_other_node_once(n in 1usize..8, lambda in 0usize..4) {
            let pairs = enumerate_pairs(n, lambda);
            let g = build_graph(n, &pairs, AblationMode::None);
            prop_assert_eq!(
                g.edge_count(RelationKind::DocOther),
                g.node_count() - 1
            );
            let groups = g.neighbor_groups(RelationKind::DocOther);
            let doc_global = g.global_index(NodeRef::new(NodeType::Doc, 0));
            for u in 0..g.node_count() {
                if u != doc_global {
                    prop_assert_eq!(groups[u].as_slice(), &[doc_global][..]);
                }
            }
        }
    }
}
