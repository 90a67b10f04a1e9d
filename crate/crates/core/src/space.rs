//! Cell search spaces and discrete-architecture derivation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::game::{Coalition, GameError, OperationId};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("space document invalid at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("edge {edge} ({from}->{to}): {reason}")]
    Edge {
        edge: usize,
        from: usize,
        to: usize,
        reason: String,
    },
    #[error("node {node} has {incoming} incoming edges, top-{k} selection needs at least {k}")]
    TooFewInputs { node: usize, incoming: usize, k: usize },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("alpha has {got} entries, space has {expected} players")]
    AlphaLength { expected: usize, got: usize },
    #[error("edge {edge} has no eligible operation after excluding null ops")]
    NoEligibleOp { edge: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How edges are kept when discretizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Selection {
    All,
    Topk { k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<String>,
}

/// Serialized form of a [`SearchSpace`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDoc {
    pub name: String,
    pub nodes: usize,
    pub edges: Vec<EdgeDoc>,
    #[serde(default)]
    pub null_ops: Vec<String>,
    #[serde(default = "default_selection")]
    pub selection: Selection,
}

fn default_selection() -> Selection {
    Selection::All
}

/// Validated cell DAG. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    doc: SpaceDoc,
    null_ops: BTreeSet<String>,
    offsets: Vec<usize>,
}

impl SearchSpace {
    pub fn from_doc(doc: SpaceDoc) -> Result<Self, SpaceError> {
        for (i, e) in doc.edges.iter().enumerate() {
            let bad = |reason: String| SpaceError::Edge {
                edge: i,
                from: e.from,
                to: e.to,
                reason,
            };
            if e.from >= e.to {
                return Err(bad("edges must go from a lower to a higher node".into()));
            }
            if e.to >= doc.nodes {
                return Err(bad(format!("node {} outside a {}-node cell", e.to, doc.nodes)));
            }
            if e.ops.is_empty() {
                return Err(bad("no candidate operations".into()));
            }
            let mut seen = BTreeSet::new();
            for op in &e.ops {
                if !seen.insert(op) {
                    return Err(bad(format!("duplicate operation `{op}`")));
                }
            }
        }
        if let Selection::Topk { k } = doc.selection {
            for node in 0..doc.nodes {
                let incoming = doc.edges.iter().filter(|e| e.to == node).count();
                if incoming > 0 && incoming < k {
                    return Err(SpaceError::TooFewInputs { node, incoming, k });
                }
            }
        }
        let mut offsets = Vec::with_capacity(doc.edges.len() + 1);
        offsets.push(0);
        for e in &doc.edges {
            offsets.push(offsets.last().unwrap() + e.ops.len());
        }
        let null_ops = doc.null_ops.iter().cloned().collect();
        Ok(Self { doc, null_ops, offsets })
    }

    /// Parses a JSON space document.
    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: SpaceDoc = serde_path_to_error::deserialize(de).map_err(|e| SpaceError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Self::from_doc(doc)
    }

    /// Preset name or path to a JSON document.
    pub fn load(source: &str) -> Result<Self, SpaceError> {
        match Self::preset(source) {
            Ok(space) => Ok(space),
            Err(_) if Path::new(source).exists() => {
                let text = std::fs::read_to_string(source).map_err(|e| SpaceError::Io {
                    path: source.to_string(),
                    source: e,
                })?;
                Self::from_json(&text)
            }
            Err(e) => Err(e),
        }
    }

    /// Built-in spaces: `nasbench201-cell` and `darts-cell`.
    pub fn preset(name: &str) -> Result<Self, SpaceError> {
        match name {
            "nasbench201-cell" | "nasbench201" => Ok(Self::nasbench201()),
            "darts-cell" | "darts" => Ok(Self::darts()),
            other => Err(SpaceError::UnknownPreset(other.to_string())),
        }
    }

    /// Four nodes, every forward pair connected, five operations per edge.
    pub fn nasbench201() -> Self {
        let ops: Vec<String> = ["none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut edges = Vec::new();
        for to in 1..4 {
            for from in 0..to {
                edges.push(EdgeDoc {
                    from,
                    to,
                    ops: ops.clone(),
                });
            }
        }
        Self::from_doc(SpaceDoc {
            name: "nasbench201-cell".into(),
            nodes: 4,
            edges,
            null_ops: vec!["none".into()],
            selection: Selection::All,
        })
        .expect("preset is valid")
    }

    /// Two input nodes and four intermediate nodes, each intermediate node
    /// fed by every earlier node; top-2 inputs kept per node.
    pub fn darts() -> Self {
        let ops: Vec<String> = [
            "none",
            "max_pool_3x3",
            "avg_pool_3x3",
            "skip_connect",
            "sep_conv_3x3",
            "sep_conv_5x5",
            "dil_conv_3x3",
            "dil_conv_5x5",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut edges = Vec::new();
        for to in 2..6 {
            for from in 0..to {
                edges.push(EdgeDoc {
                    from,
                    to,
                    ops: ops.clone(),
                });
            }
        }
        Self::from_doc(SpaceDoc {
            name: "darts-cell".into(),
            nodes: 6,
            edges,
            null_ops: vec!["none".into()],
            selection: Selection::Topk { k: 2 },
        })
        .expect("preset is valid")
    }

    pub fn name(&self) -> &str {
        &self.doc.name
    }

    pub fn nodes(&self) -> usize {
        self.doc.nodes
    }

    pub fn edges(&self) -> &[EdgeDoc] {
        &self.doc.edges
    }

    pub fn selection(&self) -> Selection {
        self.doc.selection
    }

    pub fn doc(&self) -> &SpaceDoc {
        &self.doc
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.doc).expect("space documents serialize")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Total player count |N|.
    pub fn players(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Player index range of one edge.
    pub fn edge_players(&self, edge: usize) -> std::ops::Range<usize> {
        self.offsets[edge]..self.offsets[edge + 1]
    }

    /// Player ranges for every edge, in edge order.
    pub fn edge_groups(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.doc.edges.len()).map(|e| self.edge_players(e)).collect()
    }

    /// Null ops are excluded at discretization by default under top-k
    /// selection and kept otherwise.
    pub fn default_exclude_null(&self) -> bool {
        matches!(self.doc.selection, Selection::Topk { .. })
    }

    pub fn flatten(&self, edge_index: usize, op_index: usize) -> Result<OperationId, GameError> {
        let edges = self.doc.edges.len();
        if edge_index >= edges {
            return Err(GameError::Range {
                dimension: "edge",
                index: edge_index,
                limit: edges,
            });
        }
        let ops = self.doc.edges[edge_index].ops.len();
        if op_index >= ops {
            return Err(GameError::Range {
                dimension: "operation",
                index: op_index,
                limit: ops,
            });
        }
        Ok(OperationId {
            edge_index,
            op_index,
            player_index: self.offsets[edge_index] + op_index,
        })
    }

    pub fn unflatten(&self, player: usize) -> Result<OperationId, GameError> {
        if player >= self.players() {
            return Err(GameError::Range {
                dimension: "player",
                index: player,
                limit: self.players(),
            });
        }
        let edge_index = self.offsets.partition_point(|&o| o <= player) - 1;
        Ok(OperationId {
            edge_index,
            op_index: player - self.offsets[edge_index],
            player_index: player,
        })
    }

    pub fn op_name(&self, player: usize) -> &str {
        let id = self.unflatten(player).expect("player in range");
        &self.doc.edges[id.edge_index].ops[id.op_index]
    }

    pub fn is_null(&self, player: usize) -> bool {
        self.null_ops.contains(self.op_name(player))
    }

    /// Edge index of every player.
    pub fn edge_of_players(&self) -> Vec<usize> {
        (0..self.doc.edges.len())
            .flat_map(|e| self.edge_players(e).map(move |_| e))
            .collect()
    }

    /// Number of discrete architectures with one operation per edge, or
    /// `None` when it overflows.
    pub fn architecture_count(&self) -> Option<u128> {
        self.doc
            .edges
            .iter()
            .try_fold(1u128, |acc, e| acc.checked_mul(e.ops.len() as u128))
    }

    /// Coalition keeping exactly one operation per edge.
    pub fn architecture_coalition(&self, choice: &[usize]) -> Coalition {
        assert_eq!(choice.len(), self.doc.edges.len());
        Coalition::from_players(
            self.players(),
            choice.iter().enumerate().map(|(e, &op)| self.offsets[e] + op),
        )
    }

    /// Per-edge argmax over `alpha`, followed by top-k input selection when
    /// configured. Ties go to the lowest op index, then the lowest edge index.
    pub fn derive_genotype<T: Scalar>(&self, alpha: &[T], exclude_null: bool) -> Result<Genotype, SpaceError> {
        if alpha.len() != self.players() {
            return Err(SpaceError::AlphaLength {
                expected: self.players(),
                got: alpha.len(),
            });
        }
        let argmax = |edge: usize, skip_null: bool| -> Option<(usize, T)> {
            let mut best: Option<(usize, T)> = None;
            for (op, p) in self.edge_players(edge).enumerate() {
                if skip_null && self.is_null(p) {
                    continue;
                }
                if best.is_none_or(|(_, b)| alpha[p] > b) {
                    best = Some((op, alpha[p]));
                }
            }
            best
        };

        let mut picks = Vec::with_capacity(self.doc.edges.len());
        for edge in 0..self.doc.edges.len() {
            let (op, _) = argmax(edge, exclude_null).ok_or(SpaceError::NoEligibleOp { edge })?;
            picks.push(op);
        }

        let mut keep = vec![true; self.doc.edges.len()];
        if let Selection::Topk { k } = self.doc.selection {
            for node in 0..self.doc.nodes {
                let mut incoming: Vec<(usize, T)> = self
                    .doc
                    .edges
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.to == node)
                    .map(|(i, _)| (i, argmax(i, true).map_or(T::neg_infinity(), |(_, a)| a)))
                    .collect();
                // stable sort keeps lower edge indices first among equal scores
                incoming.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
                for &(edge, _) in incoming.iter().skip(k) {
                    keep[edge] = false;
                }
            }
        }

        let mut chosen = Vec::new();
        let mut discarded_edges = Vec::new();
        for (edge, &op) in picks.iter().enumerate() {
            let e = &self.doc.edges[edge];
            if keep[edge] {
                chosen.push(ChosenOp {
                    edge,
                    from: e.from,
                    to: e.to,
                    op_index: op,
                    op: e.ops[op].clone(),
                });
            } else {
                discarded_edges.push(edge);
            }
        }
        Ok(Genotype {
            chosen,
            discarded_edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenOp {
    pub edge: usize,
    pub from: usize,
    pub to: usize,
    pub op_index: usize,
    pub op: String,
}

/// Discrete architecture: one operation per retained edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub chosen: Vec<ChosenOp>,
    pub discarded_edges: Vec<usize>,
}

#[derive(Serialize)]
struct GenotypeEdgeDoc<'a> {
    from: usize,
    to: usize,
    op: &'a str,
}

#[derive(Serialize)]
struct GenotypeDoc<'a> {
    edges: Vec<GenotypeEdgeDoc<'a>>,
}

impl Genotype {
    /// `{"edges":[{"from":..,"to":..,"op":..}]}`
    pub fn to_json(&self) -> String {
        let doc = GenotypeDoc {
            edges: self
                .chosen
                .iter()
                .map(|c| GenotypeEdgeDoc {
                    from: c.from,
                    to: c.to,
                    op: &c.op,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("genotypes serialize")
    }

    /// Player indices of the chosen operations.
    pub fn players(&self, space: &SearchSpace) -> Vec<usize> {
        self.chosen
            .iter()
            .map(|c| space.edge_players(c.edge).start + c.op_index)
            .collect()
    }
}

/// Canonical one-line form, e.g. `0->1:nor_conv_3x3|0->2:skip_connect`.
impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.chosen.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{}->{}:{}", c.from, c.to, c.op)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nasbench201_shape() {
        let s = SearchSpace::preset("nasbench201-cell").unwrap();
        assert_eq!((s.nodes(), s.edges().len(), s.players()), (4, 6, 30));
        assert!(s.edges().iter().all(|e| e.ops.len() == 5));
        assert_eq!(s.selection(), Selection::All);
        assert!(!s.default_exclude_null());
    }

    #[test]
    fn darts_shape() {
        let s = SearchSpace::preset("darts-cell").unwrap();
        assert_eq!(s.edges().len(), 14);
        let e = &s.edges()[0];
        assert_eq!(e.ops.len(), 8);
        assert_eq!(e.ops.iter().filter(|o| !s.null_ops.contains(*o)).count(), 7);
        assert_eq!(s.selection(), Selection::Topk { k: 2 });
        assert!(s.default_exclude_null());
    }

    #[test]
    fn single_edge_space() {
        let s =
            SearchSpace::from_json(r#"{"name":"tiny","nodes":2,"edges":[{"from":0,"to":1,"ops":["a","b"]}]}"#).unwrap();
        assert_eq!(s.players(), 2);
    }

    #[test]
    fn flatten_examples() {
        let s = SearchSpace::nasbench201();
        assert_eq!(s.flatten(0, 0).unwrap().player_index, 0);
        assert_eq!(s.flatten(5, 4).unwrap().player_index, 29);
        assert_eq!(s.flatten(1, 2).unwrap().player_index, 7);
        match s.flatten(6, 0).unwrap_err() {
            GameError::Range { dimension, .. } => assert_eq!(dimension, "edge"),
            e => panic!("{e}"),
        }
        match s.flatten(0, 5).unwrap_err() {
            GameError::Range { dimension, .. } => assert_eq!(dimension, "operation"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn flatten_bijection_ragged() {
        let s = SearchSpace::from_json(
            r#"{"name":"ragged","nodes":3,"edges":[
                {"from":0,"to":1,"ops":["a"]},
                {"from":0,"to":2,"ops":["a","b","c"]},
                {"from":1,"to":2,"ops":["x","y"]}]}"#,
        )
        .unwrap();
        assert_eq!(s.players(), 6);
        let mut next = 0;
        for e in 0..3 {
            for o in 0..s.edges()[e].ops.len() {
                let id = s.flatten(e, o).unwrap();
                assert_eq!(id.player_index, next);
                assert_eq!(s.unflatten(next).unwrap(), id);
                next += 1;
            }
        }
        assert!(s.unflatten(6).is_err());
    }

    #[test]
    fn parse_error_names_path() {
        let err =
            SearchSpace::from_json(r#"{"name":"x","nodes":2,"edges":[{"from":0,"to":1,"ops":[3]}]}"#).unwrap_err();
        match err {
            SpaceError::Parse { path, .. } => assert_eq!(path, "edges[0].ops[0]"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn dag_violation_names_edge() {
        let err = SearchSpace::from_json(
            r#"{"name":"x","nodes":3,"edges":[{"from":0,"to":1,"ops":["a"]},{"from":2,"to":1,"ops":["a"]}]}"#,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                SpaceError::Edge {
                    edge: 1,
                    from: 2,
                    to: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn duplicate_ops_and_empty_edges_rejected() {
        assert!(
            SearchSpace::from_json(r#"{"name":"x","nodes":2,"edges":[{"from":0,"to":1,"ops":["a","a"]}]}"#).is_err()
        );
        assert!(SearchSpace::from_json(r#"{"name":"x","nodes":2,"edges":[{"from":0,"to":1,"ops":[]}]}"#).is_err());
    }

    #[test]
    fn topk_requires_enough_inputs() {
        let err = SearchSpace::from_json(
            r#"{"name":"x","nodes":3,"selection":{"rule":"topk","k":2},
               "edges":[{"from":0,"to":1,"ops":["a"]},{"from":0,"to":2,"ops":["a"]},{"from":1,"to":2,"ops":["a"]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SpaceError::TooFewInputs {
                node: 1,
                incoming: 1,
                k: 2
            }
        ));
    }

    #[test]
    fn one_hot_alpha_picks_hot_ops() {
        let s = SearchSpace::nasbench201();
        let hot = [3usize, 0, 4, 1, 2, 3];
        let mut alpha = vec![0.0f64; 30];
        for (e, &o) in hot.iter().enumerate() {
            alpha[e * 5 + o] = 1.0;
        }
        let g = s.derive_genotype(&alpha, false).unwrap();
        let picked: Vec<usize> = g.chosen.iter().map(|c| c.op_index).collect();
        assert_eq!(picked, hot);
        assert!(g.discarded_edges.is_empty());
    }

    #[test]
    fn ties_go_to_lower_op_index() {
        let s = SearchSpace::nasbench201();
        let mut alpha = vec![0.0f64; 30];
        alpha[2] = 0.5;
        alpha[4] = 0.5;
        let g = s.derive_genotype(&alpha, false).unwrap();
        assert_eq!(g.chosen[0].op_index, 2);
        // all-zero edge: first op wins
        assert_eq!(g.chosen[1].op_index, 0);
    }

    #[test]
    fn excluding_null_skips_none() {
        let s = SearchSpace::nasbench201();
        let mut alpha = vec![0.0f64; 30];
        alpha[0] = 9.0;
        alpha[3] = 1.0;
        assert_eq!(s.derive_genotype(&alpha, false).unwrap().chosen[0].op, "none");
        assert_eq!(s.derive_genotype(&alpha, true).unwrap().chosen[0].op, "nor_conv_3x3");
    }

    #[test]
    fn all_null_edge_fails_when_excluded() {
        let s = SearchSpace::from_json(
            r#"{"name":"x","nodes":2,"null_ops":["z"],"edges":[{"from":0,"to":1,"ops":["z"]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            s.derive_genotype(&[1.0f64], true),
            Err(SpaceError::NoEligibleOp { edge: 0 })
        ));
        assert!(s.derive_genotype(&[1.0f64], false).is_ok());
    }

    #[test]
    fn darts_keeps_two_inputs_per_node() {
        let s = SearchSpace::darts();
        let alpha: Vec<f64> = (0..s.players()).map(|p| ((p * 37) % 101) as f64).collect();
        let g = s.derive_genotype(&alpha, true).unwrap();
        assert_eq!(g.chosen.len(), 8);
        for node in 2..6 {
            assert_eq!(g.chosen.iter().filter(|c| c.to == node).count(), 2);
        }
        assert!(g.chosen.iter().all(|c| c.op != "none"));
        assert_eq!(g.discarded_edges.len(), 6);
    }

    #[test]
    fn topk_ranks_by_best_non_null_alpha() {
        let s = SearchSpace::darts();
        let mut alpha = vec![0.0f64; s.players()];
        // node 2 has edges 0 and 1 only; node 3 has edges 2,3,4
        alpha[s.edge_players(2).start] = 100.0; // null op, ignored for ranking
        alpha[s.edge_players(3).start + 4] = 1.0;
        alpha[s.edge_players(4).start + 5] = 2.0;
        let g = s.derive_genotype(&alpha, true).unwrap();
        let node3: Vec<usize> = g.chosen.iter().filter(|c| c.to == 3).map(|c| c.edge).collect();
        assert_eq!(node3, vec![3, 4]);
        assert!(g.discarded_edges.contains(&2));
    }

    #[test]
    fn genotype_string_and_json() {
        let s = SearchSpace::nasbench201();
        let g = s.derive_genotype(&vec![0.0f64; 30], false).unwrap();
        assert_eq!(
            g.to_string(),
            "0->1:none|0->2:none|1->2:none|0->3:none|1->3:none|2->3:none"
        );
        let v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        assert_eq!(v["edges"][2]["from"], 1);
        assert_eq!(v["edges"][2]["op"], "none");
    }

    #[test]
    fn document_roundtrip_keeps_enumeration() {
        for s in [SearchSpace::nasbench201(), SearchSpace::darts()] {
            let back = SearchSpace::from_json(&s.to_json()).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.fingerprint(), s.fingerprint());
            for p in 0..s.players() {
                assert_eq!(back.unflatten(p).unwrap(), s.unflatten(p).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn genotype_invariant_under_monotone_transform(
            raw in proptest::collection::vec(-5.0f64..5.0, 112),
            scale in 0.01f64..100.0,
            shift in -10.0f64..10.0,
        ) {
            let s = SearchSpace::darts();
            let base = s.derive_genotype(&raw, true).unwrap();
            let affine: Vec<f64> = raw.iter().map(|a| a * scale + shift).collect();
            prop_assert_eq!(&s.derive_genotype(&affine, true).unwrap(), &base);
            let cubed: Vec<f64> = raw.iter().map(|a| a.powi(3)).collect();
            prop_assert_eq!(&s.derive_genotype(&cubed, true).unwrap(), &base);
        }
    }
}
