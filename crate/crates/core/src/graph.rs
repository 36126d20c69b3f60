//! Graph over the level-0 prototypes: a self-attention adjacency computed from
//! the prototype feature maps, its symmetric normalization, and a two-layer GCN
//! encoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{he_bound, push_pair, uniform, BoundDense, DenseParams, Parameters, Rng64};
use crate::math;
use crate::prototype::{peak_coordinates, PrototypeHierarchy};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which matrix feeds the GCN normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyMode {
    /// `softmax(QKᵀ/√d_k)·V`.
    #[default]
    Output,
    /// `softmax(QKᵀ/√d_k)` without the value projection.
    Scores,
    /// No edges: the normalized adjacency is the identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub d_k: usize,
    pub hidden: usize,
    pub out: usize,
    pub adjacency: AdjacencyMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            d_k: 32,
            hidden: 16,
            out: 8,
            adjacency: AdjacencyMode::Output,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.hidden == 0 || self.out == 0 {
            return Err(Error::Invalid(format!("graph sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Query, key and value layers over flattened prototype maps of length `F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: DenseParams,
    pub key: DenseParams,
    pub value: DenseParams,
}

impl AttentionParams {
    pub fn init(features: usize, d_k: usize, nodes: usize, rng: &mut Rng64) -> Self {
        Self {
            query: DenseParams::init(d_k, features, rng),
            key: DenseParams::init(d_k, features, rng),
            value: DenseParams::init(nodes, features, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        BoundAttention {
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
        }
    }

    pub fn d_k(&self) -> usize {
        self.query.weight.shape()[0]
    }
}

impl Parameters for AttentionParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_pair(&mut out, "attention.query", &self.query.weight, &self.query.bias);
        push_pair(&mut out, "attention.key", &self.key.weight, &self.key.bias);
        push_pair(&mut out, "attention.value", &self.value.weight, &self.value.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::from([
            &mut self.query.weight,
            &mut self.query.bias,
            &mut self.key.weight,
            &mut self.key.bias,
            &mut self.value.weight,
            &mut self.value.bias,
        ])
    }
}

pub struct BoundAttention {
    pub query: BoundDense,
    pub key: BoundDense,
    pub value: BoundDense,
}

impl BoundAttention {
    pub fn vars(&self) -> Vec<Var> {
        [self.query.vars(), self.key.vars(), self.value.vars()].concat()
    }
}

/// `Θ₁ [F, hidden]` and `Θ₂ [hidden, out]`; the layers have no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub theta1: Tensor,
    pub theta2: Tensor,
}

impl GcnParams {
    pub fn init(features: usize, hidden: usize, out: usize, rng: &mut Rng64) -> Self {
        Self {
            theta1: uniform(&[features, hidden], he_bound(features), rng),
            theta2: uniform(&[hidden, out], he_bound(hidden), rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGcn {
        BoundGcn {
            theta1: tape.leaf(self.theta1.clone()),
            theta2: tape.leaf(self.theta2.clone()),
        }
    }
}

impl Parameters for GcnParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        Vec::from([("gcn.theta1".into(), &self.theta1), ("gcn.theta2".into(), &self.theta2)])
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::from([&mut self.theta1, &mut self.theta2])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGcn {
    pub theta1: Var,
    pub theta2: Var,
}

/// The adjacency at each stage of its construction, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct AdjacencyMatrix {
    /// Row-stochastic `softmax(QKᵀ/√d_k)`; absent in identity mode.
    pub scores: Option<Var>,
    /// The attention output (or the scores in scores mode).
    pub raw: Option<Var>,
    /// Symmetric nonnegative `(relu(raw) + relu(raw)ᵀ)/2`; zero in identity mode.
    pub effective: Var,
    /// `D̂^{-1/2}(effective + I)D̂^{-1/2}`.
    pub normalized: Var,
}

/// Flattens `[N, D, H, W]` prototype maps into `[N, D·H·W]` node features.
pub fn node_features(tape: &mut Tape, fh: Var) -> Result<Var> {
    let shape = tape.value(fh).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("node_features", format!("expected [N, ...] maps, got {shape:?}")));
    }
    let flat = shape[1..].iter().product();
    tape.reshape(fh, &[shape[0], flat])
}

/// Builds the attention adjacency over node features `X [N, F]`.
pub fn attention_adjacency(
    tape: &mut Tape,
    x: Var,
    params: &BoundAttention,
    mode: AdjacencyMode,
) -> Result<AdjacencyMatrix> {
    let n = match tape.value(x).shape() {
        &[n, _] => n,
        s => return Err(Error::shape("attention_adjacency", format!("expected [N, F] node features, got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::Invalid(format!("attention_adjacency needs at least two nodes, got {n}")));
    }
    if mode == AdjacencyMode::Identity {
        let effective = tape.constant(Tensor::zeros(&[n, n]));
        let normalized = tape.sym_normalize(effective)?;
        return Ok(AdjacencyMatrix { scores: None, raw: None, effective, normalized });
    }
    let d_k = tape.value(params.query.weight).shape()[0];
    let q = params.query.apply_rows(tape, x)?;
    let k = params.key.apply_rows(tape, x)?;
    let kt = tape.transpose(k)?;
    let qk = tape.matmul(q, kt)?;
    let logits = tape.scale(qk, 1.0 / math::sqrt(d_k as f64))?;
    let scores = tape.softmax(logits, 1)?;
    let raw = match mode {
        AdjacencyMode::Output => {
            let v = params.value.apply_rows(tape, x)?;
            if tape.value(v).shape() != [n, n] {
                return Err(Error::shape(
                    "attention_adjacency",
                    format!("value layer yields {:?}, expected [{n}, {n}]", tape.value(v).shape()),
                ));
            }
            tape.matmul(scores, v)?
        }
        _ => scores,
    };
    let positive = tape.relu(raw)?;
    let positive_t = tape.transpose(positive)?;
    let both = tape.add(positive, positive_t)?;
    let effective = tape.scale(both, 0.5)?;
    let normalized = tape.sym_normalize(effective)?;
    Ok(AdjacencyMatrix { scores: Some(scores), raw: Some(raw), effective, normalized })
}

/// `relu(normalized · X · Θ)`.
pub fn gcn_layer(tape: &mut Tape, x: Var, normalized: Var, theta: Var) -> Result<Var> {
    let propagated = tape.matmul(normalized, x)?;
    let mixed = tape.matmul(propagated, theta)?;
    tape.relu(mixed)
}

/// Two stacked GCN layers producing `F_g [N, out]`.
pub fn graph_encode(tape: &mut Tape, x: Var, normalized: Var, params: &BoundGcn) -> Result<Var> {
    let hidden = gcn_layer(tape, x, normalized, params.theta1)?;
    gcn_layer(tape, hidden, normalized, params.theta2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub level: usize,
    /// Level-1 prototype this node belongs to.
    pub parent: Option<usize>,
    /// Peak location of the prototype map, normalized to `[0, 1]³`.
    pub centroid: [f64; 3],
    pub mean_activation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Cluster structure of one hierarchy level, without the centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub size: usize,
    pub assignments: Vec<usize>,
    pub parents: Vec<usize>,
    pub phi: Vec<f64>,
}

/// Per-subject graph: one node per level-0 prototype, undirected edges from the
/// effective adjacency, and the hierarchy the nodes belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub hierarchy: Vec<LevelSummary>,
}

/// Assembles a [`GraphDocument`] from concrete values. Edges with weight at or
/// below `threshold` are omitted; each unordered pair appears once with `i < j`.
pub fn export_graph(
    effective: &Tensor,
    hierarchy: &PrototypeHierarchy,
    fh: &Tensor,
    threshold: f64,
) -> Result<GraphDocument> {
    let n = effective.shape()[0];
    if effective.shape() != [n, n] || fh.shape().first() != Some(&n) {
        return Err(Error::shape(
            "export_graph",
            format!("adjacency {:?} does not match prototype maps {:?}", effective.shape(), fh.shape()),
        ));
    }
    let level0 = hierarchy.levels.first().ok_or_else(|| Error::Invalid("empty hierarchy".into()))?;
    if level0.len() != n {
        return Err(Error::Invalid(format!("hierarchy has {} level-0 prototypes, graph has {n}", level0.len())));
    }
    let centroids = peak_coordinates(fh)?;
    let per_node = fh.numel() / n;
    let nodes = (0..n)
        .map(|id| GraphNode {
            id,
            level: 0,
            parent: level0.parents.get(id).copied(),
            centroid: centroids[id],
            mean_activation: fh.data()[id * per_node..(id + 1) * per_node].iter().sum::<f64>() / per_node as f64,
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let weight = effective.at(&[i, j]);
            if weight > threshold {
                edges.push(GraphEdge { i, j, weight });
            }
        }
    }
    let summaries = hierarchy
        .levels
        .iter()
        .enumerate()
        .map(|(level, l)| LevelSummary {
            level,
            size: l.len(),
            assignments: l.assignments.clone(),
            parents: l.parents.clone(),
            phi: l.phi.clone(),
        })
        .collect();
    Ok(GraphDocument { nodes, edges, hierarchy: summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seeded;
    use crate::prototype::HierarchyLevel;

    fn dense_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    fn normalize_oracle(effective: &Tensor) -> Tensor {
        let n = effective.shape()[0];
        let mut hat = effective.clone();
        for i in 0..n {
            hat.data_mut()[i * n + i] += 1.0;
        }
        let mut d_inv_sqrt = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let degree: f64 = hat.row(i).iter().sum();
            d_inv_sqrt.data_mut()[i * n + i] = 1.0 / degree.sqrt();
        }
        dense_oracle(&dense_oracle(&d_inv_sqrt, &hat), &d_inv_sqrt)
    }

    fn random_setup(seed: u64, n: usize, f: usize) -> (Tape, Var, BoundAttention) {
        let mut rng = seeded(seed);
        let params = AttentionParams::init(f, 4, n, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(uniform(&[n, f], 1.0, &mut rng));
        (tape, x, bound)
    }

    #[test]
    fn uniform_attention_with_identity_values() {
        let n = 3;
        let mut tape = Tape::new();
        let zero_qk = DenseParams::zeros(2, n).bind(&mut tape);
        let value = DenseParams { weight: Tensor::eye(n), bias: Tensor::zeros(&[n]) }.bind(&mut tape);
        let params = BoundAttention { query: zero_qk, key: zero_qk, value };
        let x = tape.leaf(Tensor::eye(n));
        let adj = attention_adjacency(&mut tape, x, &params, AdjacencyMode::Output).unwrap();
        for v in tape.value(adj.raw.unwrap()).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(tape.value(adj.effective), tape.value(adj.raw.unwrap()));
        let oracle = normalize_oracle(tape.value(adj.effective));
        for (a, b) in tape.value(adj.normalized).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_values_leave_self_loops_only() {
        let mut rng = seeded(1);
        let mut params = AttentionParams::init(5, 3, 4, &mut rng);
        params.value = DenseParams::zeros(4, 5);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(uniform(&[4, 5], 1.0, &mut rng));
        let adj = attention_adjacency(&mut tape, x, &bound, AdjacencyMode::Output).unwrap();
        assert_eq!(tape.value(adj.effective), &Tensor::zeros(&[4, 4]));
        assert_eq!(tape.value(adj.normalized), &Tensor::eye(4));
    }

    #[test]
    fn identity_mode_has_no_edges() {
        let (mut tape, x, bound) = random_setup(2, 4, 6);
        let adj = attention_adjacency(&mut tape, x, &bound, AdjacencyMode::Identity).unwrap();
        assert!(adj.raw.is_none());
        assert_eq!(tape.value(adj.normalized), &Tensor::eye(4));
    }

    #[test]
    fn random_adjacency_invariants() {
        for seed in 0..20 {
            for mode in [AdjacencyMode::Output, AdjacencyMode::Scores] {
                let (mut tape, x, bound) = random_setup(seed, 5, 7);
                let adj = attention_adjacency(&mut tape, x, &bound, mode).unwrap();
                let scores = tape.value(adj.scores.unwrap());
                for i in 0..5 {
                    assert!((scores.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                let eff = tape.value(adj.effective);
                for i in 0..5 {
                    for j in 0..5 {
                        assert!(eff.at(&[i, j]) >= 0.0);
                        assert_eq!(eff.at(&[i, j]), eff.at(&[j, i]));
                    }
                }
                let oracle = normalize_oracle(eff);
                for (a, b) in tape.value(adj.normalized).data().iter().zip(oracle.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gcn_layer_matches_oracle() {
        let mut rng = seeded(9);
        let mut tape = Tape::new();
        let a = uniform(&[6, 6], 1.0, &mut rng);
        let x = uniform(&[6, 4], 1.0, &mut rng);
        let theta = uniform(&[4, 3], 1.0, &mut rng);
        let (av, xv, tv) = (tape.leaf(a.clone()), tape.leaf(x.clone()), tape.leaf(theta.clone()));
        let y = gcn_layer(&mut tape, xv, av, tv).unwrap();
        let oracle = dense_oracle(&dense_oracle(&a, &x), &theta).map(|v| v.max(0.0));
        for (p, q) in tape.value(y).data().iter().zip(oracle.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_adjacency_is_per_node_dense() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![-3.0, 4.0]]).unwrap());
        let eye = tape.constant(Tensor::eye(2));
        let y = gcn_layer(&mut tape, x, eye, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn zero_second_layer_gives_zero_output() {
        let mut rng = seeded(4);
        let mut params = GcnParams::init(5, 4, 3, &mut rng);
        params.theta2 = Tensor::zeros(&[4, 3]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(uniform(&[3, 5], 1.0, &mut rng));
        let adj = tape.constant(Tensor::eye(3));
        let fg = graph_encode(&mut tape, x, adj, &bound).unwrap();
        assert_eq!(tape.value(fg), &Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn single_node_is_rejected() {
        let (mut tape, _, bound) = random_setup(0, 2, 3);
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(attention_adjacency(&mut tape, x, &bound, AdjacencyMode::Output).is_err());
    }

    fn two_node_hierarchy() -> PrototypeHierarchy {
        PrototypeHierarchy {
            levels: Vec::from([HierarchyLevel {
                centers: Tensor::eye(2),
                assignments: Vec::from([0, 1]),
                parents: Vec::new(),
                phi: Vec::from([1.0, 1.0]),
            }]),
        }
    }

    #[test]
    fn export_lists_each_edge_once() {
        let eff = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let fh = Tensor::new(Vec::from([2, 1, 1, 2]), Vec::from([0.0, 2.0, 1.0, 1.0])).unwrap();
        let doc = export_graph(&eff, &two_node_hierarchy(), &fh, 0.0).unwrap();
        assert_eq!(doc.edges, [GraphEdge { i: 0, j: 1, weight: 0.5 }]);
        assert_eq!(doc.nodes.len(), 2);
        assert_eq!(doc.nodes[0].centroid, [0.0, 0.0, 1.0]);
        assert_eq!(doc.nodes[1].mean_activation, 1.0);

        let empty = export_graph(&Tensor::zeros(&[2, 2]), &two_node_hierarchy(), &fh, 0.0).unwrap();
        assert!(empty.edges.is_empty());
    }
}
