//! The assembled network and its joint objective.
//!
//! `volume → F_b` (backbone), then two heads:
//! an auxiliary classifier over channel-pooled `F_b`, and the main classifier
//! over `concat(flatten F_se, flatten F_g)` where `F_se` squeezes the channels
//! and `F_g` encodes the prototype graph built from the cluster means `F_h`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, channel_squeeze, BackboneParams, BoundBackbone};
use crate::config::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{
    attention_adjacency, graph_encode, node_features, AdjacencyMatrix, AttentionParams, BoundAttention, BoundGcn,
    GcnParams,
};
use crate::layers::{push_pair, BoundDense, DenseParams, Parameters, Rng64};
use crate::prototype::{
    cluster_features, concentration_phi, loss_edge, loss_node, project_embeddings, BoundProjection, EdgeLevel,
    NodeLevel, ProjectionParams, PrototypeHierarchy,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub projection: ProjectionParams,
    pub aux_head: DenseParams,
    pub attention: AttentionParams,
    pub gcn: GcnParams,
    pub classifier: DenseParams,
}

impl ModelParams {
    /// Fresh parameters for a graph of `nodes` prototypes.
    pub fn init(config: &ModelConfig, nodes: usize, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let f = config.feature_len()?;
        let g = &config.graph;
        Ok(Self {
            backbone: BackboneParams::init(&config.backbone, rng),
            projection: ProjectionParams::init(&config.projection, f, rng),
            aux_head: DenseParams::init(2, config.backbone.channels, rng),
            attention: AttentionParams::init(f, g.d_k, nodes, rng),
            gcn: GcnParams::init(f, g.hidden, g.out, rng),
            classifier: DenseParams::init(2, f + nodes * g.out, rng),
        })
    }

    /// Number of graph nodes these parameters were built for.
    pub fn nodes(&self) -> usize {
        self.attention.value.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(tape),
            projection: self.projection.bind(tape),
            aux_head: self.aux_head.bind(tape),
            attention: self.attention.bind(tape),
            gcn: self.gcn.bind(tape),
            classifier: self.classifier.bind(tape),
        }
    }
}

impl Parameters for ModelParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .backbone
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (format!("backbone.{name}"), t))
            .collect();
        out.extend(self.projection.named_tensors());
        push_pair(&mut out, "aux_head", &self.aux_head.weight, &self.aux_head.bias);
        out.extend(self.attention.named_tensors());
        out.extend(self.gcn.named_tensors());
        push_pair(&mut out, "classifier", &self.classifier.weight, &self.classifier.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.tensors_mut();
        out.extend(self.projection.tensors_mut());
        out.extend([&mut self.aux_head.weight, &mut self.aux_head.bias]);
        out.extend(self.attention.tensors_mut());
        out.extend(self.gcn.tensors_mut());
        out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        out
    }
}

/// Model parameters on a tape, in [`Parameters`] order.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub projection: BoundProjection,
    pub aux_head: BoundDense,
    pub attention: BoundAttention,
    pub gcn: BoundGcn,
    pub classifier: BoundDense,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.backbone.vars();
        out.extend(self.projection.vars());
        out.extend(self.aux_head.vars());
        out.extend(self.attention.vars());
        out.extend([self.gcn.theta1, self.gcn.theta2]);
        out.extend(self.classifier.vars());
        out
    }
}

/// Backbone features and the auxiliary head's logits.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub fb: Var,
    pub aux_logits: Var,
}

/// Every intermediate of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub fb: Var,
    pub aux_logits: Var,
    pub fse: Var,
    pub fh: Var,
    pub adjacency: AdjacencyMatrix,
    pub fg: Var,
    pub logits: Var,
}

fn check_input(tape: &Tape, volume: Var, config: &ModelConfig) -> Result<()> {
    let [d, h, w] = config.input_dims;
    let expected = [config.backbone.in_channels, d, h, w];
    if tape.value(volume).shape() != expected {
        return Err(Error::shape(
            "model_forward",
            format!("volume shape {:?} does not match configured {expected:?}", tape.value(volume).shape()),
        ));
    }
    Ok(())
}

/// Backbone and auxiliary head only.
pub fn backbone_pass(tape: &mut Tape, params: &BoundModel, config: &ModelConfig, volume: Var) -> Result<BackboneOutput> {
    check_input(tape, volume, config)?;
    let fb = backbone_forward(tape, volume, &params.backbone, &config.backbone)?;
    let pooled = tape.mean(fb, &[1, 2, 3])?;
    let aux_logits = params.aux_head.apply(tape, pooled)?;
    Ok(BackboneOutput { fb, aux_logits })
}

/// Full forward pass; `assignments` maps every channel to its level-0 prototype.
pub fn model_forward(
    tape: &mut Tape,
    params: &BoundModel,
    config: &ModelConfig,
    volume: Var,
    assignments: &[usize],
) -> Result<Forward> {
    let BackboneOutput { fb, aux_logits } = backbone_pass(tape, params, config, volume)?;
    let nodes = tape.value(params.attention.value.weight).shape()[0];
    let fse = channel_squeeze(tape, fb, &params.backbone)?;
    let fh = cluster_features(tape, fb, assignments, nodes)?;
    let x = node_features(tape, fh)?;
    let adjacency = attention_adjacency(tape, x, &params.attention, config.graph.adjacency)?;
    let fg = graph_encode(tape, x, adjacency.normalized, &params.gcn)?;
    let fse_flat = node_features(tape, fse)?;
    let fse_flat = tape.reshape(fse_flat, &[tape.value(fse).numel()])?;
    let fg_flat = tape.reshape(fg, &[tape.value(fg).numel()])?;
    let joined = tape.concat(fse_flat, fg_flat, 0)?;
    let logits = params.classifier.apply(tape, joined)?;
    Ok(Forward { fb, aux_logits, fse, fh, adjacency, fg, logits })
}

/// Settings of the prototype losses.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeLossSettings {
    pub alpha: f64,
    pub tau: f64,
    pub phi_floor: f64,
}

/// Centers and concentrations held fixed during one step, per hierarchy level.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConstants {
    pub centers: Vec<Tensor>,
    pub phi: Vec<Vec<f64>>,
}

impl StepConstants {
    /// Cluster means and floored concentrations of the current (detached)
    /// channel embeddings `[C, E]`, level by level up the hierarchy.
    pub fn from_embeddings(
        embeddings: &Tensor,
        hierarchy: &PrototypeHierarchy,
        settings: &PrototypeLossSettings,
    ) -> Result<Self> {
        let mut centers = Vec::with_capacity(hierarchy.levels.len());
        let mut phi = Vec::with_capacity(hierarchy.levels.len());
        let mut elements = embeddings.clone();
        for level in &hierarchy.levels {
            let k = level.len();
            let averaging = crate::prototype::membership_matrix(&level.assignments, k)?;
            let (m, e) = (elements.shape()[0], elements.shape()[1]);
            let means = Tensor::new(
                alloc::vec![k, e],
                crate::ops::linalg_matmul(averaging.data(), elements.data(), k, m, e),
            )?;
            let level_phi = (0..k)
                .map(|n| {
                    let members: Vec<&[f64]> = level
                        .assignments
                        .iter()
                        .enumerate()
                        .filter(|&(_, &a)| a == n)
                        .map(|(i, _)| elements.row(i))
                        .collect();
                    concentration_phi(&members, means.row(n), settings.alpha).map(|p| p.max(settings.phi_floor))
                })
                .collect::<Result<Vec<f64>>>()?;
            centers.push(means.clone());
            phi.push(level_phi);
            elements = means;
        }
        Ok(Self { centers, phi })
    }
}

/// Node and edge losses for one volume's channel embeddings `[C, E]`.
///
/// Level `l` of the node loss uses as elements the channel embeddings (`l = 0`)
/// or the differentiable prototypes of level `l − 1`; its centers and
/// concentrations come from `constants`. The edge loss pulls each prototype
/// toward its parent for every level below the top. Both are divided by the
/// number of levels. Rows with `live[c] == false` are left out of level 0.
pub fn prototype_losses(
    tape: &mut Tape,
    embeddings: Var,
    live: &[bool],
    hierarchy: &PrototypeHierarchy,
    constants: &StepConstants,
    settings: &PrototypeLossSettings,
) -> Result<(Var, Var)> {
    let levels = hierarchy.levels.len();
    let mut node_levels = Vec::with_capacity(levels);
    let mut prototypes = Vec::with_capacity(levels);
    let mut elements = embeddings;
    for (l, level) in hierarchy.levels.iter().enumerate() {
        let averaging = tape.constant(crate::prototype::membership_matrix(&level.assignments, level.len())?);
        let (loss_elements, loss_assignments) = if l == 0 && live.iter().any(|ok| !ok) {
            let rows: Vec<usize> = (0..live.len()).filter(|&i| live[i]).collect();
            let assignments = rows.iter().map(|&i| level.assignments[i]).collect();
            (if rows.is_empty() { None } else { Some(tape.select_rows(elements, &rows)?) }, assignments)
        } else {
            (Some(elements), level.assignments.clone())
        };
        if let Some(loss_elements) = loss_elements {
            node_levels.push(NodeLevel {
                elements: loss_elements,
                centers: tape.constant(constants.centers[l].clone()),
                assignments: loss_assignments,
                phi: constants.phi[l].clone(),
            });
        }
        let proto = tape.matmul(averaging, elements)?;
        prototypes.push(proto);
        elements = proto;
    }
    let node = loss_node(tape, &node_levels, levels)?;
    let edge_levels: Vec<EdgeLevel> = (0..levels - 1)
        .map(|l| EdgeLevel {
            prototypes: prototypes[l],
            parents: prototypes[l + 1],
            parent_of: hierarchy.levels[l].parents.clone(),
        })
        .collect();
    let edge = loss_edge(tape, &edge_levels, levels, settings.tau)?;
    Ok((node, edge))
}

/// Values of the individual objective terms; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls1: f64,
    pub cls2: f64,
    pub node: f64,
    pub edge: f64,
    pub total: f64,
}

/// Weighted sum `w₁·L_cls1 + w₂·L_cls2 + w_n·L_node + w_e·L_edge` for one volume.
///
/// Terms with zero weight are not evaluated. `constants` overrides the
/// per-step centers and concentrations; when `None` they are computed from the
/// current embeddings.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    params: &BoundModel,
    config: &ModelConfig,
    forward: &Forward,
    label: usize,
    hierarchy: &PrototypeHierarchy,
    weights: &LossWeights,
    settings: &PrototypeLossSettings,
    constants: Option<&StepConstants>,
) -> Result<(Var, LossTerms)> {
    let mut terms = LossTerms::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();
    if weights.cls1 > 0.0 {
        let l = tape.cross_entropy(forward.aux_logits, label)?;
        terms.cls1 = tape.value(l).item();
        parts.push((l, weights.cls1));
    }
    if weights.cls2 > 0.0 {
        let l = tape.cross_entropy(forward.logits, label)?;
        terms.cls2 = tape.value(l).item();
        parts.push((l, weights.cls2));
    }
    if weights.node > 0.0 || weights.edge > 0.0 {
        let (emb, live) = project_embeddings(tape, forward.fb, &params.projection, &config.projection)?;
        let computed;
        let constants = match constants {
            Some(c) => c,
            None => {
                computed = StepConstants::from_embeddings(tape.value(emb), hierarchy, settings)?;
                &computed
            }
        };
        let (node, edge) = prototype_losses(tape, emb, &live, hierarchy, constants, settings)?;
        terms.node = tape.value(node).item();
        terms.edge = tape.value(edge).item();
        if weights.node > 0.0 {
            parts.push((node, weights.node));
        }
        if weights.edge > 0.0 {
            parts.push((edge, weights.edge));
        }
    }
    let total = weighted_sum(tape, &parts)?;
    terms.total = tape.value(total).item();
    Ok((total, terms))
}

pub(crate) fn weighted_sum(tape: &mut Tape, parts: &[(Var, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(v, w) in parts {
        let scaled = if w == 1.0 { v } else { tape.scale(v, w)? };
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| Error::Invalid("every loss weight is zero".into()))
}

/// Softmax probability of class 1 from a pair of logits.
pub fn positive_probability(logits: &Tensor) -> f64 {
    let mut p = [0.0; 2];
    crate::ops::softmax_values(&logits.data()[..2], &mut p);
    p[1]
}
