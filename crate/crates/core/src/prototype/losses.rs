use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Concentration of one cluster:
/// `φ = Σ_u ‖u − γ‖₂ / (|K| · ln(|K| + α))`.
pub fn concentration_phi(members: &[&[f64]], center: &[f64], alpha: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::EmptyCluster { cluster: 0 });
    }
    let spread: f64 = members
        .iter()
        .map(|u| math::sqrt(u.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum()))
        .sum();
    let count = members.len() as f64;
    Ok(spread / (count * math::ln(count + alpha)))
}

/// `[k, m]` matrix whose row `n` averages the items assigned to cluster `n`.
pub fn membership_matrix(assignments: &[usize], k: usize) -> Result<Tensor> {
    let m = assignments.len();
    let mut counts = vec![0usize; k];
    for &a in assignments {
        if a >= k {
            return Err(Error::Invalid(format!("assignment {a} out of range for {k} clusters")));
        }
        counts[a] += 1;
    }
    if let Some(cluster) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCluster { cluster });
    }
    let mut data = vec![0.0; k * m];
    for (i, &a) in assignments.iter().enumerate() {
        data[a * m + i] = 1.0 / counts[a] as f64;
    }
    Tensor::new(vec![k, m], data)
}

/// `F_h[n]` is the mean of the `F_b` channels assigned to prototype `n`.
pub fn cluster_features(tape: &mut Tape, features: Var, assignments: &[usize], k: usize) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 4 || shape[0] != assignments.len() {
        return Err(Error::shape(
            "cluster_features",
            format!("{} assignments for features {shape:?}", assignments.len()),
        ));
    }
    let vol = shape[1] * shape[2] * shape[3];
    let averaging = tape.constant(membership_matrix(assignments, k)?);
    let flat = tape.reshape(features, &[shape[0], vol])?;
    let pooled = tape.matmul(averaging, flat)?;
    tape.reshape(pooled, &[k, shape[1], shape[2], shape[3]])
}

/// One level of the node loss.
#[derive(Clone, Debug)]
pub struct NodeLevel {
    /// `[m, E]` elements: channel embeddings at level 0, lower-level prototypes above.
    pub elements: Var,
    /// `[N, E]` cluster centers of this level.
    pub centers: Var,
    /// Cluster of every element.
    pub assignments: Vec<usize>,
    /// Concentration of every cluster; must be positive.
    pub phi: Vec<f64>,
}

/// One level of the edge loss.
#[derive(Clone, Debug)]
pub struct EdgeLevel {
    /// `[N, E]` prototypes of this level.
    pub prototypes: Var,
    /// `[P, E]` prototypes of the level above.
    pub parents: Var,
    /// Parent of every prototype.
    pub parent_of: Vec<usize>,
}

/// Row-wise dot products of two equally shaped matrices.
fn row_dots(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    tape.sum_axes(prod, &[1])
}

/// Node loss over the given levels:
///
/// `−(1/L) Σ_l Σ_n Σ_{u∈K_n} log[ exp(u·γ_n/φ_n) / Σ_{i≠n} exp(u·γ_i/φ_n) ]`.
///
/// The denominator leaves the element's own center out, so single terms can be
/// negative. `num_layers` is `L`.
pub fn loss_node(tape: &mut Tape, levels: &[NodeLevel], num_layers: usize) -> Result<Var> {
    if levels.is_empty() || num_layers == 0 {
        return Err(Error::Invalid("loss_node needs at least one level".into()));
    }
    let mut total: Option<Var> = None;
    for (l, level) in levels.iter().enumerate() {
        let (m, n) = (tape.value(level.elements).shape()[0], tape.value(level.centers).shape()[0]);
        if n < 2 {
            return Err(Error::Invalid(format!("loss_node: level {l} has a single cluster")));
        }
        if level.assignments.len() != m || level.phi.len() != n {
            return Err(Error::shape(
                "loss_node",
                format!(
                    "level {l}: {m} elements, {} assignments, {n} centers, {} concentrations",
                    level.assignments.len(),
                    level.phi.len()
                ),
            ));
        }
        if let Some(bad) = level.phi.iter().position(|&p| !(p > 0.0)) {
            return Err(Error::Invalid(format!("loss_node: level {l} cluster {bad} has non-positive concentration")));
        }
        let inv_phi: Vec<f64> = level.assignments.iter().map(|&a| 1.0 / level.phi[a]).collect();

        let own = tape.select_rows(level.centers, &level.assignments)?;
        let dots = row_dots(tape, level.elements, own)?;
        let row_scale = tape.constant(Tensor::from_vec(inv_phi.clone()));
        let positive = tape.mul(dots, row_scale)?;

        let centers_t = tape.transpose(level.centers)?;
        let scores = tape.matmul(level.elements, centers_t)?;
        let scale_data = inv_phi.iter().flat_map(|&s| core::iter::repeat_n(s, n)).collect();
        let scale = tape.constant(Tensor::new(vec![m, n], scale_data)?);
        let logits = tape.mul(scores, scale)?;

        let ratios = tape.exclusive_log_ratio(positive, logits, &level.assignments)?;
        let level_sum = tape.sum(ratios)?;
        total = Some(match total {
            Some(t) => tape.add(t, level_sum)?,
            None => level_sum,
        });
    }
    tape.scale(total.expect("non-empty"), -1.0 / num_layers as f64)
}

/// Edge loss over the levels that have parents:
///
/// `−(1/L) Σ_l Σ_n log[ exp(γ_n·Parent(γ_n)/τ) / Σ_{i≠n} exp(γ_n·γ_i/τ) ]`.
pub fn loss_edge(tape: &mut Tape, levels: &[EdgeLevel], num_layers: usize, tau: f64) -> Result<Var> {
    if levels.is_empty() || num_layers == 0 {
        return Err(Error::Invalid("loss_edge needs at least one level with parents".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("loss_edge: temperature must be positive, got {tau}")));
    }
    let mut total: Option<Var> = None;
    for (l, level) in levels.iter().enumerate() {
        let n = tape.value(level.prototypes).shape()[0];
        let p = tape.value(level.parents).shape()[0];
        if n < 2 {
            return Err(Error::Invalid(format!("loss_edge: level {l} has a single prototype")));
        }
        if level.parent_of.len() != n {
            return Err(Error::Invalid(format!(
                "loss_edge: level {l} has {n} prototypes but {} parent links",
                level.parent_of.len()
            )));
        }
        if let Some(&bad) = level.parent_of.iter().find(|&&q| q >= p) {
            return Err(Error::Invalid(format!("loss_edge: level {l} links to missing parent {bad}")));
        }
        let parent_rows = tape.select_rows(level.parents, &level.parent_of)?;
        let dots = row_dots(tape, level.prototypes, parent_rows)?;
        let positive = tape.scale(dots, 1.0 / tau)?;

        let proto_t = tape.transpose(level.prototypes)?;
        let gram = tape.matmul(level.prototypes, proto_t)?;
        let logits = tape.scale(gram, 1.0 / tau)?;
        let own: Vec<usize> = (0..n).collect();
        let ratios = tape.exclusive_log_ratio(positive, logits, &own)?;
        let level_sum = tape.sum(ratios)?;
        total = Some(match total {
            Some(t) => tape.add(t, level_sum)?,
            None => level_sum,
        });
    }
    tape.scale(total.expect("non-empty"), -1.0 / num_layers as f64)
}
