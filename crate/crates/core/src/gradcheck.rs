//! Finite-difference verification of backward rules.
//!
//! The numerical derivative is a Richardson-extrapolated central difference,
//! `(4·D(h/2) − D(h)) / 3` with `D(h) = (f(x+h) − f(x−h)) / 2h`, accurate to
//! `O(h⁴)`. An entry whose perturbed evaluations take a different branch of a
//! piecewise-smooth op (ReLU side, norm floor) than the unperturbed one lies
//! within `h` of a kink; it is retried with a smaller step and skipped if the
//! branch still changes.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::config::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{attention_adjacency, gcn_layer, AdjacencyMode, AttentionParams, GraphConfig};
use crate::layers::{seeded, uniform, Parameters, Rng64};
use crate::model::{model_forward, total_loss, ModelParams, PrototypeLossSettings, StepConstants};
use crate::ops::Conv3dSpec;
use crate::prototype::{
    build_hierarchy, loss_edge, loss_node, project_embeddings, EdgeLevel, HierarchyOptions, NodeLevel,
    ProjectionConfig,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Smallest denominator of the relative error.
    pub floor: f64,
    /// Check this many randomly chosen entries instead of all of them.
    pub sample: Option<usize>,
    /// Step reductions tried before an entry is skipped as a kink.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-4, sample: None, kink_retries: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// A scalar function of `inputs`. It records the computation on the tape and
/// returns the loss together with the leaf holding each input.
pub type Objective<'a> = dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)> + 'a;

fn evaluate(f: &Objective<'_>, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let (loss, _) = f(&mut tape, inputs)?;
    Ok((tape.value(loss).item(), tape.branch_signature()))
}

/// Compares the tape's gradient of `f` with finite differences at `inputs`.
pub fn grad_check(
    f: &Objective<'_>,
    inputs: &[Tensor],
    options: &GradCheckOptions,
    rng: &mut Rng64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let (loss, leaves) = f(&mut tape, inputs)?;
    if leaves.len() != inputs.len() {
        return Err(Error::Invalid(format!("objective returned {} leaves for {} inputs", leaves.len(), inputs.len())));
    }
    let signature = tape.branch_signature();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut entries: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    if let Some(n) = options.sample {
        if n < entries.len() {
            for k in 0..n {
                let pick = rng.random_range(k..entries.len());
                entries.swap(k, pick);
            }
            entries.truncate(n);
        }
    }

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, j) in entries {
        let x = inputs[i].data()[j];
        let mut step = options.step;
        let mut numeric = None;
        for _ in 0..=options.kink_retries {
            let mut values = [0.0; 4];
            let mut smooth = true;
            for (slot, delta) in [step, -step, step / 2.0, -step / 2.0].into_iter().enumerate() {
                work[i].data_mut()[j] = x + delta;
                let (v, sig) = evaluate(f, &work)?;
                values[slot] = v;
                smooth &= sig == signature;
            }
            work[i].data_mut()[j] = x;
            if smooth {
                let coarse = (values[0] - values[1]) / (2.0 * step);
                let fine = (values[2] - values[3]) / step;
                numeric = Some((4.0 * fine - coarse) / 3.0);
                break;
            }
            step /= 100.0;
        }
        let Some(numeric) = numeric else {
            report.skipped_kinks += 1;
            continue;
        };
        let err = relative_error(analytic[i].data()[j], numeric, options.floor);
        report.checked += 1;
        if err > report.max_error || report.worst.is_none() {
            report.max_error = report.max_error.max(err);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}

/// One registered operation of the suite.
pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    /// Runs the check for one seed.
    pub run: Box<dyn Fn(u64) -> Result<GradCheckReport>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpSummary {
    pub name: String,
    pub tolerance: f64,
    pub seeds: usize,
    pub worst: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance && self.checked > 0
    }
}

/// Runs every check on seeds `0..seeds`.
pub fn run_suite(checks: &[OpCheck], seeds: usize) -> Result<Vec<OpSummary>> {
    checks
        .iter()
        .map(|check| {
            let mut summary = OpSummary {
                name: check.name.into(),
                tolerance: check.tolerance,
                seeds,
                worst: 0.0,
                checked: 0,
                skipped_kinks: 0,
            };
            for seed in 0..seeds as u64 {
                let r = (check.run)(seed)?;
                summary.worst = summary.worst.max(r.max_error);
                summary.checked += r.checked;
                summary.skipped_kinks += r.skipped_kinks;
            }
            Ok(summary)
        })
        .collect()
}

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// entry receives a distinct upstream gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = tape.constant(uniform(&shape, 1.0, &mut rng));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone())).collect()
}

fn check(seed: u64, inputs: Vec<Tensor>, sample: Option<usize>, f: &Objective<'_>) -> Result<GradCheckReport> {
    let options = GradCheckOptions { sample, ..GradCheckOptions::default() };
    grad_check(f, &inputs, &options, &mut seeded(seed))
}

/// Threshold for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Threshold for the composite model loss.
pub const MODEL_TOLERANCE: f64 = 1e-4;

fn conv3d_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    // Cycle through the dense, strided and depthwise code paths.
    let (c_in, c_out, kernel, spec) = match seed % 3 {
        0 => (2, 3, 3, Conv3dSpec { stride: 1, padding: 1, groups: 1 }),
        1 => (2, 2, 3, Conv3dSpec { stride: 2, padding: 1, groups: 1 }),
        _ => (3, 3, 3, Conv3dSpec { stride: 1, padding: 1, groups: 3 }),
    };
    let inputs = vec![
        uniform(&[c_in, 4, 5, 4], 1.0, &mut rng),
        uniform(&[c_out, c_in / spec.groups, kernel, kernel, kernel], 0.5, &mut rng),
        uniform(&[c_out], 0.5, &mut rng),
    ];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let y = tape.conv3d(v[0], v[1], v[2], spec)?;
        Ok((probe(tape, y, seed)?, v))
    })
}

fn dense_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let inputs = vec![uniform(&[5], 1.0, &mut rng), uniform(&[3, 5], 1.0, &mut rng), uniform(&[3], 1.0, &mut rng)];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let y = tape.dense(v[0], v[1], v[2])?;
        Ok((probe(tape, y, seed)?, v))
    })
}

fn softmax_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let inputs = vec![uniform(&[3, 5], 3.0, &mut rng)];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let y = tape.softmax(v[0], (seed % 2) as usize)?;
        Ok((probe(tape, y, seed)?, v))
    })
}

fn cross_entropy_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let classes = 2 + (seed % 3) as usize;
    let label = rng.random_range(0..classes);
    let inputs = vec![uniform(&[classes], 4.0, &mut rng)];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        Ok((tape.cross_entropy(v[0], label)?, v))
    })
}

fn unit_rows(rows: usize, dim: usize, rng: &mut Rng64) -> Tensor {
    let mut t = uniform(&[rows, dim], 1.0, rng);
    for r in t.data_mut().chunks_mut(dim) {
        let norm = crate::math::sqrt(r.iter().map(|v| v * v).sum());
        r.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// Assignment of `m` items to `k` clusters with none empty.
fn cover(m: usize, k: usize, rng: &mut Rng64) -> Vec<usize> {
    let mut a: Vec<usize> = (0..m).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..m).rev() {
        a.swap(i, rng.random_range(0..=i));
    }
    a
}

fn loss_node_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let dim = 4;
    let (m0, k0, k1) = (6, 3, 2);
    let a0 = cover(m0, k0, &mut rng);
    let a1 = cover(k0, k1, &mut rng);
    let c0 = unit_rows(k0, dim, &mut rng);
    let c1 = unit_rows(k1, dim, &mut rng);
    let phi0: Vec<f64> = (0..k0).map(|_| rng.random_range(0.2..1.5)).collect();
    let phi1: Vec<f64> = (0..k1).map(|_| rng.random_range(0.2..1.5)).collect();
    let inputs = vec![unit_rows(m0, dim, &mut rng), unit_rows(k0, dim, &mut rng)];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let levels = [
            NodeLevel { elements: v[0], centers: tape.constant(c0.clone()), assignments: a0.clone(), phi: phi0.clone() },
            NodeLevel { elements: v[1], centers: tape.constant(c1.clone()), assignments: a1.clone(), phi: phi1.clone() },
        ];
        Ok((loss_node(tape, &levels, 2)?, v))
    })
}

fn loss_edge_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let dim = 4;
    let (k0, k1, k2) = (4, 2, 2);
    let p0 = cover(k0, k1, &mut rng);
    let p1 = cover(k1, k2, &mut rng);
    let inputs = vec![unit_rows(k0, dim, &mut rng), unit_rows(k1, dim, &mut rng), unit_rows(k2, dim, &mut rng)];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let levels = [
            EdgeLevel { prototypes: v[0], parents: v[1], parent_of: p0.clone() },
            EdgeLevel { prototypes: v[1], parents: v[2], parent_of: p1.clone() },
        ];
        Ok((loss_edge(tape, &levels, 3, 0.2)?, v))
    })
}

fn attention_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let (n, features, d_k) = (4, 6, 3);
    let mode = if seed.is_multiple_of(2) { AdjacencyMode::Output } else { AdjacencyMode::Scores };
    let p = AttentionParams::init(features, d_k, n, &mut rng);
    let inputs = vec![
        uniform(&[n, features], 1.0, &mut rng),
        p.query.weight.clone(),
        p.query.bias.clone(),
        p.key.weight.clone(),
        p.key.bias.clone(),
        p.value.weight.clone(),
        p.value.bias.clone(),
    ];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let bound = crate::graph::BoundAttention {
            query: crate::layers::BoundDense { weight: v[1], bias: v[2] },
            key: crate::layers::BoundDense { weight: v[3], bias: v[4] },
            value: crate::layers::BoundDense { weight: v[5], bias: v[6] },
        };
        let adj = attention_adjacency(tape, v[0], &bound, mode)?;
        Ok((probe(tape, adj.normalized, seed)?, v))
    })
}

fn gcn_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let n = 4;
    let mut a = uniform(&[n, n], 1.0, &mut rng);
    for i in 0..n {
        for j in 0..i {
            let v = a.at(&[j, i]);
            a.data_mut()[i * n + j] = v;
        }
    }
    let inputs = vec![uniform(&[n, 5], 1.0, &mut rng), a, uniform(&[5, 3], 1.0, &mut rng)];
    check(seed, inputs, None, &move |tape, xs| {
        let v = leaves(tape, xs);
        let y = gcn_layer(tape, v[0], v[1], v[2])?;
        Ok((probe(tape, y, seed)?, v))
    })
}

/// Model used by the composite check: 8³ volumes, 8 channels, a 4/2 hierarchy.
pub fn tiny_model() -> (ModelConfig, Vec<usize>) {
    let config = ModelConfig {
        input_dims: [8, 8, 8],
        backbone: BackboneConfig { channels: 8, depth: 1, kernel: 3, ..BackboneConfig::default() },
        projection: ProjectionConfig { hidden: 4, dim: 4, ..ProjectionConfig::default() },
        graph: GraphConfig { d_k: 4, hidden: 4, out: 2, ..GraphConfig::default() },
    };
    (config, vec![4, 2])
}

/// Entries sampled per seed in the composite check.
pub const MODEL_SAMPLE: usize = 150;

fn model_check(seed: u64) -> Result<GradCheckReport> {
    let (config, counts) = tiny_model();
    let mut rng = seeded(seed);
    let params = ModelParams::init(&config, counts[0], &mut rng)?;
    let volume = uniform(&[1, 8, 8, 8], 1.0, &mut rng);
    let label = rng.random_range(0..2);
    let points = uniform(&[config.backbone.channels, 6], 1.0, &mut rng);
    let hierarchy = build_hierarchy(&points, &counts, &HierarchyOptions::default())?;
    let settings = PrototypeLossSettings { alpha: 10.0, tau: 0.2, phi_floor: 0.2 };
    let weights = LossWeights::default();

    // Centers and concentrations are step constants; fix them at the base point.
    let constants = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let v = tape.constant(volume.clone());
        let fwd = model_forward(&mut tape, &bound, &config, v, hierarchy.channel_assignments())?;
        let (emb, _) = project_embeddings(&mut tape, fwd.fb, &bound.projection, &config.projection)?;
        StepConstants::from_embeddings(tape.value(emb), &hierarchy, &settings)?
    };

    let template = params.clone();
    let inputs: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    check(seed, inputs, Some(MODEL_SAMPLE), &move |tape, xs| {
        let mut p = template.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(xs) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let bound = p.bind(tape);
        let v = tape.constant(volume.clone());
        let fwd = model_forward(tape, &bound, &config, v, hierarchy.channel_assignments())?;
        let (loss, _) =
            total_loss(tape, &bound, &config, &fwd, label, &hierarchy, &weights, &settings, Some(&constants))?;
        Ok((loss, bound.vars()))
    })
}

/// Every registered operation.
pub fn suite() -> Vec<OpCheck> {
    let op = |name, run: fn(u64) -> Result<GradCheckReport>| OpCheck { name, tolerance: OP_TOLERANCE, run: Box::new(run) };
    vec![
        op("conv3d", conv3d_check),
        op("dense", dense_check),
        op("softmax", softmax_check),
        op("cross_entropy", cross_entropy_check),
        op("loss_node", loss_node_check),
        op("loss_edge", loss_edge_check),
        op("attention_adjacency", attention_check),
        op("gcn_layer", gcn_check),
        OpCheck { name: "model_loss", tolerance: MODEL_TOLERANCE, run: Box::new(model_check) },
    ]
}

/// A deliberately wrong op, `y = 2x` with backward `2.02·g`, for checking that
/// the harness notices a broken rule.
pub fn faulty_check() -> OpCheck {
    OpCheck {
        name: "faulty_double",
        tolerance: OP_TOLERANCE,
        run: Box::new(|seed| {
            let inputs = vec![uniform(&[6], 1.0, &mut seeded(seed))];
            check(seed, inputs, None, &move |tape, xs| {
                let v = leaves(tape, xs);
                let value = xs[0].map(|x| 2.0 * x);
                let y = tape.record(
                    "faulty_double",
                    &[v[0]],
                    value,
                    Box::new(|ctx| vec![Some(ctx.grad.map(|g| 2.02 * g))]),
                )?;
                Ok((probe(tape, y, seed)?, v))
            })
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-4), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-4) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn exact_quadratic_passes() {
        let f: &Objective<'_> = &|tape, xs| {
            let v = leaves(tape, xs);
            let sq = tape.mul(v[0], v[0])?;
            Ok((tape.sum(sq)?, v))
        };
        let r = grad_check(f, &[Tensor::from_vec(vec![0.3, -1.2, 2.0])], &GradCheckOptions::default(), &mut seeded(0))
            .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_error < 1e-9, "{r:?}");
    }

    #[test]
    fn kink_is_skipped_not_failed() {
        let f: &Objective<'_> = &|tape, xs| {
            let v = leaves(tape, xs);
            let r = tape.relu(v[0])?;
            Ok((tape.sum(r)?, v))
        };
        let r = grad_check(f, &[Tensor::from_vec(vec![1e-6, 0.5])], &GradCheckOptions::default(), &mut seeded(0))
            .unwrap();
        assert_eq!(r.checked + r.skipped_kinks, 2);
        assert!(r.max_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let s = run_suite(&[faulty_check()], 3).unwrap();
        assert!(!s[0].passed());
        assert!((s[0].worst - 0.01 / 1.01 * 1.0).abs() < 1e-3, "{s:?}");
    }

    #[test]
    fn sampling_limits_entries() {
        let f: &Objective<'_> = &|tape, xs| {
            let v = leaves(tape, xs);
            Ok((tape.sum(v[0])?, v))
        };
        let options = GradCheckOptions { sample: Some(4), ..GradCheckOptions::default() };
        let r = grad_check(f, &[Tensor::zeros(&[10])], &options, &mut seeded(1)).unwrap();
        assert_eq!(r.checked, 4);
    }
}
