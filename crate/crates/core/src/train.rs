//! Deterministic training loop.
//!
//! Epochs before `warmup_epochs` optimize only the auxiliary backbone loss.
//! The prototype hierarchy is built from the peak descriptors collected during
//! the previous epoch when the joint phase starts, and refreshed from fresh
//! descriptors every `refresh_period` epochs afterwards. Each batch averages
//! per-volume gradients before one SGD step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::{seeded, Parameters};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{
    backbone_pass, model_forward, positive_probability, total_loss, weighted_sum, LossTerms, ModelParams,
    PrototypeLossSettings,
};
use crate::optim::{sgd_step, SgdState};
use crate::prototype::{
    build_descriptor_table, build_hierarchy, peak_coordinates, refresh_due, refresh_hierarchy, HierarchyOptions,
    KMeansOptions, PrototypeHierarchy,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One labelled volume of shape `[1, D, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub volume: &'a Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// Summary of one epoch. Loss terms are means over the epoch's volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub losses: LossTerms,
    pub train_acc: f64,
    pub hierarchy_rebuilt: bool,
    pub val: Option<Metrics>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: SgdState,
    pub hierarchy: Option<PrototypeHierarchy>,
    /// Epoch at which the current hierarchy was built or last refreshed.
    pub hierarchy_epoch: Option<usize>,
    /// Peak coordinates per training volume from the last completed epoch.
    pub descriptors: Option<Vec<Vec<[f64; 3]>>>,
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub state: TrainState,
}

/// Loss terms, gradients, peak coordinates and correctness for one volume.
type VolumeStep = (LossTerms, Vec<Tensor>, Vec<[f64; 3]>, bool);

impl Trainer {
    /// Fresh run with parameters drawn from `config.seed`.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if config.nodes() > model.backbone.channels {
            return Err(Error::Invalid(format!(
                "{} level-0 prototypes need at least as many backbone channels, got {}",
                config.nodes(),
                model.backbone.channels
            )));
        }
        let params = ModelParams::init(&model, config.nodes(), &mut seeded(config.seed))?;
        let state = TrainState {
            params,
            optimizer: SgdState::default(),
            hierarchy: None,
            hierarchy_epoch: None,
            descriptors: None,
            next_epoch: 0,
            history: Vec::new(),
        };
        Ok(Self { model, config, state })
    }

    /// Continues from a saved state; the next epoch keeps its numbering.
    pub fn resume(model: ModelConfig, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if state.params.nodes() != config.nodes() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} graph nodes, configuration asks for {}",
                state.params.nodes(),
                config.nodes()
            )));
        }
        Ok(Self { model, config, state })
    }

    fn hierarchy_options(&self) -> HierarchyOptions {
        HierarchyOptions {
            kmeans: KMeansOptions {
                seed: self.config.seed,
                max_iter: self.config.kmeans_max_iter,
                ..KMeansOptions::default()
            },
            alpha: self.config.alpha,
        }
    }

    fn settings(&self) -> PrototypeLossSettings {
        PrototypeLossSettings {
            alpha: self.config.alpha,
            tau: self.config.tau,
            phi_floor: self.config.phi_floor,
        }
    }

    /// Peak coordinates of every volume's `F_b` under the current parameters.
    pub fn collect_descriptors(&self, data: &[Sample<'_>]) -> Result<Vec<Vec<[f64; 3]>>> {
        data.iter()
            .map(|s| {
                let mut tape = Tape::new();
                let bound = self.state.params.bind(&mut tape);
                let volume = tape.constant(s.volume.clone());
                let out = backbone_pass(&mut tape, &bound, &self.model, volume)?;
                peak_coordinates(tape.value(out.fb))
            })
            .collect()
    }

    fn rebuild_hierarchy(&mut self, data: &[Sample<'_>], epoch: usize) -> Result<()> {
        let descriptors = match self.state.descriptors.take() {
            Some(d) if d.len() == data.len() => d,
            _ => self.collect_descriptors(data)?,
        };
        let table = build_descriptor_table(&descriptors)?;
        let options = self.hierarchy_options();
        let hierarchy = match &self.state.hierarchy {
            Some(previous) => refresh_hierarchy(&table.descriptors, previous, &options)?,
            None => build_hierarchy(&table.descriptors, &self.config.hierarchy_counts, &options)?,
        };
        hierarchy.validate()?;
        self.state.hierarchy = Some(hierarchy);
        self.state.hierarchy_epoch = Some(epoch);
        self.state.descriptors = Some(descriptors);
        Ok(())
    }

    /// Builds the hierarchy from the current parameters if none exists yet.
    pub fn ensure_hierarchy(&mut self, data: &[Sample<'_>]) -> Result<&PrototypeHierarchy> {
        if self.state.hierarchy.is_none() {
            let epoch = self.state.next_epoch;
            self.rebuild_hierarchy(data, epoch)?;
        }
        Ok(self.state.hierarchy.as_ref().expect("just built"))
    }

    /// Trains one epoch and appends its record to the history.
    pub fn run_epoch(&mut self, data: &[Sample<'_>], val: Option<&[Sample<'_>]>) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let epoch = self.state.next_epoch;
        let phase = if epoch < self.config.warmup_epochs { Phase::Warmup } else { Phase::Joint };
        let mut rebuilt = false;
        if phase == Phase::Joint {
            let due = match self.state.hierarchy_epoch {
                None => true,
                Some(built) => refresh_due(epoch - built, self.config.refresh_period),
            };
            if due || self.state.hierarchy.is_none() {
                self.rebuild_hierarchy(data, epoch)?;
                rebuilt = true;
            }
        }

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = seeded(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let lr = self.config.lr_at(epoch);
        let mut descriptors: Vec<Vec<[f64; 3]>> = alloc::vec![Vec::new(); data.len()];
        let mut sums = LossTerms::default();
        let mut correct = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (terms, g, peaks, hit) = self.volume_step(data[i], phase)?;
                descriptors[i] = peaks;
                correct += usize::from(hit);
                sums.cls1 += terms.cls1;
                sums.cls2 += terms.cls2;
                sums.node += terms.node;
                sums.edge += terms.edge;
                sums.total += terms.total;
                match &mut grads {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    None => grads = Some(g),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = grads.expect("non-empty batch").into_iter().map(|g| g.map(|v| v * scale)).collect();
            let mut params = self.state.params.tensors_mut();
            sgd_step(
                &mut params,
                &grads,
                &mut self.state.optimizer,
                lr,
                self.config.momentum,
                self.config.weight_decay,
            )?;
        }
        let n = data.len() as f64;
        let losses = LossTerms {
            cls1: sums.cls1 / n,
            cls2: sums.cls2 / n,
            node: sums.node / n,
            edge: sums.edge / n,
            total: sums.total / n,
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        self.state.descriptors = Some(descriptors);
        self.state.next_epoch = epoch + 1;

        let val = match val {
            Some(v) if !v.is_empty() && self.state.hierarchy.is_some() => Some(self.evaluate(v)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            phase,
            lr,
            losses,
            train_acc: correct as f64 / n,
            hierarchy_rebuilt: rebuilt,
            val,
        };
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Loss terms, parameter gradients, peak coordinates and whether the
    /// prediction was right, for one volume.
    fn volume_step(&self, sample: Sample<'_>, phase: Phase) -> Result<VolumeStep> {
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape);
        let volume = tape.constant(sample.volume.clone());
        let (loss, terms, fb, logits) = match phase {
            Phase::Warmup => {
                let out = backbone_pass(&mut tape, &bound, &self.model, volume)?;
                let ce = tape.cross_entropy(out.aux_logits, sample.label)?;
                let weight = if self.config.loss_weights.cls1 > 0.0 { self.config.loss_weights.cls1 } else { 1.0 };
                let loss = weighted_sum(&mut tape, &[(ce, weight)])?;
                let cls1 = tape.value(ce).item();
                let terms = LossTerms { cls1, total: tape.value(loss).item(), ..LossTerms::default() };
                (loss, terms, out.fb, out.aux_logits)
            }
            Phase::Joint => {
                let hierarchy = self.state.hierarchy.as_ref().expect("built before the joint phase");
                let forward = model_forward(&mut tape, &bound, &self.model, volume, hierarchy.channel_assignments())?;
                let (loss, terms) = total_loss(
                    &mut tape,
                    &bound,
                    &self.model,
                    &forward,
                    sample.label,
                    hierarchy,
                    &self.config.loss_weights,
                    &self.settings(),
                    None,
                )?;
                (loss, terms, forward.fb, forward.logits)
            }
        };
        let peaks = peak_coordinates(tape.value(fb))?;
        let hit = (positive_probability(tape.value(logits)) >= 0.5) == (sample.label == 1);
        tape.backward(loss)?;
        let grads = bound.vars().into_iter().map(|v| tape.grad_or_zeros(v)).collect();
        Ok((terms, grads, peaks, hit))
    }

    /// Runs epochs until `config.epochs` have been completed, calling
    /// `on_epoch` after each one.
    pub fn fit(
        &mut self,
        data: &[Sample<'_>],
        val: Option<&[Sample<'_>]>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.state.next_epoch < self.config.epochs {
            let record = self.run_epoch(data, val)?;
            on_epoch(&record);
        }
        self.ensure_hierarchy(data)?;
        Ok(())
    }

    pub fn evaluate(&self, data: &[Sample<'_>]) -> Result<Metrics> {
        let hierarchy = self
            .state
            .hierarchy
            .as_ref()
            .ok_or_else(|| Error::Invalid("the model has no prototype hierarchy yet".into()))?;
        evaluate(&self.state.params, &self.model, hierarchy, data)
    }

    /// Loss weights in effect for the current phase, for reporting.
    pub fn active_weights(&self) -> LossWeights {
        if self.state.next_epoch < self.config.warmup_epochs {
            LossWeights { cls1: 1.0, cls2: 0.0, node: 0.0, edge: 0.0 }
        } else {
            self.config.loss_weights.clone()
        }
    }
}

/// Concrete values of a forward pass, for inspection and export.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues {
    pub logits: Tensor,
    pub aux_logits: Tensor,
    pub fh: Tensor,
    pub fse: Tensor,
    pub fg: Tensor,
    pub raw: Option<Tensor>,
    pub scores: Option<Tensor>,
    pub effective: Tensor,
    pub normalized: Tensor,
}

pub fn forward_values(
    params: &ModelParams,
    model: &ModelConfig,
    hierarchy: &PrototypeHierarchy,
    volume: &Tensor,
) -> Result<ForwardValues> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(volume.clone());
    let f = model_forward(&mut tape, &bound, model, v, hierarchy.channel_assignments())?;
    let get = |var| tape.value(var).clone();
    Ok(ForwardValues {
        logits: get(f.logits),
        aux_logits: get(f.aux_logits),
        fh: get(f.fh),
        fse: get(f.fse),
        fg: get(f.fg),
        raw: f.adjacency.raw.map(get),
        scores: f.adjacency.scores.map(get),
        effective: get(f.adjacency.effective),
        normalized: get(f.adjacency.normalized),
    })
}

/// Class-1 probability of every sample from the main classifier.
pub fn predict(
    params: &ModelParams,
    model: &ModelConfig,
    hierarchy: &PrototypeHierarchy,
    data: &[Sample<'_>],
) -> Result<Vec<f64>> {
    data.iter()
        .map(|s| forward_values(params, model, hierarchy, s.volume).map(|f| positive_probability(&f.logits)))
        .collect()
}

/// Metrics with threshold 0.5 on the class-1 probability.
pub fn evaluate(
    params: &ModelParams,
    model: &ModelConfig,
    hierarchy: &PrototypeHierarchy,
    data: &[Sample<'_>],
) -> Result<Metrics> {
    let scores = predict(params, model, hierarchy, data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    compute_metrics(&scores, &labels, 0.5)
}

/// Human-readable one-line summary of an epoch.
pub fn describe(record: &EpochRecord) -> String {
    let l = &record.losses;
    let mut line = format!(
        "epoch {:>3} {:<6} lr {:.0e} loss {:.4} (cls1 {:.4} cls2 {:.4} node {:.4} edge {:.4}) train acc {:.3}",
        record.epoch,
        match record.phase {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        },
        record.lr,
        l.total,
        l.cls1,
        l.cls2,
        l.node,
        l.edge,
        record.train_acc
    );
    if let Some(m) = &record.val {
        line.push_str(&format!(" | val acc {:.3} auc {:.3}", m.acc, m.auc));
    }
    line
}
