//! Model and training configuration. Every struct rejects unknown keys when
//! deserialized and fills omitted keys with the defaults below.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::math;
use crate::prototype::ProjectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input volume size `(D, H, W)`.
    pub input_dims: [usize; 3],
    pub backbone: BackboneConfig,
    pub projection: ProjectionConfig,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [16, 16, 16],
            backbone: BackboneConfig::default(),
            projection: ProjectionConfig::default(),
            graph: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.projection.validate()?;
        self.graph.validate()?;
        self.feature_dims().map(|_| ())
    }

    /// Spatial size of the backbone feature maps.
    pub fn feature_dims(&self) -> Result<[usize; 3]> {
        self.backbone.feature_dims(self.input_dims)
    }

    /// Length of one flattened feature map.
    pub fn feature_len(&self) -> Result<usize> {
        Ok(self.feature_dims()?.iter().product())
    }
}

/// Coefficients of the four terms of the joint objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls1: f64,
    pub cls2: f64,
    pub node: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls1: 1.0, cls2: 1.0, node: 1.0, edge: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Smoothing constant of the cluster concentration.
    pub alpha: f64,
    /// Temperature of the edge loss.
    pub tau: f64,
    pub hierarchy_counts: Vec<usize>,
    /// Epochs between hierarchy refreshes; `None` keeps the first hierarchy.
    pub refresh_period: Option<usize>,
    pub seed: u64,
    pub batch_size: usize,
    /// Epochs trained on the auxiliary backbone loss alone.
    pub warmup_epochs: usize,
    pub loss_weights: LossWeights,
    /// Lower bound applied to every concentration.
    pub phi_floor: f64,
    pub kmeans_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            base_lr: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 100,
            momentum: 0.9,
            weight_decay: 0.001,
            alpha: 10.0,
            tau: 0.2,
            hierarchy_counts: Vec::from([16, 8, 4]),
            refresh_period: Some(10),
            seed: 0,
            batch_size: 4,
            warmup_epochs: 20,
            loss_weights: LossWeights::default(),
            phi_floor: 0.2,
            kmeans_max_iter: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_lr, self.lr_decay_factor, self.alpha, self.tau, self.phi_floor];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid(format!(
                "learning rate, decay factor, alpha, tau and phi floor must be positive: {positive:?}"
            )));
        }
        if self.epochs == 0 || self.lr_decay_every == 0 || self.batch_size == 0 || self.kmeans_max_iter == 0 {
            return Err(Error::Invalid("epochs, lr_decay_every, batch_size and kmeans_max_iter must be positive".into()));
        }
        if self.refresh_period == Some(0) {
            return Err(Error::Invalid("refresh_period must be positive; omit it to never refresh".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Invalid(format!(
                "momentum must lie in [0, 1) and weight decay be non-negative, got {} and {}",
                self.momentum, self.weight_decay
            )));
        }
        let w = &self.loss_weights;
        if [w.cls1, w.cls2, w.node, w.edge].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be non-negative: {w:?}")));
        }
        let c = &self.hierarchy_counts;
        if c.len() < 2 || c.contains(&0) || c.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::Invalid(format!(
                "hierarchy counts must be at least two positive, strictly decreasing values, got {c:?}"
            )));
        }
        if c[c.len() - 1] < 2 && self.loss_weights.node > 0.0 {
            return Err(Error::Invalid("the node loss needs at least two clusters on every level".into()));
        }
        Ok(())
    }

    /// `base_lr / factor^floor(epoch / every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every) as f64;
        self.base_lr / math::powf(self.lr_decay_factor, steps)
    }

    /// Number of level-0 prototypes, which is the graph's node count.
    pub fn nodes(&self) -> usize {
        self.hierarchy_counts[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let config = TrainConfig::default();
        assert_eq!(config.lr_at(0), 0.01);
        assert!((config.lr_at(100) - 0.001).abs() < 1e-18);
        assert!((config.lr_at(299) - 0.0001).abs() < 1e-18);
        let mut last = f64::INFINITY;
        for epoch in 0..1000 {
            let lr = config.lr_at(epoch);
            assert!(lr <= last);
            if epoch % 100 != 0 {
                assert_eq!(lr, last);
            }
            last = lr;
        }
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn counts_must_decrease() {
        let config = TrainConfig { hierarchy_counts: Vec::from([8, 8, 4]), ..TrainConfig::default() };
        assert!(config.validate().is_err());
    }
}
