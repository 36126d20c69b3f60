//! Projection head mapping every backbone channel to a unit-norm embedding.
//!
//! The voxel grid of `F_b [C, D, H, W]` is moved onto the channel axis, so each
//! backbone channel becomes one position of a `[D·H·W, C, 1, 1]` volume. Two
//! pointwise convolutions with a ReLU between them then map every channel's
//! whole spatial map to an `E`-vector, which is L2-normalized. Embeddings thus
//! depend on where a channel responds, the same information its peak
//! descriptor clusters on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{push_pair, BoundConv, ConvParams, Parameters, Rng64};
use crate::ops::Conv3dSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub dim: usize,
    /// Norms below this are treated as zero and the embedding is left unnormalized.
    pub norm_floor: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            dim: 16,
            norm_floor: 1e-8,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.dim == 0 {
            return Err(Error::Invalid(format!("projection sizes must be positive: {self:?}")));
        }
        if !(self.norm_floor > 0.0) {
            return Err(Error::Invalid(format!("projection norm floor must be positive, got {}", self.norm_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub first: ConvParams,
    pub second: ConvParams,
}

impl ProjectionParams {
    /// Parameters for feature maps of `voxels` positions.
    pub fn init(config: &ProjectionConfig, voxels: usize, rng: &mut Rng64) -> Self {
        Self {
            first: ConvParams::init(config.hidden, voxels, 1, rng),
            second: ConvParams::init(config.dim, config.hidden, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundProjection {
        BoundProjection {
            first: self.first.bind(tape),
            second: self.second.bind(tape),
        }
    }
}

impl Parameters for ProjectionParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_pair(&mut out, "projection.first", &self.first.weight, &self.first.bias);
        push_pair(&mut out, "projection.second", &self.second.weight, &self.second.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::from([
            &mut self.first.weight,
            &mut self.first.bias,
            &mut self.second.weight,
            &mut self.second.bias,
        ])
    }
}

pub struct BoundProjection {
    pub first: BoundConv,
    pub second: BoundConv,
}

impl BoundProjection {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::from(self.first.vars());
        out.extend(self.second.vars());
        out
    }
}

/// Embeds every channel of `F_b [C, D, H, W]` as a row of a `[C, E]` matrix.
///
/// The returned mask is `false` for channels whose embedding norm fell below
/// the floor; those rows are left as they are (zero for a zero input) and
/// should not take part in the node loss for this step.
pub fn project_embeddings(
    tape: &mut Tape,
    features: Var,
    params: &BoundProjection,
    config: &ProjectionConfig,
) -> Result<(Var, Vec<bool>)> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("project_embeddings", format!("expected [C, D, H, W], got {shape:?}")));
    }
    let (c, vol) = (shape[0], shape[1] * shape[2] * shape[3]);
    let flat = tape.reshape(features, &[c, vol])?;
    let by_voxel = tape.transpose(flat)?;
    let stacked = tape.reshape(by_voxel, &[vol, c, 1, 1])?;
    let hidden = params.first.apply(tape, stacked, Conv3dSpec::default())?;
    let hidden = tape.relu(hidden)?;
    let out = params.second.apply(tape, hidden, Conv3dSpec::default())?;
    let out = tape.reshape(out, &[config.dim, c])?;
    let rows = tape.transpose(out)?;
    tape.l2_normalize_rows(rows, config.norm_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seeded;

    fn unit_params() -> ProjectionParams {
        let ones = |n_out: usize, n_in: usize| ConvParams {
            weight: Tensor::full(&[n_out, n_in, 1, 1, 1], 1.0),
            bias: Tensor::zeros(&[n_out]),
        };
        ProjectionParams { first: ones(1, 8), second: ones(3, 1) }
    }

    #[test]
    fn constant_map_gives_unit_constant_vector() {
        let config = ProjectionConfig { hidden: 1, dim: 3, ..ProjectionConfig::default() };
        let mut tape = Tape::new();
        let params = unit_params().bind(&mut tape);
        let fb = tape.leaf(Tensor::full(&[2, 2, 2, 2], 0.7));
        let (emb, mask) = project_embeddings(&mut tape, fb, &params, &config).unwrap();
        let v = tape.value(emb);
        assert_eq!(v.shape(), &[2, 3]);
        let expected = 1.0 / crate::math::sqrt(3.0);
        for x in v.data() {
            assert!((x - expected).abs() < 1e-15);
        }
        assert_eq!(mask, [true, true]);
    }

    #[test]
    fn zero_channel_is_flagged() {
        let config = ProjectionConfig { hidden: 1, dim: 3, ..ProjectionConfig::default() };
        let mut tape = Tape::new();
        let params = unit_params().bind(&mut tape);
        let mut data = Vec::from([0.0; 8]);
        data.extend([1.0; 8]);
        let fb = tape.leaf(Tensor::new(Vec::from([2, 2, 2, 2]), data).unwrap());
        let (emb, mask) = project_embeddings(&mut tape, fb, &params, &config).unwrap();
        assert_eq!(mask, [false, true]);
        assert_eq!(tape.value(emb).row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rows_have_unit_norm() {
        let config = ProjectionConfig::default();
        let mut rng = seeded(3);
        let params = ProjectionParams::init(&config, 27, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fb = tape.leaf(crate::layers::uniform(&[5, 3, 3, 3], 1.0, &mut rng));
        let (emb, mask) = project_embeddings(&mut tape, fb, &bound, &config).unwrap();
        let v = tape.value(emb);
        for (i, ok) in mask.iter().enumerate() {
            let norm: f64 = v.row(i).iter().map(|x| x * x).sum();
            if *ok {
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(params.parameter_count(), 16 * 27 + 16 + 16 * 16 + 16);
    }
}
