use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per channel, the `(d, h, w)` position of the largest activation scaled by
/// `(D−1, H−1, W−1)` into `[0, 1]³`. Ties go to the first position in row-major
/// order; a length-one axis maps to 0.
pub fn peak_coordinates(features: &Tensor) -> Result<Vec<[f64; 3]>> {
    let [c, d, h, w] = match features.shape() {
        &[c, d, h, w] => [c, d, h, w],
        s => return Err(Error::shape("peak_coordinates", format!("expected [C,D,H,W], got {s:?}"))),
    };
    let vol = d * h * w;
    let scale = |idx: usize, len: usize| if len > 1 { idx as f64 / (len - 1) as f64 } else { 0.0 };
    Ok(features
        .data()
        .chunks(vol)
        .take(c)
        .map(|channel| {
            let mut best = 0;
            for (i, &v) in channel.iter().enumerate() {
                if v > channel[best] {
                    best = i;
                }
            }
            let (pd, ph, pw) = (best / (h * w), (best / w) % h, best % w);
            [scale(pd, d), scale(ph, h), scale(pw, w)]
        })
        .collect())
}

/// Row `i` is channel `i`'s peak coordinates concatenated over the training
/// images, in manifest order: `[x¹, y¹, z¹, …, x^Ω, y^Ω, z^Ω]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptorTable {
    pub descriptors: Tensor,
    pub image_count: usize,
}

impl ChannelDescriptorTable {
    pub fn channels(&self) -> usize {
        self.descriptors.shape()[0]
    }
}

/// Builds the table from per-image peak coordinates (`per_image[i][c]`).
pub fn build_descriptor_table(per_image: &[Vec<[f64; 3]>]) -> Result<ChannelDescriptorTable> {
    let Some(first) = per_image.first() else {
        return Err(Error::Invalid("descriptor table needs at least one image".into()));
    };
    let channels = first.len();
    if channels == 0 {
        return Err(Error::Invalid("descriptor table needs at least one channel".into()));
    }
    if let Some(i) = per_image.iter().position(|p| p.len() != channels) {
        return Err(Error::shape(
            "build_descriptor_table",
            format!("image {i} has {} channels, expected {channels}", per_image[i].len()),
        ));
    }
    let omega = per_image.len();
    let mut data = vec![0.0; channels * 3 * omega];
    for (i, peaks) in per_image.iter().enumerate() {
        for (c, p) in peaks.iter().enumerate() {
            data[c * 3 * omega + 3 * i..c * 3 * omega + 3 * i + 3].copy_from_slice(p);
        }
    }
    Ok(ChannelDescriptorTable {
        descriptors: Tensor::new(vec![channels, 3 * omega], data)?,
        image_count: omega,
    })
}
