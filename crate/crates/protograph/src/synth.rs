//! Synthetic volumes whose class is coded by sign agreement between blob
//! sites rather than by their mean intensity.
//!
//! Sites come in pairs and pairs come in groups. In a class-1 volume both
//! sites of a pair share a sign and the pairs of a group agree with
//! probability `group_coherence`. In a class-0 volume every site draws its
//! sign independently. Magnitudes are drawn the same way for both classes, so
//! every site has mean zero in both.

use std::fs;
use std::path::Path;

use protograph_core::layers::{seeded, Rng64};
use protograph_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::manifest::{save_manifest, Manifest, Record, Split, MANIFEST_FILE};
use crate::volume::write_volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    /// Blob centres in voxel coordinates, listed pair by pair. Consecutive
    /// pairs form a group of `pairs_per_group`. Defaults to the eight cube
    /// corners inset by `corner_inset`, each pair joining opposite corners.
    pub sites: Option<Vec<[f64; 3]>>,
    pub corner_inset: f64,
    pub pairs_per_group: usize,
    /// Gaussian width of a blob, in voxels.
    pub blob_radius: f64,
    pub intensity: f64,
    /// Smallest blob magnitude as a fraction of `intensity`.
    pub min_amplitude: f64,
    /// Probability that the pairs of a class-1 group share the group sign.
    pub group_coherence: f64,
    pub noise_sigma: f64,
    pub positive_fraction: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            sites: None,
            corner_inset: 3.0,
            pairs_per_group: 2,
            blob_radius: 1.5,
            intensity: 1.0,
            min_amplitude: 0.5,
            group_coherence: 1.0,
            noise_sigma: 0.1,
            positive_fraction: 0.5,
            train: 200,
            val: 0,
            test: 100,
        }
    }
}

impl SynthSpec {
    pub fn site_list(&self) -> Vec<[f64; 3]> {
        if let Some(sites) = &self.sites {
            return sites.clone();
        }
        let lo = self.corner_inset;
        let hi = self.dims.map(|d| d as f64 - 1.0 - self.corner_inset);
        let corner = |bits: usize| {
            [0, 1, 2].map(|a| if bits >> (2 - a) & 1 == 1 { hi[a] } else { lo })
        };
        // Corner c is paired with its opposite 7 - c.
        [0, 7, 3, 4, 1, 6, 2, 5].into_iter().map(corner).collect()
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |msg: String| Err(AppError::Usage(format!("infeasible synth spec: {msg}")));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        let sites = self.site_list();
        if sites.is_empty() || !sites.len().is_multiple_of(2) {
            return bad(format!("need a positive even number of sites, got {}", sites.len()));
        }
        if self.pairs_per_group == 0 || !(sites.len() / 2).is_multiple_of(self.pairs_per_group) {
            return bad(format!(
                "{} pairs cannot be split into groups of {}",
                sites.len() / 2,
                self.pairs_per_group
            ));
        }
        if !(self.blob_radius > 0.0) {
            return bad(format!("blob_radius must be positive, got {}", self.blob_radius));
        }
        for (i, s) in sites.iter().enumerate() {
            for a in 0..3 {
                let hi = self.dims[a] as f64 - 1.0;
                if s[a] - self.blob_radius < 0.0 || s[a] + self.blob_radius > hi {
                    return bad(format!(
                        "site {i} at {s:?} with radius {} does not fit in {:?}",
                        self.blob_radius, self.dims
                    ));
                }
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !self.intensity.is_finite() || self.intensity < 0.0 {
            return bad(format!("intensity must be >= 0, got {}", self.intensity));
        }
        if !(0.0..=1.0).contains(&self.min_amplitude) {
            return bad(format!("min_amplitude must lie in [0, 1], got {}", self.min_amplitude));
        }
        if !(0.0..=1.0).contains(&self.group_coherence) {
            return bad(format!("group_coherence must lie in [0, 1], got {}", self.group_coherence));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive_fraction must lie in [0, 1], got {}", self.positive_fraction));
        }
        if self.train + self.val + self.test == 0 {
            return bad("no volumes requested".into());
        }
        Ok(())
    }
}

pub struct GeneratedVolume {
    pub path: String,
    pub split: Split,
    pub label: usize,
    pub seed: u64,
    /// Signed blob amplitudes, one per site.
    pub amplitudes: Vec<f64>,
    /// `[1, D, H, W]`, already rounded to `f32` so it equals the file contents.
    pub volume: Tensor,
}

/// Per-site check that blob intensity has the same mean in both classes.
#[derive(Clone, Debug, Serialize)]
pub struct MeanCheck {
    /// Two-sample z statistic of the centre-voxel intensity, per site.
    pub z: Vec<f64>,
    pub passed: bool,
}

pub struct Dataset {
    pub volumes: Vec<GeneratedVolume>,
    pub manifest: Manifest,
    pub mean_check: Option<MeanCheck>,
}

/// Minimum number of volumes for the class-mean check to run.
pub const MEAN_CHECK_MIN: usize = 200;

fn volume_seed(seed: u64, index: usize) -> u64 {
    let mut rng = seeded(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Signed amplitudes for one volume.
pub fn draw_amplitudes(spec: &SynthSpec, label: usize, rng: &mut Rng64) -> Vec<f64> {
    let sites = spec.site_list().len();
    let pairs = sites / 2;
    let sign = |rng: &mut Rng64| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut signs = vec![0.0; sites];
    if label == 1 {
        for group in 0..pairs / spec.pairs_per_group {
            let g = sign(rng);
            for p in 0..spec.pairs_per_group {
                let pair = group * spec.pairs_per_group + p;
                let s = if rng.random::<f64>() < spec.group_coherence { g } else { sign(rng) };
                signs[2 * pair] = s;
                signs[2 * pair + 1] = s;
            }
        }
    } else {
        for s in &mut signs {
            *s = sign(rng);
        }
    }
    signs
        .into_iter()
        .map(|s| s * spec.intensity * rng.random_range(spec.min_amplitude..=1.0))
        .collect()
}

pub fn render_volume(spec: &SynthSpec, amplitudes: &[f64], rng: &mut Rng64) -> AppResult<Tensor> {
    let [d, h, w] = spec.dims;
    let sites = spec.site_list();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| AppError::Usage(e.to_string()))?;
    let inv = 1.0 / (2.0 * spec.blob_radius * spec.blob_radius);
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut v = 0.0;
                for (c, &a) in sites.iter().zip(amplitudes) {
                    let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                    v += a * (-r2 * inv).exp();
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                data.push(f64::from(v as f32));
            }
        }
    }
    Ok(Tensor::new(vec![1, d, h, w], data)?)
}

/// Generates every volume in memory. A pure function of `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> AppResult<Dataset> {
    spec.validate()?;
    let mut volumes = Vec::new();
    let mut index = 0;
    for (split, count) in [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)] {
        let positives = (count as f64 * spec.positive_fraction).round() as usize;
        let mut labels: Vec<usize> = (0..count).map(|i| usize::from(i < positives)).collect();
        let mut rng = seeded(seed);
        rng.set_stream(1 << 32 | split as u64);
        labels.shuffle(&mut rng);
        let name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        for (i, label) in labels.into_iter().enumerate() {
            let vseed = volume_seed(seed, index);
            index += 1;
            let mut rng = seeded(vseed);
            let amplitudes = draw_amplitudes(spec, label, &mut rng);
            let volume = render_volume(spec, &amplitudes, &mut rng)?;
            volumes.push(GeneratedVolume {
                path: format!("{name}/vol_{i:04}.volb"),
                split,
                label,
                seed: vseed,
                amplitudes,
                volume,
            });
        }
    }
    let manifest = Manifest::new(
        volumes
            .iter()
            .map(|v| Record { path: v.path.clone(), label: v.label, split: v.split, seed: v.seed })
            .collect(),
    )?;
    let mean_check = (volumes.len() >= MEAN_CHECK_MIN).then(|| class_mean_check(spec, &volumes));
    Ok(Dataset { volumes, manifest, mean_check })
}

fn class_mean_check(spec: &SynthSpec, volumes: &[GeneratedVolume]) -> MeanCheck {
    let [_, h, w] = spec.dims;
    let centres: Vec<usize> = spec
        .site_list()
        .iter()
        .map(|c| {
            let [z, y, x] = c.map(|v| v.round() as usize);
            (z * h + y) * w + x
        })
        .collect();
    let z = centres
        .iter()
        .map(|&offset| {
            let stats = |label: usize| {
                let xs: Vec<f64> =
                    volumes.iter().filter(|v| v.label == label).map(|v| v.volume.data()[offset]).collect();
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                (mean, var / n)
            };
            let (m0, s0) = stats(0);
            let (m1, s1) = stats(1);
            let se = (s0 + s1).sqrt();
            if se > 0.0 { (m1 - m0) / se } else { 0.0 }
        })
        .collect::<Vec<f64>>();
    let passed = z.iter().all(|v| v.abs() < 3.0);
    MeanCheck { z, passed }
}

/// Writes volumes and `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, seed: u64, out_dir: &Path) -> AppResult<Dataset> {
    let dataset = generate(spec, seed)?;
    for v in &dataset.volumes {
        let path = out_dir.join(&v.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
        }
        write_volume(&path, &v.volume)?;
    }
    save_manifest(&out_dir.join(MANIFEST_FILE), &dataset.manifest)?;
    Ok(dataset)
}
