//! Nested prototype levels built by repeated k-means: level 0 clusters the
//! channels, each further level clusters the centers of the level below.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototype::kmeans::{cluster_means, kmeans, kmeans_from, KMeansOptions};
use crate::prototype::losses::concentration_phi;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyLevel {
    /// Cluster centers in the space of the clustered points.
    pub centers: Tensor,
    /// For every item of the level below (channels at level 0), its cluster.
    pub assignments: Vec<usize>,
    /// For every cluster, its cluster at the next level; empty at the top.
    pub parents: Vec<usize>,
    /// Concentration of every cluster.
    pub phi: Vec<f64>,
}

impl HierarchyLevel {
    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items of the level below that belong to cluster `n`.
    pub fn members(&self, n: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == n)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHierarchy {
    pub levels: Vec<HierarchyLevel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyOptions {
    pub kmeans: KMeansOptions,
    /// Smoothing constant of the concentration estimate.
    pub alpha: f64,
}

impl Default for HierarchyOptions {
    fn default() -> Self {
        Self {
            kmeans: KMeansOptions::default(),
            alpha: 10.0,
        }
    }
}

impl PrototypeHierarchy {
    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(HierarchyLevel::len).collect()
    }

    /// Number of level-0 items (channels).
    pub fn item_count(&self) -> usize {
        self.levels.first().map_or(0, |l| l.assignments.len())
    }

    /// Checks that each level partitions the level below and that every
    /// non-top cluster has exactly one parent.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Invalid("hierarchy has no levels".into()));
        }
        for (l, level) in self.levels.iter().enumerate() {
            let expected_items = if l == 0 { self.item_count() } else { self.levels[l - 1].len() };
            if level.assignments.len() != expected_items {
                return Err(Error::Invalid(format!(
                    "level {l} assigns {} items, expected {expected_items}",
                    level.assignments.len()
                )));
            }
            let mut sizes = vec![0usize; level.len()];
            for &a in &level.assignments {
                if a >= level.len() {
                    return Err(Error::Invalid(format!("level {l} assigns to missing cluster {a}")));
                }
                sizes[a] += 1;
            }
            if let Some(cluster) = sizes.iter().position(|&s| s == 0) {
                return Err(Error::EmptyCluster { cluster });
            }
            if level.phi.len() != level.len() {
                return Err(Error::Invalid(format!("level {l} has {} concentrations", level.phi.len())));
            }
            let top = l + 1 == self.levels.len();
            if top {
                if !level.parents.is_empty() {
                    return Err(Error::Invalid("top level must not have parents".into()));
                }
            } else if level.parents != self.levels[l + 1].assignments {
                return Err(Error::Invalid(format!("level {l} parent links disagree with level {}", l + 1)));
            }
        }
        Ok(())
    }

    /// Level-0 cluster of every channel.
    pub fn channel_assignments(&self) -> &[usize] {
        &self.levels[0].assignments
    }
}

fn validate_counts(counts: &[usize], items: usize) -> Result<()> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Invalid(format!("hierarchy counts must be positive, got {counts:?}")));
    }
    if counts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid(format!("hierarchy counts must be strictly decreasing, got {counts:?}")));
    }
    if counts[0] > items {
        return Err(Error::Invalid(format!(
            "cannot form {} level-0 prototypes from {items} items",
            counts[0]
        )));
    }
    Ok(())
}

fn phis(points: &Tensor, centers: &Tensor, assignments: &[usize], alpha: f64) -> Result<Vec<f64>> {
    (0..centers.shape()[0])
        .map(|n| {
            let members: Vec<&[f64]> = assignments
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a == n)
                .map(|(i, _)| points.row(i))
                .collect();
            concentration_phi(&members, centers.row(n), alpha).map_err(|_| Error::EmptyCluster { cluster: n })
        })
        .collect()
}

fn assemble(levels: Vec<(Tensor, Vec<usize>, Vec<f64>)>) -> PrototypeHierarchy {
    let parents: Vec<Vec<usize>> = (0..levels.len())
        .map(|l| levels.get(l + 1).map(|next| next.1.clone()).unwrap_or_default())
        .collect();
    PrototypeHierarchy {
        levels: levels
            .into_iter()
            .zip(parents)
            .map(|((centers, assignments, phi), parents)| HierarchyLevel {
                centers,
                assignments,
                parents,
                phi,
            })
            .collect(),
    }
}

/// Rows sorted lexicographically; ties keep their original order.
fn canonical_order(points: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.shape()[0]).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Clusters the rows of `points` into `counts[0]` prototypes, then those
/// prototypes into `counts[1]`, and so on. Rows are put in canonical order
/// before seeding, so permuting them only permutes the level-0 assignments.
pub fn build_hierarchy(points: &Tensor, counts: &[usize], options: &HierarchyOptions) -> Result<PrototypeHierarchy> {
    let items = match points.shape() {
        &[n, _] => n,
        s => return Err(Error::shape("build_hierarchy", format!("points must be a matrix, got {s:?}"))),
    };
    validate_counts(counts, items)?;

    let order = canonical_order(points);
    let sorted_data = order.iter().flat_map(|&i| points.row(i).iter().copied()).collect();
    let sorted = Tensor::new(points.shape().to_vec(), sorted_data)?;

    let mut levels = Vec::with_capacity(counts.len());
    let mut current = sorted;
    for (l, &k) in counts.iter().enumerate() {
        let result = kmeans(&current, k, &options.kmeans)?;
        let phi = phis(&current, &result.centers, &result.assignments, options.alpha)?;
        let assignments = if l == 0 {
            let mut original = vec![0; items];
            for (pos, &i) in order.iter().enumerate() {
                original[i] = result.assignments[pos];
            }
            original
        } else {
            result.assignments
        };
        levels.push((result.centers.clone(), assignments, phi));
        current = result.centers;
    }
    Ok(assemble(levels))
}

/// Re-clusters every level from new `points`, warm-starting each level from the
/// previous partition so unchanged points keep their cluster labels.
pub fn refresh_hierarchy(
    points: &Tensor,
    previous: &PrototypeHierarchy,
    options: &HierarchyOptions,
) -> Result<PrototypeHierarchy> {
    let (items, dim) = match points.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::shape("refresh_hierarchy", format!("points must be a matrix, got {s:?}"))),
    };
    if items != previous.item_count() {
        return Err(Error::shape(
            "refresh_hierarchy",
            format!("{items} points but the hierarchy covers {}", previous.item_count()),
        ));
    }
    let mut levels = Vec::with_capacity(previous.levels.len());
    let mut current = points.clone();
    let mut current_dim = dim;
    for old in &previous.levels {
        let warm = cluster_means(&current, &old.assignments, old.len(), current_dim);
        let result = kmeans_from(&current, warm, &options.kmeans)?;
        let phi = phis(&current, &result.centers, &result.assignments, options.alpha)?;
        levels.push((result.centers.clone(), result.assignments, phi));
        current = result.centers;
        current_dim = current.shape()[1];
    }
    Ok(assemble(levels))
}

/// Whether a refresh is due `epochs_since_build` epochs after the last
/// (re)build; `None` never refreshes.
pub fn refresh_due(epochs_since_build: usize, period: Option<usize>) -> bool {
    matches!(period, Some(p) if p > 0 && epochs_since_build > 0 && epochs_since_build.is_multiple_of(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seeded;
    use rand::Rng;

    fn planted(groups: usize, per_group: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for g in 0..groups {
            for _ in 0..per_group {
                let mut row = vec![0.0; 4];
                row[g % 4] = 10.0 * (1 + g / 4) as f64;
                row.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
                rows.push(row);
                truth.push(g);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), truth)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        a.len() == b.len() && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn planted_groups_form_level_zero() {
        let (points, truth) = planted(4, 2, 1);
        let h = build_hierarchy(&points, &[4, 2, 1], &HierarchyOptions::default()).unwrap();
        h.validate().unwrap();
        assert!(same_partition(h.channel_assignments(), &truth));
        assert_eq!(h.counts(), vec![4, 2, 1]);
        assert!(h.levels[2].assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn default_counts_on_random_channels() {
        let mut rng = seeded(5);
        let data = (0..32 * 12).map(|_| rng.random_range(0.0..1.0)).collect();
        let points = Tensor::new(vec![32, 12], data).unwrap();
        let h = build_hierarchy(&points, &[16, 8, 4], &HierarchyOptions::default()).unwrap();
        h.validate().unwrap();
        assert_eq!(h.counts(), vec![16, 8, 4]);
        assert_eq!(h.levels[0].parents.len(), 16);
        assert_eq!(h.levels[1].parents.len(), 8);
    }

    #[test]
    fn counts_must_decrease() {
        let (points, _) = planted(4, 2, 1);
        for bad in [&[4, 4, 2][..], &[2, 4], &[9, 2], &[]] {
            assert!(build_hierarchy(&points, bad, &HierarchyOptions::default()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn row_permutation_permutes_assignments() {
        let mut rng = seeded(9);
        let data: Vec<f64> = (0..20 * 6).map(|_| rng.random_range(0.0..1.0)).collect();
        let points = Tensor::new(vec![20, 6], data).unwrap();
        let perm: Vec<usize> = (0..20).map(|i| (i * 7 + 3) % 20).collect();
        let permuted_data = perm.iter().flat_map(|&i| points.row(i).to_vec()).collect();
        let permuted = Tensor::new(vec![20, 6], permuted_data).unwrap();
        let a = build_hierarchy(&points, &[6, 3, 2], &HierarchyOptions::default()).unwrap();
        let b = build_hierarchy(&permuted, &[6, 3, 2], &HierarchyOptions::default()).unwrap();
        let mapped: Vec<usize> = perm.iter().map(|&i| a.channel_assignments()[i]).collect();
        assert!(same_partition(&mapped, b.channel_assignments()));
    }

    #[test]
    fn refresh_with_same_points_is_a_fixed_point() {
        let (points, _) = planted(8, 3, 2);
        let h = build_hierarchy(&points, &[8, 4, 2], &HierarchyOptions::default()).unwrap();
        let r = refresh_hierarchy(&points, &h, &HierarchyOptions::default()).unwrap();
        for (a, b) in h.levels.iter().zip(&r.levels) {
            assert_eq!(a.assignments, b.assignments);
        }
    }

    #[test]
    fn refresh_tracks_moved_points() {
        let (points, _) = planted(4, 3, 3);
        let h = build_hierarchy(&points, &[4, 2], &HierarchyOptions::default()).unwrap();
        // move item 0 onto item 11's group
        let mut moved = points.clone();
        let target = points.row(11).to_vec();
        moved.data_mut()[..4].copy_from_slice(&target);
        let r = refresh_hierarchy(&moved, &h, &HierarchyOptions::default()).unwrap();
        r.validate().unwrap();
        assert_eq!(r.channel_assignments()[0], r.channel_assignments()[11]);
    }

    #[test]
    fn refresh_schedule() {
        assert!(!refresh_due(10, None));
        assert!(!refresh_due(0, Some(10)));
        assert!(!refresh_due(5, Some(10)));
        assert!(refresh_due(10, Some(10)));
        assert!(refresh_due(20, Some(10)));
    }
}
