//! Lloyd's k-means with k-means++ seeding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{seeded, Rng64};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no center moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 300,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Tensor,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration (assignment then mean update).
    pub inertia_history: Vec<f64>,
    /// Assignments and centers after every iteration, matching `inertia_history`.
    pub trace: Vec<(Vec<usize>, Tensor)>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center; ties go to the lowest index.
fn nearest(point: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.shape()[0] {
        let d = sq_dist(point, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances from every point to its assigned center.
pub fn inertia(points: &Tensor, centers: &Tensor, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centers.row(a)))
        .sum()
}

fn check(points: &Tensor, k: usize) -> Result<(usize, usize)> {
    let (n, dim) = match points.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::shape("kmeans", format!("points must be a matrix, got {s:?}"))),
    };
    if k == 0 {
        return Err(Error::Invalid("kmeans: k must be positive".into()));
    }
    if k > n {
        return Err(Error::Invalid(format!("kmeans: k = {k} exceeds the {n} points")));
    }
    Ok((n, dim))
}

/// k-means++ seeding: the first center uniformly, each next one with
/// probability proportional to its squared distance from the chosen set.
pub fn kmeans_plus_plus(points: &Tensor, k: usize, rng: &mut Rng64) -> Result<Tensor> {
    let (n, dim) = check(points, k)?;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // every remaining point duplicates a chosen one
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let data = chosen.iter().flat_map(|&i| points.row(i).iter().copied()).collect();
    Tensor::new(vec![k, dim], data)
}

/// k-means from k-means++ seeds.
pub fn kmeans(points: &Tensor, k: usize, options: &KMeansOptions) -> Result<KMeansResult> {
    check(points, k)?;
    let mut rng = seeded(options.seed);
    let centers = kmeans_plus_plus(points, k, &mut rng)?;
    kmeans_from(points, centers, options)
}

/// Lloyd iterations from the given centers. A cluster left empty by an
/// assignment step is re-seeded with the point farthest from its own center.
pub fn kmeans_from(points: &Tensor, initial: Tensor, options: &KMeansOptions) -> Result<KMeansResult> {
    let k = initial.shape()[0];
    let (n, dim) = check(points, k)?;
    if initial.shape() != [k, dim] {
        return Err(Error::shape(
            "kmeans",
            format!("initial centers {:?} do not match point dimension {dim}", initial.shape()),
        ));
    }
    let mut centers = initial;
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..options.max_iter.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = Vec::with_capacity(n);
        let mut dist = Vec::with_capacity(n);
        for i in 0..n {
            let (j, d) = nearest(points.row(i), &centers);
            next.push(j);
            dist.push(d);
        }
        repair_empty(&mut next, &mut dist, k);
        let unchanged = next == assignments;
        assignments = next;

        let updated = cluster_means(points, &assignments, k, dim);
        let shift = (0..k)
            .map(|j| sq_dist(updated.row(j), centers.row(j)))
            .fold(0.0, f64::max);
        centers = updated;
        history.push(inertia(points, &centers, &assignments));
        trace.push((assignments.clone(), centers.clone()));
        if unchanged || crate::math::sqrt(shift) < options.tol {
            break;
        }
    }

    Ok(KMeansResult {
        inertia: *history.last().expect("at least one iteration"),
        assignments,
        centers,
        inertia_history: history,
        trace,
        iterations,
    })
}

fn repair_empty(assignments: &mut [usize], dist: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut farthest: Option<usize> = None;
        for i in 0..assignments.len() {
            if sizes[assignments[i]] > 1 && farthest.is_none_or(|f| dist[i] > dist[f]) {
                farthest = Some(i);
            }
        }
        let f = farthest.expect("k <= n leaves a cluster with two or more points");
        sizes[assignments[f]] -= 1;
        assignments[f] = empty;
        sizes[empty] = 1;
        dist[f] = 0.0;
    }
}

/// Row `j` is the mean of the points assigned to cluster `j`.
pub(crate) fn cluster_means(points: &Tensor, assignments: &[usize], k: usize, dim: usize) -> Tensor {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for j in 0..k {
        let c = counts[j].max(1) as f64;
        for s in &mut sums[j * dim..(j + 1) * dim] {
            *s /= c;
        }
    }
    Tensor::new(vec![k, dim], sums).expect("k × dim")
}
