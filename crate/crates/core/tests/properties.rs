use proptest::prelude::*;
use rand::Rng;

use protograph_core::backbone::{backbone_forward, BackboneConfig, BackboneParams};
use protograph_core::config::TrainConfig;
use protograph_core::graph::{attention_adjacency, gcn_layer, AdjacencyMode, AttentionParams};
use protograph_core::layers::{seeded, Rng64};
use protograph_core::metrics::{auc, compute_metrics};
use protograph_core::prototype::{
    build_hierarchy, concentration_phi, inertia, kmeans, loss_edge, loss_node, peak_coordinates, refresh_hierarchy,
    EdgeLevel, HierarchyOptions, KMeansOptions, NodeLevel, PrototypeHierarchy,
};
use protograph_core::{Tape, Tensor};

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Twice the number of correctly ordered (positive, negative) pairs plus ties.
fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut doubled = 0u64;
    for p in &pos {
        for n in &neg {
            doubled += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    doubled as f64 / (2 * pos.len() * neg.len()) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_schedule_is_non_increasing_and_steps_at_multiples(
        base in 1e-4f64..1.0,
        factor in 1.5f64..20.0,
        every in 1usize..50,
        epoch in 0usize..500,
    ) {
        let config = TrainConfig { base_lr: base, lr_decay_factor: factor, lr_decay_every: every, ..TrainConfig::default() };
        prop_assert!(config.lr_at(epoch + 1) <= config.lr_at(epoch));
        let same_block = (epoch + 1) % every != 0;
        let (now, next) = (config.lr_at(epoch), config.lr_at(epoch + 1));
        if same_block {
            prop_assert_eq!(next, now);
        } else if now >= f64::MIN_POSITIVE * factor {
            // long schedules underflow to zero, where no further step is visible
            prop_assert!(next < now);
        }
        prop_assert_eq!(config.lr_at(epoch), config.lr_at(epoch - epoch % every));
    }

    #[test]
    fn metrics_satisfy_confusion_identities(
        pairs in prop::collection::vec((0u8..8, 0usize..2), 1..60),
        threshold in 0.0f64..1.0,
    ) {
        let scores: Vec<f64> = pairs.iter().map(|&(s, _)| f64::from(s) / 7.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|&(_, y)| y).collect();
        let m = compute_metrics(&scores, &labels, threshold).unwrap();
        let n = scores.len();
        prop_assert_eq!(m.tp + m.fp + m.tn + m.fn_, n);
        let positives = labels.iter().filter(|&&y| y == 1).count();
        prop_assert_eq!(m.tp + m.fn_, positives);
        prop_assert_eq!(m.acc, (m.tp + m.tn) as f64 / n as f64);
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        prop_assert_eq!(m.sen, ratio(m.tp, m.tp + m.fn_));
        prop_assert_eq!(m.spe, ratio(m.tn, m.tn + m.fp));
        prop_assert!((0.0..=1.0).contains(&m.auc));
    }

    #[test]
    fn auc_equals_pairwise_count_with_ties(
        pairs in prop::collection::vec((0u8..6, 0usize..2), 1..80),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|&(s, _)| f64::from(s) * 0.1).collect();
        let labels: Vec<usize> = pairs.iter().map(|&(_, y)| y).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), n in 6usize..40, d in 1usize..5, k in 1usize..6) {
        let mut rng = seeded(seed);
        let points = random_matrix(n, d, &mut rng);
        let k = k.min(n);
        let result = kmeans(&points, k, &KMeansOptions { seed, ..KMeansOptions::default() }).unwrap();
        for (h, (assign, centers)) in result.inertia_history.iter().zip(&result.trace) {
            prop_assert!((h - inertia(&points, centers, assign)).abs() <= 1e-12 * (1.0 + h));
        }
        for w in result.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(result.inertia <= result.inertia_history[0] + 1e-12);
    }

    #[test]
    fn hierarchy_is_a_nested_partition_after_build_and_refresh(seed in any::<u64>(), shift in 0.0f64..0.3) {
        let mut rng = seeded(seed);
        let points = random_matrix(32, 6, &mut rng);
        let options = HierarchyOptions { kmeans: KMeansOptions { seed, ..KMeansOptions::default() }, alpha: 10.0 };
        let built = build_hierarchy(&points, &[16, 8, 4], &options).unwrap();
        check_partition(&built)?;
        prop_assert_eq!(built.counts(), vec![16, 8, 4]);

        let noise = random_matrix(32, 6, &mut rng);
        let moved_data = points.data().iter().zip(noise.data()).map(|(p, n)| p + shift * n).collect();
        let moved = Tensor::new(vec![32, 6], moved_data).unwrap();
        let refreshed = refresh_hierarchy(&moved, &built, &options).unwrap();
        check_partition(&refreshed)?;
        prop_assert_eq!(refreshed.counts(), vec![16, 8, 4]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_adjacency_is_bounded(
        seed in any::<u64>(),
        n in 2usize..10,
        f in 1usize..12,
        scores_mode in any::<bool>(),
    ) {
        let mut rng = seeded(seed);
        let x = random_matrix(n, f, &mut rng).map(|v| 3.0 * v);
        let params = AttentionParams::init(f, 4, n, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(x);
        let mode = if scores_mode { AdjacencyMode::Scores } else { AdjacencyMode::Output };
        let adj = attention_adjacency(&mut tape, xv, &bound, mode).unwrap();

        let scores = tape.value(adj.scores.unwrap());
        for i in 0..n {
            let row = scores.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let eff = tape.value(adj.effective);
        for i in 0..n {
            for j in 0..n {
                prop_assert!(eff.at(&[i, j]) >= 0.0);
                prop_assert_eq!(eff.at(&[i, j]), eff.at(&[j, i]));
            }
        }
        let norm = tape.value(adj.normalized);
        prop_assert!(power_iteration(norm, &mut rng) <= 1.0 + 1e-9);
    }

    #[test]
    fn gcn_layer_matches_triple_loop(seed in any::<u64>(), n in 1usize..17, f in 1usize..8, h in 1usize..6) {
        let mut rng = seeded(seed);
        let a = random_matrix(n, n, &mut rng);
        let x = random_matrix(n, f, &mut rng);
        let theta = random_matrix(f, h, &mut rng);
        let mut tape = Tape::new();
        let (av, xv, tv) = (tape.constant(a.clone()), tape.constant(x.clone()), tape.constant(theta.clone()));
        let out = gcn_layer(&mut tape, xv, av, tv).unwrap();
        let out = tape.value(out);
        for i in 0..n {
            for o in 0..h {
                let mut acc = 0.0;
                for j in 0..n {
                    for c in 0..f {
                        acc += a.at(&[i, j]) * x.at(&[j, c]) * theta.at(&[c, o]);
                    }
                }
                prop_assert!((out.at(&[i, o]) - acc.max(0.0)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gcn_layer_with_identity_is_dense_relu(seed in any::<u64>(), n in 1usize..8, f in 1usize..8, h in 1usize..6) {
        let mut rng = seeded(seed);
        let x = random_matrix(n, f, &mut rng);
        let theta = random_matrix(f, h, &mut rng);
        let mut tape = Tape::new();
        let (iv, xv, tv) = (tape.constant(Tensor::eye(n)), tape.constant(x.clone()), tape.constant(theta.clone()));
        let out = gcn_layer(&mut tape, xv, iv, tv).unwrap();
        let out = tape.value(out);
        for i in 0..n {
            for o in 0..h {
                let direct: f64 = (0..f).map(|c| x.at(&[i, c]) * theta.at(&[c, o])).sum();
                prop_assert_eq!(out.at(&[i, o]), direct.max(0.0));
            }
        }
    }

    #[test]
    fn peak_coordinates_ignore_monotone_transforms(seed in any::<u64>(), c in 1usize..5, d in 1usize..5) {
        let mut rng = seeded(seed);
        let data: Vec<f64> = (0..c * d * d * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::new(vec![c, d, d, d], data).unwrap();
        let base = peak_coordinates(&t).unwrap();
        let warped = peak_coordinates(&t.map(|v| (3.0 * v).exp() - 7.0)).unwrap();
        prop_assert_eq!(&base, &warped);
        let cubed = peak_coordinates(&t.map(|v| v * v * v + v)).unwrap();
        prop_assert_eq!(base, cubed);
    }

    #[test]
    fn phi_scales_with_member_distances(seed in any::<u64>(), members in 1usize..8, s in 0.1f64..10.0) {
        let mut rng = seeded(seed);
        let points = random_matrix(members, 3, &mut rng);
        let center = [0.1, -0.2, 0.3];
        let scaled_points = points.map(|v| v * s);
        let scaled_center: Vec<f64> = center.iter().map(|v| v * s).collect();
        let rows: Vec<&[f64]> = (0..members).map(|i| points.row(i)).collect();
        let scaled_rows: Vec<&[f64]> = (0..members).map(|i| scaled_points.row(i)).collect();
        let phi = concentration_phi(&rows, &center, 10.0).unwrap();
        let scaled = concentration_phi(&scaled_rows, &scaled_center, 10.0).unwrap();
        prop_assert!((scaled - s * phi).abs() <= 1e-12 * (1.0 + scaled.abs()));
    }

    #[test]
    fn node_loss_falls_along_the_pull_direction(seed in any::<u64>(), e in 2usize..6) {
        let mut rng = seeded(seed);
        let centers = random_matrix(3, e, &mut rng);
        let elements = random_matrix(5, e, &mut rng);
        let assignments = vec![0, 1, 2, 0, 1];
        let phi = vec![0.7, 1.3, 0.5];
        let target = 3;
        let owner = assignments[target];

        // Pull toward the own center, push from the others weighted by their softmax share.
        let u = elements.row(target);
        let logits: Vec<(usize, f64)> =
            (0..3).filter(|&i| i != owner).map(|i| (i, dot(u, centers.row(i)) / phi[owner])).collect();
        let top = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l.1 - top).exp()).sum();
        let mut direction = centers.row(owner).to_vec();
        for &(i, l) in &logits {
            let w = (l - top).exp() / z;
            for (d, c) in direction.iter_mut().zip(centers.row(i)) {
                *d -= w * c;
            }
        }
        prop_assume!(dot(&direction, &direction) > 1e-6);

        let value = |elements: &Tensor| {
            let mut tape = Tape::new();
            let el = tape.constant(elements.clone());
            let ce = tape.constant(centers.clone());
            let level = NodeLevel { elements: el, centers: ce, assignments: assignments.clone(), phi: phi.clone() };
            let l = loss_node(&mut tape, &[level], 1).unwrap();
            tape.value(l).item()
        };
        let before = value(&elements);
        let mut moved = elements.clone();
        for (k, d) in direction.iter().enumerate() {
            moved.data_mut()[target * e + k] += 1e-4 * d;
        }
        prop_assert!(value(&moved) < before);
    }

    #[test]
    fn edge_loss_falls_when_only_the_parent_dot_grows(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let e = 6;
        let protos = random_matrix(3, e, &mut rng);
        let parents = random_matrix(2, e, &mut rng);
        let parent_of = vec![0, 1, 1];
        let target = 1;

        // Component of the parent orthogonal to every other prototype of the level.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for i in (0..3).filter(|&i| i != target) {
            let mut v = protos.row(i).to_vec();
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = dot(&v, &v).sqrt();
            basis.push(v.iter().map(|x| x / norm).collect());
        }
        let mut direction = parents.row(parent_of[target]).to_vec();
        for b in &basis {
            let p = dot(&direction, b);
            direction.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        prop_assume!(dot(&direction, &direction) > 1e-6);

        let value = |protos: &Tensor| {
            let mut tape = Tape::new();
            let pr = tape.constant(protos.clone());
            let pa = tape.constant(parents.clone());
            let level = EdgeLevel { prototypes: pr, parents: pa, parent_of: parent_of.clone() };
            let l = loss_edge(&mut tape, &[level], 2, 0.2).unwrap();
            tape.value(l).item()
        };
        let mut moved = protos.clone();
        for (k, d) in direction.iter().enumerate() {
            moved.data_mut()[target * e + k] += 1e-3 * d;
        }
        for i in (0..3).filter(|&i| i != target) {
            prop_assert!((dot(moved.row(target), protos.row(i)) - dot(protos.row(target), protos.row(i))).abs() < 1e-12);
        }
        prop_assert!(value(&moved) < value(&protos));
    }
}

fn check_partition(h: &PrototypeHierarchy) -> Result<(), TestCaseError> {
    prop_assert!(h.validate().is_ok());
    for (l, level) in h.levels.iter().enumerate() {
        let below = if l == 0 { h.item_count() } else { h.levels[l - 1].len() };
        let mut covered = vec![0usize; below];
        for n in 0..level.len() {
            let members = level.members(n);
            prop_assert!(!members.is_empty());
            for m in members {
                covered[m] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        if l + 1 < h.levels.len() {
            prop_assert_eq!(level.parents.len(), level.len());
            prop_assert!(level.parents.iter().all(|&p| p < h.levels[l + 1].len()));
        }
    }
    Ok(())
}

/// Largest growth factor `‖Av‖/‖v‖` seen over power iterations from a random start.
fn power_iteration(a: &Tensor, rng: &mut Rng64) -> f64 {
    let n = a.shape()[0];
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let norm = dot(&v, &v).sqrt();
        let next: Vec<f64> = (0..n).map(|i| dot(a.row(i), &v)).collect();
        let grown = dot(&next, &next).sqrt();
        worst = worst.max(grown / norm);
        v = next.iter().map(|x| x / grown).collect();
    }
    worst
}

#[test]
fn kmeans_recovers_planted_clusters() {
    let mut rng = seeded(5);
    let anchors = [[10.0, 0.0], [-10.0, 5.0], [0.0, -12.0]];
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..60 {
        let a = anchors[i % 3];
        rows.push(vec![a[0] + rng.random_range(-0.5..0.5), a[1] + rng.random_range(-0.5..0.5)]);
        truth.push(i % 3);
    }
    let points = Tensor::from_rows(&rows).unwrap();
    let result = kmeans(&points, 3, &KMeansOptions::default()).unwrap();
    for i in 0..60 {
        for j in 0..60 {
            assert_eq!(truth[i] == truth[j], result.assignments[i] == result.assignments[j]);
        }
    }
}

#[test]
fn refresh_follows_a_planted_shift() {
    let mut rng = seeded(9);
    let rows: Vec<Vec<f64>> =
        (0..12).map(|i| vec![(i / 3) as f64 * 10.0 + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]).collect();
    let points = Tensor::from_rows(&rows).unwrap();
    let options = HierarchyOptions::default();
    let built = build_hierarchy(&points, &[4, 2], &options).unwrap();

    let unchanged = refresh_hierarchy(&points, &built, &options).unwrap();
    assert_eq!(unchanged.levels[0].assignments, built.levels[0].assignments);

    // Move item 0 into the third planted group.
    let mut shifted_rows = rows.clone();
    shifted_rows[0] = rows[7].clone();
    let shifted = refresh_hierarchy(&Tensor::from_rows(&shifted_rows).unwrap(), &built, &options).unwrap();
    assert_eq!(shifted.levels[0].assignments[0], shifted.levels[0].assignments[7]);
    assert_eq!(shifted.levels[0].assignments[1..], built.levels[0].assignments[1..]);
}

#[test]
fn deeper_backbone_keeps_feature_shape() {
    let mut rng = seeded(2);
    let shallow = BackboneConfig { channels: 8, depth: 2, kernel: 3, ..BackboneConfig::default() };
    let deep = BackboneConfig { depth: 4, ..shallow.clone() };
    let input = Tensor::new(vec![1, 16, 16, 16], (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    for config in [shallow, deep] {
        let params = BackboneParams::init(&config, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let v = tape.constant(input.clone());
        let fb = backbone_forward(&mut tape, v, &bound, &config).unwrap();
        assert_eq!(tape.value(fb).shape(), &[8, 8, 8, 8]);
        assert!(tape.value(fb).is_finite());
    }
}
