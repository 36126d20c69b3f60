use rand::Rng;

use protograph_core::config::{LossWeights, ModelConfig, TrainConfig};
use protograph_core::gradcheck::tiny_model;
use protograph_core::layers::{seeded, uniform, Parameters, Rng64};
use protograph_core::model::{
    model_forward, prototype_losses, total_loss, ModelParams, PrototypeLossSettings, StepConstants,
};
use protograph_core::prototype::{build_hierarchy, project_embeddings, HierarchyOptions, PrototypeHierarchy};
use protograph_core::train::{Phase, Sample, Trainer};
use protograph_core::{Tape, Tensor};

const SETTINGS: PrototypeLossSettings = PrototypeLossSettings { alpha: 10.0, tau: 0.2, phi_floor: 0.2 };

fn hierarchy_for(channels: usize, counts: &[usize], rng: &mut Rng64) -> PrototypeHierarchy {
    let points = uniform(&[channels, 6], 1.0, rng);
    build_hierarchy(&points, counts, &HierarchyOptions::default()).unwrap()
}

fn zero_head(params: &mut ModelParams) {
    for t in [
        &mut params.aux_head.weight,
        &mut params.aux_head.bias,
        &mut params.classifier.weight,
        &mut params.classifier.bias,
    ] {
        t.data_mut().fill(0.0);
    }
}

/// Volumes with a bright (class 1) or dark (class 0) central blob over noise.
fn separable(count: usize, seed: u64) -> Vec<(Tensor, usize)> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let mut data = Vec::with_capacity(512);
            for d in 0..8 {
                for h in 0..8 {
                    for w in 0..8 {
                        let r2 = [d, h, w].iter().map(|&x| (x as f64 - 3.5).powi(2)).sum::<f64>();
                        data.push(sign * (-r2 / 4.0).exp() + 0.1 * rng.random_range(-1.0..1.0));
                    }
                }
            }
            (Tensor::new(vec![1, 8, 8, 8], data).unwrap(), label)
        })
        .collect()
}

fn samples(data: &[(Tensor, usize)]) -> Vec<Sample<'_>> {
    data.iter().map(|(volume, label)| Sample { volume, label: *label }).collect()
}

fn tiny_train() -> (ModelConfig, TrainConfig) {
    let (model, counts) = tiny_model();
    let train = TrainConfig {
        epochs: 20,
        base_lr: 0.003,
        lr_decay_every: 100,
        hierarchy_counts: counts,
        refresh_period: Some(5),
        warmup_epochs: 2,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    (model, train)
}

#[test]
fn zero_parameters_give_classifier_bias() {
    let (config, counts) = tiny_model();
    let mut rng = seeded(1);
    let mut params = ModelParams::init(&config, counts[0], &mut rng).unwrap();
    for t in params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    params.classifier.bias = Tensor::from_vec(vec![0.25, -1.5]);
    let hierarchy = hierarchy_for(8, &counts, &mut rng);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(uniform(&[1, 8, 8, 8], 1.0, &mut rng));
    let f = model_forward(&mut tape, &bound, &config, v, hierarchy.channel_assignments()).unwrap();
    assert_eq!(tape.value(f.logits).data(), &[0.25, -1.5]);
}

#[test]
fn default_model_shapes_at_sixteen_nodes() {
    let config = ModelConfig::default();
    let mut rng = seeded(4);
    let params = ModelParams::init(&config, 16, &mut rng).unwrap();
    let hierarchy = hierarchy_for(32, &[16, 8, 4], &mut rng);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(uniform(&[1, 16, 16, 16], 1.0, &mut rng));
    let f = model_forward(&mut tape, &bound, &config, v, hierarchy.channel_assignments()).unwrap();
    assert_eq!(tape.value(f.fb).shape(), &[32, 8, 8, 8]);
    assert_eq!(tape.value(f.fh).shape(), &[16, 8, 8, 8]);
    assert_eq!(tape.value(f.adjacency.normalized).shape(), &[16, 16]);
    assert_eq!(tape.value(f.fg).shape(), &[16, config.graph.out]);
    assert_eq!(tape.value(f.logits).shape(), &[2]);
    assert!(tape.value(f.logits).is_finite());
}

#[test]
fn identical_heads_without_prototype_terms_double_the_cross_entropy() {
    let (config, counts) = tiny_model();
    let mut rng = seeded(6);
    let mut params = ModelParams::init(&config, counts[0], &mut rng).unwrap();
    zero_head(&mut params);
    let bias = Tensor::from_vec(vec![0.7, -0.4]);
    params.aux_head.bias = bias.clone();
    params.classifier.bias = bias;
    let hierarchy = hierarchy_for(8, &counts, &mut rng);
    let weights = LossWeights { node: 0.0, edge: 0.0, ..LossWeights::default() };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(uniform(&[1, 8, 8, 8], 1.0, &mut rng));
    let f = model_forward(&mut tape, &bound, &config, v, hierarchy.channel_assignments()).unwrap();
    let (_, terms) = total_loss(&mut tape, &bound, &config, &f, 1, &hierarchy, &weights, &SETTINGS, None).unwrap();
    let ce = -(-0.4f64 - (0.7f64.exp() + (-0.4f64).exp()).ln());
    assert!((terms.total - 2.0 * ce).abs() < 1e-12);
    assert_eq!((terms.node, terms.edge), (0.0, 0.0));
}

#[test]
fn zero_logits_give_two_ln_two_plus_prototype_terms() {
    let (config, counts) = tiny_model();
    let mut rng = seeded(8);
    let mut params = ModelParams::init(&config, counts[0], &mut rng).unwrap();
    zero_head(&mut params);
    let hierarchy = hierarchy_for(8, &counts, &mut rng);
    let volume = uniform(&[1, 8, 8, 8], 1.0, &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v = tape.constant(volume);
    let f = model_forward(&mut tape, &bound, &config, v, hierarchy.channel_assignments()).unwrap();
    let (_, terms) =
        total_loss(&mut tape, &bound, &config, &f, 0, &hierarchy, &LossWeights::default(), &SETTINGS, None).unwrap();

    // Prototype terms evaluated on their own from the same features.
    let (emb, live) = project_embeddings(&mut tape, f.fb, &bound.projection, &config.projection).unwrap();
    let constants = StepConstants::from_embeddings(tape.value(emb), &hierarchy, &SETTINGS).unwrap();
    let (node, edge) = prototype_losses(&mut tape, emb, &live, &hierarchy, &constants, &SETTINGS).unwrap();
    let (node, edge) = (tape.value(node).item(), tape.value(edge).item());

    assert!(node != 0.0 && edge != 0.0);
    assert_eq!((terms.node, terms.edge), (node, edge));
    let expected = 2.0 * 2f64.ln() + node + edge;
    assert!((terms.total - expected).abs() < 1e-12, "{} vs {expected}", terms.total);
}

#[test]
fn one_epoch_smoke_run() {
    let data = separable(4, 1);
    let (model, train) = tiny_train();
    let train = TrainConfig { epochs: 1, warmup_epochs: 0, ..train };
    let mut trainer = Trainer::new(model, train).unwrap();
    trainer.fit(&samples(&data), None, |_| {}).unwrap();
    assert_eq!(trainer.state.history.len(), 1);
    assert_eq!(trainer.state.next_epoch, 1);
    assert!(trainer.state.hierarchy.is_some());
    assert!(trainer.state.history[0].losses.total.is_finite());
}

#[test]
fn fixed_seed_gives_bit_identical_history() {
    let data = separable(8, 2);
    let run = || {
        let (model, train) = tiny_train();
        let mut trainer = Trainer::new(model, TrainConfig { epochs: 4, ..train }).unwrap();
        trainer.fit(&samples(&data), Some(&samples(&data)), |_| {}).unwrap();
        trainer.state
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history.len(), 4);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.losses.total.to_bits(), y.losses.total.to_bits());
    }
    assert_eq!(a, b);
}

#[test]
fn training_loss_falls_on_a_separable_task() {
    let data = separable(16, 3);
    let (model, train) = tiny_train();
    let mut trainer = Trainer::new(model, train).unwrap();
    trainer.fit(&samples(&data), None, |_| {}).unwrap();
    let joint: Vec<_> = trainer.state.history.iter().filter(|r| r.phase == Phase::Joint).collect();
    assert_eq!(joint.len(), 18);
    let (first, last) = (joint[0], joint[joint.len() - 1]);
    assert!(last.losses.cls2 < first.losses.cls2, "{} -> {}", first.losses.cls2, last.losses.cls2);
    assert!(last.losses.total < first.losses.total, "{} -> {}", first.losses.total, last.losses.total);
    assert!(last.train_acc >= 0.9);
}

#[test]
fn main_head_alone_descends_with_a_frozen_hierarchy() {
    let data = separable(16, 4);
    let (model, train) = tiny_train();
    let train = TrainConfig {
        epochs: 5,
        warmup_epochs: 0,
        refresh_period: None,
        loss_weights: LossWeights { cls1: 0.0, cls2: 1.0, node: 0.0, edge: 0.0 },
        ..train
    };
    let mut trainer = Trainer::new(model, train).unwrap();
    trainer.fit(&samples(&data), None, |_| {}).unwrap();
    let losses: Vec<f64> = trainer.state.history.iter().map(|r| r.losses.total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(trainer.state.history.iter().skip(1).all(|r| !r.hierarchy_rebuilt));
}
