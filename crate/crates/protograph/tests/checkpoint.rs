use protograph::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use protograph::synth::{generate, SynthSpec};
use protograph_core::config::TrainConfig;
use protograph_core::gradcheck::tiny_model;
use protograph_core::train::{forward_values, Sample, Trainer};

fn trained() -> (Checkpoint, Vec<(protograph_core::Tensor, usize)>) {
    let spec = SynthSpec { dims: [8, 8, 8], corner_inset: 2.0, blob_radius: 1.0, train: 8, test: 0, ..SynthSpec::default() };
    let data: Vec<_> = generate(&spec, 4).unwrap().volumes.into_iter().map(|v| (v.volume, v.label)).collect();
    let samples: Vec<Sample<'_>> = data.iter().map(|(volume, label)| Sample { volume, label: *label }).collect();
    let (model, counts) = tiny_model();
    let train = TrainConfig { epochs: 3, warmup_epochs: 1, base_lr: 0.003, hierarchy_counts: counts, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, train).unwrap();
    trainer.fit(&samples, None, |_| {}).unwrap();
    let ckpt = Checkpoint { model: trainer.model, train: trainer.config, state: trainer.state };
    (ckpt, data)
}

#[test]
fn round_trip_preserves_state_and_forward_outputs() {
    let (ckpt, data) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.pgck");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let h = ckpt.state.hierarchy.as_ref().unwrap();
    for (volume, _) in &data {
        let a = forward_values(&ckpt.state.params, &ckpt.model, h, volume).unwrap();
        let b = forward_values(&back.state.params, &back.model, back.state.hierarchy.as_ref().unwrap(), volume).unwrap();
        let bits = |t: &protograph_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        assert_eq!(bits(&a.effective), bits(&b.effective));
    }
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let (ckpt, _) = trained();
    let bytes = encode_checkpoint(&ckpt).unwrap();
    for cut in [0, 5, 13, 40, bytes.len() - 8, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "cut at {cut}: {err}");
    }
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 8]);
    assert!(decode_checkpoint(&longer).is_err());

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"VOLB");
    assert!(decode_checkpoint(&magic).unwrap_err().to_string().contains("magic"));
}

#[test]
fn newer_format_version_is_refused() {
    let (ckpt, _) = trained();
    let mut bytes = encode_checkpoint(&ckpt).unwrap();
    bytes[4] += 1;
    let err = decode_checkpoint(&bytes).unwrap_err().to_string();
    assert!(err.contains("version 2"), "{err}");
}
