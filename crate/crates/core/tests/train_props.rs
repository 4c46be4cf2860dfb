use gst_core::dataset::{split_chronological, synthetic_constant_velocity};
use gst_core::train::{window_gradient, CheckpointSink};
use gst_core::{train, ModelCheckpoint, RolloutOptions, SamplingMode, TrainConfig, Variant};

fn config(id: u8, epochs: usize) -> TrainConfig {
    let v = Variant::from_id(id).unwrap();
    TrainConfig {
        epochs,
        batch_size: 2,
        augment: false,
        partial_input: v.partial_input,
        sparsity: v.sparsity,
        neighbors: v.neighbors,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn loss_falls_for_dense_and_sparse_variants() {
    let split = split_chronological(synthetic_constant_velocity(20, 3, (1.0, 1.4), 5));
    for id in [1, 8] {
        let out = train(&split, &config(id, 12), &CheckpointSink::default(), |_| {}).unwrap();
        let losses = out.log.losses();
        assert_eq!(losses.len(), 12);
        assert!(losses.iter().all(|l| l.is_finite()));
        let early = median(losses[..3].to_vec());
        let late = median(losses[9..].to_vec());
        assert!(late < early, "config {id}: {early} -> {late}");
    }
}

#[test]
fn dense_training_has_no_selector_gradient() {
    let windows = synthetic_constant_velocity(2, 4, (1.0, 1.4), 2);
    let model = gst_core::Model::init(config(1, 1).model_config(), 0).unwrap();
    let opts = RolloutOptions {
        mode: SamplingMode::Soft,
        ..RolloutOptions::default()
    };
    let (_, count, grads) = window_gradient(&model, &windows[0], false, &opts)
        .unwrap()
        .unwrap();
    assert_eq!(count, 4 * 12 * 2);
    assert!(grads.keys().all(|k| !k.starts_with("selector.")));
    assert!(grads.keys().any(|k| k.starts_with("encoder.")));

    let sparse = gst_core::Model::init(config(8, 1).model_config(), 0).unwrap();
    let (_, _, grads) = window_gradient(&sparse, &windows[0], true, &opts)
        .unwrap()
        .unwrap();
    assert!(grads.keys().any(|k| k.starts_with("selector.")));
}

#[test]
fn checkpoints_follow_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let split = split_chronological(synthetic_constant_velocity(10, 2, (1.0, 1.4), 9));
    let mut cfg = config(7, 4);
    cfg.checkpoint_every = 2;
    let sink = CheckpointSink {
        dir: Some(dir.path().to_path_buf()),
    };
    let out = train(&split, &cfg, &sink, |_| {}).unwrap();
    for f in [
        "best.json",
        "epoch0002.json",
        "epoch0004.json",
        "final.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let last = ModelCheckpoint::load(dir.path().join("final.json")).unwrap();
    assert_eq!(last.variant(), Variant::from_id(7).unwrap());
    assert_eq!(last.into_model(), out.model);
}
