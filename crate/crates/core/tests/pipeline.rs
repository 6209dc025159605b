use std::sync::Arc;

use disentangle::data::{read_archive, write_archive, Dataset, SynthDataset, SynthSpec};
use disentangle::eval::{accuracy, emit_reconstruction_grid, reconstruction_report};
use disentangle::model::{load_checkpoint, DisentangleModel, ModelConfig, ModelKind};
use disentangle::training::{
    finetune_classifier, initial_classifier, params_digest, pretrain, pretrain_autoencoder, read_metrics, InitMode,
    TrainConfig,
};

fn tiny_data(seed: u64, per_class: usize) -> Arc<dyn Dataset> {
    let spec = SynthSpec {
        frame_size: 16,
        frames: 4,
        channels: 1,
        seed,
        ..SynthSpec::default()
    };
    Arc::new(SynthDataset::new(spec, per_class).unwrap())
}

fn quick() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2,
        val_fraction: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn archive_roundtrip_preserves_items() {
    let ds = tiny_data(1, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dsa");
    write_archive(&path, "echo", ds.as_ref()).unwrap();
    let (back, echo) = read_archive(&path).unwrap();
    assert_eq!(echo, "echo");
    assert_eq!(back.len(), ds.len());
    for i in 0..ds.len() {
        let (a, b) = (ds.get(i).unwrap(), back.get(i).unwrap());
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.label, b.label);
    }
}

#[test]
fn pretrain_then_transfer_on_tiny() {
    let cfg = ModelConfig::tiny(8);
    let dir = tempfile::tempdir().unwrap();
    let (model, outcome) = pretrain(tiny_data(2, 2), &cfg, &quick(), &dir.path().join("dis"), "run").unwrap();

    let best = load_checkpoint(&outcome.best_checkpoint).unwrap();
    assert_eq!(best.kind, ModelKind::Disentangle);
    let final_ckpt = load_checkpoint(&outcome.final_checkpoint).unwrap();
    let reloaded = DisentangleModel::from_params(final_ckpt.model, final_ckpt.params).unwrap();
    let clip = tiny_data(3, 1).get(0).unwrap().clip;
    let a = model.forward(&clip).unwrap().fg_first;
    let b = reloaded.forward(&clip).unwrap().fg_first;
    assert_eq!(a, b, "final.ckpt holds the returned parameters");

    let metrics = read_metrics(&outcome.metrics).unwrap();
    assert_eq!(metrics.iter().filter(|r| r.split == "val").count(), outcome.epochs_run);
    assert!(metrics.iter().all(|r| r.stats.total.is_finite()));

    let report = reconstruction_report(&model, tiny_data(3, 1).as_ref(), 0.1).unwrap();
    assert_eq!(report.n_items, 8);
    assert!(report.fg_iou.is_some());

    let png = dir.path().join("grid.png");
    let item = tiny_data(3, 1).get(0).unwrap();
    emit_reconstruction_grid(&model, &item.clip, item.mask.as_ref().unwrap(), &png).unwrap();
    assert!(png.exists());

    let (_, ae) = pretrain_autoencoder(tiny_data(2, 2), &cfg, &quick(), &dir.path().join("ae"), "run").unwrap();
    assert_eq!(load_checkpoint(&ae.best_checkpoint).unwrap().kind, ModelKind::Autoencoder);

    let modes = [
        InitMode::Random,
        InitMode::AutoencoderPretrained(ae.best_checkpoint.clone()),
        InitMode::DisentanglePretrained(outcome.best_checkpoint.clone()),
    ];
    let heads: Vec<String> = modes
        .iter()
        .map(|m| params_digest(&initial_classifier(&cfg, m, 5).unwrap().params.with_prefix("head")))
        .collect();
    assert!(heads.windows(2).all(|w| w[0] == w[1]));

    let ft = TrainConfig { seed: 5, ..quick() };
    let (clf, run) = finetune_classifier(tiny_data(4, 2), &cfg, &modes[2], &ft, false, &dir.path().join("ft"), "run").unwrap();
    assert_eq!(load_checkpoint(&run.best_checkpoint).unwrap().kind, ModelKind::Classifier);
    let acc = accuracy(&clf, tiny_data(5, 1).as_ref()).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn wrong_checkpoint_kind_is_rejected_for_transfer() {
    let cfg = ModelConfig::tiny(8);
    let dir = tempfile::tempdir().unwrap();
    let (_, outcome) = pretrain(tiny_data(6, 1), &cfg, &TrainConfig { epochs: 1, ..quick() }, dir.path(), "run").unwrap();
    let err = initial_classifier(&cfg, &InitMode::AutoencoderPretrained(outcome.best_checkpoint), 0);
    assert!(err.is_err());
}

#[test]
fn maskless_clips_are_rejected_by_pretraining() {
    use disentangle::data::{AnnotatedClip, InMemoryDataset};
    let ds = tiny_data(7, 1);
    let items: Vec<AnnotatedClip> = (0..ds.len())
        .map(|i| {
            let mut it = ds.get(i).unwrap();
            if i == 3 {
                it.mask = None;
            }
            it
        })
        .collect();
    let mem: Arc<dyn Dataset> = Arc::new(InMemoryDataset::new(items, Some(8)).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 1, val_fraction: 0.5, ..quick() };
    let err = pretrain(mem, &ModelConfig::tiny(8), &cfg, dir.path(), "run").unwrap_err();
    assert!(err.is_validation(), "{err}");
}
