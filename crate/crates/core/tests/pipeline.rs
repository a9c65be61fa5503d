use pgcm::checkpoint::ModelCheckpoint;
use pgcm::data::{generate_dataset, read_dataset, write_dataset, DatasetConfig};
use pgcm::eval::{evaluate, intervention_curve, CurveMode};
use pgcm::model::{ModelConfig, Status};
use pgcm::training::{train, TrainConfig};

fn small() -> (TrainConfig, DatasetConfig) {
    let mut config = TrainConfig::with_epochs(4);
    config.batch_size = 32;
    config.model = ModelConfig {
        prototypes: 6,
        embed_dim: 8,
        encoder_hidden: 32,
        decoder_hidden: 32,
        concept_hidden: 16,
        task_hidden: 16,
        ..ModelConfig::default()
    };
    let data = DatasetConfig { train: 200, val: 50, test: 50, ..DatasetConfig::default() };
    (config, data)
}

#[test]
fn dataset_round_trips_through_disk() {
    let (_, data) = small();
    let ds = generate_dataset(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.fingerprint(), ds.fingerprint());
    assert_eq!(generate_dataset(&data).unwrap().fingerprint(), ds.fingerprint());
}

#[test]
fn trained_checkpoint_reloads_and_evaluates_identically() {
    let (config, data) = small();
    let ds = generate_dataset(&data).unwrap();
    let (ck, report) = train(&config, &ds).unwrap();
    assert_eq!(report.epochs.len(), 4);
    assert_eq!(report.swap.as_ref().map(|s| s.epoch), Some(2));
    assert!(report.best_epoch >= 2);
    assert!(ck.model.bank.entries.iter().all(|e| e.status == Status::Swapped && e.stored_image.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back.model, ck.model);
    let a = evaluate(&ck.model, &ds.test, 1, "").unwrap();
    let b = evaluate(&back.model, &ds.test, 1, "").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.instances, 50);
    assert!((0.0..=1.0).contains(&a.concept_accuracy));
}

#[test]
fn curves_start_at_plain_accuracy_and_end_fully_corrected() {
    let (config, data) = small();
    let ds = generate_dataset(&data).unwrap();
    let (ck, _) = train(&config, &ds).unwrap();
    let plain = evaluate(&ck.model, &ds.test, 3, "").unwrap();
    for mode in [CurveMode::Standard, CurveMode::Propagating] {
        let curve = intervention_curve(&ck.model, &ds.test, mode, 3).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!(first.concept_accuracy, plain.concept_accuracy);
        assert_eq!(first.task_accuracy, plain.task_accuracy);
        assert_eq!(last.concept_accuracy, 1.0);
    }
}

#[test]
fn removed_prototype_is_never_selected() {
    let (config, data) = small();
    let ds = generate_dataset(&data).unwrap();
    let (mut ck, _) = train(&config, &ds).unwrap();
    ck.model.remove_prototype(0).unwrap();
    let table = ck.model.build_alignment_table(ck.model.config.tau).unwrap();
    assert!(table.rows.iter().all(|r| r.index != 0));
    let view = ck.model.prototype_view().unwrap();
    assert!(!view.active.contains(&0));
}
