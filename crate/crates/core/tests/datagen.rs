use confit::datagen::{generate, load_dataset, save_dataset, TaskSequenceSpec};

fn spec() -> TaskSequenceSpec {
    TaskSequenceSpec { train_per_class: 40, test_per_class: 10, pretext_classes: 3, ..TaskSequenceSpec::default() }
}

#[test]
fn shapes_and_balanced_labels() {
    let seq = generate(&spec()).unwrap();
    assert_eq!(seq.tasks.len(), 5);
    for (j, t) in seq.tasks.iter().enumerate() {
        assert_eq!(t.id, j);
        assert_eq!(t.train.x.shape(), &[160, 1, 16, 16]);
        assert_eq!(t.test.x.shape(), &[40, 1, 16, 16]);
        for c in 0..4 {
            assert_eq!(t.train.y.iter().filter(|&&y| y == c).count(), 40);
            assert_eq!(t.test.y.iter().filter(|&&y| y == c).count(), 10);
        }
        assert!(t.train.x.is_finite());
    }
    assert_eq!(seq.pretext.as_ref().unwrap().classes, 3);
}

#[test]
fn tasks_differ_in_input_statistics() {
    let seq = generate(&spec()).unwrap();
    let means: Vec<f64> = seq.tasks.iter().map(|t| t.train.x.sum() / t.train.x.len() as f64).collect();
    let spread =
        means.iter().copied().fold(f64::NEG_INFINITY, f64::max) - means.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(spread > 0.1, "task means {means:?}");
}

#[test]
fn generation_is_seeded() {
    assert_eq!(generate(&spec()).unwrap(), generate(&spec()).unwrap());
    assert_ne!(generate(&spec()).unwrap(), generate(&TaskSequenceSpec { seed: 1, ..spec() }).unwrap());
}

#[test]
fn dataset_directory_round_trip() {
    let seq = generate(&TaskSequenceSpec { num_tasks: 2, ..spec() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&seq, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), seq);
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn zero_counts_are_rejected() {
    assert!(generate(&TaskSequenceSpec { num_tasks: 0, ..spec() }).is_err());
    assert!(generate(&TaskSequenceSpec { noise_scale: f64::NAN, ..spec() }).is_err());
}
