use confit::continual::{
    continual_run, load_checkpoint, save_checkpoint, Architecture, NormMode, RunState, ScheduleMode, StageSchedule,
    TrainConfig,
};
use confit::datagen::{generate, TaskSequence, TaskSequenceSpec};
use confit::tensor::ConvSpec;
use confit::Error;

fn small_sequence() -> TaskSequence {
    generate(&TaskSequenceSpec {
        num_tasks: 3,
        classes_per_task: 2,
        train_per_class: 12,
        test_per_class: 6,
        height: 8,
        width: 8,
        pretext_classes: 2,
        pretext_train_per_class: 8,
        ..TaskSequenceSpec::default()
    })
    .unwrap()
}

fn small_config(mode: NormMode, schedule: ScheduleMode) -> TrainConfig {
    TrainConfig {
        lr: 0.1,
        batch_size: 8,
        norm_mode: mode,
        schedule: StageSchedule { total_epochs: 3, mode: schedule, ..StageSchedule::default() },
        pretrain_epochs: 1,
        architecture: Architecture {
            input: [1, 8, 8],
            convs: vec![ConvSpec::new(3, 1, 3, 1, 2), ConvSpec::new(4, 3, 2, 2, 0)],
        },
        ..TrainConfig::default()
    }
}

#[test]
fn every_mode_fills_the_upper_triangle() {
    let seq = small_sequence();
    for mode in [NormMode::SharedBn, NormMode::TaskBn, NormMode::XconvBn] {
        for schedule in
            [ScheduleMode::PlainFt, ScheduleMode::Hierarchical, ScheduleMode::LinearProbeOnly, ScheduleMode::Stl]
        {
            let run = continual_run(&seq, small_config(mode, schedule)).unwrap();
            assert!(run.is_finished());
            for i in 0..3 {
                for j in 0..3 {
                    let cell = run.matrix.get(i, j);
                    if j >= i {
                        assert!((0.0..=1.0).contains(&cell.unwrap()), "{mode:?} {schedule:?} ({i},{j})");
                    } else {
                        assert!(cell.is_none());
                    }
                }
            }
            let summary = run.summary().unwrap();
            assert!(summary.fgt_defined && summary.fgt >= 0.0);
        }
    }
}

#[test]
fn linear_probing_leaves_convolutions_untouched() {
    let seq = small_sequence();
    let start = RunState::start(&seq, small_config(NormMode::XconvBn, ScheduleMode::LinearProbeOnly)).unwrap();
    let mut run = start.clone();
    run.run_until(&seq, 3).unwrap();
    for (before, after) in start.model.blocks.iter().zip(&run.model.blocks) {
        assert_eq!(before.conv.weight, after.conv.weight);
        assert_eq!(before.conv.bias, after.conv.bias);
    }
}

#[test]
fn single_task_models_do_not_interfere() {
    let seq = small_sequence();
    let run = continual_run(&seq, small_config(NormMode::SharedBn, ScheduleMode::Stl)).unwrap();
    let fgt = run.forgetting().unwrap();
    assert_eq!(fgt.value, 0.0);
    for i in 0..3 {
        let first = run.matrix.get(i, i).unwrap();
        assert!((i..3).all(|j| run.matrix.get(i, j).unwrap() == first));
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let seq = small_sequence();
    let cfg = small_config(NormMode::XconvBn, ScheduleMode::Hierarchical);
    let full = continual_run(&seq, cfg.clone()).unwrap();
    let mut part = RunState::start(&seq, cfg).unwrap();
    part.step(&seq).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&part, dir.path()).unwrap();
    let mut resumed = load_checkpoint(dir.path()).unwrap();
    assert_eq!(resumed, part);
    resumed.run_until(&seq, 3).unwrap();
    assert_eq!(resumed, full);
    assert!(resumed.step(&seq).is_err());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(&dir.path().join("absent")).is_err());
}

#[test]
fn config_rejects_unknown_fields_and_bad_values() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "learning_rate": 0.1}"#).is_err());
    let cfg: TrainConfig =
        serde_json::from_str(r#"{"norm_mode": "task_bn", "schedule": {"mode": "plain_ft"}}"#).unwrap();
    assert_eq!(cfg.norm_mode, NormMode::TaskBn);
    assert_eq!(cfg.schedule.stage_epochs(), [0, 0, 10]);
    let bad = TrainConfig { lr: -1.0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn hierarchical_split_is_twenty_thirty_fifty() {
    assert_eq!(StageSchedule::default().stage_epochs(), [2, 3, 5]);
    let lp = StageSchedule { mode: ScheduleMode::LinearProbeOnly, ..StageSchedule::default() };
    assert_eq!(lp.stage_epochs(), [10, 0, 0]);
}
