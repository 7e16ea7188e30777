mod common;

use std::fs;

use common::*;
use ctc_distill::labelset::InventoryMode;
use ctc_distill::model::Direction;
use ctc_distill::trainer::checkpoint::Checkpoint;
use ctc_distill::trainer::pipeline::checkpoint_path;
use ctc_distill::trainer::{
    run_pipeline, run_pipeline_with, run_stage_with, CurriculumKind, Stage, StageInputs,
};
use ctc_distill::Error;

#[test]
fn pipeline_writes_three_checkpoints_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(&dir.path().join("corpus"));
    let out = dir.path().join("run");
    let cfg = tiny_pipeline(&m);

    let first = run_pipeline(&cfg, &out).unwrap();
    for stage in Stage::ALL {
        let p = checkpoint_path(&out, stage);
        assert!(p.exists(), "{}", p.display());
        assert!(first.get(stage).report.is_some());
        assert_eq!(Checkpoint::load(&p).unwrap(), first.get(stage).checkpoint);
    }
    assert_eq!(first.get(Stage::TeacherCtc).checkpoint.model.arch().direction, Direction::Bidirectional);
    assert_eq!(first.get(Stage::FinetuneCtc).checkpoint.model.arch().direction, Direction::Unidirectional);

    let bytes: Vec<Vec<u8>> = Stage::ALL.iter().map(|&s| fs::read(checkpoint_path(&out, s)).unwrap()).collect();
    let again = run_pipeline(&cfg, &out).unwrap();
    for (i, stage) in Stage::ALL.into_iter().enumerate() {
        assert!(again.get(stage).report.is_none(), "{stage} retrained");
        assert_eq!(fs::read(checkpoint_path(&out, stage)).unwrap(), bytes[i]);
    }

    // Removing the last checkpoint retrains only that stage, reproducibly.
    fs::remove_file(checkpoint_path(&out, Stage::FinetuneCtc)).unwrap();
    let third = run_pipeline(&cfg, &out).unwrap();
    assert!(third.get(Stage::DistillKl).report.is_none());
    assert!(third.get(Stage::FinetuneCtc).report.is_some());
    assert_eq!(fs::read(checkpoint_path(&out, Stage::FinetuneCtc)).unwrap(), bytes[2]);
}

#[test]
fn seed_change_is_a_fingerprint_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(&dir.path().join("corpus"));
    let data = tiny_data(&m);
    let out = dir.path().join("run");
    let mut cfg = tiny_pipeline(&m);
    cfg.set_stage(Stage::TeacherCtc, "max_epochs", "1").unwrap();
    run_pipeline_with(&cfg, &data, &out).unwrap();
    cfg.set_all("seed", "2").unwrap();
    match run_pipeline_with(&cfg, &data, &out) {
        Err(e @ Error::FingerprintMismatch { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupted_checkpoint_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(&dir.path().join("corpus"));
    let data = tiny_data(&m);
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    // A corrupt distill checkpoint with no teacher yet: nothing may train.
    fs::write(checkpoint_path(&out, Stage::DistillKl), b"CTCK garbage").unwrap();
    match run_pipeline_with(&tiny_pipeline(&m), &data, &out) {
        Err(Error::Format { .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(!checkpoint_path(&out, Stage::TeacherCtc).exists());
}

#[test]
fn stages_are_bitwise_reproducible_and_updates_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(dir.path());
    let data = tiny_data(&m);
    let cfg = tiny_stage(Stage::FinetuneCtc, &m);
    let inputs = StageInputs {
        data: &data,
        init: None,
        teacher: None,
    };
    let (a, ra) = run_stage_with(&cfg, inputs).unwrap();
    let (b, _) = run_stage_with(&cfg, inputs).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    for e in &ra.epochs {
        assert_eq!(e.updates as usize, data.train.len() - e.skipped);
    }
    assert_eq!(a.updates, ra.epochs.iter().map(|e| e.updates).sum::<u64>());
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(dir.path());
    let data = tiny_data(&m);
    let mut cfg = tiny_stage(Stage::TeacherCtc, &m);
    cfg.accumulate = 4;
    let inputs = StageInputs {
        data: &data,
        init: None,
        teacher: None,
    };
    let (serial, _) = run_stage_with(&cfg, inputs).unwrap();
    cfg.workers = 3;
    let (parallel, _) = run_stage_with(&cfg, inputs).unwrap();
    assert_eq!(serial.to_bytes(), parallel.to_bytes());
}

#[test]
fn distillation_leaves_the_teacher_alone_and_starts_at_its_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(dir.path());
    let data = tiny_data(&m);
    // A unidirectional teacher, so the student can start as an exact copy.
    let (teacher, _) = run_stage_with(
        &tiny_stage(Stage::FinetuneCtc, &m),
        StageInputs {
            data: &data,
            init: None,
            teacher: None,
        },
    )
    .unwrap();
    let before = teacher.to_bytes();
    let mut cfg = tiny_stage(Stage::DistillKl, &m);
    cfg.max_epochs = 1;
    let (student, report) = run_stage_with(
        &cfg,
        StageInputs {
            data: &data,
            init: Some(&teacher),
            teacher: Some(&teacher),
        },
    )
    .unwrap();
    assert_eq!(teacher.to_bytes(), before);
    // P = Q gives a zero gradient, so nothing moves.
    assert_eq!(student.model, teacher.model);
    let floor: f64 = data
        .dev
        .iter()
        .map(|ex| {
            let p = teacher.model.posteriors(&ex.utt.features).unwrap();
            p.mean_entropy() * p.frames() as f64
        })
        .sum::<f64>()
        / data.dev.len() as f64;
    let dev = report.epochs[0].dev_criterion;
    assert!((dev - floor).abs() < 1e-9 * floor.max(1.0), "{dev} vs {floor}");
}

#[test]
fn distillation_without_a_teacher_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(dir.path());
    let data = tiny_data(&m);
    let r = run_stage_with(
        &tiny_stage(Stage::DistillKl, &m),
        StageInputs {
            data: &data,
            init: None,
            teacher: None,
        },
    );
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn curricula_run_their_phases() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(dir.path());
    let data = tiny_data(&m);
    let inputs = StageInputs {
        data: &data,
        init: None,
        teacher: None,
    };

    let mut cfg = tiny_stage(Stage::FinetuneCtc, &m);
    cfg.max_epochs = 3;
    cfg.curriculum = CurriculumKind::ReducedLabels;
    cfg.curriculum_epochs = 1;
    let (ckpt, report) = run_stage_with(&cfg, inputs).unwrap();
    let modes: Vec<_> = report.epochs.iter().map(|e| e.mode).collect();
    assert_eq!(modes, [InventoryMode::Reduced, InventoryMode::Full, InventoryMode::Full]);
    assert_eq!(ckpt.model.arch().output_dim, 80);

    cfg.curriculum = CurriculumKind::ShortFirst;
    let (_, report) = run_stage_with(&cfg, inputs).unwrap();
    let first = &report.epochs[0];
    let second = &report.epochs[1];
    assert!(first.updates as usize + first.skipped < data.train.len());
    assert_eq!(second.updates as usize + second.skipped, data.train.len());
}

#[test]
fn lr_trajectory_only_moves_by_the_decay_factor() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_corpus(dir.path());
    let data = tiny_data(&m);
    let mut cfg = tiny_stage(Stage::FinetuneCtc, &m);
    // A rate large enough to overshoot, so the dev loss gets worse sometimes.
    cfg.learning_rate = 0.05;
    cfg.max_epochs = 6;
    let (_, report) = run_stage_with(
        &cfg,
        StageInputs {
            data: &data,
            init: None,
            teacher: None,
        },
    )
    .unwrap();
    let lrs = report.lr_trajectory();
    for w in lrs.windows(2) {
        assert!(w[1] == w[0] || w[1] == w[0] * cfg.lr_decay, "{lrs:?}");
    }
}
