use std::fs;

use dsrlab::backbone::{CriticConfig, DepthNetConfig, EncoderConfig};
use dsrlab::model::{Dsrnet, ModelConfig};
use dsrlab::synthgen::{generate, SampleRecord, SynthConfig};
use dsrlab::trainer::checkpoint::{self, weights_hash};
use dsrlab::trainer::{
    lr_schedule, load_generator, train_student_distill, train_teacher, FrozenTeacher, Mode, TeacherTrainer, TrainConfig,
    CONFIG_FILE,
};
use dsrlab::Error;
use proptest::prelude::*;

fn micro_model(blocks: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            base_channels: 8,
            res_blocks_per_stage: blocks,
        },
        depth_net: DepthNetConfig {
            unet_depth: 2,
            base_channels: 4,
        },
        critic: CriticConfig { base_channels: 4 },
        ..ModelConfig::toy_teacher()
    }
}

fn micro(mode: Mode, steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: Some(steps),
        model: micro_model(if mode.is_student() { 2 } else { 3 }),
        teacher_model: micro_model(3),
        adm_width: 4,
        holdout: 0,
        checkpoint_every: 1000,
        ..TrainConfig::toy(mode, seed)
    }
}

fn data(n: usize) -> Vec<SampleRecord> {
    generate(&SynthConfig {
        n,
        seed: 5,
        hr_h: 32,
        hr_w: 32,
        camera_step: 0.15,
    })
    .unwrap()
}

#[test]
fn schedule_hand_values() {
    assert_eq!(lr_schedule(0, 1000, 2e-4, 1e-7).unwrap(), 2e-4);
    let mid = lr_schedule(500, 1000, 2e-4, 1e-7).unwrap();
    assert!((mid - 1.0005e-4).abs() < 1e-15, "{mid}");
    assert!((lr_schedule(1000, 1000, 2e-4, 1e-7).unwrap() - 1e-7).abs() < 1e-18);
    assert!(matches!(lr_schedule(1001, 1000, 2e-4, 1e-7), Err(Error::Range(_))));
}

proptest! {
    #[test]
    fn schedule_never_increases(total in 1u64..5000, lr0 in 1e-6f64..1e-2, frac in 0.0f64..1.0) {
        let eta = lr0 * frac;
        let mut prev = f64::INFINITY;
        for t in (0..=total).step_by((total as usize / 50).max(1)) {
            let lr = lr_schedule(t, total, lr0, eta).unwrap();
            let slack = 1e-12 * lr0;
            prop_assert!(lr <= prev + slack && lr >= eta - slack && lr <= lr0 + slack);
            prev = lr;
        }
    }
}

#[test]
fn default_config_echo_has_250_epochs() {
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 250,
        steps: None,
        ..micro(Mode::TeacherRecOnly, 0, 0)
    };
    assert_eq!(TrainConfig::default().epochs, 250);
    assert_eq!(cfg.total_steps(2), 500);
    let cfg = TrainConfig { steps: Some(1), ..cfg };
    train_teacher(&cfg, &d, dir.path()).unwrap();
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(echo["epochs"], 250);
}

#[test]
fn rec_only_leaves_depth_net_without_gradient() {
    let d = data(1);
    for (mode, expect_zero) in [(Mode::TeacherRecOnly, true), (Mode::TeacherRecDep, false)] {
        let t = TeacherTrainer::new(&micro(mode, 1, 0)).unwrap();
        let grads = t.generator_grads(&d[0]).unwrap();
        let mut depth_norm = 0.0f64;
        for (id, gr) in t.gen.ids().zip(&grads) {
            if Dsrnet::is_depth_param(t.gen.name(id)) {
                depth_norm += gr.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            }
        }
        assert_eq!(depth_norm == 0.0, expect_zero, "{mode:?}: depth grad norm² {depth_norm}");
    }
}

#[test]
fn short_training_reduces_loss() {
    let d = data(8);
    let dir = tempfile::tempdir().unwrap();
    let out = train_teacher(&micro(Mode::TeacherRecDep, 200, 1), &d, dir.path()).unwrap();
    let total = out.log.column("total").unwrap();
    let head: f64 = total[..40].iter().sum::<f64>() / 40.0;
    let tail: f64 = total[160..].iter().sum::<f64>() / 40.0;
    assert!(tail < head, "first 40 mean {head}, last 40 mean {tail}");
}

#[test]
fn reloaded_checkpoint_reproduces_loss() {
    let d = data(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro(Mode::TeacherFull, 5, 2);
    let out = train_teacher(&cfg, &d, dir.path()).unwrap();
    let ck = checkpoint::load(&out.checkpoint).unwrap();
    let mut fresh = TeacherTrainer::new(&cfg).unwrap();
    let before = fresh.eval_loss(&d[0]).unwrap();
    fresh.restore(&ck).unwrap();
    let after = fresh.eval_loss(&d[0]).unwrap();
    assert_ne!(before, after);
    // Same weights through the loader used for evaluation.
    let (_, store, _) = load_generator(&out.checkpoint).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.gen.iter()) {
        assert_eq!(a, b);
    }
    let mut again = TeacherTrainer::new(&cfg).unwrap();
    again.restore(&ck).unwrap();
    assert!((again.eval_loss(&d[0]).unwrap() - after).abs() <= 1e-6);
}

#[test]
fn same_seed_same_run() {
    let d = data(3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = micro(Mode::TeacherFull, 12, 3);
    let ra = train_teacher(&cfg, &d, a.path()).unwrap();
    let rb = train_teacher(&cfg, &d, b.path()).unwrap();
    assert_eq!(ra.log, rb.log);
    assert_eq!(weights_hash(&ra.checkpoint).unwrap(), weights_hash(&rb.checkpoint).unwrap());
    let other = train_teacher(&micro(Mode::TeacherFull, 12, 4), &d, &a.path().join("other")).unwrap();
    assert_ne!(other.log, ra.log);
}

#[test]
fn distillation_reads_but_never_writes_the_teacher() {
    let d = data(3);
    let dir = tempfile::tempdir().unwrap();
    let teacher = train_teacher(&micro(Mode::TeacherRecDep, 4, 0), &d, &dir.path().join("t")).unwrap();
    let before = weights_hash(&teacher.checkpoint).unwrap();
    let bytes = fs::read(teacher.checkpoint.join(checkpoint::WEIGHTS_FILE)).unwrap();
    let st = train_student_distill(&micro(Mode::StudentDistill, 6, 0), &teacher.checkpoint, &d, &dir.path().join("s")).unwrap();
    assert_eq!(weights_hash(&teacher.checkpoint).unwrap(), before);
    assert_eq!(fs::read(teacher.checkpoint.join(checkpoint::WEIGHTS_FILE)).unwrap(), bytes);
    for col in ["kd", "ad", "ad_e", "ad_d"] {
        assert!(st.log.column(col).unwrap().iter().all(|&v| v > 0.0), "{col}");
    }
}

#[test]
fn teacher_architecture_mismatch_is_a_config_error() {
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let teacher = train_teacher(&micro(Mode::TeacherRecDep, 1, 0), &d, dir.path()).unwrap();
    assert!(FrozenTeacher::load(&teacher.checkpoint, &micro_model(3)).is_ok());
    assert!(matches!(FrozenTeacher::load(&teacher.checkpoint, &micro_model(4)), Err(Error::Config(_))));
    let cfg = TrainConfig {
        teacher_model: micro_model(2),
        ..micro(Mode::StudentDistill, 1, 0)
    };
    let r = train_student_distill(&cfg, &teacher.checkpoint, &d, &dir.path().join("s"));
    assert!(matches!(r, Err(Error::Config(_))));
    let student = train_student_distill(&micro(Mode::StudentPlain, 1, 0), &teacher.checkpoint, &d, &dir.path().join("p")).unwrap();
    assert!(matches!(FrozenTeacher::load(&student.checkpoint, &micro_model(2)), Err(Error::Config(_))));
}

#[test]
fn students_must_be_two_block() {
    let cfg = TrainConfig {
        model: micro_model(3),
        ..micro(Mode::StudentKd, 1, 0)
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
