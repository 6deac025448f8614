//! Training-loop invariants: phase ownership, method wiring, determinism and
//! checkpoint resume.

mod common;

use common::{tiny_bundle, tiny_config};
use dualteacher::checkpoint::Checkpoint;
use dualteacher::error::Error;
use dualteacher::losses::lambda_con;
use dualteacher::phantom::DatasetBundle;
use dualteacher::rng;
use dualteacher::segnet::{AugmentConfig, NormKind};
use dualteacher::trainer::{
    make_method_state, train, train_step_dual_teacher, LabeledBatch, Method, StepBatches, StreamCursor, TrainState,
};
use proptest::prelude::*;

fn target_batch(bundle: &DatasetBundle) -> LabeledBatch {
    LabeledBatch {
        images: bundle.d_t.iter().take(4).map(|s| s.image.clone()).collect(),
        labels: bundle.d_t.iter().take(4).map(|s| s.label.clone().unwrap()).collect(),
        masks: None,
    }
}

/// Source batch as the method would see it (translated when it translates).
fn source_batch(state: &TrainState<f64>, bundle: &DatasetBundle, offset: usize) -> LabeledBatch {
    let items = bundle.d_s.iter().skip(offset).take(4);
    LabeledBatch {
        images: items
            .clone()
            .map(|s| match &state.translator {
                Some(tr) => tr.translate(&s.image).unwrap(),
                None => s.image.clone(),
            })
            .collect(),
        labels: items.map(|s| s.label.clone().unwrap()).collect(),
        masks: None,
    }
}

fn step_batches(state: &TrainState<f64>, bundle: &DatasetBundle) -> StepBatches {
    let m = state.config.method;
    StepBatches {
        source: m.uses_source().then(|| source_batch(state, bundle, 0)),
        target: target_batch(bundle),
        unlabeled: m
            .uses_unlabeled()
            .then(|| bundle.d_u.iter().take(4).map(|s| s.image.clone()).collect()),
        pseudo: None,
    }
}

fn state(method: Method, seed: u64, bundle: &DatasetBundle) -> TrainState<f64> {
    let mut cfg = tiny_config(method, seed, 4);
    cfg.augment = AugmentConfig::disabled();
    make_method_state(&cfg, bundle).unwrap()
}

#[test]
fn each_phase_only_moves_the_model_it_owns() {
    let bundle = tiny_bundle(3);
    let mut s = state(Method::DualTeacher, 0, &bundle);
    let batches = step_batches(&s, &bundle);
    let student0 = s.student.params().clone();
    let inter0 = s.inter_teacher.as_ref().unwrap().params().clone();
    let ema0 = s.ema_state.clone().unwrap();
    let (a, b) = ema0.coefficients();

    let losses = train_step_dual_teacher(&mut s, &batches).unwrap();
    assert!(losses.inter_seg.is_some());

    let student1 = s.student.params();
    let inter1 = s.inter_teacher.as_ref().unwrap().params();
    let ema1 = s.ema_state.as_ref().unwrap();
    assert_ne!(student1.values, student0.values, "student phase must move the student");
    assert_ne!(inter1.values, inter0.values, "inter-teacher phase must move the inter-teacher");
    // The intra-teacher moves only through its own update, which runs before
    // the student step: teacher' = alpha * teacher + (1 - alpha) * student_before.
    for ((&t1, &t0), &st) in ema1.teacher_params.values.iter().zip(&ema0.teacher_params.values).zip(&student0.values) {
        assert_eq!(t1.to_bits(), (a * t0 + b * st).to_bits());
    }
    assert_eq!(ema1.step, 1);

    // A second step: the recorded snapshot again determines the teacher exactly.
    let student_mid = s.student.params().clone();
    let ema_mid = s.ema_state.clone().unwrap();
    s.train_step(&batches).unwrap();
    let ema2 = s.ema_state.as_ref().unwrap();
    for ((&t2, &t1), &st) in ema2.teacher_params.values.iter().zip(&ema_mid.teacher_params.values).zip(&student_mid.values) {
        assert_eq!(t2.to_bits(), (a * t1 + b * st).to_bits());
    }
}

#[test]
fn ema_after_student_blends_the_updated_student() {
    let bundle = tiny_bundle(3);
    let mut cfg = tiny_config(Method::MeanTeacher, 0, 4);
    cfg.ema_after_student = true;
    cfg.augment = AugmentConfig::disabled();
    let mut s = make_method_state::<f64>(&cfg, &bundle).unwrap();
    let batches = step_batches(&s, &bundle);
    let ema0 = s.ema_state.clone().unwrap();
    let (a, b) = ema0.coefficients();
    s.train_step(&batches).unwrap();
    let st = s.student.params();
    for ((&t1, &t0), &sv) in s.ema_state.as_ref().unwrap().teacher_params.values.iter().zip(&ema0.teacher_params.values).zip(&st.values) {
        assert_eq!(t1.to_bits(), (a * t0 + b * sv).to_bits());
    }
}

#[test]
fn inter_teacher_update_sees_only_the_source_batch() {
    let bundle = tiny_bundle(3);
    let mut s1 = state(Method::DualTeacher, 0, &bundle);
    let mut s2 = state(Method::DualTeacher, 0, &bundle);
    let b1 = step_batches(&s1, &bundle);
    let mut b2 = b1.clone();
    b2.target = LabeledBatch {
        images: bundle.val.iter().take(2).map(|s| s.image.clone()).collect(),
        labels: bundle.val.iter().take(2).map(|s| s.label.clone().unwrap()).collect(),
        masks: None,
    };
    b2.unlabeled = Some(bundle.d_u.iter().skip(4).map(|s| s.image.clone()).collect());
    s1.train_step(&b1).unwrap();
    s2.train_step(&b2).unwrap();
    assert_eq!(s1.inter_teacher.as_ref().unwrap().params(), s2.inter_teacher.as_ref().unwrap().params());
    assert_ne!(s1.student.params(), s2.student.params());
}

#[test]
fn student_gradient_does_not_reach_the_teachers_through_the_student_phase() {
    // Changing only lambda_kd changes the student update but neither teacher.
    let bundle = tiny_bundle(3);
    let mut s1 = state(Method::DualTeacher, 0, &bundle);
    let mut cfg = s1.config.clone();
    cfg.loss_weights.lambda_kd = 5.0;
    let mut s2 = make_method_state::<f64>(&cfg, &bundle).unwrap();
    let b = step_batches(&s1, &bundle);
    s1.train_step(&b).unwrap();
    s2.train_step(&b).unwrap();
    assert_eq!(s1.inter_teacher.as_ref().unwrap().params(), s2.inter_teacher.as_ref().unwrap().params());
    assert_eq!(s1.ema_state, s2.ema_state);
    assert_ne!(s1.student.params(), s2.student.params());
}

#[test]
fn zero_teacher_weights_reduce_the_student_step_to_supervised_only() {
    let bundle = tiny_bundle(4);
    let mut dual = state(Method::DualTeacher, 2, &bundle);
    let mut cfg = dual.config.clone();
    cfg.loss_weights.lambda_kd = 0.0;
    cfg.loss_weights.lambda_con_max = 0.0;
    dual = make_method_state(&cfg, &bundle).unwrap();
    let mut sup = state(Method::SupervisedOnly, 2, &bundle);
    assert_eq!(dual.student.params(), sup.student.params());
    let bd = step_batches(&dual, &bundle);
    let bs = step_batches(&sup, &bundle);
    for _ in 0..3 {
        dual.train_step(&bd).unwrap();
        sup.train_step(&bs).unwrap();
    }
    assert_eq!(dual.student.params(), sup.student.params());
}

#[test]
fn reported_total_recomposes_from_its_terms() {
    let bundle = tiny_bundle(5);
    for m in Method::ALL {
        let mut s = state(m, 1, &bundle);
        let b = step_batches(&s, &bundle);
        let l = s.train_step(&b).unwrap();
        let w = &s.config.loss_weights;
        let expected = l.seg + w.lambda_kd * l.kd + lambda_con(1.0, w) * l.con + l.pseudo;
        assert!((l.total - expected).abs() <= 1e-6, "{m}: {} vs {expected}", l.total);
        assert_eq!(l.lambda_con, lambda_con(1.0, w));
        assert!(l.seg > 0.0);
        if m.has_inter_teacher() {
            assert!(l.kd > 0.0 && l.inter_seg.is_some());
        } else {
            assert_eq!(l.kd, 0.0);
        }
        if m.has_intra_teacher() {
            assert!(l.con > 0.0);
        } else {
            assert_eq!(l.con, 0.0);
        }
    }
}

#[test]
fn methods_build_exactly_their_components() {
    let bundle = tiny_bundle(6);
    let table = [
        (Method::SupervisedOnly, false, false, false, false),
        (Method::JointTraining, false, false, false, true),
        (Method::GanBaseline, false, false, true, true),
        (Method::PseudoLabelBaseline, false, false, false, true),
        (Method::MeanTeacher, false, true, false, false),
        (Method::NoInterTeacher, false, true, true, true),
        (Method::NoIntraTeacher, true, false, true, true),
        (Method::DualTeacher, true, true, true, true),
    ];
    for (m, inter, intra, translator, source) in table {
        let s = state(m, 0, &bundle);
        assert_eq!(s.inter_teacher.is_some(), inter, "{m} inter-teacher");
        assert_eq!(s.inter_opt.is_some(), inter, "{m} inter-teacher optimizer");
        assert_eq!(s.ema_state.is_some(), intra, "{m} intra-teacher");
        assert_eq!(s.translator.is_some(), translator, "{m} translator");
        assert_eq!(s.cursors.source.is_some(), source, "{m} source stream");
        assert_eq!(
            s.cursors.unlabeled.is_some(),
            intra || m.uses_pseudo_labels(),
            "{m} unlabeled stream"
        );
    }
    assert!(Method::PseudoLabelBaseline.uses_pseudo_labels() && Method::GanBaseline.uses_pseudo_labels());
    assert!(!Method::DualTeacher.uses_pseudo_labels());
}

#[test]
fn dual_teacher_step_rejects_incomplete_states_and_batches() {
    let bundle = tiny_bundle(6);
    let mut mt = state(Method::MeanTeacher, 0, &bundle);
    let b = step_batches(&mt, &bundle);
    let err = train_step_dual_teacher(&mut mt, &b).unwrap_err();
    assert!(matches!(&err, Error::State(msg) if msg.contains("inter-domain teacher") && msg.contains("translator")));

    let mut dual = state(Method::DualTeacher, 0, &bundle);
    let mut b = step_batches(&dual, &bundle);
    b.unlabeled = Some(Vec::new());
    assert!(matches!(train_step_dual_teacher(&mut dual, &b), Err(Error::Input(_))));
}

#[test]
fn missing_streams_are_named() {
    let mut bundle = tiny_bundle(7);
    bundle.d_u.clear();
    let cfg = tiny_config(Method::MeanTeacher, 0, 2);
    let err = make_method_state::<f32>(&cfg, &bundle).unwrap_err();
    assert!(matches!(&err, Error::Config(msg) if msg.contains("d_u")), "{err}");
    // Supervised training does not need unlabeled images.
    make_method_state::<f32>(&tiny_config(Method::SupervisedOnly, 0, 2), &bundle).unwrap();

    let mut bundle = tiny_bundle(7);
    bundle.d_s.clear();
    let err = make_method_state::<f32>(&tiny_config(Method::DualTeacher, 0, 2), &bundle).unwrap_err();
    assert!(matches!(&err, Error::Config(msg) if msg.contains("d_s")), "{err}");
}

fn log_json(s: &TrainState<f32>) -> Vec<String> {
    s.metrics_log.iter().map(|r| serde_json::to_string(r).unwrap()).collect()
}

#[test]
fn training_is_deterministic() {
    let bundle = tiny_bundle(8);
    for m in [Method::DualTeacher, Method::PseudoLabelBaseline] {
        let cfg = tiny_config(m, 3, 2);
        let a = train::<f32>(&cfg, &bundle).unwrap();
        let b = train::<f32>(&cfg, &bundle).unwrap();
        assert_eq!(log_json(&a), log_json(&b));
        assert_eq!(a.student.params(), b.student.params());
        let c = train::<f32>(&tiny_config(m, 4, 2), &bundle).unwrap();
        assert_ne!(a.student.params(), c.student.params(), "seed must matter");
    }
}

fn resume_matches(mut cfg: dualteacher::trainer::TrainConfig, split: usize) {
    let bundle = tiny_bundle(9);
    cfg.warmup_epochs = Some(1);
    let full = train::<f32>(&cfg, &bundle).unwrap();

    let mut first = make_method_state::<f32>(&cfg, &bundle).unwrap();
    for _ in 0..split {
        first.run_epoch(&bundle).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_state(&first).save(&path).unwrap();
    drop(first);
    let snap = Checkpoint::load(&path).unwrap().into_snapshot::<f32>().unwrap();
    let mut resumed = TrainState::restore(snap, &bundle).unwrap();
    resumed.run(&bundle, |_, _| Ok(())).unwrap();

    assert_eq!(log_json(&full), log_json(&resumed), "{}", cfg.method);
    assert_eq!(full.student.params(), resumed.student.params());
    assert_eq!(full.student.buffers(), resumed.student.buffers());
    assert_eq!(full.ema_state, resumed.ema_state);
    assert_eq!(full.best, resumed.best);
}

#[test]
fn checkpoint_resume_equals_uninterrupted_training() {
    resume_matches(tiny_config(Method::DualTeacher, 1, 3), 1);
    resume_matches(tiny_config(Method::PseudoLabelBaseline, 1, 3), 2);
    let mut bn = tiny_config(Method::MeanTeacher, 1, 3);
    bn.network.norm = NormKind::Batch;
    resume_matches(bn, 1);
}

#[test]
fn checkpoints_reject_other_precisions_and_tampering() {
    let bundle = tiny_bundle(9);
    let s = make_method_state::<f32>(&tiny_config(Method::MeanTeacher, 0, 2), &bundle).unwrap();
    let ck = Checkpoint::from_state(&s);
    assert!(matches!(ck.clone().into_snapshot::<f64>(), Err(Error::Format(_))));
    let mut tampered = ck;
    tampered.config.learning_rate *= 2.0;
    assert!(matches!(tampered.validate(), Err(Error::Format(_))));
}

#[test]
fn a_short_run_learns() {
    let bundle = tiny_bundle(10);
    let mut cfg = tiny_config(Method::SupervisedOnly, 0, 30);
    cfg.learning_rate = 3e-3;
    let s = train::<f32>(&cfg, &bundle).unwrap();
    let first = &s.metrics_log[0];
    let last = s.final_record().unwrap();
    assert!(last.losses.total < 0.8 * first.losses.total, "{} -> {}", first.losses.total, last.losses.total);
    assert!(s.best.unwrap().mean_dice > first.mean_dice);
    assert_eq!(s.metrics_log.len(), 30);
}

#[test]
fn running_past_the_end_is_an_error() {
    let bundle = tiny_bundle(11);
    let mut s = train::<f32>(&tiny_config(Method::SupervisedOnly, 0, 1), &bundle).unwrap();
    assert!(s.is_finished());
    assert!(matches!(s.run_epoch(&bundle), Err(Error::State(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streams_are_fair(len in 1usize..40, batch in 1usize..9, extra in 0usize..5, epochs in 1usize..4, seed in 0u64..1000) {
        let own = len.div_ceil(batch);
        let steps = own + extra;
        let mut c = StreamCursor::new(len, batch, steps, rng::stream(seed, 99));
        prop_assert_eq!(c.aligned, extra == 0);
        let mut counts = vec![0usize; len];
        for _ in 0..epochs {
            c.start_epoch();
            let mut epoch_counts = vec![0usize; len];
            for _ in 0..steps {
                let b = c.next_batch();
                if c.aligned {
                    prop_assert!(!b.is_empty() && b.len() <= batch);
                } else {
                    prop_assert_eq!(b.len(), batch);
                }
                for i in b {
                    epoch_counts[i] += 1;
                    counts[i] += 1;
                }
            }
            if c.aligned {
                // Every sample exactly once per epoch.
                prop_assert!(epoch_counts.iter().all(|&k| k == 1));
            }
        }
        // Cycling streams never favour a sample by more than one pass.
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        prop_assert!(hi - lo <= 1, "counts {:?}", counts);
    }
}
