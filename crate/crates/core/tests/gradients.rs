//! Analytic gradients against central finite differences, plus loss and
//! schedule invariants.

mod common;

use common::{random_labels, random_probs, rng};
use dualteacher::ema::EmaState;
use dualteacher::losses::{
    consistency_loss, consistency_loss_grad, cross_entropy, cross_entropy_grad, dice_loss_grad, entropy, kd_loss,
    kd_loss_grad, lambda_con, seg_loss_grad, LossWeights,
};
use dualteacher::segnet::{Mode, Network, NetworkConfig, NormKind, ParamVector};
use dualteacher::tensor::{LabelMap, ProbMap, Tensor};
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-4;
const REL: f64 = 1e-3;
/// Entries whose true derivative is exactly zero have no relative scale.
const ABS_FLOOR: f64 = 1e-9;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

/// Central differences of `f` with respect to every entry of `p`.
fn numeric_grad(p: &ProbMap<f64>, f: impl Fn(&ProbMap<f64>) -> f64) -> Vec<f64> {
    (0..p.data.len())
        .map(|i| {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.data[i] += STEP;
            lo.data[i] -= STEP;
            (f(&hi) - f(&lo)) / (2.0 * STEP)
        })
        .collect()
}

fn assert_grad(name: &str, case: usize, analytic: &[f64], numeric: &[f64]) {
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(close(a, n), "{name} case {case} entry {i}: analytic {a} numeric {n}");
    }
}

const CASES: usize = 25;

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut r = rng(11);
    for case in 0..CASES {
        let p = random_probs(&mut r, 3, 4, 4);
        let y = random_labels(&mut r, 3, 4, 4);
        let g = cross_entropy_grad(&p, &y, None).unwrap();
        let n = numeric_grad(&p, |q| cross_entropy(q, &y).unwrap());
        assert_grad("cross_entropy", case, &g.grad.data, &n);
    }
}

#[test]
fn masked_cross_entropy_matches_finite_differences() {
    let mut r = rng(12);
    for case in 0..CASES {
        let p = random_probs(&mut r, 3, 4, 4);
        let y = random_labels(&mut r, 3, 4, 4);
        let mut mask: Vec<bool> = (0..16).map(|_| r.random_bool(0.6)).collect();
        mask[0] = true;
        let g = cross_entropy_grad(&p, &y, Some(&mask)).unwrap();
        let n = numeric_grad(&p, |q| cross_entropy_grad(q, &y, Some(&mask)).unwrap().value);
        assert_grad("masked cross_entropy", case, &g.grad.data, &n);
    }
}

#[test]
fn dice_loss_matches_finite_differences() {
    let mut r = rng(13);
    for case in 0..CASES {
        let p = random_probs(&mut r, 3, 4, 4);
        let y = random_labels(&mut r, 3, 4, 4);
        for include_bg in [true, false] {
            let g = dice_loss_grad(&p, &y, include_bg, None).unwrap();
            let n = numeric_grad(&p, |q| dice_loss_grad(q, &y, include_bg, None).unwrap().value);
            assert_grad("dice_loss", case, &g.grad.data, &n);
        }
    }
}

#[test]
fn seg_loss_matches_finite_differences() {
    let mut r = rng(14);
    for case in 0..CASES {
        let p = random_probs(&mut r, 3, 4, 4);
        let y = random_labels(&mut r, 3, 4, 4);
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let g = seg_loss_grad(&p, &y, true, Some(&mask)).unwrap();
        let n = numeric_grad(&p, |q| seg_loss_grad(q, &y, true, Some(&mask)).unwrap().value);
        assert_grad("seg_loss", case, &g.grad.data, &n);
    }
}

#[test]
fn kd_loss_matches_finite_differences_and_detaches_teacher() {
    let mut r = rng(15);
    for case in 0..CASES {
        let teacher = random_probs(&mut r, 3, 4, 4);
        let student = random_probs(&mut r, 3, 4, 4);
        let g = kd_loss_grad(&teacher, &student).unwrap();
        let n = numeric_grad(&student, |q| kd_loss(&teacher, q).unwrap());
        assert_grad("kd_loss", case, &g.student.data, &n);
        assert!(g.teacher.data.iter().all(|&v| v == 0.0), "teacher gradient must be exactly zero");
    }
}

#[test]
fn consistency_loss_matches_finite_differences_and_detaches_teacher() {
    let mut r = rng(16);
    for case in 0..CASES {
        let student = random_probs(&mut r, 3, 4, 4);
        let teacher = random_probs(&mut r, 3, 4, 4);
        let g = consistency_loss_grad(&student, &teacher).unwrap();
        let n = numeric_grad(&student, |q| consistency_loss(q, &teacher).unwrap());
        assert_grad("consistency_loss", case, &g.student.data, &n);
        assert!(g.teacher.data.iter().all(|&v| v == 0.0), "teacher gradient must be exactly zero");
    }
}

/// `L = sum(logits * r)` so that `dL/dlogits = r`.
fn network_loss(net: &Network<f64>, x: &Tensor<f64>, r: &[f64]) -> f64 {
    let (logits, _) = net.forward_trace(x, Mode::Train).unwrap();
    logits.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn check_network(norm: NormKind) {
    let cfg = NetworkConfig {
        in_channels: 1,
        num_classes: 3,
        base_channels: 2,
        depth: 1,
        norm,
        seed: 5,
    };
    let mut net = Network::<f64>::build(&cfg).unwrap();
    let mut r = rng(17);
    // Move off the initialization so that no bias sits exactly at zero.
    for v in net.params_mut().values.iter_mut() {
        *v += r.random_range(-0.05..0.05);
    }
    let x = Tensor::from_vec(2, 1, 4, 4, (0..32).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let (logits, trace) = net.forward_trace(&x, Mode::Train).unwrap();
    let rw: Vec<f64> = (0..logits.data.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let gl = Tensor::from_vec(logits.n, logits.c, logits.h, logits.w, rw.clone()).unwrap();
    let mut grads = vec![0.0; net.params().total_count()];
    let gx = net.backward(&trace, &gl, &mut grads).unwrap();

    let h = 1e-6;
    let mut bad = Vec::new();
    for i in 0..grads.len() {
        let orig = net.params().values[i];
        net.params_mut().values[i] = orig + h;
        let hi = network_loss(&net, &x, &rw);
        net.params_mut().values[i] = orig - h;
        let lo = network_loss(&net, &x, &rw);
        net.params_mut().values[i] = orig;
        let n = (hi - lo) / (2.0 * h);
        if (grads[i] - n).abs() > 1e-4 * grads[i].abs().max(n.abs()) + 1e-7 {
            bad.push((i, grads[i], n));
        }
    }
    assert!(bad.is_empty(), "{norm:?}: parameter gradients disagree at {bad:?}");

    for i in 0..x.data.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi.data[i] += h;
        lo.data[i] -= h;
        let n = (network_loss(&net, &hi, &rw) - network_loss(&net, &lo, &rw)) / (2.0 * h);
        assert!(
            (gx.data[i] - n).abs() <= 1e-4 * gx.data[i].abs().max(n.abs()) + 1e-7,
            "{norm:?}: input gradient {i}: {} vs {n}",
            gx.data[i]
        );
    }
}

#[test]
fn network_backward_matches_finite_differences_group_norm() {
    check_network(NormKind::Group);
}

#[test]
fn network_backward_matches_finite_differences_batch_norm() {
    check_network(NormKind::Batch);
}

fn prob_map_strategy() -> impl Strategy<Value = (ProbMap<f64>, LabelMap)> {
    (prop::collection::vec(0.01f64..1.0, 3 * 16), prop::collection::vec(0u8..3, 16)).prop_map(|(raw, labels)| {
        let mut data = raw;
        for px in 0..16 {
            let s: f64 = (0..3).map(|c| data[c * 16 + px]).sum();
            for c in 0..3 {
                data[c * 16 + px] /= s;
            }
        }
        (
            ProbMap::new(3, 4, 4, data).unwrap(),
            LabelMap::new(4, 4, labels).unwrap(),
        )
    })
}

/// Applies a pixel permutation to a map.
fn permute(p: &ProbMap<f64>, perm: &[usize]) -> ProbMap<f64> {
    let n = p.pixels();
    let mut data = vec![0.0; p.data.len()];
    for c in 0..p.classes {
        for (dst, &src) in perm.iter().enumerate() {
            data[c * n + dst] = p.data[c * n + src];
        }
    }
    ProbMap::new(p.classes, p.height, p.width, data).unwrap()
}

proptest! {
    #[test]
    fn losses_are_non_negative((p, y) in prob_map_strategy(), (q, _) in prob_map_strategy()) {
        prop_assert!(cross_entropy(&p, &y).unwrap() >= 0.0);
        prop_assert!(dice_loss_grad(&p, &y, true, None).unwrap().value >= 0.0);
        prop_assert!(kd_loss(&p, &q).unwrap() >= 0.0);
        prop_assert!(consistency_loss(&p, &q).unwrap() >= 0.0);
    }

    #[test]
    fn kd_against_itself_is_the_entropy((p, _) in prob_map_strategy()) {
        let kd = kd_loss(&p, &p).unwrap();
        prop_assert!((kd - entropy(&p)).abs() < 1e-12);
    }

    #[test]
    fn kd_is_minimized_by_the_teacher((p, _) in prob_map_strategy(), (q, _) in prob_map_strategy()) {
        prop_assert!(kd_loss(&p, &q).unwrap() >= kd_loss(&p, &p).unwrap() - 1e-12);
    }

    #[test]
    fn losses_are_pixel_permutation_invariant(
        (p, y) in prob_map_strategy(),
        (q, _) in prob_map_strategy(),
        perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let pp = permute(&p, &perm);
        let qp = permute(&q, &perm);
        let yp = LabelMap::new(4, 4, perm.iter().map(|&i| y.data[i]).collect()).unwrap();
        prop_assert!((cross_entropy(&p, &y).unwrap() - cross_entropy(&pp, &yp).unwrap()).abs() < 1e-12);
        let d0 = dice_loss_grad(&p, &y, true, None).unwrap().value;
        let d1 = dice_loss_grad(&pp, &yp, true, None).unwrap().value;
        prop_assert!((d0 - d1).abs() < 1e-12);
        prop_assert!((kd_loss(&p, &q).unwrap() - kd_loss(&pp, &qp).unwrap()).abs() < 1e-12);
        prop_assert!((consistency_loss(&p, &q).unwrap() - consistency_loss(&pp, &qp).unwrap()).abs() < 1e-12);
        // Gradients permute with the pixels.
        let g = cross_entropy_grad(&p, &y, None).unwrap().grad;
        let gp = cross_entropy_grad(&pp, &yp, None).unwrap().grad;
        prop_assert_eq!(permute(&g, &perm).data, gp.data);
    }

    #[test]
    fn consistency_is_symmetric_and_zero_on_the_diagonal((p, _) in prob_map_strategy(), (q, _) in prob_map_strategy()) {
        prop_assert_eq!(consistency_loss(&p, &p).unwrap(), 0.0);
        prop_assert!((consistency_loss(&p, &q).unwrap() - consistency_loss(&q, &p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn lambda_con_is_monotone_and_bounded(t_max in 1usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, scale in 0.0f64..10.0) {
        let w = LossWeights { t_max, ramp_exponent_scale: scale, ..LossWeights::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l0 = lambda_con(lo * t_max as f64, &w);
        let l1 = lambda_con(hi * t_max as f64, &w);
        prop_assert!(l0 <= l1);
        prop_assert!(l0 >= 0.0 && l1 <= w.lambda_con_max);
    }

    #[test]
    fn ema_stays_in_the_convex_hull(
        alpha in 0.0f64..0.999,
        start in prop::collection::vec(-5.0f64..5.0, 8),
        students in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 8), 1..20),
    ) {
        let mut p = ParamVector::<f64>::default();
        p.values = start.clone();
        p.entries = single_entry(8);
        let mut ema = EmaState::init(&p, alpha).unwrap();
        let mut lo = start.clone();
        let mut hi = start;
        for s in &students {
            for i in 0..8 {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
            let mut sp = p.clone();
            sp.values = s.clone();
            ema.update(&sp).unwrap();
            for i in 0..8 {
                let v = ema.teacher_params.values[i];
                prop_assert!(v >= lo[i] - 1e-12 && v <= hi[i] + 1e-12);
            }
        }
        prop_assert_eq!(ema.step, students.len() as u64);
    }

    #[test]
    fn ema_converges_geometrically_to_a_constant_student(
        alpha in 0.5f64..0.995,
        start in prop::collection::vec(-5.0f64..5.0, 4),
        target in prop::collection::vec(-5.0f64..5.0, 4),
        steps in 1u32..100,
    ) {
        let mut p = ParamVector::<f64>::default();
        p.entries = single_entry(4);
        p.values = start.clone();
        let mut ema = EmaState::init(&p, alpha).unwrap();
        let mut s = p.clone();
        s.values = target.clone();
        for _ in 0..steps {
            ema.update(&s).unwrap();
        }
        for i in 0..4 {
            let gap0 = (start[i] - target[i]).abs();
            let gap = (ema.teacher_params.values[i] - target[i]).abs();
            prop_assert!(gap <= alpha.powi(steps as i32) * gap0 + 1e-12);
        }
    }
}

fn single_entry(len: usize) -> Vec<dualteacher::segnet::ParamEntry> {
    vec![dualteacher::segnet::ParamEntry {
        name: "w".into(),
        shape: vec![len],
        offset: 0,
        len,
    }]
}
