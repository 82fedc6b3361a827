use super::meta::adapted_query_accuracy;
use super::*;
use crate::models::{build_linear, build_unet, LinearConfig, UNetConfig};
use crate::tensor::Padding;

fn scalar_model(w: f64, b: f64) -> ModelGraph {
    let mut m = build_linear(LinearConfig { inputs: 1, outputs: 1 }, 0).unwrap();
    m.weight_mut("linear.w").unwrap().data_mut()[0] = w;
    m.weight_mut("linear.b").unwrap().data_mut()[0] = b;
    m
}

fn wb(m: &ModelGraph) -> (f64, f64) {
    (m.weight("linear.w").unwrap().data()[0], m.weight("linear.b").unwrap().data()[0])
}

fn set_grads(m: &mut ModelGraph, gw: f64, gb: f64) {
    m.clear_grads();
    m.weight_mut("linear.w").unwrap().accumulate_grad(&[gw]).unwrap();
    m.weight_mut("linear.b").unwrap().accumulate_grad(&[gb]).unwrap();
}

fn pt(x: f64, y: f64) -> Sample {
    Sample::new(Tensor::from_vec(vec![x]), Tensor::from_vec(vec![y]))
}

#[test]
fn sgd_arithmetic() {
    let mut m = scalar_model(1.0, 0.5);
    set_grads(&mut m, 2.0, 0.0);
    sgd_step(&mut m, 0.1).unwrap();
    assert_eq!(wb(&m), (0.8, 0.5));
    assert!(m.weights().values().all(|w| w.grad().is_none()));
}

#[test]
fn sgd_without_grads_is_a_contract_error() {
    let mut m = scalar_model(1.0, 0.0);
    assert!(matches!(sgd_step(&mut m, 0.1), Err(Error::Contract(_))));
    let mut s = AdamState::new(&m, 1e-3);
    assert!(matches!(adam_step(&mut m, &mut s), Err(Error::Contract(_))));
}

#[test]
fn sgd_contracts_on_a_quadratic() {
    let mut m = scalar_model(0.0, 0.0);
    for _ in 0..100 {
        let (w, _) = wb(&m);
        set_grads(&mut m, 2.0 * (w - 3.0), 0.0);
        sgd_step(&mut m, 0.1).unwrap();
    }
    assert!((wb(&m).0 - 3.0).abs() < 1e-8);
}

#[test]
fn zero_gradient_steps_are_no_ops() {
    let mut m = scalar_model(0.7, -0.2);
    set_grads(&mut m, 0.0, 0.0);
    sgd_step(&mut m, 0.5).unwrap();
    let mut s = AdamState::new(&m, 1e-3);
    set_grads(&mut m, 0.0, 0.0);
    adam_step(&mut m, &mut s).unwrap();
    assert_eq!(wb(&m), (0.7, -0.2));
    assert_eq!(s.t, 1);
}

#[test]
fn adam_first_step_by_hand() {
    let mut m = scalar_model(0.0, 0.0);
    let mut s = AdamState::new(&m, 1e-3);
    set_grads(&mut m, 1.0, 0.0);
    adam_step(&mut m, &mut s).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction.
    assert!((wb(&m).0 + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
}

#[test]
fn adam_rejects_foreign_state() {
    let mut m = scalar_model(0.0, 0.0);
    let other = build_linear(LinearConfig { inputs: 2, outputs: 1 }, 0).unwrap();
    let mut s = AdamState::new(&other, 1e-3);
    set_grads(&mut m, 1.0, 1.0);
    assert!(matches!(adam_step(&mut m, &mut s), Err(Error::Contract(_))));
}

/// Loss `(w − 3)² + 2(b + 1)²` and its gradient.
fn bowl(m: &ModelGraph) -> (f64, f64, f64) {
    let (w, b) = wb(m);
    ((w - 3.0).powi(2) + 2.0 * (b + 1.0).powi(2), 2.0 * (w - 3.0), 4.0 * (b + 1.0))
}

#[test]
fn adam_converges_on_a_bowl() {
    let mut m = scalar_model(0.0, 0.0);
    let mut s = AdamState::new(&m, 0.01);
    let mut steps = 0;
    while bowl(&m).0 >= 1e-6 && steps < 2000 {
        let (_, gw, gb) = bowl(&m);
        set_grads(&mut m, gw, gb);
        adam_step(&mut m, &mut s).unwrap();
        steps += 1;
    }
    assert!(bowl(&m).0 < 1e-6, "loss {} after {steps} steps", bowl(&m).0);
}

#[test]
fn small_steps_strictly_decrease_a_convex_quadratic() {
    let mut sgd = scalar_model(0.0, 0.0);
    let mut adam = scalar_model(0.0, 0.0);
    let mut s = AdamState::new(&adam, 1e-3);
    for _ in 0..200 {
        let (before, gw, gb) = bowl(&sgd);
        set_grads(&mut sgd, gw, gb);
        sgd_step(&mut sgd, 1e-3).unwrap();
        assert!(bowl(&sgd).0 < before);

        let (before, gw, gb) = bowl(&adam);
        set_grads(&mut adam, gw, gb);
        adam_step(&mut adam, &mut s).unwrap();
        assert!(bowl(&adam).0 < before);
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let m = scalar_model(0.5, 0.1);
    let (a, b) = (pt(1.0, 2.0), pt(-2.0, 0.5));
    let ga = compute_gradients(&m, &[&a], LossKind::SquaredError).unwrap();
    let gb = compute_gradients(&m, &[&b], LossKind::SquaredError).unwrap();
    let both = compute_gradients(&m, &[&a, &b], LossKind::SquaredError).unwrap();
    for name in ["linear.w", "linear.b"] {
        let want = 0.5 * (ga.grads[name][0] + gb.grads[name][0]);
        assert!((both.grads[name][0] - want).abs() < 1e-15);
    }
    // d/dw (w·x + b − y)² at sample a.
    assert!((ga.grads["linear.w"][0] - 2.0 * (0.5 + 0.1 - 2.0)).abs() < 1e-15);
    assert!((both.loss - 0.5 * (ga.loss + gb.loss)).abs() < 1e-15);
}

#[test]
fn frozen_weights_are_not_updated() {
    let mut m = scalar_model(1.0, 1.0);
    m.weight_mut("linear.w").unwrap().set_requires_grad(false);
    let s = pt(1.0, 0.0);
    backprop(&mut m, &[&s], LossKind::SquaredError).unwrap();
    sgd_step(&mut m, 0.1).unwrap();
    let (w, b) = wb(&m);
    assert_eq!(w, 1.0);
    assert!((b - (1.0 - 0.1 * 4.0)).abs() < 1e-15);
}

fn tiny_seg_data() -> Vec<Sample> {
    (0..3)
        .map(|k| {
            let input = Tensor::from_fn(&[8, 8, 1], |i| ((i * (k + 3)) % 7) as f64 / 7.0);
            let target = Tensor::from_fn(&[8, 8, 1], |i| f64::from((i + k) % 5 == 0));
            Sample::new(input, target)
        })
        .collect()
}

fn tiny_unet() -> ModelGraph {
    let cfg = UNetConfig {
        in_channels: 1,
        out_channels: 1,
        depth: 1,
        base_filters: 2,
        padding: Padding::Same,
    };
    build_unet(cfg, 3).unwrap()
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let mut m = tiny_unet();
    let before = m.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &tiny_seg_data(), &[], &cfg, |_, _| Ok(EpochControl::Continue)).unwrap();
    assert!(log.rows.is_empty());
    assert_eq!(m, before);
}

#[test]
fn training_is_bit_reproducible() {
    let data = tiny_seg_data();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = tiny_unet();
        let log = train(&mut m, &data, &data[..1], &cfg, |_, _| Ok(EpochControl::Continue)).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1.to_csv(), l2.to_csv());
    assert_eq!(m1, m2);
    assert_eq!(l1.rows.len(), 6);
    assert_eq!(m1.meta.epoch, 3);
    assert!(l1.to_csv().starts_with("epoch,split,loss,miou,accuracy,dice\n1,train,"));
}

#[test]
fn training_rejects_empty_split_and_honours_stop() {
    let mut m = tiny_unet();
    let cfg = TrainConfig::default();
    let err = train(&mut m, &[], &[], &cfg, |_, _| Ok(EpochControl::Continue)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let log = train(&mut m, &tiny_seg_data(), &[], &cfg, |_, _| Ok(EpochControl::Stop)).unwrap();
    assert_eq!(log.rows.len(), 1);
}

#[test]
fn evaluate_rejects_empty_set() {
    let m = scalar_model(0.0, 0.0);
    assert!(matches!(evaluate(&m, &[], LossKind::SquaredError), Err(Error::Data(_))));
}

fn meta_cfg(alpha: f64, beta: f64, steps: usize) -> MetaConfig {
    MetaConfig {
        inner_lr: alpha,
        outer_lr: beta,
        inner_steps: steps,
        shots: 2,
        tasks_per_batch: 1,
        order: MetaOrder::First,
        loss: LossKind::SquaredError,
    }
}

fn line_task() -> MetaTask {
    MetaTask {
        support: vec![pt(1.0, 2.0), pt(-0.5, 0.0), pt(2.0, 3.5)],
        query: vec![pt(0.5, 1.2), pt(-1.0, -0.7)],
    }
}

/// Gradient of the mean of `(w·x + b − y)²` over `pts`.
fn line_grad(w: f64, b: f64, pts: &[Sample]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mut g = (0.0, 0.0);
    for s in pts {
        let (x, y) = (s.input.data()[0], s.target.data()[0]);
        let r = w * x + b - y;
        g.0 += 2.0 * r * x / n;
        g.1 += 2.0 * r / n;
    }
    g
}

#[test]
fn one_inner_step_is_one_sgd_step() {
    let m = scalar_model(0.3, -0.4);
    let task = line_task();
    let adapted = inner_adapt(&m, &task, &meta_cfg(0.05, 0.0, 1)).unwrap();
    let mut manual = m.clone();
    let support: Vec<&Sample> = task.support.iter().collect();
    backprop(&mut manual, &support, LossKind::SquaredError).unwrap();
    sgd_step(&mut manual, 0.05).unwrap();
    let (a, b) = (wb(&adapted), wb(&manual));
    assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
    assert_eq!(wb(&m), (0.3, -0.4));
}

#[test]
fn zero_inner_rate_keeps_weights() {
    let m = scalar_model(0.3, -0.4);
    let adapted = inner_adapt(&m, &line_task(), &meta_cfg(0.0, 0.1, 4)).unwrap();
    assert_eq!(wb(&adapted), wb(&m));
}

#[test]
fn two_inner_steps_match_hand_rolled_oracle() {
    let m = scalar_model(0.3, -0.4);
    let task = line_task();
    let alpha = 0.07;
    let adapted = inner_adapt(&m, &task, &meta_cfg(alpha, 0.0, 2)).unwrap();
    let (mut w, mut b) = (0.3, -0.4);
    for _ in 0..2 {
        let g = line_grad(w, b, &task.support);
        w -= alpha * g.0;
        b -= alpha * g.1;
    }
    let got = wb(&adapted);
    assert!((got.0 - w).abs() <= 1e-10 && (got.1 - b).abs() <= 1e-10);
}

#[test]
fn first_order_outer_step_matches_oracle() {
    let (alpha, beta) = (0.05, 0.2);
    let mut m = scalar_model(0.3, -0.4);
    let task = line_task();
    meta_outer_step(&mut m, std::slice::from_ref(&task), &meta_cfg(alpha, beta, 1)).unwrap();
    let gs = line_grad(0.3, -0.4, &task.support);
    let (wa, ba) = (0.3 - alpha * gs.0, -0.4 - alpha * gs.1);
    let gq = line_grad(wa, ba, &task.query);
    let want = (0.3 - beta * gq.0, -0.4 - beta * gq.1);
    let got = wb(&m);
    assert!((got.0 - want.0).abs() <= 1e-10 && (got.1 - want.1).abs() <= 1e-10);
}

#[test]
fn first_order_single_task_equals_sgd_at_adapted_point() {
    let (alpha, beta) = (0.05, 0.2);
    let task = line_task();
    let mut m = scalar_model(0.3, -0.4);
    let adapted = inner_adapt(&m, &task, &meta_cfg(alpha, beta, 1)).unwrap();
    let query: Vec<&Sample> = task.query.iter().collect();
    let g = compute_gradients(&adapted, &query, LossKind::SquaredError).unwrap();
    let mut manual = m.clone();
    for (name, grad) in &g.grads {
        manual.weight_mut(name).unwrap().accumulate_grad(grad).unwrap();
    }
    sgd_step(&mut manual, beta).unwrap();
    meta_outer_step(&mut m, &[task], &meta_cfg(alpha, beta, 1)).unwrap();
    let (a, b) = (wb(&m), wb(&manual));
    assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
}

#[test]
fn second_order_outer_step_matches_closed_form() {
    let (alpha, beta) = (0.05, 0.2);
    let task = line_task();
    let mut m = scalar_model(0.3, -0.4);
    let cfg = MetaConfig {
        order: MetaOrder::Second,
        ..meta_cfg(alpha, beta, 1)
    };
    meta_outer_step(&mut m, std::slice::from_ref(&task), &cfg).unwrap();
    // Support Hessian of the mean squared residual is constant.
    let n = task.support.len() as f64;
    let (mut hxx, mut hx) = (0.0, 0.0);
    for s in &task.support {
        let x = s.input.data()[0];
        hxx += 2.0 * x * x / n;
        hx += 2.0 * x / n;
    }
    let gs = line_grad(0.3, -0.4, &task.support);
    let (wa, ba) = (0.3 - alpha * gs.0, -0.4 - alpha * gs.1);
    let gq = line_grad(wa, ba, &task.query);
    let pulled = (
        gq.0 - alpha * (hxx * gq.0 + hx * gq.1),
        gq.1 - alpha * (hx * gq.0 + 2.0 * gq.1),
    );
    let want = (0.3 - beta * pulled.0, -0.4 - beta * pulled.1);
    let got = wb(&m);
    assert!((got.0 - want.0).abs() <= 1e-8 && (got.1 - want.1).abs() <= 1e-8, "{got:?} vs {want:?}");
}

#[test]
fn meta_edge_cases() {
    let mut m = scalar_model(0.3, -0.4);
    let before = m.clone();
    meta_outer_step(&mut m, &[line_task()], &meta_cfg(0.1, 0.0, 2)).unwrap();
    assert_eq!(m, before);
    assert!(matches!(
        meta_outer_step(&mut m, &[], &meta_cfg(0.1, 0.1, 1)),
        Err(Error::Contract(_))
    ));
    let empty = MetaTask {
        support: vec![],
        query: vec![pt(0.0, 0.0)],
    };
    assert!(matches!(inner_adapt(&m, &empty, &meta_cfg(0.1, 0.1, 1)), Err(Error::Data(_))));
    assert!(matches!(
        inner_adapt(&m, &line_task(), &meta_cfg(0.1, 0.1, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn adapted_accuracy_on_separable_task() {
    let mut m = build_linear(LinearConfig { inputs: 1, outputs: 2 }, 0).unwrap();
    m.weights_mut().values_mut().for_each(|w| w.data_mut().fill(0.0));
    let mk = |x: f64| Sample::one_hot(Tensor::from_vec(vec![x]), usize::from(x > 0.0), 2);
    let task = MetaTask {
        support: vec![mk(1.0), mk(-1.0)],
        query: vec![mk(2.0), mk(-0.5), mk(0.7)],
    };
    let cfg = MetaConfig {
        loss: LossKind::SquaredError,
        ..meta_cfg(0.5, 0.0, 3)
    };
    assert_eq!(adapted_query_accuracy(&m, &task, &cfg).unwrap(), 1.0);
}
