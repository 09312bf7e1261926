use super::*;
use crate::base::{AugmentedBase, CategoricalHead, PredictiveHead};
use crate::data::{synth_conditional_mixture, MixtureSpec};
use crate::flow::{FlowArch, FlowModel};
use crate::numeric::log_std_normal;

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        peak_lr: 2e-3,
        warmup_epochs: 2.min(epochs.saturating_sub(1)),
        mc_samples: 200,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn flow_2d(seed: u64) -> FlowModel {
    let mut arch = FlowArch::new(2);
    arch.levels = 1;
    arch.depth = 2;
    arch.hidden = vec![16];
    FlowModel::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn supervised(seed: u64) -> ApcdeModel {
    let mut flow = flow_2d(seed);
    flow.set_layout(flow.arch().default_layout(&[1]).unwrap()).unwrap();
    let head = PredictiveHead::Categorical(CategoricalHead::new(2, 1, 1.0).unwrap());
    ApcdeModel::new(flow, AugmentedBase::new(vec![head])).unwrap()
}

fn mixture(n: usize) -> (Tensor, Vec<HeadTargets>) {
    let ds = synth_conditional_mixture(&MixtureSpec::two_class(2, 2.0, 1.0), n, 4).unwrap();
    let targets = ds.head_targets(&["label".to_string()]).unwrap();
    (ds.y, vec![targets])
}

#[test]
fn schedule_examples() {
    let c = TrainConfig::default();
    let spe = 10;
    let total = c.epochs * spe;
    let w = warmup_steps(total, &c);
    assert_eq!(w, 100);
    assert_eq!(lr_at(w - 1, total, &c), 5e-4);
    assert!((lr_at(total - 1, total, &c) - 1e-4).abs() < 1e-9);
    assert!((lr_at(w / 2 - 1, total, &c) - 2.5e-4).abs() < 1e-18);
    assert_eq!(lr_at(0, total, &c), 5e-4 / 100.0);
}

#[test]
fn schedule_is_continuous_and_monotone_after_warmup() {
    let c = TrainConfig::default();
    let total = c.epochs * 7;
    let w = warmup_steps(total, &c);
    let linear_step = c.peak_lr / w as f64;
    assert!((lr_at(w, total, &c) - lr_at(w - 1, total, &c)).abs() <= linear_step);
    for s in w..total - 1 {
        assert!(lr_at(s + 1, total, &c) <= lr_at(s, total, &c));
    }
    for s in 0..w - 1 {
        assert!(lr_at(s + 1, total, &c) > lr_at(s, total, &c));
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let c = TrainConfig::default();
    let mut p = Tensor::row(vec![1.0, -2.0, 3.5]);
    let before = p.clone();
    let mut state = AdamState::new(&[&p]);
    for _ in 0..3 {
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 3)], &mut state, 1e-3, &c).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(state.step, 3);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let c = TrainConfig::default();
    let lr = 1e-3;
    for g in [2.5, -0.7, 40.0] {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state, lr, &c).unwrap();
        let expect = -lr * g / (g.abs() + c.eps);
        assert!((p.item() - expect).abs() < 1e-15, "{} vs {expect}", p.item());
        assert!((p.item() + lr * g.signum()).abs() < 1e-10);
    }
}

#[test]
fn adam_two_steps_match_unrolled_recurrence() {
    let c = TrainConfig::default();
    let (b1, b2, eps) = (c.beta1, c.beta2, c.eps);
    let (g, p0, lr1, lr2) = (0.3, 1.25, 1e-2, 4e-3);

    let m1 = (1.0 - b1) * g;
    let v1 = (1.0 - b2) * g * g;
    let p1 = p0 - lr1 * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g;
    let v2 = b2 * v1 + (1.0 - b2) * g * g;
    let p2 = p1 - lr2 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

    let mut p = Tensor::scalar(p0);
    let mut state = AdamState::new(&[&p]);
    adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state, lr1, &c).unwrap();
    adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state, lr2, &c).unwrap();
    assert!((p.item() - p2).abs() < 1e-12);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let c = TrainConfig::default();
    let mut a = Tensor::scalar(0.0);
    let mut b = Tensor::scalar(0.0);
    let mut state = AdamState::new(&[&a, &b]);
    let err = adam_step(
        &mut [&mut a, &mut b],
        &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
        &mut state,
        1e-3,
        &c,
    );
    assert!(matches!(err, Err(Error::NonFiniteGradient { param: 1 })));
}

#[test]
fn epoch_shuffles_are_permutations() {
    let mut rng = stream(3, 1);
    let n = 103;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..5 {
        order.shuffle(&mut rng);
        let mut seen = vec![0u32; n];
        for batch in order.chunks(32) {
            for &i in batch {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    c.warmup_epochs = c.epochs;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = TrainConfig {
        peak_lr: 0.0,
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
    let c: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"epochs": 3, "lr": 1}"#);
    assert!(c.is_err());
}

#[test]
fn two_class_loss_decreases() {
    let (y, t) = mixture(400);
    let ck = train(supervised(1), &y, &t, &config(30), Execution::Sequential, None).unwrap();
    assert_eq!(ck.loss_trace.len(), 30);
    let first = ck.loss_trace[0].mean_loss;
    let last = ck.loss_trace[29].mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let (y, t) = mixture(100);
    let model = supervised(2);
    let c = config(0);
    let ck = train(model.clone(), &y, &t, &c, Execution::Sequential, None).unwrap();

    let mut order: Vec<usize> = (0..100).collect();
    order.shuffle(&mut stream(c.seed, 1));
    let mut expect = model;
    expect.flow.initialize_actnorm(&y.select_rows(&order[..32])).unwrap();
    expect.base.mc_samples = c.mc_samples;
    assert_eq!(ck.model, expect);
    assert!(ck.loss_trace.is_empty());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (y, t) = mixture(90);
    let c = config(3);
    let a = train(supervised(3), &y, &t, &c, Execution::Sequential, None).unwrap();
    let b = train(supervised(3), &y, &t, &c, Execution::Parallel, None).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn one_adam_step_decreases_loss_with_same_draws() {
    let (y, t) = mixture(64);
    let mut model = supervised(4);
    model.flow.initialize_actnorm(&y).unwrap();
    let draws = McDraws::generate(&model.base, 500, &mut ChaCha8Rng::seed_from_u64(9));
    let before = evaluate_loss(&model, &y, &t, &draws, true, Execution::Sequential).unwrap();
    let mut state = AdamState::new(&model.params());
    let c = TrainConfig::default();
    adam_step(&mut model.params_mut(), &before.grads.unwrap(), &mut state, 1e-3, &c).unwrap();
    let after = evaluate_loss(&model, &y, &t, &draws, false, Execution::Sequential).unwrap();
    assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
}

#[test]
fn persistent_non_finite_loss_diverges() {
    let mut model = supervised(5);
    let flags = vec![true; model.flow.actnorm_flags().len()];
    model.flow.set_actnorm_flags(&flags).unwrap();
    let y = Tensor::full(200, 2, 1e300);
    let t = vec![HeadTargets::Classes(vec![0; 200])];
    let mut c = config(5);
    c.batch_size = 64;
    match train(model, &y, &t, &c, Execution::Sequential, None) {
        Err(Error::Divergence { epoch, step, last_log }) => {
            assert_eq!((epoch, step), (0, 2));
            assert_eq!(last_log, "none");
        }
        other => panic!("{other:?}"),
    }
}

/// Replays the training loop by hand, checking each step's loss against the
/// flow's own negative log-likelihood.
#[test]
fn unsupervised_training_is_plain_maximum_likelihood() {
    let (y, _) = mixture(70);
    let c = config(3);
    let model = ApcdeModel::new(flow_2d(6), AugmentedBase::unsupervised()).unwrap();
    let mut log = Vec::new();
    let ck = train(model.clone(), &y, &[], &c, Execution::Sequential, Some(&mut log)).unwrap();

    let mut m = model;
    let mut shuffle = stream(c.seed, 1);
    let mut order: Vec<usize> = (0..70).collect();
    order.shuffle(&mut shuffle);
    m.flow.initialize_actnorm(&y.select_rows(&order[..32])).unwrap();
    let mut adam = AdamState::new(&m.params());
    let total = c.epochs * c.steps_per_epoch(70);
    let mut step = 0;
    for epoch in 0..c.epochs {
        if epoch > 0 {
            order.shuffle(&mut shuffle);
        }
        let mut sum = 0.0;
        for batch in order.chunks(c.batch_size) {
            let yb = y.select_rows(batch);
            let eval = evaluate_loss(&m, &yb, &[], &McDraws { per_head: vec![] }, true, Execution::Sequential).unwrap();
            let (z, logdet) = m.flow.forward(&yb).unwrap();
            let nll = -(0..yb.rows())
                .map(|i| log_std_normal(z.row_slice(i)) + logdet[i])
                .sum::<f64>()
                / yb.rows() as f64;
            assert!((eval.loss - nll).abs() < 1e-10);
            sum += eval.loss * batch.len() as f64;
            adam_step(&mut m.params_mut(), &eval.grads.unwrap(), &mut adam, lr_at(step, total, &c), &c).unwrap();
            step += 1;
        }
        assert_eq!(ck.loss_trace[epoch].mean_loss, sum / 70.0);
    }
    assert_eq!(ck.model.flow, m.flow);
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("epoch 0 loss "));
}
