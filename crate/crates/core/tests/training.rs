use mil_core::mil::{
    bag_gradient, train_step, train_until_convergence, GradAccumulator, StopReason, TrainConfig,
};
use mil_core::model::init_params;
use mil_core::{AdamConfig, AdamState, ArchConfig, Bag, Gradients, Label, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> ArchConfig {
    ArchConfig::tiny()
}

fn bag(n: usize, label: Label, seed: u64) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|_| Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.gen_range(0.0..60.0)).collect()).unwrap())
        .collect();
    Bag::new(format!("b{seed}"), label, instances, None).unwrap()
}

fn mean_gradient(params: &ModelParams, bags: &[Bag]) -> Gradients {
    let mut sum = Gradients::zeros_like(params);
    for b in bags {
        let g = bag_gradient(params, b).unwrap().grads;
        for (s, t) in sum.tensors_mut().iter_mut().zip(g.tensors()) {
            s.add_assign(t);
        }
    }
    for s in sum.tensors_mut() {
        s.scale(1.0 / bags.len() as f64);
    }
    sum
}

#[test]
fn step_equals_adam_on_independent_mean() {
    let bags: Vec<Bag> = (0..12).map(|i| bag(1 + i % 3, Label::from_bool(i % 2 == 0), i as u64)).collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    let init = init_params(&arch(), 4).unwrap();
    let cfg = AdamConfig::default();

    let mut a = init.clone();
    let mut opt = AdamState::new(cfg, &a).unwrap();
    let mut acc = GradAccumulator::new(&a, 16).unwrap();
    let stats = train_step(&mut a, &mut opt, &mut acc, &refs).unwrap();
    assert_eq!(stats.losses.len(), 12);

    let mut b = init.clone();
    let mut opt_b = AdamState::new(cfg, &b).unwrap();
    let mean = mean_gradient(&init, &bags);
    opt_b.step(&mut b, &mean).unwrap();
    let worst = a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn identical_bags_match_single_bag_step() {
    let one = bag(3, Label::Positive, 9);
    let batch = vec![&one; 8];
    let init = init_params(&arch(), 1).unwrap();
    let cfg = AdamConfig::default();

    let mut a = init.clone();
    let mut opt = AdamState::new(cfg, &a).unwrap();
    let mut acc = GradAccumulator::new(&a, 8).unwrap();
    train_step(&mut a, &mut opt, &mut acc, &batch).unwrap();

    let mut b = init.clone();
    let mut opt_b = AdamState::new(cfg, &b).unwrap();
    let g = bag_gradient(&init, &one).unwrap().grads;
    opt_b.step(&mut b, &g).unwrap();
    let worst = a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-15, "{worst}");
}

#[test]
fn sequential_single_bag_steps_differ_from_one_accumulated_step() {
    let bags: Vec<Bag> = (0..4).map(|i| bag(2, Label::from_bool(i % 2 == 0), 50 + i)).collect();
    let init = init_params(&arch(), 2).unwrap();
    let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };

    let mut seq = init.clone();
    let mut opt = AdamState::new(cfg, &seq).unwrap();
    let mut acc = GradAccumulator::new(&seq, 1).unwrap();
    for b in &bags {
        train_step(&mut seq, &mut opt, &mut acc, &[b]).unwrap();
    }
    assert_eq!(opt.step_count(), 4);

    let mut batched = init.clone();
    let mut opt_b = AdamState::new(cfg, &batched).unwrap();
    let mut acc_b = GradAccumulator::new(&batched, 4).unwrap();
    train_step(&mut batched, &mut opt_b, &mut acc_b, &bags.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(opt_b.step_count(), 1);

    let gap = seq.flat().iter().zip(batched.flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "{gap}");
}

#[test]
fn zero_gradients_leave_params_unchanged() {
    let mut p = init_params(&arch(), 3).unwrap();
    let before = p.flat();
    let mut opt = AdamState::new(AdamConfig::default(), &p).unwrap();
    let zero = Gradients::zeros_like(&p);
    opt.step(&mut p, &zero).unwrap();
    assert_eq!(p.flat(), before);
}

#[test]
fn degenerate_two_bag_set_overfits() {
    let pos = {
        let mut b = bag(3, Label::Positive, 1);
        b.instances[1].data_mut().iter_mut().for_each(|v| *v += 40.0);
        b
    };
    let neg = bag(3, Label::Negative, 2);
    let train = vec![pos, neg];
    let cfg = TrainConfig {
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        batch_size: 2,
        patience: 200,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    let out = train_until_convergence(init_params(&arch(), 5).unwrap(), &train, &train, &cfg, 0).unwrap();
    let losses: Vec<f64> = out.log.epochs.iter().map(|r| r.mean_train_loss).collect();
    assert!(out.best_val_loss < 0.01, "best validation loss {}", out.best_val_loss);
    assert!(losses.last().unwrap() < &losses[0]);
    assert_eq!(out.optimizer_steps as usize, out.log.epochs.len());
}

#[test]
fn flat_validation_stops_after_exactly_patience_epochs() {
    // no change in validation loss can reach this min_delta
    let train = vec![bag(2, Label::Positive, 1), bag(2, Label::Negative, 2)];
    let cfg = TrainConfig {
        min_delta: 1e6,
        batch_size: 2,
        patience: 7,
        max_epochs: 100,
        ..TrainConfig::default()
    };
    let out = train_until_convergence(init_params(&arch(), 6).unwrap(), &train, &train, &cfg, 0).unwrap();
    assert_eq!(out.stop, StopReason::Converged);
    assert_eq!(out.log.epochs.len(), 8);
    assert_eq!(out.best_epoch, 1);
    assert_eq!(out.log.epochs.last().unwrap().epochs_since_improvement, 7);
}

#[test]
fn short_final_batch_is_applied() {
    let train: Vec<Bag> = (0..5).map(|i| bag(2, Label::from_bool(i % 2 == 0), i)).collect();
    let cfg = TrainConfig {
        batch_size: 2,
        patience: 3,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = train_until_convergence(init_params(&arch(), 7).unwrap(), &train, &train, &cfg, 0).unwrap();
    assert_eq!(out.optimizer_steps, 6);
    assert_eq!(out.stop, StopReason::EpochCap);
}
