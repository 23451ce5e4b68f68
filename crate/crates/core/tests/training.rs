//! End-to-end training run on the 1D uniform-to-normal problem.

use std::ops::ControlFlow;

use deepparticle::net::NetConfig;
use deepparticle::trainer::{initial_params, train_from, DataDictionary, SourceBox, TrainConfig, TrainState};
use deepparticle::PointSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn normal_pools(sigmas: &[f64], n: usize, seed: u64) -> Vec<(Vec<f64>, PointSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sigmas
        .iter()
        .map(|&s| {
            let nd = Normal::new(0.0, s).unwrap();
            (vec![s], PointSet::new(1, (0..n).map(|_| nd.sample(&mut rng)).collect()).unwrap())
        })
        .collect()
}

#[test]
fn one_dimensional_run_converges_with_feasible_plans() {
    let sigmas: Vec<f64> = (0..4).map(|i| 2.0 + 1.75 * i as f64 / 3.0).collect();
    let dict = DataDictionary::new(SourceBox::unit(), normal_pools(&sigmas, 500, 100)).unwrap();
    let cfg = TrainConfig {
        n: 500,
        n_eta: 4,
        n_dict: 1,
        steps_per_batch: 2000,
        n_lp: 5,
        lr: 0.02,
        ..TrainConfig::default()
    };
    let state = TrainState::fresh(initial_params(NetConfig::new(1, 1), cfg.seed).unwrap());
    let mut worst_marginal: f64 = 0.0;
    let out = train_from(&cfg, &dict, state, |view| {
        if view.row.step % 50 == 0 {
            for p in &view.plans {
                worst_marginal = worst_marginal.max(p.marginal_error());
            }
        }
        ControlFlow::Continue(())
    })
    .unwrap();
    let first = out.trace.first().unwrap().loss;
    let last = out.trace.last().unwrap().loss;
    assert_eq!(out.trace.len(), 2000);
    assert!(last <= 0.2 * first, "loss {first} -> {last}");
    assert!(worst_marginal <= 1e-6, "{worst_marginal}");
}

#[test]
fn loss_jumps_when_a_new_mini_batch_arrives() {
    let sigmas = [1.0, 2.0];
    let dict = DataDictionary::new(SourceBox::unit(), normal_pools(&sigmas, 240, 5)).unwrap();
    let cfg = TrainConfig {
        n: 60,
        n_eta: 2,
        n_dict: 4,
        steps_per_batch: 150,
        n_lp: 5,
        m: 10,
        lr: 0.02,
        ..TrainConfig::default()
    };
    let state = TrainState::fresh(initial_params(NetConfig::new(1, 1).with_size(8, 4), 1).unwrap());
    let out = train_from(&cfg, &dict, state, |_| ControlFlow::Continue(())).unwrap();
    let loss: Vec<f64> = out.trace.iter().map(|r| r.loss).collect();
    for b in 1..4 {
        let at = b * 150;
        let before = loss[at - 10..at].iter().sum::<f64>() / 10.0;
        assert!(loss[at] > before, "batch {b}: {} vs {before}", loss[at]);
    }
}
