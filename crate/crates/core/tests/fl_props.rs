mod common;

use std::sync::Arc;

use fedpower::dp::clip_frobenius;
use fedpower::fl::model::{batch_loss, loss_and_grad};
use fedpower::fl::server::{
    fedlora_aggregate, fedpower_aggregate, fedpower_round, train_clients, RoundContext, ServerPrivacy,
};
use fedpower::fl::{run_experiment, ClientState, Optimizer, Protocol, SyntheticTask, TaskConfig, TrainMode};
use fedpower::harness::stats::{mean, std_dev};
use fedpower::linalg::{frobenius_norm, matmul_transpose_b, DenseMatrix, RngStream};
use fedpower::LoRAPair;
use proptest::prelude::*;

use common::*;

fn small_config(protocol: Protocol, seed: u64) -> fedpower::FLRunConfig {
    let mut c = scaled_preset("nonprivate", 10, seed);
    c.task = TaskConfig::new(16, 6, 4, 60, 3, seed);
    c.protocol.name = protocol;
    c.protocol.r = 3;
    c.training.q_s = 0.3;
    c
}

fn clients_of(task: &SyntheticTask, local_rounds: usize) -> Vec<ClientState> {
    task.clients
        .iter()
        .enumerate()
        .map(|(id, data)| ClientState {
            id,
            data: Arc::clone(data),
            eta: 0.1,
            local_rounds,
            q_sample: 0.5,
            optimizer: Optimizer::Sgd,
        })
        .collect()
}

#[test]
fn fedpower_round_aggregates_clipped_products() {
    let task = SyntheticTask::generate(&TaskConfig::new(16, 6, 4, 40, 4, 2)).unwrap();
    let clients = clients_of(&task, 3);
    let mut rng = RngStream::new(3);
    let global = LoRAPair::new(
        random_matrix(3, 16, &mut rng).scale(0.3).unwrap(),
        random_matrix(6, 3, &mut rng),
    )
    .unwrap();
    for clip in [0.05, 0.5, 50.0] {
        let privacy = ServerPrivacy::new(0.8, Some(clip), false).unwrap();
        let sampled = [0, 2, 3];
        let ctx = RoundContext {
            base: &task.base,
            clients: &clients,
            sampled: &sampled,
            rng: &rng,
        };
        let outcome = fedpower_round(&ctx, &global, &privacy, 4, true).unwrap();
        let uploads = train_clients(&ctx, &global, TrainMode::Both).unwrap();
        let mut expected = DenseMatrix::zeros(6, 16);
        for u in &uploads {
            expected.add_assign(&clip_frobenius(&u.pair.product(), clip)).unwrap();
        }
        let expected = expected.scale(1.0 / 3.0).unwrap();
        let aggregate = outcome.aggregate.unwrap();
        assert!(aggregate.max_abs_diff(&expected) <= 1e-12);
        assert!(frobenius_norm(&aggregate) <= clip + 1e-9);
    }
}

#[test]
fn round_one_updates_and_the_zero_step_degeneracy() {
    let task = SyntheticTask::generate(&TaskConfig::new(16, 6, 4, 40, 3, 5)).unwrap();
    let mut rng = RngStream::new(6);
    let global = LoRAPair::new(random_matrix(3, 16, &mut rng), DenseMatrix::zeros(6, 3)).unwrap();
    let sampled = [0, 1, 2];
    let privacy = ServerPrivacy::new(1.0, Some(2.0), false).unwrap();

    let trained = clients_of(&task, 4);
    let ctx = RoundContext {
        base: &task.base,
        clients: &trained,
        sampled: &sampled,
        rng: &rng,
    };
    for u in train_clients(&ctx, &global, TrainMode::Both).unwrap() {
        assert!(!u.pair.product().is_zero());
    }

    let idle = clients_of(&task, 0);
    let ctx = RoundContext {
        base: &task.base,
        clients: &idle,
        sampled: &sampled,
        rng: &rng,
    };
    for u in train_clients(&ctx, &global, TrainMode::Both).unwrap() {
        assert!(u.pair.product().is_zero());
    }
    let outcome = fedpower_round(&ctx, &global, &privacy, 4, true).unwrap();
    assert!(outcome.aggregate.unwrap().is_zero());
    // only noise survives: B̃ is the noise drawn for W Qᵀ = 0
    assert!(!outcome.pair.b().is_zero());
    let a = outcome.pair.a();
    assert!(
        matmul_transpose_b(a, a)
            .unwrap()
            .max_abs_diff(&DenseMatrix::identity(3))
            < 1e-10
    );

    let quiet = fedpower_round(&ctx, &global, &ServerPrivacy::non_private(), 4, true).unwrap();
    assert!(quiet.pair.product().is_zero());
}

#[test]
fn upload_bits_are_exact() {
    for (protocol, values) in [
        (Protocol::FedLoRA, 6 * 3 + 3 * 16),
        (Protocol::FfaLoRA, 6 * 3),
        (Protocol::FedPower, 6 * 3 + 3 * 16),
    ] {
        let mut c = small_config(protocol, 1);
        c.bits_per_value = 16;
        let (_, out) = run_experiment(&c).unwrap();
        let mut expected = 0u64;
        for log in &out.logs {
            expected += log.sampled.len() as u64 * values * 16;
            assert_eq!(log.cumulative_bits, expected, "{protocol}");
        }
    }
}

#[test]
fn single_client_protocols_agree_without_noise() {
    let seeds = 0..4u64;
    let finals = |p: Protocol| -> Vec<f64> {
        seeds
            .clone()
            .map(|s| {
                let mut c = small_config(p, s);
                c.task.clients = 1;
                c.task.samples_per_client = 180;
                c.training.rounds = 30;
                run_experiment(&c).unwrap().1.final_accuracy
            })
            .collect()
    };
    let lora = finals(Protocol::FedLoRA);
    let power = finals(Protocol::FedPower);
    let spread = std_dev(&lora).max(std_dev(&power));
    assert!(
        (mean(&lora) - mean(&power)).abs() <= 2.0 * spread + 0.02,
        "{lora:?} vs {power:?}"
    );
}

#[test]
fn runs_depend_only_on_the_seed() {
    let c = small_config(Protocol::FedPower, 4);
    let a = run_experiment(&c).unwrap().1;
    let b = run_experiment(&c).unwrap().1;
    assert_eq!(a.pair, b.pair);
    assert_eq!(
        a.logs.iter().map(|l| l.accuracy).collect::<Vec<_>>(),
        b.logs.iter().map(|l| l.accuracy).collect::<Vec<_>>()
    );
    let other = run_experiment(&small_config(Protocol::FedPower, 5)).unwrap().1;
    assert_ne!(a.pair, other.pair);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anti_correlated_clients_show_cross_term_mismatch(
        m in 1usize..10,
        n in 1usize..10,
        s in 0.5f64..2.0,
        t in 0.5f64..2.0,
        seed: u64,
    ) {
        let mut rng = RngStream::new(seed);
        let r = 1 + seed as usize % m.min(n);
        let a = random_matrix(r, n, &mut rng);
        let b = random_matrix(m, r, &mut rng);
        let clients = [
            LoRAPair::new(a.clone(), b.clone()).unwrap(),
            LoRAPair::new(a.scale(-s).unwrap(), b.scale(-t).unwrap()).unwrap(),
        ];
        let averaged = fedlora_aggregate(&clients, &ServerPrivacy::non_private(), &rng).unwrap().product();
        let merged = fedpower_aggregate(&clients, None).unwrap();
        let mismatch = frobenius_norm(&averaged.sub(&merged).unwrap()) / frobenius_norm(&merged);
        prop_assert!(mismatch > 0.5, "mismatch {}", mismatch);
    }

    #[test]
    fn gradients_match_finite_differences(n in 2usize..8, m in 2usize..5, seed: u64) {
        let mut rng = RngStream::new(seed);
        let r = 1 + seed as usize % m.min(n);
        let base = random_matrix(m, n, &mut rng);
        let pair = LoRAPair::new(random_matrix(r, n, &mut rng), random_matrix(m, r, &mut rng)).unwrap();
        let data = random_samples(4, n, m, &mut rng);
        let batch: Vec<_> = data.iter().collect();
        let g = loss_and_grad(&base, &pair, &batch, true).unwrap();
        let only_b = loss_and_grad(&base, &pair, &batch, false).unwrap();
        prop_assert_eq!(&g.grad_b, &only_b.grad_b);
        prop_assert!((g.loss - batch_loss(&base, &pair, &batch)).abs() < 1e-12);
        let h = 1e-5;
        let (i, j) = (seed as usize % m, (seed as usize / 7) % r);
        let shifted = |d: f64| {
            let mut b = pair.b().clone();
            b.set(i, j, b.get(i, j) + d);
            batch_loss(&base, &LoRAPair::new(pair.a().clone(), b).unwrap(), &batch)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        prop_assert!((fd - g.grad_b.get(i, j)).abs() <= 1e-6 * fd.abs().max(1e-3));
    }
}
