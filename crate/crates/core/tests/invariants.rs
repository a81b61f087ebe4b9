use maze_core::attack::{run_maze, AttackConfig, EvalSet};
use maze_core::baselines::jbda_augment;
use maze_core::config::{AttackKind, RunConfig};
use maze_core::metrics::normalized_accuracy;
use maze_core::nn::{LayerSpec, Model};
use maze_core::oracle::{BlackBoxOracle, QueryLedger, SoftLabelOracle};
use maze_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn target(d: usize, k: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::mlp(
        d,
        &[6],
        k,
        LayerSpec::Tanh,
        Some(LayerSpec::Softmax),
        &mut rng,
    )
    .unwrap()
}

fn eval_set(d: usize, k: usize, seed: u64) -> EvalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(20, d, -1.0, 1.0, &mut rng);
    EvalSet::new(x, (0..20).map(|i| i % k).collect(), 0.8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ledger_never_overspends(budget in 0u64..200, batches in prop::collection::vec(1usize..40, 1..12)) {
        let oracle = BlackBoxOracle::new(target(3, 2, 0), QueryLedger::new(budget)).unwrap();
        let mut accepted = 0u64;
        for (i, n) in batches.into_iter().enumerate() {
            let x = Tensor::uniform(n, 3, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(i as u64));
            match oracle.query(&x) {
                Ok(y) => {
                    prop_assert_eq!(y.rows(), n);
                    accepted += n as u64;
                }
                Err(e) => prop_assert!(e.is_budget_exhausted()),
            }
            prop_assert_eq!(oracle.ledger().used, accepted);
            prop_assert!(accepted <= budget);
        }
    }

    #[test]
    fn attack_spends_whole_iterations(
        budget in 0u64..400,
        b in 1usize..6,
        m in 1usize..4,
        ng in 0usize..3,
        nc in 1usize..3,
        seed in 0u64..1000,
    ) {
        let cfg = AttackConfig {
            budget,
            batch_size: b,
            directions: m,
            gen_steps: ng,
            clone_steps: nc,
            replay_steps: 1,
            latent_dim: 3,
            generator_hidden: vec![4],
            clone_hidden: vec![4],
            checkpoint_every: 1,
            seed,
            ..AttackConfig::default()
        };
        let cost = (b * (ng * (m + 1) + nc)) as u64;
        let oracle = BlackBoxOracle::with_budget(target(4, 3, seed), budget).unwrap();
        let out = run_maze(&oracle, &cfg, &eval_set(4, 3, seed)).unwrap();
        prop_assert_eq!(out.iterations, budget / cost);
        prop_assert_eq!(out.queries, out.iterations * cost);
        prop_assert_eq!(oracle.ledger().used, out.queries);

        let qs: Vec<u64> = out.log.rows.iter().map(|r| r.q).collect();
        prop_assert!(qs.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*qs.last().unwrap(), out.queries);
        for r in &out.log.rows {
            prop_assert_eq!(r.norm_acc, normalized_accuracy(r.clone_acc, 0.8).unwrap());
        }
    }

    #[test]
    fn augmentation_stays_in_box(seed in 0u64..500, lambda in 0.001f64..5.0, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clone = Model::mlp(d, &[5], 3, LayerSpec::Relu, Some(LayerSpec::Softmax), &mut rng).unwrap();
        let x = Tensor::uniform(8, d, -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let y = jbda_augment(&clone, &x, &labels, lambda).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!((-1.0..=1.0).contains(a));
            prop_assert!((a - b).abs() <= lambda + 1e-12);
        }
    }

    #[test]
    fn config_round_trips(budget in 0u64..10_000_000, lambda in 0.0f64..100.0, seed in any::<u64>(), m in 1usize..64) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.attack.budget = budget;
        cfg.attack.directions = m;
        cfg.pd.lambda = lambda;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.config_hash(AttackKind::MazePd).unwrap(), cfg.config_hash(AttackKind::MazePd).unwrap());
    }
}

#[test]
fn evaluation_is_free() {
    let oracle = BlackBoxOracle::with_budget(target(4, 3, 1), 10_000).unwrap();
    let cfg = AttackConfig {
        budget: 0,
        generator_hidden: vec![4],
        clone_hidden: vec![4],
        ..AttackConfig::default()
    };
    let out = run_maze(&oracle, &cfg, &eval_set(4, 3, 1)).unwrap();
    assert_eq!(out.iterations, 0);
    assert_eq!(out.log.rows.len(), 1);
    assert_eq!(oracle.ledger().used, 0);
}
