use dcc_tree::data::{Dataset, Task};
use dcc_tree::evidence::{log_marginal_likelihood, EvidenceEstimate};
use dcc_tree::math::{logsumexp, softmax};
use dcc_tree::model::{ModelContext, ModelHyperparams};
use dcc_tree::rng::substream;
use dcc_tree::scheduler::{utility, SchedulerConfig, UtilityInput};
use dcc_tree::tree::{enumerate_topologies, StructureHyperparams, TreeTopology};
use proptest::prelude::*;

fn toy(n_x: usize, task: Task) -> Dataset {
    let x: Vec<f64> = (0..10 * n_x).map(|i| (i as f64 * 0.37).fract()).collect();
    let y: Vec<f64> = match task {
        Task::Regression => (0..10).map(|i| i as f64 * 0.3 - 1.0).collect(),
        Task::Classification { n_classes } => (0..10).map(|i| (i % n_classes) as f64).collect(),
    };
    Dataset::from_raw(x, y, n_x, task)
}

proptest! {
    #[test]
    fn key_round_trips(idx in 0usize..677) {
        let all = enumerate_topologies(4);
        let t = &all[idx % all.len()];
        prop_assert_eq!(&TreeTopology::from_key(&t.key()).unwrap(), t);
        prop_assert_eq!(t.n_leaves(), t.n_internal() + 1);
    }

    #[test]
    fn unconstrained_round_trip(idx in 0usize..26, n_x in 1usize..4, seed in any::<u64>(), cls in any::<bool>()) {
        let t = enumerate_topologies(3)[idx].clone();
        let task = if cls { Task::Classification { n_classes: 3 } } else { Task::Regression };
        let data = toy(n_x, task);
        let ctx = ModelContext::new(t, &data, ModelHyperparams::default(), StructureHyperparams::default()).unwrap();
        let mut rng = substream(seed, "prop", 0, 0);
        let u = ctx.sample_prior_unconstrained(&mut rng);
        prop_assert_eq!(u.len(), ctx.dim());
        let p = ctx.to_params(&u).unwrap();
        p.validate().unwrap();
        let back = ctx.to_unconstrained(&p).unwrap();
        for (a, b) in u.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
        prop_assert!(ctx.log_posterior(&u, 0.1).unwrap().is_finite());
    }

    #[test]
    fn evidence_is_order_and_split_invariant(
        w in prop::collection::vec(-300.0..10.0f64, 1..200),
        cut in 0usize..200,
    ) {
        let cut = cut % w.len();
        let mut a = EvidenceEstimate::default();
        a.update(&w[..cut]);
        a.update(&w[cut..]);
        let mut rev = w.clone();
        rev.reverse();
        let mut b = EvidenceEstimate::default();
        b.update(&rev);
        let batch = log_marginal_likelihood(&w).unwrap();
        prop_assert!((a.log_z - batch).abs() < 1e-10);
        prop_assert!((b.log_z - batch).abs() < 1e-10);
        prop_assert_eq!(a.total_pseudo_samples, w.len());
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-800.0..800.0f64, 1..50)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(logsumexp(&v) >= v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn utility_is_bounded_and_shift_invariant(
        stats in prop::collection::vec((-40.0..40.0f64, -80.0..80.0f64, -50.0..0.0f64, 0.1..5.0f64, 0.0..10.0f64, 1usize..20), 1..10),
        shift in -100.0..100.0f64,
    ) {
        let cfg = SchedulerConfig::default();
        let inputs: Vec<UtilityInput> = stats
            .iter()
            .map(|&(log_z, log_s2, mean, var, gap, visits)| UtilityInput {
                log_z,
                log_sigma2: log_s2,
                log_weight_mean: mean,
                log_weight_var: var,
                max_log_weight: mean + gap,
                visits,
            })
            .collect();
        let shifted: Vec<UtilityInput> = inputs
            .iter()
            .map(|u| UtilityInput {
                log_z: u.log_z + shift,
                log_sigma2: u.log_sigma2 + 2.0 * shift,
                log_weight_mean: u.log_weight_mean + shift,
                log_weight_var: u.log_weight_var,
                max_log_weight: u.max_log_weight + shift,
                visits: u.visits,
            })
            .collect();
        let a = utility(&inputs, &cfg);
        let b = utility(&shifted, &cfg);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.is_finite() && *x >= 0.0);
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}
