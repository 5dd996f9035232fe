//! Property-based checks over random inputs.

use fusionvote::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use fusionvote::config::RunConfig;
use fusionvote::data::{decode_dataset, encode_dataset, DatasetBundle, Split};
use fusionvote::ensemble::{noi, rank_distribution, rank_vector, t2v, t2v_votes_direct, t2v_votes_fast, top1_vote};
use fusionvote::fga::{fuse_weights, selection_probabilities};
use fusionvote::losses::{ce_loss, lsr_loss, pick_loss, LossPolicy};
use fusionvote::model::{build, MiniCnnOptions, NetworkSpec};
use fusionvote::nn::softmax;
use fusionvote::trainer::TrainStatus;
use fusionvote::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits(c: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    c.prop_flat_map(|n| prop::collection::vec(-8.0f64..8.0, n))
}

/// `m` outputs over a common class count.
fn outputs() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=8, 1usize..=6).prop_flat_map(|(c, m)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, c), m))
}

fn tiny_spec() -> NetworkSpec {
    let opts = MiniCnnOptions {
        conv_channels: [2, 2, 3],
        hidden: 4,
        ..MiniCnnOptions::default()
    };
    NetworkSpec::mini_cnn([1, 16, 16], 3, &opts).unwrap()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(z in logits(1..=12), shift in -50.0f64..50.0) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_vector_is_a_permutation_led_by_the_argmax(z in logits(2..=10)) {
        let s = rank_vector(&z);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..z.len()).collect::<Vec<_>>());
        let top = s.iter().position(|&r| r == z.len() - 1).unwrap();
        prop_assert_eq!(top, fusionvote::tensor::argmax(&z));
    }

    #[test]
    fn direct_and_fast_votes_agree(z in logits(2..=10), alpha in 0.0f64..5.0, beta in 0.0f64..5.0) {
        let s = rank_vector(&z);
        prop_assert_eq!(t2v_votes_direct(&s, alpha, beta).unwrap(), t2v_votes_fast(&s, alpha, beta).unwrap());
    }

    #[test]
    fn voting_ignores_positive_rescaling(outs in outputs(), scale in 0.01f64..100.0, which in 0usize..6) {
        let mut scaled = outs.clone();
        let k = which % outs.len();
        for v in scaled[k].iter_mut() {
            *v *= scale;
        }
        prop_assert_eq!(t2v(&outs, 1.9, 1.0).unwrap(), t2v(&scaled, 1.9, 1.0).unwrap());
        prop_assert_eq!(top1_vote(&outs).unwrap(), top1_vote(&scaled).unwrap());
    }

    #[test]
    fn voting_ignores_network_order(outs in outputs(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = outs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(t2v(&outs, 1.9, 1.0).unwrap(), t2v(&shuffled, 1.9, 1.0).unwrap());
        prop_assert_eq!(top1_vote(&outs).unwrap(), top1_vote(&shuffled).unwrap());
        let a = noi(&outs).unwrap();
        let b = noi(&shuffled).unwrap();
        for (x, y) in a.aggregate.iter().zip(&b.aggregate) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn t2v_aggregate_is_bounded_and_sparse(outs in outputs()) {
        let d = t2v(&outs, 1.9, 1.0).unwrap();
        let m = outs.len() as f64;
        prop_assert!(d.aggregate.iter().all(|&v| (0.0..=m * 1.9 + 1e-12).contains(&v)));
        prop_assert!(d.aggregate.iter().filter(|&&v| v != 0.0).count() <= 2 * outs.len());
        prop_assert!((d.aggregate.iter().sum::<f64>() - m * 2.9).abs() < 1e-9);
    }

    #[test]
    fn rank_one_fraction_is_top1_accuracy(outs in outputs(), seed in any::<u64>()) {
        use rand::Rng;
        let c = outs[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = outs.iter().map(|_| rng.gen_range(0..c)).collect();
        let dist = rank_distribution(&outs, &labels).unwrap();
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let correct = outs.iter().zip(&labels).filter(|(o, &l)| fusionvote::tensor::argmax(o) == l).count();
        prop_assert_eq!(dist[0], correct as f64 / outs.len() as f64);
    }

    #[test]
    fn losses_are_nonnegative_and_lsr_reduces_to_ce(z in logits(2..=10), y in 0usize..10) {
        let y = y % z.len();
        let ce = ce_loss(&z, y, None).unwrap();
        prop_assert!(ce.loss >= 0.0);
        let lsr = lsr_loss(&z, y, 0.0).unwrap();
        prop_assert!((ce.loss - lsr.loss).abs() < 1e-9);
        for (a, b) in ce.grad.iter().zip(&lsr.grad) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // gradients of a softmax cross entropy sum to zero
        prop_assert!(ce.grad.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn pick_loss_only_returns_policy_members(seed in any::<u64>(), p in 0.0f64..=1.0) {
        use fusionvote::losses::LossKind;
        let policy = LossPolicy::new(vec![(LossKind::Lsr, p), (LossKind::Ce, 1.0 - p)], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in 0..50 {
            let k = pick_loss(&policy, b, &mut rng).unwrap();
            prop_assert!(policy.entries.iter().any(|&(kind, q)| kind == k && q > 0.0));
        }
    }

    #[test]
    fn selection_probabilities_sum_to_one_and_favour_low_loss(
        losses in prop::collection::vec(0.0f64..10.0, 1..10),
        tau in 0.05f64..5.0,
    ) {
        let p = selection_probabilities(&losses, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] < losses[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), n in 1usize..6) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // pixels are stored as 8-bit levels and the split is not stored
        let images = Tensor::from_fn(&[n, 1, 4, 4], |_| f32::from(rng.gen::<u8>()) / 255.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let bundle = DatasetBundle::new(images, labels, 3, Split::Unspecified).unwrap();
        prop_assert_eq!(decode_dataset(&encode_dataset(&bundle).unwrap()).unwrap(), bundle);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), fitness in proptest::option::of(0.0f64..5.0)) {
        let mut state = build::<f32>(&tiny_spec(), seed).unwrap();
        state.epoch = 7;
        state.loss_history = vec![1.25, 0.5, 0.375];
        let ck = Checkpoint::new(state, TrainStatus::Plateau, fitness);
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap(), ck);
    }

    #[test]
    fn fusing_copies_of_one_network_is_the_identity(seed in any::<u64>(), k in 1usize..5) {
        let state = build::<f64>(&tiny_spec(), seed).unwrap();
        let copies: Vec<_> = (0..k).map(|_| &state).collect();
        let fused = fuse_weights(&copies).unwrap();
        for (name, t) in &state.params {
            for (a, b) in t.data().iter().zip(fused.params[name].data()) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn config_render_parse_round_trip(
        batch in 1usize..512,
        epochs in 1usize..100,
        lr in 1e-6f64..1e-1,
        alpha in 1.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = batch;
        cfg.train.max_epochs = epochs;
        cfg.train.lr1 = lr;
        cfg.train.seed = seed;
        cfg.alpha = alpha;
        let parsed = RunConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(parsed.render(), cfg.render());
        prop_assert_eq!(parsed, cfg);
    }
}
