use mambamic::cli::{Checkpoint, OptimizerState};
use mambamic::data::{allocate, make_batches, split_dataset, Split};
use mambamic::nn::{channel_shuffle_perm, concat, partition, shuffle};
use mambamic::params::{uniform, ParamStore};
use mambamic::sscan::{scan_blocked, scan_sequential, SsmParams};
use mambamic::tensor::{AnyTensor, Tensor};
use mambamic::trainer::{binary_auc, lr_at, metrics_from_scores, TrainSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn shuffle_is_a_bijection(groups in 1usize..9, per in 1usize..9) {
        let c = groups * per;
        let mut perm = channel_shuffle_perm(c, groups).unwrap();
        perm.sort_unstable();
        prop_assert_eq!(perm, (0..c).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_inverts_with_swapped_groups(groups in 1usize..7, per in 1usize..7, seed in any::<u64>()) {
        let x = uniform::<f64>(&mut rng(seed), &[2, 3, groups * per], 1.0);
        let y = shuffle(&x, groups).unwrap();
        prop_assert_eq!(shuffle(&y, per).unwrap(), x);
    }

    #[test]
    fn partition_concat_round_trip(sizes in proptest::collection::vec(1usize..6, 1..6), seed in any::<u64>()) {
        let c: usize = sizes.iter().sum();
        let x = uniform::<f32>(&mut rng(seed), &[2, 2, c], 1.0);
        let parts = partition(&x, &sizes).unwrap();
        prop_assert_eq!(concat(&parts).unwrap(), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_invariant_under_monotone_maps(
        scores in proptest::collection::vec(0u8..12, 2..40),
        labels in proptest::collection::vec(any::<bool>(), 2..40),
    ) {
        let n = scores.len().min(labels.len());
        let s: Vec<f64> = scores[..n].iter().map(|&v| v as f64).collect();
        let warped: Vec<f64> = s.iter().map(|v| (0.3 * v).exp() - 7.0).collect();
        prop_assert_eq!(binary_auc(&s, &labels[..n]), binary_auc(&warped, &labels[..n]));
        if let Some(a) = binary_auc(&s, &labels[..n]) {
            prop_assert!((0.0..=1.0).contains(&a));
            let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
            let b = binary_auc(&flipped, &labels[..n]).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_range(seed in any::<u64>(), n in 1usize..50, k in 2usize..6) {
        use rand::Rng;
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| r.gen::<f64>()).collect()).collect();
        let m = metrics_from_scores(&scores, &labels).unwrap();
        prop_assert!((0.0..=100.0).contains(&m.oa));
        prop_assert!((0.0..=100.0).contains(&m.precision));
        prop_assert!(m.auc.is_nan() || (0.0..=100.0).contains(&m.auc));
        prop_assert_eq!(m.confusion.iter().flatten().sum::<usize>(), n);
    }

    #[test]
    fn blocked_scan_matches_sequential(len in 1usize..80, block in 1usize..90, threads in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = SsmParams::<f64>::init(3, 4, &mut r);
        let x = uniform::<f64>(&mut r, &[len, 3], 1.0);
        let inputs = p.project(&x).unwrap();
        let a = p.a();
        let reference = scan_sequential(&x, &inputs, &a, p.d_skip.data()).unwrap();
        let y = scan_blocked(&x, &inputs, &a, p.d_skip.data(), block, threads).unwrap();
        prop_assert!(y.max_abs_diff(&reference) <= 1e-10);
        if block == 1 || block >= len {
            prop_assert_eq!(y, reference);
        }
    }

    #[test]
    fn allocation_covers_every_sample(n in 0usize..500, a in 1usize..10, b in 1usize..10, c in 1usize..10) {
        let counts = allocate(n, [a, b, c]);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn split_partitions_indices(seed in any::<u64>(), n in 3usize..120, k in 1usize..4) {
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let s = split_dataset(&labels, k, [6, 2, 2], seed).unwrap();
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&sp| s.indices(sp)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.clone(), split_dataset(&labels, k, [6, 2, 2], seed).unwrap());
    }

    #[test]
    fn batches_are_a_permutation(seed in any::<u64>(), epoch in 0usize..50, n in 1usize..100, bs in 1usize..20) {
        let idx: Vec<usize> = (0..n).map(|i| 3 * i).collect();
        let batches = make_batches(&idx, bs, Some((seed, epoch)));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut flat: Vec<usize> = batches.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, idx);
    }

    #[test]
    fn learning_rate_schedule_shape(warmup in 0usize..20, extra in 1usize..200, base in 1e-5f64..1e-2) {
        let sched = TrainSchedule { total_epochs: warmup + extra, warmup_epochs: warmup, base_lr: base, ..TrainSchedule::default() };
        let lrs: Vec<f64> = (0..sched.total_epochs).map(|e| lr_at(e, &sched)).collect();
        for e in 0..warmup {
            prop_assert!((lrs[e] - base * (e + 1) as f64 / warmup as f64).abs() <= 1e-15 * base);
        }
        for w in lrs[warmup..].windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!((lrs[warmup] - base).abs() <= 1e-12 * base);
        prop_assert!(lrs.iter().all(|&lr| lr >= sched.min_lr() * (1.0 - 1e-12) && lr <= base * (1.0 + 1e-12)));
    }

    #[test]
    fn tensor_files_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>(), wide in any::<bool>()) {
        let t = uniform::<f64>(&mut rng(seed), &dims, 1e6);
        let any: AnyTensor = if wide { t.into() } else { t.cast::<f32>().into() };
        let bytes = any.to_mmt_bytes().unwrap();
        let back = AnyTensor::from_mmt_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_mmt_bytes().unwrap(), bytes.clone());
        prop_assert!(AnyTensor::from_mmt_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), tensors in 1usize..5, with_opt in any::<bool>()) {
        let mut r = rng(seed);
        let mut params = ParamStore::new();
        for i in 0..tensors {
            params.insert(format!("layer{i}.weight"), uniform::<f32>(&mut r, &[i + 1, 2], 3.0));
        }
        params.insert("edge", Tensor::new(vec![3], vec![-0.0f32, f32::MAX, f32::MIN_POSITIVE / 2.0]).unwrap());
        let ck = Checkpoint {
            config_text: "{}".into(),
            epochs_done: tensors,
            optimizer: with_opt.then(|| OptimizerState { step: seed, m: params.clone(), v: params.clone() }),
            params,
            best: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        for cut in [5, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
