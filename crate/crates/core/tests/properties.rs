//! Property tests over the numeric invariants.

use proptest::prelude::*;

use cdsed_core::data::{chunk_sequence, Split};
use cdsed_core::layers::{Activation, LinearClassifier, MaxPoolWidth};
use cdsed_core::metrics::FrameCounts;
use cdsed_core::tensor::{conv2d, conv2d_im2col, Pad, Tensor};

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0..10.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The GEMM path is the direct path, bit for bit, over arbitrary shapes,
    /// dilations, and asymmetric padding.
    #[test]
    fn im2col_equals_direct(
        c_in in 1usize..3,
        c_out in 1usize..3,
        k_h in 1usize..4,
        k_w in 1usize..4,
        dil_h in 1usize..4,
        extra_h in 0usize..4,
        extra_w in 0usize..4,
        pad_t in 0usize..3,
        pad_b in 0usize..3,
        pad_l in 0usize..2,
        pad_r in 0usize..2,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let h = dil_h * (k_h - 1) + 1 + extra_h;
        let w = k_w + extra_w;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let input = Tensor::new(
            vec![c_in, h, w],
            (0..c_in * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        ).unwrap();
        let kernels = Tensor::new(
            vec![c_out, c_in, k_h, k_w],
            (0..c_out * c_in * k_h * k_w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        ).unwrap();
        let pad = Pad::new(pad_t, pad_b, pad_l, pad_r);
        let direct = conv2d(&input, &kernels, (dil_h, 1), pad).unwrap();
        let gemm = conv2d_im2col(&input, &kernels, (dil_h, 1), pad).unwrap();
        prop_assert_eq!(direct.shape(), gemm.shape());
        prop_assert!(direct.max_abs_diff(&gemm) <= 1e-12);
    }

    /// Max-pool backward conserves gradient mass: everything routed upstream
    /// lands on exactly one input position.
    #[test]
    fn maxpool_backward_conserves_mass(
        vals in finite_vec(2 * 3 * 8),
        ups in finite_vec(2 * 3 * 4),
    ) {
        let input = Tensor::new(vec![2, 3, 8], vals).unwrap();
        let upstream = Tensor::new(vec![2, 3, 4], ups).unwrap();
        let mut pool = MaxPoolWidth::new(2);
        pool.forward(&input).unwrap();
        let d_in = pool.backward(&upstream).unwrap();
        let up_sum: f64 = upstream.data().iter().sum();
        let in_sum: f64 = d_in.data().iter().sum();
        prop_assert!((up_sum - in_sum).abs() <= 1e-9);
    }

    /// Softmax rows sum to one even for extreme logits.
    #[test]
    fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-500.0..500.0f64, 4)) {
        let eye = Tensor::new(
            vec![4, 4],
            (0..16).map(|i| f64::from(i % 5 == 0)).collect::<Vec<_>>(),
        ).unwrap();
        let mut cls = LinearClassifier::new(eye, Tensor::zeros(&[4]), Activation::Softmax);
        let out = cls.forward_matrix(&Tensor::new(vec![1, 4], logits).unwrap()).unwrap();
        let sum: f64 = out.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    /// Chunking loses no valid frame and invents none.
    #[test]
    fn chunking_preserves_frames(
        n in 1usize..200,
        t in 1usize..64,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let features = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        ).unwrap();
        let labels = Tensor::zeros(&[n, 2]);
        let chunks = chunk_sequence(&features, &labels, t, "p", Split::Train);
        let total_valid: usize = chunks.iter().map(|c| c.valid_len).sum();
        prop_assert_eq!(total_valid, n);
        let mut rebuilt = Vec::new();
        for chunk in &chunks {
            for row in 0..chunk.valid_len {
                rebuilt.extend_from_slice(chunk.features.row(row));
            }
        }
        prop_assert_eq!(rebuilt, features.data().to_vec());
    }

    /// Identical class permutations of predictions and targets leave every
    /// count unchanged.
    #[test]
    fn metric_counts_are_permutation_invariant(
        seed in any::<u64>(),
        rot in 0usize..6,
    ) {
        use rand::{Rng, SeedableRng};
        let (t, c) = (12usize, 6usize);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pred = Tensor::new(vec![t, c], (0..t * c).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let target = Tensor::new(
            vec![t, c],
            (0..t * c).map(|_| f64::from(rng.gen::<f64>() < 0.3)).collect(),
        ).unwrap();
        let rotate = |m: &Tensor| {
            let mut out = Tensor::zeros(&[t, c]);
            for step in 0..t {
                for j in 0..c {
                    out.set2(step, (j + rot) % c, m.at2(step, j));
                }
            }
            out
        };
        let mut a = FrameCounts::default();
        a.add(&pred, &target, 0.5, t).unwrap();
        let mut b = FrameCounts::default();
        b.add(&rotate(&pred), &rotate(&target), 0.5, t).unwrap();
        prop_assert_eq!(a, b);
    }

    /// DLC1 serialization round-trips bitwise.
    #[test]
    fn dlc1_round_trip(vals in finite_vec(24)) {
        let t = Tensor::new(vec![2, 3, 4], vals).unwrap();
        let bytes = t.to_dlc1_bytes();
        let back = Tensor::read_dlc1(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
