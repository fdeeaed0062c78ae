use kd_autograd::{kl_divergence, RngState, Tensor};
use proptest::prelude::*;

fn vector(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(v in vector(1..12), c in -50.0f64..50.0) {
        let n = v.len();
        let p = Tensor::new(&[n], v.clone()).unwrap().softmax(0).unwrap().to_vec();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = Tensor::new(&[n], shifted).unwrap().softmax(0).unwrap().to_vec();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!(*a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(v in vector(1..12)) {
        let t = Tensor::new(&[v.len()], v).unwrap();
        let a = t.log_softmax(0).unwrap().to_vec();
        let b = t.softmax(0).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(a in vector(2..10), seed in 0u64..1000) {
        let n = a.len();
        let mut rng = RngState::new(seed);
        let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let p = Tensor::new(&[n], a).unwrap().softmax(0).unwrap();
        let q = Tensor::new(&[n], b).unwrap().softmax(0).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap().item() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn matmul_nt_equals_matmul_with_transpose(a in matrix(3, 5), b in matrix(4, 5)) {
        let x = a.matmul_nt(&b).unwrap().to_vec();
        let y = a.matmul(&b.transpose().unwrap()).unwrap().to_vec();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn matmul_transpose_identity(a in matrix(3, 4), b in matrix(4, 2)) {
        let left = a.matmul(&b).unwrap().transpose().unwrap().to_vec();
        let right = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap().to_vec();
        for (x, y) in left.iter().zip(&right) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_sums_agree_with_total(a in matrix(4, 6)) {
        let total = a.sum().item();
        let by_rows = a.sum_axis(1).unwrap().sum().item();
        let by_cols = a.sum_axis(0).unwrap().sum().item();
        prop_assert!((total - by_rows).abs() < 1e-10);
        prop_assert!((total - by_cols).abs() < 1e-10);
    }

    #[test]
    fn square_gradient_is_twice_input(v in vector(1..10)) {
        let x = Tensor::param(&[v.len()], v.clone()).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, vi) in g.iter().zip(&v) {
            prop_assert!((gi - 2.0 * vi).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(a in matrix(3, 8)) {
        let g = Tensor::full(&[8], 1.0);
        let b = Tensor::zeros(&[8]);
        let y = a.layer_norm(&g, &b, 1e-12).unwrap().to_vec();
        for row in y.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1.0 + 1e-6);
        }
    }

    #[test]
    fn dropout_zero_is_identity(v in vector(1..16), seed in 0u64..100) {
        let x = Tensor::new(&[v.len()], v.clone()).unwrap();
        prop_assert_eq!(x.dropout(0.0, &mut RngState::new(seed)).unwrap().to_vec(), v);
    }

    #[test]
    fn rng_draws_stay_in_range(seed in 0u64..10_000, n in 1usize..50) {
        let mut r = RngState::new(seed);
        prop_assert!(r.below(n) < n);
        let u = r.uniform();
        prop_assert!((0.0..1.0).contains(&u));
        let count = n / 2;
        let mut s = r.sample_indices(n, count);
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), count);
        prop_assert!(s.iter().all(|&i| i < n));
        let mut items: Vec<usize> = (0..n).collect();
        r.shuffle(&mut items);
        items.sort_unstable();
        prop_assert_eq!(items, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn rng_replays_from_any_position(seed in 0u64..10_000, skip in 0usize..20) {
        let mut r = RngState::new(seed);
        for _ in 0..skip {
            r.next_u64();
        }
        let mut replay = RngState::at(seed, r.position());
        prop_assert_eq!(r.next_u64(), replay.next_u64());
    }
}
