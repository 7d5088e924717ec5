use proptest::prelude::*;

use secmoe::tensor::{layer_norm_rows, matmul, softmax_rows};
use secmoe::{Category, Meter, OpCounter, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn shaped() -> impl Strategy<Value = Tensor> {
    (1usize..6, 2usize..7).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #[test]
    fn matmul_records_mnk(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let a = Tensor::random_uniform(m, k, seed);
        let b = Tensor::random_uniform(k, n, seed.wrapping_add(1));
        let c = OpCounter::new();
        let y = matmul(&a, &b, Category::Ffn, c.meter()).unwrap();
        prop_assert_eq!(y.shape(), &[m, n]);
        prop_assert_eq!(c.get(Category::Ffn), (m * n * k) as u64);
        prop_assert_eq!(c.total(), (m * n * k) as u64);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in shaped(), shift in -50.0f64..50.0) {
        let s = softmax_rows(&x).unwrap();
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + shift).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn unit_layer_norm_rows_have_zero_mean(x in shaped()) {
        let n = x.cols();
        let y = layer_norm_rows(&x, &Tensor::filled(&[n], 1.0), &Tensor::zeros(&[n]), 1e-5).unwrap();
        for i in 0..y.rows() {
            let mean = y.row(i).iter().sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-12);
        }
    }

    #[test]
    fn kernels_are_deterministic(x in shaped()) {
        let w = Tensor::random_uniform(x.cols(), 3, 7);
        let a = matmul(&x, &w, Category::Other, Meter::detached()).unwrap();
        let b = matmul(&x, &w, Category::Other, Meter::detached()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(softmax_rows(&x).unwrap(), softmax_rows(&x).unwrap());
    }
}
