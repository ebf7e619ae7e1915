use approx::assert_abs_diff_eq;
use berrypick_nn::*;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

fn product() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>)> {
    (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))
}

proptest! {
    #[test]
    fn matmul_matches_naive_sum((a, b) in product()) {
        let c = a.matmul(&b);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let want: f64 = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert_abs_diff_eq!(c.get(i, j), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn transpose_of_product((a, b) in product()) {
        let left = a.matmul(&b).transpose();
        let right = b.transpose().matmul(&a.transpose());
        for (x, y) in left.data().iter().zip(right.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        prop_assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn layer_norm_rows_are_standardized(x in (1usize..5, 2usize..9).prop_flat_map(|(n, d)| matrix(n, d))) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let d = x.cols();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Matrix::filled(1, d, 1.0));
        let beta = g.constant(Matrix::zeros(1, d));
        let y = g.layer_norm(xv, gamma, beta, 0.0);
        for r in 0..x.rows() {
            let spread = x.row(r).iter().fold(0.0f64, |m, v| m.max((v - x.row(r)[0]).abs()));
            prop_assume!(spread > 1e-3);
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_at_prior(mu in matrix(2, 3), logvar in matrix(2, 3)) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (m, l) = (g.constant(mu), g.constant(logvar));
        let kl = g.kl_std_normal(m, l);
        prop_assert!(g.value(kl).item() >= 0.0);
        let (z0, z1) = (g.constant(Matrix::zeros(2, 3)), g.constant(Matrix::zeros(2, 3)));
        let prior = g.kl_std_normal(z0, z1);
        prop_assert_eq!(g.value(prior).item(), 0.0);
    }
}
