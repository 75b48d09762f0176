mod common;

use fedpower::linalg::{
    frobenius_norm, matmul, matmul_transpose_a, matmul_transpose_b, orthonormalize_columns, DenseMatrix, RngStream,
};
use proptest::prelude::*;

use common::*;

fn assert_orthonormal_columns(p: &DenseMatrix) {
    let gram = matmul_transpose_a(p, p).unwrap();
    assert!(gram.max_abs_diff(&DenseMatrix::identity(p.cols())) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..24, k in 1usize..24, n in 1usize..24, seed: u64) {
        let mut rng = RngStream::new(seed);
        let a = random_matrix(m, k, &mut rng);
        let b = random_matrix(k, n, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        let scale = frobenius_norm(&a) * frobenius_norm(&b);
        prop_assert!(got.max_abs_diff(&want) <= 1e-12 * scale.max(1.0));
        let t = matmul_transpose_b(&a, &b.transpose()).unwrap();
        prop_assert!(t.max_abs_diff(&want) <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn projections_do_not_grow_the_norm(m in 1usize..40, n in 1usize..40, seed: u64, scale in 1e-6f64..1e6) {
        let mut rng = RngStream::new(seed);
        let w = random_matrix(m, n, &mut rng).scale(scale).unwrap();
        let p = orthonormal_columns(m, 1 + seed as usize % m, &mut rng);
        let q = orthonormal_rows(1 + seed as usize % n, n, &mut rng);
        let norm = frobenius_norm(&w);
        prop_assert!(frobenius_norm(&matmul_transpose_a(&p, &w).unwrap()) <= norm * (1.0 + 1e-12) + 1e-9);
        prop_assert!(frobenius_norm(&matmul_transpose_b(&w, &q).unwrap()) <= norm * (1.0 + 1e-12) + 1e-9);
    }

    #[test]
    fn orthonormalization_is_idempotent_up_to_sign(rows in 1usize..30, seed: u64) {
        let mut rng = RngStream::new(seed);
        let cols = 1 + seed as usize % rows;
        let m = random_matrix(rows, cols, &mut rng);
        let once = orthonormalize_columns(&m, &mut rng).unwrap().matrix;
        assert_orthonormal_columns(&once);
        let twice = orthonormalize_columns(&once, &mut rng).unwrap().matrix;
        for j in 0..cols {
            let (a, b) = (once.column(j), twice.column(j));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            prop_assert!((dot.abs() - 1.0).abs() < 1e-10, "column {} moved: {}", j, dot);
        }
    }

    #[test]
    fn rank_deficient_inputs_still_give_a_basis(rows in 2usize..20, seed: u64) {
        let mut rng = RngStream::new(seed);
        let v = random_matrix(rows, 1, &mut rng);
        let cols = 1 + seed as usize % rows;
        let m = DenseMatrix::from_fn(rows, cols, |i, j| v.get(i, 0) * (j as f64 + 1.0));
        let out = orthonormalize_columns(&m, &mut rng).unwrap();
        prop_assert_eq!(out.deficient, cols - 1);
        assert_orthonormal_columns(&out.matrix);
    }
}
