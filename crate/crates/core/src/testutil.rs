//! Independent oracles for unit tests.

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        acc += p.abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / p;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    acc
}

/// Relative error with a `1e-6` floor on the denominator so that
/// near-zero gradients compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[test]
fn log_abs_det_known_values() {
    assert!((log_abs_det(vec![vec![2.0, 0.0], vec![0.0, 3.0]]) - 6f64.ln()).abs() < 1e-12);
    assert!((log_abs_det(vec![vec![0.0, 1.0], vec![-4.0, 0.0]]) - 4f64.ln()).abs() < 1e-12);
}
