//! Matrix exponential and the block-exponential discretizations built on it.

use nalgebra::DMatrix;

const TAYLOR_MAX_TERMS: usize = 30;
/// Scaled argument norm at which the Taylor series is summed.
const SCALED_NORM: f64 = 0.5;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(M t)` by scaling and squaring around a truncated Taylor series.
///
/// Panics if `m` is not square.
pub fn matrix_exponential(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    assert!(m.is_square(), "matrix exponential of a non-square matrix");
    let n = m.nrows();
    let x = m * t;
    let norm = norm1(&x);
    let squarings = if norm > SCALED_NORM {
        (norm / SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    let y = x / 2f64.powi(squarings);

    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=TAYLOR_MAX_TERMS {
        term = &term * &y / k as f64;
        sum += &term;
        if norm1(&term) <= f64::EPSILON * 1e-3 * norm1(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Covariance of the integrated process noise over one period:
/// `Q_d = int_0^T exp(A s) Q exp(A' s) ds`, via Van Loan's block exponential.
pub fn discretize_process_noise(a: &DMatrix<f64>, q: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a));
    block.view_mut((0, n), (n, n)).copy_from(q);
    block.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = matrix_exponential(&block, t);
    let phi = e.view((n, n), (n, n)).transpose();
    let q_d = &phi * e.view((0, n), (n, n));
    (&q_d + q_d.transpose()) * 0.5
}

/// Zero-order-hold input gain `int_0^T exp(A s) ds B`.
pub fn discretize_input(a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut block = DMatrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, m)).copy_from(b);
    let e = matrix_exponential(&block, t);
    e.view((0, n), (n, m)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, max_norm: f64) -> DMatrix<f64> {
        let m: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let scale: f64 = rng.random_range(0.0..max_norm) / m.norm().max(1e-12);
        m * scale
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(
            matrix_exponential(&DMatrix::zeros(3, 3), 2.0),
            DMatrix::identity(3, 3)
        );
    }

    #[test]
    fn diagonal_closed_form() {
        for (a, b) in [(0.3_f64, -1.7_f64), (2.5, -4.0), (-10.0, 6.0)] {
            let e = matrix_exponential(
                &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![a, b])),
                1.0,
            );
            assert_relative_eq!(e[(0, 0)], f64::exp(a), max_relative = 1e-12);
            assert_relative_eq!(e[(1, 1)], f64::exp(b), max_relative = 1e-12);
            assert_eq!(e[(0, 1)], 0.0);
            assert_eq!(e[(1, 0)], 0.0);
        }
    }

    #[test]
    fn nilpotent_series_terminates() {
        let m = DMatrix::from_row_slice(2, 2, &[0., 1., 0., 0.]);
        for t in [0.1, 1.0, 7.5] {
            let e = matrix_exponential(&m, t);
            assert_relative_eq!(
                e,
                DMatrix::from_row_slice(2, 2, &[1., t, 0., 1.]),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn agrees_with_pade_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 4, 3.0);
            assert_relative_eq!(
                matrix_exponential(&m, 1.0),
                m.clone().exp(),
                epsilon = 1e-11,
                max_relative = 1e-11
            );
        }
    }

    #[test]
    fn group_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 4, 2.0);
            let (t1, t2) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
            let whole = matrix_exponential(&m, t1 + t2);
            let split = matrix_exponential(&m, t1) * matrix_exponential(&m, t2);
            assert!((whole - split).amax() < 1e-10);
        }
    }

    #[test]
    fn van_loan_cases() {
        let qd = discretize_process_noise(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2), 1.0);
        assert_eq!(qd, DMatrix::zeros(2, 2));
        let qd = discretize_process_noise(
            &DMatrix::from_element(1, 1, -2.0),
            &DMatrix::zeros(1, 1),
            1.0,
        );
        assert_eq!(qd, DMatrix::zeros(1, 1));

        let qd =
            discretize_process_noise(&DMatrix::zeros(3, 3), &(DMatrix::identity(3, 3) * 0.7), 2.0);
        assert_relative_eq!(qd, DMatrix::identity(3, 3) * 1.4, epsilon = 1e-14);

        let qd = discretize_process_noise(
            &DMatrix::from_element(1, 1, -1.0),
            &DMatrix::from_element(1, 1, 2.0),
            1.0,
        );
        assert!((qd[(0, 0)] - (1.0 - f64::exp(-2.0))).abs() < 1e-10);
    }

    #[test]
    fn van_loan_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 3, 2.0);
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let q = &g * g.transpose();
            let t = 0.8;
            // composite Simpson with nalgebra's Pade exponential
            let steps = 400;
            let h = t / steps as f64;
            let f = |s: f64| {
                let e = (&a * s).exp();
                &e * &q * e.transpose()
            };
            let mut acc = f(0.0) + f(t);
            for i in 1..steps {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += f(i as f64 * h) * w;
            }
            let simpson = acc * (h / 3.0);
            let qd = discretize_process_noise(&a, &q, t);
            assert!((qd - simpson).amax() < 1e-9);
        }
    }

    #[test]
    fn input_gain_scalar() {
        let g = discretize_input(
            &DMatrix::from_element(1, 1, -2.0),
            &DMatrix::from_element(1, 1, 1.0),
            1.0,
        );
        assert_relative_eq!(
            g[(0, 0)],
            (1.0 - f64::exp(-2.0)) / 2.0,
            max_relative = 1e-13
        );
        let g = discretize_input(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 0.5);
        assert_relative_eq!(g, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-15);
    }
}
