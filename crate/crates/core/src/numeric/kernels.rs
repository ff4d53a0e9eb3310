//! Forward kernels shared by the tape and by direct (non-recording) callers.

use super::{note_zero_norm_row, NumericError, Result, Scalar, Tensor};

/// Norm floor applied to zero rows in [`l2_normalize_rows`].
pub const NORM_EPSILON: f64 = 1e-12;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn row_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.as_matrix();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Accumulated in `f64` whatever `T` is.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let s: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    max + s.ln()
}

/// Mean row cross-entropy in `f64`.
pub(crate) fn mean_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[t].as_f64()
        })
        .sum();
    total / targets.len() as f64
}

pub(crate) fn check_targets(logits_rows: usize, classes: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != logits_rows {
        return Err(NumericError::ShapeMismatch {
            op: "row_cross_entropy",
            left: vec![logits_rows, classes],
            right: vec![targets.len()],
        });
    }
    if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= classes) {
        return Err(NumericError::TargetOutOfRange {
            row,
            target,
            classes,
        });
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[row, target]`.
pub fn row_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (m, n) = (logits.rows(), logits.cols());
    check_targets(m, n, targets)?;
    Ok(T::lit(mean_cross_entropy(logits, targets)))
}

pub(crate) fn row_norm<T: Scalar>(row: &[T]) -> T {
    let sq: T = row.iter().map(|&x| x * x).sum();
    let norm = sq.sqrt();
    if norm.as_f64() < NORM_EPSILON {
        note_zero_norm_row();
        norm + T::lit(NORM_EPSILON)
    } else {
        norm
    }
}

pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.as_matrix();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row_norm(row);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        assert_eq!(
            err,
            NumericError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::<f32>::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let p = row_softmax(&x);
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert!((p.at(1, 0) - 1.0).abs() < 1e-6 && p.at(1, 1) < 1e-6);
        assert!(p.all_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random(1, 7, &mut rng);
        let p = row_softmax(&r);
        let denom: f64 = r.data().iter().map(|x| x.exp()).sum();
        for j in 0..7 {
            assert!((p.at(0, j) - r.at(0, j).exp() / denom).abs() < 1e-6);
        }
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        let n = 6;
        let x = Tensor::<f64>::zeros(&[1, n]);
        let ce = row_cross_entropy(&x, &[2]).unwrap();
        assert!((ce - (n as f64).ln()).abs() < 1e-9);
        let single = Tensor::<f64>::filled(&[1, 1], 3.5);
        assert_eq!(row_cross_entropy(&single, &[0]).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(4, 6, &mut rng);
        let targets = [0, 5, 2, 2];
        let mut oracle = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z: f64 = (0..6).map(|j| logits.at(i, j).exp()).sum();
            oracle += -(logits.at(i, t).exp() / z).ln();
        }
        oracle /= 4.0;
        assert!((row_cross_entropy(&logits, &targets).unwrap() - oracle).abs() < 1e-6);

        assert!(matches!(
            row_cross_entropy(&logits, &[0, 1, 6, 0]),
            Err(NumericError::TargetOutOfRange { row: 2, target: 6, classes: 6 })
        ));
    }

    #[test]
    fn normalize_cases() {
        let x = Tensor::<f32>::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8]]).unwrap();
        let y = l2_normalize_rows(&x);
        assert!((y.at(0, 0) - 0.6).abs() < 1e-6 && (y.at(0, 1) - 0.8).abs() < 1e-6);
        assert!((y.at(1, 0) - 0.6).abs() < 1e-6 && (y.at(1, 1) - 0.8).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = l2_normalize_rows(&random(10, 8, &mut rng));
        for i in 0..10 {
            let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_row_is_guarded() {
        let before = crate::numeric::zero_norm_warnings();
        let y = l2_normalize_rows(&Tensor::<f32>::zeros(&[1, 3]));
        assert!(y.all_finite());
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        assert!(crate::numeric::zero_norm_warnings() > before);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
