//! Central finite differences, the verification oracle for analytic
//! gradients. 64-bit only.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest elementwise deviation, normalized by the larger of the two
/// tensors' max-norms.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic.max_abs().max(numeric.max_abs());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

/// Largest per-element `|a−b| / max(|a|, |b|, floor)`.
pub fn elementwise_relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> Result<f64> {
    a.expect_same_shape(b, "relative error")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::rng::{rng_normal, StreamKey};
    use crate::nd::tensor::{softmax_cross_entropy, softmax_rows};

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -1.0, 7.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches() {
        let logits = rng_normal::<f64>(StreamKey::new(17), &[3, 5]);
        let labels = [4, 0, 2];
        let numeric = finite_diff_grad(|t| softmax_cross_entropy(t, &labels), &logits, 1e-5).unwrap();
        let mut analytic = softmax_rows(&logits).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            analytic.data_mut()[i * 5 + y] -= 1.0;
        }
        let analytic = analytic.scale(1.0 / 3.0);
        assert!(relative_error(&analytic, &numeric).unwrap() <= 1e-6);
    }
}
