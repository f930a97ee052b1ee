use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Result<Tensor<T>> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff evaluation at coordinate {i}")));
        }
        out.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(out)
}

/// Elementwise relative error `|a-b| / max(|a|,|b|)`, skipping entries where
/// both magnitudes fall below `floor`.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: T) -> T {
    a.iter().zip(b).fold(T::zero(), |worst, (&x, &y)| {
        let scale = x.abs().max(y.abs());
        if scale <= floor {
            worst
        } else {
            worst.max((x - y).abs() / scale)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff(|v: &Tensor<f64>| v.norm_sq(), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::vector(vec![3.0, -1.0, 0.5]);
        let g = finite_diff(|_: &Tensor<f64>| 7.0, &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let x = Tensor::vector(vec![0.0]);
        assert!(finite_diff(|v: &Tensor<f64>| 1.0 / v.data()[0].abs().min(0.0), &x, 1e-3).is_err());
    }
}
