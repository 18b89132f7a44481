//! Central finite differences, used to validate analytic gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient<T: Scalar>(x: &Tensor<T>, h: T, mut f: impl FnMut(&Tensor<T>) -> T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// `max|a - n| / max(max|n|, floor)`: error relative to the gradient's scale.
pub fn relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: T) -> T {
    let scale = numeric.max_abs().max(analytic.max_abs()).max(floor);
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(T::zero(), |m, (&a, &n)| m.max((a - n).abs()));
    diff / scale
}
