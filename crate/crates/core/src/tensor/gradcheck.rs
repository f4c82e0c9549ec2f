//! Central finite differences, the reference for every backward rule.

use super::{Scalar, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Tensor<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    assert!(h.to_f64() > 0.0, "step size must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1)`.
///
/// The unit floor keeps near-zero components from dominating through
/// cancellation noise in the finite-difference estimate.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}
