//! Numerical verification helpers: central finite differences and error
//! metrics. Used by the test suites to check every differentiable operation
//! against an independent derivative estimate; exposed publicly so new ops
//! can be verified the same way.

use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function `f` at `x0`, one element
/// at a time: `(f(x + h e_i) - f(x - h e_i)) / 2h` with `h` scaled to the
/// element's magnitude. Meant for `f64`, where truncation and rounding error
/// are both far below the tolerances used in tests.
pub fn central_diff(f: impl Fn(&Tensor<f64>) -> f64, x0: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Tensor::zeros(x0.shape());
    for i in 0..x0.numel() {
        let xi = x0.as_slice()[i];
        let h = 1e-5 * xi.abs().max(1.0);
        let mut xp = x0.clone();
        xp.as_mut_slice()[i] = xi + h;
        let mut xm = x0.clone();
        xm.as_mut_slice()[i] = xi - h;
        g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Worst-case relative error between two tensors, with a floor on the
/// denominator so near-zero entries are compared absolutely (at a far
/// tighter effective tolerance).
pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel err shape mismatch");
    let mut worst = 0.0f64;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        let denom = x.abs().max(y.abs()).max(1e-3);
        let e = (x - y).abs() / denom;
        if e > worst {
            worst = e;
        }
    }
    worst
}
