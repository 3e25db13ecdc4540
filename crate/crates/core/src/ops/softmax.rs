use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn split<T: Scalar>(x: &Tensor<T>, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    ensure!(
        axis < x.rank(),
        op,
        "axis {} out of range for rank {}",
        axis,
        x.rank()
    );
    let s = x.shape();
    let n = s[axis];
    ensure!(n > 0, op, "axis {} is empty", axis);
    Ok((s[..axis].iter().product(), n, s[axis + 1..].iter().product()))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split(x, axis, "softmax_axis")?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let mut m = T::neg_infinity();
            for i in 0..n {
                m = m.max(src[at(i)]);
            }
            let mut z = T::zero();
            for i in 0..n {
                let e = (src[at(i)] - m).exp();
                out[at(i)] = e;
                z += e;
            }
            for i in 0..n {
                out[at(i)] = out[at(i)] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given the softmax output `y` and upstream `grad`, returns `y * (grad - <grad, y>)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split(y, axis, "softmax_axis").expect("softmax grad axis");
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let dot: T = (0..n).map(|i| yd[at(i)] * gd[at(i)]).sum();
            for i in 0..n {
                out[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("softmax grad shape")
}

pub fn log_softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split(x, axis, "log_softmax_axis")?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let mut m = T::neg_infinity();
            for i in 0..n {
                m = m.max(src[at(i)]);
            }
            let z: T = (0..n).map(|i| (src[at(i)] - m).exp()).sum();
            let lz = m + z.ln();
            for i in 0..n {
                out[at(i)] = src[at(i)] - lz;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given the log-softmax output `y`, returns `grad - softmax * sum(grad)`.
pub fn log_softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split(y, axis, "log_softmax_axis").expect("log_softmax grad axis");
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let gs: T = (0..n).map(|i| gd[at(i)]).sum();
            for i in 0..n {
                out[at(i)] = gd[at(i)] - yd[at(i)].exp() * gs;
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("log_softmax grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::new([x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_pair() {
        let y = softmax_axis(&v(&[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn analytic_pair() {
        let y = softmax_axis(&v(&[0.0, 3f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_evaluation() {
        let x: [f64; 5] = [0.3, -1.2, 2.5, 0.0, -0.7];
        let z: f64 = x.iter().map(|a| a.exp()).sum();
        let y = softmax_axis(&v(&x), 0).unwrap();
        for (i, a) in x.iter().enumerate() {
            assert!((y.data()[i] - a.exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_axis_and_empty_axis() {
        assert!(softmax_axis(&v(&[1.0]), 1).is_err());
        assert!(softmax_axis(&Tensor::<f64>::zeros([2, 0]), 1).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let y = softmax_axis(&v(&[1000.0, 999.0]), 0).unwrap();
        assert!(y.is_finite());
        let ly = log_softmax_axis(&v(&[1000.0, -1000.0]), 0).unwrap();
        assert!(ly.is_finite());
    }

    #[test]
    fn inner_axis_normalizes_columns() {
        let x = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.37).sin() * 3.0);
        let y = softmax_axis(&x, 0).unwrap();
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| y.at(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn sums_to_one_and_is_shift_invariant(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
            let y = softmax_axis(&v(&xs), 0).unwrap();
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = xs.iter().map(|a| a + shift).collect();
            let y2 = softmax_axis(&v(&shifted), 0).unwrap();
            prop_assert!(y.max_abs_diff(&y2) < 1e-12);
        }
    }
}
