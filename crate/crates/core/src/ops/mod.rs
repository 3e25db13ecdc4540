//! Pure forward and backward kernels.
//!
//! Every forward kernel has a matching `*_backward` returning the
//! vector-Jacobian product for each differentiable input. The autodiff
//! graph in [`crate::graph`] is a thin recording layer over these.

mod conv;
mod linalg;
mod roi_align;
mod softmax;
mod spatial;
mod xcorr;

pub use conv::{conv1x1, conv1x1_backward};
pub use linalg::{matmul, matmul_backward, permute, permute_backward};
pub use roi_align::{roi_align, roi_align_backward, RoiAlignPlan};
pub use softmax::{log_softmax_axis, log_softmax_backward, softmax_axis, softmax_backward};
pub use spatial::{
    mean_spatial, mean_spatial_backward, tile_spatial, tile_spatial_backward, upsample_nearest,
    upsample_nearest_backward,
};
pub use xcorr::{depthwise_xcorr, depthwise_xcorr_backward, xcorr_padding};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad, "relu", |v, g| if v > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
