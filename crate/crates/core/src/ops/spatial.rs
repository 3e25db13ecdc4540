use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// `[C,1,1] -> [C,h,w]` by replication.
pub fn tile_spatial<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = expect_rank(x, 3, "tile_spatial", "input")?;
    ensure!(s[1] == 1 && s[2] == 1, "tile_spatial", "input must be [C,1,1], got {:?}", s);
    let c = s[0];
    let mut out = Vec::with_capacity(c * h * w);
    for &v in x.data() {
        out.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new([c, h, w], out)
}

pub fn tile_spatial_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let (c, hw) = (grad.dim(0), grad.dim(1) * grad.dim(2));
    Tensor::from_fn([c, 1, 1], |ch| grad.data()[ch * hw..(ch + 1) * hw].iter().copied().sum())
}

/// `[C,h,w] -> [C,1,1]` spatial mean.
pub fn mean_spatial<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = expect_rank(x, 3, "mean_spatial", "input")?;
    let (c, hw) = (s[0], s[1] * s[2]);
    ensure!(hw > 0, "mean_spatial", "empty spatial extent");
    let n = T::lit(hw as f64);
    Ok(Tensor::from_fn([c, 1, 1], |ch| {
        x.data()[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() / n
    }))
}

pub fn mean_spatial_backward<T: Scalar>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[1] * input_shape[2];
    let n = T::lit(hw as f64);
    Tensor::from_fn(input_shape.to_vec(), |i| grad.data()[i / hw] / n)
}

/// Nearest-neighbour upsampling of `[C,h,w]` by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = expect_rank(x, 3, "upsample_nearest", "input")?;
    ensure!(factor >= 1, "upsample_nearest", "factor must be >= 1");
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h * factor, w * factor);
    Ok(Tensor::from_fn([c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let xx = i % ow;
        x.data()[(ch * h + y / factor) * w + xx / factor]
    }))
}

pub fn upsample_nearest_backward<T: Scalar>(input_shape: &[usize], factor: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[1], input_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(input_shape.to_vec());
    for (i, &g) in grad.data().iter().enumerate() {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let xx = i % ow;
        out.data_mut()[(ch * h + y / factor) * w + xx / factor] += g;
    }
    out
}
