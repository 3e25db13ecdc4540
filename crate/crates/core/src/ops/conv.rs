use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// Per-pixel affine map: `out[c,y,x] = sum_k W[c,k] * in[k,y,x] + b[c]`.
///
/// `input` is `[Cin,H,W]`, `weight` is `[Cout,Cin]`, `bias` is `[Cout]`.
pub fn conv1x1<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, hw) = check(input, weight, bias)?;
    let cout = weight.dim(0);
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); cout * hw];
    for (c, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias.data()[c]);
        for k in 0..cin {
            let wk = w[c * cin + k];
            if wk == T::zero() {
                continue;
            }
            for (o, &v) in row.iter_mut().zip(&x[k * hw..(k + 1) * hw]) {
                *o += wk * v;
            }
        }
    }
    Tensor::new([cout, input.dim(1), input.dim(2)], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv1x1_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cout, cin) = (weight.dim(0), weight.dim(1));
    let hw = input.dim(1) * input.dim(2);
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gi = vec![T::zero(); cin * hw];
    let mut gw = vec![T::zero(); cout * cin];
    let mut gb = vec![T::zero(); cout];
    for c in 0..cout {
        let gc = &g[c * hw..(c + 1) * hw];
        gb[c] = gc.iter().copied().sum();
        for k in 0..cin {
            let xk = &x[k * hw..(k + 1) * hw];
            gw[c * cin + k] = gc.iter().zip(xk).map(|(&a, &b)| a * b).sum();
            let wk = w[c * cin + k];
            if wk != T::zero() {
                for (o, &v) in gi[k * hw..(k + 1) * hw].iter_mut().zip(gc) {
                    *o += wk * v;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).expect("conv grad input"),
        Tensor::new(weight.shape().to_vec(), gw).expect("conv grad weight"),
        Tensor::new([cout], gb).expect("conv grad bias"),
    )
}

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let s = expect_rank(input, 3, "conv1x1", "input")?;
    let ws = expect_rank(weight, 2, "conv1x1", "weight")?;
    let bs = expect_rank(bias, 1, "conv1x1", "bias")?;
    ensure!(
        ws[1] == s[0],
        "conv1x1",
        "input channel dimension Cin: weight expects {} but input has {}",
        ws[1],
        s[0]
    );
    ensure!(
        bs[0] == ws[0],
        "conv1x1",
        "output channel dimension Cout: weight has {} rows but bias has {}",
        ws[0],
        bs[0]
    );
    Ok((s[0], s[1] * s[2]))
}
