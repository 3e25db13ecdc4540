use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let sa = expect_rank(a, 2, "matmul", "left operand")?;
    let sb = expect_rank(b, 2, "matmul", "right operand")?;
    ensure!(
        sa[1] == sb[0],
        "matmul",
        "inner dimension mismatch: {} vs {}",
        sa[1],
        sb[0]
    );
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    Tensor::new([m, n], mm(a.data(), b.data(), m, k, n))
}

fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Returns `(grad_a, grad_b) = (g b^T, a^T g)`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut ga = vec![T::zero(); m * k];
    for i in 0..m {
        let gi = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] = gi.iter().zip(&bd[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum();
        }
    }
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let gi = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *o += av * g;
            }
        }
    }
    (
        Tensor::new([m, k], ga).expect("matmul grad a"),
        Tensor::new([k, n], gb).expect("matmul grad b"),
    )
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    ensure!(
        axes.len() == rank,
        "permute",
        "expected {} axes, got {}",
        rank,
        axes.len()
    );
    let mut seen = vec![false; rank];
    for &a in axes {
        ensure!(a < rank && !seen[a], "permute", "invalid axis list {:?}", axes);
        seen[a] = true;
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn permute_backward<T: Scalar>(grad: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    permute(grad, &inverse).expect("permute grad")
}
