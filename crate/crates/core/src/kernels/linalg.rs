//! Dense helpers shared by the backbone kernels.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

/// `x · wᵀ` for a row batch `x: [n, in]` and weights `w: [out, in]`.
pub fn matmul_t<T: Scalar>(x: ArrayView2<'_, T>, w: &Array2<T>) -> Array2<T> {
    x.dot(&w.t())
}

/// `gw += dyᵀ · x`.
pub fn acc_weight_grad<T: Scalar>(gw: &mut Array2<T>, dy: ArrayView2<'_, T>, x: ArrayView2<'_, T>) {
    general_mat_mul(T::one(), &dy.t(), &x, T::one(), gw);
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Two-layer bias-free MLP `w2 · relu(w1 · x)`. Returns `(output, hidden pre-activation)`.
pub fn mlp2<T: Scalar>(x: ArrayView2<'_, T>, w1: &Array2<T>, w2: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let pre = matmul_t(x, w1);
    let out = matmul_t(relu(&pre).view(), w2);
    (out, pre)
}

/// Backward of [`mlp2`]; accumulates weight gradients and returns `∂/∂x`.
pub fn mlp2_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    pre: &Array2<T>,
    w1: &Array2<T>,
    w2: &Array2<T>,
    dout: ArrayView2<'_, T>,
    gw1: &mut Array2<T>,
    gw2: &mut Array2<T>,
) -> Array2<T> {
    acc_weight_grad(gw2, dout, relu(pre).view());
    let mut dh = dout.dot(w2);
    Zip::from(&mut dh).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
    acc_weight_grad(gw1, dh.view(), x);
    dh.dot(w1)
}

/// Elementwise softmax across `k` same-shaped logit matrices.
pub fn softmax_across<T: Scalar>(logits: &[Array2<T>]) -> Vec<Array2<T>> {
    let mut max = logits[0].clone();
    for l in &logits[1..] {
        Zip::from(&mut max).and(l).for_each(|m, &v| *m = m.max(v));
    }
    let mut exps: Vec<Array2<T>> = logits.iter().map(|l| (l - &max).mapv(T::exp)).collect();
    let mut total = Array2::zeros(max.dim());
    for e in &exps {
        total += e;
    }
    for e in &mut exps {
        *e /= &total;
    }
    exps
}

/// Backward of [`softmax_across`]: `dL_i = a_i ⊙ (dA_i − Σ_j a_j ⊙ dA_j)`.
pub fn softmax_across_backward<T: Scalar>(attn: &[Array2<T>], dattn: &[Array2<T>]) -> Vec<Array2<T>> {
    let mut dot = Array2::zeros(attn[0].dim());
    for (a, d) in attn.iter().zip(dattn) {
        dot += &(a * d);
    }
    attn.iter().zip(dattn).map(|(a, d)| a * &(d - &dot)).collect()
}

/// Mean of `k` same-shaped matrices.
pub fn mean_of<T: Scalar>(xs: &[ArrayView2<'_, T>]) -> Array2<T> {
    let mut m = xs[0].to_owned();
    for x in &xs[1..] {
        m += x;
    }
    m / T::lit(xs.len() as f64)
}

/// Column sum as a `[1, cols]` row.
pub fn col_sum<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub fn concat_cols<T: Scalar>(parts: &[ArrayView2<'_, T>]) -> Array2<T> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}
