//! `σ(W_p · [h_str ‖ F · sem] + b_p)` with a frozen semantic input.

use ndarray::{s, Array2, ArrayView2, Zip};

use super::linalg::{acc_weight_grad, col_sum, concat_cols, matmul_t};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

pub struct FusionWeights<'a, T> {
    /// `[d, d_l]`
    pub f: &'a Array2<T>,
    /// `[d, s + d]`
    pub w: &'a Array2<T>,
    /// `[1, d]`
    pub b: &'a Array2<T>,
}

pub struct FusionGrads<T> {
    pub h: Array2<T>,
    pub f: Array2<T>,
    pub w: Array2<T>,
    pub b: Array2<T>,
}

fn check<T>(h: &ArrayView2<'_, T>, sem: &ArrayView2<'_, T>, fw: &FusionWeights<'_, T>) -> Result<()> {
    if h.nrows() != sem.nrows() {
        return Err(Error::shape(format!("fuse: {} structural rows vs {} semantic rows", h.nrows(), sem.nrows())));
    }
    if sem.ncols() != fw.f.ncols() || fw.w.ncols() != h.ncols() + fw.f.nrows() || fw.b.dim() != (1, fw.w.nrows()) {
        return Err(Error::shape(format!(
            "fuse: h {:?}, sem {:?}, F {:?}, W {:?}, b {:?}",
            h.dim(),
            sem.dim(),
            fw.f.dim(),
            fw.w.dim(),
            fw.b.dim()
        )));
    }
    Ok(())
}

fn pre_activation<T: Scalar>(h: ArrayView2<'_, T>, sem: ArrayView2<'_, T>, fw: &FusionWeights<'_, T>) -> (Array2<T>, Array2<T>) {
    let z = matmul_t(sem, fw.f);
    let x = concat_cols(&[h, z.view()]);
    let pre = matmul_t(x.view(), fw.w) + fw.b;
    (x, pre)
}

pub fn fuse_semantic<T: Scalar>(h: ArrayView2<'_, T>, sem: ArrayView2<'_, T>, fw: &FusionWeights<'_, T>) -> Result<Array2<T>> {
    check(&h, &sem, fw)?;
    Ok(pre_activation(h, sem, fw).1.mapv(sigmoid))
}

/// Gradients for `h_str`, `F`, `W_p`, `b_p`. The semantic rows get none.
pub fn fuse_semantic_backward<T: Scalar>(
    h: ArrayView2<'_, T>,
    sem: ArrayView2<'_, T>,
    fw: &FusionWeights<'_, T>,
    g: ArrayView2<'_, T>,
) -> Result<FusionGrads<T>> {
    check(&h, &sem, fw)?;
    let (x, pre) = pre_activation(h, sem, fw);
    let dpre = Zip::from(&g).and(&pre).map_collect(|&g, &p| {
        let s = sigmoid(p);
        g * s * (T::one() - s)
    });
    let mut gw = Array2::zeros(fw.w.dim());
    acc_weight_grad(&mut gw, dpre.view(), x.view());
    let dx = dpre.dot(fw.w);
    let sw = h.ncols();
    let dz = dx.slice(s![.., sw..]);
    let mut gf = Array2::zeros(fw.f.dim());
    acc_weight_grad(&mut gf, dz, sem);
    Ok(FusionGrads { h: dx.slice(s![.., ..sw]).to_owned(), f: gf, w: gw, b: col_sum(dpre.view()) })
}
