//! Translation projection, DeepSets intersection and L1 distance.

use ndarray::{Array2, ArrayView2, Zip};

use super::linalg::{mlp2, mlp2_backward};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn same_shape<T>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `q + r` rowwise.
pub fn project<T: Scalar>(q: ArrayView2<'_, T>, rel: ArrayView2<'_, T>) -> Result<Array2<T>> {
    same_shape(&q, &rel, "gqe project")?;
    Ok(&q + &rel)
}

/// Elementwise sum of `k` matrices, adding each element's terms in sorted
/// order so the result does not depend on input order.
pub(crate) fn symmetric_sum<T: Scalar>(xs: &[ArrayView2<'_, T>]) -> Array2<T> {
    let mut out = Array2::zeros(xs[0].dim());
    let mut buf = Vec::with_capacity(xs.len());
    for ((i, j), o) in out.indexed_iter_mut() {
        buf.clear();
        buf.extend(xs.iter().map(|x| x[(i, j)]));
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        *o = buf.iter().fold(T::zero(), |acc, &v| acc + v);
    }
    out
}

fn check_set<T>(xs: &[ArrayView2<'_, T>], what: &str) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::shape(format!("{what} needs at least two inputs, got {}", xs.len())));
    }
    for x in &xs[1..] {
        same_shape(&xs[0], x, what)?;
    }
    Ok(())
}

/// `W₂ · relu(W₁ · mean_k(x))`.
pub fn intersect<T: Scalar>(xs: &[ArrayView2<'_, T>], w1: &Array2<T>, w2: &Array2<T>) -> Result<Array2<T>> {
    check_set(xs, "gqe intersect")?;
    let mean = symmetric_sum(xs) / T::lit(xs.len() as f64);
    Ok(mlp2(mean.view(), w1, w2).0)
}

pub fn intersect_backward<T: Scalar>(
    xs: &[ArrayView2<'_, T>],
    w1: &Array2<T>,
    w2: &Array2<T>,
    g: ArrayView2<'_, T>,
    gw1: &mut Array2<T>,
    gw2: &mut Array2<T>,
) -> Result<Vec<Array2<T>>> {
    check_set(xs, "gqe intersect")?;
    let k = T::lit(xs.len() as f64);
    let mean = symmetric_sum(xs) / k;
    let (_, pre) = mlp2(mean.view(), w1, w2);
    let dmean = mlp2_backward(mean.view(), &pre, w1, w2, g, gw1, gw2) / k;
    Ok(vec![dmean; xs.len()])
}

pub fn negate<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.mapv(|v| -v)
}

pub(crate) fn check_candidates(n: usize, cands: &[&[u32]], view_rows: usize) -> Result<usize> {
    if cands.len() != n {
        return Err(Error::shape(format!("{} candidate lists for {n} queries", cands.len())));
    }
    let m = cands.first().map_or(0, |c| c.len());
    for c in cands {
        if c.len() != m {
            return Err(Error::shape("candidate lists of unequal length in one batch"));
        }
        if let Some(&bad) = c.iter().find(|&&e| e as usize >= view_rows) {
            return Err(Error::IndexOutOfRange { index: bad as usize, rows: view_rows });
        }
    }
    Ok(m)
}

/// `‖q − v‖₁` for each query row against its candidate rows: `[n, m]`.
pub fn distance<T: Scalar>(q: ArrayView2<'_, T>, view: ArrayView2<'_, T>, cands: &[&[u32]]) -> Result<Array2<T>> {
    if q.ncols() != view.ncols() {
        return Err(Error::shape(format!("gqe distance: query width {} vs entity width {}", q.ncols(), view.ncols())));
    }
    let m = check_candidates(q.nrows(), cands, view.nrows())?;
    let mut out = Array2::zeros((q.nrows(), m));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let qi = q.row(i);
        for (o, &c) in row.iter_mut().zip(cands[i]) {
            let v = view.row(c as usize);
            *o = Zip::from(&qi).and(&v).fold(T::zero(), |acc, &a, &b| acc + (a - b).abs());
        }
    }
    Ok(out)
}

/// Returns `∂/∂q` and accumulates `∂/∂v` into `view_grad`.
pub fn distance_backward<T: Scalar>(
    q: ArrayView2<'_, T>,
    view: ArrayView2<'_, T>,
    cands: &[&[u32]],
    g: ArrayView2<'_, T>,
    view_grad: &mut Array2<T>,
) -> Result<Array2<T>> {
    check_candidates(q.nrows(), cands, view.nrows())?;
    let mut dq = Array2::zeros(q.dim());
    for i in 0..q.nrows() {
        let qi = q.row(i);
        let mut dqi = dq.row_mut(i);
        for (&c, &gij) in cands[i].iter().zip(g.row(i)) {
            if gij == T::zero() {
                continue;
            }
            let v = view.row(c as usize);
            let mut dv = view_grad.row_mut(c as usize);
            Zip::from(&mut dqi).and(&mut dv).and(&qi).and(&v).for_each(|dq, dv, &a, &b| {
                let s = if a > b {
                    gij
                } else if a < b {
                    -gij
                } else {
                    T::zero()
                };
                *dq += s;
                *dv -= s;
            });
        }
    }
    Ok(dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn translation() {
        let q = array![[1.0, 2.0]];
        assert_eq!(project(q.view(), array![[3.0, -1.0]].view()).unwrap(), array![[4.0, 1.0]]);
        assert_eq!(project(q.view(), array![[0.0, 0.0]].view()).unwrap(), q);
        assert!(matches!(project(q.view(), array![[0.0]].view()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn intersect_is_symmetric_bitwise() {
        let w1 = array![[0.3, -0.2, 0.1], [0.5, 0.4, -0.7], [0.2, 0.2, 0.9]];
        let w2 = array![[1.1, 0.0, -0.3], [0.4, -0.6, 0.2], [0.1, 0.7, 0.5]];
        let a = array![[0.1, 0.7, -0.3]];
        let b = array![[1e-3, -2.5, 0.33]];
        let c = array![[7.0, 0.01, -0.3]];
        let x = intersect(&[a.view(), b.view(), c.view()], &w1, &w2).unwrap();
        let y = intersect(&[c.view(), a.view(), b.view()], &w1, &w2).unwrap();
        assert_eq!(x, y);
        let same = intersect(&[a.view(), a.view()], &w1, &w2).unwrap();
        assert_eq!(same, mlp2(a.view(), &w1, &w2).0);
    }

    #[test]
    fn l1_distance() {
        let view = array![[0.0, 0.0], [1.0, -1.0]];
        let d = distance(array![[1.0, 1.0]].view(), view.view(), &[&[0, 1]]).unwrap();
        assert_eq!(d, array![[2.0, 2.0]]);
    }
}
