//! Box embeddings. A query state row is `[center ‖ offset]` with offset ≥ 0.

use ndarray::{s, Array2, ArrayView2, Zip};

use super::gqe::{check_candidates, same_shape};
use super::linalg::{acc_weight_grad, concat_cols, mlp2, mlp2_backward, relu, softmax_across, softmax_across_backward};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

fn split<'a, T>(x: &'a ArrayView2<'_, T>) -> (ArrayView2<'a, T>, ArrayView2<'a, T>) {
    let d = x.ncols() / 2;
    (x.slice(s![.., ..d]), x.slice(s![.., d..]))
}

/// `[c ‖ 0]`: points embed as zero-size boxes.
pub fn embed<T: Scalar>(centers: ArrayView2<'_, T>) -> Array2<T> {
    let zeros = Array2::zeros(centers.dim());
    concat_cols(&[centers, zeros.view()])
}

/// `(c + r_c, softplus(o + r_o))`.
pub fn project<T: Scalar>(x: ArrayView2<'_, T>, rc: ArrayView2<'_, T>, ro: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let (c, o) = split(&x);
    same_shape(&c, &rc, "q2b project center")?;
    same_shape(&o, &ro, "q2b project offset")?;
    let c2 = &c + &rc;
    let o2 = Zip::from(&o).and(&ro).map_collect(|&a, &b| softplus(a + b));
    Ok(concat_cols(&[c2.view(), o2.view()]))
}

/// Returns `(∂x, ∂r_c, ∂r_o)`.
pub fn project_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    ro: ArrayView2<'_, T>,
    g: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (_, o) = split(&x);
    let (gc, go) = split(&g);
    let dpre = Zip::from(&go).and(&o).and(&ro).map_collect(|&g, &a, &b| g * sigmoid(a + b));
    (concat_cols(&[gc, dpre.view()]), gc.to_owned(), dpre)
}

/// `[−c ‖ o]`: reflect the center, keep the extent.
pub fn negate<T: Scalar>(x: ArrayView2<'_, T>) -> Array2<T> {
    let (c, o) = split(&x);
    concat_cols(&[c.mapv(|v| -v).view(), o])
}

pub struct Weights<'a, T> {
    pub att1: &'a Array2<T>,
    pub att2: &'a Array2<T>,
    pub off1: &'a Array2<T>,
    pub off2: &'a Array2<T>,
}

pub struct WeightGrads<'a, T> {
    pub att1: &'a mut Array2<T>,
    pub att2: &'a mut Array2<T>,
    pub off1: &'a mut Array2<T>,
    pub off2: &'a mut Array2<T>,
}

struct IntersectCache<T> {
    att: Vec<Array2<T>>,
    att_pre: Vec<Array2<T>>,
    off_pre: Vec<Array2<T>>,
    deepsets: Array2<T>,
    gate: Array2<T>,
    min: Array2<T>,
    argmin: Array2<u8>,
}

fn intersect_inner<T: Scalar>(xs: &[ArrayView2<'_, T>], w: &Weights<'_, T>) -> Result<(Array2<T>, IntersectCache<T>)> {
    if xs.len() < 2 {
        return Err(Error::shape("q2b intersect needs at least two boxes"));
    }
    for x in &xs[1..] {
        same_shape(&xs[0], x, "q2b intersect")?;
    }
    let k = xs.len();
    let mut logits = Vec::with_capacity(k);
    let mut att_pre = Vec::with_capacity(k);
    let mut off_pre = Vec::with_capacity(k);
    let (c0, o0) = split(&xs[0]);
    let mut deepsets = Array2::zeros((o0.nrows(), w.off1.nrows()));
    let mut min = o0.to_owned();
    let mut argmin = Array2::<u8>::zeros(o0.dim());
    for (i, x) in xs.iter().enumerate() {
        let (c, o) = split(x);
        let (l, pre) = mlp2(c, w.att1, w.att2);
        logits.push(l);
        att_pre.push(pre);
        let h = o.dot(&w.off1.t());
        deepsets += &relu(&h);
        off_pre.push(h);
        if i > 0 {
            Zip::from(&mut min).and(&mut argmin).and(&o).for_each(|m, a, &v| {
                if v < *m {
                    *m = v;
                    *a = i as u8;
                }
            });
        }
    }
    deepsets /= T::lit(k as f64);
    let gate = deepsets.dot(&w.off2.t()).mapv(sigmoid);
    let att = softmax_across(&logits);
    let mut center = Array2::zeros(c0.dim());
    for (a, x) in att.iter().zip(xs) {
        let (c, _) = split(x);
        center += &(a * &c);
    }
    let offset = &min * &gate;
    let out = concat_cols(&[center.view(), offset.view()]);
    Ok((out, IntersectCache { att, att_pre, off_pre, deepsets, gate, min, argmin }))
}

/// Attention-weighted center, gated minimum offset.
pub fn intersect<T: Scalar>(xs: &[ArrayView2<'_, T>], w: &Weights<'_, T>) -> Result<Array2<T>> {
    intersect_inner(xs, w).map(|r| r.0)
}

pub fn intersect_backward<T: Scalar>(
    xs: &[ArrayView2<'_, T>],
    w: &Weights<'_, T>,
    g: ArrayView2<'_, T>,
    gw: WeightGrads<'_, T>,
) -> Result<Vec<Array2<T>>> {
    let (_, cache) = intersect_inner(xs, w)?;
    let k = xs.len();
    let (gc, go) = split(&g);
    let datt: Vec<Array2<T>> = xs.iter().map(|x| &gc * &split(x).0).collect();
    let dlogits = softmax_across_backward(&cache.att, &datt);
    let dmin = &go * &cache.gate;
    let dgate = &go * &cache.min;
    let dgate_pre = Zip::from(&dgate).and(&cache.gate).map_collect(|&d, &s| d * s * (T::one() - s));
    acc_weight_grad(gw.off2, dgate_pre.view(), cache.deepsets.view());
    let dz = dgate_pre.dot(w.off2) / T::lit(k as f64);
    let mut out = Vec::with_capacity(k);
    for (i, x) in xs.iter().enumerate() {
        let (c, o) = split(x);
        let mut dc = &cache.att[i] * &gc;
        dc += &mlp2_backward(c, &cache.att_pre[i], w.att1, w.att2, dlogits[i].view(), &mut *gw.att1, &mut *gw.att2);
        let mut dh = dz.clone();
        Zip::from(&mut dh).and(&cache.off_pre[i]).for_each(|d, &p| {
            if p <= T::zero() {
                *d = T::zero();
            }
        });
        acc_weight_grad(gw.off1, dh.view(), o);
        let mut d_o = dh.dot(w.off1);
        Zip::from(&mut d_o).and(&dmin).and(&cache.argmin).for_each(|d, &m, &a| {
            if a as usize == i {
                *d += m;
            }
        });
        out.push(concat_cols(&[dc.view(), d_o.view()]));
    }
    Ok(out)
}

/// Scalar box distance `‖max(0, |v−c|−o)‖₁ + α‖min(|v−c|, o)‖₁`.
pub fn box_distance<T: Scalar>(v: &[T], c: &[T], o: &[T], alpha: T) -> T {
    let mut outside = T::zero();
    let mut inside = T::zero();
    for ((&v, &c), &o) in v.iter().zip(c).zip(o) {
        let delta = (v - c).abs();
        outside += (delta - o).max(T::zero());
        inside += delta.min(o);
    }
    outside + alpha * inside
}

pub fn distance<T: Scalar>(q: ArrayView2<'_, T>, view: ArrayView2<'_, T>, cands: &[&[u32]], alpha: T) -> Result<Array2<T>> {
    if q.ncols() != 2 * view.ncols() {
        return Err(Error::shape(format!("q2b distance: box width {} vs entity width {}", q.ncols(), view.ncols())));
    }
    let m = check_candidates(q.nrows(), cands, view.nrows())?;
    let (c, o) = split(&q);
    let mut out = Array2::zeros((q.nrows(), m));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (ci, oi) = (c.row(i), o.row(i));
        for (d, &e) in row.iter_mut().zip(cands[i]) {
            let v = view.row(e as usize);
            let (mut outside, mut inside) = (T::zero(), T::zero());
            Zip::from(&v).and(&ci).and(&oi).for_each(|&v, &c, &o| {
                let delta = (v - c).abs();
                outside += (delta - o).max(T::zero());
                inside += delta.min(o);
            });
            *d = outside + alpha * inside;
        }
    }
    Ok(out)
}

pub fn distance_backward<T: Scalar>(
    q: ArrayView2<'_, T>,
    view: ArrayView2<'_, T>,
    cands: &[&[u32]],
    alpha: T,
    g: ArrayView2<'_, T>,
    view_grad: &mut Array2<T>,
) -> Result<Array2<T>> {
    check_candidates(q.nrows(), cands, view.nrows())?;
    let d = view.ncols();
    let (c, o) = split(&q);
    let mut dq = Array2::zeros(q.dim());
    for i in 0..q.nrows() {
        let (ci, oi) = (c.row(i), o.row(i));
        for (&e, &gij) in cands[i].iter().zip(g.row(i)) {
            if gij == T::zero() {
                continue;
            }
            let v = view.row(e as usize);
            for t in 0..d {
                let diff = v[t] - ci[t];
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let (ddelta, doff) = if diff.abs() > oi[t] { (T::one(), alpha - T::one()) } else { (alpha, T::zero()) };
                let gv = gij * ddelta * sign;
                view_grad[(e as usize, t)] += gv;
                dq[(i, t)] -= gv;
                dq[(i, d + t)] += gij * doff;
            }
        }
    }
    Ok(dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn distance_examples() {
        assert_eq!(box_distance(&[0.5f64], &[0.5], &[3.0], 0.02), 0.0);
        let d = box_distance(&[3.0f64], &[0.0], &[1.0], 0.02);
        assert!((d - 2.02).abs() < 1e-15);
        let q = array![[0.0f64, 1.0]];
        let view = array![[3.0], [0.0]];
        let out = distance(q.view(), view.view(), &[&[0, 1]], 0.02).unwrap();
        assert!((out[(0, 0)] - 2.02).abs() < 1e-15);
        assert_eq!(out[(0, 1)], 0.0);
    }

    #[test]
    fn projected_offsets_nonnegative() {
        let x = array![[0.0, 0.0, 0.0, 0.0]];
        let out = project(x.view(), array![[1.0, 2.0]].view(), array![[-50.0, 3.0]].view()).unwrap();
        assert!(out.slice(s![.., 2..]).iter().all(|&o| o >= 0.0));
        assert_eq!(out.slice(s![.., ..2]), array![[1.0, 2.0]]);
    }

    #[test]
    fn negation_reflects_center() {
        assert_eq!(negate(array![[1.0, -2.0, 0.5, 0.25]].view()), array![[-1.0, 2.0, 0.5, 0.25]]);
    }
}
