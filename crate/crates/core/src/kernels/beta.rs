//! Beta embeddings. A query state row is `[α ‖ β]`, every entry in
//! `[BETA_MIN, BETA_MAX]`.

use ndarray::{s, Array1, Array2, ArrayView2, Zip};

use super::gqe::{check_candidates, same_shape};
use super::linalg::{concat_cols, mlp2, mlp2_backward, softmax_across, softmax_across_backward};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};

pub const BETA_MIN: f64 = 0.05;
pub const BETA_MAX: f64 = 1e9;

/// `min(softplus(x) + BETA_MIN, BETA_MAX)`.
#[inline]
pub fn positive<T: Scalar>(x: T) -> T {
    (softplus(x) + T::lit(BETA_MIN)).min(T::lit(BETA_MAX))
}

#[inline]
pub fn positive_grad<T: Scalar>(x: T) -> T {
    if softplus(x) + T::lit(BETA_MIN) < T::lit(BETA_MAX) {
        sigmoid(x)
    } else {
        T::zero()
    }
}

#[inline]
pub fn clamp<T: Scalar>(x: T) -> T {
    x.max(T::lit(BETA_MIN)).min(T::lit(BETA_MAX))
}

#[inline]
fn clamp_grad<T: Scalar>(x: T) -> T {
    if x >= T::lit(BETA_MIN) && x <= T::lit(BETA_MAX) {
        T::one()
    } else {
        T::zero()
    }
}

pub fn check_range<T: Scalar>(x: &ArrayView2<'_, T>) -> Result<()> {
    let (lo, hi) = (T::lit(BETA_MIN), T::lit(BETA_MAX));
    match x.iter().find(|&&v| !(v >= lo && v <= hi)) {
        Some(&v) => Err(Error::ParamOutOfRange(v.as_f64())),
        None => Ok(()),
    }
}

/// Maps unconstrained rows into Beta parameters.
pub fn embed<T: Scalar>(raw: ArrayView2<'_, T>) -> Array2<T> {
    raw.mapv(positive)
}

/// `positive(W₂ · relu(W₁ · [α ‖ β ‖ r]))`.
pub fn project<T: Scalar>(x: ArrayView2<'_, T>, rel: ArrayView2<'_, T>, w1: &Array2<T>, w2: &Array2<T>) -> Result<Array2<T>> {
    if x.nrows() != rel.nrows() || x.ncols() != 2 * rel.ncols() {
        return Err(Error::shape(format!("beta project: state {:?} vs relation {:?}", x.dim(), rel.dim())));
    }
    check_range(&x)?;
    let inp = concat_cols(&[x, rel]);
    Ok(mlp2(inp.view(), w1, w2).0.mapv(positive))
}

/// Returns `(∂x, ∂r)`.
pub fn project_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    rel: ArrayView2<'_, T>,
    w1: &Array2<T>,
    w2: &Array2<T>,
    g: ArrayView2<'_, T>,
    gw1: &mut Array2<T>,
    gw2: &mut Array2<T>,
) -> (Array2<T>, Array2<T>) {
    let inp = concat_cols(&[x, rel]);
    let (out_pre, pre) = mlp2(inp.view(), w1, w2);
    let dpre = Zip::from(&g).and(&out_pre).map_collect(|&g, &p| g * positive_grad(p));
    let dinp = mlp2_backward(inp.view(), &pre, w1, w2, dpre.view(), gw1, gw2);
    let w = x.ncols();
    (dinp.slice(s![.., ..w]).to_owned(), dinp.slice(s![.., w..]).to_owned())
}

fn attention<T: Scalar>(xs: &[ArrayView2<'_, T>], w1: &Array2<T>, w2: &Array2<T>) -> Result<(Vec<Array2<T>>, Vec<Array2<T>>, Array2<T>)> {
    if xs.len() < 2 {
        return Err(Error::shape("beta intersect needs at least two inputs"));
    }
    for x in &xs[1..] {
        same_shape(&xs[0], x, "beta intersect")?;
    }
    let mut logits = Vec::with_capacity(xs.len());
    let mut pres = Vec::with_capacity(xs.len());
    for x in xs {
        check_range(x)?;
        let (l, p) = mlp2(*x, w1, w2);
        logits.push(l);
        pres.push(p);
    }
    let att = softmax_across(&logits);
    let mut sum = Array2::zeros(xs[0].dim());
    for (a, x) in att.iter().zip(xs) {
        sum += &(a * x);
    }
    Ok((att, pres, sum))
}

/// Attention-weighted sums `α = Σ wᵢαᵢ`, `β = Σ wᵢβᵢ`, clamped.
pub fn intersect<T: Scalar>(xs: &[ArrayView2<'_, T>], w1: &Array2<T>, w2: &Array2<T>) -> Result<Array2<T>> {
    Ok(attention(xs, w1, w2)?.2.mapv(clamp))
}

pub fn intersect_backward<T: Scalar>(
    xs: &[ArrayView2<'_, T>],
    w1: &Array2<T>,
    w2: &Array2<T>,
    g: ArrayView2<'_, T>,
    gw1: &mut Array2<T>,
    gw2: &mut Array2<T>,
) -> Result<Vec<Array2<T>>> {
    let (att, pres, sum) = attention(xs, w1, w2)?;
    let dsum = Zip::from(&g).and(&sum).map_collect(|&g, &v| g * clamp_grad(v));
    let datt: Vec<Array2<T>> = xs.iter().map(|x| &dsum * x).collect();
    let dlogits = softmax_across_backward(&att, &datt);
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut dx = &att[i] * &dsum;
            dx += &mlp2_backward(*x, &pres[i], w1, w2, dlogits[i].view(), gw1, gw2);
            dx
        })
        .collect())
}

/// `(α, β) → (1/α, 1/β)`, clamped.
pub fn negate<T: Scalar>(x: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_range(&x)?;
    Ok(x.mapv(|v| clamp(v.recip())))
}

pub fn negate_backward<T: Scalar>(x: ArrayView2<'_, T>, g: ArrayView2<'_, T>) -> Array2<T> {
    Zip::from(&g).and(&x).map_collect(|&g, &v| -g * clamp_grad(v.recip()) / (v * v))
}

/// Entity-side terms of the KL distance, computed once per entity view.
///
/// `KL(e ‖ q) = C(q) + E(e) + Σ_t α_q,t·A_e,t + β_q,t·B_e,t` with
/// `C = Σ ln B(α_q, β_q)`, `E = Σ [α ψ(α) + β ψ(β) − (α+β) ψ(α+β)] − ln B(α, β)`,
/// `A = ψ(α+β) − ψ(α)`, `B = ψ(α+β) − ψ(β)`.
#[derive(Debug, Clone)]
pub struct BetaStats<T> {
    pub constant: Array1<T>,
    pub linear: Array2<T>,
    /// `[ψ₁(α) ‖ ψ₁(β) ‖ ψ₁(α+β)]`, only for gradient passes.
    pub trigamma: Option<Array2<T>>,
}

impl<T: Scalar> BetaStats<T> {
    pub fn new(rows: ArrayView2<'_, T>, with_trigamma: bool) -> Result<Self> {
        check_range(&rows)?;
        let (n, d) = (rows.nrows(), rows.ncols() / 2);
        let mut constant = Array1::zeros(n);
        let mut linear = Array2::zeros((n, 2 * d));
        let mut trigamma = with_trigamma.then(|| Array2::zeros((n, 3 * d)));
        for e in 0..n {
            let row = rows.row(e);
            let mut acc = T::zero();
            for t in 0..d {
                let (a, b) = (row[t], row[d + t]);
                let (pa, pb, pab) = (digamma_unchecked(a), digamma_unchecked(b), digamma_unchecked(a + b));
                let lnb = lgamma_unchecked(a) + lgamma_unchecked(b) - lgamma_unchecked(a + b);
                acc += a * pa + b * pb - (a + b) * pab - lnb;
                linear[(e, t)] = pab - pa;
                linear[(e, d + t)] = pab - pb;
                if let Some(tri) = trigamma.as_mut() {
                    tri[(e, t)] = trigamma_unchecked(a);
                    tri[(e, d + t)] = trigamma_unchecked(b);
                    tri[(e, 2 * d + t)] = trigamma_unchecked(a + b);
                }
            }
            constant[e] = acc;
        }
        Ok(BetaStats { constant, linear, trigamma })
    }
}

/// `Σ_t KL(Beta(entity) ‖ Beta(query))` for each query against its candidates.
pub fn distance<T: Scalar>(q: ArrayView2<'_, T>, stats: &BetaStats<T>, cands: &[&[u32]]) -> Result<Array2<T>> {
    if q.ncols() != stats.linear.ncols() {
        return Err(Error::shape(format!("beta distance: query width {} vs entity width {}", q.ncols(), stats.linear.ncols())));
    }
    check_range(&q)?;
    let m = check_candidates(q.nrows(), cands, stats.constant.len())?;
    let d = q.ncols() / 2;
    let mut out = Array2::zeros((q.nrows(), m));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let qi = q.row(i);
        let c: T = (0..d).map(|t| lgamma_unchecked(qi[t]) + lgamma_unchecked(qi[d + t]) - lgamma_unchecked(qi[t] + qi[d + t])).sum();
        for (o, &e) in row.iter_mut().zip(cands[i]) {
            let lin = stats.linear.row(e as usize);
            let dot = Zip::from(&qi).and(&lin).fold(T::zero(), |acc, &a, &b| acc + a * b);
            *o = c + stats.constant[e as usize] + dot;
        }
    }
    Ok(out)
}

pub fn distance_backward<T: Scalar>(
    q: ArrayView2<'_, T>,
    view: ArrayView2<'_, T>,
    stats: &BetaStats<T>,
    cands: &[&[u32]],
    g: ArrayView2<'_, T>,
    view_grad: &mut Array2<T>,
) -> Result<Array2<T>> {
    check_candidates(q.nrows(), cands, view.nrows())?;
    let tri = stats.trigamma.as_ref().ok_or_else(|| Error::shape("beta distance backward needs trigamma terms"))?;
    let d = q.ncols() / 2;
    let mut dq = Array2::zeros(q.dim());
    let mut own = vec![T::zero(); 2 * d];
    for i in 0..q.nrows() {
        let qi = q.row(i);
        for t in 0..d {
            let (a2, b2) = (qi[t], qi[d + t]);
            let pab2 = digamma_unchecked(a2 + b2);
            own[t] = digamma_unchecked(a2) - pab2;
            own[d + t] = digamma_unchecked(b2) - pab2;
        }
        let mut dqi = dq.row_mut(i);
        for (&e, &gij) in cands[i].iter().zip(g.row(i)) {
            if gij == T::zero() {
                continue;
            }
            let e = e as usize;
            let (v, lin, tr) = (view.row(e), stats.linear.row(e), tri.row(e));
            let gsum: T = gij;
            for t in 0..2 * d {
                dqi[t] += gsum * (own[t] + lin[t]);
            }
            for t in 0..d {
                let (a1, b1, a2, b2) = (v[t], v[d + t], qi[t], qi[d + t]);
                let cross = (a2 - a1 + b2 - b1) * tr[2 * d + t];
                view_grad[(e, t)] += gsum * ((a1 - a2) * tr[t] + cross);
                view_grad[(e, d + t)] += gsum * ((b1 - b2) * tr[d + t] + cross);
            }
        }
    }
    Ok(dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::beta_kl;
    use ndarray::array;

    #[test]
    fn reciprocal_negation() {
        let out = negate(array![[2.0f64, 4.0]].view()).unwrap();
        assert_eq!(out, array![[0.5, 0.25]]);
        assert!(matches!(negate(array![[0.0f64, 1.0]].view()), Err(Error::ParamOutOfRange(_))));
        // 1/30 is below the floor and clamps
        assert_eq!(negate(array![[30.0f64, 1.0]].view()).unwrap()[(0, 0)], BETA_MIN);
    }

    #[test]
    fn factored_kl_matches_closed_form() {
        let view = array![[2.0f64, 0.3, 2.0, 4.0], [1.0, 7.5, 1.0, 0.2]];
        let q = array![[1.0f64, 1.3, 1.0, 0.6]];
        let stats = BetaStats::new(view.view(), false).unwrap();
        let out = distance(q.view(), &stats, &[&[0, 1]]).unwrap();
        for e in 0..2 {
            let want = beta_kl(view[(e, 0)], view[(e, 2)], q[(0, 0)], q[(0, 2)]).unwrap()
                + beta_kl(view[(e, 1)], view[(e, 3)], q[(0, 1)], q[(0, 3)]).unwrap();
            assert!((out[(0, e)] - want).abs() < 1e-12, "{e}: {} vs {want}", out[(0, e)]);
        }
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let view = array![[1.0f64, 1.0]];
        let stats = BetaStats::new(view.view(), false).unwrap();
        assert!(distance(view.view(), &stats, &[&[0]]).unwrap()[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn positive_map_is_bounded() {
        assert!(positive(-100.0f64) >= BETA_MIN);
        assert_eq!(positive(1e12f64), BETA_MAX);
        assert_eq!(positive_grad(1e12f64), 0.0);
    }
}
