//! Margin loss over candidate distances and max-score union.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Per-row margin loss over a `[n, m]` distance matrix whose column 0 is the
/// positive answer: `softplus(d₀ − γ) + mean_j softplus(γ − d_j)`.
///
/// Returns the per-row losses and `scale · ∂loss_i/∂d`.
pub fn margin_loss_rows<T: Scalar>(d: ArrayView2<'_, T>, gamma: T, scale: T) -> Result<(Vec<T>, Array2<T>)> {
    if d.ncols() == 0 {
        return Err(Error::shape("margin loss needs the positive candidate"));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance"));
    }
    let n_neg = d.ncols() - 1;
    let inv = if n_neg > 0 { T::one() / T::lit(n_neg as f64) } else { T::zero() };
    let mut losses = Vec::with_capacity(d.nrows());
    let mut grad = Array2::zeros(d.dim());
    for (row, mut g) in d.rows().into_iter().zip(grad.rows_mut()) {
        let pos = row[0] - gamma;
        let mut l = softplus(pos);
        g[0] = scale * sigmoid(pos);
        for j in 1..row.len() {
            let neg = gamma - row[j];
            l += inv * softplus(neg);
            g[j] = -scale * inv * sigmoid(neg);
        }
        losses.push(l);
    }
    Ok((losses, grad))
}

/// Batch-mean loss and its gradients with respect to positive and negative distances.
pub fn compute_loss<T: Scalar>(d_pos: ArrayView1<'_, T>, d_neg: ArrayView2<'_, T>, gamma: T) -> Result<(T, Array1<T>, Array2<T>)> {
    if d_pos.len() != d_neg.nrows() {
        return Err(Error::shape(format!("{} positives vs {} negative rows", d_pos.len(), d_neg.nrows())));
    }
    let n = d_pos.len().max(1);
    let d = ndarray::concatenate(Axis(1), &[d_pos.insert_axis(Axis(1)), d_neg]).expect("rows agree");
    let (losses, grad) = margin_loss_rows(d.view(), gamma, T::one() / T::lit(n as f64))?;
    let loss = losses.iter().fold(T::zero(), |a, &b| a + b) / T::lit(n as f64);
    let g_pos = grad.column(0).to_owned();
    let g_neg = grad.slice(ndarray::s![.., 1..]).to_owned();
    Ok((loss, g_pos, g_neg))
}

fn check_branches<T>(xs: &[ArrayView2<'_, T>]) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::shape("union needs at least two branches"));
    }
    if xs.iter().any(|x| x.dim() != xs[0].dim()) {
        return Err(Error::shape("union branches differ in shape"));
    }
    Ok(())
}

/// Index of the winning branch per entry; `better(a, b)` says `a` strictly beats `b`.
fn winners<T: Scalar>(xs: &[ArrayView2<'_, T>], better: impl Fn(T, T) -> bool) -> Array2<usize> {
    let mut arg = Array2::zeros(xs[0].dim());
    for ((i, j), a) in arg.indexed_iter_mut() {
        let mut best = xs[0][(i, j)];
        for (b, x) in xs.iter().enumerate().skip(1) {
            if better(x[(i, j)], best) {
                best = x[(i, j)];
                *a = b;
            }
        }
    }
    arg
}

fn fold<T: Scalar>(xs: &[ArrayView2<'_, T>], f: impl Fn(T, T) -> T) -> Array2<T> {
    let mut out = xs[0].to_owned();
    for x in &xs[1..] {
        Zip::from(&mut out).and(x).for_each(|o, &v| *o = f(*o, v));
    }
    out
}

fn route<T: Scalar>(k: usize, arg: &Array2<usize>, g: ArrayView2<'_, T>) -> Vec<Array2<T>> {
    let mut out = vec![Array2::zeros(g.dim()); k];
    for ((i, j), &a) in arg.indexed_iter() {
        out[a][(i, j)] = g[(i, j)];
    }
    out
}

/// Elementwise max of branch scores.
pub fn union_score<T: Scalar>(branches: &[ArrayView2<'_, T>]) -> Result<Array2<T>> {
    check_branches(branches)?;
    Ok(fold(branches, T::max))
}

/// Routes `g` to the argmax branch; ties go to the lowest branch index.
pub fn union_score_backward<T: Scalar>(branches: &[ArrayView2<'_, T>], g: ArrayView2<'_, T>) -> Result<Vec<Array2<T>>> {
    check_branches(branches)?;
    Ok(route(branches.len(), &winners(branches, |a, b| a > b), g))
}

/// Distance form used by the engine: elementwise min (max of negated distances).
pub fn union_distance<T: Scalar>(branches: &[ArrayView2<'_, T>]) -> Result<Array2<T>> {
    check_branches(branches)?;
    Ok(fold(branches, T::min))
}

pub fn union_distance_backward<T: Scalar>(branches: &[ArrayView2<'_, T>], g: ArrayView2<'_, T>) -> Result<Vec<Array2<T>>> {
    check_branches(branches)?;
    Ok(route(branches.len(), &winners(branches, |a, b| a < b), g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_at_margin_is_log_two() {
        let (l, _, _) = compute_loss(array![12.0f64].view(), array![[12.0]].view(), 12.0).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_reference_value() {
        let (l, _, _) = compute_loss(array![2.0f64].view(), array![[14.0, 15.0]].view(), 12.0).unwrap();
        assert!((l - 0.087_803_080_207_574_1).abs() < 1e-12, "{l}");
    }

    #[test]
    fn nonfinite_rejected() {
        let r = compute_loss(array![f64::NAN].view(), array![[1.0]].view(), 12.0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn union_max_and_ties() {
        let a = array![[1.0, 5.0]];
        let b = array![[3.0, 2.0]];
        assert_eq!(union_score(&[a.view(), b.view()]).unwrap(), array![[3.0, 5.0]]);
        let g = array![[1.0, 1.0]];
        let r = union_score_backward(&[a.view(), a.view()], g.view()).unwrap();
        assert_eq!(r[0], g);
        assert_eq!(r[1], array![[0.0, 0.0]]);
    }
}
