//! Discriminant canonical correlation filters.
//!
//! Maximizes `w1ᵀ C̃ w2` subject to `w1ᵀ C11 w1 = w2ᵀ C22 w2 = 1`. After
//! whitening with `C11^{-1/2}` and `C22^{-1/2}` the constraints become plain
//! orthonormality, so the solution pairs are the leading singular vectors of
//! `T = C11^{-1/2} C̃ C22^{-1/2}`, mapped back through the whitening.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, Axis};

use crate::error::{config_err, shape_err, Result};
use crate::linalg::{fix_sign, inv_sqrt, sym_eig};
use crate::moments::DiscriminantMoments;
use crate::patches::PatchGeometry;

const DEGENERATE_TOL: f64 = 1e-10;
// singular values below this fraction of the largest are treated as zero
const NULL_SPACE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPairs {
    /// `dim x L`, column `g` is `w_{1,g}`.
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    /// Non-increasing, non-negative correlations.
    pub rho: Array1<f64>,
}

pub fn solve_dcca(m: &DiscriminantMoments, filters: usize) -> Result<CanonicalPairs> {
    let dim = m.c11.nrows();
    for (name, mat) in [("C11", &m.c11), ("C22", &m.c22), ("C~", &m.ctilde)] {
        if mat.dim() != (dim, dim) {
            return Err(shape_err!("{name} is {:?}, expected {dim}x{dim}", mat.dim()));
        }
    }
    if filters < 1 || filters > dim {
        return Err(config_err!("filter count {filters} must be in 1..={dim}"));
    }

    let a = inv_sqrt(&m.c11.view())?;
    let b = inv_sqrt(&m.c22.view())?;
    let t = a.dot(&m.ctilde).dot(&b);
    let ttt = t.dot(&t.t());
    let eig = sym_eig(&((&ttt + &ttt.t()) * 0.5).view())?;

    // singular values from the back-substituted vectors, which keeps the
    // null space at rounding level instead of sqrt(rounding)
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut raw_vs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(dim);
    for g in 0..dim {
        let u = eig.vectors.column(g).to_owned();
        let v = t.t().dot(&u);
        let s = v.dot(&v).sqrt();
        us.push(u.to_vec());
        raw_vs.push((s, v.to_vec()));
    }
    let sigma_max = raw_vs.iter().fold(0.0f64, |a, (s, _)| a.max(*s));
    let null_cut = NULL_SPACE_TOL * sigma_max;
    let is_null = |s: f64| s <= null_cut || s == 0.0;

    let mut vs: Vec<Vec<f64>> = raw_vs
        .iter()
        .filter(|(s, _)| !is_null(*s))
        .map(|(s, v)| v.iter().map(|x| x / s).collect())
        .collect();
    let rank = vs.len();
    complete_orthonormal(&mut vs, dim);
    let mut v_completion = vs.split_off(rank).into_iter();
    // the eigensolver's basis of the null space is arbitrary; rebuild it the
    // same way as for view 2 so it depends continuously on the moments
    let mut ranked_us: Vec<Vec<f64>> = us
        .iter()
        .zip(&raw_vs)
        .filter(|(_, (s, _))| !is_null(*s))
        .map(|(u, _)| u.clone())
        .collect();
    complete_orthonormal(&mut ranked_us, dim);
    let mut u_completion = ranked_us.split_off(rank).into_iter();

    // pair sign follows the view-1 filter
    let mut pairs: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(dim);
    let mut ranked = vs.into_iter();
    for (g, u) in us.into_iter().enumerate() {
        let s = raw_vs[g].0;
        let (s, mut u, mut v) = if is_null(s) {
            (
                0.0,
                u_completion.next().expect("one completion vector per null direction"),
                v_completion.next().expect("one completion vector per null direction"),
            )
        } else {
            (s, u, ranked.next().expect("one vector per ranked direction"))
        };
        let mut w1 = a.dot(&ndarray::aview1(&u)).to_vec();
        if fix_sign(&mut w1) {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
        pairs.push((s, u, v, w1));
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    order_degenerate(&mut pairs, sigma_max);

    let mut w1 = Array2::zeros((dim, filters));
    let mut w2 = Array2::zeros((dim, filters));
    let mut rho = Array1::zeros(filters);
    for (g, (s, _u, v, w1_col)) in pairs.into_iter().take(filters).enumerate() {
        w1.column_mut(g).assign(&Array1::from(w1_col));
        w2.column_mut(g).assign(&b.dot(&Array1::from(v)));
        rho[g] = s;
    }
    Ok(CanonicalPairs { w1, w2, rho })
}

/// Extends `vs` to `dim` orthonormal vectors by Gram-Schmidt over the
/// standard basis, taking the basis vector with the largest residual first.
fn complete_orthonormal(vs: &mut Vec<Vec<f64>>, dim: usize) {
    while vs.len() < dim {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut r = vec![0.0; dim];
            r[e] = 1.0;
            for _ in 0..2 {
                for v in vs.iter() {
                    let d: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
                    r.iter_mut().zip(v).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, r));
            }
        }
        let (n, mut r) = best.expect("dim > 0");
        r.iter_mut().for_each(|x| *x /= n);
        vs.push(r);
    }
}

/// Within runs of equal singular values, orders pairs by their
/// sign-fixed `u` vectors, lexicographically descending.
fn order_degenerate(pairs: &mut [(f64, Vec<f64>, Vec<f64>, Vec<f64>)], sigma_max: f64) {
    let tol = DEGENERATE_TOL * sigma_max.max(1.0);
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= tol {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|x, y| lex_desc(&x.1, &y.1));
        }
        start = end;
    }
}

fn lex_desc(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.total_cmp(x) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Convolution kernels of one layer for both views.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterLayer {
    pub geometry: PatchGeometry,
    /// Whether patch windows are mean-centered before filtering.
    pub center: bool,
    pub view1: Vec<Array2<f64>>,
    pub view2: Vec<Array2<f64>>,
}

impl FilterLayer {
    pub fn filters(&self) -> usize {
        self.view1.len()
    }

    pub fn kernels(&self, view: usize) -> &[Array2<f64>] {
        match view {
            0 => &self.view1,
            _ => &self.view2,
        }
    }

    /// `L x dim` matrix whose rows are the flattened kernels of `view`.
    pub fn kernel_matrix(&self, view: usize) -> Array2<f64> {
        let ks = self.kernels(view);
        let dim = self.geometry.dim();
        let mut m = Array2::zeros((ks.len(), dim));
        for (g, k) in ks.iter().enumerate() {
            m.row_mut(g).assign(&Array1::from_iter(k.iter().copied()));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterBank {
    pub layers: Vec<FilterLayer>,
}

/// Unflattens each canonical column into an `l1 x l2` kernel, row-major.
pub fn reshape_filters(pairs: &CanonicalPairs, geom: &PatchGeometry, center: bool) -> Result<FilterLayer> {
    let dim = geom.dim();
    if pairs.w1.nrows() != dim || pairs.w2.nrows() != dim {
        return Err(shape_err!(
            "canonical vectors have {} rows, patch geometry needs {dim}",
            pairs.w1.nrows()
        ));
    }
    let unflatten = |w: &Array2<f64>| -> Vec<Array2<f64>> {
        w.axis_iter(Axis(1))
            .map(|col| {
                Array2::from_shape_vec((geom.l1, geom.l2), col.to_vec())
                    .expect("dim checked above")
            })
            .collect()
    };
    Ok(FilterLayer {
        geometry: *geom,
        center,
        view1: unflatten(&pairs.w1),
        view2: unflatten(&pairs.w2),
    })
}
