//! Dense symmetric eigendecomposition (cyclic Jacobi) and helpers built on it.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{shape_err, Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues in descending order and the matching orthonormal eigenvectors
/// as columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps until the off-diagonal Frobenius norm is at most `1e-12 * ‖S‖_F`.
/// Each eigenvector is signed so its largest-magnitude entry is positive.
pub fn sym_eig(s: &ArrayView2<f64>) -> Result<SymEig> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(shape_err!("sym_eig needs a square matrix, got {:?}", s.dim()));
    }
    let norm = frobenius(s);
    if !norm.is_finite() {
        return Err(Error::Numerical("sym_eig input is not finite".into()));
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((s[[i, j]] - s[[j, i]]).abs());
        }
    }
    if asym > SYMMETRY_TOL * norm {
        return Err(shape_err!(
            "sym_eig input is not symmetric (max asymmetry {asym:e}, norm {norm:e})"
        ));
    }

    // row-major working copies
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (s[[i, j]] + s[[j, i]]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let target = OFF_DIAG_TOL * norm;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a, n) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, n, p, q, c, sn, t, apq);
            }
        }
    }
    if !converged && off_diagonal_norm(&a, n) > target {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| a[i * n + i]));
    let mut vectors = Array2::zeros((n, n));
    for (k, &i) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|r| v[r * n + i]).collect();
        fix_sign(&mut col);
        for r in 0..n {
            vectors[[r, k]] = col[r];
        }
    }
    Ok(SymEig { values, vectors })
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[i * n + j] * a[i * n + j];
            }
        }
    }
    sum.sqrt()
}

#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    a[p * n + p] -= t * apq;
    a[q * n + q] += t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a[k * n + p] = new_kp;
        a[p * n + k] = new_kp;
        a[k * n + q] = new_kq;
        a[q * n + k] = new_kq;
    }
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is positive.
pub fn fix_sign(v: &mut [f64]) -> bool {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

/// `C^{-1/2}` of a symmetric positive definite matrix.
pub fn inv_sqrt(c: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let eig = sym_eig(c)?;
    let n = c.nrows();
    if let Some(&min) = eig.values.iter().last() {
        if !(min > 0.0) {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (smallest eigenvalue {min:e}); increase the ridge"
            )));
        }
    }
    let scale = eig.values.mapv(|l| 1.0 / l.sqrt());
    let mut scaled = eig.vectors.clone();
    for k in 0..n {
        scaled.column_mut(k).mapv_inplace(|x| x * scale[k]);
    }
    let out = scaled.dot(&eig.vectors.t());
    // symmetrize the rounding
    Ok((&out + &out.t()) * 0.5)
}

/// Solves `A x = b` column-wise for symmetric positive definite `A` via its
/// eigendecomposition.
pub fn spd_solve(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let eig = sym_eig(a)?;
    if let Some(&min) = eig.values.iter().last() {
        if !(min > 0.0) {
            return Err(Error::Numerical(format!(
                "system matrix is not positive definite (smallest eigenvalue {min:e})"
            )));
        }
    }
    let vt_b = eig.vectors.t().dot(b);
    let mut scaled = vt_b;
    for (k, mut row) in scaled.rows_mut().into_iter().enumerate() {
        let inv = 1.0 / eig.values[k];
        row.mapv_inplace(|x| x * inv);
    }
    Ok(eig.vectors.dot(&scaled))
}
