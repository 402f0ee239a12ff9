//! Dense solvers shared by the closed-form methods.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result, ZslError};
use crate::scalar::Scalar;

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn spd_solve<T: Scalar>(a: DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_dim("spd solve", a.nrows(), b.nrows())?;
    let chol = a
        .cholesky()
        .ok_or_else(|| ZslError::IllConditioned("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Solves `A X = B` for general square `A` by LU with partial pivoting.
pub fn lu_solve<T: Scalar>(a: DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_dim("lu solve", a.nrows(), b.nrows())?;
    a.lu()
        .solve(b)
        .ok_or_else(|| ZslError::IllConditioned("singular system".into()))
}

/// Minimum-norm least-squares solution of `A X ≈ B` and the numerical rank of `A`.
pub fn min_norm_lstsq<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<(DMatrix<T>, usize)> {
    check_dim("least squares", a.nrows(), b.nrows())?;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |m, s| m.max(s));
    let tol = smax
        * T::from_usize_lossy(a.nrows().max(a.ncols()))
        * T::of(T::EPS);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd
        .solve(b, tol)
        .map_err(|e| ZslError::IllConditioned(e.to_string()))?;
    Ok((x, rank))
}

/// Ridge regression with an unpenalized intercept: centers inputs and
/// targets, then solves `(XcᵀXc + λI) W = XcᵀYc`. `x` is `N x p`, `y` is
/// `N x q`; returns `(W: p x q, intercept: q)`.
pub fn ridge_with_intercept<T: Scalar>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
    lambda: T,
) -> Result<(DMatrix<T>, DVector<T>)> {
    check_dim("ridge rows", x.nrows(), y.nrows())?;
    if x.nrows() == 0 {
        return Err(ZslError::DegenerateData("ridge regression on zero rows".into()));
    }
    let n = T::from_usize_lossy(x.nrows());
    let x_mean = x.row_sum().transpose() / n;
    let y_mean = y.row_sum().transpose() / n;
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= x_mean.transpose();
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= y_mean.transpose();
    }
    let mut gram = xc.tr_mul(&xc);
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.tr_mul(&yc);
    let w = if lambda > T::zero() {
        spd_solve(gram, &rhs)?
    } else {
        min_norm_lstsq(&xc, &yc)?.0
    };
    let intercept = &y_mean - w.tr_mul(&x_mean);
    Ok((w, intercept))
}

/// Non-negative least squares `min ||A x - b||, x >= 0` (Lawson–Hanson active
/// set). Returns the solution and the residual norm.
pub fn nnls<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>) -> Result<(DVector<T>, T)> {
    check_dim("nnls", a.nrows(), b.len())?;
    let n = a.ncols();
    let mut x = DVector::<T>::zeros(n);
    let mut passive = vec![false; n];
    let tol = T::of(1e-12) * (T::one() + a.norm() * b.norm());
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap().then(j.cmp(&i)));
        let Some(j) = candidate else { break };
        passive[j] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&idx);
            let (z_sub, _) = min_norm_lstsq(&sub, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
            let mut z = DVector::<T>::zeros(n);
            for (p, &k) in idx.iter().enumerate() {
                z[k] = z_sub[(p, 0)];
            }
            if idx.iter().all(|&k| z[k] > T::zero()) {
                x = z;
                break;
            }
            // step back toward x until the first passive variable hits zero
            let mut alpha = T::one();
            for &k in &idx {
                if z[k] <= T::zero() {
                    let denom = x[k] - z[k];
                    if denom > T::zero() {
                        alpha = alpha.min(x[k] / denom);
                    } else {
                        alpha = T::zero();
                    }
                }
            }
            for k in 0..n {
                let xk = x[k];
                x[k] = xk + alpha * (z[k] - xk);
            }
            for &k in &idx {
                if x[k] <= tol.min(T::of(1e-14)) {
                    x[k] = T::zero();
                    passive[k] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual = (a * &x - b).norm();
    Ok((x, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn spd_and_lu_agree() {
        let a = dmatrix![4.0, 1.0; 1.0, 3.0];
        let b = dmatrix![1.0; 2.0];
        let x1 = spd_solve(a.clone(), &b).unwrap();
        let x2 = lu_solve(a.clone(), &b).unwrap();
        assert!((x1 - &x2).amax() < 1e-14);
        assert!((a * x2 - b).amax() < 1e-14);
        assert!(spd_solve(dmatrix![0.0, 0.0; 0.0, 1.0], &dmatrix![1.0; 1.0]).is_err());
    }

    #[test]
    fn min_norm_on_rank_deficient() {
        // two identical columns: minimum-norm splits the weight evenly
        let a: DMatrix<f64> = dmatrix![1.0, 1.0; 2.0, 2.0];
        let b = dmatrix![2.0; 4.0];
        let (x, rank) = min_norm_lstsq(&a, &b).unwrap();
        assert_eq!(rank, 1);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12 && (x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_small_cases() {
        let a = dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 1.0, 1.0, 0.0];
        let b = a.column(0) * 0.5 + a.column(1) * 0.5;
        let (x, r) = nnls(&a, &b.into_owned()).unwrap();
        assert!((x - dvector![0.5, 0.5, 0.0]).amax() < 1e-12);
        assert!(r < 1e-12);

        // unconstrained optimum has a negative coefficient
        let a: DMatrix<f64> = dmatrix![1.0, 0.0; 0.0, 1.0];
        let (x, r) = nnls(&a, &dvector![1.0, -2.0]).unwrap();
        assert_eq!(x, dvector![1.0, 0.0]);
        assert!((r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_limits() {
        let x: DMatrix<f64> = dmatrix![0.0; 1.0; 2.0; 3.0];
        let y = dmatrix![1.0; 3.0; 5.0; 7.0];
        let (w, b) = ridge_with_intercept(&x, &y, 0.0).unwrap();
        assert!((w[(0, 0)] - 2.0).abs() < 1e-12 && (b[0] - 1.0).abs() < 1e-12);
        let (w, b) = ridge_with_intercept(&x, &y, 1e12).unwrap();
        assert!(w[(0, 0)].abs() < 1e-9 && (b[0] - 4.0).abs() < 1e-9);
    }
}
