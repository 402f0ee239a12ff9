//! Limited-memory BFGS for the smooth convex fits (logistic and softmax
//! regression).

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct LbfgsResult<T: Scalar> {
    pub x: DVector<T>,
    pub value: T,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which returns value and gradient. Stops once
/// `||grad|| <= tol(x)` or after `max_iter` iterations. Armijo backtracking;
/// curvature pairs with `sᵀy <= 0` are skipped.
pub fn lbfgs<T, F, G>(mut f: F, x0: DVector<T>, max_iter: usize, tol: G) -> LbfgsResult<T>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> (T, DVector<T>),
    G: Fn(&DVector<T>) -> T,
{
    const MEMORY: usize = 10;
    let c1 = T::of(1e-4);
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut pairs: VecDeque<(DVector<T>, DVector<T>, T)> = VecDeque::with_capacity(MEMORY);
    let mut iterations = 0;

    while iterations < max_iter {
        let gnorm = g.norm();
        if gnorm <= tol(&x) {
            return LbfgsResult { x, value: fx, grad_norm: gnorm, iterations, converged: true };
        }

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = *rho * s.dot(&q);
            q.axpy(-a, y, T::one());
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            q *= s.dot(y) / y.dot(y);
        } else {
            q *= T::one() / gnorm.max(T::one());
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = *rho * y.dot(&q);
            q.axpy(*a - b, s, T::one());
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= T::zero() {
            pairs.clear();
            dir = -g.clone() / gnorm.max(T::one());
            slope = g.dot(&dir);
        }

        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + c1 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= T::of(0.5);
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // no decrease representable at this precision
            return LbfgsResult { x, value: fx, grad_norm: gnorm, iterations, converged: false };
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > T::zero() {
            if pairs.len() == MEMORY {
                pairs.pop_front();
            }
            pairs.push_back((s, y, T::one() / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
    }
    let grad_norm = g.norm();
    let converged = grad_norm <= tol(&x);
    LbfgsResult { x, value: fx, grad_norm, iterations, converged }
}
