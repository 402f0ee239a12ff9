//! Graph label propagation over the unlabeled unseen-class pool: KNN
//! affinity, symmetric normalization and the closed-form solve
//! `S = (I - αL)⁻¹ S0`.

use nalgebra::DMatrix;

use crate::error::{check_dim, Result, ZslError};
use crate::linalg::spd_solve;
use crate::model::{argmax_class, BilinearModel, ClassEmbedding, FeatureMatrix, Scorer};
use crate::scalar::Scalar;

/// Degree assigned to isolated nodes before normalization.
pub const DEGREE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph<T: Scalar> {
    /// Symmetric, non-negative, zero diagonal.
    pub m: DMatrix<T>,
    pub k: usize,
    pub sigma: T,
}

/// Neighbor lists: the `k` nearest other rows of `points` (`n x m`), ties to
/// the lower index.
fn knn_lists<T: Scalar>(sq: &DMatrix<T>, k: usize) -> Vec<Vec<usize>> {
    let n = sq.nrows();
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                sq[(i, a)]
                    .partial_cmp(&sq[(i, b)])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            others.truncate(k);
            others
        })
        .collect()
}

fn squared_distances<T: Scalar>(points: &DMatrix<T>) -> DMatrix<T> {
    let n = points.nrows();
    DMatrix::from_fn(n, n, |i, j| (points.row(i) - points.row(j)).norm_squared())
}

/// `M_ij = exp(-||x_i - x_j||² / (2σ²))` when `i ∈ KNN(j)` or `j ∈ KNN(i)`,
/// zero otherwise and on the diagonal. `points` is `n x m`, one row per node.
pub fn knn_affinity<T: Scalar>(points: &DMatrix<T>, k: usize, sigma: T) -> Result<AffinityGraph<T>> {
    let n = points.nrows();
    if k == 0 || k >= n {
        return Err(ZslError::contract(format!("KNN needs 1 <= k < n, got k = {k}, n = {n}")));
    }
    if !(sigma > T::zero()) {
        return Err(ZslError::contract("kernel bandwidth must be positive"));
    }
    let sq = squared_distances(points);
    let lists = knn_lists(&sq, k);
    let two_s2 = T::of(2.0) * sigma * sigma;
    let mut m = DMatrix::zeros(n, n);
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            let w = (-sq[(i, j)] / two_s2).exp();
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
    }
    Ok(AffinityGraph { m, k, sigma })
}

/// Mean distance from each node to its `k` nearest neighbors; a scale for
/// choosing the kernel bandwidth.
pub fn mean_knn_distance<T: Scalar>(points: &DMatrix<T>, k: usize) -> Result<T> {
    let n = points.nrows();
    if k == 0 || k >= n {
        return Err(ZslError::contract(format!("KNN needs 1 <= k < n, got k = {k}, n = {n}")));
    }
    let sq = squared_distances(points);
    let lists = knn_lists(&sq, k);
    let total = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
        .fold(T::zero(), |acc, (i, j)| acc + sq[(i, j)].sqrt());
    Ok(total / T::from_usize_lossy(n * k))
}

/// `L = Q^{-1/2} M Q^{-1/2}` with `Q` the diagonal degree matrix; isolated
/// nodes get degree [`DEGREE_EPS`].
pub fn normalize_operator<T: Scalar>(graph: &AffinityGraph<T>) -> DMatrix<T> {
    let eps = T::of(DEGREE_EPS);
    let inv_sqrt: Vec<T> = graph
        .m
        .row_iter()
        .map(|r| {
            let q = r.sum();
            T::one() / (if q > T::zero() { q } else { eps }).sqrt()
        })
        .collect();
    let n = graph.m.nrows();
    DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * graph.m[(i, j)] * inv_sqrt[j])
}

/// `S = (I - αL)⁻¹ S0` by Cholesky; `I - αL` is positive definite for
/// `α ∈ [0, 1)`.
pub fn propagate<T: Scalar>(s0: &DMatrix<T>, l: &DMatrix<T>, alpha: T) -> Result<DMatrix<T>> {
    if !(alpha >= T::zero() && alpha < T::one()) {
        return Err(ZslError::contract(format!("α must lie in [0, 1), got {alpha}")));
    }
    check_dim("propagation operator", l.nrows(), l.ncols())?;
    check_dim("propagation scores", l.nrows(), s0.nrows())?;
    let a = DMatrix::identity(l.nrows(), l.nrows()) - l * alpha;
    spd_solve(a, s0)
}

/// Row-wise argmax of a score matrix whose columns follow `classes`.
pub fn row_argmax<T: Scalar>(s: &DMatrix<T>, classes: &[usize]) -> Result<Vec<usize>> {
    check_dim("score columns", classes.len(), s.ncols())?;
    s.row_iter()
        .map(|r| argmax_class(&r.iter().copied().collect::<Vec<_>>(), classes))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationConfig<T: Scalar> {
    pub k: usize,
    pub sigma: T,
    pub alpha: T,
}

/// Propagated scores for a pool of unseen-class images: initial scores from
/// the bilinear model over `unseen`, graph built on the projections `Wᵀθ(x)`
/// in the class-embedding space.
pub fn ale_tran<T: Scalar>(
    model: &BilinearModel<T>,
    pool: &FeatureMatrix<T>,
    unseen: &[usize],
    embeddings: &ClassEmbedding<T>,
    cfg: PropagationConfig<T>,
) -> Result<DMatrix<T>> {
    let s0 = model.score_matrix(pool, unseen, embeddings)?;
    check_dim("ale-tran projection", model.w.nrows(), pool.dim())?;
    let projected = (model.w.tr_mul(pool.columns())).transpose();
    let graph = knn_affinity(&projected, cfg.k, cfg.sigma)?;
    propagate(&s0, &normalize_operator(&graph), cfg.alpha)
}

/// Propagates externally supplied initial scores over a graph built on the
/// raw features of the pool.
pub fn dsrl_propagate<T: Scalar>(
    s0: &DMatrix<T>,
    pool: &FeatureMatrix<T>,
    cfg: PropagationConfig<T>,
) -> Result<DMatrix<T>> {
    check_dim("dsrl scores", pool.n_images(), s0.nrows())?;
    let graph = knn_affinity(&pool.to_rows(), cfg.k, cfg.sigma)?;
    propagate(s0, &normalize_operator(&graph), cfg.alpha)
}
