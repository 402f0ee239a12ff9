//! GFZSL: diagonal Gaussian per class, class parameters regressed from the
//! class embedding, and EM refinement on unlabeled unseen-class images.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{check_dim, Result, ZslError};
use crate::linalg::ridge_with_intercept;
use crate::model::{ClassEmbedding, FeatureMatrix, LabeledSet, Scorer};
use crate::persist::{CompatModel, Persist};
use crate::scalar::Scalar;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Responsibility mass under which an EM component is left unchanged.
const EMPTY_COMPONENT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian<T: Scalar> {
    pub mean: DVector<T>,
    /// Diagonal covariance, floored at [`VARIANCE_FLOOR`].
    pub var: DVector<T>,
}

impl<T: Scalar> ClassGaussian<T> {
    pub fn log_density(&self, x: DVectorView<'_, T>) -> T {
        let two_pi = T::two_pi();
        let half = T::of(0.5);
        let mut acc = T::zero();
        for i in 0..x.len() {
            let diff = x[i] - self.mean[i];
            acc += (two_pi * self.var[i]).ln() + diff * diff / self.var[i];
        }
        -half * acc
    }

    fn floored(mut self) -> Self {
        let floor = T::of(VARIANCE_FLOOR);
        self.var.apply(|v| *v = v.max(floor));
        self
    }
}

/// Weighted mean and biased variance of the columns of `x`.
fn weighted_gaussian<T: Scalar>(x: &DMatrix<T>, weights: &[T]) -> ClassGaussian<T> {
    let total = weights.iter().fold(T::zero(), |a, &b| a + b);
    let mut mean = DVector::zeros(x.nrows());
    for (j, &w) in weights.iter().enumerate() {
        mean.axpy(w / total, &x.column(j), T::one());
    }
    let mut var = DVector::zeros(x.nrows());
    for (j, &w) in weights.iter().enumerate() {
        let diff = x.column(j) - &mean;
        var.axpy(w / total, &diff.component_mul(&diff), T::one());
    }
    ClassGaussian { mean, var }.floored()
}

/// Mean and biased (1/N) variance per dimension, floored.
pub fn class_mle<T: Scalar>(points: &FeatureMatrix<T>) -> ClassGaussian<T> {
    weighted_gaussian(points.columns(), &vec![T::one(); points.n_images()])
}

/// Ridge maps from the class embedding to the mean and to the log variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRegressors<T: Scalar> {
    /// `a x d`
    pub mean_w: DMatrix<T>,
    pub mean_b: DVector<T>,
    /// `a x d`
    pub logvar_w: DMatrix<T>,
    pub logvar_b: DVector<T>,
}

impl<T: Scalar> ParamRegressors<T> {
    pub fn predict(&self, phi: DVectorView<'_, T>) -> ClassGaussian<T> {
        let mean = self.mean_w.tr_mul(&phi) + &self.mean_b;
        let var = (self.logvar_w.tr_mul(&phi) + &self.logvar_b).map(|v| v.exp());
        ClassGaussian { mean, var }.floored()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GfzslModel<T: Scalar> {
    /// Per-class Gaussians: MLE for seen classes, regressed or EM-refined for others.
    pub gaussians: BTreeMap<usize, ClassGaussian<T>>,
    pub regressors: ParamRegressors<T>,
    /// Seen classes with a single image (variance from the floor only).
    pub singleton_classes: Vec<usize>,
}

impl<T: Scalar> GfzslModel<T> {
    /// The stored Gaussian for `class`, or one predicted from its embedding.
    pub fn gaussian(&self, class: usize, embeddings: &ClassEmbedding<T>) -> ClassGaussian<T> {
        match self.gaussians.get(&class) {
            Some(g) => g.clone(),
            None => self.regressors.predict(embeddings.class(class)),
        }
    }
}

/// Seen-class MLE Gaussians, ridge regressors fit on them, and predicted
/// Gaussians for every class of `embeddings` that has no training images.
pub fn gfzsl_fit<T: Scalar>(
    train: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    ridge: f64,
) -> Result<GfzslModel<T>> {
    if !(ridge >= 0.0) {
        return Err(ZslError::Configuration("GFZSL ridge must be non-negative".into()));
    }
    let seen = train.classes();
    let mut gaussians = BTreeMap::new();
    let mut singleton_classes = Vec::new();
    for &c in &seen {
        let idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        if idx.len() == 1 {
            singleton_classes.push(c);
        }
        gaussians.insert(c, class_mle(&train.features.select(&idx)?));
    }
    let phi = embeddings.select(&seen).transpose();
    let d = train.features.dim();
    let means = DMatrix::from_fn(seen.len(), d, |r, j| gaussians[&seen[r]].mean[j]);
    let logvars = DMatrix::from_fn(seen.len(), d, |r, j| gaussians[&seen[r]].var[j].ln());
    let (mean_w, mean_b) = ridge_with_intercept(&phi, &means, T::of(ridge))?;
    let (logvar_w, logvar_b) = ridge_with_intercept(&phi, &logvars, T::of(ridge))?;
    let regressors = ParamRegressors { mean_w, mean_b, logvar_w, logvar_b };
    for c in 0..embeddings.n_classes() {
        gaussians
            .entry(c)
            .or_insert_with(|| regressors.predict(embeddings.class(c)));
    }
    Ok(GfzslModel { gaussians, regressors, singleton_classes })
}

impl<T: Scalar> Scorer<T> for GfzslModel<T> {
    /// Diagonal-Gaussian log density.
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_dim("gfzsl (image)", self.regressors.mean_b.len(), x.len())?;
        Ok(candidates
            .iter()
            .map(|&c| self.gaussian(c, embeddings).log_density(x))
            .collect())
    }
}

impl<T: Scalar> Persist<T> for GfzslModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        out.push_matrix("mean_w", &self.regressors.mean_w);
        out.push_vector("mean_b", &self.regressors.mean_b);
        out.push_matrix("logvar_w", &self.regressors.logvar_w);
        out.push_vector("logvar_b", &self.regressors.logvar_b);
        let ids = DVector::from_iterator(self.gaussians.len(), self.gaussians.keys().map(|&c| c as f64));
        out.push_vector("classes", &ids);
        let d = self.regressors.mean_b.len();
        let mut means = DMatrix::<T>::zeros(self.gaussians.len(), d);
        let mut vars = DMatrix::<T>::zeros(self.gaussians.len(), d);
        for (r, g) in self.gaussians.values().enumerate() {
            means.set_row(r, &g.mean.transpose());
            vars.set_row(r, &g.var.transpose());
        }
        out.push_matrix("means", &means);
        out.push_matrix("vars", &vars);
        let single = DVector::from_iterator(self.singleton_classes.len(), self.singleton_classes.iter().map(|&c| c as f64));
        out.push_vector("singletons", &single);
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        let ids: DVector<f64> = model.vector("classes")?;
        let means: DMatrix<T> = model.matrix("means")?;
        let vars: DMatrix<T> = model.matrix("vars")?;
        let single: DVector<f64> = model.vector("singletons")?;
        Ok(Self {
            gaussians: ids
                .iter()
                .enumerate()
                .map(|(r, &c)| {
                    (c as usize, ClassGaussian { mean: means.row(r).transpose(), var: vars.row(r).transpose() })
                })
                .collect(),
            regressors: ParamRegressors {
                mean_w: model.matrix("mean_w")?,
                mean_b: model.vector("mean_b")?,
                logvar_w: model.matrix("logvar_w")?,
                logvar_b: model.vector("logvar_b")?,
            },
            singleton_classes: single.iter().map(|&c| c as usize).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EmResult<T: Scalar> {
    pub gaussians: Vec<ClassGaussian<T>>,
    /// `n x K`, rows sum to one.
    pub responsibilities: DMatrix<T>,
    /// Log-likelihood of the initial parameters followed by one entry per iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    /// Components whose responsibility mass vanished at some iteration and
    /// were held at their previous parameters.
    pub frozen: Vec<usize>,
}

/// Responsibilities under uniform mixing weights and the mixture log-likelihood.
fn e_step<T: Scalar>(x: &FeatureMatrix<T>, gaussians: &[ClassGaussian<T>]) -> (DMatrix<T>, f64) {
    let n = x.n_images();
    let k = gaussians.len();
    let log_k = (k as f64).ln();
    let mut resp = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    for i in 0..n {
        let logs: Vec<T> = gaussians.iter().map(|g| g.log_density(x.image(i))).collect();
        let m = logs.iter().copied().fold(T::min_value().unwrap_or_else(|| -T::one()), |a, b| a.max(b));
        let z = logs.iter().fold(T::zero(), |a, &l| a + (l - m).exp());
        for (j, &l) in logs.iter().enumerate() {
            resp[(i, j)] = (l - m).exp() / z;
        }
        ll += (m + z.ln()).as_f64() - log_k;
    }
    (resp, ll)
}

/// EM for a diagonal Gaussian mixture with fixed uniform mixing weights,
/// started from `init`. Stops when the log-likelihood gain drops below `tol`
/// or after `max_iters` iterations.
pub fn gfzsl_transductive<T: Scalar>(
    pool: &FeatureMatrix<T>,
    init: Vec<ClassGaussian<T>>,
    max_iters: usize,
    tol: f64,
) -> Result<EmResult<T>> {
    if init.is_empty() {
        return Err(ZslError::contract("EM needs at least one component"));
    }
    for g in &init {
        check_dim("EM component", pool.dim(), g.mean.len())?;
    }
    let mut gaussians = init;
    let (mut resp, mut ll) = e_step(pool, &gaussians);
    let mut log_likelihoods = vec![ll];
    let mut frozen = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        for (j, g) in gaussians.iter_mut().enumerate() {
            let w: Vec<T> = resp.column(j).iter().copied().collect();
            let mass = w.iter().fold(T::zero(), |a, &b| a + b);
            if mass.as_f64() < EMPTY_COMPONENT {
                if !frozen.contains(&j) {
                    frozen.push(j);
                }
                continue;
            }
            *g = weighted_gaussian(pool.columns(), &w);
        }
        let (new_resp, new_ll) = e_step(pool, &gaussians);
        iterations += 1;
        log_likelihoods.push(new_ll);
        resp = new_resp;
        let gain = new_ll - ll;
        ll = new_ll;
        if gain < tol {
            break;
        }
    }
    Ok(EmResult { gaussians, responsibilities: resp, log_likelihoods, iterations, frozen })
}

/// Refines the Gaussians of `unseen` classes on the unlabeled pool and
/// returns the updated model.
pub fn gfzsl_refine<T: Scalar>(
    model: &GfzslModel<T>,
    pool: &FeatureMatrix<T>,
    unseen: &[usize],
    embeddings: &ClassEmbedding<T>,
    max_iters: usize,
    tol: f64,
) -> Result<(GfzslModel<T>, EmResult<T>)> {
    let init = unseen.iter().map(|&c| model.gaussian(c, embeddings)).collect();
    let em = gfzsl_transductive(pool, init, max_iters, tol)?;
    let mut refined = model.clone();
    for (&c, g) in unseen.iter().zip(&em.gaussians) {
        refined.gaussians.insert(c, g.clone());
    }
    Ok((refined, em))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_argmax, EmbeddingKind};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn mle_by_hand() {
        let g = class_mle(&FeatureMatrix::from_rows(dmatrix![0.0, 0.0; 2.0, 2.0]).unwrap());
        assert_eq!(g.mean, dvector![1.0, 1.0]);
        assert_eq!(g.var, dvector![1.0, 1.0]);
        let g = class_mle(&FeatureMatrix::from_rows(dmatrix![3.0, 3.0]).unwrap());
        assert_eq!(g.var, dvector![VARIANCE_FLOOR, VARIANCE_FLOOR]);
    }

    fn three_class() -> (LabeledSet<f64>, ClassEmbedding<f64>) {
        let f = FeatureMatrix::from_rows(dmatrix![
            0.0, 0.0; 2.0, 2.0; 4.0, 0.0; 6.0, 2.0; 0.0, 4.0; 2.0, 8.0
        ])
        .unwrap();
        let data = LabeledSet::new(f, vec![0, 0, 1, 1, 2, 2], 4).unwrap();
        let e = ClassEmbedding::from_rows(
            dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0; 0.5, 0.5],
            EmbeddingKind::Distributed,
        )
        .unwrap();
        (data, e)
    }

    #[test]
    fn ridge_limit_gives_mean_of_means() {
        let (data, e) = three_class();
        let m = gfzsl_fit(&data, &e, 1e14).unwrap();
        let seen_mean = (m.gaussians[&0].mean.clone() + &m.gaussians[&1].mean + &m.gaussians[&2].mean) / 3.0;
        assert!((&m.gaussians[&3].mean - seen_mean).amax() < 1e-9);
    }

    #[test]
    fn interpolation_regime_reproduces_seen_parameters() {
        // three seen classes, two embedding dims + intercept: exact fit
        let (data, _) = three_class();
        let twin = ClassEmbedding::from_rows(
            dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0; 0.0, 1.0],
            EmbeddingKind::Distributed,
        )
        .unwrap();
        let m = gfzsl_fit(&data, &twin, 1e-10).unwrap();
        assert!((&m.gaussians[&3].mean - &m.gaussians[&1].mean).amax() < 1e-6);
        assert!((&m.gaussians[&3].var - &m.gaussians[&1].var).amax() < 1e-6);
    }

    #[test]
    fn predict_examples() {
        let (data, e) = three_class();
        let m = gfzsl_fit(&data, &e, 1.0).unwrap();
        let x = m.gaussians[&1].mean.clone();
        assert_eq!(predict_argmax(x.as_view(), &m, &[0, 1, 2], &e).unwrap(), 1);

        // unequal variances: at the midpoint the wider class wins, nearer the
        // narrow class's mean it wins
        let narrow = ClassGaussian { mean: dvector![0.0], var: dvector![0.1] };
        let wide = ClassGaussian { mean: dvector![2.0], var: dvector![1.0] };
        let mid = dvector![1.0];
        assert!(wide.log_density(mid.as_view()) > narrow.log_density(mid.as_view()));
        let near = dvector![0.3];
        assert!(narrow.log_density(near.as_view()) > wide.log_density(near.as_view()));
    }

    #[test]
    fn em_degenerate_mixture() {
        let init = vec![
            ClassGaussian { mean: dvector![0.0, 0.0], var: dvector![1e-4, 1e-4] },
            ClassGaussian { mean: dvector![5.0, 5.0], var: dvector![1e-4, 1e-4] },
        ];
        let pool = FeatureMatrix::from_rows(dmatrix![0.0, 0.0; 5.0, 5.0; 0.0, 0.0; 5.0, 5.0]).unwrap();
        let em = gfzsl_transductive(&pool, init, 50, 1e-9).unwrap();
        assert!(em.iterations <= 2);
        for i in 0..4 {
            let row = em.responsibilities.row(i);
            assert!(row.iter().any(|&r| r == 1.0));
        }
    }

    #[test]
    fn em_single_component_is_mle() {
        let pool = FeatureMatrix::from_rows(dmatrix![0.0, 1.0; 2.0, 3.0; 4.0, -1.0]).unwrap();
        let init = vec![ClassGaussian { mean: dvector![10.0, 10.0], var: dvector![1.0, 1.0] }];
        let em = gfzsl_transductive(&pool, init, 5, 0.0).unwrap();
        let mle = class_mle(&pool);
        assert!((&em.gaussians[0].mean - &mle.mean).amax() < 1e-12);
        assert!((&em.gaussians[0].var - &mle.var).amax() < 1e-12);
    }

    #[test]
    fn em_is_monotone_and_recovers_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let centers = [dvector![0.0, 0.0, 0.0], dvector![3.0, 3.0, 0.0]];
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            for v in centers[c].iter() {
                rows.push(v + noise.sample(&mut rng));
            }
            truth.push(c);
        }
        let pool = FeatureMatrix::from_rows(DMatrix::from_row_slice(200, 3, &rows)).unwrap();
        let init = vec![
            ClassGaussian { mean: dvector![0.5, -0.5, 0.2], var: dvector![1.0, 1.0, 1.0] },
            ClassGaussian { mean: dvector![2.5, 3.5, -0.2], var: dvector![1.0, 1.0, 1.0] },
        ];
        let em = gfzsl_transductive(&pool, init, 50, f64::NEG_INFINITY).unwrap();
        assert_eq!(em.iterations, 50);
        for w in em.log_likelihoods.windows(2) {
            assert!(w[1] - w[0] >= -1e-9);
        }
        let correct = (0..200)
            .filter(|&i| {
                let r = em.responsibilities.row(i);
                usize::from(r[1] > r[0]) == truth[i]
            })
            .count();
        assert!(correct as f64 / 200.0 >= 0.98);
        for g in &em.gaussians {
            assert!(g.var.iter().all(|&v| v >= VARIANCE_FLOOR));
        }
    }

    #[test]
    fn em_freezes_empty_component() {
        let pool = FeatureMatrix::from_rows(dmatrix![0.0; 0.1; -0.1]).unwrap();
        let far = ClassGaussian { mean: dvector![1e4], var: dvector![1e-3] };
        let init = vec![ClassGaussian { mean: dvector![0.0], var: dvector![1.0] }, far.clone()];
        let em = gfzsl_transductive(&pool, init, 3, 0.0).unwrap();
        assert_eq!(em.frozen, vec![1]);
        assert_eq!(em.gaussians[1], far);
    }

    #[test]
    fn persist_round_trip() {
        let (data, e) = three_class();
        let m = gfzsl_fit(&data, &e, 0.5).unwrap();
        let mut out = CompatModel::new("gfzsl", 0, Default::default());
        m.write_blocks(&mut out);
        let back: GfzslModel<f64> = Persist::<f64>::read_blocks(&CompatModel::from_bytes(&out.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
