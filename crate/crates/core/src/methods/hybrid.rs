//! Hybrid models that express images and classes through seen classes:
//! CONSE, a simplified SSE and SYNC.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{check_dim, Result, ZslError};
use crate::linalg::{min_norm_lstsq, nnls};
use crate::logistic::{logistic_fit, softmax_fit, SoftmaxClassifier};
use crate::model::{cosine, rank_candidates, ClassEmbedding, LabeledSet, Scorer};
use crate::persist::{CompatModel, Persist};
use crate::scalar::Scalar;
use crate::sgd::TrainConfig;

/// Posterior-weighted mean of the embeddings of the `t` most probable seen
/// classes.
pub fn conse_embed<T: Scalar>(
    posterior: &DVector<T>,
    seen: &[usize],
    embeddings: &ClassEmbedding<T>,
    t: usize,
) -> Result<DVector<T>> {
    check_dim("conse posterior", seen.len(), posterior.len())?;
    if t == 0 || t > seen.len() {
        return Err(ZslError::Configuration(format!("CONSE T = {t} outside 1..={}", seen.len())));
    }
    let top = rank_candidates(posterior.as_slice(), seen);
    let mut v = DVector::zeros(embeddings.dim());
    let mut z = T::zero();
    for &c in &top[..t] {
        let p = posterior[seen.iter().position(|&s| s == c).expect("ranked from seen")];
        v.axpy(p, &embeddings.class(c), T::one());
        z += p;
    }
    if z <= T::zero() {
        return Err(ZslError::DegenerateInput("all top-T seen posteriors are zero".into()));
    }
    Ok(v / z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConseModel<T: Scalar> {
    pub classifier: SoftmaxClassifier<T>,
    pub t: usize,
}

impl<T: Scalar> Scorer<T> for ConseModel<T> {
    /// Cosine between the combined embedding and each candidate's.
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        let v = conse_embed(&self.classifier.posterior(x), &self.classifier.classes, embeddings, self.t)?;
        candidates
            .iter()
            .map(|&c| cosine(v.as_view(), embeddings.class(c)))
            .collect()
    }
}

impl<T: Scalar> Persist<T> for ConseModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        self.classifier.write_blocks(out, "seen");
        out.push_scalar("t", self.t as f64);
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        Ok(Self {
            classifier: SoftmaxClassifier::read_blocks(model, "seen")?,
            t: model.scalar("t")? as usize,
        })
    }
}

pub fn conse_fit<T: Scalar>(train: &LabeledSet<T>, t: usize, l2: f64, config: &TrainConfig) -> Result<ConseModel<T>> {
    let classifier = softmax_fit(train, T::of(l2), config)?;
    if t == 0 || t > classifier.classes.len() {
        return Err(ZslError::Configuration(format!(
            "CONSE T = {t} outside 1..={}",
            classifier.classes.len()
        )));
    }
    Ok(ConseModel { classifier, t })
}

/// Mixture of seen classes that reconstructs `φ(y)`: non-negative least
/// squares, rescaled to sum to one. Returns the coefficients and the
/// reconstruction residual of the raw solution. If no seen class has a
/// positive coefficient the mixture is uniform.
pub fn sse_embed_class<T: Scalar>(y: DVectorView<'_, T>, seen: &DMatrix<T>) -> Result<(DVector<T>, T)> {
    check_dim("sse class embedding", seen.nrows(), y.len())?;
    if y.iter().all(|v| *v == T::zero()) {
        return Err(ZslError::DegenerateInput("all-zero class embedding".into()));
    }
    let (coef, residual) = nnls(seen, &y.into_owned())?;
    let total = coef.sum();
    let mix = if total > T::zero() {
        coef / total
    } else {
        DVector::from_element(seen.ncols(), T::one() / T::from_usize_lossy(seen.ncols()))
    };
    Ok((mix, residual))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SseModel<T: Scalar> {
    /// Image side: seen-class posterior.
    pub classifier: SoftmaxClassifier<T>,
    /// Class side: `|seen| x C`, one mixture per class.
    pub mixtures: DMatrix<T>,
    /// Reconstruction residual per class.
    pub residuals: Vec<T>,
}

pub fn sse_fit<T: Scalar>(
    train: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    l2: f64,
    config: &TrainConfig,
) -> Result<SseModel<T>> {
    let classifier = softmax_fit(train, T::of(l2), config)?;
    let seen = embeddings.select(&classifier.classes);
    let mut mixtures = DMatrix::zeros(seen.ncols(), embeddings.n_classes());
    let mut residuals = Vec::with_capacity(embeddings.n_classes());
    for c in 0..embeddings.n_classes() {
        let (mix, r) = sse_embed_class(embeddings.class(c), &seen)?;
        mixtures.set_column(c, &mix);
        residuals.push(r);
    }
    Ok(SseModel { classifier, mixtures, residuals })
}

impl<T: Scalar> Scorer<T> for SseModel<T> {
    /// Inner product of the image's and the class's seen-class mixtures.
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        _embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        if let Some(c) = candidates.iter().find(|&&c| c >= self.mixtures.ncols()) {
            return Err(ZslError::contract(format!("class {c} has no mixture")));
        }
        let pi = self.classifier.posterior(x);
        Ok(candidates.iter().map(|&c| pi.dot(&self.mixtures.column(c))).collect())
    }
}

impl<T: Scalar> Persist<T> for SseModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        self.classifier.write_blocks(out, "seen");
        out.push_matrix("mixtures", &self.mixtures);
        out.push_vector("residuals", &DVector::from_vec(self.residuals.clone()));
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        let residuals: DVector<T> = model.vector("residuals")?;
        Ok(Self {
            classifier: SoftmaxClassifier::read_blocks(model, "seen")?,
            mixtures: model.matrix("mixtures")?,
            residuals: residuals.iter().copied().collect(),
        })
    }
}

/// Row-stochastic weights `s_r ∝ exp(-||φ - b_r||² / (2σ²))`.
pub fn sync_weights<T: Scalar>(phi: DVectorView<'_, T>, phantoms: &DMatrix<T>, sigma: T) -> DVector<T> {
    let two_s2 = T::of(2.0) * sigma * sigma;
    let logits = DVector::from_iterator(
        phantoms.nrows(),
        phantoms.row_iter().map(|b| -(phi - b.transpose()).norm_squared() / two_s2),
    );
    crate::logistic::softmax(&logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncModel<T: Scalar> {
    /// `R x a`
    pub phantoms: DMatrix<T>,
    /// `R x (d + 1)`; the last column is the bias.
    pub v: DMatrix<T>,
    pub sigma: T,
}

#[derive(Clone, Debug)]
pub struct SyncFit<T: Scalar> {
    pub model: SyncModel<T>,
    /// `C_train x (d + 1)` one-vs-rest classifiers, bias last.
    pub classifiers: DMatrix<T>,
    /// `C_train x R`
    pub s: DMatrix<T>,
    pub rank: usize,
}

impl<T: Scalar> SyncFit<T> {
    /// `s` does not have full column rank; `v` is the minimum-norm solution.
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.s.ncols()
    }
}

/// Sum over seen classes of `||w_c - Σ_r s_cr v_r||²`.
pub fn sync_distortion<T: Scalar>(classifiers: &DMatrix<T>, s: &DMatrix<T>, v: &DMatrix<T>) -> T {
    (classifiers - s * v).norm_squared()
}

/// One-vs-rest logistic classifiers for the seen classes, then the
/// minimum-norm least-squares phantom classifiers. `phantoms` defaults to
/// the seen-class embeddings.
pub fn sync_fit<T: Scalar>(
    train: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    phantoms: Option<DMatrix<T>>,
    sigma: f64,
    l2: f64,
    config: &TrainConfig,
) -> Result<SyncFit<T>> {
    if !(sigma > 0.0) {
        return Err(ZslError::Configuration("SYNC σ must be positive".into()));
    }
    let seen = train.classes();
    let phantoms = phantoms.unwrap_or_else(|| embeddings.select(&seen).transpose());
    if phantoms.nrows() == 0 {
        return Err(ZslError::Configuration("SYNC needs at least one phantom class".into()));
    }
    check_dim("sync phantom dimension", embeddings.dim(), phantoms.ncols())?;
    let d = train.features.dim();
    let mut classifiers = DMatrix::zeros(seen.len(), d + 1);
    for (i, &c) in seen.iter().enumerate() {
        let targets: Vec<bool> = train.labels.iter().map(|&l| l == c).collect();
        let m = logistic_fit(&train.features, &targets, T::of(l2), config)?;
        classifiers.view_mut((i, 0), (1, d)).copy_from(&m.weights.transpose());
        classifiers[(i, d)] = m.bias;
    }
    let sigma = T::of(sigma);
    let mut s = DMatrix::zeros(seen.len(), phantoms.nrows());
    for (i, &c) in seen.iter().enumerate() {
        s.set_row(i, &sync_weights(embeddings.class(c), &phantoms, sigma).transpose());
    }
    let (v, rank) = min_norm_lstsq(&s, &classifiers)?;
    Ok(SyncFit {
        model: SyncModel { phantoms, v, sigma },
        classifiers,
        s,
        rank,
    })
}

impl<T: Scalar> Scorer<T> for SyncModel<T> {
    /// `w_uᵀ[θ(x); 1]` with `w_u = Σ_r s_ur v_r`.
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        let d = self.v.ncols() - 1;
        check_dim("sync (image)", d, x.len())?;
        check_dim("sync (class)", self.phantoms.ncols(), embeddings.dim())?;
        // per phantom: v_rᵀ[x; 1]
        let per_phantom = self.v.columns(0, d) * x + self.v.column(d);
        Ok(candidates
            .iter()
            .map(|&c| sync_weights(embeddings.class(c), &self.phantoms, self.sigma).dot(&per_phantom))
            .collect())
    }
}

impl<T: Scalar> Persist<T> for SyncModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        out.push_matrix("phantoms", &self.phantoms);
        out.push_matrix("v", &self.v);
        out.push_scalar("sigma", self.sigma.as_f64());
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        Ok(Self {
            phantoms: model.matrix("phantoms")?,
            v: model.matrix("v")?,
            sigma: T::of(model.scalar("sigma")?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_argmax, EmbeddingKind, FeatureMatrix};
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn emb(rows: DMatrix<f64>) -> ClassEmbedding<f64> {
        ClassEmbedding::from_rows(rows, EmbeddingKind::Distributed).unwrap()
    }

    #[test]
    fn conse_embed_examples() {
        let e = emb(dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0]);
        let p = dvector![0.6, 0.4];
        assert_eq!(conse_embed(&p, &[0, 1], &e, 1).unwrap(), dvector![1.0, 0.0]);
        let v = conse_embed(&p, &[0, 1], &e, 2).unwrap();
        assert!((v - dvector![0.6, 0.4]).amax() < 1e-15);
        let uniform = dvector![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let v = conse_embed(&uniform, &[0, 1, 2], &e, 3).unwrap();
        assert!((v - dvector![2.0 / 3.0, 2.0 / 3.0]).amax() < 1e-15);
        assert!(matches!(
            conse_embed(&dvector![0.0, 0.0], &[0, 1], &e, 1),
            Err(ZslError::DegenerateInput(_))
        ));
    }

    #[test]
    fn cosine_ranking_ignores_scale() {
        let deg = |a: f64| {
            let r = a.to_radians();
            [r.cos(), r.sin()]
        };
        let (a, b) = (deg(10.0), deg(60.0));
        let e = emb(dmatrix![a[0], a[1]; 3.0 * b[0], 3.0 * b[1]]);
        let v = dvector![1.0, 0.0];
        let s: Vec<f64> = (0..2).map(|c| cosine(v.as_view(), e.class(c)).unwrap()).collect();
        assert!(s[0] > s[1]);
    }

    #[test]
    fn sse_class_mixtures() {
        let seen: DMatrix<f64> = dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0];
        let (m, r) = sse_embed_class(dvector![0.0, 1.0, 0.0].as_view(), &seen).unwrap();
        assert_eq!(m, dvector![0.0, 1.0, 0.0]);
        assert!(r < 1e-12);
        let (m, _) = sse_embed_class(dvector![0.5, 0.5, 0.0].as_view(), &seen).unwrap();
        assert!((m - dvector![0.5, 0.5, 0.0]).amax() < 1e-12);
        let (m, _) = sse_embed_class(dvector![-1.0, -1.0, -1.0].as_view(), &seen).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-12 && m.iter().all(|&v| v >= 0.0));
        assert!(sse_embed_class(dvector![0.0, 0.0, 0.0].as_view(), &seen).is_err());
    }

    #[test]
    fn sync_weights_limits() {
        let phantoms = dmatrix![0.0, 0.0; 1.0, 0.0; 0.0, 2.0];
        let w = sync_weights(dvector![1.0, 0.0].as_view(), &phantoms, 1e-3);
        assert!((w - dvector![0.0, 1.0, 0.0]).amax() < 1e-12);
        let w = sync_weights(dvector![1.0, 0.0].as_view(), &phantoms, 1e6);
        assert!((w - DVector::from_element(3, 1.0 / 3.0)).amax() < 1e-9);
    }

    fn clusters() -> (LabeledSet<f64>, ClassEmbedding<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = dmatrix![1.0, 0.0; 0.0, 1.0; -1.0, 0.0; 0.0, -1.0];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            for _ in 0..15 {
                let n0: f64 = StandardNormal.sample(&mut rng);
                let n1: f64 = StandardNormal.sample(&mut rng);
                rows.extend_from_slice(&[2.0 * e[(c, 0)] + 0.2 * n0, 2.0 * e[(c, 1)] + 0.2 * n1]);
                labels.push(c);
            }
        }
        let f = FeatureMatrix::from_rows(DMatrix::from_row_slice(60, 2, &rows)).unwrap();
        (LabeledSet::new(f, labels, 4).unwrap(), emb(e))
    }

    #[test]
    fn sync_identity_coupling() {
        let (data, e) = clusters();
        let fit = sync_fit(&data, &e, None, 1e-3, 1e-2, &TrainConfig::default()).unwrap();
        assert!((&fit.s - DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
        assert!((&fit.model.v - &fit.classifiers).amax() < 1e-9);
        assert!(!fit.rank_deficient());
        // a class sharing a seen class's embedding inherits its classifier
        let x = data.features.image(20);
        let s = fit.model.scores(x, &[0, 1, 2, 3], &e).unwrap();
        let direct: Vec<f64> = (0..4)
            .map(|c| fit.classifiers.row(c).columns(0, 2).dot(&x.transpose()) + fit.classifiers[(c, 2)])
            .collect();
        for (a, b) in s.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sync_solution_is_optimal() {
        let (data, e) = clusters();
        let train = data.restrict_to(&[0, 1, 2].into()).unwrap();
        let phantoms = dmatrix![0.5, 0.5; -0.5, 0.5];
        let fit = sync_fit(&train, &e, Some(phantoms), 0.8, 1e-2, &TrainConfig::default()).unwrap();
        let base = sync_distortion(&fit.classifiers, &fit.s, &fit.model.v);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = DMatrix::from_fn(2, 3, |_, _| 1e-2 * rng.sample::<f64, _>(StandardNormal));
            assert!(sync_distortion(&fit.classifiers, &fit.s, &(&fit.model.v + p)) >= base);
        }
        let resid = &fit.classifiers - &fit.s * &fit.model.v;
        assert!((fit.s.transpose() * resid).amax() < 1e-9);
    }

    #[test]
    fn sync_uniform_limit_and_zero_v() {
        let (data, e) = clusters();
        let fit = sync_fit(&data, &e, None, 1e9, 1e-2, &TrainConfig::default()).unwrap();
        let recon = &fit.s * &fit.model.v;
        for r in 1..4 {
            assert!((recon.row(r) - recon.row(0)).amax() < 1e-6);
        }
        let zero = SyncModel { v: DMatrix::zeros(4, 3), ..fit.model };
        assert_eq!(predict_argmax(data.features.image(50), &zero, &[2, 1, 3], &e).unwrap(), 1);
    }

    #[test]
    fn hybrid_models_classify_clusters() {
        let (data, e) = clusters();
        let train = data.restrict_to(&[0, 1, 2].into()).unwrap();
        let cfg = TrainConfig::default();
        let conse = conse_fit(&train, 2, 1e-2, &cfg).unwrap();
        let sse = sse_fit(&train, &e, 1e-2, &cfg).unwrap();
        for c in 0..sse.mixtures.ncols() {
            assert!((sse.mixtures.column(c).sum() - 1.0).abs() < 1e-9);
        }
        let x = dvector![2.0, 0.0];
        assert_eq!(predict_argmax(x.as_view(), &conse, &[0, 1, 2, 3], &e).unwrap(), 0);
        assert_eq!(predict_argmax(x.as_view(), &sse, &[0, 1, 2, 3], &e).unwrap(), 0);

        let mut out = CompatModel::new("sse", 0, Default::default());
        sse.write_blocks(&mut out);
        let back: SseModel<f64> = Persist::<f64>::read_blocks(&out).unwrap();
        assert_eq!(back, sse);
    }
}
