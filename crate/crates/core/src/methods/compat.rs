//! Linear compatibility learners: DEVISE, ALE and SJE trained by SGD on
//! ranking losses, and the closed-form ESZSL and SAE.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Result, ZslError};
use crate::linalg::spd_solve;
use crate::model::{cosine, BilinearModel, ClassEmbedding, LabeledSet, Scorer};
use crate::persist::{CompatModel, Persist};
use crate::scalar::Scalar;
use crate::sgd::{init_rng, sgd_train, uniform_init, SgdObjective, SgdOutcome, TrainConfig, ValMetric};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankingVariant {
    Devise,
    Ale,
    Sje,
}

/// Rank weights `α_i` for the weighted approximate ranking loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankWeights {
    /// `α_i = 1/i`
    Harmonic,
    Constant(f64),
}

impl RankWeights {
    /// `l_k = Σ_{i<=k} α_i`.
    pub fn partial_sum(self, k: usize) -> f64 {
        match self {
            RankWeights::Harmonic => (1..=k).map(|i| 1.0 / i as f64).sum(),
            RankWeights::Constant(c) => c * k as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingLossSpec {
    pub variant: RankingVariant,
    pub weights: RankWeights,
}

impl RankingLossSpec {
    pub fn devise() -> Self {
        Self { variant: RankingVariant::Devise, weights: RankWeights::Constant(1.0) }
    }

    pub fn ale() -> Self {
        Self { variant: RankingVariant::Ale, weights: RankWeights::Harmonic }
    }

    pub fn sje() -> Self {
        Self { variant: RankingVariant::Sje, weights: RankWeights::Constant(1.0) }
    }
}

/// Structured margin: 1 for every class other than the true one.
pub fn margin<T: Scalar>(y_true: usize, y: usize) -> T {
    if y_true == y {
        T::zero()
    } else {
        T::one()
    }
}

/// A per-sample ranking loss and its subgradient `θ gᵀ` with respect to `W`,
/// kept in rank-one form.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss<T: Scalar> {
    pub loss: T,
    /// Class-side factor `g` of the subgradient `θ gᵀ`.
    pub direction: DVector<T>,
}

impl<T: Scalar> StepLoss<T> {
    pub fn gradient(&self, x: DVectorView<'_, T>) -> DMatrix<T> {
        x * self.direction.transpose()
    }
}

pub(crate) struct Scored<T: Scalar> {
    /// `(class, Δ + F(x,y) - F(x,y_n))` for every class other than the true one.
    pub(crate) others: Vec<(usize, T)>,
}

pub(crate) fn score_classes<T: Scalar>(
    x: DVectorView<'_, T>,
    y_true: usize,
    w: &DMatrix<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<Scored<T>> {
    check_dim("ranking loss (image)", w.nrows(), x.len())?;
    check_dim("ranking loss (class)", w.ncols(), emb.dim())?;
    if !classes.contains(&y_true) {
        return Err(ZslError::contract(format!(
            "label {y_true} is not among the training classes"
        )));
    }
    let projected = w.tr_mul(&x);
    let true_score = projected.dot(&emb.class(y_true));
    let others = classes
        .iter()
        .filter(|&&y| y != y_true)
        .map(|&y| (y, margin::<T>(y_true, y) + projected.dot(&emb.class(y)) - true_score))
        .collect();
    Ok(Scored { others })
}

pub(crate) fn direction_for<T: Scalar>(
    weighted: &[(usize, T)],
    y_true: usize,
    emb: &ClassEmbedding<T>,
) -> DVector<T> {
    let mut g = DVector::zeros(emb.dim());
    let mut total = T::zero();
    for &(y, c) in weighted {
        g.axpy(c, &emb.class(y), T::one());
        total += c;
    }
    g.axpy(-total, &emb.class(y_true), T::one());
    g
}

/// DEVISE pairwise ranking loss `Σ_{y≠y_n} [Δ + F(x,y) - F(x,y_n)]₊`.
pub fn devise_step_loss<T: Scalar>(
    x: DVectorView<'_, T>,
    y_true: usize,
    w: &DMatrix<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<StepLoss<T>> {
    let scored = score_classes(x, y_true, w, classes, emb)?;
    let active: Vec<(usize, T)> = scored
        .others
        .iter()
        .filter(|(_, h)| *h > T::zero())
        .map(|&(y, _)| (y, T::one()))
        .collect();
    let loss = scored
        .others
        .iter()
        .map(|&(_, h)| h.max(T::zero()))
        .fold(T::zero(), |a, b| a + b);
    Ok(StepLoss { loss, direction: direction_for(&active, y_true, emb) })
}

/// Weighted approximate ranking loss: the DEVISE sum scaled by `l_r / r`,
/// where `r` counts classes `y ≠ y_n` with `F(x,y) + Δ >= F(x,y_n)`.
pub fn ale_step_loss<T: Scalar>(
    x: DVectorView<'_, T>,
    y_true: usize,
    w: &DMatrix<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
    weights: RankWeights,
) -> Result<StepLoss<T>> {
    let scored = score_classes(x, y_true, w, classes, emb)?;
    let rank = scored.others.iter().filter(|(_, h)| *h >= T::zero()).count();
    if rank == 0 {
        return Ok(StepLoss { loss: T::zero(), direction: DVector::zeros(emb.dim()) });
    }
    let weight = T::of(weights.partial_sum(rank) / rank as f64);
    let active: Vec<(usize, T)> = scored
        .others
        .iter()
        .filter(|(_, h)| *h > T::zero())
        .map(|&(y, _)| (y, weight))
        .collect();
    let hinge = scored
        .others
        .iter()
        .map(|&(_, h)| h.max(T::zero()))
        .fold(T::zero(), |a, b| a + b);
    Ok(StepLoss { loss: weight * hinge, direction: direction_for(&active, y_true, emb) })
}

/// Structured SVM loss `[max_y (Δ + F(x,y)) - F(x,y_n)]₊`; only the
/// maximizing class (lowest id on ties) receives gradient.
pub fn sje_step_loss<T: Scalar>(
    x: DVectorView<'_, T>,
    y_true: usize,
    w: &DMatrix<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<StepLoss<T>> {
    let scored = score_classes(x, y_true, w, classes, emb)?;
    // y_n itself enters the max with value 0
    let mut best: Option<(usize, T)> = None;
    for &(y, h) in &scored.others {
        best = match best {
            Some((by, bh)) if bh > h || (bh == h && by < y) => Some((by, bh)),
            _ => Some((y, h)),
        };
    }
    match best {
        Some((y, h)) if h > T::zero() => Ok(StepLoss {
            loss: h,
            direction: direction_for(&[(y, T::one())], y_true, emb),
        }),
        _ => Ok(StepLoss { loss: T::zero(), direction: DVector::zeros(emb.dim()) }),
    }
}

pub fn ranking_step_loss<T: Scalar>(
    spec: &RankingLossSpec,
    x: DVectorView<'_, T>,
    y_true: usize,
    w: &DMatrix<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<StepLoss<T>> {
    match spec.variant {
        RankingVariant::Devise => devise_step_loss(x, y_true, w, classes, emb),
        RankingVariant::Ale => ale_step_loss(x, y_true, w, classes, emb, spec.weights),
        RankingVariant::Sje => sje_step_loss(x, y_true, w, classes, emb),
    }
}

/// Per-sample SGD over a ranking loss. DEVISE updates toward one violating
/// class drawn uniformly; ALE and SJE apply their full subgradient.
pub struct RankingObjective<'a, T: Scalar> {
    pub data: &'a LabeledSet<T>,
    pub embeddings: &'a ClassEmbedding<T>,
    pub classes: Vec<usize>,
    pub spec: RankingLossSpec,
}

impl<T: Scalar> SgdObjective<T> for RankingObjective<'_, T> {
    type Params = DMatrix<T>;

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn step(&self, w: &mut DMatrix<T>, i: usize, lr: T, rng: &mut ChaCha8Rng) -> T {
        let x = self.data.features.image(i);
        let y = self.data.labels[i];
        let step = ranking_step_loss(&self.spec, x, y, w, &self.classes, self.embeddings)
            .expect("training labels validated against training classes");
        let direction = match self.spec.variant {
            RankingVariant::Devise => {
                let scored = score_classes(x, y, w, &self.classes, self.embeddings)
                    .expect("validated");
                let violators: Vec<usize> = scored
                    .others
                    .iter()
                    .filter(|(_, h)| *h > T::zero())
                    .map(|&(c, _)| c)
                    .collect();
                if violators.is_empty() {
                    return step.loss;
                }
                let pick = violators[rng.random_range(0..violators.len())];
                direction_for(&[(pick, T::one())], y, self.embeddings)
            }
            _ => step.direction,
        };
        w.ger(-lr, &x, &direction, T::one());
        step.loss
    }
}

pub(crate) fn check_training_labels<T: Scalar>(data: &LabeledSet<T>, classes: &[usize]) -> Result<()> {
    if let Some(&bad) = data.labels.iter().find(|l| !classes.contains(l)) {
        return Err(ZslError::contract(format!(
            "training label {bad} is not among the training classes"
        )));
    }
    Ok(())
}

/// Trains a bilinear `W` by SGD on the chosen ranking loss, initialized
/// uniformly in `[-1/sqrt(d), 1/sqrt(d)]` from `config.seed`.
pub fn ranking_train<T: Scalar>(
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    classes: &[usize],
    spec: RankingLossSpec,
    config: &TrainConfig,
    val_metric: Option<ValMetric<'_, DMatrix<T>>>,
) -> Result<SgdOutcome<DMatrix<T>>> {
    check_training_labels(data, classes)?;
    let d = data.features.dim();
    let init = uniform_init(d, embeddings.dim(), d, &mut init_rng(config.seed)) * T::of(config.init_scale);
    let objective = RankingObjective {
        data,
        embeddings,
        classes: classes.to_vec(),
        spec,
    };
    sgd_train(&objective, init, config, val_metric)
}

impl<T: Scalar> Persist<T> for BilinearModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        out.push_matrix("w", &self.w);
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        Ok(Self { w: model.matrix("w")? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EszslConfig {
    pub gamma: f64,
    pub lambda: f64,
}

fn eszsl_targets<T: Scalar>(data: &LabeledSet<T>, classes: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(data.len(), classes.len(), |n, c| {
        if data.labels[n] == classes[c] {
            T::one()
        } else {
            -T::one()
        }
    })
}

/// Closed form `W = (ΘΘᵀ + γI)⁻¹ Θ Y Φᵀ (ΦΦᵀ + λI)⁻¹` with `Y` the ±1
/// ground-truth matrix over `classes`.
pub fn eszsl_solve<T: Scalar>(
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    classes: &[usize],
    cfg: EszslConfig,
) -> Result<DMatrix<T>> {
    if !(cfg.gamma >= 0.0 && cfg.lambda >= 0.0) {
        return Err(ZslError::Configuration("ESZSL regularizers must be non-negative".into()));
    }
    check_training_labels(data, classes)?;
    let theta = data.features.columns();
    let phi = embeddings.select(classes);
    let y = eszsl_targets(data, classes);
    let mut left = theta * theta.transpose();
    for i in 0..left.nrows() {
        left[(i, i)] += T::of(cfg.gamma);
    }
    let mut right = &phi * phi.transpose();
    for i in 0..right.nrows() {
        right[(i, i)] += T::of(cfg.lambda);
    }
    let middle = theta * y * phi.transpose();
    let partial = spd_solve(left, &middle)
        .map_err(|_| ZslError::IllConditioned("ΘΘᵀ + γI is singular".into()))?;
    let wt = spd_solve(right, &partial.transpose())
        .map_err(|_| ZslError::IllConditioned("ΦΦᵀ + λI is singular".into()))?;
    Ok(wt.transpose())
}

/// Full ESZSL objective with `β = γλ`:
/// `||ΘᵀWΦ - Y||² + γ||WΦ||² + λ||ΘᵀW||² + γλ||W||²`.
pub fn eszsl_objective<T: Scalar>(
    w: &DMatrix<T>,
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    classes: &[usize],
    cfg: EszslConfig,
) -> T {
    let theta = data.features.columns();
    let phi = embeddings.select(classes);
    let y = eszsl_targets(data, classes);
    let (g, l) = (T::of(cfg.gamma), T::of(cfg.lambda));
    (theta.tr_mul(w) * &phi - y).norm_squared()
        + g * (w * &phi).norm_squared()
        + l * theta.tr_mul(w).norm_squared()
        + g * l * w.norm_squared()
}

/// Gradient of [`eszsl_objective`] with respect to `W`.
pub fn eszsl_gradient<T: Scalar>(
    w: &DMatrix<T>,
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    classes: &[usize],
    cfg: EszslConfig,
) -> DMatrix<T> {
    let theta = data.features.columns();
    let phi = embeddings.select(classes);
    let y = eszsl_targets(data, classes);
    let (g, l) = (T::of(cfg.gamma), T::of(cfg.lambda));
    let two = T::of(2.0);
    let resid = theta.tr_mul(w) * &phi - y;
    (theta * resid * phi.transpose()) * two
        + (w * &phi * phi.transpose()) * (two * g)
        + (theta * theta.tr_mul(w)) * (two * l)
        + w * (two * g * l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeConfig {
    pub lambda: f64,
}

/// Solves `A X + X B = C` for symmetric `A` (`m x m`) and `B` (`n x n`) by
/// diagonalizing both: with `A = U Da Uᵀ`, `B = V Db Vᵀ`, the transformed
/// unknown `UᵀXV` is `(UᵀCV)_ij / (a_i + b_j)`. Entries whose denominator is
/// numerically zero are set to zero (minimum-norm choice).
pub fn solve_sylvester_symmetric<T: Scalar>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    c: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    check_dim("sylvester A", a.nrows(), a.ncols())?;
    check_dim("sylvester B", b.nrows(), b.ncols())?;
    check_dim("sylvester C rows", a.nrows(), c.nrows())?;
    check_dim("sylvester C cols", b.nrows(), c.ncols())?;
    let ea = a.clone().symmetric_eigen();
    let eb = b.clone().symmetric_eigen();
    let scale = ea.eigenvalues.amax() + eb.eigenvalues.amax();
    let tiny = scale * T::of(T::EPS) * T::from_usize_lossy(a.nrows() + b.nrows());
    let mut ct = ea.eigenvectors.tr_mul(c) * &eb.eigenvectors;
    for j in 0..ct.ncols() {
        for i in 0..ct.nrows() {
            let den = ea.eigenvalues[i] + eb.eigenvalues[j];
            ct[(i, j)] = if den.abs() > tiny { ct[(i, j)] / den } else { T::zero() };
        }
    }
    Ok(&ea.eigenvectors * ct * eb.eigenvectors.transpose())
}

/// Operators of the SAE stationarity condition `ΦΦᵀW + λWΘΘᵀ = (1+λ)ΦΘᵀ`,
/// with `Φ` the `a x N` per-sample class embeddings.
pub fn sae_system<T: Scalar>(
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    lambda: T,
) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
    let theta = data.features.columns();
    let phi = embeddings.select(&data.labels);
    let a = &phi * phi.transpose();
    let b = (theta * theta.transpose()) * lambda;
    let c = (&phi * theta.transpose()) * (T::one() + lambda);
    (a, b, c)
}

/// SAE projection `W` (`a x d`) minimizing
/// `Σ ||θ - Wᵀφ||² + λ ||Wθ - φ||²` over training pairs.
pub fn sae_solve<T: Scalar>(
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    cfg: SaeConfig,
) -> Result<DMatrix<T>> {
    if !(cfg.lambda > 0.0) {
        return Err(ZslError::Configuration("SAE λ must be positive".into()));
    }
    check_dim("sae features", data.features.n_images(), data.labels.len())?;
    let (a, b, c) = sae_system(data, embeddings, T::of(cfg.lambda));
    solve_sylvester_symmetric(&a, &b, &c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaeDirection {
    /// Compare `Wθ(x)` with `φ(y)`.
    ToSemantic,
    /// Compare `θ(x)` with `Wᵀφ(y)`.
    ToFeature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel<T: Scalar> {
    /// `a x d`
    pub w: DMatrix<T>,
    pub direction: SaeDirection,
}

impl<T: Scalar> Scorer<T> for SaeModel<T> {
    /// Cosine similarity in the chosen space.
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_dim("sae (image)", self.w.ncols(), x.len())?;
        check_dim("sae (class)", self.w.nrows(), embeddings.dim())?;
        match self.direction {
            SaeDirection::ToSemantic => {
                let s = &self.w * x;
                candidates
                    .iter()
                    .map(|&c| cosine(s.as_view(), embeddings.class(c)))
                    .collect()
            }
            SaeDirection::ToFeature => candidates
                .iter()
                .map(|&c| {
                    let f = self.w.tr_mul(&embeddings.class(c));
                    cosine(x, f.as_view())
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Persist<T> for SaeModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        out.push_matrix("w", &self.w);
        out.push_scalar(
            "direction",
            match self.direction {
                SaeDirection::ToSemantic => 0.0,
                SaeDirection::ToFeature => 1.0,
            },
        );
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        Ok(Self {
            w: model.matrix("w")?,
            direction: if model.scalar("direction")? == 0.0 {
                SaeDirection::ToSemantic
            } else {
                SaeDirection::ToFeature
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingKind, FeatureMatrix};
    use crate::model::predict_argmax;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn emb_identity(c: usize) -> ClassEmbedding<f64> {
        ClassEmbedding::from_rows(DMatrix::identity(c, c), EmbeddingKind::Distributed).unwrap()
    }

    #[test]
    fn devise_examples() {
        // W = I, x picks out class scores directly
        let emb = emb_identity(2);
        let w = DMatrix::identity(2, 2);
        let x = dvector![5.0, 3.0];
        let s = devise_step_loss(x.as_view(), 0, &w, &[0, 1], &emb).unwrap();
        assert_eq!(s.loss, 0.0);
        assert_eq!(s.direction, dvector![0.0, 0.0]);

        let x = dvector![0.0, 0.0];
        let s = devise_step_loss(x.as_view(), 0, &w, &[0, 1], &emb).unwrap();
        assert_eq!(s.loss, 1.0);

        let emb = emb_identity(5);
        let zero = DMatrix::zeros(5, 5);
        let x = dvector![1.0, 2.0, 3.0, 4.0, 5.0];
        let s = devise_step_loss(x.as_view(), 2, &zero, &[0, 1, 2, 3, 4], &emb).unwrap();
        assert_eq!(s.loss, 4.0);
    }

    #[test]
    fn harmonic_partial_sums() {
        assert_eq!(RankWeights::Harmonic.partial_sum(1), 1.0);
        assert_eq!(RankWeights::Harmonic.partial_sum(2), 1.5);
        assert!((RankWeights::Harmonic.partial_sum(3) - 11.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ale_examples() {
        let emb = emb_identity(3);
        let w = DMatrix::identity(3, 3);
        // true class leads by more than the margin everywhere
        let x = dvector![5.0, 1.0, 2.0];
        let s = ale_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb, RankWeights::Harmonic).unwrap();
        assert_eq!(s.loss, 0.0);
        // class 1 ties exactly at the margin: counted in the rank, zero hinge
        let x = dvector![3.0, 2.0, 0.0];
        let s = ale_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb, RankWeights::Harmonic).unwrap();
        assert_eq!(s.loss, 0.0);
        // two violators: weight l_2 / 2 = 0.75
        let x = dvector![1.0, 1.0, 0.5];
        let s = ale_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb, RankWeights::Harmonic).unwrap();
        assert!((s.loss - 0.75 * (1.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sje_examples() {
        let emb = emb_identity(3);
        let w = DMatrix::identity(3, 3);
        let x = dvector![5.0, 1.0, 2.0];
        assert_eq!(sje_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb).unwrap().loss, 0.0);
        let x = dvector![2.0, 2.0, 0.0];
        let s = sje_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb).unwrap();
        assert_eq!(s.loss, 1.0);
        assert_eq!(s.direction, dvector![-1.0, 1.0, 0.0]);
        // classes 1 and 2 tie as maximizer: class 1 gets the gradient
        let x = dvector![2.0, 2.0, 2.0];
        let s = sje_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb).unwrap();
        assert_eq!(s.direction, dvector![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn devise_and_constant_ale_agree_on_single_violation() {
        let emb = emb_identity(3);
        let w = DMatrix::identity(3, 3);
        let x = dvector![1.0, 0.5, -3.0];
        let d = devise_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb).unwrap();
        let a = ale_step_loss(x.as_view(), 0, &w, &[0, 1, 2], &emb, RankWeights::Constant(1.0)).unwrap();
        assert_eq!(d, a);
    }

    #[test]
    fn label_outside_training_classes() {
        let emb = emb_identity(3);
        let w = DMatrix::identity(3, 3);
        let x = dvector![1.0, 0.5, -3.0];
        assert!(devise_step_loss(x.as_view(), 2, &w, &[0, 1], &emb).is_err());
    }

    fn orthonormal(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        m.qr().q()
    }

    #[test]
    fn eszsl_identity_reduction() {
        // d = N = C = a = 3, Θ orthonormal, Φ = I
        let q = orthonormal(3, 1);
        let feats = FeatureMatrix::from_columns(q.clone()).unwrap();
        let data = LabeledSet::new(feats, vec![0, 1, 2], 3).unwrap();
        let emb = emb_identity(3);
        let w = eszsl_solve(&data, &emb, &[0, 1, 2], EszslConfig { gamma: 0.0, lambda: 0.0 }).unwrap();
        let y = dmatrix![1.0, -1.0, -1.0; -1.0, 1.0, -1.0; -1.0, -1.0, 1.0];
        assert!((w - q * y).amax() < 1e-12);
    }

    #[test]
    fn eszsl_heavy_regularization_vanishes() {
        let q = orthonormal(3, 2);
        let data = LabeledSet::new(FeatureMatrix::from_columns(q).unwrap(), vec![0, 1, 2], 3).unwrap();
        let w = eszsl_solve(&data, &emb_identity(3), &[0, 1, 2], EszslConfig { gamma: 1e12, lambda: 1.0 })
            .unwrap();
        assert!(w.amax() < 1e-10);
    }

    #[test]
    fn eszsl_singular_gram() {
        let feats = FeatureMatrix::from_rows(dmatrix![1.0, 1.0; 2.0, 2.0]).unwrap();
        let data = LabeledSet::new(feats, vec![0, 1], 2).unwrap();
        let err = eszsl_solve(&data, &emb_identity(2), &[0, 1], EszslConfig { gamma: 0.0, lambda: 0.0 });
        assert!(matches!(err, Err(ZslError::IllConditioned(_))));
    }

    #[test]
    fn sae_self_reconstruction() {
        // a = d, Θ orthonormal, per-sample Φ = Θ → W = I
        let q = orthonormal(4, 3);
        let data = LabeledSet::new(FeatureMatrix::from_columns(q.clone()).unwrap(), vec![0, 1, 2, 3], 4)
            .unwrap();
        let emb = ClassEmbedding::from_rows(q.transpose(), EmbeddingKind::Distributed).unwrap();
        let w = sae_solve(&data, &emb, SaeConfig { lambda: 0.7 }).unwrap();
        assert!((w - DMatrix::<f64>::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn sae_predict_directions() {
        let w = DMatrix::<f64>::identity(2, 2);
        let emb = ClassEmbedding::from_rows(dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0], EmbeddingKind::Distributed)
            .unwrap();
        let x = dvector![1.0, 0.0];
        for direction in [SaeDirection::ToSemantic, SaeDirection::ToFeature] {
            let m = SaeModel { w: w.clone(), direction };
            assert_eq!(predict_argmax(x.as_view(), &m, &[1, 2, 0], &emb).unwrap(), 0);
            // antipodal candidate never wins over an orthogonal one
            assert_eq!(predict_argmax(x.as_view(), &m, &[1, 2], &emb).unwrap(), 2);
        }
        let zero = dvector![0.0, 0.0];
        let m = SaeModel { w, direction: SaeDirection::ToSemantic };
        assert!(matches!(
            predict_argmax(zero.as_view(), &m, &[0, 1], &emb),
            Err(ZslError::DegenerateInput(_))
        ));
    }
}
