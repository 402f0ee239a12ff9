//! Nonlinear compatibility: LATEM's piecewise-linear maps and the CMT
//! two-layer embedding with optional novelty routing (CMT*).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Result, ZslError};
use crate::methods::compat::{check_training_labels, direction_for, margin};
use crate::model::{ClassEmbedding, LabeledSet, Scorer};
use crate::persist::{CompatModel, Persist};
use crate::scalar::Scalar;
use crate::sgd::{init_rng, sgd_train, uniform_init, Parameters, SgdObjective, SgdOutcome, TrainConfig, ValMetric};

#[derive(Clone, Debug, PartialEq)]
pub struct LatemModel<T: Scalar> {
    /// `K` matrices, each `d x a`.
    pub ws: Vec<DMatrix<T>>,
}

/// Best of the `K` bilinear scores and the index of the matrix attaining it
/// (lowest index on ties).
fn latem_best<T: Scalar>(projected: &[DVector<T>], y: DVectorView<'_, T>) -> (T, usize) {
    let mut best = (projected[0].dot(&y), 0);
    for (i, p) in projected.iter().enumerate().skip(1) {
        let s = p.dot(&y);
        if s > best.0 {
            best = (s, i);
        }
    }
    best
}

fn latem_project<T: Scalar>(ws: &[DMatrix<T>], x: DVectorView<'_, T>) -> Vec<DVector<T>> {
    ws.iter().map(|w| w.tr_mul(&x)).collect()
}

fn check_latem<T: Scalar>(ws: &[DMatrix<T>], d: usize, a: usize) -> Result<()> {
    if ws.is_empty() {
        return Err(ZslError::contract("LATEM needs at least one matrix"));
    }
    for w in ws {
        check_dim("latem (image)", w.nrows(), d)?;
        check_dim("latem (class)", w.ncols(), a)?;
    }
    Ok(())
}

/// `max_i θ(x)ᵀ W_i φ(y)`.
pub fn latem_score<T: Scalar>(
    x: DVectorView<'_, T>,
    model: &LatemModel<T>,
    y: DVectorView<'_, T>,
) -> Result<T> {
    check_latem(&model.ws, x.len(), y.len())?;
    Ok(latem_best(&latem_project(&model.ws, x), y).0)
}

impl<T: Scalar> Scorer<T> for LatemModel<T> {
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_latem(&self.ws, x.len(), embeddings.dim())?;
        let projected = latem_project(&self.ws, x);
        Ok(candidates
            .iter()
            .map(|&c| latem_best(&projected, embeddings.class(c)).0)
            .collect())
    }
}

impl<T: Scalar> Persist<T> for LatemModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        out.push_scalar("k", self.ws.len() as f64);
        for (i, w) in self.ws.iter().enumerate() {
            out.push_matrix(&format!("w{i}"), w);
        }
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        let k = model.scalar("k")? as usize;
        let ws = (0..k)
            .map(|i| model.matrix(&format!("w{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ws })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatemStepLoss<T: Scalar> {
    pub loss: T,
    /// Subgradient with respect to each `W_i`.
    pub gradient: Vec<DMatrix<T>>,
}

struct LatemScored<T: Scalar> {
    true_idx: usize,
    /// `(class, hinge argument, selected matrix)` for every class other than the true one.
    others: Vec<(usize, T, usize)>,
}

fn latem_scored<T: Scalar>(
    x: DVectorView<'_, T>,
    y_true: usize,
    ws: &[DMatrix<T>],
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<LatemScored<T>> {
    check_latem(ws, x.len(), emb.dim())?;
    if !classes.contains(&y_true) {
        return Err(ZslError::contract(format!(
            "label {y_true} is not among the training classes"
        )));
    }
    let projected = latem_project(ws, x);
    let (true_score, true_idx) = latem_best(&projected, emb.class(y_true));
    let others = classes
        .iter()
        .filter(|&&y| y != y_true)
        .map(|&y| {
            let (s, i) = latem_best(&projected, emb.class(y));
            (y, margin::<T>(y_true, y) + s - true_score, i)
        })
        .collect();
    Ok(LatemScored { true_idx, others })
}

/// Pairwise ranking loss over the piecewise-linear score; each score's
/// gradient flows only into its selected matrix.
pub fn latem_step_loss<T: Scalar>(
    x: DVectorView<'_, T>,
    y_true: usize,
    ws: &[DMatrix<T>],
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<LatemStepLoss<T>> {
    let scored = latem_scored(x, y_true, ws, classes, emb)?;
    let mut gradient: Vec<DMatrix<T>> = ws.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut loss = T::zero();
    for &(y, h, i) in &scored.others {
        if h > T::zero() {
            loss += h;
            gradient[i].ger(T::one(), &x, &emb.class(y), T::one());
            gradient[scored.true_idx].ger(-T::one(), &x, &emb.class(y_true), T::one());
        }
    }
    Ok(LatemStepLoss { loss, gradient })
}

struct LatemObjective<'a, T: Scalar> {
    data: &'a LabeledSet<T>,
    embeddings: &'a ClassEmbedding<T>,
    classes: Vec<usize>,
}

impl<T: Scalar> SgdObjective<T> for LatemObjective<'_, T> {
    type Params = Vec<DMatrix<T>>;

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    /// One violating class drawn uniformly, as for DEVISE. When the true
    /// class and the violator select the same matrix the two rank-one terms
    /// are applied as a single update.
    fn step(&self, ws: &mut Vec<DMatrix<T>>, i: usize, lr: T, rng: &mut ChaCha8Rng) -> T {
        let x = self.data.features.image(i);
        let y = self.data.labels[i];
        let scored = latem_scored(x, y, ws, &self.classes, self.embeddings)
            .expect("training labels validated against training classes");
        let loss = scored
            .others
            .iter()
            .map(|&(_, h, _)| h.max(T::zero()))
            .fold(T::zero(), |a, b| a + b);
        let violators: Vec<(usize, usize)> = scored
            .others
            .iter()
            .filter(|(_, h, _)| *h > T::zero())
            .map(|&(c, _, m)| (c, m))
            .collect();
        if violators.is_empty() {
            return loss;
        }
        let (pick, m) = violators[rng.random_range(0..violators.len())];
        if m == scored.true_idx {
            let g = direction_for(&[(pick, T::one())], y, self.embeddings);
            ws[m].ger(-lr, &x, &g, T::one());
        } else {
            ws[m].ger(-lr, &x, &self.embeddings.class(pick), T::one());
            ws[scored.true_idx].ger(lr, &x, &self.embeddings.class(y), T::one());
        }
        loss
    }
}

/// `K` matrices initialized in sequence from the seed's init stream; with
/// `K = 1` the initialization and every update coincide with DEVISE.
pub fn latem_train<T: Scalar>(
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    classes: &[usize],
    k: usize,
    config: &TrainConfig,
    val_metric: Option<ValMetric<'_, Vec<DMatrix<T>>>>,
) -> Result<SgdOutcome<Vec<DMatrix<T>>>> {
    if k == 0 {
        return Err(ZslError::Configuration("LATEM needs K >= 1".into()));
    }
    check_training_labels(data, classes)?;
    let d = data.features.dim();
    let mut rng = init_rng(config.seed);
    let init = (0..k)
        .map(|_| uniform_init(d, embeddings.dim(), d, &mut rng) * T::of(config.init_scale))
        .collect();
    let objective = LatemObjective {
        data,
        embeddings,
        classes: classes.to_vec(),
    };
    sgd_train(&objective, init, config, val_metric)
}

/// CMT network `φ̂(x) = W1 tanh(W2 θ(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmtWeights<T: Scalar> {
    /// `h x d`
    pub w2: DMatrix<T>,
    /// `a x h`
    pub w1: DMatrix<T>,
}

impl<T: Scalar> Parameters for CmtWeights<T> {
    fn all_finite(&self) -> bool {
        self.w1.all_finite() && self.w2.all_finite()
    }
}

impl<T: Scalar> CmtWeights<T> {
    pub fn hidden(&self) -> usize {
        self.w2.nrows()
    }

    pub fn embed(&self, x: DVectorView<'_, T>) -> Result<DVector<T>> {
        check_dim("cmt (image)", self.w2.ncols(), x.len())?;
        Ok(&self.w1 * (&self.w2 * x).map(|z| z.tanh()))
    }
}

/// `||φ(y) - W1 tanh(W2 θ)||²` and its gradient.
pub fn cmt_sample_loss<T: Scalar>(
    x: DVectorView<'_, T>,
    target: DVectorView<'_, T>,
    weights: &CmtWeights<T>,
) -> Result<(T, CmtWeights<T>)> {
    check_dim("cmt (class)", weights.w1.nrows(), target.len())?;
    check_dim("cmt (image)", weights.w2.ncols(), x.len())?;
    let t = (&weights.w2 * x).map(|z| z.tanh());
    let r = &weights.w1 * &t - target;
    let two = T::of(2.0);
    let gw1 = (&r * t.transpose()) * two;
    let dt = weights.w1.tr_mul(&r) * two;
    let dz = dt.zip_map(&t, |g, ti| g * (T::one() - ti * ti));
    let gw2 = dz * x.transpose();
    Ok((r.norm_squared(), CmtWeights { w2: gw2, w1: gw1 }))
}

struct CmtObjective<'a, T: Scalar> {
    data: &'a LabeledSet<T>,
    embeddings: &'a ClassEmbedding<T>,
}

impl<T: Scalar> SgdObjective<T> for CmtObjective<'_, T> {
    type Params = CmtWeights<T>;

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn step(&self, w: &mut CmtWeights<T>, i: usize, lr: T, _rng: &mut ChaCha8Rng) -> T {
        let x = self.data.features.image(i);
        let target = self.embeddings.class(self.data.labels[i]);
        let (loss, g) = cmt_sample_loss(x, target, w).expect("dimensions validated");
        w.w1 -= g.w1 * lr;
        w.w2 -= g.w2 * lr;
        loss
    }
}

pub fn cmt_train<T: Scalar>(
    data: &LabeledSet<T>,
    embeddings: &ClassEmbedding<T>,
    hidden: usize,
    config: &TrainConfig,
    val_metric: Option<ValMetric<'_, CmtWeights<T>>>,
) -> Result<SgdOutcome<CmtWeights<T>>> {
    if hidden == 0 {
        return Err(ZslError::Configuration("CMT hidden width must be >= 1".into()));
    }
    let d = data.features.dim();
    let mut rng = init_rng(config.seed);
    let init = CmtWeights {
        w2: uniform_init(hidden, d, d, &mut rng),
        w1: uniform_init(embeddings.dim(), hidden, hidden, &mut rng),
    };
    sgd_train(&CmtObjective { data, embeddings }, init, config, val_metric)
}

/// Seen-class centroids of embedded training images and the novelty threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Novelty<T: Scalar> {
    pub centroids: Vec<(usize, DVector<T>)>,
    pub tau: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmtModel<T: Scalar> {
    pub weights: CmtWeights<T>,
    /// Present for CMT*.
    pub novelty: Option<Novelty<T>>,
}

/// Per-class mean of the embedded images.
pub fn seen_centroids<T: Scalar>(
    weights: &CmtWeights<T>,
    data: &LabeledSet<T>,
) -> Result<Vec<(usize, DVector<T>)>> {
    let mut out = Vec::new();
    for c in data.classes() {
        let mut sum = DVector::zeros(weights.w1.nrows());
        let mut n = 0usize;
        for i in (0..data.len()).filter(|&i| data.labels[i] == c) {
            sum += weights.embed(data.features.image(i))?;
            n += 1;
        }
        out.push((c, sum / T::from_usize_lossy(n)));
    }
    Ok(out)
}

/// Smallest Euclidean distance from an embedded image to any centroid.
pub fn cmt_novelty_score<T: Scalar>(embedded: DVectorView<'_, T>, centroids: &[(usize, DVector<T>)]) -> T {
    centroids
        .iter()
        .map(|(_, c)| (embedded - c).norm())
        .fold(T::max_value().unwrap_or_else(T::one), |a, b| a.min(b))
}

/// Threshold below which a fraction `1 - false_novelty_rate` of the scores
/// fall (nearest-rank quantile).
pub fn calibrate_threshold<T: Scalar>(scores: &[T], false_novelty_rate: f64) -> Result<T> {
    if scores.is_empty() {
        return Err(ZslError::DegenerateData("no calibration images".into()));
    }
    if !(0.0..1.0).contains(&false_novelty_rate) {
        return Err(ZslError::Configuration(format!(
            "false-novelty rate must be in [0, 1), got {false_novelty_rate}"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((1.0 - false_novelty_rate) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

impl<T: Scalar> CmtModel<T> {
    /// Whether an image is routed to the unseen classes.
    pub fn is_novel(&self, x: DVectorView<'_, T>) -> Result<bool> {
        let nov = self
            .novelty
            .as_ref()
            .ok_or_else(|| ZslError::Configuration("CMT* needs a calibrated novelty threshold".into()))?;
        let e = self.weights.embed(x)?;
        Ok(cmt_novelty_score(e.as_view(), &nov.centroids) > nov.tau)
    }
}

/// Negative squared distance between the embedded image and `φ(y)`. With a
/// novelty threshold, candidates outside the routed group (seen classes for
/// a novel image, unseen ones otherwise) score `-∞`.
impl<T: Scalar> Scorer<T> for CmtModel<T> {
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_dim("cmt (class)", self.weights.w1.nrows(), embeddings.dim())?;
        let e = self.weights.embed(x)?;
        let mut s: Vec<T> = candidates
            .iter()
            .map(|&c| -(&e - embeddings.class(c)).norm_squared())
            .collect();
        if let Some(nov) = &self.novelty {
            let seen: BTreeSet<usize> = nov.centroids.iter().map(|(c, _)| *c).collect();
            let novel = cmt_novelty_score(e.as_view(), &nov.centroids) > nov.tau;
            for (v, c) in s.iter_mut().zip(candidates) {
                if seen.contains(c) == novel {
                    *v = T::min_value().unwrap_or_else(|| -T::one());
                }
            }
        }
        Ok(s)
    }
}

/// Routes by novelty, then predicts the nearest embedding within the routed group.
pub fn cmt_predict_gzsl<T: Scalar>(
    x: DVectorView<'_, T>,
    model: &CmtModel<T>,
    seen: &[usize],
    unseen: &[usize],
    embeddings: &ClassEmbedding<T>,
) -> Result<usize> {
    let group = if model.is_novel(x)? { unseen } else { seen };
    let plain = CmtModel { weights: model.weights.clone(), novelty: None };
    crate::model::predict_argmax(x, &plain, group, embeddings)
}

impl<T: Scalar> Persist<T> for CmtModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        out.push_matrix("w1", &self.weights.w1);
        out.push_matrix("w2", &self.weights.w2);
        if let Some(nov) = &self.novelty {
            out.push_scalar("tau", nov.tau.as_f64());
            let ids = DVector::from_iterator(nov.centroids.len(), nov.centroids.iter().map(|(c, _)| *c as f64));
            out.push_vector("centroid_classes", &ids);
            let mut m = DMatrix::<T>::zeros(nov.centroids.len(), self.weights.w1.nrows());
            for (r, (_, c)) in nov.centroids.iter().enumerate() {
                m.set_row(r, &c.transpose());
            }
            out.push_matrix("centroids", &m);
        }
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        let weights = CmtWeights { w1: model.matrix("w1")?, w2: model.matrix("w2")? };
        let novelty = if model.block("tau").is_ok() {
            let ids: DVector<f64> = model.vector("centroid_classes")?;
            let m: DMatrix<T> = model.matrix("centroids")?;
            Some(Novelty {
                tau: T::of(model.scalar("tau")?),
                centroids: ids
                    .iter()
                    .enumerate()
                    .map(|(r, &c)| (c as usize, m.row(r).transpose()))
                    .collect(),
            })
        } else {
            None
        };
        Ok(Self { weights, novelty })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::compat::{ranking_train, RankingLossSpec};
    use crate::model::{predict_argmax, EmbeddingKind, FeatureMatrix};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    #[test]
    fn latem_score_examples() {
        let x = dvector![1.0, 0.0];
        let y = dvector![1.0, 0.0];
        let m = LatemModel {
            ws: vec![
                dmatrix![1.0, 0.0; 0.0, 0.0],
                dmatrix![3.0, 0.0; 0.0, 0.0],
                dmatrix![2.0, 0.0; 0.0, 0.0],
            ],
        };
        assert_eq!(latem_score(x.as_view(), &m, y.as_view()).unwrap(), 3.0);
        let zero = LatemModel { ws: vec![DMatrix::zeros(2, 2); 3] };
        assert_eq!(latem_score(x.as_view(), &zero, y.as_view()).unwrap(), 0.0);
        let single = LatemModel { ws: vec![dmatrix![1.0, 2.0; 3.0, 4.0]] };
        let x = dvector![1.0, 2.0];
        let y = dvector![1.0, 1.0];
        assert_eq!(latem_score(x.as_view(), &single, y.as_view()).unwrap(), 17.0);
    }

    fn toy(seed: u64, n_classes: usize, per_class: usize) -> (LabeledSet<f64>, ClassEmbedding<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, a) = (5, 3);
        let emb = DMatrix::from_fn(n_classes, a, |_, _| StandardNormal.sample(&mut rng));
        let map = DMatrix::<f64>::from_fn(d, a, |_, _| StandardNormal.sample(&mut rng));
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut cols = DMatrix::zeros(d, n_classes * per_class);
        let mut labels = Vec::new();
        for c in 0..n_classes {
            let mean = &map * emb.row(c).transpose();
            for j in 0..per_class {
                let col = c * per_class + j;
                for r in 0..d {
                    cols[(r, col)] = mean[r] + noise.sample(&mut rng);
                }
                labels.push(c);
            }
        }
        (
            LabeledSet::new(FeatureMatrix::from_columns(cols).unwrap(), labels, n_classes).unwrap(),
            ClassEmbedding::from_rows(emb, EmbeddingKind::Distributed).unwrap(),
        )
    }

    #[test]
    fn latem_k1_reproduces_devise_bitwise() {
        let (data, emb) = toy(3, 4, 15);
        let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 7, seed: 9, ..TrainConfig::default() };
        let classes = [0, 1, 2, 3];
        let devise = ranking_train(&data, &emb, &classes, RankingLossSpec::devise(), &cfg, None).unwrap();
        let latem = latem_train(&data, &emb, &classes, 1, &cfg, None).unwrap();
        assert_eq!(latem.params.len(), 1);
        assert!(devise.params.iter().zip(latem.params[0].iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn latem_zero_epochs_is_seeded_init() {
        let (data, emb) = toy(4, 3, 5);
        let cfg = TrainConfig { max_epochs: 0, seed: 5, ..TrainConfig::default() };
        let a = latem_train(&data, &emb, &[0, 1, 2], 3, &cfg, None).unwrap();
        let b = latem_train(&data, &emb, &[0, 1, 2], 3, &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params[0], a.params[1]);
        let bound = 1.0 / 5f64.sqrt();
        assert!(a.params.iter().all(|w| w.amax() <= bound));
    }

    #[test]
    fn latem_score_dominates_each_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ws: Vec<DMatrix<f64>> = (0..4).map(|_| uniform_init(3, 2, 1, &mut rng)).collect();
        let m = LatemModel { ws: ws.clone() };
        let x = dvector![0.3, -1.0, 2.0];
        let y = dvector![0.5, -0.7];
        let s = latem_score(x.as_view(), &m, y.as_view()).unwrap();
        let each: Vec<f64> = ws.iter().map(|w| (w.tr_mul(&x)).dot(&y)).collect();
        assert!(each.iter().all(|&e| s >= e));
        assert!(each.contains(&s));
    }

    #[test]
    fn cmt_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = CmtWeights {
            w2: uniform_init::<f64>(4, 3, 1, &mut rng),
            w1: uniform_init::<f64>(2, 4, 1, &mut rng),
        };
        let x = dvector![0.4, -0.3, 0.9];
        let target = dvector![0.2, -0.5];
        let (_, g) = cmt_sample_loss(x.as_view(), target.as_view(), &w).unwrap();
        let h = 1e-6;
        for (which, grad) in [(0, &g.w2), (1, &g.w1)] {
            for idx in 0..grad.len() {
                let mut plus = w.clone();
                let mut minus = w.clone();
                let (p, m) = if which == 0 { (&mut plus.w2, &mut minus.w2) } else { (&mut plus.w1, &mut minus.w1) };
                p[idx] += h;
                m[idx] -= h;
                let fp = cmt_sample_loss(x.as_view(), target.as_view(), &plus).unwrap().0;
                let fm = cmt_sample_loss(x.as_view(), target.as_view(), &minus).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grad[idx]).abs() <= 1e-4 * (1.0 + fd.abs()), "{fd} vs {}", grad[idx]);
            }
        }
    }

    #[test]
    fn cmt_width_one_is_accepted() {
        let (data, emb) = toy(5, 3, 6);
        let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::default() };
        let out = cmt_train(&data, &emb, 1, &cfg, None).unwrap();
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn cmt_linear_regime_matches_least_squares() {
        // small inputs keep tanh in its linear range, so W1 W2 should reach the
        // least-squares map
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (d, a, n) = (3, 2, 60);
        let x = DMatrix::<f64>::from_fn(d, n, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        let map = dmatrix![0.8, -0.4, 0.3; 0.2, 0.6, -0.5];
        let noise = Normal::new(0.0, 0.002).unwrap();
        let targets = DMatrix::from_fn(a, n, |_, _| noise.sample(&mut rng)) + &map * &x;
        let emb = ClassEmbedding::from_rows(targets.transpose(), EmbeddingKind::Distributed).unwrap();
        let data = LabeledSet::new(FeatureMatrix::from_columns(x.clone()).unwrap(), (0..n).collect(), n).unwrap();

        let b = (&targets * x.transpose()) * (&x * x.transpose()).try_inverse().unwrap();
        let ls_loss = (&targets - &b * &x).norm_squared();

        let cfg = TrainConfig { learning_rate: 2.0, max_epochs: 3000, seed: 2, ..TrainConfig::default() };
        let out = cmt_train(&data, &emb, 3, &cfg, None).unwrap();
        let cmt_loss: f64 = (0..n)
            .map(|i| (out.params.embed(x.column(i)).unwrap() - targets.column(i)).norm_squared())
            .sum();
        assert!((cmt_loss - ls_loss) / ls_loss <= 1e-2, "{cmt_loss} vs {ls_loss}");
    }

    #[test]
    fn novelty_scores() {
        let centroids = vec![(0, dvector![0.0, 0.0]), (1, dvector![6.0, 0.0])];
        assert_eq!(cmt_novelty_score(dvector![0.0, 0.0].as_view(), &centroids), 0.0);
        assert_eq!(cmt_novelty_score(dvector![2.0, 0.0].as_view(), &centroids), 2.0);
        let far = |t: f64| cmt_novelty_score(dvector![-t, 0.0].as_view(), &centroids);
        assert!(far(1.0) < far(2.0) && far(2.0) < far(3.0));
    }

    #[test]
    fn threshold_quantile() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&scores, 0.05).unwrap(), 95.0);
        assert_eq!(calibrate_threshold(&scores, 0.0).unwrap(), 100.0);
        assert!(calibrate_threshold::<f64>(&[], 0.05).is_err());
    }

    #[test]
    fn extreme_thresholds_route_everything() {
        let weights = CmtWeights { w2: DMatrix::<f64>::identity(2, 2), w1: DMatrix::identity(2, 2) };
        let centroids = vec![(0, dvector![0.5, 0.0])];
        let emb = ClassEmbedding::from_rows(dmatrix![0.5, 0.0; 0.0, 0.5], EmbeddingKind::Distributed).unwrap();
        let x = dvector![1.0, 0.0];
        let mut m = CmtModel { weights, novelty: Some(Novelty { centroids, tau: f64::INFINITY }) };
        assert_eq!(cmt_predict_gzsl(x.as_view(), &m, &[0], &[1], &emb).unwrap(), 0);
        assert_eq!(predict_argmax(x.as_view(), &m, &[0, 1], &emb).unwrap(), 0);
        m.novelty.as_mut().unwrap().tau = -1.0;
        assert_eq!(cmt_predict_gzsl(x.as_view(), &m, &[0], &[1], &emb).unwrap(), 1);
        assert_eq!(predict_argmax(x.as_view(), &m, &[0, 1], &emb).unwrap(), 1);
        m.novelty = None;
        assert!(matches!(
            cmt_predict_gzsl(x.as_view(), &m, &[0], &[1], &emb),
            Err(ZslError::Configuration(_))
        ));
    }

    #[test]
    fn cmt_persist_round_trip() {
        let weights = CmtWeights { w2: dmatrix![1.0, 2.0; 3.0, 4.0], w1: dmatrix![0.5, -0.5] };
        let m = CmtModel {
            weights,
            novelty: Some(Novelty { centroids: vec![(3, dvector![0.25]), (7, dvector![-1.0])], tau: 0.75 }),
        };
        let mut out = CompatModel::new("cmt*", 1, Default::default());
        m.write_blocks(&mut out);
        let back = CompatModel::from_bytes(&out.to_bytes()).unwrap();
        assert_eq!(<CmtModel<f64> as Persist<f64>>::read_blocks(&back).unwrap(), m);
    }
}
