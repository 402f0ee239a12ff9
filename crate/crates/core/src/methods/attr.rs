//! Attribute classifiers: DAP (direct) and IAP (indirect through seen-class
//! posteriors), both scored with the prior-normalized attribute product.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Result, ZslError};
use crate::logistic::{logistic_fit, softmax_fit, LogisticModel, SoftmaxClassifier};
use crate::model::{ClassEmbedding, EmbeddingKind, LabeledSet, Scorer};
use crate::persist::{CompatModel, Persist};
use crate::scalar::Scalar;
use crate::sgd::TrainConfig;

/// Probability clamp for attribute posteriors and priors.
pub const PROB_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedAttributes {
    /// `C x M`, entries 0 or 1.
    pub values: DMatrix<u8>,
    pub thresholds: Vec<f64>,
}

impl BinarizedAttributes {
    pub fn n_attributes(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, class: usize, m: usize) -> bool {
        self.values[(class, m)] == 1
    }
}

/// Entry is 1 iff the value reaches the attribute's mean over `train_classes`.
pub fn binarize_attributes<T: Scalar>(
    embeddings: &ClassEmbedding<T>,
    train_classes: &[usize],
) -> Result<BinarizedAttributes> {
    if embeddings.kind() != EmbeddingKind::Attributes {
        return Err(ZslError::UnsupportedEmbedding(
            "attribute classifiers need attribute embeddings".into(),
        ));
    }
    if train_classes.is_empty() {
        return Err(ZslError::contract("binarization needs training classes"));
    }
    let m = embeddings.dim();
    let thresholds: Vec<f64> = (0..m)
        .map(|j| {
            train_classes
                .iter()
                .map(|&c| embeddings.class(c)[j].as_f64())
                .sum::<f64>()
                / train_classes.len() as f64
        })
        .collect();
    let values = DMatrix::from_fn(embeddings.n_classes(), m, |c, j| {
        u8::from(embeddings.class(c)[j].as_f64() >= thresholds[j])
    });
    Ok(BinarizedAttributes { values, thresholds })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Training priors `p(a_m)`: mean binarized value over the training classes, clamped.
pub fn attribute_priors(bin: &BinarizedAttributes, train_classes: &[usize]) -> Vec<f64> {
    (0..bin.n_attributes())
        .map(|m| {
            let on = train_classes.iter().filter(|&&c| bin.get(c, m)).count();
            clamp_prob(on as f64 / train_classes.len() as f64)
        })
        .collect()
}

/// `Σ_m log(p̂_m / p_m)` over attributes the class has, `log((1-p̂_m)/(1-p_m))`
/// over the rest; probabilities clamped to `[ε, 1-ε]`. Attributes where
/// `probs` is `None` are skipped.
pub fn attribute_log_score(probs: &[Option<f64>], priors: &[f64], bin: &BinarizedAttributes, class: usize) -> f64 {
    probs
        .iter()
        .zip(priors)
        .enumerate()
        .filter_map(|(m, (p, &prior))| p.map(|p| (m, clamp_prob(p), prior)))
        .map(|(m, p, prior)| {
            if bin.get(class, m) {
                p.ln() - prior.ln()
            } else {
                (1.0 - p).ln() - (1.0 - prior).ln()
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeBank<T: Scalar> {
    /// One classifier per attribute; `None` where the attribute is constant
    /// over the training classes.
    pub classifiers: Vec<Option<LogisticModel<T>>>,
    pub priors: Vec<f64>,
}

impl<T: Scalar> AttributeBank<T> {
    /// Attributes left out of fitting and scoring.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.classifiers.len())
            .filter(|&m| self.classifiers[m].is_none())
            .collect()
    }

    pub fn probabilities(&self, x: DVectorView<'_, T>) -> Vec<Option<f64>> {
        self.classifiers
            .iter()
            .map(|c| c.as_ref().map(|c| c.probability(x).as_f64()))
            .collect()
    }
}

pub fn dap_fit<T: Scalar>(
    train: &LabeledSet<T>,
    bin: &BinarizedAttributes,
    l2: f64,
    config: &TrainConfig,
) -> Result<AttributeBank<T>> {
    let classes = train.classes();
    check_candidates(bin, &classes)?;
    let priors = attribute_priors(bin, &classes);
    let mut classifiers = Vec::with_capacity(bin.n_attributes());
    for m in 0..bin.n_attributes() {
        let on = classes.iter().filter(|&&c| bin.get(c, m)).count();
        if on == 0 || on == classes.len() {
            classifiers.push(None);
            continue;
        }
        let targets: Vec<bool> = train.labels.iter().map(|&l| bin.get(l, m)).collect();
        classifiers.push(Some(logistic_fit(&train.features, &targets, T::of(l2), config)?));
    }
    Ok(AttributeBank { classifiers, priors })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DapModel<T: Scalar> {
    pub bank: AttributeBank<T>,
    pub attributes: BinarizedAttributes,
}

impl<T: Scalar> Scorer<T> for DapModel<T> {
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        _embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_candidates(&self.attributes, candidates)?;
        let probs = self.bank.probabilities(x);
        Ok(candidates
            .iter()
            .map(|&c| T::of(attribute_log_score(&probs, &self.bank.priors, &self.attributes, c)))
            .collect())
    }
}

fn check_candidates(bin: &BinarizedAttributes, candidates: &[usize]) -> Result<()> {
    match candidates.iter().find(|&&c| c >= bin.values.nrows()) {
        Some(c) => Err(ZslError::contract(format!("class {c} has no binarized attributes"))),
        None => Ok(()),
    }
}

pub fn iap_fit<T: Scalar>(train: &LabeledSet<T>, l2: f64, config: &TrainConfig) -> Result<SoftmaxClassifier<T>> {
    softmax_fit(train, T::of(l2), config)
}

/// `p(a_m|x) = Σ_k a_m^{y_k} p(y_k|x)` over the classifier's seen classes.
pub fn iap_attribute_probs(posterior: &DVector<f64>, seen: &[usize], bin: &BinarizedAttributes) -> Vec<f64> {
    (0..bin.n_attributes())
        .map(|m| {
            seen.iter()
                .zip(posterior.iter())
                .filter(|(&c, _)| bin.get(c, m))
                .map(|(_, &p)| p)
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IapModel<T: Scalar> {
    pub classifier: SoftmaxClassifier<T>,
    pub priors: Vec<f64>,
    pub attributes: BinarizedAttributes,
}

impl<T: Scalar> Scorer<T> for IapModel<T> {
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        _embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_candidates(&self.attributes, candidates)?;
        let posterior = self.classifier.posterior(x).map(|p| p.as_f64());
        let probs: Vec<Option<f64>> = iap_attribute_probs(&posterior, &self.classifier.classes, &self.attributes)
            .into_iter()
            .map(Some)
            .collect();
        Ok(candidates
            .iter()
            .map(|&c| T::of(attribute_log_score(&probs, &self.priors, &self.attributes, c)))
            .collect())
    }
}

fn write_binarized(out: &mut CompatModel, bin: &BinarizedAttributes) {
    out.push_matrix("attributes", &bin.values.map(f64::from));
    out.push_vector("thresholds", &DVector::from_vec(bin.thresholds.clone()));
}

fn read_binarized(model: &CompatModel) -> Result<BinarizedAttributes> {
    let values: DMatrix<f64> = model.matrix("attributes")?;
    let thresholds: DVector<f64> = model.vector("thresholds")?;
    Ok(BinarizedAttributes {
        values: values.map(|v| v as u8),
        thresholds: thresholds.iter().copied().collect(),
    })
}

impl<T: Scalar> Persist<T> for DapModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        write_binarized(out, &self.attributes);
        out.push_vector("priors", &DVector::from_vec(self.bank.priors.clone()));
        let fitted = DVector::from_iterator(
            self.bank.classifiers.len(),
            self.bank.classifiers.iter().map(|c| f64::from(u8::from(c.is_some()))),
        );
        out.push_vector("fitted", &fitted);
        for (m, c) in self.bank.classifiers.iter().enumerate() {
            if let Some(c) = c {
                c.write_blocks(out, &format!("attr{m}"));
            }
        }
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        let priors: DVector<f64> = model.vector("priors")?;
        let fitted: DVector<f64> = model.vector("fitted")?;
        let classifiers = fitted
            .iter()
            .enumerate()
            .map(|(m, &f)| {
                if f == 1.0 {
                    LogisticModel::read_blocks(model, &format!("attr{m}")).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bank: AttributeBank { classifiers, priors: priors.iter().copied().collect() },
            attributes: read_binarized(model)?,
        })
    }
}

impl<T: Scalar> Persist<T> for IapModel<T> {
    fn write_blocks(&self, out: &mut CompatModel) {
        write_binarized(out, &self.attributes);
        out.push_vector("priors", &DVector::from_vec(self.priors.clone()));
        self.classifier.write_blocks(out, "seen");
    }

    fn read_blocks(model: &CompatModel) -> Result<Self> {
        let priors: DVector<f64> = model.vector("priors")?;
        Ok(Self {
            classifier: SoftmaxClassifier::read_blocks(model, "seen")?,
            priors: priors.iter().copied().collect(),
            attributes: read_binarized(model)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_argmax, FeatureMatrix};
    use nalgebra::{dmatrix, dvector};

    fn attrs(rows: DMatrix<f64>) -> ClassEmbedding<f64> {
        ClassEmbedding::from_rows(rows, EmbeddingKind::Attributes).unwrap()
    }

    #[test]
    fn binarize_examples() {
        let b = binarize_attributes(&attrs(dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0]), &[0, 1, 2]).unwrap();
        assert_eq!(b.values, dmatrix![1u8, 0; 0, 1; 1, 1]);
        let b = binarize_attributes(&attrs(dmatrix![0.2, 0.4; 0.8, 0.4]), &[0, 1]).unwrap();
        assert_eq!(b.thresholds[0], 0.5);
        assert_eq!(b.values.column(0).iter().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(b.values.column(1).iter().copied().collect::<Vec<_>>(), vec![1, 1]);
        let dist = ClassEmbedding::from_rows(dmatrix![-1.0, 2.0], EmbeddingKind::Distributed).unwrap();
        assert!(matches!(binarize_attributes(&dist, &[0]), Err(ZslError::UnsupportedEmbedding(_))));
    }

    #[test]
    fn priors_and_clamp() {
        let bin = BinarizedAttributes {
            values: dmatrix![1u8, 1; 1, 1; 1, 1; 0, 1],
            thresholds: vec![0.5, 0.5],
        };
        let p = attribute_priors(&bin, &[0, 1, 2, 3]);
        assert_eq!(p, vec![0.75, 1.0 - PROB_EPS]);
    }

    #[test]
    fn hand_worked_scores() {
        let bin = BinarizedAttributes { values: dmatrix![1u8, 1; 1, 0], thresholds: vec![0.5; 2] };
        let probs = [Some(0.8), Some(0.6)];
        let a = attribute_log_score(&probs, &[0.5, 0.5], &bin, 0);
        let b = attribute_log_score(&probs, &[0.5, 0.5], &bin, 1);
        assert!((a.exp() - 1.92).abs() < 1e-12);
        assert!((b.exp() - 1.28).abs() < 1e-12);
        let uninformative = [Some(0.5), Some(0.5)];
        assert_eq!(attribute_log_score(&uninformative, &[0.5, 0.5], &bin, 0), 0.0);
        assert_eq!(attribute_log_score(&uninformative, &[0.5, 0.5], &bin, 1), 0.0);
    }

    #[test]
    fn iap_attribute_examples() {
        let bin = BinarizedAttributes { values: dmatrix![1u8, 1; 0, 1], thresholds: vec![0.5; 2] };
        let p = iap_attribute_probs(&dvector![0.7, 0.3], &[0, 1], &bin);
        assert!((p[0] - 0.7).abs() < 1e-15);
        assert!((p[1] - 1.0).abs() < 1e-15);
        let onehot = iap_attribute_probs(&dvector![0.0, 1.0], &[0, 1], &bin);
        assert_eq!(onehot, vec![0.0, 1.0]);
    }

    fn separable() -> (LabeledSet<f64>, ClassEmbedding<f64>) {
        // four classes in the corners; attribute m follows the sign of coordinate m
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        for (c, &(u, v)) in corners.iter().enumerate() {
            for j in 0..10 {
                let jitter = 0.05 * (j as f64 - 4.5);
                rows.extend_from_slice(&[u + jitter, v - jitter]);
                labels.push(c);
            }
        }
        let f = FeatureMatrix::from_rows(DMatrix::from_row_slice(40, 2, &rows)).unwrap();
        let emb = attrs(dmatrix![0.1, 0.1; 0.9, 0.1; 0.1, 0.9; 0.9, 0.9]);
        (LabeledSet::new(f, labels, 4).unwrap(), emb)
    }

    #[test]
    fn dap_fit_and_predict() {
        let (data, emb) = separable();
        let train = data.restrict_to(&[0, 1, 2].into()).unwrap();
        let bin = binarize_attributes(&emb, &[0, 1, 2]).unwrap();
        let cfg = TrainConfig::default();
        let bank = dap_fit(&train, &bin, 1e-3, &cfg).unwrap();
        assert!(bank.excluded().is_empty());
        let model = DapModel { bank, attributes: bin };
        // class 3 was never seen; its images must still map to it
        let probe = dvector![1.0, 1.0];
        assert_eq!(predict_argmax(probe.as_view(), &model, &[0, 3], &emb).unwrap(), 3);
        let correct = (30..40)
            .filter(|&i| predict_argmax(data.features.image(i), &model, &[0, 1, 2, 3], &emb).unwrap() == 3)
            .count();
        assert!(correct >= 9);
    }

    #[test]
    fn dap_excludes_constant_attribute() {
        let (data, _) = separable();
        let emb = attrs(dmatrix![0.1, 1.0; 1.0, 1.0; 0.1, 1.0; 1.0, 0.1]);
        let bin = binarize_attributes(&emb, &[0, 1, 2]).unwrap();
        let train = data.restrict_to(&[0, 1, 2].into()).unwrap();
        let bank = dap_fit(&train, &bin, 1e-3, &TrainConfig::default()).unwrap();
        assert_eq!(bank.excluded(), vec![1]);
    }

    #[test]
    fn iap_fit_and_predict() {
        let (data, emb) = separable();
        let train = data.restrict_to(&[0, 1, 2].into()).unwrap();
        let bin = binarize_attributes(&emb, &[0, 1, 2]).unwrap();
        let classifier = iap_fit(&train, 1e-3, &TrainConfig::default()).unwrap();
        let priors = attribute_priors(&bin, &[0, 1, 2]);
        let model = IapModel { classifier, priors, attributes: bin };
        let x = dvector![-1.0, -1.0];
        assert_eq!(predict_argmax(x.as_view(), &model, &[0, 1, 2, 3], &emb).unwrap(), 0);

        let mut out = CompatModel::new("iap", 0, Default::default());
        model.write_blocks(&mut out);
        let back: IapModel<f64> = Persist::<f64>::read_blocks(&out).unwrap();
        assert_eq!(back, model);
    }
}
