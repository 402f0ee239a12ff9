//! Shared data model and the compatibility scoring contract every method
//! implements: a model scores `(image, class)` pairs and prediction is the
//! argmax (or top-k) over a candidate class set.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVectorView};

use crate::error::{check_dim, Result, ZslError};
use crate::scalar::Scalar;

/// Image embeddings, one image per row on the outside. Stored column-major
/// with one column per image so that a single image is a contiguous view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T: Scalar> {
    columns: DMatrix<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    /// Builds from an `N x d` matrix (row per image).
    pub fn from_rows(rows: DMatrix<T>) -> Result<Self> {
        Self::from_columns(rows.transpose())
    }

    /// Builds from a `d x N` matrix (column per image).
    pub fn from_columns(columns: DMatrix<T>) -> Result<Self> {
        if columns.nrows() == 0 || columns.ncols() == 0 {
            return Err(ZslError::contract("feature matrix needs N >= 1 and d >= 1"));
        }
        if let Some(pos) = columns.iter().position(|v| !v.is_finite()) {
            return Err(ZslError::contract(format!(
                "non-finite feature value in image {}",
                pos / columns.nrows()
            )));
        }
        Ok(Self { columns })
    }

    pub fn n_images(&self) -> usize {
        self.columns.ncols()
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn image(&self, i: usize) -> DVectorView<'_, T> {
        self.columns.column(i)
    }

    /// The `d x N` matrix, column per image.
    pub fn columns(&self) -> &DMatrix<T> {
        &self.columns
    }

    pub fn to_rows(&self) -> DMatrix<T> {
        self.columns.transpose()
    }

    /// New matrix holding the listed images, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(ZslError::contract("selection of zero images"));
        }
        Ok(Self {
            columns: self.columns.select_columns(indices),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Attributes,
    Distributed,
}

/// Per-class side information, `C x a`. Stored with one column per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding<T: Scalar> {
    columns: DMatrix<T>,
    kind: EmbeddingKind,
}

impl<T: Scalar> ClassEmbedding<T> {
    /// Builds from a `C x a` matrix (row per class).
    pub fn from_rows(rows: DMatrix<T>, kind: EmbeddingKind) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(ZslError::contract("class embedding needs C >= 1 and a >= 1"));
        }
        for (c, row) in rows.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ZslError::contract(format!("non-finite embedding for class {c}")));
            }
            if row.iter().all(|v| *v == T::zero()) {
                return Err(ZslError::contract(format!("all-zero embedding for class {c}")));
            }
            if kind == EmbeddingKind::Attributes
                && row.iter().any(|v| *v < T::zero() || *v > T::one())
            {
                return Err(ZslError::contract(format!(
                    "attribute embedding for class {c} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            columns: rows.transpose(),
            kind,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.columns.ncols()
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn class(&self, c: usize) -> DVectorView<'_, T> {
        self.columns.column(c)
    }

    /// `a x C` matrix, column per class.
    pub fn columns(&self) -> &DMatrix<T> {
        &self.columns
    }

    pub fn to_rows(&self) -> DMatrix<T> {
        self.columns.transpose()
    }

    /// `a x |classes|` matrix with the listed classes' embeddings as columns.
    pub fn select(&self, classes: &[usize]) -> DMatrix<T> {
        self.columns.select_columns(classes)
    }
}

/// Features with one class label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet<T: Scalar> {
    pub features: FeatureMatrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn new(features: FeatureMatrix<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        check_dim("labeled set labels", features.n_images(), labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(ZslError::contract(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Images whose label belongs to `classes`.
    pub fn restrict_to(&self, classes: &BTreeSet<usize>) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }
}

/// `θ(x)ᵀ W φ(y)`.
pub fn score_bilinear<T: Scalar>(
    x: DVectorView<'_, T>,
    w: &DMatrix<T>,
    y: DVectorView<'_, T>,
) -> Result<T> {
    check_dim("bilinear score (image)", w.nrows(), x.len())?;
    check_dim("bilinear score (class)", w.ncols(), y.len())?;
    Ok((w.tr_mul(&x)).dot(&y))
}

/// A trained model that assigns a compatibility score to image/class pairs.
pub trait Scorer<T: Scalar> {
    /// One score per candidate, in candidate order; higher is more compatible.
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>>;

    /// Scores for every image in `xs`, `n x |candidates|`.
    fn score_matrix(
        &self,
        xs: &FeatureMatrix<T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<DMatrix<T>> {
        let mut out = DMatrix::zeros(xs.n_images(), candidates.len());
        for i in 0..xs.n_images() {
            let s = self.scores(xs.image(i), candidates, embeddings)?;
            for (j, v) in s.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

/// Plain bilinear compatibility `θᵀWφ`; the trained form of DEVISE, ALE, SJE
/// and ESZSL.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearModel<T: Scalar> {
    /// `d x a`
    pub w: DMatrix<T>,
}

impl<T: Scalar> Scorer<T> for BilinearModel<T> {
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        check_dim("bilinear model (image)", self.w.nrows(), x.len())?;
        check_dim("bilinear model (class)", self.w.ncols(), embeddings.dim())?;
        let projected = self.w.tr_mul(&x);
        Ok(candidates
            .iter()
            .map(|&c| projected.dot(&embeddings.class(c)))
            .collect())
    }
}

fn compare_desc<T: Scalar>(a: (T, usize), b: (T, usize)) -> Ordering {
    // NaN ranks last; equal scores fall back to the lower class id.
    #[allow(clippy::eq_op)]
    let (a_nan, b_nan) = (a.0 != a.0, b.0 != b.0);
    match (a_nan, b_nan) {
        (false, false) => b
            .0
            .partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1)),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (true, true) => a.1.cmp(&b.1),
    }
}

/// Candidate classes ordered by descending score, ties by ascending class id.
pub fn rank_candidates<T: Scalar>(scores: &[T], candidates: &[usize]) -> Vec<usize> {
    let mut order: Vec<(T, usize)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    order.sort_by(|a, b| compare_desc(*a, *b));
    order.into_iter().map(|(_, c)| c).collect()
}

/// Class with the highest score; ties go to the lowest class id.
pub fn argmax_class<T: Scalar>(scores: &[T], candidates: &[usize]) -> Result<usize> {
    check_dim("argmax scores", candidates.len(), scores.len())?;
    scores
        .iter()
        .copied()
        .zip(candidates.iter().copied())
        .min_by(|a, b| compare_desc(*a, *b))
        .map(|(_, c)| c)
        .ok_or_else(|| ZslError::contract("empty candidate set"))
}

/// Top `k` classes by score with the same tie rule as [`argmax_class`].
pub fn topk_classes<T: Scalar>(scores: &[T], candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    check_dim("top-k scores", candidates.len(), scores.len())?;
    if k == 0 || k > candidates.len() {
        return Err(ZslError::contract(format!(
            "k = {k} outside 1..={}",
            candidates.len()
        )));
    }
    let mut ranked = rank_candidates(scores, candidates);
    ranked.truncate(k);
    Ok(ranked)
}

pub fn predict_argmax<T: Scalar, S: Scorer<T> + ?Sized>(
    x: DVectorView<'_, T>,
    model: &S,
    candidates: &[usize],
    embeddings: &ClassEmbedding<T>,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(ZslError::contract("empty candidate set"));
    }
    let scores = model.scores(x, candidates, embeddings)?;
    argmax_class(&scores, candidates)
}

pub fn predict_topk<T: Scalar, S: Scorer<T> + ?Sized>(
    x: DVectorView<'_, T>,
    model: &S,
    candidates: &[usize],
    embeddings: &ClassEmbedding<T>,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 || k > candidates.len() {
        return Err(ZslError::contract(format!(
            "k = {k} outside 1..={}",
            candidates.len()
        )));
    }
    let scores = model.scores(x, candidates, embeddings)?;
    topk_classes(&scores, candidates, k)
}

/// Cosine similarity; zero vectors are rejected.
pub fn cosine<T: Scalar>(a: DVectorView<'_, T>, b: DVectorView<'_, T>) -> Result<T> {
    check_dim("cosine", a.len(), b.len())?;
    let na = a.norm();
    let nb = b.norm();
    if na == T::zero() || nb == T::zero() {
        return Err(ZslError::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}
