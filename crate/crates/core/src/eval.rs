//! Per-class top-k accuracy, the GZSL harmonic mean, Friedman rank matrices
//! and validation-split robustness sweeps.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{check_dim, Result, ZslError};
use crate::model::{rank_candidates, ClassEmbedding, LabeledSet, Scorer};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Zsl,
    Gzsl,
    #[serde(rename = "tran")]
    Transductive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Zsl => "zsl",
            Mode::Gzsl => "gzsl",
            Mode::Transductive => "tran",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = ZslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Mode::Zsl),
            "gzsl" => Ok(Mode::Gzsl),
            "tran" | "transductive" => Ok(Mode::Transductive),
            other => Err(ZslError::Configuration(format!("unknown mode `{other}`"))),
        }
    }
}

/// Evaluation result. Field order is the serialized order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: Mode,
    pub split_id: String,
    pub seed: u64,
    pub k: usize,
    /// Top-k accuracy of every evaluated class.
    pub per_class: BTreeMap<usize, f64>,
    /// Unseen-class accuracy (the only accuracy in ZSL mode).
    pub acc_ts: f64,
    pub acc_tr: Option<f64>,
    pub h: Option<f64>,
    pub hyperparameters: BTreeMap<String, f64>,
}

impl EvalReport {
    fn bare(mode: Mode, k: usize) -> Self {
        Self {
            method: String::new(),
            mode,
            split_id: String::new(),
            seed: 0,
            k,
            per_class: BTreeMap::new(),
            acc_ts: 0.0,
            acc_tr: None,
            h: None,
            hyperparameters: BTreeMap::new(),
        }
    }

    pub fn with_meta(
        mut self,
        method: impl Into<String>,
        split_id: impl Into<String>,
        seed: u64,
        hyperparameters: BTreeMap<String, f64>,
    ) -> Self {
        self.method = method.into();
        self.split_id = split_id.into();
        self.seed = seed;
        self.hyperparameters = hyperparameters;
        self
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(ZslError::contract("k must be at least 1"));
    }
    Ok(())
}

/// Per-image hit flags: label found among the first `k` predictions.
fn hits(topk: &[Vec<usize>], labels: &[usize], k: usize) -> Result<Vec<bool>> {
    check_k(k)?;
    check_dim("top-k lists", labels.len(), topk.len())?;
    Ok(topk
        .iter()
        .zip(labels)
        .map(|(list, y)| list.iter().take(k).any(|c| c == y))
        .collect())
}

/// Mean over `classes` of the fraction of each class's images whose label is
/// in the top `k`. Returns the mean and the per-class map.
pub fn per_class_topk(
    topk: &[Vec<usize>],
    labels: &[usize],
    classes: &[usize],
    k: usize,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    let hit = hits(topk, labels, k)?;
    let wanted: BTreeSet<usize> = classes.iter().copied().collect();
    if wanted.is_empty() {
        return Err(ZslError::contract("empty class set"));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = wanted.iter().map(|&c| (c, (0, 0))).collect();
    for (&y, &h) in labels.iter().zip(&hit) {
        let entry = counts
            .get_mut(&y)
            .ok_or_else(|| ZslError::contract(format!("label {y} outside the evaluated class set")))?;
        entry.0 += usize::from(h);
        entry.1 += 1;
    }
    let mut per_class = BTreeMap::new();
    for (c, (correct, total)) in counts {
        if total == 0 {
            return Err(ZslError::EvaluationCoverage { class: c });
        }
        per_class.insert(c, correct as f64 / total as f64);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

/// Plain fraction of images with the label in the top `k`.
pub fn per_image_topk(topk: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    let hit = hits(topk, labels, k)?;
    if hit.is_empty() {
        return Err(ZslError::contract("no images to evaluate"));
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64)
}

/// `2·tr·ts / (tr + ts)`, zero when both are zero.
pub fn harmonic_mean(acc_tr: f64, acc_ts: f64) -> f64 {
    if acc_tr + acc_ts == 0.0 {
        0.0
    } else {
        2.0 * acc_tr * acc_ts / (acc_tr + acc_ts)
    }
}

/// Full candidate ranking for every row of a score matrix whose columns follow
/// `candidates`.
pub fn rankings<T: Scalar>(scores: &DMatrix<T>, candidates: &[usize]) -> Result<Vec<Vec<usize>>> {
    check_dim("score columns", candidates.len(), scores.ncols())?;
    Ok(scores
        .row_iter()
        .map(|r| rank_candidates(&r.iter().copied().collect::<Vec<_>>(), candidates))
        .collect())
}

fn check_candidates(candidates: &[usize], k: usize) -> Result<()> {
    check_k(k)?;
    if k > candidates.len() {
        return Err(ZslError::contract(format!(
            "k = {k} exceeds {} candidates",
            candidates.len()
        )));
    }
    Ok(())
}

/// ZSL accuracy from precomputed scores over `unseen` (columns in that order).
pub fn zsl_from_scores<T: Scalar>(
    scores: &DMatrix<T>,
    labels: &[usize],
    unseen: &[usize],
    k: usize,
    mode: Mode,
) -> Result<EvalReport> {
    check_candidates(unseen, k)?;
    let ranked = rankings(scores, unseen)?;
    let (acc, per_class) = per_class_topk(&ranked, labels, unseen, k)?;
    Ok(EvalReport {
        per_class,
        acc_ts: acc,
        ..EvalReport::bare(mode, k)
    })
}

/// Scores the test images against the unseen classes only.
pub fn evaluate_zsl<T: Scalar, S: Scorer<T> + ?Sized>(
    model: &S,
    test: &LabeledSet<T>,
    unseen: &[usize],
    embeddings: &ClassEmbedding<T>,
    k: usize,
) -> Result<EvalReport> {
    check_candidates(unseen, k)?;
    let scores = model.score_matrix(&test.features, unseen, embeddings)?;
    zsl_from_scores(&scores, &test.labels, unseen, k, Mode::Zsl)
}

/// GZSL accuracy from precomputed scores: rows of `seen_scores` and
/// `unseen_scores` are the held-out seen and the unseen images, columns
/// follow `candidates` (seen and unseen classes together).
pub fn gzsl_from_scores<T: Scalar>(
    seen_scores: &DMatrix<T>,
    seen_labels: &[usize],
    unseen_scores: &DMatrix<T>,
    unseen_labels: &[usize],
    candidates: &[usize],
    k: usize,
) -> Result<EvalReport> {
    check_candidates(candidates, k)?;
    let seen_classes: Vec<usize> = seen_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let unseen_classes: Vec<usize> = unseen_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let all: BTreeSet<usize> = candidates.iter().copied().collect();
    if let Some(c) = seen_classes.iter().chain(&unseen_classes).find(|c| !all.contains(c)) {
        return Err(ZslError::contract(format!("label {c} is not a candidate")));
    }
    if seen_classes.iter().any(|c| unseen_classes.binary_search(c).is_ok()) {
        return Err(ZslError::contract("seen and unseen test images share a class"));
    }
    let (acc_tr, mut per_class) = per_class_topk(&rankings(seen_scores, candidates)?, seen_labels, &seen_classes, k)?;
    let (acc_ts, unseen_map) =
        per_class_topk(&rankings(unseen_scores, candidates)?, unseen_labels, &unseen_classes, k)?;
    per_class.extend(unseen_map);
    Ok(EvalReport {
        per_class,
        acc_ts,
        acc_tr: Some(acc_tr),
        h: Some(harmonic_mean(acc_tr, acc_ts)),
        ..EvalReport::bare(Mode::Gzsl, k)
    })
}

/// Scores held-out seen images and unseen images against every candidate
/// class; `acc_tr` averages over the seen classes present in `test_seen`,
/// `acc_ts` over the unseen classes present in `test_unseen`.
pub fn evaluate_gzsl<T: Scalar, S: Scorer<T> + ?Sized>(
    model: &S,
    test_seen: &LabeledSet<T>,
    test_unseen: &LabeledSet<T>,
    candidates: &[usize],
    embeddings: &ClassEmbedding<T>,
    k: usize,
) -> Result<EvalReport> {
    check_candidates(candidates, k)?;
    let seen_scores = model.score_matrix(&test_seen.features, candidates, embeddings)?;
    let unseen_scores = model.score_matrix(&test_unseen.features, candidates, embeddings)?;
    gzsl_from_scores(
        &seen_scores,
        &test_seen.labels,
        &unseen_scores,
        &test_unseen.labels,
        candidates,
        k,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub methods: Vec<String>,
    /// `methods x ranks`; entry `(i, r)` is the (fractional) number of
    /// observations in which method `i` took rank `r + 1`.
    pub counts: Vec<Vec<f64>>,
    pub observations: usize,
    pub mean_ranks: Vec<f64>,
    /// Method indices sorted by ascending mean rank.
    pub order: Vec<usize>,
}

/// Ranks methods per observation (column of `table`, higher accuracy first).
/// Tied methods share the average of the ranks they span and split their
/// unit mass evenly over those rank bins.
pub fn friedman_rank_matrix(methods: &[String], table: &[Vec<Option<f64>>]) -> Result<RankMatrix> {
    let m = methods.len();
    check_dim("rank table rows", m, table.len())?;
    if m == 0 {
        return Err(ZslError::contract("no methods to rank"));
    }
    let n_obs = table[0].len();
    if n_obs == 0 {
        return Err(ZslError::IncompleteObservation("no observations".into()));
    }
    let mut counts = vec![vec![0.0; m]; m];
    let mut rank_sum = vec![0.0; m];
    for obs in 0..n_obs {
        let mut column = Vec::with_capacity(m);
        for (i, row) in table.iter().enumerate() {
            match row.get(obs).copied().flatten() {
                Some(v) if v.is_finite() => column.push((i, v)),
                _ => {
                    return Err(ZslError::IncompleteObservation(format!(
                        "method `{}` has no result for observation {obs}",
                        methods[i]
                    )))
                }
            }
        }
        column.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut start = 0;
        while start < m {
            let mut end = start + 1;
            while end < m && column[end].1 == column[start].1 {
                end += 1;
            }
            let span = (end - start) as f64;
            // ranks start+1 ..= end
            let avg = (start + 1 + end) as f64 / 2.0;
            for &(i, _) in &column[start..end] {
                rank_sum[i] += avg;
                for bin in &mut counts[i][start..end] {
                    *bin += 1.0 / span;
                }
            }
            start = end;
        }
    }
    let mean_ranks: Vec<f64> = rank_sum.iter().map(|s| s / n_obs as f64).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| mean_ranks[a].partial_cmp(&mean_ranks[b]).unwrap().then(a.cmp(&b)));
    Ok(RankMatrix {
        methods: methods.to_vec(),
        counts,
        observations: n_obs,
        mean_ranks,
        order,
    })
}

/// Runs `evaluate` once per validation-split variant. All variants must share
/// the same test classes; tuning inside `evaluate` sees only that variant's
/// train and validation partitions.
pub fn robustness_sweep<F>(variants: &[SplitSpec], mut evaluate: F) -> Result<Vec<f64>>
where
    F: FnMut(&SplitSpec) -> Result<f64>,
{
    let first = variants
        .first()
        .ok_or_else(|| ZslError::contract("no split variants"))?;
    if let Some(v) = variants.iter().find(|v| v.test != first.test) {
        return Err(ZslError::ProtocolViolation(format!(
            "split `{}` has a different test class set than `{}`",
            v.id, first.id
        )));
    }
    variants.iter().map(&mut evaluate).collect()
}

/// Max minus min of a set of accuracies.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        max - min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lists(preds: &[usize]) -> Vec<Vec<usize>> {
        preds.iter().map(|&p| vec![p]).collect()
    }

    #[test]
    fn per_class_ignores_class_size() {
        let mut labels = vec![0; 1000];
        labels.extend(vec![1; 10]);
        let mut preds = vec![0; 1000];
        preds.extend(vec![0; 10]);
        let (acc, map) = per_class_topk(&lists(&preds), &labels, &[0, 1], 1).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(map[&0], 1.0);
        assert_eq!(map[&1], 0.0);

        let (acc, _) = per_class_topk(&lists(&[0, 1, 2]), &[0, 1, 2], &[0, 1, 2], 1).unwrap();
        assert_eq!(acc, 1.0);

        let (acc, _) = per_class_topk(&lists(&[0, 1, 0, 0]), &[0, 1, 1, 2], &[0, 1, 2], 1).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn coverage_and_label_errors() {
        let err = per_class_topk(&lists(&[0]), &[0], &[0, 3], 1).unwrap_err();
        assert!(matches!(err, ZslError::EvaluationCoverage { class: 3 }));
        assert!(per_class_topk(&lists(&[0]), &[5], &[0], 1).is_err());
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(0.331, 0.218) * 100.0 - 26.3).abs() <= 0.05);
        assert!((harmonic_mean(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.5, 0.5), 0.5);
        assert_eq!(harmonic_mean(0.7, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn friedman_examples() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = friedman_rank_matrix(&names, &[vec![Some(0.5)], vec![Some(0.3)], vec![Some(0.2)]]).unwrap();
        assert_eq!(r.mean_ranks, vec![1.0, 2.0, 3.0]);
        assert_eq!(r.counts, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);

        let r = friedman_rank_matrix(&names[..2], &[vec![Some(0.4)], vec![Some(0.4)]]).unwrap();
        assert_eq!(r.mean_ranks, vec![1.5, 1.5]);
        assert_eq!(r.counts, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);

        let err = friedman_rank_matrix(&names[..2], &[vec![Some(0.4)], vec![None]]).unwrap_err();
        assert!(matches!(err, ZslError::IncompleteObservation(_)));
    }

    #[test]
    fn gzsl_distractor_dominance() {
        // seen classes {0,1}, unseen {2}; every image predicted as a seen class
        let seen = DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 0.0, 1.0, 5.0, 0.0]);
        let unseen = DMatrix::from_row_slice(1, 3, &[5.0, 1.0, 0.0]);
        let r = gzsl_from_scores(&seen, &[0, 1], &unseen, &[2], &[0, 1, 2], 1).unwrap();
        assert_eq!(r.acc_tr, Some(1.0));
        assert_eq!(r.acc_ts, 0.0);
        assert_eq!(r.h, Some(0.0));
        // top-2 still misses, top-3 always hits
        let r = gzsl_from_scores(&seen, &[0, 1], &unseen, &[2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.h, Some(1.0));
    }

    proptest! {
        #[test]
        fn harmonic_bounds(tr in 0.0f64..=1.0, ts in 0.0f64..=1.0) {
            let h = harmonic_mean(tr, ts);
            prop_assert!(h <= (tr + ts) / 2.0 + 1e-15);
            prop_assert_eq!(h == 0.0, tr == 0.0 || ts == 0.0);
        }

        #[test]
        fn duplicating_a_class_keeps_per_class(
            data in proptest::collection::vec((0usize..4, 0usize..4), 4..40),
            dup in 0usize..4,
        ) {
            let mut labels: Vec<usize> = data.iter().map(|d| d.0).collect();
            let mut preds: Vec<usize> = data.iter().map(|d| d.1).collect();
            labels.extend(0..4);
            preds.extend(0..4);
            let (base, _) = per_class_topk(&lists(&preds), &labels, &[0, 1, 2, 3], 1).unwrap();
            let (mut l2, mut p2) = (labels.clone(), preds.clone());
            for (l, p) in labels.iter().zip(&preds) {
                if *l == dup {
                    for _ in 0..5 {
                        l2.push(*l);
                        p2.push(*p);
                    }
                }
            }
            let (dupped, _) = per_class_topk(&lists(&p2), &l2, &[0, 1, 2, 3], 1).unwrap();
            prop_assert!((base - dupped).abs() < 1e-12);
        }

        #[test]
        fn rank_matrix_sums(table in proptest::collection::vec(proptest::collection::vec(0u8..5, 6), 5)) {
            let names: Vec<String> = (0..5).map(|i| format!("m{i}")).collect();
            let t: Vec<Vec<Option<f64>>> = table.iter().map(|r| r.iter().map(|&v| Some(v as f64)).collect()).collect();
            let r = friedman_rank_matrix(&names, &t).unwrap();
            for row in &r.counts {
                prop_assert!((row.iter().sum::<f64>() - 6.0).abs() < 1e-9);
            }
            for j in 0..5 {
                prop_assert!((r.counts.iter().map(|row| row[j]).sum::<f64>() - 6.0).abs() < 1e-9);
            }
            for w in r.order.windows(2) {
                prop_assert!(r.mean_ranks[w[0]] <= r.mean_ranks[w[1]]);
            }
        }

        #[test]
        fn full_ranking_always_hits(scores in proptest::collection::vec(-5.0f64..5.0, 12), labels in proptest::collection::vec(0usize..3, 4)) {
            let s = DMatrix::from_row_slice(4, 3, &scores);
            let r = rankings(&s, &[0, 1, 2]).unwrap();
            prop_assert_eq!(per_image_topk(&r, &labels, 3).unwrap(), 1.0);
        }
    }
}
