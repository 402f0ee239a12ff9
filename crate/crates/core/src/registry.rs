//! Method ids, default hyperparameter grids, fitting, validation-driven grid
//! search and the end-to-end run protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVectorView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageRole, SplitSpec};
use crate::error::{Result, ZslError};
use crate::eval::{evaluate_zsl, gzsl_from_scores, zsl_from_scores, EvalReport, Mode};
use crate::methods::attr::{attribute_priors, binarize_attributes, dap_fit, iap_fit, DapModel, IapModel};
use crate::methods::compat::{
    eszsl_solve, ranking_train, sae_solve, EszslConfig, RankingLossSpec, SaeConfig, SaeDirection, SaeModel,
};
use crate::methods::generative::{gfzsl_fit, gfzsl_refine, GfzslModel};
use crate::methods::hybrid::{conse_fit, sse_fit, sync_fit, ConseModel, SseModel, SyncModel};
use crate::methods::nonlinear::{
    calibrate_threshold, cmt_novelty_score, cmt_train, latem_train, seen_centroids, CmtModel, CmtWeights,
    LatemModel, Novelty,
};
use crate::model::{BilinearModel, ClassEmbedding, FeatureMatrix, LabeledSet, Scorer};
use crate::persist::{CompatModel, Persist};
use crate::scalar::Scalar;
use crate::sgd::TrainConfig;
use crate::transductive::{ale_tran, dsrl_propagate, mean_knn_distance, PropagationConfig};

pub type Hyper = BTreeMap<String, f64>;
pub type Grid = BTreeMap<String, Vec<f64>>;

/// Fraction of each training class held out to calibrate the CMT* novelty
/// threshold.
pub const CMT_CALIBRATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodId {
    Devise,
    Ale,
    Sje,
    Eszsl,
    Sae,
    Latem,
    Cmt,
    CmtStar,
    Dap,
    Iap,
    Sse,
    Conse,
    Sync,
    Gfzsl,
    AleTran,
    GfzslTran,
    Dsrl,
}

impl MethodId {
    pub const ALL: [MethodId; 17] = [
        MethodId::Devise,
        MethodId::Ale,
        MethodId::Sje,
        MethodId::Eszsl,
        MethodId::Sae,
        MethodId::Latem,
        MethodId::Cmt,
        MethodId::CmtStar,
        MethodId::Dap,
        MethodId::Iap,
        MethodId::Sse,
        MethodId::Conse,
        MethodId::Sync,
        MethodId::Gfzsl,
        MethodId::AleTran,
        MethodId::GfzslTran,
        MethodId::Dsrl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Devise => "devise",
            MethodId::Ale => "ale",
            MethodId::Sje => "sje",
            MethodId::Eszsl => "eszsl",
            MethodId::Sae => "sae",
            MethodId::Latem => "latem",
            MethodId::Cmt => "cmt",
            MethodId::CmtStar => "cmt*",
            MethodId::Dap => "dap",
            MethodId::Iap => "iap",
            MethodId::Sse => "sse",
            MethodId::Conse => "conse",
            MethodId::Sync => "sync",
            MethodId::Gfzsl => "gfzsl",
            MethodId::AleTran => "ale-tran",
            MethodId::GfzslTran => "gfzsl-tran",
            MethodId::Dsrl => "dsrl",
        }
    }

    pub fn is_transductive(self) -> bool {
        matches!(self, MethodId::AleTran | MethodId::GfzslTran | MethodId::Dsrl)
    }

    /// Trained with per-sample SGD and validation early stopping.
    pub fn uses_sgd(self) -> bool {
        matches!(
            self,
            MethodId::Devise
                | MethodId::Ale
                | MethodId::Sje
                | MethodId::Latem
                | MethodId::Cmt
                | MethodId::CmtStar
                | MethodId::AleTran
        )
    }

    pub fn check_mode(self, mode: Mode) -> Result<()> {
        let ok = match (self, mode) {
            (m, Mode::Transductive) => m.is_transductive(),
            (m, _) if m.is_transductive() => false,
            (MethodId::CmtStar, m) => m == Mode::Gzsl,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(ZslError::Configuration(format!(
                "method `{}` does not support mode `{}`",
                self.as_str(),
                mode.as_str()
            )))
        }
    }

    pub fn default_grid(self) -> Grid {
        let g = |entries: &[(&str, &[f64])]| -> Grid {
            entries.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
        };
        let sgd: &[(&str, &[f64])] = &[("lr", &[0.001, 0.01]), ("epochs", &[100.0]), ("patience", &[10.0])];
        let logreg: &[(&str, &[f64])] = &[("l2", &[1e-3, 1e-2, 1e-1])];
        let decades: &[f64] = &[1e-2, 1e-1, 1.0, 10.0, 100.0];
        let prop: &[(&str, &[f64])] = &[("knn", &[10.0]), ("sigma_scale", &[1.0]), ("alpha", &[0.5, 0.9])];
        let join = |a: &[(&str, &[f64])], b: &[(&str, &[f64])]| -> Grid {
            let mut out = g(a);
            out.extend(g(b));
            out
        };
        match self {
            MethodId::Devise | MethodId::Ale | MethodId::Sje => g(sgd),
            MethodId::AleTran => join(sgd, prop),
            MethodId::Eszsl => g(&[("gamma", decades), ("lambda", decades)]),
            MethodId::Dsrl => join(&[("gamma", decades), ("lambda", decades)], prop),
            MethodId::Sae => g(&[("lambda", &[0.1, 1.0, 10.0, 100.0, 1000.0]), ("direction", &[0.0, 1.0])]),
            MethodId::Latem => join(sgd, &[("k", &[2.0, 4.0, 6.0])]),
            MethodId::Cmt => join(sgd, &[("hidden", &[50.0])]),
            MethodId::CmtStar => join(sgd, &[("hidden", &[50.0]), ("rate", &[0.05])]),
            MethodId::Dap | MethodId::Iap | MethodId::Sse => g(logreg),
            MethodId::Conse => join(logreg, &[("t", &[10.0])]),
            MethodId::Sync => join(logreg, &[("sigma", &[0.5, 1.0, 2.0])]),
            MethodId::Gfzsl => g(&[("ridge", &[1e-3, 1e-2, 1e-1, 1.0])]),
            MethodId::GfzslTran => g(&[("ridge", &[1e-3, 1e-2, 1e-1, 1.0]), ("em_iters", &[50.0])]),
        }
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodId {
    type Err = ZslError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let norm = if lower == "cmt-star" { "cmt*" } else { lower.as_str() };
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| ZslError::UnknownMethod(s.to_string()))
    }
}

/// Cartesian product of a grid; keys vary in sorted order, the last fastest.
pub fn expand_grid(grid: &Grid) -> Vec<Hyper> {
    let mut out = vec![Hyper::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for h in &out {
            for &v in values {
                let mut h = h.clone();
                h.insert(key.clone(), v);
                next.push(h);
            }
        }
        out = next;
    }
    out
}

fn hp(h: &Hyper, key: &str, default: f64) -> f64 {
    h.get(key).copied().unwrap_or(default)
}

fn hp_usize(h: &Hyper, key: &str, default: usize) -> Result<usize> {
    let v = hp(h, key, default as f64);
    if !(v >= 0.0 && v.fract() == 0.0) {
        return Err(ZslError::Configuration(format!(
            "hyperparameter `{key}` must be a non-negative integer, got {v}"
        )));
    }
    Ok(v as usize)
}

fn sgd_config(h: &Hyper, seed: u64, epochs: Option<usize>) -> Result<TrainConfig> {
    Ok(TrainConfig {
        learning_rate: hp(h, "lr", 0.01),
        max_epochs: match epochs {
            Some(e) => e,
            None => hp_usize(h, "epochs", 100)?,
        },
        patience: hp_usize(h, "patience", 10)?,
        seed,
        init_scale: hp(h, "init_scale", 1.0),
        reg: BTreeMap::new(),
    })
}

fn solver_config(h: &Hyper, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        max_epochs: hp_usize(h, "iters", 200)?,
        seed,
        ..TrainConfig::default()
    })
}

/// A trained model of any registered method.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel<T: Scalar> {
    Bilinear(BilinearModel<T>),
    Sae(SaeModel<T>),
    Latem(LatemModel<T>),
    Cmt(CmtModel<T>),
    Dap(DapModel<T>),
    Iap(IapModel<T>),
    Sse(SseModel<T>),
    Conse(ConseModel<T>),
    Sync(SyncModel<T>),
    Gfzsl(GfzslModel<T>),
}

impl<T: Scalar> Scorer<T> for TrainedModel<T> {
    fn scores(
        &self,
        x: DVectorView<'_, T>,
        candidates: &[usize],
        embeddings: &ClassEmbedding<T>,
    ) -> Result<Vec<T>> {
        match self {
            TrainedModel::Bilinear(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Sae(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Latem(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Cmt(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Dap(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Iap(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Sse(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Conse(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Sync(m) => m.scores(x, candidates, embeddings),
            TrainedModel::Gfzsl(m) => m.scores(x, candidates, embeddings),
        }
    }
}

impl<T: Scalar> TrainedModel<T> {
    pub fn to_compat(&self, method: MethodId, seed: u64, hyper: &Hyper) -> CompatModel {
        let mut out = CompatModel::new(method.as_str(), seed, hyper.clone());
        match self {
            TrainedModel::Bilinear(m) => m.write_blocks(&mut out),
            TrainedModel::Sae(m) => m.write_blocks(&mut out),
            TrainedModel::Latem(m) => m.write_blocks(&mut out),
            TrainedModel::Cmt(m) => m.write_blocks(&mut out),
            TrainedModel::Dap(m) => m.write_blocks(&mut out),
            TrainedModel::Iap(m) => m.write_blocks(&mut out),
            TrainedModel::Sse(m) => m.write_blocks(&mut out),
            TrainedModel::Conse(m) => m.write_blocks(&mut out),
            TrainedModel::Sync(m) => m.write_blocks(&mut out),
            TrainedModel::Gfzsl(m) => m.write_blocks(&mut out),
        }
        out
    }

    pub fn from_compat(model: &CompatModel) -> Result<Self> {
        let method: MethodId = model.method.parse()?;
        Ok(match method {
            MethodId::Devise | MethodId::Ale | MethodId::Sje | MethodId::Eszsl | MethodId::AleTran | MethodId::Dsrl => {
                TrainedModel::Bilinear(Persist::<T>::read_blocks(model)?)
            }
            MethodId::Sae => TrainedModel::Sae(Persist::<T>::read_blocks(model)?),
            MethodId::Latem => TrainedModel::Latem(Persist::<T>::read_blocks(model)?),
            MethodId::Cmt | MethodId::CmtStar => TrainedModel::Cmt(Persist::<T>::read_blocks(model)?),
            MethodId::Dap => TrainedModel::Dap(Persist::<T>::read_blocks(model)?),
            MethodId::Iap => TrainedModel::Iap(Persist::<T>::read_blocks(model)?),
            MethodId::Sse => TrainedModel::Sse(Persist::<T>::read_blocks(model)?),
            MethodId::Conse => TrainedModel::Conse(Persist::<T>::read_blocks(model)?),
            MethodId::Sync => TrainedModel::Sync(Persist::<T>::read_blocks(model)?),
            MethodId::Gfzsl | MethodId::GfzslTran => TrainedModel::Gfzsl(Persist::<T>::read_blocks(model)?),
        })
    }

    /// The model used for validation scoring: CMT* without its novelty router.
    fn inductive_view(&self) -> std::borrow::Cow<'_, Self> {
        match self {
            TrainedModel::Cmt(m) if m.novelty.is_some() => std::borrow::Cow::Owned(TrainedModel::Cmt(CmtModel {
                weights: m.weights.clone(),
                novelty: None,
            })),
            other => std::borrow::Cow::Borrowed(other),
        }
    }
}

/// Labeled images of the validation classes, treated as unseen.
pub struct Validation<'a, T: Scalar> {
    pub data: &'a LabeledSet<T>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Fitted<T: Scalar> {
    pub model: TrainedModel<T>,
    /// SGD epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

fn zsl_top1<T: Scalar, S: Scorer<T> + ?Sized>(
    model: &S,
    data: &LabeledSet<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<f64> {
    Ok(evaluate_zsl(model, data, classes, emb, 1)?.acc_ts)
}

fn with_metric<T, P, M, R>(
    val: Option<&Validation<'_, T>>,
    emb: &ClassEmbedding<T>,
    build: impl Fn(&P) -> M,
    train: impl FnOnce(Option<&mut dyn FnMut(&P) -> Result<f64>>) -> R,
) -> R
where
    T: Scalar,
    M: Scorer<T>,
{
    match val {
        Some(v) => {
            let mut metric = |p: &P| zsl_top1(&build(p), v.data, &v.classes, emb);
            train(Some(&mut metric))
        }
        None => train(None),
    }
}

/// Splits off `fraction` of each class (at least one image stays in the
/// fitting part). Returns (fit, calibration) index lists.
fn per_class_holdout(labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let (mut fit, mut cal) = (Vec::new(), Vec::new());
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n_cal = ((idx.len() as f64 * fraction).round() as usize).min(idx.len() - 1);
        cal.extend_from_slice(&idx[..n_cal]);
        fit.extend_from_slice(&idx[n_cal..]);
    }
    fit.sort_unstable();
    cal.sort_unstable();
    (fit, cal)
}

/// Fits `method` on `train` (all its classes are the training classes).
/// With `val`, SGD methods stop early on validation per-class top-1; with
/// `epochs`, SGD runs exactly that many epochs.
pub fn fit<T: Scalar>(
    method: MethodId,
    hyper: &Hyper,
    train: &LabeledSet<T>,
    emb: &ClassEmbedding<T>,
    val: Option<&Validation<'_, T>>,
    seed: u64,
    epochs: Option<usize>,
) -> Result<Fitted<T>> {
    let classes = train.classes();
    if classes.is_empty() {
        return Err(ZslError::DegenerateData("no training images".into()));
    }
    let val = if epochs.is_some() { None } else { val };
    let bilinear = |w: &DMatrix<T>| BilinearModel { w: w.clone() };
    let out = match method {
        MethodId::Devise | MethodId::Ale | MethodId::Sje | MethodId::AleTran => {
            let spec = match method {
                MethodId::Devise => RankingLossSpec::devise(),
                MethodId::Sje => RankingLossSpec::sje(),
                _ => RankingLossSpec::ale(),
            };
            let cfg = sgd_config(hyper, seed, epochs)?;
            let o = with_metric(val, emb, bilinear, |m| ranking_train(train, emb, &classes, spec, &cfg, m))?;
            Fitted {
                model: TrainedModel::Bilinear(BilinearModel { w: o.params }),
                best_epoch: Some(o.best_epoch),
            }
        }
        MethodId::Eszsl | MethodId::Dsrl => {
            let cfg = EszslConfig {
                gamma: hp(hyper, "gamma", 1.0),
                lambda: hp(hyper, "lambda", 1.0),
            };
            let w = eszsl_solve(train, emb, &classes, cfg)?;
            Fitted { model: TrainedModel::Bilinear(BilinearModel { w }), best_epoch: None }
        }
        MethodId::Sae => {
            let w = sae_solve(train, emb, SaeConfig { lambda: hp(hyper, "lambda", 1.0) })?;
            let direction = if hp(hyper, "direction", 0.0) == 0.0 {
                SaeDirection::ToSemantic
            } else {
                SaeDirection::ToFeature
            };
            Fitted { model: TrainedModel::Sae(SaeModel { w, direction }), best_epoch: None }
        }
        MethodId::Latem => {
            let cfg = sgd_config(hyper, seed, epochs)?;
            let k = hp_usize(hyper, "k", 2)?;
            let o = with_metric(
                val,
                emb,
                |ws: &Vec<DMatrix<T>>| LatemModel { ws: ws.clone() },
                |m| latem_train(train, emb, &classes, k, &cfg, m),
            )?;
            Fitted {
                model: TrainedModel::Latem(LatemModel { ws: o.params }),
                best_epoch: Some(o.best_epoch),
            }
        }
        MethodId::Cmt => {
            let cfg = sgd_config(hyper, seed, epochs)?;
            let hidden = hp_usize(hyper, "hidden", 50)?;
            let o = with_metric(
                val,
                emb,
                |w: &CmtWeights<T>| CmtModel { weights: w.clone(), novelty: None },
                |m| cmt_train(train, emb, hidden, &cfg, m),
            )?;
            Fitted {
                model: TrainedModel::Cmt(CmtModel { weights: o.params, novelty: None }),
                best_epoch: Some(o.best_epoch),
            }
        }
        MethodId::CmtStar => {
            let cfg = sgd_config(hyper, seed, epochs)?;
            let hidden = hp_usize(hyper, "hidden", 50)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            let (fit_idx, cal_idx) = per_class_holdout(&train.labels, CMT_CALIBRATION_FRACTION, &mut rng);
            let fit_set = train.subset(&fit_idx)?;
            let o = with_metric(
                val,
                emb,
                |w: &CmtWeights<T>| CmtModel { weights: w.clone(), novelty: None },
                |m| cmt_train(&fit_set, emb, hidden, &cfg, m),
            )?;
            let centroids = seen_centroids(&o.params, &fit_set)?;
            let cal_scores = cal_idx
                .iter()
                .map(|&i| Ok(cmt_novelty_score(o.params.embed(train.features.image(i))?.as_view(), &centroids)))
                .collect::<Result<Vec<T>>>()?;
            let tau = calibrate_threshold(&cal_scores, hp(hyper, "rate", 0.05))?;
            Fitted {
                model: TrainedModel::Cmt(CmtModel {
                    weights: o.params,
                    novelty: Some(Novelty { centroids, tau }),
                }),
                best_epoch: Some(o.best_epoch),
            }
        }
        MethodId::Dap => {
            let bin = binarize_attributes(emb, &classes)?;
            let bank = dap_fit(train, &bin, hp(hyper, "l2", 1e-2), &solver_config(hyper, seed)?)?;
            Fitted { model: TrainedModel::Dap(DapModel { bank, attributes: bin }), best_epoch: None }
        }
        MethodId::Iap => {
            let bin = binarize_attributes(emb, &classes)?;
            let classifier = iap_fit(train, hp(hyper, "l2", 1e-2), &solver_config(hyper, seed)?)?;
            let priors = attribute_priors(&bin, &classes);
            Fitted {
                model: TrainedModel::Iap(IapModel { classifier, priors, attributes: bin }),
                best_epoch: None,
            }
        }
        MethodId::Sse => Fitted {
            model: TrainedModel::Sse(sse_fit(train, emb, hp(hyper, "l2", 1e-2), &solver_config(hyper, seed)?)?),
            best_epoch: None,
        },
        MethodId::Conse => {
            let t = hp_usize(hyper, "t", 10)?.clamp(1, classes.len());
            Fitted {
                model: TrainedModel::Conse(conse_fit(train, t, hp(hyper, "l2", 1e-2), &solver_config(hyper, seed)?)?),
                best_epoch: None,
            }
        }
        MethodId::Sync => {
            let f = sync_fit(
                train,
                emb,
                None,
                hp(hyper, "sigma", 1.0),
                hp(hyper, "l2", 1e-2),
                &solver_config(hyper, seed)?,
            )?;
            Fitted { model: TrainedModel::Sync(f.model), best_epoch: None }
        }
        MethodId::Gfzsl | MethodId::GfzslTran => Fitted {
            model: TrainedModel::Gfzsl(gfzsl_fit(train, emb, hp(hyper, "ridge", 1e-2))?),
            best_epoch: None,
        },
    };
    Ok(out)
}

fn propagation_config<T: Scalar>(hyper: &Hyper, points: &DMatrix<T>) -> Result<PropagationConfig<T>> {
    let n = points.nrows();
    if n < 2 {
        return Err(ZslError::DegenerateData("label propagation needs at least two pool images".into()));
    }
    let k = hp_usize(hyper, "knn", 10)?.clamp(1, n - 1);
    let scale = mean_knn_distance(points, k)?;
    let scale = if scale > T::zero() { scale } else { T::one() };
    Ok(PropagationConfig {
        k,
        sigma: scale * T::of(hp(hyper, "sigma_scale", 1.0)),
        alpha: T::of(hp(hyper, "alpha", 0.5)),
    })
}

/// Scores of every pool image against `candidates`. Transductive methods use
/// the whole pool (label propagation or EM) before scoring.
pub fn pool_scores<T: Scalar>(
    method: MethodId,
    hyper: &Hyper,
    model: &TrainedModel<T>,
    pool: &FeatureMatrix<T>,
    candidates: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<DMatrix<T>> {
    match (method, model) {
        (MethodId::AleTran, TrainedModel::Bilinear(m)) => {
            let projected = m.w.tr_mul(pool.columns()).transpose();
            let cfg = propagation_config(hyper, &projected)?;
            ale_tran(m, pool, candidates, emb, cfg)
        }
        (MethodId::Dsrl, TrainedModel::Bilinear(m)) => {
            let s0 = m.score_matrix(pool, candidates, emb)?;
            let cfg = propagation_config(hyper, &pool.to_rows())?;
            dsrl_propagate(&s0, pool, cfg)
        }
        (MethodId::GfzslTran, TrainedModel::Gfzsl(m)) => {
            let iters = hp_usize(hyper, "em_iters", 50)?;
            let (refined, _) = gfzsl_refine(m, pool, candidates, emb, iters, hp(hyper, "em_tol", 1e-6))?;
            refined.score_matrix(pool, candidates, emb)
        }
        (m, _) if m.is_transductive() => Err(ZslError::contract(format!(
            "model variant does not match method `{m}`"
        ))),
        _ => model.score_matrix(pool, candidates, emb),
    }
}

/// Per-class top-1 over `classes` for `data`, using the pool rule of the method.
pub fn validation_score<T: Scalar>(
    method: MethodId,
    hyper: &Hyper,
    model: &TrainedModel<T>,
    data: &LabeledSet<T>,
    classes: &[usize],
    emb: &ClassEmbedding<T>,
) -> Result<f64> {
    let view = model.inductive_view();
    let scores = pool_scores(method, hyper, &view, &data.features, classes, emb)?;
    Ok(zsl_from_scores(&scores, &data.labels, classes, 1, Mode::Zsl)?.acc_ts)
}

/// Everything tuning may read: train and validation partitions only.
#[derive(Clone, Debug)]
pub struct TuningView<T: Scalar> {
    pub train: LabeledSet<T>,
    pub val: LabeledSet<T>,
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
}

impl<T: Scalar> TuningView<T> {
    pub fn new(dataset: &Dataset<T>, split: &SplitSpec) -> Result<Self> {
        for (a, sa, b, sb) in [
            ("validation", &split.val, "test", &split.test),
            ("train", &split.train, "test", &split.test),
            ("train", &split.train, "validation", &split.val),
        ] {
            if let Some(c) = sa.intersection(sb).next() {
                return Err(ZslError::ProtocolViolation(format!(
                    "tuning refused: class {c} is in both the {a} and {b} sets"
                )));
            }
        }
        let train = dataset.with_roles(split, &[ImageRole::Train])?;
        let val = dataset.with_roles(split, &[ImageRole::Val])?;
        let view = Self {
            train_classes: train.classes(),
            val_classes: val.classes(),
            train,
            val,
        };
        if let Some(c) = view
            .train
            .labels
            .iter()
            .chain(&view.val.labels)
            .find(|l| split.test.contains(l))
        {
            return Err(ZslError::ProtocolViolation(format!(
                "tuning refused: an image of test class {c} reached the tuning partitions"
            )));
        }
        Ok(view)
    }

    pub fn inputs(&self) -> Vec<String> {
        vec![
            format!("train: {} images of classes {:?}", self.train.len(), self.train_classes),
            format!("val: {} images of classes {:?}", self.val.len(), self.val_classes),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hyper: Hyper,
    pub val_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

/// Evaluates every grid point on the validation classes, `jobs` at a time.
/// Returns the index of the best point (ties to the first) and all results.
pub fn tune<T: Scalar>(
    method: MethodId,
    view: &TuningView<T>,
    emb: &ClassEmbedding<T>,
    grid: &[Hyper],
    seed: u64,
    jobs: usize,
) -> Result<(usize, Vec<GridPoint>)> {
    if grid.is_empty() {
        return Err(ZslError::Configuration("empty hyperparameter grid".into()));
    }
    if view.val.is_empty() {
        if grid.len() > 1 {
            return Err(ZslError::Configuration(
                "a grid with several points needs validation classes".into(),
            ));
        }
        let point = GridPoint { hyper: grid[0].clone(), val_score: None, best_epoch: None, error: None };
        return Ok((0, vec![point]));
    }
    let val = Validation { data: &view.val, classes: view.val_classes.clone() };
    let evaluate = |h: &Hyper| -> Result<(f64, Option<usize>)> {
        let f = fit(method, h, &view.train, emb, Some(&val), seed, None)?;
        let s = validation_score(method, h, &f.model, &view.val, &view.val_classes, emb)?;
        Ok((s, f.best_epoch))
    };
    let results: Mutex<Vec<Option<GridPoint>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, grid.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() {
                    break;
                }
                let point = match evaluate(&grid[i]) {
                    Ok((s, e)) => GridPoint { hyper: grid[i].clone(), val_score: Some(s), best_epoch: e, error: None },
                    Err(err) => GridPoint {
                        hyper: grid[i].clone(),
                        val_score: None,
                        best_epoch: None,
                        error: Some(err.to_string()),
                    },
                };
                results.lock().unwrap()[i] = Some(point);
            });
        }
    });
    let points: Vec<GridPoint> = results.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
    let best = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.val_score.map(|s| (i, s)))
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        });
    match best {
        Some((i, _)) => Ok((i, points)),
        None => Err(ZslError::Configuration(format!(
            "every grid point failed; first error: {}",
            points[0].error.as_deref().unwrap_or("unknown")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub method: MethodId,
    pub mode: Mode,
    /// Defaults to the method's grid.
    pub grid: Option<Grid>,
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Refit on train + validation with the chosen hyperparameters.
    pub retrain: bool,
    pub jobs: usize,
}

impl RunOptions {
    pub fn new(method: MethodId, mode: Mode) -> Self {
        Self { method, mode, grid: None, seed: 0, ks: vec![1], retrain: true, jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub dataset_checksum: String,
    pub split_id: String,
    pub split_checksum: String,
    /// Every input read during hyperparameter selection.
    pub tuning_inputs: Vec<String>,
    pub final_fit_inputs: Vec<String>,
    pub evaluation_inputs: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome<T: Scalar> {
    pub reports: Vec<EvalReport>,
    pub chosen: Hyper,
    pub tuning: Vec<GridPoint>,
    pub final_epochs: Option<usize>,
    pub provenance: Provenance,
    pub model: TrainedModel<T>,
}

fn describe<T: Scalar>(name: &str, set: &LabeledSet<T>) -> String {
    format!("{name}: {} images of classes {:?}", set.len(), set.classes())
}

struct Trained<T: Scalar> {
    model: TrainedModel<T>,
    chosen: Hyper,
    tuning: Vec<GridPoint>,
    final_epochs: Option<usize>,
    tuning_inputs: Vec<String>,
    final_inputs: Vec<String>,
}

fn tune_and_fit<T: Scalar>(dataset: &Dataset<T>, split: &SplitSpec, opts: &RunOptions) -> Result<Trained<T>> {
    opts.method.check_mode(opts.mode)?;
    let view = TuningView::new(dataset, split)?;
    let grid = expand_grid(&opts.grid.clone().unwrap_or_else(|| opts.method.default_grid()));
    let (best, tuning) = tune(opts.method, &view, &dataset.embeddings, &grid, opts.seed, opts.jobs)?;
    let chosen = grid[best].clone();
    let emb = &dataset.embeddings;
    let (fitted, final_inputs, final_epochs) = if opts.retrain && !view.val.is_empty() {
        let all = dataset.with_roles(split, &[ImageRole::Train, ImageRole::Val])?;
        let epochs = tuning[best].best_epoch;
        let f = fit(opts.method, &chosen, &all, emb, None, opts.seed, epochs)?;
        (f, vec![describe("train+val", &all)], epochs)
    } else {
        let val = Validation { data: &view.val, classes: view.val_classes.clone() };
        let val = (!view.val.is_empty()).then_some(&val);
        let f = fit(opts.method, &chosen, &view.train, emb, val, opts.seed, None)?;
        let e = f.best_epoch;
        (f, view.inputs(), e)
    };
    Ok(Trained {
        model: fitted.model,
        chosen,
        tuning,
        final_epochs,
        tuning_inputs: view.inputs(),
        final_inputs,
    })
}

fn evaluate_split<T: Scalar>(
    method: MethodId,
    mode: Mode,
    hyper: &Hyper,
    model: &TrainedModel<T>,
    dataset: &Dataset<T>,
    split: &SplitSpec,
    ks: &[usize],
) -> Result<(Vec<EvalReport>, Vec<String>)> {
    let emb = &dataset.embeddings;
    let unseen_set = dataset.with_roles(split, &[ImageRole::TestUnseen])?;
    let unseen: Vec<usize> = split.test.iter().copied().collect();
    match mode {
        Mode::Zsl | Mode::Transductive => {
            let scores = pool_scores(method, hyper, model, &unseen_set.features, &unseen, emb)?;
            let reports = ks
                .iter()
                .map(|&k| zsl_from_scores(&scores, &unseen_set.labels, &unseen, k, mode))
                .collect::<Result<_>>()?;
            Ok((reports, vec![describe("test_unseen", &unseen_set)]))
        }
        Mode::Gzsl => {
            let seen_set = dataset.with_roles(split, &[ImageRole::TestSeen])?;
            if seen_set.is_empty() {
                return Err(ZslError::SplitRole(format!(
                    "split `{}` has no held-out seen images for GZSL",
                    split.id
                )));
            }
            let candidates: Vec<usize> = split.seen().union(&split.test).copied().collect();
            let s_seen = model.score_matrix(&seen_set.features, &candidates, emb)?;
            let s_unseen = model.score_matrix(&unseen_set.features, &candidates, emb)?;
            let reports = ks
                .iter()
                .map(|&k| gzsl_from_scores(&s_seen, &seen_set.labels, &s_unseen, &unseen_set.labels, &candidates, k))
                .collect::<Result<_>>()?;
            Ok((reports, vec![describe("test_seen", &seen_set), describe("test_unseen", &unseen_set)]))
        }
    }
}

/// Tunes on validation classes, optionally refits on train + validation, and
/// evaluates on the split's test roles once per `k`.
pub fn run<T: Scalar>(dataset: &Dataset<T>, split: &SplitSpec, opts: &RunOptions) -> Result<RunOutcome<T>> {
    let t = tune_and_fit(dataset, split, opts)?;
    let (reports, eval_inputs) =
        evaluate_split(opts.method, opts.mode, &t.chosen, &t.model, dataset, split, &opts.ks)?;
    let reports = reports
        .into_iter()
        .map(|r| r.with_meta(opts.method.as_str(), split.id.clone(), opts.seed, t.chosen.clone()))
        .collect();
    Ok(RunOutcome {
        reports,
        chosen: t.chosen,
        tuning: t.tuning,
        final_epochs: t.final_epochs,
        provenance: Provenance {
            dataset: dataset.name.clone(),
            dataset_checksum: dataset.checksum.clone(),
            split_id: split.id.clone(),
            split_checksum: split.checksum.clone(),
            tuning_inputs: t.tuning_inputs,
            final_fit_inputs: t.final_inputs,
            evaluation_inputs: eval_inputs,
        },
        model: t.model,
    })
}

/// Trains on `train_ds` under `train_split` and evaluates on the test roles
/// of `test_ds` under `test_split`.
pub fn cross_dataset<T: Scalar>(
    train_ds: &Dataset<T>,
    train_split: &SplitSpec,
    test_ds: &Dataset<T>,
    test_split: &SplitSpec,
    opts: &RunOptions,
) -> Result<RunOutcome<T>> {
    if train_ds.embeddings.dim() != test_ds.embeddings.dim()
        || train_ds.n_classes() != test_ds.n_classes()
        || train_ds.features.dim() != test_ds.features.dim()
    {
        return Err(ZslError::ProtocolViolation(format!(
            "datasets `{}` and `{}` differ in class count, embedding or feature dimension",
            train_ds.name, test_ds.name
        )));
    }
    let t = tune_and_fit(train_ds, train_split, opts)?;
    let (reports, eval_inputs) =
        evaluate_split(opts.method, opts.mode, &t.chosen, &t.model, test_ds, test_split, &opts.ks)?;
    let id = format!("{}:{}", train_split.id, test_split.id);
    let reports = reports
        .into_iter()
        .map(|r| r.with_meta(opts.method.as_str(), id.clone(), opts.seed, t.chosen.clone()))
        .collect();
    Ok(RunOutcome {
        reports,
        chosen: t.chosen,
        tuning: t.tuning,
        final_epochs: t.final_epochs,
        provenance: Provenance {
            dataset: format!("{}:{}", train_ds.name, test_ds.name),
            dataset_checksum: format!("{}:{}", train_ds.checksum, test_ds.checksum),
            split_id: id,
            split_checksum: format!("{}:{}", train_split.checksum, test_split.checksum),
            tuning_inputs: t.tuning_inputs.iter().map(|s| format!("{}: {s}", train_ds.name)).collect(),
            final_fit_inputs: t.final_inputs.iter().map(|s| format!("{}: {s}", train_ds.name)).collect(),
            evaluation_inputs: eval_inputs.iter().map(|s| format!("{}: {s}", test_ds.name)).collect(),
        },
        model: t.model,
    })
}
