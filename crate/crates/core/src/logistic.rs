//! L2-regularized logistic regression: the binary fit behind attribute
//! classifiers and one-vs-rest seen-class classifiers, and the multinomial
//! (softmax) fit behind seen-class posteriors.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{check_dim, Result, ZslError};
use crate::model::{FeatureMatrix, LabeledSet};
use crate::optim::lbfgs;
use crate::persist::CompatModel;
use crate::scalar::Scalar;
use crate::sgd::TrainConfig;

/// Iteration cap used when a config asks for fewer solver steps than this.
const MIN_SOLVER_ITERS: usize = 200;

/// `log(1 + exp(t))` without overflow.
pub fn softplus<T: Scalar>(t: T) -> T {
    if t > T::zero() {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel<T: Scalar> {
    pub weights: DVector<T>,
    pub bias: T,
    /// Gradient norm of the regularized objective at the returned solution.
    pub grad_norm: T,
    pub converged: bool,
}

impl<T: Scalar> LogisticModel<T> {
    pub fn logit(&self, x: DVectorView<'_, T>) -> T {
        self.weights.dot(&x) + self.bias
    }

    pub fn probability(&self, x: DVectorView<'_, T>) -> T {
        sigmoid(self.logit(x))
    }

    pub fn write_blocks(&self, out: &mut CompatModel, prefix: &str) {
        out.push_vector(&format!("{prefix}.w"), &self.weights);
        out.push_scalar(&format!("{prefix}.b"), self.bias.as_f64());
    }

    pub fn read_blocks(model: &CompatModel, prefix: &str) -> Result<Self> {
        Ok(Self {
            weights: model.vector(&format!("{prefix}.w"))?,
            bias: T::of(model.scalar(&format!("{prefix}.b"))?),
            grad_norm: T::zero(),
            converged: true,
        })
    }
}

/// Objective `mean_i softplus(-s_i (wᵀx_i + b)) + (l2/2)||w||²` and its
/// gradient with respect to `[w; b]`; `s_i = ±1`. Bias is not penalized.
pub fn logistic_objective<T: Scalar>(
    features: &FeatureMatrix<T>,
    targets: &[bool],
    l2: T,
    params: &DVector<T>,
) -> (T, DVector<T>) {
    let d = features.dim();
    let n = T::from_usize_lossy(features.n_images());
    let w = params.rows(0, d);
    let b = params[d];
    let z = features.columns().tr_mul(&w);
    let mut loss = T::zero();
    // residual r_i = dloss_i/dz_i
    let mut r = DVector::zeros(z.len());
    for (i, &t) in targets.iter().enumerate() {
        let zi = z[i] + b;
        if t {
            loss += softplus(-zi);
            r[i] = sigmoid(zi) - T::one();
        } else {
            loss += softplus(zi);
            r[i] = sigmoid(zi);
        }
    }
    let mut grad = DVector::zeros(d + 1);
    let gw = (features.columns() * &r) / n + w * l2;
    grad.rows_mut(0, d).copy_from(&gw);
    grad[d] = r.sum() / n;
    let value = loss / n + l2 * w.norm_squared() / T::of(2.0);
    (value, grad)
}

/// Fits a binary L2-regularized logistic regression. `config.max_epochs`
/// bounds solver iterations (at least 200).
pub fn logistic_fit<T: Scalar>(
    features: &FeatureMatrix<T>,
    targets: &[bool],
    l2: T,
    config: &TrainConfig,
) -> Result<LogisticModel<T>> {
    check_dim("logistic targets", features.n_images(), targets.len())?;
    if !(l2 > T::zero()) {
        return Err(ZslError::Configuration("logistic l2 must be positive".into()));
    }
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 || positives == targets.len() {
        return Err(ZslError::DegenerateData(
            "logistic fit needs both target values".into(),
        ));
    }
    let d = features.dim();
    let tol_scale = T::of(T::SOLVER_TOL);
    let res = lbfgs(
        |p| logistic_objective(features, targets, l2, p),
        DVector::zeros(d + 1),
        config.max_epochs.max(MIN_SOLVER_ITERS) * 5,
        |p| tol_scale * (T::one() + p.rows(0, d).norm()),
    );
    Ok(LogisticModel {
        weights: res.x.rows(0, d).into_owned(),
        bias: res.x[d],
        grad_norm: res.grad_norm,
        converged: res.converged,
    })
}

/// Multinomial logistic regression over a fixed list of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier<T: Scalar> {
    /// Class ids in output order.
    pub classes: Vec<usize>,
    /// `C x d`
    pub weights: DMatrix<T>,
    pub bias: DVector<T>,
}

impl<T: Scalar> SoftmaxClassifier<T> {
    /// Posterior over `self.classes`; sums to one.
    pub fn posterior(&self, x: DVectorView<'_, T>) -> DVector<T> {
        let logits = &self.weights * x + &self.bias;
        softmax(&logits)
    }

    pub fn write_blocks(&self, out: &mut CompatModel, prefix: &str) {
        out.push_matrix(&format!("{prefix}.w"), &self.weights);
        out.push_vector(&format!("{prefix}.b"), &self.bias);
        let ids: DVector<f64> = DVector::from_iterator(
            self.classes.len(),
            self.classes.iter().map(|&c| c as f64),
        );
        out.push_vector(&format!("{prefix}.classes"), &ids);
    }

    pub fn read_blocks(model: &CompatModel, prefix: &str) -> Result<Self> {
        let ids: DVector<f64> = model.vector(&format!("{prefix}.classes"))?;
        Ok(Self {
            classes: ids.iter().map(|&c| c as usize).collect(),
            weights: model.matrix(&format!("{prefix}.w"))?,
            bias: model.vector(&format!("{prefix}.b"))?,
        })
    }
}

pub fn softmax<T: Scalar>(logits: &DVector<T>) -> DVector<T> {
    let m = logits.max();
    let e = logits.map(|v| (v - m).exp());
    let z = e.sum();
    e / z
}

/// Mean cross-entropy plus `(l2/2)||W||²` (bias unpenalized) and its
/// gradient, parameters flattened as `[vec(W); b]` with `W` column-major.
fn softmax_objective<T: Scalar>(
    data: &LabeledSet<T>,
    targets: &[usize],
    n_classes: usize,
    l2: T,
    params: &DVector<T>,
) -> (T, DVector<T>) {
    let d = data.features.dim();
    let w = DMatrix::from_column_slice(n_classes, d, &params.as_slice()[..n_classes * d]);
    let b = params.rows(n_classes * d, n_classes);
    let n = T::from_usize_lossy(data.len());
    let mut logits = &w * data.features.columns();
    for mut col in logits.column_iter_mut() {
        col += &b;
    }
    let mut loss = T::zero();
    for (i, mut col) in logits.column_iter_mut().enumerate() {
        let m = col.max();
        let target_logit = col[targets[i]];
        let mut z = T::zero();
        for v in col.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        col /= z;
        loss += m + z.ln() - target_logit;
        col[targets[i]] -= T::one();
    }
    // logits now holds P - Y
    let gw = (&logits * data.features.columns().transpose()) / n + &w * l2;
    let gb = logits.column_sum() / n;
    let mut grad = DVector::zeros(params.len());
    grad.rows_mut(0, n_classes * d).copy_from_slice(gw.as_slice());
    grad.rows_mut(n_classes * d, n_classes).copy_from(&gb);
    let value = loss / n + l2 * w.norm_squared() / T::of(2.0);
    (value, grad)
}

/// Fits a softmax classifier over the classes present in `data`.
pub fn softmax_fit<T: Scalar>(
    data: &LabeledSet<T>,
    l2: T,
    config: &TrainConfig,
) -> Result<SoftmaxClassifier<T>> {
    let classes = data.classes();
    if classes.len() < 2 {
        return Err(ZslError::DegenerateData(
            "multi-class classifier needs at least two classes".into(),
        ));
    }
    if !(l2 > T::zero()) {
        return Err(ZslError::Configuration("softmax l2 must be positive".into()));
    }
    let c = classes.len();
    let d = data.features.dim();
    let targets: Vec<usize> = data
        .labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label among classes"))
        .collect();
    let tol_scale = T::of(T::SOLVER_TOL);
    let res = lbfgs(
        |p| softmax_objective(data, &targets, c, l2, p),
        DVector::zeros(c * (d + 1)),
        config.max_epochs.max(MIN_SOLVER_ITERS) * 5,
        |p| tol_scale * (T::one() + p.norm()),
    );
    Ok(SoftmaxClassifier {
        classes,
        weights: DMatrix::from_column_slice(c, d, &res.x.as_slice()[..c * d]),
        bias: res.x.rows(c * d, c).into_owned(),
    })
}
