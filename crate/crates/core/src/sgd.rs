//! Seeded per-sample SGD with validation-driven early stopping.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ZslError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Multiplier on the initial bilinear matrices (ranking losses, LATEM).
    #[serde(default = "one")]
    pub init_scale: f64,
    /// Method-specific regularization constants.
    #[serde(default)]
    pub reg: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            init_scale: 1.0,
            reg: BTreeMap::new(),
        }
    }
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ZslError::Configuration(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(ZslError::Configuration(format!(
                "init scale must be non-negative, got {}",
                self.init_scale
            )));
        }
        if let Some((k, v)) = self.reg.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(ZslError::Configuration(format!(
                "regularization constant `{k}` must be non-negative, got {v}"
            )));
        }
        Ok(())
    }

    pub fn reg_or(&self, name: &str, default: f64) -> f64 {
        self.reg.get(name).copied().unwrap_or(default)
    }
}

/// Generator for a given epoch: the master seed with the epoch as stream id.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

/// Generator for parameter initialization (stream 0 of the master seed).
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x cols` matrix, entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<T: Scalar>(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    // filled row-major so that the draw order does not depend on storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = T::of(rng.random_range(-bound..=bound));
        }
    }
    m
}

/// Parameter containers the trainer can check and snapshot.
pub trait Parameters: Clone {
    fn all_finite(&self) -> bool;
}

impl<T: Scalar> Parameters for DMatrix<T> {
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> Parameters for DVector<T> {
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn all_finite(&self) -> bool {
        self.iter().all(Parameters::all_finite)
    }
}

/// A loss decomposed over samples, updated one sample at a time.
pub trait SgdObjective<T: Scalar> {
    type Params: Parameters;

    fn n_samples(&self) -> usize;

    /// Applies one stochastic update for `sample` in place and returns that
    /// sample's loss before the update.
    fn step(&self, params: &mut Self::Params, sample: usize, lr: T, rng: &mut ChaCha8Rng) -> T;
}

#[derive(Clone, Debug)]
pub struct SgdOutcome<P> {
    pub params: P,
    /// Epoch at which `params` were captured (0 = initialization).
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub epochs_run: usize,
    /// Mean per-sample loss of every epoch run.
    pub epoch_losses: Vec<f64>,
}

/// Validation callback: higher is better.
pub type ValMetric<'a, P> = &'a mut dyn FnMut(&P) -> Result<f64>;

/// Runs SGD for up to `config.max_epochs` epochs. Each epoch visits every
/// sample once in an order shuffled by [`epoch_rng`]. With a validation
/// metric the best-scoring parameters are returned and training stops after
/// `patience` epochs without improvement; without one the last iterate is
/// returned. Epochs are compared by validation metric, then by lower mean
/// training loss, so a saturated metric does not pin the earliest epoch. The
/// initialization has no training loss and only survives a strict win.
pub fn sgd_train<T, O>(
    objective: &O,
    init: O::Params,
    config: &TrainConfig,
    mut val_metric: Option<ValMetric<'_, O::Params>>,
) -> Result<SgdOutcome<O::Params>>
where
    T: Scalar,
    O: SgdObjective<T>,
{
    config.validate()?;
    let lr = T::of(config.learning_rate);
    let mut params = init;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_metric = match val_metric.as_mut() {
        Some(f) => Some(f(&params)?),
        None => None,
    };
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut epoch_losses = Vec::new();
    let n = objective.n_samples();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.max_epochs {
        let mut rng = epoch_rng(config.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let loss = objective.step(&mut params, i, lr, &mut rng).as_f64();
            if !loss.is_finite() {
                return Err(ZslError::TrainingDiverged { epoch });
            }
            total += loss;
        }
        if !params.all_finite() {
            return Err(ZslError::TrainingDiverged { epoch });
        }
        let epoch_loss = if n == 0 { 0.0 } else { total / n as f64 };
        epoch_losses.push(epoch_loss);

        match val_metric.as_mut() {
            Some(f) => {
                let m = f(&params)?;
                if best_metric.is_none_or(|b| m > b || (m == b && epoch_loss < best_loss)) {
                    best_metric = Some(m);
                    best_loss = epoch_loss;
                    best = params.clone();
                    best_epoch = epoch;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        return Ok(SgdOutcome {
                            params: best,
                            best_epoch,
                            best_metric,
                            epochs_run: epoch,
                            epoch_losses,
                        });
                    }
                }
            }
            None => {
                best_epoch = epoch;
            }
        }
    }

    let epochs_run = epoch_losses.len();
    Ok(SgdOutcome {
        params: if val_metric.is_some() { best } else { params },
        best_epoch,
        best_metric,
        epochs_run,
        epoch_losses,
    })
}
