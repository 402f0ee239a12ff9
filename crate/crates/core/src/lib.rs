//! Zero-shot learning benchmark toolkit.
//!
//! Thirteen zero-shot methods share one scoring contract ([`Scorer`]):
//! a trained model assigns a compatibility score to every (image, class)
//! pair and predicts the highest-scoring candidate. Evaluation follows a
//! single protocol: disjoint train/validation/test classes, per-class
//! averaged top-k accuracy, and the harmonic mean of seen and unseen
//! accuracy for the generalized setting.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod logistic;
pub mod methods;
pub mod model;
pub mod optim;
pub mod persist;
pub mod registry;
pub mod scalar;
pub mod sgd;
pub mod transductive;

pub use error::{Result, ZslError};
pub use model::{
    predict_argmax, predict_topk, score_bilinear, BilinearModel, ClassEmbedding, EmbeddingKind,
    FeatureMatrix, LabeledSet, Scorer,
};
pub use persist::{CompatModel, Persist};
pub use scalar::Scalar;
pub use sgd::{sgd_train, TrainConfig};

pub type Features = FeatureMatrix<f64>;
pub type Features32 = FeatureMatrix<f32>;
pub type Embeddings = ClassEmbedding<f64>;
pub type Embeddings32 = ClassEmbedding<f32>;
pub type Labeled = LabeledSet<f64>;
pub type Labeled32 = LabeledSet<f32>;
pub type Dataset = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
