//! Discriminative PLDA speaker-verification backend with condition-aware
//! calibration.
//!
//! The scoring path (projection, length normalization, PLDA, score form),
//! the metrics and the calibration maps are generic over the scalar type;
//! the aliases below fix them to `f64`, which every trainer uses.

pub mod calibration;
pub mod condition_net;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod plda;
pub mod store;
pub mod synth;
pub mod trainer;

pub use calibration::{calibrate, train_global_calibration};
pub use condition_net::{train_condition_net, CnetConfig, ConditionNet};
pub use data::{
    build_trials, load_dataset, save_dataset, Dataset, ScoreSet, SegmentRecord, Trial, TrialLabel,
    TrialPolicy, TrialSet,
};
pub use error::{Error, Result};
pub use metrics::{cllr, eer, evaluate, pav_min_cllr, EvalReport};
pub use plda::{project_dataset, score_trial, to_score_form, train_lda, train_plda_em};
pub use synth::{generate, SynthSpec};
pub use trainer::{
    initialize, multiseed_train, train, BackendConfig, BackendModel, CalMode, TrainConfig,
};

pub type Projection = plda::Projection<f64>;
pub type GaussianPlda = plda::GaussianPlda<f64>;
pub type ScoreForm = plda::ScoreForm<f64>;
pub type GlobalCalibration = calibration::GlobalCalibration<f64>;
pub type MetaCalibration = calibration::MetaCalibration<f64>;
pub type PavMapping = metrics::PavMapping<f64>;

/// Single-precision variants of the generic scoring types.
pub mod f32 {
    pub type Projection = crate::plda::Projection<f32>;
    pub type GaussianPlda = crate::plda::GaussianPlda<f32>;
    pub type ScoreForm = crate::plda::ScoreForm<f32>;
    pub type GlobalCalibration = crate::calibration::GlobalCalibration<f32>;
}
