//! Loss-dependent gradient weighting as a replacement for explicit data
//! augmentation, with the losses, transport solver, toy sequence model and
//! verification suites it is checked against.

pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod objective;
pub mod optimizer;
pub mod seq2seq;
pub mod suites;
pub mod training;
pub mod transport;

pub use corpus::{AugmentSide, AugmentSpec, SplitSizes, TaskKind, TaskSpec};
pub use diffcore::{ParamSet, RealArray, Tape, Var};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use objective::{GradientWeightRule, WeightKind};
pub use optimizer::{Schedule, SgdConfig};
pub use seq2seq::ModelConfig;
pub use training::{EpochRecord, EvalMetrics, Method, TrainConfig, TrainOutcome};
pub use transport::{IpotConfig, SentenceDistribution};
