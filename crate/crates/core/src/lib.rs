//! Feed-forward networks trained to favour AND-like neurons, with the
//! supporting statistics (scrambled data sets, hyper-spread, saturation) and
//! FGSM/PGD robustness evaluation on MNIST-format data.

pub mod attacks;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod image;
pub mod measures;
pub mod network;
pub mod numerics;
pub mod scramble;
pub mod training;

pub use attacks::{AttackConfig, AttackKind, RobustnessReport};
pub use checkpoint::Checkpoint;
pub use dataset::{LabeledSet, Split};
pub use error::{Error, Result};
pub use measures::NeuronMeasures;
pub use network::{ActivationTrace, InitScheme, InputFilter, LayerParams, NetworkParams, ParamGrads};
pub use numerics::{Matrix, RngStream};
pub use scramble::{ScrambleType, ScrambledTrace};
pub use training::{EpochMetrics, TrainConfig, TrainOutcome};
