//! Zeroth-order optimization viewed through its kernel.
//!
//! Two-point gradient estimators, the neural zeroth-order kernel (per sample,
//! Monte Carlo expectation and closed forms), linearized networks, and the
//! closed-form function-space dynamics they induce.

pub mod datasets;
pub mod directions;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod stats;
pub mod zo;

pub use datasets::{Dataset, DatasetMeta, MnistOptions, TeacherSpec};
pub use directions::{match_scale, DirectionSpec, Family, Moments, SampleMode};
pub use dynamics::{ClosedFormTrajectory, SpectralDecomposition};
pub use error::{NzkError, Result};
pub use kernels::{KernelKind, KernelMatrix, KernelMeta, McKernel};
pub use models::{Activation, LinearModel, LinearizedModel, Mlp, Model, Perturbation, TwoLayerLinear};
pub use zo::{Loss, TrainConfig, TrainMode, Trajectory};
