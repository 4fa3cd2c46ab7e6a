//! Post-hoc temperature calibration for class-incremental learning.
//!
//! The crate trains a small dense classifier over a stream of class-disjoint
//! tasks with experience replay, then picks a softmax temperature without any
//! old-task validation data: memory exemplars are pushed by a targeted
//! sign-gradient step (old-task exemplars toward their closest class in
//! feature space, new-task exemplars toward their farthest), with the step
//! size chosen by bisection so that the new-task exemplars reproduce the
//! temperature fitted on the new-task validation split.
//!
//! Modules, bottom-up:
//!
//! - [`nnet`]: dense ReLU network with parameter and input gradients.
//! - [`datagen`]: synthetic Gaussian-blob and CSV task streams.
//! - [`cil`]: replay training loop and balanced exemplar memory.
//! - [`calib`]: softmax, NLL, temperature fitting, ECE and AECE.
//! - [`tcil`]: feature means, target selection, targeted FGSM, magnitude
//!   search and the full calibration procedure.
//! - [`experiment`]: config-driven runner, metric records and summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod cil;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod nnet;
pub mod tcil;

mod label;

pub use calib::{Probs, TempBounds, Temperature};
pub use cil::{IncrementalState, Memory, TrainConfig};
pub use datagen::{ClassRange, Sample, StreamConfig, TaskStream};
pub use error::{Error, Result};
pub use label::ClassId;
pub use nnet::{Matrix, MlpModel, Network};
pub use tcil::{DirectionPolicy, MagSearchConfig};
