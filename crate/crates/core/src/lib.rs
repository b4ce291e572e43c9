//! Test-time adaptation of batch-normalized CNNs.
//!
//! The crate bundles a small CNN engine with exact manual gradients, the
//! mixed source/test batch-norm statistics machinery (with a dynamic mixing
//! coefficient and the affine re-parameterization), the generalized
//! entropy-minimization loss family, an episodic adaptation engine and a
//! synthetic multi-domain benchmark for leave-one-domain-out studies.

pub mod adapt;
pub mod augment;
pub mod bn;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gem;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use adapt::{AdaptConfig, AdaptMode, AdaptReport, Batch, BatchRecord, Method, StreamResult};
pub use augment::AugmentConfig;
pub use bn::{AlphaRecord, BnLayerState, BnMode, ChannelStats, MeanStd};
pub use error::{Error, Result};
pub use experiment::{SweepConfig, SweepKind, SweepRow, SummaryRow};
pub use gem::{GemConfig, GemVariant, LossResult};
pub use nn::{Architecture, ForwardMode, Gradients, LayerSpec, Model, ParamSnapshot};
pub use tensor::{DType, Real, Tensor};
