//! Toy-scale benchmark harness for online test-time adaptation (TTA).
//!
//! The crate is organized around six subsystems:
//!
//! * [`model`] — the adaptable model abstraction: small MLP/conv nets with
//!   batch/group/layer normalization, manual forward/backward, parameter
//!   groups, and exact snapshot/restore of full model state.
//! * [`streams`] — synthetic shifted test streams: corruption severities,
//!   Dirichlet label-skewed slots, spurious-correlation tasks, and
//!   non-stationary slot concatenations.
//! * [`methods`] — the adaptation strategies (BN statistics adaptation,
//!   entropy minimization, pseudo-labeling, template adjustment, auxiliary
//!   self-supervision, marginal-entropy, reservoir-buffered and
//!   teacher/student variants) plus composable regularizers.
//! * [`selection`] — per-batch oracle model selection, last-iterate
//!   baselines, the episodic/online evaluation protocols, and grid search.
//! * [`pretrain`] — source-domain training: the toy model zoo, augmentation
//!   policies, checkpoint sequences, and classifier fine-tuning.
//! * [`harness`] — sweep runner, run records, persistence, and reports.

pub mod harness;
pub mod methods;
pub mod model;
pub mod num;
pub mod pretrain;
pub mod selection;
pub mod streams;
