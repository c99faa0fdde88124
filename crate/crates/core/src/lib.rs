//! Self-training laboratory for multi-digit addition.
//!
//! A small decoder-only byte model learns addition two ways at once: a fast
//! form that states the answer outright and a slow form that peels one digit
//! per step. Once the slow skill generalizes one length past the training
//! data, the model's own checked outputs become the training set and the
//! curriculum advances without ground truth. The crates here provide the
//! exact arithmetic oracle, the task templates, the learner, the consistency
//! filters that vet self-generated data, a closed-form simulated learner for
//! fast studies, and the run harness that ties them together.

pub mod config;
pub mod consistency;
pub mod curriculum;
pub mod decoding;
pub mod error;
pub mod learner;
pub mod model;
pub mod oracle;
pub mod run;
pub mod simlab;
pub mod taskfmt;

pub use error::{ArithError, LearnerError, RunError};
