//! Desk-scale multi-task policy serving: a frozen encoder/action-head
//! backbone, one low-rank expert per task, an on-disk expert library, and a
//! manager that routes instructions and hot-swaps experts by merge/restore.

pub mod backbone;
pub mod error;
pub mod lora;
pub mod manager;
pub mod registry;
pub mod store;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
