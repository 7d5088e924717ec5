//! Desk-scale laboratory for sectionalized mixture-of-experts layers.
//!
//! * [`tensor`], [`counter`], [`adjoint`]: dense tensors with exact
//!   multiply-accumulate accounting and vector-Jacobian products.
//! * [`blocks`], [`gradcheck`]: transformer components and finite-difference
//!   verification of their adjoints.
//! * [`sectional`]: reduction layer, embedding split across experts, and
//!   aggregation.
//! * [`traditional`]: token-routed top-k baseline with capacity limits.
//! * [`cost`]: the analytic cost model and optimal expert count.
//! * [`audit`]: measured MAC counts checked against the cost model.

pub mod adjoint;
pub mod audit;
pub mod blocks;
pub mod cost;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod sectional;
pub mod tensor;
pub mod traditional;

pub use counter::{Category, CounterSnapshot, Meter, OpCounter};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
