//! # mipeaks
//!
//! Mutual-information trajectories over reasoning traces.
//!
//! - [`hsic`]: Gaussian-kernel HSIC estimates of `I[h_t; h_y]` per step.
//! - [`trajectory`]: MI-peak detection (`m_t > Q3 + tau * IQR`) and sequence statistics.
//! - [`bounds`]: exact verification of the lower/upper error bounds on discrete joints.
//! - [`toy`]: a small decoder-only transformer with token suppression,
//!   representation recycling and thinking-token test-time scaling.
//! - [`trace_io`]: the MITC binary trace container and CSV export.

pub mod bounds;
pub mod error;
pub mod hsic;
pub mod toy;
pub mod trace_io;
pub mod trajectory;

pub use error::{Error, Result};
