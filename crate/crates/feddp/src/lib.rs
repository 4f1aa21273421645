//! Federated SGD with client-side differential privacy, plus a planner that
//! minimizes the convergence-rate upper bound U(T, b) to pick the total
//! round count T* and per-round participation b*.

pub mod bounds;
pub mod data;
pub mod dp;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod seeding;
pub mod validation;

pub use error::{FedDpError, Result};
