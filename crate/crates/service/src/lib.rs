//! HTTP allocation service.
//!
//! * `POST /trials` creates a trial from a [`TrialConfig`](car_core::TrialConfig).
//! * `POST /trials/{id}/enrollments` assigns the next unit.
//! * `GET /trials/{id}/status` reports counts, imbalance and the last 20
//!   enrollments.
//!
//! Errors are `{code, field?, message}` JSON bodies.

mod app;
mod error;
pub mod store;

pub use app::{router, serve, serve_blocking, AppState, CreateTrialRequest, EnrollRequest, ServiceConfig, TrialCreated};
pub use error::{ApiError, ErrorBody};
pub use store::{EnrollmentResponse, StatusSnapshot};
