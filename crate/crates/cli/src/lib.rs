//! Command-line and HTTP front ends for the swipecf recommender.

pub mod engine;
pub mod error;
pub mod server;

pub use engine::{Engine, RecommendationResponse};
pub use error::AppError;
