pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod meanteacher;
pub mod seeding;
pub mod synthdata;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
