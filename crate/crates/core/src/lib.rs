//! Mixture-of-experts continual learning for traffic forecasting on
//! expanding sensor networks.

pub mod bench;
pub mod cluster;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod predictor;
pub mod reconstructor;
pub mod scalar;
#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Graph64 = nn::Graph<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
