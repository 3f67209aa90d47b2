//! Minimal tensor autodiff for the aftermath models.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training code uses
//! the `f32` aliases below; gradient checks run the same code in `f64`.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{bce_term, log_softmax_into, sigmoid, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::{matmul_into, MatView, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("archive error: {0}")]
    Archive(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
