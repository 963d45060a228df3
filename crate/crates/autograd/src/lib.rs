//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar output sweeps the tape in reverse and
//! returns the gradient of every node that depends on a [`ParamStore`]
//! parameter or a free variable. Graphs are cheap and meant to be rebuilt
//! for every batch.
//!
//! ```
//! use autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = g.square(x).unwrap();
//! let loss = g.mean(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
//! ```

mod graph;
pub mod gradcheck;
mod param;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use param::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op} of an empty tensor")]
    Empty { op: &'static str },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

pub type Result<T> = std::result::Result<T, GraphError>;
