//! Vertical federated neural architecture search at desk scale.
//!
//! Parties hold disjoint feature blocks of the same samples; each searches
//! its own relaxed supernet while a label-holding party trains the shared
//! head. Activations and gradients cross party boundaries only as protocol
//! messages, optionally through a Gaussian mechanism.

pub mod autodiff;
pub mod data;
pub mod dp;
pub mod exec;
pub mod federation;
pub mod nas_optim;
pub mod runner;
pub mod search_space;
pub mod ssl_pretrain;

use thiserror::Error;

pub use autodiff::{GraphError, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    SearchSpace(#[from] search_space::SearchSpaceError),
    #[error(transparent)]
    Optim(#[from] nas_optim::OptimError),
    #[error(transparent)]
    Dp(#[from] dp::DpError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Wire(#[from] federation::WireError),
    #[error(transparent)]
    Transport(#[from] federation::TransportError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by NaN or infinite values.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Graph(GraphError::NonFinite { .. })
                | Error::SearchSpace(search_space::SearchSpaceError::Graph(GraphError::NonFinite { .. }))
                | Error::Optim(nas_optim::OptimError::NonFinite(_))
                | Error::Dp(dp::DpError::NonFinite)
        )
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Optim(nas_optim::OptimError::InvalidConfig(_))
                | Error::Dp(dp::DpError::OutOfRange(_))
                | Error::Data(data::DataError::InvalidSpec(_))
                | Error::SearchSpace(search_space::SearchSpaceError::InvalidOpSet(_))
                | Error::SearchSpace(search_space::SearchSpaceError::TooFewNodes(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
