//! Value-decomposition multi-agent Q-learning with contrastive identity-aware
//! credit assignment, on a from-scratch reverse-mode autodiff tape.
//!
//! The crate contains the tape ([`autodiff`]), small networks and RMSprop
//! ([`nn`]), the two-agent Turn game ([`env`]), VDN/QMIX mixers ([`mixer`]),
//! the contrastive credit objective ([`cia`]), training ([`trainer`]) and
//! credit analysis ([`diagnostics`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cia;
pub mod config;
pub mod diagnostics;
pub mod env;
pub mod episode;
pub mod error;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Exec;
pub use tensor::{Shape, Tensor};
