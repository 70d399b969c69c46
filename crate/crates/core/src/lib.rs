//! Floquet theory for periodic orbits of delay differential equations with discrete delays.
//!
//! The crate covers forward and adjoint evolution of the linearized equation, monodromy
//! spectra, Jordan chains, periodic (and antiperiodic) eigenfunctions with their adjoints,
//! and the periodic normal form on the center manifold up to cubic order.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod prelude {
    pub use alloc::boxed::Box;
    pub use alloc::format;
    pub use alloc::string::{String, ToString};
    pub use alloc::vec;
    pub use alloc::vec::Vec;
    #[cfg(not(feature = "std"))]
    pub use num_traits::Float;
}

pub mod cheb;
pub mod error;
pub mod evolution;
pub mod floquet;
pub mod fourier;
pub mod linalg;
pub mod model;
pub mod normalform;
pub mod ops;
pub mod oracle;
pub mod orbit;
pub mod segment;
mod stepper;

pub use error::{Error, Result};
pub use evolution::{Discretization, MonodromyMatrix};
pub use model::DdeModel;
pub use orbit::PeriodicOrbit;
pub use segment::{DualElement, HistorySegment, PwCheb};
