//! Time-delay and extrinsic calibration of two sensors that track the same
//! moving object.
//!
//! Each sensor's track is smoothed into a continuous-time trajectory by
//! batch Gaussian-process regression under a constant-acceleration prior
//! ([`gp`]). The time delay is found by aligning the frame-invariant
//! velocity-magnitude profiles of the two trajectories ([`temporal`]), and
//! the rigid transform between the sensors by closed-form registration of
//! the time-aligned positions ([`registration`]). [`pipeline`] chains the
//! three steps, [`sim`] generates synthetic sensor pairs with known ground
//! truth, and [`io`] holds the file formats.
//!
//! Interchangeable algorithms (trajectory solvers, registration methods)
//! implement a common trait and are looked up by name in a [`registry`].

pub mod error;
pub mod gp;
pub mod io;
pub mod pipeline;
pub mod registration;
pub mod registry;
pub mod sim;
pub mod temporal;

pub use error::{CalibError, Result};
