//! Indoor positioning from asynchronous acoustic beacons.
//!
//! Anchors transmit beacons on their own schedule and time-stamp both their
//! own and their peers' beacons. Those full-duplex timestamps give pairwise
//! emission offsets and inter-anchor ranges ([`sync`]); offsets turn the
//! target's arrival times into TDoAs, which [`trilateration`] solves with
//! bounded Gauss-Newton and iterative outlier removal. [`sim`] produces
//! ground-truth observation streams, [`eval`] summarizes errors, and
//! [`server`] ingests observations over TCP.

pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod server;
pub mod sim;
pub mod sync;
pub mod trilateration;
pub mod window;

pub use error::{Error, Result};
pub use model::*;
pub use trilateration::locate;
pub use window::{select_per_anchor, window_observations, ObservationWindow};
