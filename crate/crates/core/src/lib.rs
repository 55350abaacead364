//! Bilevel energy auction for radial distribution grids.
//!
//! Aggregators run proportional-allocation double auctions among their
//! buyers and sellers ([`ala`]); the DSO allocates power to aggregators by
//! projected gradient ascent on social welfare, using the aggregator prices
//! as the gradient and projecting onto the grid-feasible set ([`dla`],
//! [`feasible`]). A full-information solver ([`oracle`]) certifies the
//! outcome.

pub mod agents;
pub mod ala;
mod barrier;
pub mod dla;
pub mod error;
pub mod feasible;
pub mod grid;
pub mod oracle;
pub mod scenario;

pub use barrier::KktResidual;
pub use error::{Error, Result};
