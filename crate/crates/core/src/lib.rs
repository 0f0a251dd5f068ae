//! Deterministic simulator for decentralized federated learning with
//! token-pruned local training, anonymous round-scoped update signing,
//! multi-RSU verification and majority-vote finalization onto a hash-chained
//! ledger.

pub mod crypto;
pub mod error;
pub mod fed;
pub mod harness;
pub mod ledger;
pub mod model;
pub mod registry;
pub mod rsu;
pub mod seed;
pub mod timing;

pub use error::{Error, Result};
