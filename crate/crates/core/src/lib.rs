//! Stateless hierarchical oblivious RAM over cuckoo tables that share one
//! stash, with a PRF-addressed and a pointer-based tree variant, plus the
//! trace analysis and experiment drivers used to validate them.

mod error;

pub mod analysis;
pub mod crypto;
pub mod experiment;
pub mod cuckoo;
pub mod hierarchy;
pub mod osort;
pub mod params;
pub mod record;
pub mod server;
pub mod store;
pub mod tree;
pub mod workload;

pub use error::{Error, Result};
