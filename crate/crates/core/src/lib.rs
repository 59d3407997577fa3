//! AS-aware relay selection for onion-routing networks.
//!
//! The crate predicts policy-compliant AS-level paths, decides whether a
//! circuit exposes both of its ends to a common network adversary, and picks
//! entry/exit relays that avoid such adversaries. When no safe pair exists
//! it falls back to the distribution that minimizes the exposure of the most
//! likely adversary.

pub mod cli;
pub mod harness;
pub mod lp;
pub mod routing;
pub mod selection;
pub mod threat;
pub mod topology;

pub use routing::{PathSet, RoutingTree, TreeCache};
pub use topology::{AdversaryMode, AsGraph, AsId, ColluderClass, TopologyBundle};
