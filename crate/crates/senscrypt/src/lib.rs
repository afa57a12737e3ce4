//! Secure storage-and-sync for resource-constrained sensor trackers.
//!
//! The core idea: every record slot on a tracker holds the XOR of the
//! sensor data with two independently reconstructible pseudo-random pads,
//! one keyed to the tracker and one to the webserver. Neither a wiretap nor
//! a full memory dump alone recovers anything; the server, holding both
//! keys, decodes uploads and re-images the consumed slots in place. The
//! circular layout keeps flash wear within two overwrites of even.
//!
//! Alongside the protocol ([`crypto`], [`wire`], [`tracker`], [`server`],
//! [`protocol`], [`relay`]) the crate ships a deliberately vulnerable
//! cleartext stack ([`legacy`]), a deterministic simulator ([`sim`],
//! [`scenario`]), and a scripted adversary with declared capability sets
//! ([`adversary`]) that reproduces the attack/defense matrix for both
//! stacks.

pub mod adversary;
pub mod bench;
pub mod crypto;
pub mod fleet;
pub mod legacy;
pub mod protocol;
pub mod relay;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod tracker;
pub mod transcript;
pub mod transport;
pub mod wire;
