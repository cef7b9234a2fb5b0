//! Hybrid HTTP + peer-to-peer dataset distribution.
//!
//! * [`bencode`] and [`metainfo`] describe and verify shared content.
//! * [`tracker`] coordinates swarms and keeps transfer ledgers.
//! * [`peer`] moves pieces between peers and HTTP web seeds.
//! * [`swarmsim`] contrasts client-server and swarm distribution offline.
//! * [`econ`] turns transfer volumes into dollar and time projections.

pub mod bencode;
pub mod econ;
pub mod metainfo;
pub mod peer;
pub mod swarmsim;
pub mod tracker;
