pub mod lattice;
pub mod config;
pub mod passage;
pub mod circuits;
pub mod stats;
pub mod martingale;
pub mod acceptance;
pub mod critical;
pub mod harness;
pub mod invariants;
