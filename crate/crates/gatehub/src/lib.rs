//! Science gateway engine: file formats, local executor, repository, REST
//! service and command-line client on top of `gatehub-core`.

pub mod artifact;
pub mod auth;
pub mod client;
pub mod config;
pub mod local;
pub mod runs;
pub mod service;
pub mod store;
pub mod stub;

pub use gatehub_core as core;
