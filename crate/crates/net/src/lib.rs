//! Networked pieces of community proving: the JSON wire protocol, the HTTP
//! service exposing a [`commprove_core::Distributor`], and the prover client.

pub mod client;
pub mod service;
pub mod wire;

pub use client::{run, run_with, ClientBehavior, ClientConfig, HttpTransport, JdTransport, RunReport};
pub use service::{serve, ServeError, ServiceHandle};
