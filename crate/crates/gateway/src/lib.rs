//! Gateway binary support: live HTTP servers, the plugin transport and the
//! artifact writers behind the `gateway` CLI.

pub mod artifacts;
pub mod config;
pub mod live;
pub mod server;
pub mod transport;
