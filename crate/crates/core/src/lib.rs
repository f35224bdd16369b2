//! Opportunistic batch admission and remote offloading for a shared
//! interactive platform.
//!
//! The pieces: a [`gatekeeper`] that validates and rewrites submissions, a
//! [`queue`] that orders and places them, [`plugin`] backends reached through
//! a small REST protocol, and virtual nodes ([`vnode`]) that stand in for those
//! backends inside the queue.

pub mod api;
pub mod fixtures;
pub mod gatekeeper;
pub mod metrics;
pub mod model;
pub mod platform;
pub mod plugin;
pub mod queue;
pub mod resources;
pub mod scenario;
pub mod time;
pub mod vnode;

pub use model::{JobEvent, JobRecord, JobState, WorkloadKind, WorkloadSpec};
pub use resources::ResourceVector;
pub use time::{Clock, ManualClock, SharedClock, SystemClock, Timestamp};
