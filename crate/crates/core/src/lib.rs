//! Billboard Manager core.
//!
//! A caching/transcoding gateway that sits between mobile video clients and
//! a fleet of origin nodes. Requests are answered from a segment-granularity
//! cache when possible; misses select the best origin node from live
//! telemetry, fetch over byte-range requests while streaming to the client
//! (stream-while-fill), and transcode to the device's format when needed.
//!
//! The [`sim`] module contains a deterministic discrete-time simulator that
//! drives the same modules the live server uses, so bandwidth-saving and
//! startup-delay behaviour can be measured and replayed exactly.

pub mod cache;
pub mod clock;
pub mod config;
pub mod fetch;
pub mod gateway;
pub mod ids;
pub mod media;
pub mod origin_node;
pub mod protocol;
pub mod registry;
pub mod server;
pub mod sim;
pub mod stream;
