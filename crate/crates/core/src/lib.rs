//! Core engine of mailgraph: MIME parsing, message digests, the bipartite
//! message/category store, classification and read-only mail sync.

pub mod classifier;
pub mod mime;
pub mod service;
pub mod store;
pub mod text;
pub mod transport;
