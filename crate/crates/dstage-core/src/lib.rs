//! Duplicate-aware scheduling over staged bottleneck resources.
//!
//! The crate is a deterministic discrete-event framework built around the
//! duplicate-aware stage: strict-priority preemptive queues with delayed
//! dispatch and cascading purge. On top of it sit the duplication policies
//! (single-copy, cloning, cloning with prioritization, strict-priority
//! duplicate-once with purging, hedged, timeout-restart, tied), the proxy
//! stage that throttles an unmodifiable legacy stage, concrete resource
//! models (storage server, network link, CPU node, straggler noise), and the
//! scenario builders that wire them into full pipelines.
//!
//! The crate is `no_std` (alloc required); all IO, file formats, and the CLI
//! live in the companion `dstage-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cluster;
pub mod job;
pub mod policy;
pub mod proxy;
pub mod record;
pub mod resources;
pub mod scenario;
pub mod sim;
pub mod stage;
