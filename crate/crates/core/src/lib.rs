//! Tiered KV-cache management simulator for multi-turn LLM serving.
//!
//! The crate models a serving engine that keeps each conversation's KV cache
//! in a host-memory/disk hierarchy between turns instead of recomputing it.
//! It is desk-scale: GPU work is replaced by an analytical timing model, and
//! a discrete-event loop replays conversation traces through the scheduler,
//! the cache store, the placement policies and the overlap planner.
//!
//! Modules, bottom-up:
//!
//! - [`units`]: byte sizes and bandwidths with human-readable suffixes
//! - [`model`]: per-model timing/size constants and closed-form costs
//! - [`trace`]: trace loading, synthetic workloads, statistics
//! - [`store`]: the two-tier session store with block accounting and TTL
//! - [`overlap`]: layer-wise pre-load and asynchronous save timelines
//! - [`policy`]: scheduler-aware, LRU and FIFO placement decisions
//! - [`sim`]: the discrete-event engine
//! - [`metrics`]: hit rates, TTFT, throughput and cost
//! - [`rope`]: a small rotary-attention kernel for truncation checks
//! - [`experiment`]: serializable experiment specs and the stock recipes

pub mod experiment;
pub mod metrics;
pub mod model;
pub mod overlap;
pub mod policy;
pub mod rope;
pub mod sim;
pub mod store;
pub mod trace;
pub mod units;

pub use model::{ModelProfile, TierConfig};
pub use sim::{Mode, SimConfig};
pub use trace::{Session, Turn, Workload};
