//! An elastic cached filesystem over an object store, run inside a
//! deterministic discrete-event simulator.
//!
//! Metadata and fixed-size chunks are sharded over cache nodes by consistent
//! hashing. Every mutation is a two-phase-commit transaction recorded in each
//! node's write-ahead log, so a restarted node rebuilds its state by replay.
//! Dirty data is uploaded to the object store by persist transactions that
//! use the store's multipart upload as a participant.
//!
//! Module map:
//!
//! * [`ring`]: placement of inodes and chunks.
//! * [`raftlog`]: log entry format, second-level bulk logs, replay.
//! * [`txn`]: transaction records, locks, duplicate detection, coordinator.
//! * [`store`]: per-node inode metadata, chunks and directories.
//! * [`extstore`]: in-memory object store with multipart uploads.
//! * [`simnet`]: deterministic executor, RPC transport and fault plans.
//! * [`server`]: cache nodes as a simulated world.
//! * [`cluster`]: node lists, migration plans, join and leave.
//! * [`fsops`]: client sessions with path-level file operations.

pub mod cluster;
pub mod error;
pub mod extstore;
pub mod fsops;
pub mod raftlog;
pub mod ring;
pub mod server;
pub mod simnet;
pub mod store;
pub mod txn;

pub type NodeId = u32;
pub type InodeId = u64;
pub type ClientId = u64;
/// Logical simulator time. One tick stands for one millisecond.
pub type Tick = u64;

pub use error::{Crashed, FsError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    struct Readme;
    #[doc = include_str!("../../../book/src/placement.md")]
    struct Placement;
    #[doc = include_str!("../../../book/src/log-format.md")]
    struct LogFormat;
    #[doc = include_str!("../../../book/src/transactions.md")]
    struct Transactions;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/scaling.md")]
    struct Scaling;
}
