//! Per-node write-ahead log.
//!
//! The primary log (`wal.log`) holds checksummed [`LogEntry`] frames whose
//! payloads are serialized [`Command`]s. Bulk bytes (staged writes, cached
//! and migrated chunk data) go to append-only second-level files
//! (`sl/<file id>.dat`) and are referenced from commands by
//! [`SecondLevelRef`]. The log runs as a single-member Raft group: every
//! entry carries term 1 and nothing is replicated.

mod command;
mod entry;
mod log;
mod storage;

use serde::{Deserialize, Serialize};

pub use command::{Command, CommandId, DecodeError};
pub use entry::{decode_one, verify, Defect, LogEntry, Verification, HEADER_LEN};
pub use log::{LogError, RaftLog, DEFAULT_ROLLOVER, TERM};
pub use storage::{injected_crash, is_injected_crash, DirStore, LogFile, LogStore, MemStore};

/// Location of bulk bytes inside a second-level log file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SecondLevelRef {
    pub file_id: u32,
    pub offset: u64,
    pub length: u64,
}
