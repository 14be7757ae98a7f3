//! Two-phase commit: transaction identities, participant records, logical
//! locks, duplicate detection and the coordinator driver.
//!
//! Participants persist a prepare record (holding the concrete updates they
//! will apply) before voting yes, and a commit or abort record before
//! acknowledging the decision. Coordinators always prepare their own share
//! first and log their decision before fanning it out, so after a restart a
//! coordinator either knows the decision or can safely presume abort.

mod coordinator;
mod intent;
mod table;

use serde::{Deserialize, Serialize};

use crate::cluster::NodeList;
use crate::error::FsError;
use crate::raftlog::Command;
use crate::store::{DirEntry, ExtKey, InodeMeta};
use crate::{ClientId, InodeId, NodeId};

pub use coordinator::{backoff_ticks, coordinate, finish, prepare_remotes, worst_refusal, Participants, RetryPolicy};
pub use intent::Intent;
pub use table::{CoordState, PrepareCheck, TxTable, DEDUP_WINDOW};

/// `(client, seq)` names the logical request; `tx_seq` is assigned by the
/// coordinator and reused verbatim on every retry of that request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId {
    pub client: ClientId,
    pub seq: u64,
    pub tx_seq: u64,
}

impl std::fmt::Display for TxId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.client, self.seq, self.tx_seq)
    }
}

/// Lockable unit. Metadata and chunks are locked independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceId {
    Meta(InodeId),
    Chunk(InodeId, u64),
    Membership,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxState {
    Prepared,
    Committed,
    Aborted,
}

impl TxState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, TxState::Prepared)
    }
}

/// Part uploaded by a chunk participant during a persist transaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartTag {
    pub number: u32,
    pub tag: String,
}

/// Information a participant returns with a yes vote.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteInfo {
    /// Metadata as locked by this prepare.
    pub meta: Option<InodeMeta>,
    /// Entry displaced by a replacing directory insert.
    pub replaced: Option<DirEntry>,
    /// Parts uploaded by this participant during a persist.
    pub parts: Vec<PartTag>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Refusal {
    /// A resource is locked by another transaction.
    Conflict,
    /// The node is reconfiguring or draining; retry later.
    Busy,
    Stale(NodeList),
    Timeout,
    /// The prepared attempt was already aborted here.
    Aborted,
    Error(FsError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    Yes(VoteInfo),
    No(Refusal),
}

/// Reply cached for a completed transaction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxReply {
    #[default]
    Done,
    Created(InodeId),
    Persisted(PersistKind),
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersistKind {
    Put,
    Multipart,
    Delete,
    Marker,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitOutcome {
    Committed(TxReply),
    Aborted(Refusal),
}

/// Participant prepare record (`TxPrepareMeta` / `TxPrepareChunk`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareRecord {
    pub txid: TxId,
    pub attempt: u32,
    pub coordinator: NodeId,
    pub participants: Vec<NodeId>,
    pub resources: Vec<ResourceId>,
    pub updates: Vec<Command>,
    pub vote: VoteInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutcomeMark {
    /// A participant applied the decision.
    Participant,
    /// The coordinator's durable decision, logged before fan-out.
    Decision { participants: Vec<NodeId>, reply: TxReply },
    /// Every participant acknowledged the decision.
    Complete,
    /// Single-node transaction: updates applied by this one record.
    OnePhase { resources: Vec<ResourceId>, updates: Vec<Command>, reply: TxReply },
}

/// Payload of `TxCommit` and `TxAbort`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub txid: TxId,
    pub attempt: u32,
    pub mark: OutcomeMark,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpuBegin {
    pub txid: TxId,
    pub attempt: u32,
    pub key: ExtKey,
    pub upload_id: u64,
}

/// Logged by a persist coordinator after the upload became visible; doubles
/// as its commit decision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedInode {
    pub txid: TxId,
    pub attempt: u32,
    pub inode: InodeId,
    pub key: ExtKey,
    pub size: u64,
    pub participants: Vec<NodeId>,
    pub kind: PersistKind,
}
