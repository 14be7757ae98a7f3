use std::fmt;

use crate::cluster::NodeList;
use crate::error::FsError;
use crate::ring::fnv1a64;
use crate::simnet::Message;
use crate::store::{Chunk, ChunkKey, DirEntry, DirTable, ExtKey, ExternalBase, InodeKind, InodeMeta, StageId};
use crate::txn::{CommitOutcome, Intent, TxId, Vote};
use crate::{ClientId, InodeId, NodeId};

/// Bulk bytes on the wire. Debug output shows only length and digest so
/// traces stay short.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Blob(pub Vec<u8>);

impl fmt::Debug for Blob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Blob({}, {:016x})", self.0.len(), fnv1a64(&self.0))
    }
}

/// What a metadata owner needs to rebuild an inode it does not cache:
/// the object key derived from the path, plus the kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetaHint {
    Root,
    Dir(ExtKey),
    File(ExtKey),
}

impl MetaHint {
    pub fn kind(&self) -> InodeKind {
        match self {
            MetaHint::File(_) => InodeKind::File,
            _ => InodeKind::Directory,
        }
    }

    pub fn key(&self) -> Option<&ExtKey> {
        match self {
            MetaHint::Root => None,
            MetaHint::Dir(k) | MetaHint::File(k) => Some(k),
        }
    }
}

/// Entity an intent operates on; decides which node receives it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Place {
    Meta(InodeId),
    Chunk(ChunkKey),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MembershipChange {
    Add(NodeId),
    Remove(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Req {
    GetList,
    Lookup { ver: u64, dir: InodeId, hint: MetaHint, name: String },
    GetMeta { ver: u64, inode: InodeId, hint: MetaHint },
    ReadDir { ver: u64, dir: InodeId, hint: MetaHint },
    ReadChunk { ver: u64, chunk: ChunkKey, base: Option<ExternalBase> },
    Stage { ver: u64, id: StageId, chunk: ChunkKey, at: u64, data: Blob },
    /// Client transaction; the receiver must own the first place and
    /// coordinates.
    Transact { ver: u64, client: ClientId, seq: u64, ops: Vec<(Place, Intent)> },
    Persist { ver: u64, client: ClientId, seq: u64, inode: InodeId },
    Prepare { ver: u64, txid: TxId, attempt: u32, coordinator: NodeId, participants: Vec<NodeId>, intents: Vec<Intent> },
    Decide { txid: TxId, attempt: u32, commit: bool, membership: bool },
    Join { node: NodeId },
    Leave { node: NodeId },
    Membership { change: MembershipChange },
    MigratePush { from: NodeId, list_version: u64, metas: Vec<InodeMeta>, dirs: Vec<(InodeMeta, DirTable)>, chunks: Vec<(Chunk, Blob)> },
}

impl Message for Req {
    fn kind(&self) -> &'static str {
        match self {
            Req::GetList => "GetList",
            Req::Lookup { .. } => "Lookup",
            Req::GetMeta { .. } => "GetMeta",
            Req::ReadDir { .. } => "ReadDir",
            Req::ReadChunk { .. } => "ReadChunk",
            Req::Stage { .. } => "Stage",
            Req::Transact { .. } => "Transact",
            Req::Persist { .. } => "Persist",
            Req::Prepare { intents, .. } if intents.iter().any(|i| matches!(i, Intent::NodeList { .. })) => "RingCheck",
            Req::Prepare { .. } => "Prepare",
            Req::Decide { membership: true, .. } => "ListCommit",
            Req::Decide { commit: true, .. } => "Commit",
            Req::Decide { .. } => "Abort",
            Req::Join { .. } => "JoinRequest",
            Req::Leave { .. } => "LeaveRequest",
            Req::Membership { .. } => "Membership",
            Req::MigratePush { .. } => "MigratePush",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Resp {
    List(NodeList),
    Entry(DirEntry),
    Meta(InodeMeta),
    Dir(Vec<(String, DirEntry)>),
    Data(Blob),
    Ack,
    Outcome(CommitOutcome),
    Vote(Vote),
    Err(FsError),
    Stale(NodeList),
    Busy,
}

impl Message for Resp {
    fn kind(&self) -> &'static str {
        match self {
            Resp::List(_) => "List",
            Resp::Entry(_) => "Entry",
            Resp::Meta(_) => "Meta",
            Resp::Dir(_) => "Dir",
            Resp::Data(_) => "Data",
            Resp::Ack => "Ack",
            Resp::Outcome(_) => "Outcome",
            Resp::Vote(Vote::Yes(_)) => "VoteYes",
            Resp::Vote(Vote::No(_)) => "VoteNo",
            Resp::Err(_) => "Err",
            Resp::Stale(_) => "NodeListStale",
            Resp::Busy => "Busy",
        }
    }
}
