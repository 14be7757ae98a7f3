use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{MigrationReceive, NodeList};
use crate::store::{
    ClearDirtyChunk, ClearDirtyMeta, CreateInode, DirEntryAdd, DirEntryRemove, FoldStaged,
    InodeMeta, PinChunk, SetDeleted, StagedWrite, Truncate,
};
use crate::txn::{MpuBegin, OutcomeRecord, PersistedInode, PrepareRecord};

/// Registered command ids. The numbering is part of the on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u16)]
pub enum CommandId {
    TxPrepareMeta = 1,
    TxPrepareChunk = 2,
    TxCommit = 3,
    TxAbort = 4,
    StageWriteRecord = 5,
    MpuBeginRecord = 6,
    PersistedInodeRecord = 7,
    ClearDirtyMeta = 8,
    ClearDirtyChunk = 9,
    CreateInode = 10,
    DirEntryAdd = 11,
    DirEntryRemove = 12,
    SetDeletedFlag = 13,
    TruncateRecord = 14,
    NodeListUpdate = 15,
    MigrationReceive = 16,
    FoldStaged = 17,
    UpdateMeta = 18,
    PinChunk = 19,
}

impl CommandId {
    pub const ALL: [CommandId; 19] = [
        CommandId::TxPrepareMeta,
        CommandId::TxPrepareChunk,
        CommandId::TxCommit,
        CommandId::TxAbort,
        CommandId::StageWriteRecord,
        CommandId::MpuBeginRecord,
        CommandId::PersistedInodeRecord,
        CommandId::ClearDirtyMeta,
        CommandId::ClearDirtyChunk,
        CommandId::CreateInode,
        CommandId::DirEntryAdd,
        CommandId::DirEntryRemove,
        CommandId::SetDeletedFlag,
        CommandId::TruncateRecord,
        CommandId::NodeListUpdate,
        CommandId::MigrationReceive,
        CommandId::FoldStaged,
        CommandId::UpdateMeta,
        CommandId::PinChunk,
    ];

    pub fn from_u16(id: u16) -> Option<CommandId> {
        Self::ALL.get(usize::from(id).checked_sub(1)?).copied()
    }
}

/// State-machine command. Variant order must match [`CommandId`]: the
/// payload is the bincode encoding of the variant without its tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Command {
    TxPrepareMeta(PrepareRecord),
    TxPrepareChunk(PrepareRecord),
    TxCommit(OutcomeRecord),
    TxAbort(OutcomeRecord),
    StageWriteRecord(StagedWrite),
    MpuBeginRecord(MpuBegin),
    PersistedInodeRecord(PersistedInode),
    ClearDirtyMeta(ClearDirtyMeta),
    ClearDirtyChunk(ClearDirtyChunk),
    CreateInode(CreateInode),
    DirEntryAdd(DirEntryAdd),
    DirEntryRemove(DirEntryRemove),
    SetDeletedFlag(SetDeleted),
    TruncateRecord(Truncate),
    NodeListUpdate(NodeList),
    MigrationReceive(MigrationReceive),
    FoldStaged(FoldStaged),
    UpdateMeta(InodeMeta),
    PinChunk(PinChunk),
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("unknown command id {0}")]
    UnknownCommand(u16),
    #[error("malformed payload for command {id:?}: {msg}")]
    Payload { id: CommandId, msg: String },
}

impl Command {
    /// Splits the command into its id and payload bytes.
    pub fn encode(&self) -> (CommandId, Vec<u8>) {
        let mut bytes = bincode::serialize(self).expect("commands always serialize");
        let tag = u32::from_le_bytes(bytes[..4].try_into().unwrap());
        bytes.drain(..4);
        let id = CommandId::from_u16(tag as u16 + 1).expect("variant order matches CommandId");
        (id, bytes)
    }

    pub fn decode(id: u16, payload: &[u8]) -> Result<Command, DecodeError> {
        let cid = CommandId::from_u16(id).ok_or(DecodeError::UnknownCommand(id))?;
        let mut bytes = Vec::with_capacity(payload.len() + 4);
        bytes.extend_from_slice(&(u32::from(id) - 1).to_le_bytes());
        bytes.extend_from_slice(payload);
        bincode::deserialize(&bytes).map_err(|e| DecodeError::Payload { id: cid, msg: e.to_string() })
    }

    pub fn id(&self) -> CommandId {
        self.encode().0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{InodeKind, Target};

    #[test]
    fn ids_round_trip() {
        for (i, id) in CommandId::ALL.iter().enumerate() {
            assert_eq!(*id as u16, i as u16 + 1);
            assert_eq!(CommandId::from_u16(*id as u16), Some(*id));
        }
        assert_eq!(CommandId::from_u16(0), None);
        assert_eq!(CommandId::from_u16(20), None);
    }

    #[test]
    fn variant_order_matches_ids() {
        let meta = InodeMeta::new(9, InodeKind::File, None, 0);
        let samples = [
            (Command::UpdateMeta(meta.clone()), CommandId::UpdateMeta),
            (
                Command::SetDeletedFlag(SetDeleted { target: Target::Meta(9), mtime: 1 }),
                CommandId::SetDeletedFlag,
            ),
            (
                Command::DirEntryRemove(DirEntryRemove { dir: 1, name: "a".into(), mtime: 7 }),
                CommandId::DirEntryRemove,
            ),
            (Command::NodeListUpdate(NodeList::default()), CommandId::NodeListUpdate),
            (Command::CreateInode(CreateInode { meta, entries: None }), CommandId::CreateInode),
        ];
        for (cmd, id) in samples {
            let (got, payload) = cmd.encode();
            assert_eq!(got, id);
            assert_eq!(Command::decode(id as u16, &payload).unwrap(), cmd);
        }
    }

    #[test]
    fn payload_is_plain_bincode_of_the_body() {
        let cmd = Command::DirEntryRemove(DirEntryRemove { dir: 1, name: "a".into(), mtime: 7 });
        let (_, payload) = cmd.encode();
        let mut expect = Vec::new();
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.push(b'a');
        expect.extend_from_slice(&7u64.to_le_bytes());
        assert_eq!(payload, expect);
    }

    #[test]
    fn unknown_id_rejected() {
        assert!(matches!(Command::decode(42, &[]), Err(DecodeError::UnknownCommand(42))));
    }
}
