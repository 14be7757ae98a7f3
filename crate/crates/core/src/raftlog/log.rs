use std::io;

use thiserror::Error;

use super::command::{Command, CommandId};
use super::entry::{decode_one, Defect, LogEntry};
use super::storage::{LogFile, LogStore};
use super::SecondLevelRef;

/// Every entry is written in term 1; there is no election.
pub const TERM: u64 = 1;

/// Second-level files roll over once they reach this size.
pub const DEFAULT_ROLLOVER: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("log corrupt at entry {index} (byte {offset}): {defect:?}")]
    Corrupt { index: u64, offset: u64, defect: Defect },
    #[error("entry {index}: {msg}")]
    Decode { index: u64, msg: String },
    #[error("rejected entry with command id {0}")]
    Rejected(u16),
}

/// Append-only command log over a [`LogStore`].
#[derive(Debug)]
pub struct RaftLog<S: LogStore> {
    store: S,
    last_index: u64,
    sl_file: u32,
    rollover: u64,
}

impl<S: LogStore> RaftLog<S> {
    /// Opens an existing (possibly empty) log. Fails if any entry is corrupt.
    pub fn open(store: S, rollover: u64) -> Result<Self, LogError> {
        let bytes = read_all(&store)?;
        let last_index = scan(&bytes, |_, _| Ok(()))?;
        let sl_file = store.second_level_ids()?.into_iter().max().unwrap_or(0);
        Ok(RaftLog { store, last_index, sl_file, rollover: rollover.max(1) })
    }

    pub fn last_index(&self) -> u64 {
        self.last_index
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.store
    }

    /// Appends and syncs one command, returning its 1-based index.
    pub fn append(&mut self, cmd: &Command) -> io::Result<u64> {
        let (id, payload) = cmd.encode();
        let entry = LogEntry::new(TERM, id as u16, payload);
        self.store.append(LogFile::Wal, &entry.encode())?;
        self.last_index += 1;
        Ok(self.last_index)
    }

    /// Appends a pre-built frame. Malformed frames and unregistered command
    /// ids are rejected without touching the file.
    pub fn append_entry(&mut self, entry: &LogEntry) -> Result<u64, LogError> {
        if !entry.is_well_formed() {
            return Err(LogError::Rejected(entry.command_id));
        }
        self.store.append(LogFile::Wal, &entry.encode())?;
        self.last_index += 1;
        Ok(self.last_index)
    }

    pub fn append_second_level(&mut self, data: &[u8]) -> io::Result<SecondLevelRef> {
        if data.is_empty() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty second-level append"));
        }
        let len = self.store.file_len(LogFile::SecondLevel(self.sl_file))?;
        if len > 0 && len + data.len() as u64 > self.rollover {
            self.sl_file += 1;
        }
        let file_id = self.sl_file;
        let offset = self.store.append(LogFile::SecondLevel(file_id), data)?;
        Ok(SecondLevelRef { file_id, offset, length: data.len() as u64 })
    }

    pub fn read_second_level(&self, r: &SecondLevelRef) -> io::Result<Vec<u8>> {
        self.store.read_at(LogFile::SecondLevel(r.file_id), r.offset, r.length)
    }

    /// Decodes the whole log and hands each command to `apply` in index
    /// order. Nothing is applied if any entry fails verification.
    pub fn replay(&self, mut apply: impl FnMut(u64, Command)) -> Result<u64, LogError> {
        let bytes = read_all(&self.store)?;
        let mut commands = Vec::new();
        scan(&bytes, |index, entry| {
            let cmd = Command::decode(entry.command_id, &entry.payload)
                .map_err(|e| LogError::Decode { index, msg: e.to_string() })?;
            commands.push((index, cmd));
            Ok(())
        })?;
        let n = commands.len() as u64;
        for (index, cmd) in commands {
            apply(index, cmd);
        }
        Ok(n)
    }

    pub fn into_store(self) -> S {
        self.store
    }
}

fn read_all<S: LogStore>(store: &S) -> io::Result<Vec<u8>> {
    let len = store.file_len(LogFile::Wal)?;
    store.read_at(LogFile::Wal, 0, len)
}

fn scan(bytes: &[u8], mut each: impl FnMut(u64, LogEntry) -> Result<(), LogError>) -> Result<u64, LogError> {
    let mut offset = 0usize;
    let mut index = 0u64;
    while offset < bytes.len() {
        index += 1;
        let (entry, len) = decode_one(&bytes[offset..])
            .map_err(|defect| LogError::Corrupt { index, offset: offset as u64, defect })?;
        debug_assert!(CommandId::from_u16(entry.command_id).is_some());
        each(index, entry)?;
        offset += len;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raftlog::MemStore;
    use crate::store::DirEntryRemove;

    fn remove(name: &str) -> Command {
        Command::DirEntryRemove(DirEntryRemove { dir: 1, name: name.into(), mtime: 7 })
    }

    #[test]
    fn indices_start_at_one() {
        let mut log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        assert_eq!(log.last_index(), 0);
        assert_eq!(log.append(&remove("a")).unwrap(), 1);
        assert_eq!(log.append(&remove("b")).unwrap(), 2);
        let reopened = RaftLog::open(log.into_store(), DEFAULT_ROLLOVER).unwrap();
        assert_eq!(reopened.last_index(), 2);
    }

    #[test]
    fn empty_log_replays_nothing() {
        let log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        assert_eq!(log.replay(|_, _| panic!("nothing to apply")).unwrap(), 0);
    }

    #[test]
    fn replay_returns_commands_in_order() {
        let mut log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        log.append(&remove("a")).unwrap();
        log.append(&remove("b")).unwrap();
        let mut seen = Vec::new();
        log.replay(|i, c| seen.push((i, c))).unwrap();
        assert_eq!(seen, vec![(1, remove("a")), (2, remove("b"))]);
    }

    #[test]
    fn unregistered_ids_rejected_at_append() {
        let mut log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        let e = LogEntry::new(TERM, 77, vec![1, 2]);
        assert!(matches!(log.append_entry(&e), Err(LogError::Rejected(77))));
        assert_eq!(log.store().wal_bytes().len(), 0);
    }

    #[test]
    fn second_level_offsets_increase_and_roll_over() {
        let mut log = RaftLog::open(MemStore::new(), 8).unwrap();
        let a = log.append_second_level(b"abc").unwrap();
        let b = log.append_second_level(b"defg").unwrap();
        assert_eq!((a.file_id, b.file_id), (0, 0));
        assert!(b.offset >= a.offset + a.length);
        let c = log.append_second_level(b"hi").unwrap();
        assert_eq!((c.file_id, c.offset), (1, 0));
        assert_eq!(log.read_second_level(&b).unwrap(), b"defg");
        assert_eq!(log.read_second_level(&c).unwrap(), b"hi");
        let bad = SecondLevelRef { file_id: 0, offset: 5, length: 10 };
        assert!(log.read_second_level(&bad).is_err());
        assert!(log.append_second_level(b"").is_err());
    }

    #[test]
    fn sixteen_mib_chunk_payload() {
        let mut log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        let data = vec![0x5a; 16 << 20];
        let r = log.append_second_level(&data).unwrap();
        assert_eq!(r.length, 16777216);
        assert_eq!(log.read_second_level(&r).unwrap(), data);
    }

    #[test]
    fn corrupt_entry_halts_replay_without_applying() {
        let mut log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        log.append(&remove("a")).unwrap();
        log.append(&remove("b")).unwrap();
        let mut store = log.into_store();
        let n = store.wal_bytes().len();
        store.wal_bytes_mut()[n - 3] ^= 0x10;
        assert!(matches!(
            RaftLog::open(store.clone(), DEFAULT_ROLLOVER),
            Err(LogError::Corrupt { index: 2, .. })
        ));
    }
}
