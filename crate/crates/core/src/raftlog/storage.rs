//! Byte storage behind the primary log and the second-level bulk logs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LogFile {
    Wal,
    SecondLevel(u32),
}

/// Append-only files. `append` returns the offset the data landed at and
/// must not return before the bytes are durable.
pub trait LogStore {
    fn append(&mut self, file: LogFile, data: &[u8]) -> io::Result<u64>;
    fn read_at(&self, file: LogFile, offset: u64, len: u64) -> io::Result<Vec<u8>>;
    fn file_len(&self, file: LogFile) -> io::Result<u64>;
    fn second_level_ids(&self) -> io::Result<Vec<u32>>;
}

/// Marker carried inside `io::Error` when the simulator kills a node at a
/// durable write.
#[derive(Debug)]
pub struct CrashInjected;

impl std::fmt::Display for CrashInjected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("crash injected at durable write")
    }
}

impl std::error::Error for CrashInjected {}

pub fn injected_crash() -> io::Error {
    io::Error::new(io::ErrorKind::Other, CrashInjected)
}

pub fn is_injected_crash(err: &io::Error) -> bool {
    err.get_ref().is_some_and(|inner| inner.is::<CrashInjected>())
}

fn out_of_range(file: LogFile, offset: u64, len: u64, size: u64) -> io::Error {
    io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("{file:?}: range {offset}+{len} beyond length {size}"),
    )
}

/// In-memory files; survives simulated crashes because the simulator keeps
/// it outside the node's volatile state.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemStore {
    wal: Vec<u8>,
    second_level: BTreeMap<u32, Vec<u8>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn wal_bytes(&self) -> &[u8] {
        &self.wal
    }

    pub fn wal_bytes_mut(&mut self) -> &mut Vec<u8> {
        &mut self.wal
    }

    pub fn second_level_bytes(&self, id: u32) -> Option<&[u8]> {
        self.second_level.get(&id).map(Vec::as_slice)
    }

    /// Writes the `<dir>/wal.log`, `<dir>/sl/<id>.dat` layout.
    pub fn dump_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir.join("sl"))?;
        fs::write(dir.join("wal.log"), &self.wal)?;
        for (id, bytes) in &self.second_level {
            fs::write(dir.join("sl").join(format!("{id}.dat")), bytes)?;
        }
        Ok(())
    }

    fn file(&self, file: LogFile) -> Option<&Vec<u8>> {
        match file {
            LogFile::Wal => Some(&self.wal),
            LogFile::SecondLevel(id) => self.second_level.get(&id),
        }
    }
}

impl LogStore for MemStore {
    fn append(&mut self, file: LogFile, data: &[u8]) -> io::Result<u64> {
        let buf = match file {
            LogFile::Wal => &mut self.wal,
            LogFile::SecondLevel(id) => self.second_level.entry(id).or_default(),
        };
        let at = buf.len() as u64;
        buf.extend_from_slice(data);
        Ok(at)
    }

    fn read_at(&self, file: LogFile, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        let empty = Vec::new();
        let buf = self.file(file).unwrap_or(&empty);
        let size = buf.len() as u64;
        match offset.checked_add(len) {
            Some(end) if end <= size => Ok(buf[offset as usize..end as usize].to_vec()),
            _ => Err(out_of_range(file, offset, len, size)),
        }
    }

    fn file_len(&self, file: LogFile) -> io::Result<u64> {
        Ok(self.file(file).map_or(0, |b| b.len() as u64))
    }

    fn second_level_ids(&self) -> io::Result<Vec<u32>> {
        Ok(self.second_level.keys().copied().collect())
    }
}

/// Files in a node directory, synced after every append.
#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("sl"))?;
        Ok(DirStore { root })
    }

    fn path(&self, file: LogFile) -> PathBuf {
        match file {
            LogFile::Wal => self.root.join("wal.log"),
            LogFile::SecondLevel(id) => self.root.join("sl").join(format!("{id}.dat")),
        }
    }
}

impl LogStore for DirStore {
    fn append(&mut self, file: LogFile, data: &[u8]) -> io::Result<u64> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(file))?;
        let at = f.metadata()?.len();
        f.write_all(data)?;
        f.sync_data()?;
        Ok(at)
    }

    fn read_at(&self, file: LogFile, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        let mut f = match File::open(self.path(file)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return if len == 0 { Ok(Vec::new()) } else { Err(out_of_range(file, offset, len, 0)) }
            }
            Err(e) => return Err(e),
        };
        let size = f.metadata()?.len();
        if offset.checked_add(len).map_or(true, |end| end > size) {
            return Err(out_of_range(file, offset, len, size));
        }
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0; len as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn file_len(&self, file: LogFile) -> io::Result<u64> {
        match fs::metadata(self.path(file)) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e),
        }
    }

    fn second_level_ids(&self) -> io::Result<Vec<u32>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("sl"))? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".dat")).and_then(|n| n.parse().ok()) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }
}

impl<S: LogStore> LogStore for std::rc::Rc<std::cell::RefCell<S>> {
    fn append(&mut self, file: LogFile, data: &[u8]) -> io::Result<u64> {
        self.borrow_mut().append(file, data)
    }

    fn read_at(&self, file: LogFile, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        self.borrow().read_at(file, offset, len)
    }

    fn file_len(&self, file: LogFile) -> io::Result<u64> {
        self.borrow().file_len(file)
    }

    fn second_level_ids(&self) -> io::Result<Vec<u32>> {
        self.borrow().second_level_ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exercise(store: &mut impl LogStore) {
        assert_eq!(store.append(LogFile::Wal, b"abc").unwrap(), 0);
        assert_eq!(store.append(LogFile::Wal, b"de").unwrap(), 3);
        assert_eq!(store.append(LogFile::SecondLevel(2), b"xyz").unwrap(), 0);
        assert_eq!(store.read_at(LogFile::Wal, 1, 3).unwrap(), b"bcd");
        assert_eq!(store.file_len(LogFile::SecondLevel(2)).unwrap(), 3);
        assert_eq!(store.second_level_ids().unwrap(), vec![2]);
        assert!(store.read_at(LogFile::SecondLevel(2), 2, 5).is_err());
        assert!(store.read_at(LogFile::SecondLevel(9), 0, 1).is_err());
    }

    #[test]
    fn mem_store_contract() {
        exercise(&mut MemStore::new());
    }

    #[test]
    fn dir_store_contract() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DirStore::open(dir.path()).unwrap();
        exercise(&mut s);
        assert!(dir.path().join("wal.log").exists());
        assert!(dir.path().join("sl/2.dat").exists());
    }

    #[test]
    fn injected_crash_marker() {
        assert!(is_injected_crash(&injected_crash()));
        assert!(!is_injected_crash(&io::Error::new(io::ErrorKind::Other, "disk full")));
    }
}
