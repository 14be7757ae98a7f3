//! Per-node inode store: metadata records, fixed-size chunks with ordered
//! write pieces, staged (outstanding) writes and directory tables.
//!
//! Everything here is rebuilt from the write-ahead log. [`InodeStore::apply`]
//! is the only mutation path and never performs I/O; chunk bytes are resolved
//! through [`compose_chunk`] with caller-supplied readers.

mod dir;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::raftlog::{Command, SecondLevelRef};
use crate::{InodeId, NodeId, Tick};

pub use dir::{DirEntry, DirTable, EntryKind};

pub const ROOT_INODE: InodeId = 1;

/// Allocates ids as `(node << 32) | counter`; node 0 is reserved for the root.
pub fn pack_inode_id(node: NodeId, counter: u32) -> InodeId {
    (u64::from(node) << 32) | u64::from(counter)
}

pub fn inode_id_parts(id: InodeId) -> (NodeId, u32) {
    ((id >> 32) as NodeId, id as u32)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExtKey {
    pub bucket: String,
    pub key: String,
}

impl ExtKey {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Self {
        ExtKey { bucket: bucket.into(), key: key.into() }
    }

    /// Key of a child entry. Directory keys end with `/`.
    pub fn child(&self, name: &str, kind: InodeKind) -> ExtKey {
        let mut key = self.key.clone();
        key.push_str(name);
        if kind == InodeKind::Directory {
            key.push('/');
        }
        ExtKey { bucket: self.bucket.clone(), key }
    }
}

impl std::fmt::Display for ExtKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.bucket, self.key)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InodeKind {
    File,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InodeMeta {
    pub id: InodeId,
    pub kind: InodeKind,
    pub size: u64,
    pub mode: u32,
    pub mtime: Tick,
    pub dirty: bool,
    /// Tick at which the inode last went from clean to dirty.
    pub dirty_since: Tick,
    pub deleted: bool,
    /// Object key derived from the inode's current path.
    pub external_key: Option<ExtKey>,
    /// Object key that holds the last persisted content, if any.
    pub persisted: Option<ExtKey>,
    /// Generation of the object under `persisted`; deletes are conditional
    /// on it so a newer object under the same key survives.
    pub persisted_gen: u64,
    /// Prefix of the persisted object that is still valid file content.
    pub external_valid: u64,
    pub version: u64,
}

impl InodeMeta {
    pub fn new(id: InodeId, kind: InodeKind, external_key: Option<ExtKey>, now: Tick) -> Self {
        InodeMeta {
            id,
            kind,
            size: 0,
            mode: if kind == InodeKind::Directory { 0o755 } else { 0o644 },
            mtime: now,
            dirty: false,
            dirty_since: 0,
            deleted: false,
            external_key,
            persisted: None,
            persisted_gen: 0,
            external_valid: 0,
            version: 0,
        }
    }

    /// Metadata for an object that already exists externally.
    pub fn from_external(id: InodeId, kind: InodeKind, key: ExtKey, size: u64, generation: u64, now: Tick) -> Self {
        let mut m = InodeMeta::new(id, kind, Some(key.clone()), now);
        m.size = size;
        m.persisted = Some(key);
        m.persisted_gen = generation;
        m.external_valid = size;
        m
    }

    pub fn is_dir(&self) -> bool {
        self.kind == InodeKind::Directory
    }

    pub fn touch_dirty(&mut self, now: Tick) {
        if !self.dirty {
            self.dirty = true;
            self.dirty_since = now;
        }
        self.mtime = self.mtime.max(now);
        self.version += 1;
    }

    /// External bytes usable as base content for the chunk at `offset`.
    pub fn external_base(&self, offset: u64, chunk_size: u64) -> Option<ExternalBase> {
        let key = self.persisted.clone()?;
        let end = self.external_valid.min(offset + chunk_size);
        (end > offset).then(|| ExternalBase { key, object_offset: offset, len: end - offset })
    }
}

/// Persisted object range backing part of a chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalBase {
    pub key: ExtKey,
    pub object_offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WriteSource {
    SecondLevel(SecondLevelRef),
    ExternalFetch { key: ExtKey, object_offset: u64 },
}

/// A byte run placed at `at` within a chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub at: u64,
    pub len: u64,
    pub source: WriteSource,
}

impl Piece {
    fn clip(&self, limit: u64) -> Option<Piece> {
        if self.at >= limit {
            return None;
        }
        let mut p = self.clone();
        p.len = p.len.min(limit - p.at);
        Some(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkKey {
    pub inode: InodeId,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub inode: InodeId,
    pub offset: u64,
    /// Valid bytes; never exceeds the chunk size.
    pub length: u64,
    pub dirty: bool,
    pub version: u64,
    /// Committed pieces, oldest first. Later pieces overwrite earlier bytes.
    pub pieces: Vec<Piece>,
}

impl Chunk {
    pub fn key(&self) -> ChunkKey {
        ChunkKey { inode: self.inode, offset: self.offset }
    }

    fn clip(&mut self, limit: u64) {
        self.length = self.length.min(limit);
        self.pieces = self.pieces.iter().filter_map(|p| p.clip(limit)).collect();
    }
}

/// Identity of a staged write, chosen by the writing client so retries are
/// idempotent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageId {
    pub client: u64,
    pub seq: u64,
    pub part: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedWrite {
    pub id: StageId,
    pub inode: InodeId,
    pub chunk_offset: u64,
    pub at: u64,
    pub len: u64,
    pub source: WriteSource,
}

/// Target of deletion and truncation records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Meta(InodeId),
    Chunk(ChunkKey),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateInode {
    pub meta: InodeMeta,
    pub entries: Option<DirTable>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntryAdd {
    pub dir: InodeId,
    pub name: String,
    pub entry: DirEntry,
    pub mtime: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntryRemove {
    pub dir: InodeId,
    pub name: String,
    pub mtime: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetDeleted {
    pub target: Target,
    pub mtime: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncate {
    pub target: Target,
    pub size: u64,
    pub mtime: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldStaged {
    pub chunk: ChunkKey,
    pub stages: Vec<StageId>,
    /// External base installed first when the chunk is not cached yet.
    pub base: Option<ExternalBase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearDirtyMeta {
    pub inode: InodeId,
    pub version: u64,
    pub persisted: Option<ExtKey>,
    pub generation: u64,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearDirtyChunk {
    pub chunk: ChunkKey,
    pub version: u64,
    /// Uploaded content re-stored locally as a single piece.
    pub compacted: Option<(SecondLevelRef, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
/// Chunk content resolved to local bytes so it no longer depends on the
/// persisted object (taken before a rename rebinds the object key).
pub struct PinChunk {
    pub chunk: ChunkKey,
    pub length: u64,
    pub data: SecondLevelRef,
}

/// Data-plane state of one node.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InodeStore {
    pub node: NodeId,
    pub metas: BTreeMap<InodeId, InodeMeta>,
    pub dirs: BTreeMap<InodeId, DirTable>,
    pub chunks: BTreeMap<ChunkKey, Chunk>,
    pub staged: BTreeMap<StageId, StagedWrite>,
    next_counter: u32,
}

impl InodeStore {
    pub fn new(node: NodeId) -> Self {
        InodeStore { node, next_counter: 1, ..Default::default() }
    }

    pub fn allocate_id(&mut self) -> InodeId {
        let id = pack_inode_id(self.node, self.next_counter);
        self.next_counter += 1;
        id
    }

    /// Keeps the allocator ahead of every id this node ever handed out.
    pub fn observe_id(&mut self, id: InodeId) {
        let (node, counter) = inode_id_parts(id);
        if node == self.node && counter >= self.next_counter {
            self.next_counter = counter + 1;
        }
    }

    pub fn meta(&self, id: InodeId) -> Option<&InodeMeta> {
        self.metas.get(&id)
    }

    pub fn live_meta(&self, id: InodeId) -> Option<&InodeMeta> {
        self.metas.get(&id).filter(|m| !m.deleted)
    }

    fn refresh_dir_size(&mut self, dir: InodeId) {
        let size = self.dirs.get(&dir).map_or(0, DirTable::serialized_len);
        if let Some(m) = self.metas.get_mut(&dir) {
            m.size = size;
        }
    }

    /// Applies a data-plane command. Transaction records are handled by the
    /// transaction table; they are ignored here.
    pub fn apply(&mut self, cmd: &Command) {
        match cmd {
            Command::StageWriteRecord(s) => {
                self.staged.insert(s.id, s.clone());
            }
            Command::CreateInode(c) => {
                self.observe_id(c.meta.id);
                if let Some(entries) = &c.entries {
                    for e in entries.entries().values() {
                        self.observe_id(e.child);
                    }
                    self.dirs.insert(c.meta.id, entries.clone());
                }
                self.metas.insert(c.meta.id, c.meta.clone());
                if c.meta.is_dir() {
                    self.dirs.entry(c.meta.id).or_default();
                    self.refresh_dir_size(c.meta.id);
                }
            }
            Command::DirEntryAdd(a) => {
                self.observe_id(a.entry.child);
                self.dirs.entry(a.dir).or_default().insert(a.name.clone(), a.entry.clone());
                if let Some(m) = self.metas.get_mut(&a.dir) {
                    m.touch_dirty(a.mtime);
                }
                self.refresh_dir_size(a.dir);
            }
            Command::DirEntryRemove(r) => {
                if let Some(t) = self.dirs.get_mut(&r.dir) {
                    t.remove(&r.name);
                }
                if let Some(m) = self.metas.get_mut(&r.dir) {
                    m.touch_dirty(r.mtime);
                }
                self.refresh_dir_size(r.dir);
            }
            Command::SetDeletedFlag(d) => match d.target {
                Target::Meta(id) => {
                    if let Some(m) = self.metas.get_mut(&id) {
                        m.deleted = true;
                        m.size = 0;
                        m.external_valid = 0;
                        m.touch_dirty(d.mtime);
                    }
                }
                Target::Chunk(key) => {
                    self.chunks.remove(&key);
                    self.staged.retain(|_, s| !(s.inode == key.inode && s.chunk_offset == key.offset));
                }
            },
            Command::TruncateRecord(t) => match t.target {
                Target::Meta(id) => {
                    if let Some(m) = self.metas.get_mut(&id) {
                        m.size = t.size;
                        m.external_valid = m.external_valid.min(t.size);
                        m.touch_dirty(t.mtime);
                    }
                }
                Target::Chunk(key) => {
                    if t.size <= key.offset {
                        self.chunks.remove(&key);
                    } else if let Some(c) = self.chunks.get_mut(&key) {
                        c.clip(t.size - key.offset);
                        c.dirty = true;
                        c.version += 1;
                    }
                }
            },
            Command::FoldStaged(f) => {
                let chunk = self.chunks.entry(f.chunk).or_insert_with(|| Chunk {
                    inode: f.chunk.inode,
                    offset: f.chunk.offset,
                    length: 0,
                    dirty: false,
                    version: 0,
                    pieces: Vec::new(),
                });
                if chunk.pieces.is_empty() {
                    if let Some(base) = &f.base {
                        chunk.pieces.push(Piece {
                            at: 0,
                            len: base.len,
                            source: WriteSource::ExternalFetch {
                                key: base.key.clone(),
                                object_offset: base.object_offset,
                            },
                        });
                        chunk.length = chunk.length.max(base.len);
                    }
                }
                for id in &f.stages {
                    if let Some(s) = self.staged.remove(id) {
                        chunk.length = chunk.length.max(s.at + s.len);
                        chunk.pieces.push(Piece { at: s.at, len: s.len, source: s.source });
                    }
                }
                chunk.dirty = true;
                chunk.version += 1;
            }
            Command::UpdateMeta(m) => {
                self.metas.insert(m.id, m.clone());
            }
            Command::ClearDirtyMeta(c) => {
                let Some(m) = self.metas.get_mut(&c.inode) else { return };
                if m.version != c.version {
                    return;
                }
                if m.deleted {
                    self.metas.remove(&c.inode);
                    self.dirs.remove(&c.inode);
                } else {
                    m.dirty = false;
                    m.persisted = c.persisted.clone();
                    m.persisted_gen = c.generation;
                    m.external_valid = if m.is_dir() { 0 } else { c.size };
                }
            }
            Command::ClearDirtyChunk(c) => match self.chunks.get_mut(&c.chunk) {
                Some(chunk) if chunk.version == c.version => {
                    chunk.dirty = false;
                    if let Some((r, len)) = c.compacted {
                        chunk.length = len;
                        chunk.pieces = vec![Piece { at: 0, len, source: WriteSource::SecondLevel(r) }];
                    }
                }
                Some(_) => {}
                None => {
                    if let Some((r, len)) = c.compacted {
                        self.chunks.insert(c.chunk, clean_chunk(c.chunk, len, r));
                    }
                }
            },
            Command::PinChunk(f) => {
                let version = self.chunks.get(&f.chunk).map_or(0, |c| c.version) + 1;
                let mut c = clean_chunk(f.chunk, f.length, f.data);
                c.dirty = true;
                c.version = version;
                self.chunks.insert(f.chunk, c);
            }
            Command::MigrationReceive(m) => {
                for meta in &m.metas {
                    self.observe_id(meta.id);
                    self.metas.insert(meta.id, meta.clone());
                }
                for (meta, table) in &m.dirs {
                    self.observe_id(meta.id);
                    self.metas.insert(meta.id, meta.clone());
                    self.dirs.insert(meta.id, table.clone());
                }
                for c in &m.chunks {
                    self.chunks.insert(c.key(), c.clone());
                }
            }
            _ => {}
        }
    }

    /// Drops everything the node no longer owns after a ring change.
    pub fn retain_owned(&mut self, owns_meta: impl Fn(InodeId) -> bool, owns_chunk: impl Fn(ChunkKey) -> bool) {
        self.metas.retain(|id, _| owns_meta(*id));
        let metas = &self.metas;
        self.dirs.retain(|id, _| metas.contains_key(id));
        self.chunks.retain(|k, _| owns_chunk(*k));
        self.staged.retain(|_, s| owns_chunk(ChunkKey { inode: s.inode, offset: s.chunk_offset }));
    }

    /// Chunks of `inode` held by this node.
    pub fn chunks_of(&self, inode: InodeId) -> impl Iterator<Item = &Chunk> {
        let lo = ChunkKey { inode, offset: 0 };
        let hi = ChunkKey { inode, offset: u64::MAX };
        self.chunks.range(lo..=hi).map(|(_, c)| c)
    }
}

fn clean_chunk(key: ChunkKey, len: u64, r: SecondLevelRef) -> Chunk {
    Chunk {
        inode: key.inode,
        offset: key.offset,
        length: len,
        dirty: false,
        version: 0,
        pieces: if len == 0 {
            Vec::new()
        } else {
            vec![Piece { at: 0, len, source: WriteSource::SecondLevel(r) }]
        },
    }
}

/// Resolves chunk bytes: zero-filled buffer of `chunk.length` overlaid by
/// every piece in order.
pub fn compose_chunk<E>(
    chunk: &Chunk,
    mut read_local: impl FnMut(&SecondLevelRef) -> Result<Vec<u8>, E>,
    mut read_external: impl FnMut(&ExtKey, u64, u64) -> Result<Vec<u8>, E>,
) -> Result<Vec<u8>, E> {
    let mut buf = vec![0u8; chunk.length as usize];
    for piece in &chunk.pieces {
        let start = piece.at.min(chunk.length) as usize;
        let end = (piece.at + piece.len).min(chunk.length) as usize;
        if end <= start {
            continue;
        }
        let want = (end - start) as u64;
        let bytes = match &piece.source {
            WriteSource::SecondLevel(r) => {
                let mut b = read_local(r)?;
                b.truncate(want as usize);
                b
            }
            WriteSource::ExternalFetch { key, object_offset } => read_external(key, *object_offset, want)?,
        };
        let n = bytes.len().min(end - start);
        buf[start..start + n].copy_from_slice(&bytes[..n]);
    }
    Ok(buf)
}

/// Splits a write into chunk-aligned fragments: `(chunk offset, offset within
/// the chunk, range within data)`.
pub fn split_write(offset: u64, len: u64, chunk_size: u64) -> Vec<(u64, u64, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut pos = offset;
    let end = offset + len;
    while pos < end {
        let chunk = pos - pos % chunk_size;
        let stop = end.min(chunk + chunk_size);
        out.push((chunk, pos - chunk, (pos - offset) as usize..(stop - offset) as usize));
        pos = stop;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CS: u64 = 16 << 20;

    fn sl(offset: u64, length: u64) -> SecondLevelRef {
        SecondLevelRef { file_id: 0, offset, length }
    }

    fn stage(store: &mut InodeStore, part: u32, chunk: u64, at: u64, len: u64, r: SecondLevelRef) -> StageId {
        let id = StageId { client: 1, seq: 1, part };
        store.apply(&Command::StageWriteRecord(StagedWrite {
            id,
            inode: 9,
            chunk_offset: chunk,
            at,
            len,
            source: WriteSource::SecondLevel(r),
        }));
        id
    }

    #[test]
    fn split_small_write_single_fragment() {
        assert_eq!(split_write(0, 8192, CS), vec![(0, 0, 0..8192)]);
    }

    #[test]
    fn split_across_boundary() {
        let off = CS - 4096;
        let parts = split_write(off, 1 << 20, CS);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0], (0, CS - 4096, 0..4096));
        assert_eq!(parts[1], (CS, 0, 4096..(1 << 20)));
    }

    #[test]
    fn fold_installs_external_base_before_staged_data() {
        let mut s = InodeStore::new(1);
        let key = ExtKey::new("b", "f");
        let id = stage(&mut s, 0, 2 * CS, 0, 10, sl(0, 10));
        s.apply(&Command::FoldStaged(FoldStaged {
            chunk: ChunkKey { inode: 9, offset: 2 * CS },
            stages: vec![id],
            base: Some(ExternalBase { key: key.clone(), object_offset: 2 * CS, len: 100 }),
        }));
        let c = &s.chunks[&ChunkKey { inode: 9, offset: 2 * CS }];
        assert_eq!(
            c.pieces[0].source,
            WriteSource::ExternalFetch { key, object_offset: 33554432 }
        );
        assert_eq!(c.pieces[1].source, WriteSource::SecondLevel(sl(0, 10)));
        assert_eq!(c.length, 100);
        assert!(c.dirty);
        assert!(s.staged.is_empty());
    }

    #[test]
    fn compose_overlays_in_order() {
        let mut s = InodeStore::new(1);
        let a = stage(&mut s, 0, 0, 0, 6, sl(0, 6));
        let b = stage(&mut s, 1, 0, 2, 2, sl(6, 2));
        s.apply(&Command::FoldStaged(FoldStaged {
            chunk: ChunkKey { inode: 9, offset: 0 },
            stages: vec![a, b],
            base: None,
        }));
        let disk = b"abcdefXY".to_vec();
        let c = &s.chunks[&ChunkKey { inode: 9, offset: 0 }];
        let out = compose_chunk::<()>(
            c,
            |r| Ok(disk[r.offset as usize..(r.offset + r.length) as usize].to_vec()),
            |_, _, _| unreachable!(),
        )
        .unwrap();
        assert_eq!(out, b"abXYef");
    }

    #[test]
    fn truncate_clips_pieces_so_regrowth_reads_zeros() {
        let mut s = InodeStore::new(1);
        let a = stage(&mut s, 0, 0, 0, 6, sl(0, 6));
        let key = ChunkKey { inode: 9, offset: 0 };
        s.apply(&Command::FoldStaged(FoldStaged { chunk: key, stages: vec![a], base: None }));
        s.apply(&Command::TruncateRecord(Truncate { target: Target::Chunk(key), size: 2, mtime: 1 }));
        let c = s.chunks.get_mut(&key).unwrap();
        assert_eq!(c.length, 2);
        c.length = 6;
        let disk = b"abcdef".to_vec();
        let out = compose_chunk::<()>(
            c,
            |r| Ok(disk[r.offset as usize..(r.offset + r.length) as usize].to_vec()),
            |_, _, _| unreachable!(),
        )
        .unwrap();
        assert_eq!(out, b"ab\0\0\0\0");
    }

    #[test]
    fn clear_dirty_respects_version() {
        let mut s = InodeStore::new(1);
        let mut m = InodeMeta::new(9, InodeKind::File, Some(ExtKey::new("b", "f")), 0);
        m.touch_dirty(5);
        s.apply(&Command::UpdateMeta(m.clone()));
        s.apply(&Command::ClearDirtyMeta(ClearDirtyMeta {
            inode: 9,
            version: m.version + 1,
            persisted: None,
            generation: 0,
            size: 0,
        }));
        assert!(s.metas[&9].dirty);
        s.apply(&Command::ClearDirtyMeta(ClearDirtyMeta {
            inode: 9,
            version: m.version,
            persisted: Some(ExtKey::new("b", "f")),
            generation: 4,
            size: 0,
        }));
        assert!(!s.metas[&9].dirty);
        assert_eq!(s.metas[&9].persisted_gen, 4);
    }

    #[test]
    fn id_allocator_tracks_observed_ids() {
        let mut s = InodeStore::new(3);
        assert_eq!(s.allocate_id(), pack_inode_id(3, 1));
        s.observe_id(pack_inode_id(3, 10));
        s.observe_id(pack_inode_id(4, 50));
        assert_eq!(s.allocate_id(), pack_inode_id(3, 11));
    }
}
